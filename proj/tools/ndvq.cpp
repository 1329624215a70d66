#include "ndvq/cli.hpp"

int main(int argc, char** argv) { return ndvq::cli::run_cli(argc, argv); }
