#include <catch2/catch_amalgamated.hpp>

#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "ndvq/cli.hpp"

using namespace ndvq;
namespace fs = std::filesystem;

namespace {

struct CliResult {
    int exit_code;
    std::string out;
};

/// Runs the CLI in-process, capturing stdout (printf included).
CliResult run(std::vector<std::string> args) {
    std::vector<const char*> argv{"ndvq"};
    for (const auto& a : args) argv.push_back(a.c_str());

    std::fflush(stdout);
    const int saved = dup(1);
    const std::string capture = (fs::temp_directory_path() / "ndvq_cli_capture.txt").string();
    FILE* f = std::fopen(capture.c_str(), "w");
    dup2(fileno(f), 1);
    const int code = cli::run_cli(static_cast<int>(argv.size()), argv.data());
    std::fflush(stdout);
    dup2(saved, 1);
    close(saved);
    std::fclose(f);

    CliResult r{code, {}};
    const auto bytes = read_file_bytes(capture);
    r.out.assign(bytes.begin(), bytes.end());
    fs::remove(capture);
    return r;
}

std::string temp_dir(const char* name) {
    const auto p = fs::temp_directory_path() / name;
    fs::remove_all(p);
    return p.string();
}

std::string write_toy_config(const char* name, std::size_t steps = 2) {
    json j{{"seed", 11},
           {"steps", steps},
           {"batch_size", 1},
           {"clip_length", 128},
           {"learning_rate", 3e-4},
           {"quantizer", "ndvq"},
           {"codec",
            {{"sample_rate", 8000},
             {"strides", {2, 2}},
             {"latent_dim", 4},
             {"channels", {4}},
             {"codebook_size", 8},
             {"max_layers", 2}}},
           {"dataset", {{"n_clips", 12}, {"noise_level", 0.01}}}};
    const std::string path = (fs::temp_directory_path() / name).string();
    const std::string text = j.dump(2);
    write_file_bytes(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
    return path;
}

}  // namespace

TEST_CASE("train subcommand produces a checkpoint, csv and resolved config", "[cli]") {
    const std::string cfg = write_toy_config("ndvq_cli_cfg.json");
    const std::string out = temp_dir("ndvq_cli_train");
    const CliResult r = run({"train", "--config", cfg, "--out", out});
    CHECK(r.exit_code == 0);
    CHECK_THAT(r.out, Catch::Matchers::ContainsSubstring("resolved config"));
    CHECK(fs::exists(out + "/checkpoint_final/model.ndvw"));
    CHECK(fs::exists(out + "/checkpoint_final/codebooks.ndvq"));
    CHECK(fs::exists(out + "/checkpoint_final/config.json"));
    CHECK(fs::exists(out + "/loss_history.csv"));
    CHECK(fs::exists(out + "/eval_final.json"));
    fs::remove_all(out);
    fs::remove(cfg);
}

TEST_CASE("train with steps=0 emits only the initial checkpoint state", "[cli]") {
    const std::string cfg = write_toy_config("ndvq_cli_cfg0.json", 0);
    const std::string out = temp_dir("ndvq_cli_train0");
    const CliResult r = run({"train", "--config", cfg, "--out", out});
    CHECK(r.exit_code == 0);
    CHECK(fs::exists(out + "/checkpoint_final"));
    const auto csv = read_file_bytes(out + "/loss_history.csv");
    const std::string csv_text(csv.begin(), csv.end());
    CHECK(csv_text == "step,time_l1,mel,adversarial,feature_matching,codebook,discriminator,total\n");
    fs::remove_all(out);
    fs::remove(cfg);
}

TEST_CASE("malformed config exits nonzero without partial outputs", "[cli]") {
    const std::string path = (fs::temp_directory_path() / "ndvq_cli_bad.json").string();
    const std::string text = "{ not json";
    write_file_bytes(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
    const std::string out = temp_dir("ndvq_cli_bad_out");
    const CliResult r = run({"train", "--config", path, "--out", out});
    CHECK(r.exit_code != 0);
    CHECK_FALSE(fs::exists(out));
    fs::remove(path);
}

TEST_CASE("unknown config keys are rejected", "[cli]") {
    const std::string cfg = write_toy_config("ndvq_cli_unknown.json");
    json j = json::parse(std::string(reinterpret_cast<const char*>(read_file_bytes(cfg).data()),
                                     read_file_bytes(cfg).size()));
    j["learning_rte"] = 0.1;  // typo
    const std::string text = j.dump();
    write_file_bytes(cfg, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
    const std::string out = temp_dir("ndvq_cli_unknown_out");
    const CliResult r = run({"train", "--config", cfg, "--out", out});
    CHECK(r.exit_code != 0);
    CHECK_FALSE(fs::exists(out));
    fs::remove(cfg);
}

TEST_CASE("overrides change the resolved config", "[cli]") {
    const std::string cfg = write_toy_config("ndvq_cli_ovr.json");
    const std::string out = temp_dir("ndvq_cli_ovr_out");
    const CliResult r =
        run({"train", "--config", cfg, "--out", out, "--set", "steps=1", "--set", "codec.latent_dim=6",
             "--seed", "123"});
    CHECK(r.exit_code == 0);
    CHECK_THAT(r.out, Catch::Matchers::ContainsSubstring("\"latent_dim\": 6"));
    CHECK_THAT(r.out, Catch::Matchers::ContainsSubstring("\"seed\": 123"));
    const Checkpoint ckpt = load_checkpoint(out + "/checkpoint_final");
    CHECK(ckpt.config.steps == 1);
    CHECK(ckpt.config.codec.latent_dim == 6);
    fs::remove_all(out);
    fs::remove(cfg);
}

namespace {

/// Train a tiny checkpoint once and reuse it across the codec tests.
const std::string& shared_checkpoint() {
    static const std::string dir = [] {
        const std::string cfg = write_toy_config("ndvq_cli_shared.json", 2);
        const std::string out = temp_dir("ndvq_cli_shared_out");
        REQUIRE(run({"train", "--config", cfg, "--out", out}).exit_code == 0);
        fs::remove(cfg);
        return out + "/checkpoint_final";
    }();
    return dir;
}

std::string make_test_wav(const char* name, std::size_t n = 512) {
    AudioBuffer x;
    x.sample_rate = 8000;
    x.samples.resize(n);
    for (std::size_t t = 0; t < n; ++t)
        x.samples[t] = static_cast<float>(0.5 * std::sin(2.0 * kPi * 220.0 * t / 8000.0));
    const std::string path = (fs::temp_directory_path() / name).string();
    save_wav(path, x);
    return path;
}

}  // namespace

TEST_CASE("encode/decode round trip through files", "[cli]") {
    const std::string& ckpt = shared_checkpoint();
    const std::string wav = make_test_wav("ndvq_cli_in.wav");
    const std::string ndvc = (fs::temp_directory_path() / "ndvq_cli_out.ndvc").string();
    const std::string wav_out = (fs::temp_directory_path() / "ndvq_cli_rec.wav").string();

    // frame rate 2000 Hz, 3 bits per code: one layer is 6 kbps
    const CliResult enc = run({"encode", "--checkpoint", ckpt, wav, ndvc, "--bandwidth", "12"});
    CHECK(enc.exit_code == 0);
    CHECK_THAT(enc.out, Catch::Matchers::ContainsSubstring("bitrate"));

    const auto [header, grid] = unpack_bitstream(read_file_bytes(ndvc));
    CHECK(header.n_q == 2);
    CHECK(grid.rows == 128);  // 512 samples / stride product 4

    const CliResult dec = run({"decode", "--checkpoint", ckpt, ndvc, wav_out});
    CHECK(dec.exit_code == 0);
    const AudioBuffer rec = load_wav(wav_out);
    CHECK(rec.samples.size() == 512);
    CHECK(rec.sample_rate == 8000);

    // reruns are byte-identical
    const auto first = read_file_bytes(wav_out);
    REQUIRE(run({"decode", "--checkpoint", ckpt, ndvc, wav_out}).exit_code == 0);
    CHECK(read_file_bytes(wav_out) == first);
    const auto ndvc_bytes = read_file_bytes(ndvc);
    REQUIRE(run({"encode", "--checkpoint", ckpt, wav, ndvc, "--bandwidth", "12"}).exit_code == 0);
    CHECK(read_file_bytes(ndvc) == ndvc_bytes);

    fs::remove(wav);
    fs::remove(ndvc);
    fs::remove(wav_out);
}

TEST_CASE("invalid bandwidth names the valid set", "[cli]") {
    const std::string& ckpt = shared_checkpoint();
    const std::string wav = make_test_wav("ndvq_cli_in2.wav");
    const std::string ndvc = (fs::temp_directory_path() / "ndvq_cli_bad.ndvc").string();
    const CliResult r = run({"encode", "--checkpoint", ckpt, wav, ndvc, "--bandwidth", "5"});
    CHECK(r.exit_code != 0);
    fs::remove(wav);
}

TEST_CASE("decode rejects a checkpoint whose geometry mismatches the stream", "[cli]") {
    const std::string& ckpt = shared_checkpoint();
    const std::string wav = make_test_wav("ndvq_cli_in3.wav");
    const std::string ndvc = (fs::temp_directory_path() / "ndvq_cli_mm.ndvc").string();
    REQUIRE(run({"encode", "--checkpoint", ckpt, wav, ndvc, "--bandwidth", "6"}).exit_code == 0);

    // second checkpoint with a different latent dimension
    const std::string cfg = write_toy_config("ndvq_cli_mm.json", 0);
    json j = json::parse(std::string(reinterpret_cast<const char*>(read_file_bytes(cfg).data()),
                                     read_file_bytes(cfg).size()));
    j["codec"]["latent_dim"] = 6;
    const std::string text = j.dump();
    write_file_bytes(cfg, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
    const std::string out2 = temp_dir("ndvq_cli_mm_out");
    REQUIRE(run({"train", "--config", cfg, "--out", out2}).exit_code == 0);

    const CliResult r =
        run({"decode", "--checkpoint", out2 + "/checkpoint_final", ndvc, "/tmp/ndvq_never.wav"});
    CHECK(r.exit_code != 0);

    fs::remove_all(out2);
    fs::remove(cfg);
    fs::remove(wav);
    fs::remove(ndvc);
}

TEST_CASE("eval emits one report per bandwidth with entropy columns", "[cli]") {
    const std::string& ckpt = shared_checkpoint();
    const std::string prefix = (fs::temp_directory_path() / "ndvq_cli_eval").string();
    const CliResult r = run({"eval", "--checkpoint", ckpt, "--synthetic", "--bandwidth", "6",
                             "--bandwidth", "12", "--out", prefix});
    CHECK(r.exit_code == 0);
    CHECK_THAT(r.out, Catch::Matchers::ContainsSubstring("bandwidth 6"));
    CHECK_THAT(r.out, Catch::Matchers::ContainsSubstring("bandwidth 12"));
    CHECK_THAT(r.out, Catch::Matchers::ContainsSubstring("entropy_layer_1="));
    CHECK(fs::exists(prefix + "_bw6.txt"));
    CHECK(fs::exists(prefix + "_bw6.json"));
    CHECK(fs::exists(prefix + "_bw12.txt"));
    CHECK(fs::exists(prefix + "_bw12.json"));
    const auto j = json::parse(std::string(reinterpret_cast<const char*>(read_file_bytes(prefix + "_bw12.json").data()),
                                           read_file_bytes(prefix + "_bw12.json").size()));
    CHECK(j.at("layer_entropy_bits").size() == 2);
    fs::remove(prefix + "_bw6.txt");
    fs::remove(prefix + "_bw6.json");
    fs::remove(prefix + "_bw12.txt");
    fs::remove(prefix + "_bw12.json");
}

TEST_CASE("stats reports unit sigmas on a fresh init and one row per layer", "[cli]") {
    const std::string cfg = write_toy_config("ndvq_cli_stats.json", 0);  // steps=0: fresh init
    const std::string out = temp_dir("ndvq_cli_stats_out");
    REQUIRE(run({"train", "--config", cfg, "--out", out}).exit_code == 0);

    const CliResult bare = run({"stats", "--checkpoint", out + "/checkpoint_final"});
    CHECK(bare.exit_code == 0);
    CHECK_THAT(bare.out, Catch::Matchers::ContainsSubstring("kind=ndvq"));
    CHECK_THAT(bare.out, Catch::Matchers::ContainsSubstring("K=8"));
    CHECK_THAT(bare.out, Catch::Matchers::ContainsSubstring("1.000000"));  // fresh sigma
    CHECK_THAT(bare.out, Catch::Matchers::ContainsSubstring("1*"));        // highlighted layer 1

    const CliResult with_data = run({"stats", "--checkpoint", out + "/checkpoint_final", "--synthetic"});
    CHECK(with_data.exit_code == 0);
    CHECK_THAT(with_data.out, Catch::Matchers::ContainsSubstring("entropy_bits"));
    // one row per layer
    CHECK_THAT(with_data.out, Catch::Matchers::ContainsSubstring("\n1*"));
    CHECK_THAT(with_data.out, Catch::Matchers::ContainsSubstring("\n2 "));
    fs::remove_all(out);
    fs::remove(cfg);
}

TEST_CASE("missing subcommand or bad flags exit nonzero", "[cli]") {
    CHECK(run({}).exit_code != 0);
    CHECK(run({"encode", "--checkpoint", "/nonexistent", "a.wav", "b.ndvc", "--bandwidth", "6"}).exit_code != 0);
}
