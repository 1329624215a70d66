#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ndvq/audio.hpp"
#include "ndvq/codec.hpp"
#include "ndvq/common.hpp"
#include "ndvq/config.hpp"
#include "ndvq/metrics.hpp"
#include "ndvq/quantize.hpp"
#include "ndvq/train.hpp"

// Operator surface: train / encode / decode / eval / stats over the
// library. Kept header-only so the subcommands are testable in-process.

namespace ndvq::cli {

namespace detail {

inline std::vector<AudioBuffer> load_wav_dir(const std::string& dir) {
    std::vector<std::string> paths;
    for (const auto& entry : std::filesystem::directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == ".wav") paths.push_back(entry.path().string());
    if (paths.empty()) throw IoError("no .wav files in " + dir);
    std::sort(paths.begin(), paths.end());
    std::vector<AudioBuffer> clips;
    clips.reserve(paths.size());
    for (const std::string& p : paths) clips.push_back(load_wav(p));
    return clips;
}

inline void check_bitstream_matches(const BitstreamHeader& h, const CodecConfig& cfg) {
    const auto fail = [](const std::string& field, const std::string& got, const std::string& want) {
        throw ConfigError("bitstream/checkpoint mismatch on " + field + ": bitstream has " + got +
                          ", checkpoint has " + want);
    };
    if (static_cast<int>(h.sample_rate) != cfg.sample_rate)
        fail("sample_rate", std::to_string(h.sample_rate), std::to_string(cfg.sample_rate));
    std::vector<std::uint8_t> want_strides;
    for (const int s : cfg.strides) want_strides.push_back(static_cast<std::uint8_t>(s));
    if (h.strides != want_strides) fail("strides", std::to_string(h.strides.size()) + " entries", "config strides");
    if (h.latent_dim != cfg.latent_dim)
        fail("latent_dim", std::to_string(h.latent_dim), std::to_string(cfg.latent_dim));
    if (h.codebook_size != cfg.codebook_size)
        fail("codebook_size", std::to_string(h.codebook_size), std::to_string(cfg.codebook_size));
}

inline std::size_t quantizer_layers(const AnyQuantizer& q) {
    return std::visit([](const auto& rq) { return rq.layers.size(); }, q);
}

inline LatentSequence decode_any(const AnyQuantizer& q, const CodeIndexGrid& grid) {
    return std::visit([&](const auto& rq) { return decode_indices(rq, grid); }, q);
}

inline CodeIndexGrid infer_indices(const AnyQuantizer& q, const LatentSequence& z, std::size_t n_q) {
    return std::visit(
        [&](const auto& rq) {
            auto active = rq;
            active.set_active_layers(n_q);
            return quantize_infer(active, z).indices;
        },
        q);
}

inline EvalReport eval_any(const AnyQuantizer& q, const ToyCodecModel& model,
                           std::span<const AudioBuffer> clips, std::size_t n_q) {
    return std::visit([&](const auto& rq) { return evaluate(model, rq, clips, n_q); }, q);
}

}  // namespace detail

inline int cmd_train(const std::string& config_path, const std::string& out_dir,
                     const std::vector<std::string>& overrides) {
    const TrainConfig cfg = load_train_config(config_path, overrides);
    std::cout << "resolved config:\n" << to_json(cfg).dump(2) << "\n";
    const TrainRun run = run_training(cfg, out_dir);
    std::cout << "trained " << run.history.size() << " steps\n";
    if (!run.history.empty()) {
        std::printf("final losses: time_l1=%.6g mel=%.6g codebook=%.6g total=%.6g\n", run.history.back().time_l1,
                    run.history.back().mel, run.history.back().codebook, run.history.back().total);
    }
    std::printf("held-out si_sdr: initial=%.3f dB final=%.3f dB\n", run.initial_eval.si_sdr_db,
                run.final_eval.si_sdr_db);
    std::cout << "checkpoint: " << out_dir << "/checkpoint_final\n";
    return 0;
}

inline int cmd_encode(const std::string& checkpoint_dir, const std::string& input_wav,
                      const std::string& output_ndvc, double bandwidth_kbps) {
    const Checkpoint ckpt = load_checkpoint(checkpoint_dir);
    const CodecConfig& cfg = ckpt.config.codec;
    const std::size_t n_q = bandwidth_to_nq(bandwidth_kbps, cfg.frame_rate(), cfg.bits_per_code(),
                                            std::min<std::size_t>(cfg.max_layers, detail::quantizer_layers(ckpt.quantizer)));

    const AudioBuffer x = load_wav(input_wav);
    const LatentSequence z = encode(ckpt.model, x);
    const CodeIndexGrid grid = detail::infer_indices(ckpt.quantizer, z, n_q);
    const auto bytes = pack_bitstream(grid, BitstreamHeader::from_config(cfg));
    write_file_bytes(output_ndvc, bytes);

    const double bitrate = cfg.frame_rate() * static_cast<double>(n_q) * cfg.bits_per_code();
    std::printf("encoded %zu frames x %zu layers; bitrate %.3f kbps; %zu bytes\n", grid.rows, n_q,
                bitrate / 1000.0, bytes.size());
    return 0;
}

inline int cmd_decode(const std::string& checkpoint_dir, const std::string& input_ndvc,
                      const std::string& output_wav) {
    const Checkpoint ckpt = load_checkpoint(checkpoint_dir);
    const auto [header, grid] = unpack_bitstream(read_file_bytes(input_ndvc));
    detail::check_bitstream_matches(header, ckpt.config.codec);
    if (header.n_q > detail::quantizer_layers(ckpt.quantizer))
        throw ConfigError("bitstream/checkpoint mismatch on n_q: bitstream has " + std::to_string(header.n_q) +
                          ", checkpoint has " + std::to_string(detail::quantizer_layers(ckpt.quantizer)) + " layers");

    const LatentSequence latents = detail::decode_any(ckpt.quantizer, grid);
    const AudioBuffer out = decode(ckpt.model, latents);
    save_wav(output_wav, out);
    std::printf("decoded %zu frames to %zu samples at %d Hz\n", grid.rows, out.samples.size(), out.sample_rate);
    return 0;
}

inline int cmd_eval(const std::string& checkpoint_dir, const std::string& dataset_dir, bool synthetic,
                    const std::vector<double>& bandwidths, const std::string& out_prefix,
                    std::uint64_t seed_override, bool has_seed) {
    Checkpoint ckpt = load_checkpoint(checkpoint_dir);
    if (has_seed) ckpt.config.seed = seed_override;

    std::vector<AudioBuffer> clips;
    if (synthetic) {
        SyntheticDatasetConfig ds = ckpt.config.dataset;
        ds.sample_rate = ckpt.config.dataset_sample_rate();
        clips = generate_dataset(ds, ckpt.config.clip_length, ckpt.config.seed);
    } else {
        clips = detail::load_wav_dir(dataset_dir);
    }

    const CodecConfig& cfg = ckpt.config.codec;
    for (const double bw : bandwidths) {
        const std::size_t n_q = bandwidth_to_nq(bw, cfg.frame_rate(), cfg.bits_per_code(),
                                                std::min<std::size_t>(cfg.max_layers, detail::quantizer_layers(ckpt.quantizer)));
        const EvalReport report = detail::eval_any(ckpt.quantizer, ckpt.model, clips, n_q);
        std::printf("--- bandwidth %.3g kbps (n_q=%zu) ---\n", bw, n_q);
        std::cout << report.to_text();
        if (!out_prefix.empty()) {
            char suffix[64];
            std::snprintf(suffix, sizeof(suffix), "_bw%g", bw);
            ndvq::detail::write_text(out_prefix + suffix + ".txt", report.to_text());
            ndvq::detail::write_text(out_prefix + suffix + ".json", eval_report_to_json(report).dump(2) + "\n");
        }
    }
    return 0;
}

inline int cmd_stats(const std::string& checkpoint_dir, const std::string& dataset_dir, bool synthetic) {
    const Checkpoint ckpt = load_checkpoint(checkpoint_dir);
    const bool is_normal = std::holds_alternative<NormalRq>(ckpt.quantizer);
    const std::size_t layers = detail::quantizer_layers(ckpt.quantizer);
    const std::size_t K = std::visit([](const auto& rq) { return rq.codebook_size(); }, ckpt.quantizer);
    const std::size_t D = std::visit([](const auto& rq) { return rq.dim(); }, ckpt.quantizer);

    std::printf("codebooks: kind=%s layers=%zu K=%zu D=%zu bits_per_code=%d\n",
                is_normal ? "ndvq" : "euclidean", layers, K, D, ckpt.config.codec.bits_per_code());

    std::vector<UsageHistogram> pooled;
    if (!dataset_dir.empty() || synthetic) {
        std::vector<AudioBuffer> clips;
        if (synthetic) {
            SyntheticDatasetConfig ds = ckpt.config.dataset;
            ds.sample_rate = ckpt.config.dataset_sample_rate();
            clips = generate_dataset(ds, ckpt.config.clip_length, ckpt.config.seed);
        } else {
            clips = detail::load_wav_dir(dataset_dir);
        }
        pooled.assign(layers, UsageHistogram(K));
        for (const AudioBuffer& clip : clips) {
            const LatentSequence z = encode(ckpt.model, clip);
            const CodeIndexGrid grid = detail::infer_indices(ckpt.quantizer, z, layers);
            const auto hists = usage_from_indices(grid, K);
            for (std::size_t l = 0; l < layers; ++l) pooled[l].merge(hists[l]);
        }
    }

    std::printf("%-7s %-12s %-12s %s\n", "layer", "sigma_min", "sigma_max", pooled.empty() ? "" : "entropy_bits");
    for (std::size_t l = 0; l < layers; ++l) {
        const bool highlight = l + 1 == 1 || l + 1 == 8 || l + 1 == 16 || l + 1 == 32;
        double smin = 0.0, smax = 0.0;
        if (is_normal) {
            const NormalCodebook& cb = std::get<NormalRq>(ckpt.quantizer).layers[l];
            smin = 1e300;
            smax = 0.0;
            for (std::size_t k = 0; k < cb.codes; ++k)
                for (std::size_t d = 0; d < cb.dim; ++d) {
                    const double s = cb.sigma(k, d);
                    smin = std::min(smin, s);
                    smax = std::max(smax, s);
                }
        }
        char label[16];
        std::snprintf(label, sizeof(label), "%zu%s", l + 1, highlight ? "*" : "");
        if (pooled.empty())
            std::printf("%-7s %-12.6f %-12.6f\n", label, smin, smax);
        else
            std::printf("%-7s %-12.6f %-12.6f %.4f\n", label, smin, smax, usage_entropy(pooled[l]));
    }
    return 0;
}

/// Entry point shared by the binary and the in-process tests.
inline int run_cli(int argc, const char* const* argv) {
    CLI::App app{"ndvq: residual vector-quantization audio codec"};
    app.require_subcommand(1);

    std::string config_path, out_dir;
    std::vector<std::string> overrides;
    std::uint64_t seed = 0;
    bool has_seed = false;

    auto* train_cmd = app.add_subcommand("train", "train a codec on synthetic data");
    train_cmd->add_option("--config", config_path, "training config (json)")->required();
    train_cmd->add_option("--out", out_dir, "output directory")->required();
    train_cmd->add_option("--set", overrides, "config override key=value (dotted paths)");
    auto* train_seed = train_cmd->add_option("--seed", seed, "override config seed");

    std::string checkpoint_dir, input_path, output_path;
    double bandwidth = 0.0;
    auto* encode_cmd = app.add_subcommand("encode", "compress a wav file");
    encode_cmd->add_option("--checkpoint", checkpoint_dir, "checkpoint directory")->required();
    encode_cmd->add_option("input", input_path, "input wav")->required();
    encode_cmd->add_option("output", output_path, "output .ndvc")->required();
    encode_cmd->add_option("--bandwidth", bandwidth, "target bandwidth in kbps")->required();

    auto* decode_cmd = app.add_subcommand("decode", "reconstruct a wav from a .ndvc stream");
    decode_cmd->add_option("--checkpoint", checkpoint_dir, "checkpoint directory")->required();
    decode_cmd->add_option("input", input_path, "input .ndvc")->required();
    decode_cmd->add_option("output", output_path, "output wav")->required();

    std::string dataset_dir, out_prefix;
    bool synthetic = false;
    std::vector<double> bandwidths;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    eval_cmd->add_option("--checkpoint", checkpoint_dir, "checkpoint directory")->required();
    eval_cmd->add_option("--dataset", dataset_dir, "directory of wav clips");
    eval_cmd->add_flag("--synthetic", synthetic, "evaluate on the config's synthetic dataset");
    eval_cmd->add_option("--bandwidth", bandwidths, "bandwidths in kbps")->required();
    eval_cmd->add_option("--out", out_prefix, "report file prefix");
    auto* eval_seed = eval_cmd->add_option("--seed", seed, "override config seed (synthetic data)");

    auto* stats_cmd = app.add_subcommand("stats", "codebook geometry and usage entropy");
    stats_cmd->add_option("--checkpoint", checkpoint_dir, "checkpoint directory")->required();
    stats_cmd->add_option("--dataset", dataset_dir, "directory of wav clips for usage stats");
    stats_cmd->add_flag("--synthetic", synthetic, "usage stats on the config's synthetic dataset");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (train_cmd->parsed()) {
            has_seed = train_seed->count() > 0;
            if (has_seed) overrides.push_back("seed=" + std::to_string(seed));
            return cmd_train(config_path, out_dir, overrides);
        }
        if (encode_cmd->parsed()) return cmd_encode(checkpoint_dir, input_path, output_path, bandwidth);
        if (decode_cmd->parsed()) return cmd_decode(checkpoint_dir, input_path, output_path);
        if (eval_cmd->parsed()) {
            if (dataset_dir.empty() && !synthetic)
                throw ConfigError("eval: provide --dataset or --synthetic");
            return cmd_eval(checkpoint_dir, dataset_dir, synthetic, bandwidths, out_prefix, seed,
                            eval_seed->count() > 0);
        }
        if (stats_cmd->parsed()) {
            if (dataset_dir.empty() && !synthetic) return cmd_stats(checkpoint_dir, "", false);
            return cmd_stats(checkpoint_dir, dataset_dir, synthetic);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace ndvq::cli
