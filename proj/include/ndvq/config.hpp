#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "ndvq/codec.hpp"
#include "ndvq/common.hpp"
#include "ndvq/loss.hpp"

namespace ndvq {

using json = nlohmann::json;

enum class QuantizerKind { Ndvq, Euclidean };

inline std::string to_string(QuantizerKind k) { return k == QuantizerKind::Ndvq ? "ndvq" : "euclidean"; }

inline QuantizerKind quantizer_kind_from_string(const std::string& s) {
    if (s == "ndvq") return QuantizerKind::Ndvq;
    if (s == "euclidean") return QuantizerKind::Euclidean;
    throw ConfigError("unknown quantizer kind '" + s + "' (expected ndvq or euclidean)");
}

/// Synthetic stand-in corpus: random mixtures of 2..5 sinusoids plus a
/// little noise, one fixed-length clip each.
struct SyntheticDatasetConfig {
    std::size_t n_clips = 200;
    int components_min = 2;
    int components_max = 5;
    double noise_level = 0.005;
    int sample_rate = 0;  // 0 = inherit the codec rate

    void validate() const {
        if (n_clips == 0) throw ConfigError("dataset: n_clips must be positive");
        if (components_min < 1 || components_max < components_min)
            throw ConfigError("dataset: invalid component range");
        if (noise_level < 0.0) throw ConfigError("dataset: noise_level must be non-negative");
    }
};

struct TrainConfig {
    std::uint64_t seed = 1;
    std::size_t steps = 2000;
    std::size_t batch_size = 2;
    std::size_t clip_length = 512;
    double learning_rate = 3e-4;
    QuantizerKind quantizer = QuantizerKind::Ndvq;
    bool gan_enabled = false;
    std::size_t discriminator_warmup_steps = 0;  // ignored while the GAN path is off
    bool sigma_reconstruction_gradients = false;
    double sigma_init = 1.0;  // shared initial sigma for normal codebooks
    bool baseline_dead_code_expiry = false;
    double dead_code_threshold = 0.01;
    double grad_clip_norm = 1.0;
    std::size_t checkpoint_interval = 0;  // 0 = final checkpoint only
    CodecConfig codec;
    LossWeights weights;
    SyntheticDatasetConfig dataset;

    int dataset_sample_rate() const { return dataset.sample_rate > 0 ? dataset.sample_rate : codec.sample_rate; }

    void validate() const {
        if (steps == 0 && checkpoint_interval > 0)
            throw ConfigError("train: checkpoint_interval with zero steps");
        if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
        if (learning_rate < 0.0) throw ConfigError("train: learning_rate must be non-negative");
        if (clip_length < static_cast<std::size_t>(codec.stride_product()))
            throw ConfigError("train: clip_length " + std::to_string(clip_length) +
                              " shorter than stride product " + std::to_string(codec.stride_product()));
        if (grad_clip_norm < 0.0) throw ConfigError("train: grad_clip_norm must be non-negative");
        codec.validate();
        dataset.validate();
    }
};

// ---- JSON round trip with unknown-key rejection ----

namespace detail {

inline void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
    if (!j.is_object()) throw ConfigError("config: expected object at " + where);
    for (const auto& [key, _] : j.items())
        if (!known.count(key)) throw ConfigError("config: unknown key '" + where + key + "'");
}

template <class T>
void take(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline json to_json(const CodecConfig& c) {
    return json{{"sample_rate", c.sample_rate}, {"strides", c.strides},      {"latent_dim", c.latent_dim},
                {"channels", c.channels},       {"codebook_size", c.codebook_size},
                {"max_layers", c.max_layers}};
}

inline CodecConfig codec_config_from_json(const json& j) {
    detail::reject_unknown(j, {"sample_rate", "strides", "latent_dim", "channels", "codebook_size", "max_layers"},
                           "codec.");
    CodecConfig c;
    detail::take(j, "sample_rate", c.sample_rate);
    detail::take(j, "strides", c.strides);
    detail::take(j, "latent_dim", c.latent_dim);
    detail::take(j, "channels", c.channels);
    detail::take(j, "codebook_size", c.codebook_size);
    detail::take(j, "max_layers", c.max_layers);
    return c;
}

inline json to_json(const LossWeights& w) {
    return json{{"lambda_t", w.lambda_t}, {"lambda_f", w.lambda_f}, {"lambda_a", w.lambda_a},
                {"lambda_fm", w.lambda_fm}, {"lambda_c", w.lambda_c}, {"lambda_d", w.lambda_d},
                {"beta", w.beta},           {"gamma", w.gamma}};
}

inline LossWeights loss_weights_from_json(const json& j) {
    detail::reject_unknown(
        j, {"lambda_t", "lambda_f", "lambda_a", "lambda_fm", "lambda_c", "lambda_d", "beta", "gamma"},
        "weights.");
    LossWeights w;
    detail::take(j, "lambda_t", w.lambda_t);
    detail::take(j, "lambda_f", w.lambda_f);
    detail::take(j, "lambda_a", w.lambda_a);
    detail::take(j, "lambda_fm", w.lambda_fm);
    detail::take(j, "lambda_c", w.lambda_c);
    detail::take(j, "lambda_d", w.lambda_d);
    detail::take(j, "beta", w.beta);
    detail::take(j, "gamma", w.gamma);
    return w;
}

inline json to_json(const SyntheticDatasetConfig& d) {
    return json{{"n_clips", d.n_clips},
                {"components_min", d.components_min},
                {"components_max", d.components_max},
                {"noise_level", d.noise_level},
                {"sample_rate", d.sample_rate}};
}

inline SyntheticDatasetConfig dataset_config_from_json(const json& j) {
    detail::reject_unknown(j, {"n_clips", "components_min", "components_max", "noise_level", "sample_rate"},
                           "dataset.");
    SyntheticDatasetConfig d;
    detail::take(j, "n_clips", d.n_clips);
    detail::take(j, "components_min", d.components_min);
    detail::take(j, "components_max", d.components_max);
    detail::take(j, "noise_level", d.noise_level);
    detail::take(j, "sample_rate", d.sample_rate);
    return d;
}

inline json to_json(const TrainConfig& c) {
    return json{{"seed", c.seed},
                {"steps", c.steps},
                {"batch_size", c.batch_size},
                {"clip_length", c.clip_length},
                {"learning_rate", c.learning_rate},
                {"quantizer", to_string(c.quantizer)},
                {"gan_enabled", c.gan_enabled},
                {"discriminator_warmup_steps", c.discriminator_warmup_steps},
                {"sigma_reconstruction_gradients", c.sigma_reconstruction_gradients},
                {"baseline_dead_code_expiry", c.baseline_dead_code_expiry},
                {"dead_code_threshold", c.dead_code_threshold},
                {"grad_clip_norm", c.grad_clip_norm},
                {"checkpoint_interval", c.checkpoint_interval},
                {"codec", to_json(c.codec)},
                {"weights", to_json(c.weights)},
                {"dataset", to_json(c.dataset)}};
}

inline TrainConfig train_config_from_json(const json& j) {
    detail::reject_unknown(j,
                           {"seed", "steps", "batch_size", "clip_length", "learning_rate", "quantizer",
                            "gan_enabled", "discriminator_warmup_steps", "sigma_reconstruction_gradients",
                            "baseline_dead_code_expiry", "dead_code_threshold", "grad_clip_norm",
                            "checkpoint_interval", "codec", "weights", "dataset"},
                           "");
    TrainConfig c;
    detail::take(j, "seed", c.seed);
    detail::take(j, "steps", c.steps);
    detail::take(j, "batch_size", c.batch_size);
    detail::take(j, "clip_length", c.clip_length);
    detail::take(j, "learning_rate", c.learning_rate);
    if (j.contains("quantizer")) c.quantizer = quantizer_kind_from_string(j.at("quantizer").get<std::string>());
    detail::take(j, "gan_enabled", c.gan_enabled);
    detail::take(j, "discriminator_warmup_steps", c.discriminator_warmup_steps);
    detail::take(j, "sigma_reconstruction_gradients", c.sigma_reconstruction_gradients);
    detail::take(j, "baseline_dead_code_expiry", c.baseline_dead_code_expiry);
    detail::take(j, "dead_code_threshold", c.dead_code_threshold);
    detail::take(j, "grad_clip_norm", c.grad_clip_norm);
    detail::take(j, "checkpoint_interval", c.checkpoint_interval);
    if (j.contains("codec")) c.codec = codec_config_from_json(j.at("codec"));
    if (j.contains("weights")) c.weights = loss_weights_from_json(j.at("weights"));
    if (j.contains("dataset")) c.dataset = dataset_config_from_json(j.at("dataset"));
    return c;
}

/// Apply a dotted-path override like "codec.latent_dim=16". The value is
/// parsed as JSON when possible, else taken as a string.
inline void apply_override(json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("override '" + assignment + "' is not of the form key=value");
    const std::string path = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);

    json value;
    try {
        value = json::parse(raw);
    } catch (const json::parse_error&) {
        value = raw;  // bare strings like quantizer=ndvq
    }

    json* node = &j;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
        if (key.empty()) throw ConfigError("override '" + assignment + "' has an empty path segment");
        if (dot == std::string::npos) {
            (*node)[key] = value;
            break;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

inline TrainConfig load_train_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
    const std::vector<std::uint8_t> bytes = read_file_bytes(path);
    json j;
    try {
        j = json::parse(std::string(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
    } catch (const json::parse_error& e) {
        throw ConfigError("config '" + path + "': " + e.what());
    }
    for (const std::string& o : overrides) apply_override(j, o);
    TrainConfig cfg = train_config_from_json(j);
    cfg.validate();
    return cfg;
}

}  // namespace ndvq
