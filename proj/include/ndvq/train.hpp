#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "ndvq/audio.hpp"
#include "ndvq/autodiff.hpp"
#include "ndvq/codec.hpp"
#include "ndvq/common.hpp"
#include "ndvq/config.hpp"
#include "ndvq/loss.hpp"
#include "ndvq/metrics.hpp"
#include "ndvq/quantize.hpp"

// End-to-end toy training: synthetic data, a recorded forward pass
// (encoder -> residual quantizer -> straight-through -> decoder -> losses),
// one Adam step per batch over backbone and codebook parameters, and the
// paired NDVQ-vs-Euclidean experiment.

namespace ndvq {

// rng stream tags; one split per purpose keeps parallel work from
// perturbing determinism
namespace rng_tags {
inline constexpr std::uint64_t kDataset = 0x64617461ULL;
inline constexpr std::uint64_t kEpsilon = 0x65707369ULL;
inline constexpr std::uint64_t kOrder = 0x6f726465ULL;
inline constexpr std::uint64_t kExpiry = 0x65787069ULL;
inline constexpr std::uint64_t kStubDisc = 0x73747562ULL;
}  // namespace rng_tags

/// Seed-deterministic sinusoid mixtures, peak-limited to 0.95.
inline std::vector<AudioBuffer> generate_dataset(const SyntheticDatasetConfig& cfg, std::size_t clip_length,
                                                 std::uint64_t seed) {
    cfg.validate();
    if (cfg.sample_rate <= 0) throw ConfigError("generate_dataset: sample_rate must be resolved");
    Rng rng = Rng::split(seed, rng_tags::kDataset);

    std::vector<AudioBuffer> clips;
    clips.reserve(cfg.n_clips);
    for (std::size_t c = 0; c < cfg.n_clips; ++c) {
        const int n_comp = cfg.components_min +
                           static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.components_max - cfg.components_min + 1)));
        std::vector<double> freq(n_comp), amp(n_comp), phase(n_comp);
        for (int i = 0; i < n_comp; ++i) {
            freq[i] = rng.uniform(50.0, 0.45 * cfg.sample_rate);
            amp[i] = rng.uniform(0.2, 1.0);
            phase[i] = rng.uniform(0.0, 2.0 * kPi);
        }
        std::vector<double> s(clip_length, 0.0);
        for (int i = 0; i < n_comp; ++i) {
            const double w = 2.0 * kPi * freq[i] / cfg.sample_rate;
            for (std::size_t t = 0; t < clip_length; ++t) s[t] += amp[i] * std::sin(w * static_cast<double>(t) + phase[i]);
        }
        if (cfg.noise_level > 0.0)
            for (double& v : s) v += cfg.noise_level * rng.gaussian();

        double peak = 0.0;
        for (const double v : s) peak = std::max(peak, std::fabs(v));
        const double scale = peak > 0.95 ? 0.95 / peak : 1.0;

        AudioBuffer clip;
        clip.sample_rate = cfg.sample_rate;
        clip.samples.resize(clip_length);
        for (std::size_t t = 0; t < clip_length; ++t) clip.samples[t] = static_cast<float>(s[t] * scale);
        clips.push_back(std::move(clip));
    }
    return clips;
}

struct DatasetSplit {
    std::vector<AudioBuffer> train;
    std::vector<AudioBuffer> holdout;
};

/// Last 10% of the clips (at least one) are never trained on.
inline DatasetSplit split_dataset(std::vector<AudioBuffer> clips) {
    if (clips.size() < 2) throw ConfigError("split_dataset: need at least 2 clips");
    const std::size_t n_holdout = std::max<std::size_t>(1, clips.size() / 10);
    DatasetSplit out;
    out.holdout.assign(clips.end() - static_cast<std::ptrdiff_t>(n_holdout), clips.end());
    clips.resize(clips.size() - n_holdout);
    out.train = std::move(clips);
    return out;
}

struct StepRecord {
    std::size_t step = 0;
    double time_l1 = 0.0;
    double mel = 0.0;
    double adversarial = 0.0;
    double feature_matching = 0.0;
    double codebook = 0.0;
    double discriminator = 0.0;
    double total = 0.0;
};

inline std::string loss_history_csv(std::span<const StepRecord> history) {
    std::string out = "step,time_l1,mel,adversarial,feature_matching,codebook,discriminator,total\n";
    char buf[256];
    for (const StepRecord& r : history) {
        std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.step, r.time_l1,
                      r.mel, r.adversarial, r.feature_matching, r.codebook, r.discriminator, r.total);
        out += buf;
    }
    return out;
}

// ---- model weight file ----
// Little-endian: magic "NDVW", version u32, n_sections u32; per section a
// u32 name length, the name bytes, u32 rank, u32 dims, then f32 data.

inline constexpr std::uint32_t kModelFormatVersion = 1;

inline std::vector<std::uint8_t> serialize_model(const ToyCodecModel& model) {
    std::vector<std::uint8_t> out;
    bin::put_bytes(out, "NDVW", 4);
    bin::put_le<std::uint32_t>(out, kModelFormatVersion);
    bin::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(model.tensors.size()));
    for (const TensorShape& t : model.tensors) {
        bin::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
        bin::put_bytes(out, t.name.data(), t.name.size());
        bin::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.dims.size()));
        for (const std::size_t d : t.dims) bin::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
        for (std::size_t i = 0; i < t.size(); ++i)
            bin::put_f32(out, static_cast<float>(model.params[t.offset + i]));
    }
    return out;
}

/// Fill an already-built model's parameters; section names and dims must
/// match the layout derived from the config.
inline void load_model_params(ToyCodecModel& model, std::span<const std::uint8_t> bytes) {
    bin::Reader r(bytes, "model checkpoint");
    char magic[4];
    r.get_bytes(magic, 4);
    if (std::string(magic, 4) != "NDVW") throw FormatError("model checkpoint: bad magic");
    const auto version = r.get_le<std::uint32_t>();
    if (version != kModelFormatVersion)
        throw FormatError("model checkpoint: unsupported version " + std::to_string(version));
    const auto n_sections = r.get_le<std::uint32_t>();
    if (n_sections != model.tensors.size())
        throw FormatError("model checkpoint: " + std::to_string(n_sections) + " sections, layout has " +
                          std::to_string(model.tensors.size()));
    for (const TensorShape& t : model.tensors) {
        const auto name_len = r.get_le<std::uint32_t>();
        std::string name(name_len, '\0');
        r.get_bytes(name.data(), name_len);
        if (name != t.name) throw FormatError("model checkpoint: section '" + name + "' where '" + t.name + "' expected");
        const auto rank = r.get_le<std::uint32_t>();
        if (rank != t.dims.size()) throw FormatError("model checkpoint: rank mismatch in " + name);
        for (const std::size_t d : t.dims) {
            const auto got = r.get_le<std::uint32_t>();
            if (got != d) throw FormatError("model checkpoint: dim mismatch in " + name);
        }
        for (std::size_t i = 0; i < t.size(); ++i) model.params[t.offset + i] = static_cast<double>(r.get_f32());
    }
}

// ---- checkpoint directory ----

struct Checkpoint {
    TrainConfig config;
    ToyCodecModel model;
    AnyQuantizer quantizer;
};

inline void save_checkpoint(const std::string& dir, const ToyCodecModel& model, const AnyQuantizer& rq,
                            const TrainConfig& cfg) {
    std::filesystem::create_directories(dir);
    write_file_bytes(dir + "/model.ndvw", serialize_model(model));
    save_codebooks(dir + "/codebooks.ndvq", rq);
    const std::string cfg_text = to_json(cfg).dump(2) + "\n";
    write_file_bytes(dir + "/config.json",
                     {reinterpret_cast<const std::uint8_t*>(cfg_text.data()), cfg_text.size()});
}

inline Checkpoint load_checkpoint(const std::string& dir) {
    const auto cfg_bytes = read_file_bytes(dir + "/config.json");
    json j;
    try {
        j = json::parse(std::string(reinterpret_cast<const char*>(cfg_bytes.data()), cfg_bytes.size()));
    } catch (const json::parse_error& e) {
        throw FormatError("checkpoint config: " + std::string(e.what()));
    }
    Checkpoint ckpt{train_config_from_json(j), {}, NormalRq{}};
    ckpt.model = ToyCodecModel::build(ckpt.config.codec);
    load_model_params(ckpt.model, read_file_bytes(dir + "/model.ndvw"));
    ckpt.quantizer = load_codebooks(dir + "/codebooks.ndvq");
    return ckpt;
}

// ---- the trainer ----

namespace detail {

/// Dedup registry of codebook entries touched this step. Each (layer,
/// code) pair gets one group of leaf variables so gradients from every
/// frame that selected it accumulate on the same nodes.
template <class CB>
struct CodeLeafSet {
    struct Group {
        std::size_t layer;
        std::size_t code;
        std::size_t base;  // offset into the leaf vectors, in units of dim
    };
    std::vector<std::unordered_map<std::size_t, std::size_t>> lookup;  // per layer: code -> group id
    std::vector<Group> groups;
    std::vector<ad::Var> mu_leaves;
    std::vector<ad::Var> log_sigma_leaves;  // normal codebooks only
    std::vector<ad::Var> sigma_vars;        // exp(log_sigma), reused by loss terms

    explicit CodeLeafSet(std::size_t n_layers) : lookup(n_layers) {}

    std::size_t group_for(ad::Tape& tape, const ResidualQuantizer<CB>& rq, std::size_t layer, std::size_t code) {
        auto [it, inserted] = lookup[layer].try_emplace(code, groups.size());
        if (!inserted) return it->second;
        const std::size_t dim = rq.dim();
        groups.push_back({layer, code, mu_leaves.size()});
        const auto mu = rq.layers[layer].mean_row(code);
        for (std::size_t d = 0; d < dim; ++d) mu_leaves.push_back(tape.input(mu[d]));
        if constexpr (std::is_same_v<CB, NormalCodebook>) {
            for (std::size_t d = 0; d < dim; ++d) {
                const ad::Var ls = tape.input(rq.layers[layer].log_sigmas[code * dim + d]);
                log_sigma_leaves.push_back(ls);
                sigma_vars.push_back(ad::exp(ls));
            }
        }
        return groups.size() - 1;
    }
};

}  // namespace detail

template <class CB>
class Trainer {
public:
    Trainer(TrainConfig cfg, std::vector<AudioBuffer> train_clips)
        : cfg_(std::move(cfg)),
          clips_(std::move(train_clips)),
          model_(ToyCodecModel::init_random(cfg_.codec, cfg_.seed)),
          backbone_grads_(model_.params.size(), 0.0),
          backbone_opt_(model_.params.size()),
          eps_rng_(Rng::split(cfg_.seed, rng_tags::kEpsilon)),
          order_rng_(Rng::split(cfg_.seed, rng_tags::kOrder)),
          expiry_rng_(Rng::split(cfg_.seed, rng_tags::kExpiry)) {
        if (clips_.empty()) throw ConfigError("trainer: empty training set");
        for (const AudioBuffer& c : clips_)
            if (c.samples.size() != cfg_.clip_length)
                throw ConfigError("trainer: clip length mismatch (expected " + std::to_string(cfg_.clip_length) + ")");

        // codebooks start from the latents the fresh backbone produces
        LatentSequence samples = collect_latents();
        rq_ = init_codebooks<CB>(cfg_.codec.max_layers, cfg_.codec.codebook_size, samples, cfg_.seed);

        const std::size_t dim = rq_.dim();
        const std::size_t kd = cfg_.codec.codebook_size * dim;
        for (std::size_t l = 0; l < rq_.layers.size(); ++l) {
            mean_opt_.emplace_back(kd);
            mean_grads_.emplace_back(kd, 0.0);
            if constexpr (std::is_same_v<CB, NormalCodebook>) {
                sigma_opt_.emplace_back(kd);
                sigma_grads_.emplace_back(kd, 0.0);
            }
        }
        order_.resize(clips_.size());
        std::iota(order_.begin(), order_.end(), 0);
        order_pos_ = order_.size();  // force a shuffle on first use
    }

    const ToyCodecModel& model() const { return model_; }
    const ResidualQuantizer<CB>& quantizer() const { return rq_; }

    StepRecord run_step(std::size_t step_index) {
        std::vector<std::size_t> batch(cfg_.batch_size);
        for (std::size_t& b : batch) b = next_clip_index();
        return train_step(step_index, batch);
    }

    /// One optimizer step on an explicit batch of training-clip indices.
    StepRecord train_step(std::size_t step_index, std::span<const std::size_t> batch) {
        tape_.clear();
        std::fill(backbone_grads_.begin(), backbone_grads_.end(), 0.0);
        for (auto& g : mean_grads_) std::fill(g.begin(), g.end(), 0.0);
        for (auto& g : sigma_grads_) std::fill(g.begin(), g.end(), 0.0);
        tape_.bind_params(model_.params, backbone_grads_);

        const bool gan_active = cfg_.gan_enabled && step_index >= effective_warmup();
        detail::CodeLeafSet<CB> leaves(rq_.layers.size());

        ad::Var lt = tape_.input(0.0), lf = tape_.input(0.0), la = tape_.input(0.0), lfm = tape_.input(0.0),
                lc = tape_.input(0.0);
        double ld_value = 0.0;

        std::vector<CodeIndexGrid> batch_indices;
        for (const std::size_t ci : batch) {
            const AudioBuffer& clip = clips_[ci];
            const std::size_t T = clip.samples.size();
            Mat<double> audio(1, T);
            for (std::size_t i = 0; i < T; ++i) audio.at(0, i) = static_cast<double>(clip.samples[i]);

            // encoder (recorded)
            const Mat<ad::Var> z_rec = encoder_forward(model_, TapeWeights{&tape_}, audio);
            LatentSequence z_vals(z_rec.rows, z_rec.cols);
            for (std::size_t i = 0; i < z_rec.data.size(); ++i) z_vals.data[i] = z_rec.data[i].val;

            // quantize on values; selection and sampling carry no gradient
            QuantizeTrace trace;
            const QuantizationResult q = quantize_train_traced(rq_, z_vals, eps_rng_, trace);
            batch_indices.push_back(q.indices);

            lc = lc + record_codebook_loss(z_rec, z_vals, q, trace, leaves);

            // decoder input: straight-through (or the sampled path when
            // reconstruction gradients are routed into the codebook)
            Mat<ad::Var> st(z_rec.rows, z_rec.cols);
            build_decoder_input(z_rec, z_vals, q, trace, leaves, st);

            const std::vector<ad::Var> xhat = decoder_forward(model_, TapeWeights{&tape_}, st, T);
            std::vector<double> x_ref(clip.samples.begin(), clip.samples.end());

            lt = lt + time_l1(std::span<const double>(x_ref), std::span<const ad::Var>(xhat));
            lf = lf + multiscale_mel_loss(std::span<const double>(x_ref), std::span<const ad::Var>(xhat),
                                          clip.sample_rate);

            if (gan_active) {
                const std::uint64_t disc_seed = splitmix64(cfg_.seed ^ rng_tags::kStubDisc);
                const auto real = stub_discriminator(std::span<const double>(x_ref), disc_seed);
                const auto fake = stub_discriminator(std::span<const ad::Var>(xhat), disc_seed);
                la = la + adversarial_gen_loss(std::span<const ad::Var>(fake.logits));
                lfm = lfm + feature_matching_loss(real, fake);

                std::vector<double> fake_vals(fake.logits.size());
                for (std::size_t i = 0; i < fake.logits.size(); ++i) fake_vals[i] = fake.logits[i].val;
                ld_value += discriminator_hinge_loss(std::span<const double>(real.logits),
                                                     std::span<const double>(fake_vals));
            }
        }

        const double inv_batch = 1.0 / static_cast<double>(batch.size());
        lt = lt * inv_batch;
        lf = lf * inv_batch;
        la = la * inv_batch;
        lfm = lfm * inv_batch;
        lc = lc * inv_batch;
        ld_value *= inv_batch;

        const ad::Var total = generator_total(lt, lf, la, lfm, lc, cfg_.weights);

        StepRecord rec;
        rec.step = step_index;
        rec.time_l1 = lt.val;
        rec.mel = lf.val;
        rec.adversarial = la.val;
        rec.feature_matching = lfm.val;
        rec.codebook = lc.val;
        rec.discriminator = ld_value;
        rec.total = total.val;
        check_finite(rec);

        tape_.backward(total);
        harvest_codebook_grads(leaves);
        clip_gradients();
        apply_updates();

        if constexpr (std::is_same_v<CB, EuclideanCodebook>) {
            if (cfg_.baseline_dead_code_expiry) expire_dead_codes(batch_indices, batch);
        }
        return rec;
    }

private:
    LatentSequence collect_latents() const {
        const std::size_t frames_per_clip =
            (cfg_.clip_length + cfg_.codec.stride_product() - 1) / cfg_.codec.stride_product();
        LatentSequence all(frames_per_clip * clips_.size(), cfg_.codec.latent_dim, 0.0);
        std::size_t row = 0;
        for (const AudioBuffer& clip : clips_) {
            const LatentSequence z = encode(model_, clip);
            for (std::size_t f = 0; f < z.rows; ++f, ++row)
                std::copy(z.row(f).begin(), z.row(f).end(), all.row(row).begin());
        }
        return all;
    }

    std::size_t effective_warmup() const {
        if (!cfg_.gan_enabled) return 0;
        return cfg_.discriminator_warmup_steps > 0 ? cfg_.discriminator_warmup_steps : cfg_.steps / 10;
    }

    std::size_t next_clip_index() {
        if (order_pos_ >= order_.size()) {
            order_rng_.shuffle(order_);
            order_pos_ = 0;
        }
        return order_[order_pos_++];
    }

    /// Eq.-style codebook objective, averaged over frames and summed over
    /// layers. Residual inputs re-enter the graph as z minus a constant
    /// offset, so the commitment term reaches the encoder at every layer.
    ad::Var record_codebook_loss(const Mat<ad::Var>& z_rec, const LatentSequence& z_vals,
                                 const QuantizationResult& q, const QuantizeTrace& trace,
                                 detail::CodeLeafSet<CB>& leaves) {
        const std::size_t frames = z_rec.rows;
        const std::size_t dim = z_rec.cols;
        const double gamma = std::is_same_v<CB, NormalCodebook> ? cfg_.weights.gamma : 0.0;

        ad::Var acc = tape_.input(0.0);
        std::vector<ad::Var> residual(dim);
        for (std::size_t l = 0; l < rq_.layers.size(); ++l) {
            ad::Var layer_acc = tape_.input(0.0);
            for (std::size_t f = 0; f < frames; ++f) {
                for (std::size_t d = 0; d < dim; ++d) {
                    const double offset = z_vals.at(f, d) - trace.residual_inputs[l].at(f, d);
                    residual[d] = offset == 0.0 ? z_rec.at(f, d) : z_rec.at(f, d) - offset;
                }
                const std::size_t g = leaves.group_for(tape_, rq_, l, q.indices.at(f, l));
                const std::size_t base = leaves.groups[g].base;
                std::span<const ad::Var> mu(leaves.mu_leaves.data() + base, dim);
                std::span<const ad::Var> sigma;
                if constexpr (std::is_same_v<CB, NormalCodebook>)
                    sigma = std::span<const ad::Var>(leaves.sigma_vars.data() + base, dim);
                layer_acc = layer_acc + codebook_loss(std::span<const ad::Var>(residual), mu, sigma,
                                                      cfg_.weights.beta, gamma);
            }
            acc = acc + layer_acc / static_cast<double>(frames);
        }
        return acc;
    }

    void build_decoder_input(const Mat<ad::Var>& z_rec, const LatentSequence& z_vals,
                             const QuantizationResult& q, const QuantizeTrace& trace,
                             detail::CodeLeafSet<CB>& leaves, Mat<ad::Var>& st) {
        const bool sampled_path = cfg_.sigma_reconstruction_gradients && std::is_same_v<CB, NormalCodebook>;
        if (!sampled_path) {
            for (std::size_t f = 0; f < z_rec.rows; ++f)
                for (std::size_t d = 0; d < z_rec.cols; ++d)
                    st.at(f, d) = tape_.unary(q.quantized.at(f, d), z_rec.at(f, d), 1.0);
            return;
        }
        if constexpr (std::is_same_v<CB, NormalCodebook>) {
            // z - sg(z) + sum_l (mu + eps*sigma): value is the sampled
            // quantization, gradient reaches z, mu and sigma
            for (std::size_t f = 0; f < z_rec.rows; ++f) {
                for (std::size_t d = 0; d < z_rec.cols; ++d) {
                    ad::Var v = z_rec.at(f, d) - z_vals.at(f, d);
                    for (std::size_t l = 0; l < rq_.layers.size(); ++l) {
                        const std::size_t g = leaves.group_for(tape_, rq_, l, q.indices.at(f, l));
                        const std::size_t base = leaves.groups[g].base;
                        v = v + leaves.mu_leaves[base + d] +
                            trace.epsilons[l].at(f, d) * leaves.sigma_vars[base + d];
                    }
                    st.at(f, d) = v;
                }
            }
        }
    }

    void check_finite(const StepRecord& rec) const {
        const auto bad = [](double v) { return !std::isfinite(v); };
        std::string term;
        if (bad(rec.time_l1)) term = "time_l1";
        else if (bad(rec.mel)) term = "mel";
        else if (bad(rec.adversarial)) term = "adversarial";
        else if (bad(rec.feature_matching)) term = "feature_matching";
        else if (bad(rec.codebook)) term = "codebook";
        else if (bad(rec.total)) term = "total";
        if (!term.empty())
            throw DomainError("train_step " + std::to_string(rec.step) + ": non-finite loss term '" + term + "'");
    }

    void harvest_codebook_grads(const detail::CodeLeafSet<CB>& leaves) {
        const std::size_t dim = rq_.dim();
        for (const auto& g : leaves.groups) {
            double* mg = mean_grads_[g.layer].data() + g.code * dim;
            for (std::size_t d = 0; d < dim; ++d) mg[d] += leaves.mu_leaves[g.base + d].adjoint();
            if constexpr (std::is_same_v<CB, NormalCodebook>) {
                double* sg = sigma_grads_[g.layer].data() + g.code * dim;
                for (std::size_t d = 0; d < dim; ++d) sg[d] += leaves.log_sigma_leaves[g.base + d].adjoint();
            }
        }
    }

    void clip_gradients() {
        if (cfg_.grad_clip_norm <= 0.0) return;
        double sq = 0.0;
        for (const double g : backbone_grads_) sq += g * g;
        for (const auto& v : mean_grads_)
            for (const double g : v) sq += g * g;
        for (const auto& v : sigma_grads_)
            for (const double g : v) sq += g * g;
        const double norm = std::sqrt(sq);
        if (norm <= cfg_.grad_clip_norm) return;
        const double scale = cfg_.grad_clip_norm / norm;
        for (double& g : backbone_grads_) g *= scale;
        for (auto& v : mean_grads_)
            for (double& g : v) g *= scale;
        for (auto& v : sigma_grads_)
            for (double& g : v) g *= scale;
    }

    void apply_updates() {
        if (cfg_.learning_rate == 0.0) return;  // losses still computed, parameters held
        ad::adam_step(model_.params, backbone_grads_, backbone_opt_, cfg_.learning_rate);
        for (std::size_t l = 0; l < rq_.layers.size(); ++l) {
            if constexpr (std::is_same_v<CB, NormalCodebook>) {
                ad::adam_step(rq_.layers[l].means, mean_grads_[l], mean_opt_[l], cfg_.learning_rate);
                ad::adam_step(rq_.layers[l].log_sigmas, sigma_grads_[l], sigma_opt_[l], cfg_.learning_rate);
                rq_.layers[l].clamp_log_sigmas();
            } else {
                ad::adam_step(rq_.layers[l].embeddings, mean_grads_[l], mean_opt_[l], cfg_.learning_rate);
            }
        }
    }

    void expire_dead_codes(std::span<const CodeIndexGrid> batch_indices, std::span<const std::size_t> batch) {
        const double decay = 0.99;
        const std::size_t K = cfg_.codec.codebook_size;
        const std::size_t dim = rq_.dim();
        std::vector<LatentSequence> batch_latents;
        for (std::size_t l = 0; l < rq_.layers.size(); ++l) {
            std::vector<double> freq(K, 0.0);
            std::size_t total = 0;
            for (const CodeIndexGrid& grid : batch_indices) {
                for (std::size_t f = 0; f < grid.rows; ++f) freq[grid.at(f, l)] += 1.0;
                total += grid.rows;
            }
            auto& ema = rq_.layers[l].usage_ema;
            if (ema.empty()) ema.assign(K, 1.0 / static_cast<double>(K));
            for (std::size_t k = 0; k < K; ++k)
                ema[k] = decay * ema[k] + (1.0 - decay) * freq[k] / static_cast<double>(total);

            const double floor = cfg_.dead_code_threshold / static_cast<double>(K);
            for (std::size_t k = 0; k < K; ++k) {
                if (ema[k] >= floor) continue;
                if (batch_latents.empty())
                    for (const std::size_t ci : batch) batch_latents.push_back(encode(model_, clips_[ci]));
                const LatentSequence& z = batch_latents[expiry_rng_.below(batch_latents.size())];
                const auto src = z.row(expiry_rng_.below(z.rows));
                auto dst = rq_.layers[l].mean_row(k);
                std::copy(src.begin(), src.end(), dst.begin());
                ema[k] = 1.0 / static_cast<double>(K);
            }
        }
    }

    TrainConfig cfg_;
    std::vector<AudioBuffer> clips_;
    ToyCodecModel model_;
    ResidualQuantizer<CB> rq_;
    std::vector<double> backbone_grads_;
    ad::AdamState backbone_opt_;
    std::vector<ad::AdamState> mean_opt_, sigma_opt_;
    std::vector<std::vector<double>> mean_grads_, sigma_grads_;
    ad::Tape tape_;
    Rng eps_rng_, order_rng_, expiry_rng_;
    std::vector<std::size_t> order_;
    std::size_t order_pos_ = 0;
};

// ---- orchestration ----

struct TrainRun {
    TrainConfig config;
    std::vector<AudioBuffer> holdout;
    ToyCodecModel model;
    AnyQuantizer quantizer;
    std::vector<StepRecord> history;
    EvalReport initial_eval;
    EvalReport final_eval;
};

inline json eval_report_to_json(const EvalReport& r) {
    return json{{"si_sdr_db", r.si_sdr_db},           {"mel_distance", r.mel_distance},
                {"stft_distance", r.stft_distance},   {"bandwidth_kbps", r.bandwidth_kbps},
                {"n_q", r.n_q},                       {"n_clips", r.n_clips},
                {"layer_entropy_bits", r.layer_entropy_bits}};
}

namespace detail {

inline void write_text(const std::string& path, const std::string& text) {
    write_file_bytes(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

template <class CB>
TrainRun run_training_impl(const TrainConfig& cfg, std::vector<AudioBuffer> clips, const std::string& out_dir) {
    DatasetSplit split = split_dataset(std::move(clips));
    Trainer<CB> trainer(cfg, std::move(split.train));

    TrainRun run;
    run.config = cfg;
    run.holdout = std::move(split.holdout);
    run.initial_eval =
        evaluate(trainer.model(), trainer.quantizer(), std::span<const AudioBuffer>(run.holdout),
                 cfg.codec.max_layers);

    if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        run.history.push_back(trainer.run_step(step));
        if (!out_dir.empty() && cfg.checkpoint_interval > 0 && (step + 1) % cfg.checkpoint_interval == 0 &&
            step + 1 < cfg.steps) {
            char name[64];
            std::snprintf(name, sizeof(name), "/checkpoint_step_%06zu", step + 1);
            save_checkpoint(out_dir + name, trainer.model(), AnyQuantizer(trainer.quantizer()), cfg);
        }
    }

    run.model = trainer.model();
    run.quantizer = AnyQuantizer(trainer.quantizer());
    run.final_eval = evaluate(trainer.model(), trainer.quantizer(),
                              std::span<const AudioBuffer>(run.holdout), cfg.codec.max_layers);

    if (!out_dir.empty()) {
        save_checkpoint(out_dir + "/checkpoint_final", run.model, run.quantizer, cfg);
        write_text(out_dir + "/loss_history.csv", loss_history_csv(run.history));
        write_text(out_dir + "/config.json", to_json(cfg).dump(2) + "\n");
        write_text(out_dir + "/eval_initial.txt", run.initial_eval.to_text());
        write_text(out_dir + "/eval_final.txt", run.final_eval.to_text());
        write_text(out_dir + "/eval_initial.json", eval_report_to_json(run.initial_eval).dump(2) + "\n");
        write_text(out_dir + "/eval_final.json", eval_report_to_json(run.final_eval).dump(2) + "\n");
    }
    return run;
}

}  // namespace detail

/// Train on an explicit dataset (split into train/held-out internally).
inline TrainRun train(const TrainConfig& cfg, std::vector<AudioBuffer> clips, const std::string& out_dir = "") {
    cfg.validate();
    if (cfg.quantizer == QuantizerKind::Ndvq)
        return detail::run_training_impl<NormalCodebook>(cfg, std::move(clips), out_dir);
    return detail::run_training_impl<EuclideanCodebook>(cfg, std::move(clips), out_dir);
}

/// Generate the synthetic dataset from the config, then train.
inline TrainRun run_training(const TrainConfig& cfg, const std::string& out_dir = "") {
    cfg.validate();
    SyntheticDatasetConfig ds = cfg.dataset;
    ds.sample_rate = cfg.dataset_sample_rate();
    return train(cfg, generate_dataset(ds, cfg.clip_length, cfg.seed), out_dir);
}

struct CompareResult {
    TrainRun ndvq_run;
    TrainRun baseline_run;
    double delta_si_sdr_db = 0.0;
    double delta_mel_distance = 0.0;
    double delta_stft_distance = 0.0;
    std::vector<double> delta_entropy_bits;  // ndvq - baseline, per layer
};

/// The controlled experiment: identical seed, data, data order and
/// backbone init; only the quantization rule differs.
inline CompareResult compare_quantizers(const TrainConfig& cfg, const std::string& out_dir = "") {
    cfg.validate();
    SyntheticDatasetConfig ds = cfg.dataset;
    ds.sample_rate = cfg.dataset_sample_rate();
    const std::vector<AudioBuffer> clips = generate_dataset(ds, cfg.clip_length, cfg.seed);

    TrainConfig ndvq_cfg = cfg;
    ndvq_cfg.quantizer = QuantizerKind::Ndvq;
    TrainConfig base_cfg = cfg;
    base_cfg.quantizer = QuantizerKind::Euclidean;

    CompareResult out;
    out.ndvq_run = train(ndvq_cfg, clips, out_dir.empty() ? "" : out_dir + "/ndvq");
    out.baseline_run = train(base_cfg, clips, out_dir.empty() ? "" : out_dir + "/euclidean");

    const EvalReport& a = out.ndvq_run.final_eval;
    const EvalReport& b = out.baseline_run.final_eval;
    out.delta_si_sdr_db = a.si_sdr_db - b.si_sdr_db;
    out.delta_mel_distance = a.mel_distance - b.mel_distance;
    out.delta_stft_distance = a.stft_distance - b.stft_distance;
    for (std::size_t l = 0; l < a.layer_entropy_bits.size(); ++l)
        out.delta_entropy_bits.push_back(a.layer_entropy_bits[l] - b.layer_entropy_bits[l]);

    if (!out_dir.empty()) {
        json j{{"ndvq", eval_report_to_json(a)},
               {"baseline", eval_report_to_json(b)},
               {"delta",
                {{"si_sdr_db", out.delta_si_sdr_db},
                 {"mel_distance", out.delta_mel_distance},
                 {"stft_distance", out.delta_stft_distance},
                 {"layer_entropy_bits", out.delta_entropy_bits}}}};
        detail::write_text(out_dir + "/compare.json", j.dump(2) + "\n");
    }
    return out;
}

}  // namespace ndvq
