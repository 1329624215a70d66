#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "ndvq/autodiff.hpp"
#include "ndvq/common.hpp"

// Residual vector quantization with two interchangeable codebook kinds:
// codes as normal distributions (mean + variance, density-based selection,
// reparameterized sampling in training, mean-only inference) and the
// plain Euclidean nearest-neighbor baseline.

namespace ndvq {

inline constexpr double kSigmaMin = 1e-4;
inline constexpr double kSigmaMax = 10.0;
inline constexpr double kLogSqrt2Pi = 0.9189385332046727;  // log(sqrt(2*pi))

/// Codebook whose entries are axis-aligned normal distributions. The
/// spread is stored as log(sigma) and kept inside [log 1e-4, log 10].
struct NormalCodebook {
    std::size_t codes = 0;
    std::size_t dim = 0;
    std::vector<double> means;       // codes x dim, row-major
    std::vector<double> log_sigmas;  // codes x dim, row-major

    NormalCodebook() = default;
    NormalCodebook(std::size_t k, std::size_t d)
        : codes(k), dim(d), means(k * d, 0.0), log_sigmas(k * d, 0.0) {}

    std::span<const double> mean_row(std::size_t k) const { return {means.data() + k * dim, dim}; }
    std::span<double> mean_row(std::size_t k) { return {means.data() + k * dim, dim}; }
    double sigma(std::size_t k, std::size_t d) const { return std::exp(log_sigmas[k * dim + d]); }

    void clamp_log_sigmas() {
        const double lo = std::log(kSigmaMin), hi = std::log(kSigmaMax);
        for (double& ls : log_sigmas) ls = std::clamp(ls, lo, hi);
    }
};

/// Baseline codebook: plain embedding vectors, nearest-neighbor selection.
struct EuclideanCodebook {
    std::size_t codes = 0;
    std::size_t dim = 0;
    std::vector<double> embeddings;  // codes x dim, row-major
    std::vector<double> usage_ema;   // optional statistics for dead-code expiry

    EuclideanCodebook() = default;
    EuclideanCodebook(std::size_t k, std::size_t d)
        : codes(k), dim(d), embeddings(k * d, 0.0), usage_ema(k, 0.0) {}

    std::span<const double> mean_row(std::size_t k) const { return {embeddings.data() + k * dim, dim}; }
    std::span<double> mean_row(std::size_t k) { return {embeddings.data() + k * dim, dim}; }
};

/// Frozen view of a normal codebook for repeated density evaluation;
/// the exp/log work over all K*D entries is paid once, not per frame.
struct NormalScorer {
    const NormalCodebook* cb;
    std::vector<double> inv_var;       // codes x dim: 1/sigma^2
    std::vector<double> neg_log_norm;  // per code: -(sum_d log sigma + D*log sqrt(2pi))

    explicit NormalScorer(const NormalCodebook& c) : cb(&c), inv_var(c.codes * c.dim), neg_log_norm(c.codes) {
        for (std::size_t k = 0; k < c.codes; ++k) {
            double log_sum = 0.0;
            for (std::size_t d = 0; d < c.dim; ++d) {
                const double s = std::exp(c.log_sigmas[k * c.dim + d]);
                inv_var[k * c.dim + d] = 1.0 / (s * s);
                log_sum += c.log_sigmas[k * c.dim + d];
            }
            neg_log_norm[k] = -(log_sum + static_cast<double>(c.dim) * kLogSqrt2Pi);
        }
    }

    double score(std::span<const double> z, std::size_t k) const {
        const double* mu = cb->means.data() + k * cb->dim;
        const double* iv = inv_var.data() + k * cb->dim;
        double quad = 0.0;
        for (std::size_t d = 0; d < cb->dim; ++d) {
            const double r = z[d] - mu[d];
            quad += r * r * iv[d];
        }
        return -0.5 * quad + neg_log_norm[k];
    }

    void scores(std::span<const double> z, std::span<double> out) const {
        for (std::size_t k = 0; k < cb->codes; ++k) out[k] = score(z, k);
    }

    std::size_t select(std::span<const double> z) const {
        std::size_t best = 0;
        double best_score = score(z, 0);
        for (std::size_t k = 1; k < cb->codes; ++k) {
            const double s = score(z, k);
            if (s > best_score) {  // ties keep the lowest index
                best_score = s;
                best = k;
            }
        }
        return best;
    }
};

struct EuclideanScorer {
    const EuclideanCodebook* cb;
    explicit EuclideanScorer(const EuclideanCodebook& c) : cb(&c) {}

    double sq_dist(std::span<const double> z, std::size_t k) const {
        const double* e = cb->embeddings.data() + k * cb->dim;
        double acc = 0.0;
        for (std::size_t d = 0; d < cb->dim; ++d) {
            const double r = z[d] - e[d];
            acc += r * r;
        }
        return acc;
    }

    std::size_t select(std::span<const double> z) const {
        std::size_t best = 0;
        double best_dist = sq_dist(z, 0);
        for (std::size_t k = 1; k < cb->codes; ++k) {
            const double d = sq_dist(z, k);
            if (d < best_dist) {
                best_dist = d;
                best = k;
            }
        }
        return best;
    }
};

inline NormalScorer make_scorer(const NormalCodebook& cb) { return NormalScorer(cb); }
inline EuclideanScorer make_scorer(const EuclideanCodebook& cb) { return EuclideanScorer(cb); }

/// Per-code log density of z under code k, summed over dimensions.
inline std::vector<double> log_density_scores(std::span<const double> z, const NormalCodebook& cb) {
    if (z.size() != cb.dim) throw std::invalid_argument("log_density_scores: dimension mismatch");
    std::vector<double> out(cb.codes);
    NormalScorer(cb).scores(z, out);
    return out;
}

/// Index of the most likely code distribution; ties break to the lowest index.
inline std::size_t select_code(std::span<const double> z, const NormalCodebook& cb) {
    if (z.size() != cb.dim) throw std::invalid_argument("select_code: dimension mismatch");
    return NormalScorer(cb).select(z);
}

/// Euclidean argmin over embeddings; ties break to the lowest index.
inline std::size_t nearest_neighbor(std::span<const double> z, const EuclideanCodebook& cb) {
    if (z.size() != cb.dim) throw std::invalid_argument("nearest_neighbor: dimension mismatch");
    return EuclideanScorer(cb).select(z);
}

/// mu + eps * sigma, elementwise.
inline std::vector<double> reparameterize(std::span<const double> mu, std::span<const double> sigma,
                                          std::span<const double> epsilon) {
    if (mu.size() != sigma.size() || mu.size() != epsilon.size())
        throw std::invalid_argument("reparameterize: length mismatch");
    std::vector<double> out(mu.size());
    for (std::size_t d = 0; d < mu.size(); ++d) out[d] = mu[d] + epsilon[d] * sigma[d];
    return out;
}

template <class CB>
struct ResidualQuantizer {
    std::vector<CB> layers;
    std::size_t active_layers = 0;

    std::size_t codebook_size() const { return layers.empty() ? 0 : layers[0].codes; }
    std::size_t dim() const { return layers.empty() ? 0 : layers[0].dim; }

    void set_active_layers(std::size_t n) {
        if (n < 1 || n > layers.size())
            throw ConfigError("active layer count " + std::to_string(n) + " outside [1, " +
                              std::to_string(layers.size()) + "]");
        active_layers = n;
    }
};

using NormalRq = ResidualQuantizer<NormalCodebook>;
using EuclideanRq = ResidualQuantizer<EuclideanCodebook>;

struct QuantizationResult {
    LatentSequence quantized;       // sum of per-layer outputs
    CodeIndexGrid indices;          // frames x active_layers
    LatentSequence final_residual;  // what the stack did not explain
};

/// Intermediate state the training loss needs: the residual each layer
/// saw and the noise each sample used.
struct QuantizeTrace {
    std::vector<LatentSequence> residual_inputs;  // per layer, frames x D
    std::vector<LatentSequence> epsilons;         // per layer, frames x D (zero when not sampling)
};

namespace detail {

/// Shared residual loop. In sampling mode each selected normal code emits
/// mu + eps*sigma with one fresh standard-normal draw per frame, per
/// layer, per dimension (in that order); otherwise the mean is used.
template <class CB>
QuantizationResult quantize_impl(const ResidualQuantizer<CB>& rq, const LatentSequence& z, Rng* rng,
                                 bool sample, QuantizeTrace* trace = nullptr) {
    if (rq.layers.empty()) throw std::invalid_argument("quantize: no codebook layers");
    if (z.cols != rq.dim()) throw std::invalid_argument("quantize: latent dimension mismatch");
    const std::size_t n_q = rq.active_layers == 0 ? rq.layers.size() : rq.active_layers;

    std::vector<decltype(make_scorer(rq.layers[0]))> scorers;
    scorers.reserve(n_q);
    for (std::size_t l = 0; l < n_q; ++l) scorers.push_back(make_scorer(rq.layers[l]));

    QuantizationResult res;
    res.quantized = LatentSequence(z.rows, z.cols, 0.0);
    res.indices = CodeIndexGrid(z.rows, n_q, 0);
    res.final_residual = z;  // becomes z - sum(y_i) in place

    if (trace) {
        trace->residual_inputs.assign(n_q, LatentSequence(z.rows, z.cols, 0.0));
        trace->epsilons.assign(n_q, LatentSequence(z.rows, z.cols, 0.0));
    }

    std::vector<double> y(z.cols);
    for (std::size_t f = 0; f < z.rows; ++f) {
        auto residual = res.final_residual.row(f);
        auto quant = res.quantized.row(f);
        for (std::size_t l = 0; l < n_q; ++l) {
            if (trace) std::copy(residual.begin(), residual.end(), trace->residual_inputs[l].row(f).begin());
            const std::size_t k = scorers[l].select(residual);
            res.indices.at(f, l) = static_cast<std::uint16_t>(k);
            const auto mu = rq.layers[l].mean_row(k);
            if constexpr (std::is_same_v<CB, NormalCodebook>) {
                if (sample) {
                    for (std::size_t d = 0; d < z.cols; ++d) {
                        const double eps = rng->gaussian();
                        if (trace) trace->epsilons[l].at(f, d) = eps;
                        y[d] = mu[d] + eps * rq.layers[l].sigma(k, d);
                    }
                } else {
                    std::copy(mu.begin(), mu.end(), y.begin());
                }
            } else {
                (void)sample;
                std::copy(mu.begin(), mu.end(), y.begin());
            }
            for (std::size_t d = 0; d < z.cols; ++d) {
                quant[d] += y[d];
                residual[d] -= y[d];
            }
        }
    }
    return res;
}

}  // namespace detail

/// Training-mode quantization: density selection plus reparameterized
/// sampling from the selected distribution (baseline codebooks emit their
/// embedding; the rng is untouched for them).
template <class CB>
QuantizationResult quantize_train(const ResidualQuantizer<CB>& rq, const LatentSequence& z, Rng& rng) {
    return detail::quantize_impl(rq, z, &rng, true);
}

/// quantize_train that also exposes per-layer residual inputs and noise
/// draws; the training objective reconstructs its graph from these.
template <class CB>
QuantizationResult quantize_train_traced(const ResidualQuantizer<CB>& rq, const LatentSequence& z, Rng& rng,
                                         QuantizeTrace& trace) {
    return detail::quantize_impl(rq, z, &rng, true, &trace);
}

/// Inference-mode quantization: identical to training with all eps forced
/// to zero, hence fully deterministic.
template <class CB>
QuantizationResult quantize_infer(const ResidualQuantizer<CB>& rq, const LatentSequence& z) {
    return detail::quantize_impl(rq, z, nullptr, false);
}

/// Mean-only reconstruction of latents from transmitted indices.
template <class CB>
LatentSequence decode_indices(const ResidualQuantizer<CB>& rq, const CodeIndexGrid& indices) {
    if (indices.cols > rq.layers.size())
        throw FormatError("decode_indices: grid has " + std::to_string(indices.cols) + " layers, quantizer has " +
                          std::to_string(rq.layers.size()));
    LatentSequence out(indices.rows, rq.dim(), 0.0);
    for (std::size_t f = 0; f < indices.rows; ++f) {
        auto row = out.row(f);
        for (std::size_t l = 0; l < indices.cols; ++l) {
            const std::size_t k = indices.at(f, l);
            if (k >= rq.layers[l].codes)
                throw FormatError("decode_indices: index " + std::to_string(k) + " out of range at frame " +
                                  std::to_string(f) + ", layer " + std::to_string(l));
            const auto mu = rq.layers[l].mean_row(k);
            for (std::size_t d = 0; d < row.size(); ++d) row[d] += mu[d];
        }
    }
    return out;
}

/// Codebook/commitment/variance objective with the stop-gradient split:
/// ||sg[mu]-z||^2 pulls z, beta*||mu-sg[z]||^2 pulls mu, gamma*||sigma||^2
/// shrinks sigma. Instantiates for plain doubles or recorded variables.
template <class S>
S codebook_loss(std::span<const S> z, std::span<const S> mu, std::span<const S> sigma, double beta,
                double gamma) {
    if (z.size() != mu.size() || (!sigma.empty() && sigma.size() != mu.size()))
        throw std::invalid_argument("codebook_loss: length mismatch");
    S commit = ad::zero_like(z[0]);
    S codebook = ad::zero_like(z[0]);
    for (std::size_t d = 0; d < z.size(); ++d) {
        commit = commit + ad::square(z[d] - ad::value_of(mu[d]));
        codebook = codebook + ad::square(mu[d] - ad::value_of(z[d]));
    }
    S total = commit + beta * codebook;
    if (!sigma.empty() && gamma != 0.0) {
        S reg = ad::zero_like(z[0]);
        for (const S& s : sigma) reg = reg + ad::square(s);
        total = total + gamma * reg;
    }
    return total;
}

/// Forward value = quantized, backward = identity onto z; the codebook
/// receives nothing through this path.
inline std::vector<ad::Var> straight_through(std::span<const ad::Var> z, std::span<const double> quantized) {
    if (z.size() != quantized.size()) throw std::invalid_argument("straight_through: shape mismatch");
    std::vector<ad::Var> out;
    out.reserve(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) out.push_back(z[i].tape->unary(quantized[i], z[i], 1.0));
    return out;
}

// ---- usage statistics ----

struct UsageHistogram {
    std::vector<std::uint64_t> counts;

    explicit UsageHistogram(std::size_t k = 0) : counts(k, 0) {}
    std::uint64_t total() const { return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0}); }

    void merge(const UsageHistogram& other) {
        if (other.counts.size() != counts.size()) throw std::invalid_argument("usage merge: size mismatch");
        for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
    }
};

/// Shannon entropy in bits of the empirical code distribution.
inline double usage_entropy(const UsageHistogram& hist) {
    const std::uint64_t total = hist.total();
    if (total == 0) throw std::invalid_argument("usage_entropy: empty histogram");
    double h = 0.0;
    for (const std::uint64_t c : hist.counts) {
        if (c == 0) continue;
        const double p = static_cast<double>(c) / static_cast<double>(total);
        h -= p * std::log2(p);
    }
    return h;
}

/// Per-layer histograms from an index grid.
inline std::vector<UsageHistogram> usage_from_indices(const CodeIndexGrid& indices, std::size_t codebook_size) {
    std::vector<UsageHistogram> out(indices.cols, UsageHistogram(codebook_size));
    for (std::size_t f = 0; f < indices.rows; ++f)
        for (std::size_t l = 0; l < indices.cols; ++l) out[l].counts[indices.at(f, l)] += 1;
    return out;
}

// ---- initialization ----

namespace detail {

template <class CB>
void assign_code_row(CB& cb, std::size_t k, std::span<const double> v) {
    auto row = cb.mean_row(k);
    std::copy(v.begin(), v.end(), row.begin());
}

}  // namespace detail

/// Layer 1 means are K distinct sample frames (drawn without replacement);
/// each later layer is seeded the same way from the residuals left by
/// mean-only quantization through the layers before it. Sigmas start at a
/// shared constant (1 by default), so the initial selection rule
/// coincides with nearest neighbor; small corpora want it well below the
/// latent scale so early sampling noise does not drown the signal.
template <class CB>
ResidualQuantizer<CB> init_codebooks(std::size_t n_layers, std::size_t codebook_size,
                                     const LatentSequence& sample_latents, std::uint64_t seed,
                                     double initial_sigma = 1.0) {
    if (n_layers < 1) throw ConfigError("init_codebooks: need at least one layer");
    if (initial_sigma < kSigmaMin || initial_sigma > kSigmaMax)
        throw ConfigError("init_codebooks: initial sigma outside the clamp range");
    if (codebook_size > 65536) throw ConfigError("init_codebooks: codebook size exceeds index width");
    if (sample_latents.rows < codebook_size)
        throw ConfigError("init_codebooks: " + std::to_string(sample_latents.rows) + " sample frames for " +
                          std::to_string(codebook_size) + " codes (need at least K)");

    Rng rng = Rng::split(seed, /*tag=*/0x636f6465626f6f6bULL);
    ResidualQuantizer<CB> rq;
    rq.layers.assign(n_layers, CB(codebook_size, sample_latents.cols));
    rq.active_layers = n_layers;
    if constexpr (std::is_same_v<CB, NormalCodebook>) {
        if (initial_sigma != 1.0)
            for (CB& cb : rq.layers)
                for (double& ls : cb.log_sigmas) ls = std::log(initial_sigma);
    }

    LatentSequence residuals = sample_latents;
    std::vector<std::size_t> order(residuals.rows);
    for (std::size_t l = 0; l < n_layers; ++l) {
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(order);
        for (std::size_t k = 0; k < codebook_size; ++k)
            detail::assign_code_row(rq.layers[l], k, residuals.row(order[k]));

        if (l + 1 == n_layers) break;
        const auto scorer = make_scorer(rq.layers[l]);
        for (std::size_t f = 0; f < residuals.rows; ++f) {
            auto row = residuals.row(f);
            const auto mu = rq.layers[l].mean_row(scorer.select(row));
            for (std::size_t d = 0; d < row.size(); ++d) row[d] -= mu[d];
        }
    }
    return rq;
}

// ---- checkpoint format ----
// Little-endian header: magic "NDVQ", version u32, K u32, D u32,
// n_layers u32, flags u32 (0 = normal codebooks, 1 = euclidean). Body per
// layer: means as K*D f32 row-major, then (normal kind only) log_sigmas
// as K*D f32 row-major.

inline constexpr std::uint32_t kCodebookFormatVersion = 1;

enum class CodebookKind : std::uint32_t { Normal = 0, Euclidean = 1 };

using AnyQuantizer = std::variant<NormalRq, EuclideanRq>;

namespace detail {

inline void put_rows_f32(std::vector<std::uint8_t>& out, std::span<const double> v) {
    for (const double x : v) bin::put_f32(out, static_cast<float>(x));
}

inline void get_rows_f32(bin::Reader& r, std::span<double> v) {
    for (double& x : v) x = static_cast<double>(r.get_f32());
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_codebooks(const NormalRq& rq) {
    std::vector<std::uint8_t> out;
    bin::put_bytes(out, "NDVQ", 4);
    bin::put_le<std::uint32_t>(out, kCodebookFormatVersion);
    bin::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(rq.codebook_size()));
    bin::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(rq.dim()));
    bin::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(rq.layers.size()));
    bin::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(CodebookKind::Normal));
    for (const NormalCodebook& cb : rq.layers) {
        detail::put_rows_f32(out, cb.means);
        detail::put_rows_f32(out, cb.log_sigmas);
    }
    return out;
}

inline std::vector<std::uint8_t> serialize_codebooks(const EuclideanRq& rq) {
    std::vector<std::uint8_t> out;
    bin::put_bytes(out, "NDVQ", 4);
    bin::put_le<std::uint32_t>(out, kCodebookFormatVersion);
    bin::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(rq.codebook_size()));
    bin::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(rq.dim()));
    bin::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(rq.layers.size()));
    bin::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(CodebookKind::Euclidean));
    for (const EuclideanCodebook& cb : rq.layers) detail::put_rows_f32(out, cb.embeddings);
    return out;
}

inline AnyQuantizer parse_codebooks(std::span<const std::uint8_t> bytes) {
    bin::Reader r(bytes, "codebook checkpoint");
    char magic[4];
    r.get_bytes(magic, 4);
    if (std::string(magic, 4) != "NDVQ") throw FormatError("codebook checkpoint: bad magic");
    const auto version = r.get_le<std::uint32_t>();
    if (version != kCodebookFormatVersion)
        throw FormatError("codebook checkpoint: unsupported version " + std::to_string(version));
    const auto K = r.get_le<std::uint32_t>();
    const auto D = r.get_le<std::uint32_t>();
    const auto n_layers = r.get_le<std::uint32_t>();
    const auto flags = r.get_le<std::uint32_t>();
    if (K == 0 || D == 0 || n_layers == 0) throw FormatError("codebook checkpoint: zero-sized geometry");

    if (flags == static_cast<std::uint32_t>(CodebookKind::Normal)) {
        NormalRq rq;
        rq.layers.assign(n_layers, NormalCodebook(K, D));
        rq.active_layers = n_layers;
        for (NormalCodebook& cb : rq.layers) {
            detail::get_rows_f32(r, cb.means);
            detail::get_rows_f32(r, cb.log_sigmas);
            cb.clamp_log_sigmas();
        }
        return rq;
    }
    if (flags == static_cast<std::uint32_t>(CodebookKind::Euclidean)) {
        EuclideanRq rq;
        rq.layers.assign(n_layers, EuclideanCodebook(K, D));
        rq.active_layers = n_layers;
        for (EuclideanCodebook& cb : rq.layers) detail::get_rows_f32(r, cb.embeddings);
        return rq;
    }
    throw FormatError("codebook checkpoint: unknown codebook kind " + std::to_string(flags));
}

inline void save_codebooks(const std::string& path, const AnyQuantizer& rq) {
    const auto bytes = std::visit([](const auto& q) { return serialize_codebooks(q); }, rq);
    write_file_bytes(path, bytes);
}

inline AnyQuantizer load_codebooks(const std::string& path) { return parse_codebooks(read_file_bytes(path)); }

}  // namespace ndvq
