#pragma once

#include <cmath>
#include <cstdio>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ndvq/audio.hpp"
#include "ndvq/codec.hpp"
#include "ndvq/common.hpp"
#include "ndvq/loss.hpp"
#include "ndvq/quantize.hpp"
#include "ndvq/spectral.hpp"

namespace ndvq {

/// Scale-invariant signal-to-distortion ratio in dB: the estimate is
/// projected onto the reference, so any global gain on the estimate is
/// absorbed. Capped at +100 dB when the residual noise vanishes.
inline double si_sdr(const AudioBuffer& reference, const AudioBuffer& estimate) {
    if (reference.size() != estimate.size()) throw std::invalid_argument("si_sdr: length mismatch");
    if (reference.size() == 0) throw std::invalid_argument("si_sdr: empty signals");

    double dot = 0.0, ref_energy = 0.0;
    for (std::size_t i = 0; i < reference.size(); ++i) {
        const double x = reference.samples[i];
        const double y = estimate.samples[i];
        dot += x * y;
        ref_energy += x * x;
    }
    if (ref_energy == 0.0) throw std::invalid_argument("si_sdr: reference is all zero");

    const double alpha = dot / ref_energy;
    double target_energy = 0.0, noise_energy = 0.0;
    for (std::size_t i = 0; i < reference.size(); ++i) {
        const double t = alpha * reference.samples[i];
        const double n = estimate.samples[i] - t;
        target_energy += t * t;
        noise_energy += n * n;
    }
    if (noise_energy < 1e-20) return 100.0;
    const double ratio = target_energy / noise_energy;
    return std::min(100.0, 10.0 * std::log10(ratio));
}

namespace detail {

inline std::vector<double> to_doubles(const AudioBuffer& x) {
    return std::vector<double>(x.samples.begin(), x.samples.end());
}

}  // namespace detail

/// Mean absolute difference of log-compressed 64-bin mel spectrograms,
/// averaged over the loss scale set (windows that fit the signal).
inline double mel_distance(const AudioBuffer& x, const AudioBuffer& xhat) {
    if (x.size() != xhat.size()) throw std::invalid_argument("mel_distance: length mismatch");
    if (x.sample_rate != xhat.sample_rate) throw std::invalid_argument("mel_distance: sample rate mismatch");
    const std::vector<double> a = detail::to_doubles(x);
    const std::vector<double> b = detail::to_doubles(xhat);

    double total = 0.0;
    std::size_t n_scales = 0;
    for (const std::size_t w : mel_loss_windows()) {
        if (w > a.size()) continue;
        const MelConfig cfg = mel_config_for_scale(w, x.sample_rate);
        const Mat<double> ma = mel_spectrogram_t(std::span<const double>(a), cfg);
        const Mat<double> mb = mel_spectrogram_t(std::span<const double>(b), cfg);
        double acc = 0.0;
        for (std::size_t i = 0; i < ma.data.size(); ++i)
            acc += std::fabs(log_compress(ma.data[i]) - log_compress(mb.data[i]));
        total += acc / static_cast<double>(ma.data.size());
        ++n_scales;
    }
    if (n_scales == 0) throw ConfigError("mel_distance: signal shorter than every mel window");
    return total / static_cast<double>(n_scales);
}

/// Mean absolute difference of log STFT magnitudes (floor 1e-5), averaged
/// over the discriminator scales that fit the signal.
inline double stft_distance(const AudioBuffer& x, const AudioBuffer& xhat) {
    if (x.size() != xhat.size()) throw std::invalid_argument("stft_distance: length mismatch");
    const std::vector<double> a = detail::to_doubles(x);
    const std::vector<double> b = detail::to_doubles(xhat);

    double total = 0.0;
    std::size_t n_scales = 0;
    for (const std::size_t w : discriminator_scales()) {
        if (w > a.size()) continue;
        const Mat<Cplx<double>> sa = stft_t(std::span<const double>(a), w, w / 8, WindowKind::Hann);
        const Mat<Cplx<double>> sb = stft_t(std::span<const double>(b), w, w / 8, WindowKind::Hann);
        double acc = 0.0;
        for (std::size_t i = 0; i < sa.data.size(); ++i) {
            const double ma = std::hypot(sa.data[i].re, sa.data[i].im);
            const double mb = std::hypot(sb.data[i].re, sb.data[i].im);
            acc += std::fabs(log_compress(ma) - log_compress(mb));
        }
        total += acc / static_cast<double>(sa.data.size());
        ++n_scales;
    }
    if (n_scales == 0) throw ConfigError("stft_distance: signal shorter than every analysis scale");
    return total / static_cast<double>(n_scales);
}

struct EvalReport {
    double si_sdr_db = 0.0;
    double mel_distance = 0.0;
    double stft_distance = 0.0;
    double bandwidth_kbps = 0.0;
    std::size_t n_q = 0;
    std::size_t n_clips = 0;
    std::vector<double> layer_entropy_bits;  // pooled over the dataset, one per active layer

    std::string to_text() const {
        char buf[128];
        std::string out;
        const auto put = [&](const char* key, double v) {
            std::snprintf(buf, sizeof(buf), "%s=%.9g\n", key, v);
            out += buf;
        };
        put("si_sdr_db", si_sdr_db);
        put("mel_distance", mel_distance);
        put("stft_distance", stft_distance);
        put("bandwidth_kbps", bandwidth_kbps);
        std::snprintf(buf, sizeof(buf), "n_q=%zu\nn_clips=%zu\n", n_q, n_clips);
        out += buf;
        for (std::size_t l = 0; l < layer_entropy_bits.size(); ++l) {
            std::snprintf(buf, sizeof(buf), "entropy_layer_%zu=%.9g\n", l + 1, layer_entropy_bits[l]);
            out += buf;
        }
        return out;
    }
};

struct EvalMode {
    bool sampled = false;  // reparameterized sampling instead of mean-only decoding
    std::uint64_t sample_seed = 0;
};

/// Full-pipeline evaluation over a dataset: per-clip metrics are averaged,
/// usage histograms are pooled across all clips before the entropy is
/// taken (a per-clip entropy average would understate diversity).
template <class CB>
EvalReport evaluate(const ToyCodecModel& model, const ResidualQuantizer<CB>& rq,
                    std::span<const AudioBuffer> dataset, std::size_t n_q, EvalMode mode = {}) {
    if (dataset.empty()) throw std::invalid_argument("evaluate: empty dataset");
    ResidualQuantizer<CB> active = rq;
    active.set_active_layers(n_q);

    EvalReport report;
    report.n_q = n_q;
    report.n_clips = dataset.size();
    report.bandwidth_kbps =
        model.config.frame_rate() * static_cast<double>(n_q) * model.config.bits_per_code() / 1000.0;

    std::vector<UsageHistogram> pooled(n_q, UsageHistogram(rq.codebook_size()));
    Rng rng = Rng::split(mode.sample_seed, /*tag=*/0x6576616c73616d70ULL);

    for (const AudioBuffer& clip : dataset) {
        const LatentSequence z = encode(model, clip);
        const QuantizationResult q =
            mode.sampled ? quantize_train(active, z, rng) : quantize_infer(active, z);
        const AudioBuffer xhat = decode(model, q.quantized, clip.size());

        report.si_sdr_db += si_sdr(clip, xhat);
        report.mel_distance += mel_distance(clip, xhat);
        report.stft_distance += stft_distance(clip, xhat);

        const auto hists = usage_from_indices(q.indices, rq.codebook_size());
        for (std::size_t l = 0; l < n_q; ++l) pooled[l].merge(hists[l]);
    }
    const double n = static_cast<double>(dataset.size());
    report.si_sdr_db /= n;
    report.mel_distance /= n;
    report.stft_distance /= n;
    for (const UsageHistogram& h : pooled) report.layer_entropy_bits.push_back(usage_entropy(h));
    return report;
}

}  // namespace ndvq
