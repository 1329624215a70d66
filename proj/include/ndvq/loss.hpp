#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ndvq/autodiff.hpp"
#include "ndvq/common.hpp"
#include "ndvq/spectral.hpp"

// Training objective terms as pure functions, templated on the scalar
// type so the same formula serves plain evaluation, finite differencing
// and tape recording. The reference side of a reconstruction loss may be
// plain doubles while the estimate side is recorded.

namespace ndvq {

struct LossWeights {
    double lambda_t = 0.5;
    double lambda_f = 0.5;
    double lambda_c = 0.5;
    double lambda_fm = 5.0;
    double lambda_a = 1.0;
    double lambda_d = 1.0;
    double beta = 0.25;
    double gamma = 1e-5;
};

namespace detail {
template <class A, class B>
using Promote = decltype(std::declval<B>() - std::declval<A>());
}

inline constexpr double kLogFloor = 1e-5;

template <class S>
S log_compress(const S& m) {
    return ad::log(m + kLogFloor);
}

/// Mean absolute sample difference.
template <class X, class Y>
detail::Promote<X, Y> time_l1(std::span<const X> x, std::span<const Y> xhat) {
    if (x.size() != xhat.size()) throw std::invalid_argument("time_l1: length mismatch");
    if (x.empty()) throw std::invalid_argument("time_l1: empty signals");
    detail::Promote<X, Y> acc = ad::zero_like(xhat[0] - x[0]);
    for (std::size_t i = 0; i < x.size(); ++i) acc = acc + ad::abs(xhat[i] - x[i]);
    return acc / static_cast<double>(x.size());
}

inline const std::vector<std::size_t>& mel_loss_windows() {
    static const std::vector<std::size_t> w{32, 64, 128, 256, 512, 1024, 2048};
    return w;
}

/// Multi-scale log-mel reconstruction loss: per scale the mean-absolute
/// plus root-mean-square difference of log-compressed 64-bin mel
/// spectrograms, averaged over the scales that fit the signal.
template <class X, class Y>
detail::Promote<X, Y> multiscale_mel_loss(std::span<const X> x, std::span<const Y> xhat, int sample_rate) {
    if (x.size() != xhat.size()) throw std::invalid_argument("multiscale_mel_loss: length mismatch");
    if (x.size() < mel_loss_windows().front())
        throw ConfigError("multiscale_mel_loss: signal length " + std::to_string(x.size()) +
                          " shorter than smallest window " + std::to_string(mel_loss_windows().front()));

    using R = detail::Promote<X, Y>;
    R total = ad::zero_like(xhat[0] - x[0]);
    std::size_t n_scales = 0;
    for (const std::size_t w : mel_loss_windows()) {
        if (w > x.size()) continue;
        const MelConfig cfg = mel_config_for_scale(w, sample_rate);
        const Mat<X> mx = mel_spectrogram_t(x, cfg);
        const Mat<Y> my = mel_spectrogram_t(xhat, cfg);

        R l1 = ad::zero_like(total);
        R sq = ad::zero_like(total);
        for (std::size_t i = 0; i < mx.data.size(); ++i) {
            const R d = log_compress(my.data[i]) - log_compress(mx.data[i]);
            l1 = l1 + ad::abs(d);
            sq = sq + ad::square(d);
        }
        const double n = static_cast<double>(mx.data.size());
        total = total + l1 / n + ad::sqrt(sq / n);
        ++n_scales;
    }
    return total / static_cast<double>(n_scales);
}

/// Hinge generator loss: mean over sub-discriminators of max(0, 1 - logit).
template <class S>
S adversarial_gen_loss(std::span<const S> fake_logits) {
    if (fake_logits.empty()) throw std::invalid_argument("adversarial_gen_loss: empty logit list");
    S acc = ad::zero_like(fake_logits[0]);
    for (const S& l : fake_logits) acc = acc + ad::vmax(1.0 - l, 0.0);
    return acc / static_cast<double>(fake_logits.size());
}

/// Hinge discriminator loss: mean of max(0, 1 - real) + max(0, 1 + fake).
template <class X, class Y>
detail::Promote<X, Y> discriminator_hinge_loss(std::span<const X> real_logits, std::span<const Y> fake_logits) {
    if (real_logits.size() != fake_logits.size())
        throw std::invalid_argument("discriminator_hinge_loss: logit count mismatch");
    if (real_logits.empty()) throw std::invalid_argument("discriminator_hinge_loss: empty logit list");
    detail::Promote<X, Y> acc = ad::zero_like(fake_logits[0] - real_logits[0]);
    for (std::size_t i = 0; i < real_logits.size(); ++i) {
        acc = acc + ad::vmax(1.0 - real_logits[i], 0.0) + ad::vmax(1.0 + fake_logits[i], 0.0);
    }
    return acc / static_cast<double>(real_logits.size());
}

/// Logits plus per-layer feature maps from each sub-discriminator.
template <class S>
struct DiscriminatorOutput {
    std::vector<S> logits;
    std::vector<std::vector<Mat<S>>> features;  // [sub-discriminator][layer]
};

/// Relative feature matching: L1 feature difference normalized by the mean
/// absolute real feature (denominator floored at 1e-8 and treated as a
/// constant, matching the reference side's role).
template <class X, class Y>
detail::Promote<X, Y> feature_matching_loss(const DiscriminatorOutput<X>& real,
                                            const DiscriminatorOutput<Y>& fake) {
    const std::size_t n = real.features.size();
    if (n == 0 || fake.features.size() != n)
        throw std::invalid_argument("feature_matching_loss: sub-discriminator count mismatch");

    using R = detail::Promote<X, Y>;
    bool seeded = false;
    R total{};
    std::size_t terms = 0;
    for (std::size_t k = 0; k < n; ++k) {
        const auto& fr = real.features[k];
        const auto& ff = fake.features[k];
        if (fr.size() != ff.size()) throw std::invalid_argument("feature_matching_loss: layer count mismatch");
        for (std::size_t l = 0; l < fr.size(); ++l) {
            if (!fr[l].same_shape(ff[l])) throw std::invalid_argument("feature_matching_loss: feature shape mismatch");
            const std::size_t count = fr[l].data.size();
            if (count == 0) throw std::invalid_argument("feature_matching_loss: empty feature map");
            double denom = 0.0;
            for (const X& v : fr[l].data) denom += std::fabs(ad::value_of(v));
            denom = std::max(denom / static_cast<double>(count), 1e-8);

            R diff = ad::zero_like(ff[l].data[0] - fr[l].data[0]);
            for (std::size_t i = 0; i < count; ++i) diff = diff + ad::abs(ff[l].data[i] - fr[l].data[i]);
            const R term = diff / (static_cast<double>(count) * denom);
            total = seeded ? total + term : term;
            seeded = true;
            ++terms;
        }
    }
    if (terms == 0) throw std::invalid_argument("feature_matching_loss: no feature layers");
    return total / static_cast<double>(terms);
}

/// Weighted generator objective.
template <class S>
S generator_total(const S& l_t, const S& l_f, const S& l_a, const S& l_fm, const S& l_c,
                  const LossWeights& w) {
    return w.lambda_t * l_t + w.lambda_f * l_f + w.lambda_a * l_a + w.lambda_fm * l_fm + w.lambda_c * l_c;
}

template <class S>
S discriminator_total(const S& l_d, const LossWeights& w) {
    return w.lambda_d * l_d;
}

// ---- discriminator stand-in ----
// Fixed random per-bin projections of STFT magnitudes at the usual five
// analysis scales. Enough structure to drive the adversarial and feature
// matching terms end to end; no trainable parameters.

inline const std::vector<std::size_t>& discriminator_scales() {
    static const std::vector<std::size_t> s{2048, 1024, 512, 256, 128};
    return s;
}

template <class S>
DiscriminatorOutput<S> stub_discriminator(std::span<const S> x, std::uint64_t seed) {
    DiscriminatorOutput<S> out;
    for (const std::size_t w : discriminator_scales()) {
        if (w > x.size()) continue;  // scales that do not fit are skipped
        Rng rng = Rng::split(seed, static_cast<std::uint64_t>(w));
        const Mat<Cplx<S>> spec = stft_t(x, w, w / 8, WindowKind::Hann);
        const std::size_t bins = spec.cols;
        std::vector<double> proj(bins);
        const double scale = 1.0 / std::sqrt(static_cast<double>(bins));
        for (double& p : proj) p = rng.gaussian() * scale;

        Mat<S> mag(spec.rows, bins);
        for (std::size_t i = 0; i < spec.data.size(); ++i)
            mag.data[i] = ad::sqrt(ad::square(spec.data[i].re) + ad::square(spec.data[i].im));

        Mat<S> pooled(spec.rows, 1);
        for (std::size_t t = 0; t < spec.rows; ++t) {
            S acc = mag.at(t, 0) * proj[0];
            for (std::size_t b = 1; b < bins; ++b) acc = acc + mag.at(t, b) * proj[b];
            pooled.at(t, 0) = acc;
        }

        S logit = pooled.at(0, 0) / static_cast<double>(spec.rows);
        for (std::size_t t = 1; t < spec.rows; ++t)
            logit = logit + pooled.at(t, 0) / static_cast<double>(spec.rows);

        out.logits.push_back(logit);
        out.features.push_back({std::move(mag), std::move(pooled)});
    }
    if (out.logits.empty())
        throw ConfigError("stub_discriminator: signal shorter than every analysis scale");
    return out;
}

}  // namespace ndvq
