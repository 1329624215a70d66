#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "ndvq/audio.hpp"
#include "ndvq/autodiff.hpp"
#include "ndvq/common.hpp"

// Spectral analysis shared by losses and metrics. Everything is templated
// on the scalar type so the same kernels run either on plain doubles or on
// recorded autodiff variables.

namespace ndvq {

inline constexpr double kPi = 3.14159265358979323846;

template <class S>
struct Cplx {
    S re;
    S im;
};

enum class WindowKind { Hann, Rectangular };

namespace detail {

inline bool is_pow2(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

inline std::size_t log2_of(std::size_t n) {
    std::size_t k = 0;
    while ((std::size_t{1} << k) < n) ++k;
    return k;
}

// multiply by a constant twiddle; trivial angles avoid extra nodes
template <class S>
Cplx<S> twiddle_mul(const Cplx<S>& z, double wr, double wi) {
    if (wi == 0.0) {
        if (wr == 1.0) return z;
        if (wr == -1.0) return {-z.re, -z.im};
        return {z.re * wr, z.im * wr};
    }
    if (wr == 0.0) {
        if (wi == -1.0) return {z.im, -z.re};
        if (wi == 1.0) return {-z.im, z.re};
        return {-(z.im * wi), z.re * wi};
    }
    return {z.re * wr - z.im * wi, z.re * wi + z.im * wr};
}

/// Iterative radix-2 decimation-in-time FFT, in place. Length must be a
/// power of two. Twiddles are plain doubles.
template <class S>
void fft_inplace(std::vector<Cplx<S>>& a) {
    const std::size_t n = a.size();
    if (n <= 1) return;
    if (!is_pow2(n)) throw ConfigError("fft: length " + std::to_string(n) + " is not a power of two");

    // bit-reversal permutation
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }

    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = -2.0 * kPi / static_cast<double>(len);
        const std::size_t half = len / 2;
        for (std::size_t i = 0; i < n; i += len) {
            for (std::size_t j = 0; j < half; ++j) {
                double wr, wi;
                if (j == 0) {
                    wr = 1.0; wi = 0.0;
                } else if (4 * j == len) {
                    wr = 0.0; wi = -1.0;
                } else {
                    wr = std::cos(ang * static_cast<double>(j));
                    wi = std::sin(ang * static_cast<double>(j));
                }
                const Cplx<S> u = a[i + j];
                const Cplx<S> v = twiddle_mul(a[i + j + half], wr, wi);
                a[i + j] = {u.re + v.re, u.im + v.im};
                a[i + j + half] = {u.re - v.re, u.im - v.im};
            }
        }
    }
}

}  // namespace detail

/// Onesided DFT of a real frame (power-of-two length n): bins 0..n/2,
/// computed through a half-length complex FFT.
template <class S>
std::vector<Cplx<S>> rfft(std::span<const S> x) {
    const std::size_t n = x.size();
    if (!detail::is_pow2(n) || n < 2)
        throw ConfigError("rfft: frame length " + std::to_string(n) + " must be a power of two >= 2");

    const std::size_t m = n / 2;
    std::vector<Cplx<S>> z(m);
    for (std::size_t k = 0; k < m; ++k) z[k] = {x[2 * k], x[2 * k + 1]};
    detail::fft_inplace(z);

    std::vector<Cplx<S>> out;
    out.reserve(m + 1);
    for (std::size_t k = 0; k <= m; ++k) {
        const Cplx<S>& zk = z[k % m];
        const Cplx<S>& zm = z[(m - k) % m];
        // even/odd split of the packed spectrum
        const S er = (zk.re + zm.re) * 0.5;
        const S ei = (zk.im - zm.im) * 0.5;
        const S orr = (zk.im + zm.im) * 0.5;
        const S oi = (zm.re - zk.re) * 0.5;
        const double ang = -2.0 * kPi * static_cast<double>(k) / static_cast<double>(n);
        const Cplx<S> wo = detail::twiddle_mul(Cplx<S>{orr, oi}, std::cos(ang), std::sin(ang));
        out.push_back({er + wo.re, ei + wo.im});
    }
    return out;
}

inline std::vector<double> make_window(std::size_t length, WindowKind kind) {
    std::vector<double> w(length, 1.0);
    if (kind == WindowKind::Hann) {
        for (std::size_t i = 0; i < length; ++i)
            w[i] = 0.5 - 0.5 * std::cos(2.0 * kPi * static_cast<double>(i) / static_cast<double>(length));
    }
    return w;
}

inline std::size_t stft_frame_count(std::size_t length, std::size_t hop) {
    return (length + hop - 1) / hop;
}

/// STFT with reflect padding on the right edge so that the frame count is
/// exactly ceil(len / hop). Frame t covers [t*hop, t*hop + window) of the
/// padded signal. Requires window <= len so the reflection is well defined.
template <class S>
Mat<Cplx<S>> stft_t(std::span<const S> x, std::size_t window_length, std::size_t hop_length,
                    WindowKind kind = WindowKind::Hann) {
    if (!detail::is_pow2(window_length))
        throw ConfigError("stft: window length " + std::to_string(window_length) + " is not a power of two");
    if (hop_length < 1 || window_length < hop_length)
        throw std::invalid_argument("stft: require window >= hop >= 1");
    if (x.size() < window_length)
        throw ConfigError("stft: window length " + std::to_string(window_length) +
                          " exceeds signal length " + std::to_string(x.size()));

    const std::size_t frames = stft_frame_count(x.size(), hop_length);
    const std::size_t padded_len = (frames - 1) * hop_length + window_length;
    std::vector<S> padded(x.begin(), x.end());
    padded.reserve(padded_len);
    for (std::size_t i = x.size(); i < padded_len; ++i) {
        const std::size_t mirror = 2 * x.size() - 2 - i;  // reflect without repeating the edge
        padded.push_back(x[mirror]);
    }

    const std::vector<double> win = make_window(window_length, kind);
    Mat<Cplx<S>> out;
    out.rows = frames;
    out.cols = window_length / 2 + 1;
    out.data.reserve(frames * out.cols);

    std::vector<S> frame(window_length, S{});
    for (std::size_t t = 0; t < frames; ++t) {
        for (std::size_t j = 0; j < window_length; ++j) {
            const S& s = padded[t * hop_length + j];
            frame[j] = (kind == WindowKind::Rectangular) ? s : s * win[j];
        }
        auto bins = rfft(std::span<const S>(frame));
        out.data.insert(out.data.end(), bins.begin(), bins.end());
    }
    return out;
}

inline Mat<Cplx<double>> stft(const AudioBuffer& x, std::size_t window_length, std::size_t hop_length,
                              WindowKind kind = WindowKind::Hann);

struct MelConfig {
    int n_mels = 64;
    std::size_t window_length = 0;
    std::size_t hop_length = 0;
    int sample_rate = 0;
};

/// Paper-matched scale: hop is window/8.
inline MelConfig mel_config_for_scale(std::size_t window_length, int sample_rate) {
    return MelConfig{64, window_length, window_length / 8, sample_rate};
}

inline double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
inline double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

/// HTK-scale triangular filterbank spanning 0..sr/2, no area normalization.
/// Rows are filters (n_mels x bins), evaluated at FFT bin centers.
inline Mat<double> mel_filterbank(int n_mels, std::size_t n_fft, int sample_rate) {
    const std::size_t bins = n_fft / 2 + 1;
    Mat<double> fb(static_cast<std::size_t>(n_mels), bins, 0.0);
    const double mel_max = hz_to_mel(sample_rate / 2.0);
    std::vector<double> edges(static_cast<std::size_t>(n_mels) + 2);
    for (std::size_t j = 0; j < edges.size(); ++j)
        edges[j] = mel_to_hz(mel_max * static_cast<double>(j) / static_cast<double>(n_mels + 1));
    for (int k = 0; k < n_mels; ++k) {
        const double lo = edges[k], mid = edges[k + 1], hi = edges[k + 2];
        for (std::size_t b = 0; b < bins; ++b) {
            const double f = static_cast<double>(b) * sample_rate / static_cast<double>(n_fft);
            double w = 0.0;
            if (f > lo && f < hi)
                w = (f <= mid) ? (f - lo) / (mid - lo) : (hi - f) / (hi - mid);
            fb.at(static_cast<std::size_t>(k), b) = w;
        }
    }
    return fb;
}

/// Magnitude mel spectrogram (frames x n_mels). Linear amplitude; the
/// log compression belongs to the losses/metrics that consume it.
template <class S>
Mat<S> mel_spectrogram_t(std::span<const S> x, const MelConfig& cfg) {
    if (cfg.n_mels <= 0 || cfg.sample_rate <= 0)
        throw ConfigError("mel: invalid config (n_mels/sample_rate)");
    if (x.size() < cfg.window_length)
        throw ConfigError("mel: window length " + std::to_string(cfg.window_length) +
                          " exceeds signal length " + std::to_string(x.size()));

    const Mat<Cplx<S>> spec = stft_t(x, cfg.window_length, cfg.hop_length, WindowKind::Hann);
    const Mat<double> fb = mel_filterbank(cfg.n_mels, cfg.window_length, cfg.sample_rate);

    // precompute triangle support so zero filter weights cost nothing
    std::vector<std::pair<std::size_t, std::size_t>> support(fb.rows);
    for (std::size_t k = 0; k < fb.rows; ++k) {
        std::size_t lo = fb.cols, hi = 0;
        for (std::size_t b = 0; b < fb.cols; ++b) {
            if (fb.at(k, b) != 0.0) {
                lo = std::min(lo, b);
                hi = std::max(hi, b + 1);
            }
        }
        support[k] = {lo, hi == 0 ? lo : hi};
    }

    Mat<S> out(spec.rows, fb.rows);
    std::vector<S> mag(spec.cols, S{});
    for (std::size_t t = 0; t < spec.rows; ++t) {
        for (std::size_t b = 0; b < spec.cols; ++b) {
            const Cplx<S>& z = spec.at(t, b);
            mag[b] = ad::sqrt(ad::square(z.re) + ad::square(z.im));
        }
        for (std::size_t k = 0; k < fb.rows; ++k) {
            // narrow filters can cover no bin center at small windows;
            // such rows are identically zero
            S acc = ad::zero_like(mag[0]);
            bool first = true;
            for (std::size_t b = support[k].first; b < support[k].second; ++b) {
                const double w = fb.at(k, b);
                if (w == 0.0) continue;
                if (first) {
                    acc = mag[b] * w;
                    first = false;
                } else {
                    acc = acc + mag[b] * w;
                }
            }
            out.at(t, k) = acc;
        }
    }
    return out;
}

inline Mat<Cplx<double>> stft(const AudioBuffer& x, std::size_t window_length, std::size_t hop_length,
                              WindowKind kind) {
    std::vector<double> xd(x.samples.begin(), x.samples.end());
    return stft_t(std::span<const double>(xd), window_length, hop_length, kind);
}

inline Mat<double> mel_spectrogram(const AudioBuffer& x, const MelConfig& cfg) {
    std::vector<double> xd(x.samples.begin(), x.samples.end());
    return mel_spectrogram_t(std::span<const double>(xd), cfg);
}

}  // namespace ndvq
