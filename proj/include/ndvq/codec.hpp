#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ndvq/audio.hpp"
#include "ndvq/autodiff.hpp"
#include "ndvq/common.hpp"

// Toy convolutional codec backbone (strided conv encoder, mirrored
// transposed-conv decoder, ELU activations) plus the bit-exact compressed
// stream format and the bandwidth arithmetic tying codes to kbps.

namespace ndvq {

struct CodecConfig {
    int sample_rate = 8000;
    std::vector<int> strides = {2, 2, 2};
    std::size_t latent_dim = 32;
    std::vector<std::size_t> channels = {8, 16};  // hidden channels; stage i maps channels[i-1] -> channels[i]
    std::size_t codebook_size = 1024;
    std::size_t max_layers = 32;

    int stride_product() const {
        int p = 1;
        for (const int s : strides) p *= s;
        return p;
    }

    double frame_rate() const { return static_cast<double>(sample_rate) / stride_product(); }

    int bits_per_code() const {
        int b = 0;
        while ((std::size_t{1} << b) < codebook_size) ++b;
        return b;
    }

    void validate() const {
        if (sample_rate <= 0) throw ConfigError("codec: sample_rate must be positive");
        if (strides.empty()) throw ConfigError("codec: need at least one stride");
        for (const int s : strides)
            if (s < 1) throw ConfigError("codec: strides must be positive");
        if (latent_dim == 0) throw ConfigError("codec: latent_dim must be positive");
        if (channels.size() + 1 != strides.size())
            throw ConfigError("codec: need exactly one hidden channel count per non-final stage (" +
                              std::to_string(strides.size() - 1) + " expected, " +
                              std::to_string(channels.size()) + " given)");
        if (codebook_size < 2 || codebook_size > 32768)
            throw ConfigError("codec: codebook_size outside [2, 32768]");
        if (max_layers < 1 || max_layers > 32) throw ConfigError("codec: max_layers outside [1, 32]");
    }

    /// The full-scale layout: 24 kHz, strides (2,4,5,8).
    static CodecConfig paper_scale() {
        CodecConfig c;
        c.sample_rate = 24000;
        c.strides = {2, 4, 5, 8};
        c.latent_dim = 32;
        c.channels = {8, 12, 16};
        c.codebook_size = 1024;
        c.max_layers = 32;
        return c;
    }
};

struct TensorShape {
    std::string name;
    std::vector<std::size_t> dims;
    std::size_t offset = 0;

    std::size_t size() const {
        std::size_t n = 1;
        for (const std::size_t d : dims) n *= d;
        return n;
    }
};

/// Backbone weights in one flat block, described by a tensor table. The
/// encoder runs one conv per stride (kernel 2*stride), the decoder the
/// mirrored transposed convs.
struct ToyCodecModel {
    CodecConfig config;
    std::vector<TensorShape> tensors;
    std::vector<double> params;

    static ToyCodecModel build(const CodecConfig& cfg) {
        cfg.validate();
        ToyCodecModel m;
        m.config = cfg;
        const std::size_t stages = cfg.strides.size();
        std::size_t offset = 0;
        const auto add = [&](const std::string& name, std::vector<std::size_t> dims) {
            TensorShape t{name, std::move(dims), offset};
            offset += t.size();
            m.tensors.push_back(std::move(t));
        };
        for (std::size_t i = 0; i < stages; ++i) {
            const std::size_t in_ch = i == 0 ? 1 : cfg.channels[i - 1];
            const std::size_t out_ch = i + 1 == stages ? cfg.latent_dim : cfg.channels[i];
            const std::size_t k = 2 * static_cast<std::size_t>(cfg.strides[i]);
            add("enc" + std::to_string(i) + ".weight", {out_ch, in_ch, k});
            add("enc" + std::to_string(i) + ".bias", {out_ch});
        }
        for (std::size_t i = 0; i < stages; ++i) {
            // decoder stage i undoes encoder stage (stages-1-i)
            const std::size_t e = stages - 1 - i;
            const std::size_t in_ch = e + 1 == stages ? cfg.latent_dim : cfg.channels[e];
            const std::size_t out_ch = e == 0 ? 1 : cfg.channels[e - 1];
            const std::size_t k = 2 * static_cast<std::size_t>(cfg.strides[e]);
            add("dec" + std::to_string(i) + ".weight", {in_ch, out_ch, k});
            add("dec" + std::to_string(i) + ".bias", {out_ch});
        }
        m.params.assign(offset, 0.0);
        return m;
    }

    static ToyCodecModel init_random(const CodecConfig& cfg, std::uint64_t seed) {
        ToyCodecModel m = build(cfg);
        Rng rng = Rng::split(seed, /*tag=*/0x6261636b626f6e65ULL);
        for (const TensorShape& t : m.tensors) {
            if (t.dims.size() == 1) continue;  // biases start at zero
            const std::size_t fan_in = t.dims[1] * t.dims[2];
            const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
            for (std::size_t i = 0; i < t.size(); ++i) m.params[t.offset + i] = rng.gaussian() * scale;
        }
        return m;
    }

    const TensorShape& tensor(const std::string& name) const {
        for (const TensorShape& t : tensors)
            if (t.name == name) return t;
        throw std::invalid_argument("model: no tensor named " + name);
    }
};

// weight providers for the templated forward kernels
struct PlainWeights {
    const std::vector<double>* params;
    double get(std::size_t i) const { return (*params)[i]; }
};

struct TapeWeights {
    ad::Tape* tape;
    ad::Var get(std::size_t i) const { return tape->param(static_cast<std::uint32_t>(i)); }
};

namespace detail {

template <class S>
S elu(const S& x) {
    // max(x,0) + exp(min(x,0)) - 1, the two branches glued from primitives
    return ad::vmax(x, 0.0) + ad::exp(ad::vmin(x, 0.0)) - 1.0;
}

/// Strided 1-D convolution, zero-padded on the right so the output length
/// is exactly ceil(T / stride). Activations are channel-major (ch x time).
template <class WP, class X>
auto conv1d(const WP& w, const TensorShape& weight, const TensorShape& bias, const Mat<X>& in,
            std::size_t stride) {
    using R = decltype(w.get(0) * in.data[0]);
    const std::size_t out_ch = weight.dims[0];
    const std::size_t in_ch = weight.dims[1];
    const std::size_t k = weight.dims[2];
    const std::size_t t_in = in.cols;
    const std::size_t t_out = (t_in + stride - 1) / stride;

    Mat<R> out(out_ch, t_out);
    for (std::size_t oc = 0; oc < out_ch; ++oc) {
        for (std::size_t t = 0; t < t_out; ++t) {
            R acc = w.get(bias.offset + oc) * 1.0;
            for (std::size_t ic = 0; ic < in_ch; ++ic) {
                const std::size_t w_base = weight.offset + (oc * in_ch + ic) * k;
                for (std::size_t j = 0; j < k; ++j) {
                    const std::size_t src = t * stride + j;
                    if (src >= t_in) break;  // implicit zero padding
                    acc = acc + w.get(w_base + j) * in.at(ic, src);
                }
            }
            out.at(oc, t) = acc;
        }
    }
    return out;
}

/// Transposed 1-D convolution; the natural output (T-1)*stride + k is
/// trimmed on the right to exactly T*stride.
template <class WP, class X>
auto conv1d_transposed(const WP& w, const TensorShape& weight, const TensorShape& bias, const Mat<X>& in,
                       std::size_t stride) {
    using R = decltype(w.get(0) * in.data[0]);
    const std::size_t in_ch = weight.dims[0];
    const std::size_t out_ch = weight.dims[1];
    const std::size_t k = weight.dims[2];
    const std::size_t t_in = in.cols;
    const std::size_t t_out = t_in * stride;

    Mat<R> out(out_ch, t_out);
    for (std::size_t oc = 0; oc < out_ch; ++oc)
        for (std::size_t t = 0; t < t_out; ++t) out.at(oc, t) = w.get(bias.offset + oc) * 1.0;

    for (std::size_t ic = 0; ic < in_ch; ++ic) {
        for (std::size_t f = 0; f < t_in; ++f) {
            for (std::size_t oc = 0; oc < out_ch; ++oc) {
                const std::size_t w_base = weight.offset + (ic * out_ch + oc) * k;
                for (std::size_t j = 0; j < k; ++j) {
                    const std::size_t dst = f * stride + j;
                    if (dst >= t_out) break;
                    out.at(oc, dst) = out.at(oc, dst) + w.get(w_base + j) * in.at(ic, f);
                }
            }
        }
    }
    return out;
}

}  // namespace detail

/// Encoder forward: audio (1 x T) to latents (frames x D, time-major).
template <class WP, class X>
auto encoder_forward(const ToyCodecModel& model, const WP& w, const Mat<X>& audio) {
    using R = decltype(w.get(0) * audio.data[0]);
    const std::size_t stages = model.config.strides.size();
    Mat<R> h = detail::conv1d(w, model.tensors[0], model.tensors[1], audio,
                              static_cast<std::size_t>(model.config.strides[0]));
    for (std::size_t i = 1; i < stages; ++i) {
        for (R& v : h.data) v = detail::elu(v);
        h = detail::conv1d(w, model.tensors[2 * i], model.tensors[2 * i + 1], h,
                           static_cast<std::size_t>(model.config.strides[i]));
    }
    Mat<R> latents(h.cols, h.rows);
    for (std::size_t d = 0; d < h.rows; ++d)
        for (std::size_t t = 0; t < h.cols; ++t) latents.at(t, d) = h.at(d, t);
    return latents;
}

/// Decoder forward: latents (frames x D) to samples, trimmed or
/// zero-padded to out_len.
template <class WP, class X>
auto decoder_forward(const ToyCodecModel& model, const WP& w, const Mat<X>& latents, std::size_t out_len) {
    using R = decltype(w.get(0) * latents.data[0]);
    const std::size_t stages = model.config.strides.size();

    Mat<X> h0(latents.cols, latents.rows);
    for (std::size_t t = 0; t < latents.rows; ++t)
        for (std::size_t d = 0; d < latents.cols; ++d) h0.at(d, t) = latents.at(t, d);

    const std::size_t base = 2 * stages;
    Mat<R> h = detail::conv1d_transposed(w, model.tensors[base], model.tensors[base + 1], h0,
                                         static_cast<std::size_t>(model.config.strides[stages - 1]));
    for (std::size_t i = 1; i < stages; ++i) {
        for (R& v : h.data) v = detail::elu(v);
        h = detail::conv1d_transposed(w, model.tensors[base + 2 * i], model.tensors[base + 2 * i + 1], h,
                                      static_cast<std::size_t>(model.config.strides[stages - 1 - i]));
    }

    std::vector<R> out;
    out.reserve(out_len);
    for (std::size_t t = 0; t < out_len && t < h.cols; ++t) out.push_back(h.at(0, t));
    while (out.size() < out_len) out.push_back(ad::zero_like(h.data[0]));
    return out;
}

/// Spec'd encoder entry point over audio buffers (plain arithmetic).
inline LatentSequence encode(const ToyCodecModel& model, const AudioBuffer& x) {
    if (x.sample_rate != model.config.sample_rate)
        throw ConfigError("encode: sample rate " + std::to_string(x.sample_rate) + " does not match config " +
                          std::to_string(model.config.sample_rate));
    if (x.samples.size() < static_cast<std::size_t>(model.config.stride_product()))
        throw ConfigError("encode: input of " + std::to_string(x.samples.size()) +
                          " samples shorter than stride product " +
                          std::to_string(model.config.stride_product()));
    Mat<double> audio(1, x.samples.size());
    for (std::size_t i = 0; i < x.samples.size(); ++i) audio.at(0, i) = static_cast<double>(x.samples[i]);
    return encoder_forward(model, PlainWeights{&model.params}, audio);
}

/// Spec'd decoder entry point; output clamping happens at file write.
inline AudioBuffer decode(const ToyCodecModel& model, const LatentSequence& latents,
                          std::optional<std::size_t> original_length = std::nullopt) {
    if (latents.cols != model.config.latent_dim)
        throw ConfigError("decode: latent dimension " + std::to_string(latents.cols) +
                          " does not match config " + std::to_string(model.config.latent_dim));
    const std::size_t full = latents.rows * static_cast<std::size_t>(model.config.stride_product());
    const std::size_t out_len = original_length.value_or(full);
    const std::vector<double> samples = decoder_forward(model, PlainWeights{&model.params}, latents, out_len);
    AudioBuffer out;
    out.sample_rate = model.config.sample_rate;
    out.samples.resize(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) out.samples[i] = static_cast<float>(samples[i]);
    return out;
}

/// Number of active layers carrying the requested bandwidth. The product
/// frame_rate * bits_per_code must divide bandwidth exactly.
inline std::size_t bandwidth_to_nq(double bandwidth_kbps, double frame_rate, int bits_per_code,
                                   std::size_t max_layers = 32) {
    if (frame_rate <= 0.0 || bits_per_code <= 0)
        throw std::invalid_argument("bandwidth_to_nq: frame_rate and bits_per_code must be positive");
    const double per_layer = frame_rate * bits_per_code;  // bits/s contributed by one layer
    const double bps = bandwidth_kbps * 1000.0;
    const double n_real = bps / per_layer;
    const auto n = static_cast<long long>(std::llround(n_real));

    const auto valid_set = [&] {
        std::string s;
        for (std::size_t i = 1; i <= max_layers; ++i) {
            if (!s.empty()) s += ", ";
            s += std::to_string(per_layer * static_cast<double>(i) / 1000.0);
        }
        return s;
    };
    if (n < 1 || std::fabs(n_real - static_cast<double>(n)) > 1e-9)
        throw ConfigError("bandwidth " + std::to_string(bandwidth_kbps) +
                          " kbps is not a whole number of layers at " + std::to_string(frame_rate) + " fps x " +
                          std::to_string(bits_per_code) + " bits; valid: " + valid_set());
    if (static_cast<std::size_t>(n) > max_layers)
        throw ConfigError("bandwidth " + std::to_string(bandwidth_kbps) + " kbps needs " + std::to_string(n) +
                          " layers, above the maximum " + std::to_string(max_layers) + "; valid: " + valid_set());
    return static_cast<std::size_t>(n);
}

// ---- compressed stream ----
// Little-endian header: magic "NDVC", version u16, sample_rate u32,
// n_strides u8 followed by one u8 per stride, D u16, K u16, n_q u8,
// frame_count u32. Payload: code indices packed big-endian MSB-first at
// ceil(log2 K) bits each, layer-major within each frame, zero-padded to a
// byte boundary.

inline constexpr std::uint16_t kBitstreamVersion = 1;

struct BitstreamHeader {
    std::uint32_t sample_rate = 0;
    std::vector<std::uint8_t> strides;
    std::uint16_t latent_dim = 0;
    std::uint16_t codebook_size = 0;
    std::uint8_t n_q = 0;
    std::uint32_t frame_count = 0;

    int bits_per_code() const {
        int b = 0;
        while ((std::size_t{1} << b) < codebook_size) ++b;
        return b;
    }

    static BitstreamHeader from_config(const CodecConfig& cfg) {
        BitstreamHeader h;
        h.sample_rate = static_cast<std::uint32_t>(cfg.sample_rate);
        for (const int s : cfg.strides) h.strides.push_back(static_cast<std::uint8_t>(s));
        h.latent_dim = static_cast<std::uint16_t>(cfg.latent_dim);
        h.codebook_size = static_cast<std::uint16_t>(cfg.codebook_size);
        return h;
    }
};

inline std::vector<std::uint8_t> pack_bitstream(const CodeIndexGrid& indices, BitstreamHeader header) {
    header.n_q = static_cast<std::uint8_t>(indices.cols);
    header.frame_count = static_cast<std::uint32_t>(indices.rows);
    const int bits = header.bits_per_code();
    for (const std::uint16_t idx : indices.data)
        if (idx >= header.codebook_size)
            throw std::invalid_argument("pack_bitstream: index " + std::to_string(idx) + " >= K " +
                                        std::to_string(header.codebook_size));

    std::vector<std::uint8_t> out;
    bin::put_bytes(out, "NDVC", 4);
    bin::put_le<std::uint16_t>(out, kBitstreamVersion);
    bin::put_le<std::uint32_t>(out, header.sample_rate);
    bin::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(header.strides.size()));
    for (const std::uint8_t s : header.strides) bin::put_le<std::uint8_t>(out, s);
    bin::put_le<std::uint16_t>(out, header.latent_dim);
    bin::put_le<std::uint16_t>(out, header.codebook_size);
    bin::put_le<std::uint8_t>(out, header.n_q);
    bin::put_le<std::uint32_t>(out, header.frame_count);

    std::uint32_t bit_buf = 0;
    int bit_count = 0;
    for (std::size_t f = 0; f < indices.rows; ++f) {
        for (std::size_t l = 0; l < indices.cols; ++l) {
            bit_buf = (bit_buf << bits) | indices.at(f, l);
            bit_count += bits;
            while (bit_count >= 8) {
                bit_count -= 8;
                out.push_back(static_cast<std::uint8_t>((bit_buf >> bit_count) & 0xff));
            }
        }
    }
    if (bit_count > 0) out.push_back(static_cast<std::uint8_t>((bit_buf << (8 - bit_count)) & 0xff));
    return out;
}

inline std::pair<BitstreamHeader, CodeIndexGrid> unpack_bitstream(std::span<const std::uint8_t> bytes) {
    bin::Reader r(bytes, "bitstream");
    char magic[4];
    r.get_bytes(magic, 4);
    if (std::string(magic, 4) != "NDVC") throw FormatError("bitstream: bad magic");
    const auto version = r.get_le<std::uint16_t>();
    if (version != kBitstreamVersion)
        throw FormatError("bitstream: unsupported version " + std::to_string(version));

    BitstreamHeader h;
    h.sample_rate = r.get_le<std::uint32_t>();
    const auto n_strides = r.get_le<std::uint8_t>();
    for (std::size_t i = 0; i < n_strides; ++i) h.strides.push_back(r.get_le<std::uint8_t>());
    h.latent_dim = r.get_le<std::uint16_t>();
    h.codebook_size = r.get_le<std::uint16_t>();
    h.n_q = r.get_le<std::uint8_t>();
    h.frame_count = r.get_le<std::uint32_t>();
    if (h.n_q == 0) throw FormatError("bitstream: zero layers");

    const int bits = h.bits_per_code();
    const std::size_t total_codes = static_cast<std::size_t>(h.frame_count) * h.n_q;
    const std::size_t payload_bytes = (total_codes * static_cast<std::size_t>(bits) + 7) / 8;
    if (r.remaining() < payload_bytes)
        throw FormatError("bitstream: truncated payload (" + std::to_string(r.remaining()) + " bytes, " +
                          std::to_string(payload_bytes) + " needed)");

    CodeIndexGrid grid(h.frame_count, h.n_q, 0);
    std::uint32_t bit_buf = 0;
    int bit_count = 0;
    std::size_t pos = r.pos;
    for (std::size_t i = 0; i < total_codes; ++i) {
        while (bit_count < bits) {
            bit_buf = (bit_buf << 8) | bytes[pos++];
            bit_count += 8;
        }
        bit_count -= bits;
        const std::uint32_t idx = (bit_buf >> bit_count) & ((std::uint32_t{1} << bits) - 1);
        if (idx >= h.codebook_size)
            throw FormatError("bitstream: index " + std::to_string(idx) + " >= K " +
                              std::to_string(h.codebook_size));
        grid.data[i] = static_cast<std::uint16_t>(idx);
    }
    return {h, grid};
}

}  // namespace ndvq
