#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ndvq/common.hpp"

namespace ndvq {

/// Mono audio. Samples are normalized to [-1, 1] on load (scale 1/32768);
/// decoder output may exceed that range and is clamped only when written.
struct AudioBuffer {
    std::vector<float> samples;
    int sample_rate = 0;

    std::size_t size() const { return samples.size(); }
    double duration_seconds() const { return static_cast<double>(samples.size()) / sample_rate; }
};

// RIFF/WAVE, PCM 16-bit little-endian, mono. Unknown chunks are skipped.

inline AudioBuffer load_wav(const std::string& path) {
    const std::vector<std::uint8_t> bytes = read_file_bytes(path);
    bin::Reader r(bytes, "wav '" + path + "'");

    char riff[4], wave[4];
    if (bytes.size() < 12) throw IoError("wav: malformed header (file too small): " + path);
    r.get_bytes(riff, 4);
    r.get_le<std::uint32_t>();  // riff chunk size, unreliable in the wild
    r.get_bytes(wave, 4);
    if (std::string(riff, 4) != "RIFF" || std::string(wave, 4) != "WAVE")
        throw IoError("wav: malformed header (missing RIFF/WAVE): " + path);

    bool have_fmt = false;
    std::uint16_t format = 0, channels = 0, bits = 0;
    std::uint32_t rate = 0;
    AudioBuffer out;

    while (r.remaining() >= 8) {
        char id[4];
        r.get_bytes(id, 4);
        const std::uint32_t chunk_size = r.get_le<std::uint32_t>();
        const std::string tag(id, 4);
        if (tag == "fmt ") {
            if (chunk_size < 16) throw IoError("wav: malformed fmt chunk: " + path);
            format = r.get_le<std::uint16_t>();
            channels = r.get_le<std::uint16_t>();
            rate = r.get_le<std::uint32_t>();
            r.get_le<std::uint32_t>();  // byte rate
            r.get_le<std::uint16_t>();  // block align
            bits = r.get_le<std::uint16_t>();
            for (std::uint32_t i = 16; i < chunk_size; ++i) r.get_le<std::uint8_t>();
            have_fmt = true;
        } else if (tag == "data") {
            if (!have_fmt) throw IoError("wav: malformed header (data before fmt): " + path);
            if (format != 1) throw IoError("wav: unsupported encoding (format tag " + std::to_string(format) + ", PCM required): " + path);
            if (channels != 1) throw IoError("wav: unsupported channel count " + std::to_string(channels) + " (mono required): " + path);
            if (bits != 16) throw IoError("wav: unsupported bit depth " + std::to_string(bits) + " (16-bit required): " + path);
            const std::size_t n = chunk_size / 2;
            out.samples.resize(n);
            for (std::size_t i = 0; i < n; ++i) {
                const auto s = static_cast<std::int16_t>(r.get_le<std::uint16_t>());
                out.samples[i] = static_cast<float>(s) / 32768.0f;
            }
            out.sample_rate = static_cast<int>(rate);
            return out;
        } else {
            // skip unknown chunk (word aligned)
            const std::uint32_t skip = chunk_size + (chunk_size & 1);
            r.need(skip);
            r.pos += skip;
        }
    }
    throw IoError("wav: malformed header (no data chunk): " + path);
}

inline void save_wav(const std::string& path, const AudioBuffer& audio) {
    if (audio.samples.empty()) throw std::invalid_argument("save_wav: empty buffer");
    if (audio.sample_rate <= 0) throw std::invalid_argument("save_wav: sample rate must be positive");

    const std::uint32_t data_size = static_cast<std::uint32_t>(audio.samples.size() * 2);
    std::vector<std::uint8_t> out;
    out.reserve(44 + data_size);
    bin::put_bytes(out, "RIFF", 4);
    bin::put_le<std::uint32_t>(out, 36 + data_size);
    bin::put_bytes(out, "WAVE", 4);
    bin::put_bytes(out, "fmt ", 4);
    bin::put_le<std::uint32_t>(out, 16);
    bin::put_le<std::uint16_t>(out, 1);  // PCM
    bin::put_le<std::uint16_t>(out, 1);  // mono
    bin::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(audio.sample_rate));
    bin::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(audio.sample_rate * 2));
    bin::put_le<std::uint16_t>(out, 2);
    bin::put_le<std::uint16_t>(out, 16);
    bin::put_bytes(out, "data", 4);
    bin::put_le<std::uint32_t>(out, data_size);
    for (const float s : audio.samples) {
        const float c = std::clamp(s, -1.0f, 1.0f);
        auto q = static_cast<int>(std::lrintf(c * 32768.0f));
        q = std::clamp(q, -32768, 32767);
        bin::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
    }
    write_file_bytes(path, out);
}

}  // namespace ndvq
