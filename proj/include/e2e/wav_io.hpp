#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "e2e/tensor.hpp"

namespace e2e::feat {

/// Multichannel audio in [-1, 1] doubles. Channel-major storage.
struct Waveform {
    std::vector<std::vector<double>> samples;  // [channel][sample]
    int sample_rate = 16000;

    int channels() const { return static_cast<int>(samples.size()); }
    std::int64_t length() const {
        return samples.empty() ? 0 : static_cast<std::int64_t>(samples[0].size());
    }
    void validate() const {
        if (samples.empty()) throw Error("waveform: no channels");
        if (sample_rate <= 0) throw Error("waveform: sample_rate must be positive");
        for (const auto& ch : samples) {
            if (ch.size() != samples[0].size())
                throw Error("waveform: channel length mismatch");
            for (double x : ch)
                if (!std::isfinite(x)) throw Error("waveform: non-finite amplitude");
        }
    }
};

namespace detail {

inline void put_u32(std::string& s, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u16(std::string& s, std::uint16_t v) {
    s.push_back(static_cast<char>(v & 0xff));
    s.push_back(static_cast<char>((v >> 8) & 0xff));
}
inline std::uint32_t get_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
inline std::uint16_t get_u16(const unsigned char* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

}  // namespace detail

/// Writes 16-bit PCM RIFF/WAVE, interleaved channels.
inline void write_wav(const std::string& path, const Waveform& w) {
    w.validate();
    const int ch = w.channels();
    const std::int64_t n = w.length();
    const std::uint32_t data_bytes = static_cast<std::uint32_t>(n * ch * 2);

    std::string out;
    out.reserve(44 + data_bytes);
    out += "RIFF";
    detail::put_u32(out, 36 + data_bytes);
    out += "WAVEfmt ";
    detail::put_u32(out, 16);
    detail::put_u16(out, 1);  // PCM
    detail::put_u16(out, static_cast<std::uint16_t>(ch));
    detail::put_u32(out, static_cast<std::uint32_t>(w.sample_rate));
    detail::put_u32(out, static_cast<std::uint32_t>(w.sample_rate * ch * 2));
    detail::put_u16(out, static_cast<std::uint16_t>(ch * 2));
    detail::put_u16(out, 16);
    out += "data";
    detail::put_u32(out, data_bytes);
    for (std::int64_t i = 0; i < n; ++i)
        for (int c = 0; c < ch; ++c) {
            double x = w.samples[c][i];
            x = x < -1.0 ? -1.0 : (x > 1.0 ? 1.0 : x);
            const auto s = static_cast<std::int16_t>(std::lround(x * 32767.0));
            detail::put_u16(out, static_cast<std::uint16_t>(s));
        }

    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("write_wav: cannot open " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw Error("write_wav: short write to " + path);
}

/// Reads 16-bit PCM RIFF/WAVE (any channel count), scanning chunks for
/// fmt/data and skipping the rest.
inline Waveform read_wav(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("read_wav: cannot open " + path);
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
    if (buf.size() < 44 || std::memcmp(buf.data(), "RIFF", 4) != 0 ||
        std::memcmp(buf.data() + 8, "WAVE", 4) != 0)
        throw Error("read_wav: not a RIFF/WAVE file: " + path);

    int channels = 0, bits = 0;
    std::uint32_t rate = 0;
    std::size_t data_off = 0, data_len = 0;
    std::size_t pos = 12;
    while (pos + 8 <= buf.size()) {
        const std::uint32_t sz = detail::get_u32(buf.data() + pos + 4);
        const unsigned char* body = buf.data() + pos + 8;
        if (pos + 8 + sz > buf.size()) throw Error("read_wav: truncated chunk in " + path);
        if (std::memcmp(buf.data() + pos, "fmt ", 4) == 0) {
            if (sz < 16) throw Error("read_wav: short fmt chunk in " + path);
            const std::uint16_t fmt = detail::get_u16(body);
            if (fmt != 1) throw Error("read_wav: only PCM supported: " + path);
            channels = detail::get_u16(body + 2);
            rate = detail::get_u32(body + 4);
            bits = detail::get_u16(body + 14);
        } else if (std::memcmp(buf.data() + pos, "data", 4) == 0) {
            data_off = pos + 8;
            data_len = sz;
        }
        pos += 8 + sz + (sz & 1);  // chunks are word-aligned
    }
    if (channels <= 0 || data_off == 0) throw Error("read_wav: missing fmt/data in " + path);
    if (bits != 16) throw Error("read_wav: only 16-bit PCM supported: " + path);

    const std::size_t frames = data_len / (static_cast<std::size_t>(channels) * 2);
    Waveform w;
    w.sample_rate = static_cast<int>(rate);
    w.samples.assign(channels, std::vector<double>(frames));
    const unsigned char* p = buf.data() + data_off;
    for (std::size_t i = 0; i < frames; ++i)
        for (int c = 0; c < channels; ++c, p += 2)
            w.samples[c][i] = static_cast<std::int16_t>(detail::get_u16(p)) / 32767.0;
    return w;
}

}  // namespace e2e::feat
