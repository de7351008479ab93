#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "e2e/features.hpp"

namespace e2e::feat {

namespace detail {

inline void write_u32(std::ofstream& f, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    f.write(reinterpret_cast<const char*>(b), 4);
}
inline std::uint32_t read_u32(std::ifstream& f) {
    unsigned char b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    if (!f) throw Error("feature file: truncated header");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace detail

constexpr std::uint32_t kFeatureVersion = 1;

/// Flat binary container: {magic "E2EF", version u32, T u32, dim u32,
/// array_tag u8} then row-major f32 frames.
inline void write_features(const std::string& path, const FeatureSequence& f) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("write_features: cannot open " + path);
    out.write("E2EF", 4);
    detail::write_u32(out, kFeatureVersion);
    detail::write_u32(out, static_cast<std::uint32_t>(f.t()));
    detail::write_u32(out, static_cast<std::uint32_t>(f.dim()));
    const char tag = static_cast<char>(f.tag);
    out.write(&tag, 1);
    std::vector<float> payload(f.frames.v.begin(), f.frames.v.end());
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size() * sizeof(float)));
    if (!out) throw Error("write_features: short write to " + path);
}

inline FeatureSequence read_features(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("read_features: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "E2EF", 4) != 0)
        throw Error("read_features: bad magic in " + path);
    const std::uint32_t version = detail::read_u32(in);
    if (version != kFeatureVersion)
        throw Error("read_features: unsupported version " + std::to_string(version));
    const std::uint32_t t = detail::read_u32(in);
    const std::uint32_t dim = detail::read_u32(in);
    char tag = 0;
    in.read(&tag, 1);
    if (!in || t == 0 || dim == 0) throw Error("read_features: bad header in " + path);
    std::vector<float> payload(static_cast<std::size_t>(t) * dim);
    in.read(reinterpret_cast<char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(float)));
    if (!in) throw Error("read_features: truncated payload in " + path);
    FeatureSequence f;
    f.tag = static_cast<ArrayTag>(tag);
    f.frames = ad::Tensor({static_cast<int>(t), static_cast<int>(dim)});
    for (std::size_t i = 0; i < payload.size(); ++i) f.frames.v[i] = payload[i];
    return f;
}

/// One manifest row: tab-separated {id, path, transcript, tag, channels}.
struct ManifestEntry {
    std::string id;
    std::string path;      // audio or feature file, caller's convention
    std::string transcript;
    ArrayTag tag = ArrayTag::distant;
    int channels = 1;
};

inline void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
    std::ofstream out(path);
    if (!out) throw Error("write_manifest: cannot open " + path);
    for (const auto& e : entries)
        out << e.id << '\t' << e.path << '\t' << e.transcript << '\t' << tag_name(e.tag) << '\t'
            << e.channels << '\n';
    if (!out) throw Error("write_manifest: short write to " + path);
}

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("read_manifest: cannot open " + path);
    std::vector<ManifestEntry> entries;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::size_t start = 0;
        while (true) {
            const std::size_t tab = line.find('\t', start);
            cols.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
            if (tab == std::string::npos) break;
            start = tab + 1;
        }
        if (cols.size() != 5)
            throw Error("read_manifest: " + path + ":" + std::to_string(lineno) + ": expected 5 columns, got " +
                        std::to_string(cols.size()));
        ManifestEntry e;
        e.id = cols[0];
        e.path = cols[1];
        e.transcript = cols[2];
        e.tag = tag_from_name(cols[3]);
        e.channels = std::stoi(cols[4]);
        entries.push_back(std::move(e));
    }
    return entries;
}

}  // namespace e2e::feat
