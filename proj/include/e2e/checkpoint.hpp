#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "e2e/autodiff.hpp"

namespace e2e::ckpt {

constexpr std::uint32_t kCheckpointVersion = 1;

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
    if (!f) throw Error("checkpoint: truncated stream");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace detail

/// Serializes named tensors: header {magic "E2EP", version u32, count u32},
/// then per tensor {name_len u32 + bytes, rank u32, extents u32..., f32
/// payload}. Values are stored as f32; a load/save cycle of an already
/// loaded checkpoint is bit-exact.
inline void save_tensors(const std::string& path,
                         const std::vector<std::pair<std::string, ad::Tensor>>& tensors) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("checkpoint: cannot open " + path + " for writing");
    out.write("E2EP", 4);
    detail::write_u32(out, kCheckpointVersion);
    detail::write_u32(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        detail::write_u32(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_u32(out, static_cast<std::uint32_t>(t.rank()));
        for (int d = 0; d < t.rank(); ++d)
            detail::write_u32(out, static_cast<std::uint32_t>(t.dim(d)));
        std::vector<float> payload(t.v.begin(), t.v.end());
        out.write(reinterpret_cast<const char*>(payload.data()),
                  static_cast<std::streamsize>(payload.size() * sizeof(float)));
    }
    if (!out) throw Error("checkpoint: short write to " + path);
}

inline std::vector<std::pair<std::string, ad::Tensor>> load_tensors(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("checkpoint: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "E2EP", 4) != 0)
        throw Error("checkpoint: bad magic in " + path);
    const std::uint32_t version = detail::read_u32(in);
    if (version != kCheckpointVersion)
        throw Error("checkpoint: unsupported version " + std::to_string(version));
    const std::uint32_t count = detail::read_u32(in);
    std::vector<std::pair<std::string, ad::Tensor>> tensors;
    tensors.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = detail::read_u32(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const std::uint32_t rank = detail::read_u32(in);
        std::vector<int> shape(rank);
        for (std::uint32_t d = 0; d < rank; ++d)
            shape[d] = static_cast<int>(detail::read_u32(in));
        ad::Tensor t(shape);
        std::vector<float> payload(static_cast<std::size_t>(t.size()));
        in.read(reinterpret_cast<char*>(payload.data()),
                static_cast<std::streamsize>(payload.size() * sizeof(float)));
        if (!in) throw Error("checkpoint: truncated tensor " + name + " in " + path);
        for (std::size_t k = 0; k < payload.size(); ++k) t.v[k] = payload[k];
        tensors.emplace_back(std::move(name), std::move(t));
    }
    return tensors;
}

/// Convenience for parameter sets: saves {name -> value} and restores into
/// matching Params by name, erroring on missing names or shape changes.
inline void save_params(const std::string& path, const std::vector<ad::Param*>& params) {
    std::vector<std::pair<std::string, ad::Tensor>> tensors;
    tensors.reserve(params.size());
    for (const ad::Param* p : params) tensors.emplace_back(p->name, p->value);
    save_tensors(path, tensors);
}

inline void load_params(const std::string& path, const std::vector<ad::Param*>& params) {
    auto tensors = load_tensors(path);
    std::map<std::string, ad::Tensor*> by_name;
    for (auto& [name, t] : tensors) {
        if (!by_name.emplace(name, &t).second)
            throw Error("checkpoint: duplicate tensor " + name + " in " + path);
    }
    for (ad::Param* p : params) {
        auto it = by_name.find(p->name);
        if (it == by_name.end())
            throw Error("checkpoint: missing tensor " + p->name + " in " + path);
        if (!(it->second->shape == p->value.shape))
            throw Error("checkpoint: shape mismatch for " + p->name + ": file " +
                        it->second->shape_str() + " vs model " + p->value.shape_str());
        p->value = *it->second;
    }
}

}  // namespace e2e::ckpt
