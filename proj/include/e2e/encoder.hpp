#pragma once

#include <optional>
#include <string>
#include <vector>

#include "e2e/features.hpp"
#include "e2e/layers.hpp"

namespace e2e::enc {

using ad::Param;
using ad::Tape;
using ad::Tensor;
using ad::Var;
using feat::ArrayTag;
using nn::NormMode;

/// Two rounds of 2x2 ceil-mode pooling: T' = ceil(ceil(T/2)/2).
inline int subsampled_len(int t) { return ((t + 1) / 2 + 1) / 2; }

/// (T, channels*per) stacked frames -> CNN input layout (channels, per, T).
inline Tensor to_cnn_layout(const Tensor& frames, int channels) {
    if (frames.rank() != 2) throw Error("to_cnn_layout: need (T,dim), got " + frames.shape_str());
    if (channels < 1 || frames.dim(1) % channels != 0)
        throw Error("to_cnn_layout: dim " + std::to_string(frames.dim(1)) +
                    " not divisible by " + std::to_string(channels) + " channels");
    const int t = frames.dim(0), per = frames.dim(1) / channels;
    Tensor out({channels, per, t});
    for (int c = 0; c < channels; ++c)
        for (int m = 0; m < per; ++m)
            for (int i = 0; i < t; ++i)
                out.v[(static_cast<std::size_t>(c) * per + m) * t + i] = frames.at(i, c * per + m);
    return out;
}

enum class EncoderKind { vgg, res, res_brn };

inline std::string encoder_kind_name(EncoderKind k) {
    switch (k) {
        case EncoderKind::vgg: return "vgg";
        case EncoderKind::res: return "res";
        case EncoderKind::res_brn: return "res_brn";
    }
    throw Error("unknown encoder kind");
}

inline EncoderKind encoder_kind_from_name(const std::string& s) {
    if (s == "vgg") return EncoderKind::vgg;
    if (s == "res") return EncoderKind::res;
    if (s == "res_brn") return EncoderKind::res_brn;
    throw Error("unknown encoder kind '" + s + "' (expected vgg|res|res_brn)");
}

/// VGG-style front-end: two blocks of [conv3x3, conv3x3, maxpool2x2].
struct VggCnn {
    nn::Conv2d c1a, c1b, c2a, c2b;

    VggCnn() = default;
    VggCnn(const std::string& name, int in_ch, int planes1, int planes2, Rng& rng)
        : c1a(name + ".c1a", in_ch, planes1, 3, 3, 1, 1, rng),
          c1b(name + ".c1b", planes1, planes1, 3, 3, 1, 1, rng),
          c2a(name + ".c2a", planes1, planes2, 3, 3, 1, 1, rng),
          c2b(name + ".c2b", planes2, planes2, 3, 3, 1, 1, rng) {}

    Var apply(Tape& t, Var x) const {
        Var u = t.relu(c1a.apply(t, x));
        u = t.maxpool2d(t.relu(c1b.apply(t, u)));
        u = t.relu(c2a.apply(t, u));
        return t.maxpool2d(t.relu(c2b.apply(t, u)));
    }
    void collect(std::vector<Param*>& out) {
        c1a.collect(out);
        c1b.collect(out);
        c2a.collect(out);
        c2b.collect(out);
    }
};

/// Residual front-end: two pre-activation residual blocks, each followed by
/// a 2x2 max-pool. Six convolutions in total counting the 1x1 skips.
struct ResCnn {
    nn::ResidualBlock b1, b2;

    ResCnn() = default;
    ResCnn(const std::string& name, int in_ch, int planes1, int planes2, NormMode mode,
           double dropout, Rng& rng)
        : b1(name + ".b1", in_ch, planes1, mode, dropout, rng),
          b2(name + ".b2", planes1, planes2, mode, dropout, rng) {}

    std::vector<Var> apply_batch(Tape& t, const std::vector<Var>& xs, bool train, Rng& rng) {
        std::vector<Var> u = b1.apply_batch(t, xs, train, rng);
        for (Var& v : u) v = t.maxpool2d(v);
        u = b2.apply_batch(t, u, train, rng);
        for (Var& v : u) v = t.maxpool2d(v);
        return u;
    }
    void collect(std::vector<Param*>& out) {
        b1.collect(out);
        b2.collect(out);
    }
    void collect_state(std::vector<std::pair<std::string, Tensor*>>& out) {
        b1.collect_state(out);
        b2.collect_state(out);
    }
};

/// One CNN branch; consumes (channels, per, T) maps, emits (T', planes2*F')
/// frame sequences with T' = subsampled_len(T).
struct CnnFrontEnd {
    EncoderKind kind = EncoderKind::vgg;
    std::optional<VggCnn> vgg;
    std::optional<ResCnn> res;

    CnnFrontEnd() = default;
    CnnFrontEnd(const std::string& name, EncoderKind kind_, int in_ch, int planes1, int planes2,
                double dropout, Rng& rng)
        : kind(kind_) {
        if (kind == EncoderKind::vgg)
            vgg.emplace(name, in_ch, planes1, planes2, rng);
        else
            res.emplace(name, in_ch, planes1, planes2,
                        kind == EncoderKind::res_brn ? NormMode::batch_renorm : NormMode::none,
                        dropout, rng);
    }

    std::vector<Var> apply_batch(Tape& t, const std::vector<Var>& xs, bool train, Rng& rng) {
        for (Var x : xs) {
            const Tensor& tx = t.val(x);
            if (tx.rank() != 3)
                throw Error("encoder: need (channels,freq,time) input, got " + tx.shape_str());
            if (tx.dim(2) < 4)
                throw Error("encoder: input too short, time=" + std::to_string(tx.dim(2)) +
                            " (need at least 4 frames)");
        }
        std::vector<Var> maps;
        if (kind == EncoderKind::vgg) {
            for (Var x : xs) maps.push_back(vgg->apply(t, x));
        } else {
            maps = res->apply_batch(t, xs, train, rng);
        }
        std::vector<Var> seqs;
        seqs.reserve(maps.size());
        for (Var m : maps) seqs.push_back(nn::cnn_to_seq(t, m));
        return seqs;
    }
    void collect(std::vector<Param*>& out) {
        if (vgg) vgg->collect(out);
        if (res) res->collect(out);
    }
    void collect_state(std::vector<std::pair<std::string, Tensor*>>& out) {
        if (res) res->collect_state(out);
    }
};

struct BlstmpStack {
    std::vector<nn::BlstmpLayer> layers;

    BlstmpStack() = default;
    BlstmpStack(const std::string& name, int in_dim, int n_layers, int cells, int proj, Rng& rng) {
        int d = in_dim;
        for (int i = 0; i < n_layers; ++i) {
            layers.emplace_back(name + ".l" + std::to_string(i), d, cells, proj, rng);
            d = proj;
        }
    }
    Var apply(Tape& t, Var seq) const {
        for (const auto& l : layers) seq = l.apply(t, seq);
        return seq;
    }
    void collect(std::vector<Param*>& out) {
        for (auto& l : layers) l.collect(out);
    }
};

struct EncoderConfig {
    EncoderKind kind = EncoderKind::vgg;
    bool parallel = false;
    int channels_distant = 4;
    int channels_close = 2;
    int feats_per_channel = 80;
    int planes1 = 64;
    int planes2 = 128;
    int rnn_layers = 4;
    int rnn_cells = 512;
    int rnn_proj = 512;
    double dropout_p = 0.0;
};

/// Full encoder: one or two CNN branches feeding a shared BLSTMP stack.
/// In parallel mode the branch is chosen by the utterance array tag; in
/// single mode every utterance goes through the same branch.
struct Encoder {
    EncoderConfig cfg;
    CnnFrontEnd branch_distant;
    std::optional<CnnFrontEnd> branch_close;
    BlstmpStack rnn;

    Encoder() = default;
    Encoder(const EncoderConfig& c, Rng& rng) : cfg(c) {
        const int freq = c.feats_per_channel;
        const int fp = subsampled_len(freq);
        branch_distant = CnnFrontEnd("enc.cnn_distant", c.kind, c.channels_distant, c.planes1,
                                     c.planes2, c.dropout_p, rng);
        if (c.parallel)
            branch_close.emplace("enc.cnn_close", c.kind, c.channels_close, c.planes1, c.planes2,
                                 c.dropout_p, rng);
        rnn = BlstmpStack("enc.rnn", c.planes2 * fp, c.rnn_layers, c.rnn_cells, c.rnn_proj, rng);
    }

    int out_dim() const { return cfg.rnn_proj; }

    CnnFrontEnd& branch(ArrayTag tag) {
        if (!cfg.parallel) return branch_distant;
        if (tag == ArrayTag::distant) return branch_distant;
        if (tag == ArrayTag::close) {
            if (!branch_close) throw Error("encoder: close branch not built");
            return *branch_close;
        }
        throw Error("encoder: unknown array tag");
    }

    /// Encode a single-tag batch of (channels, per, T) inputs; returns one
    /// (T', proj) sequence per utterance.
    std::vector<Var> encode_batch(Tape& t, const std::vector<Tensor>& inputs, ArrayTag tag,
                                  bool train, Rng& rng) {
        if (inputs.empty()) throw Error("encoder: empty batch");
        std::vector<Var> xs;
        xs.reserve(inputs.size());
        for (const Tensor& in : inputs) xs.push_back(t.leaf(in, false));
        std::vector<Var> seqs = branch(tag).apply_batch(t, xs, train, rng);
        for (Var& s : seqs) s = rnn.apply(t, s);
        return seqs;
    }

    /// Inference-mode encoding of one utterance, optionally forcing a branch.
    Tensor encode(const Tensor& input, ArrayTag branch_tag) {
        Tape t;
        Rng rng(0);
        std::vector<Var> out = encode_batch(t, {input}, branch_tag, false, rng);
        return t.val(out[0]);
    }

    void collect(std::vector<Param*>& out) {
        branch_distant.collect(out);
        if (branch_close) branch_close->collect(out);
        rnn.collect(out);
    }
    void collect_state(std::vector<std::pair<std::string, Tensor*>>& out) {
        branch_distant.collect_state(out);
        if (branch_close) branch_close->collect_state(out);
    }
};

}  // namespace e2e::enc
