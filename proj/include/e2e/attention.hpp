#pragma once

#include <utility>
#include <vector>

#include "e2e/layers.hpp"

namespace e2e::att {

using ad::Param;
using ad::Tape;
using ad::Tensor;
using ad::Var;

/// Location-aware attention: e_t = v^T tanh(W q + V h_t + U f_t + b) with
/// convolutional features f = conv(a_prev), masked softmax over frames and
/// context r = sum_t a_t h_t.
struct Attention {
    Param conv_w;  // (nfilt, 1, 1, width)
    Param conv_b;  // (nfilt)
    Param w_q;     // (dec_h, att_dim)
    Param w_h;     // (enc_d, att_dim)
    Param w_f;     // (nfilt, att_dim)
    Param b;       // (att_dim)
    Param v;       // (att_dim, 1)
    int nfilt = 10, width = 100;

    Attention() = default;
    Attention(const std::string& name, int enc_d, int dec_h, int att_dim, int nfilt_, int width_,
              Rng& rng)
        : conv_w(name + ".conv_w", ad::init_uniform({nfilt_, 1, 1, width_}, width_, rng)),
          conv_b(name + ".conv_b", Tensor({nfilt_})),
          w_q(name + ".w_q", ad::init_uniform({dec_h, att_dim}, dec_h, rng)),
          w_h(name + ".w_h", ad::init_uniform({enc_d, att_dim}, enc_d, rng)),
          w_f(name + ".w_f", ad::init_uniform({nfilt_, att_dim}, nfilt_, rng)),
          b(name + ".b", Tensor({att_dim})),
          v(name + ".v", ad::init_uniform({att_dim, 1}, att_dim, rng)),
          nfilt(nfilt_),
          width(width_) {}

    /// Per-utterance bindings: parameters bound once, V h precomputed, and
    /// the location kernel capped at the frame count.
    struct Ctx {
        Var h, hv, kernel, conv_bias, w_q, b, v;
        int tprime = 0, eff_width = 0;
        std::vector<bool> mask;
    };

    Ctx prepare(Tape& t, Var h, std::vector<bool> mask) const {
        const Tensor& th = t.val(h);
        if (th.rank() != 2 || th.dim(0) < 1)
            throw Error("attention: need (T',enc_d) encoder output, got " + th.shape_str());
        if (static_cast<int>(mask.size()) != th.dim(0))
            throw Error("attention: mask size " + std::to_string(mask.size()) +
                        " does not match T'=" + std::to_string(th.dim(0)));
        Ctx c;
        c.h = h;
        c.tprime = th.dim(0);
        c.mask = std::move(mask);
        c.hv = t.matmul(h, t.param(const_cast<Param&>(w_h)));
        c.eff_width = std::min(width, c.tprime);
        Var kw = t.param(const_cast<Param&>(conv_w));
        c.kernel = c.eff_width == width
                       ? kw
                       : t.slice(kw, 3, (width - c.eff_width) / 2, c.eff_width);
        c.conv_bias = t.param(const_cast<Param&>(conv_b));
        c.w_q = t.param(const_cast<Param&>(w_q));
        c.b = t.param(const_cast<Param&>(b));
        c.v = t.param(const_cast<Param&>(v));
        // U is folded into the (T', nfilt) feature matmul each step.
        return c;
    }

    /// One attention step: q (1, dec_h), a_prev (T') -> {a (T'), r (1, enc_d)}.
    std::pair<Var, Var> step(Tape& t, const Ctx& c, Var q, Var a_prev) const {
        if (t.val(a_prev).size() != c.tprime)
            throw Error("attention: a_prev has " + std::to_string(t.val(a_prev).size()) +
                        " entries, expected " + std::to_string(c.tprime));
        // Location features: pad so the convolution preserves length.
        const int pl = (c.eff_width - 1) / 2, pr = c.eff_width - 1 - pl;
        Var am = t.reshape(a_prev, {1, 1, c.tprime});
        std::vector<Var> parts;
        if (pl > 0) parts.push_back(t.constant(Tensor({1, 1, pl})));
        parts.push_back(am);
        if (pr > 0) parts.push_back(t.constant(Tensor({1, 1, pr})));
        Var padded = parts.size() == 1 ? parts[0] : t.concat(parts, 2);
        Var f = t.conv2d(padded, c.kernel, c.conv_bias, 1, 0);      // (nfilt, 1, T')
        Var fmat = t.transpose2d(t.reshape(f, {nfilt, c.tprime}));  // (T', nfilt)
        Var qw = t.matmul(q, c.w_q);                                // (1, att_dim)
        Var e = t.add(t.add(t.add(c.hv, t.matmul(fmat, t.param(const_cast<Param&>(w_f)))), qw),
                      c.b);
        Var scores = t.reshape(t.matmul(t.tanh_(e), c.v), {c.tprime});
        Var a = t.masked_softmax(scores, c.mask);
        Var r = t.matmul(t.reshape(a, {1, c.tprime}), c.h);
        return {a, r};
    }

    /// Uniform initial attention over the valid frames.
    Tensor initial_weights(int tprime, const std::vector<bool>& mask) const {
        int valid = 0;
        for (bool m : mask) valid += m ? 1 : 0;
        if (tprime < 1 || valid == 0) throw Error("attention: no valid frames");
        Tensor a({tprime});
        for (int i = 0; i < tprime; ++i) a.v[i] = mask[i] ? 1.0 / valid : 0.0;
        return a;
    }

    void collect(std::vector<Param*>& out) {
        for (Param* p : {&conv_w, &conv_b, &w_q, &w_h, &w_f, &b, &v}) out.push_back(p);
    }
};

/// Character decoder: y_l ~ Softmax(Lin(LSTM([embed(y_{l-1}); r_l]))).
/// Embedding row 0 is the start symbol, rows 1..K the characters; output
/// index 0 is end-of-sequence, indices 1..K the characters.
struct Decoder {
    Param embed;        // (K+1, emb)
    nn::LstmCell lstm;  // in = emb + enc_d
    nn::Linear out;     // dec_h -> K+1
    int n_chars = 0, dec_h = 0;

    Decoder() = default;
    Decoder(const std::string& name, int n_chars_, int emb, int enc_d, int dec_h_, Rng& rng)
        : embed(name + ".embed", ad::init_uniform({n_chars_ + 1, emb}, emb, rng)),
          lstm(name + ".lstm", emb + enc_d, dec_h_, rng),
          out(name + ".out", dec_h_, n_chars_ + 1, rng),
          n_chars(n_chars_),
          dec_h(dec_h_) {}

    void collect(std::vector<Param*>& out_ps) {
        out_ps.push_back(&embed);
        lstm.collect(out_ps);
        out.collect(out_ps);
    }
};

constexpr int kEos = 0;  // decoder output index; it doubles as the start id

struct DecStep {
    Var logp;  // (1, K+1) log-probabilities
    Var h, c;  // decoder LSTM state
    Var a;     // updated attention weights (T')
};

/// One joint attention + decoder step. prev_id = 0 feeds the start symbol,
/// otherwise the previous character id (1..K).
inline DecStep decoder_step(Tape& t, const Decoder& dec, const Attention& at,
                            const Attention::Ctx& ctx, Var h_prev, Var c_prev, Var a_prev,
                            int prev_id) {
    if (prev_id < 0 || prev_id > dec.n_chars)
        throw Error("decoder: previous id " + std::to_string(prev_id) + " out of range");
    auto [a, r] = at.step(t, ctx, h_prev, a_prev);
    Var x = t.concat({t.embedding_lookup(t.param(const_cast<Param&>(dec.embed)), prev_id), r}, 1);
    auto bound = dec.lstm.bind(t);
    auto [h, c] = bound.step(t, x, h_prev, c_prev);
    Var logp = t.log_softmax(dec.out.apply(t, h));
    return {logp, h, c, a};
}

/// Teacher-forced negative log-likelihood of `labels` (char ids 1..K)
/// followed by end-of-sequence, given encoder output h (T', enc_d).
inline Var attention_nll(Tape& t, const Decoder& dec, const Attention& at, Var h,
                         const std::vector<int>& labels,
                         std::vector<Var>* step_logp = nullptr) {
    const int tprime = t.val(h).dim(0);
    std::vector<bool> mask(tprime, true);
    auto ctx = at.prepare(t, h, mask);
    Var hq = t.constant(Tensor({1, dec.dec_h}));
    Var cq = t.constant(Tensor({1, dec.dec_h}));
    Var a = t.constant(at.initial_weights(tprime, mask));
    std::vector<Var> nlls;
    int prev = 0;
    for (std::size_t l = 0; l <= labels.size(); ++l) {
        const int target = l < labels.size() ? labels[l] : kEos;
        if (target < 0 || target > dec.n_chars || (l < labels.size() && target == 0))
            throw Error("attention_nll: label id " + std::to_string(target) + " out of range");
        DecStep s = decoder_step(t, dec, at, ctx, hq, cq, a, prev);
        Var lp = t.pick(s.logp, target);
        if (step_logp) step_logp->push_back(lp);
        nlls.push_back(t.scale(lp, -1.0));
        hq = s.h;
        cq = s.c;
        a = s.a;
        prev = target;
    }
    Var total = nlls[0];
    for (std::size_t i = 1; i < nlls.size(); ++i) total = t.add(total, nlls[i]);
    return total;
}

}  // namespace e2e::att
