#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "e2e/autodiff.hpp"

namespace e2e::nn {

using ad::Param;
using ad::Tape;
using ad::Tensor;
using ad::Var;

/// y = x W + b, x: (rows, in) -> (rows, out).
struct Linear {
    Param w, b;

    Linear() = default;
    Linear(const std::string& name, int in, int out, Rng& rng)
        : w(name + ".w", ad::init_uniform({in, out}, in, rng)), b(name + ".b", Tensor({out})) {}

    Var apply(Tape& t, Var x) const {
        return t.add(t.matmul(x, t.param(const_cast<Param&>(w))),
                     t.param(const_cast<Param&>(b)));
    }
    // Bind params once per tape and reuse across many applications.
    struct Bound {
        Var w, b;
        const Linear* layer;
        Var apply(Tape& t, Var x) const { return t.add(t.matmul(x, w), b); }
    };
    Bound bind(Tape& t) const {
        return {t.param(const_cast<Param&>(w)), t.param(const_cast<Param&>(b)), this};
    }
    void collect(std::vector<Param*>& out) {
        out.push_back(&w);
        out.push_back(&b);
    }
};

/// Single LSTM cell: gates [input | forget | cell | output], forget bias
/// initialized to +1.
struct LstmCell {
    Param w_ih, w_hh, b;
    int hidden = 0;

    LstmCell() = default;
    LstmCell(const std::string& name, int in, int h, Rng& rng)
        : w_ih(name + ".w_ih", ad::init_uniform({in, 4 * h}, in, rng)),
          w_hh(name + ".w_hh", ad::init_uniform({h, 4 * h}, h, rng)),
          b(name + ".b", Tensor({4 * h})),
          hidden(h) {
        for (int k = 0; k < h; ++k) b.value.v[h + k] = 1.0;
    }

    struct Bound {
        Var w_ih, w_hh, b;
        int hidden;
        /// x: (1, in), h/c: (1, H) -> {h', c'}.
        std::pair<Var, Var> step(Tape& t, Var x, Var h, Var c) const {
            Var z = t.add(t.add(t.matmul(x, w_ih), t.matmul(h, w_hh)), b);
            Var hc = t.lstm_cell(z, c);
            return {t.slice(hc, 1, 0, hidden), t.slice(hc, 1, hidden, hidden)};
        }
        /// Precomputed input projection row zx = (x W_ih + b) for one step.
        std::pair<Var, Var> step_pre(Tape& t, Var zx, Var h, Var c) const {
            Var hc = t.lstm_cell(t.add(zx, t.matmul(h, w_hh)), c);
            return {t.slice(hc, 1, 0, hidden), t.slice(hc, 1, hidden, hidden)};
        }
    };
    Bound bind(Tape& t) const {
        return {t.param(const_cast<Param&>(w_ih)), t.param(const_cast<Param&>(w_hh)),
                t.param(const_cast<Param&>(b)), hidden};
    }
    void collect(std::vector<Param*>& out) {
        out.push_back(&w_ih);
        out.push_back(&w_hh);
        out.push_back(&b);
    }
};

/// Runs an LSTM over a (T, in) sequence; returns per-step hidden states
/// (T, H). The input projection is one matmul for the whole sequence.
inline Var lstm_run(Tape& t, const LstmCell::Bound& cell, Var seq, Var h0, Var c0,
                    bool reverse = false) {
    const int tmax = t.val(seq).dim(0);
    Var zx_all = t.add(t.matmul(seq, cell.w_ih), cell.b);
    std::vector<Var> hs(tmax);
    Var h = h0, c = c0;
    for (int i = 0; i < tmax; ++i) {
        const int step = reverse ? tmax - 1 - i : i;
        auto [nh, nc] = cell.step_pre(t, t.slice(zx_all, 0, step, 1), h, c);
        hs[step] = nh;
        h = nh;
        c = nc;
    }
    return t.concat(hs, 0);
}

/// Bidirectional LSTM layer with a linear projection of the concatenated
/// directions.
struct BlstmpLayer {
    LstmCell fwd, bwd;
    Linear proj;
    int hidden = 0;

    BlstmpLayer() = default;
    BlstmpLayer(const std::string& name, int in, int h, int proj_dim, Rng& rng)
        : fwd(name + ".fwd", in, h, rng),
          bwd(name + ".bwd", in, h, rng),
          proj(name + ".proj", 2 * h, proj_dim, rng),
          hidden(h) {}

    /// Pre-projection directional streams {forward, backward}, each (T, H).
    std::pair<Var, Var> directions(Tape& t, Var seq) const {
        if (t.val(seq).dim(0) < 1) throw Error("blstmp: empty sequence");
        Var zero = t.constant(Tensor({1, hidden}));
        auto fb = fwd.bind(t);
        auto bb = bwd.bind(t);
        return {lstm_run(t, fb, seq, zero, zero, false),
                lstm_run(t, bb, seq, zero, zero, true)};
    }
    Var apply(Tape& t, Var seq) const {
        auto [f, b] = directions(t, seq);
        return proj.apply(t, t.concat({f, b}, 1));
    }
    void collect(std::vector<Param*>& out) {
        fwd.collect(out);
        bwd.collect(out);
        proj.collect(out);
    }
};

/// 2-d convolution layer; kernel (out_planes, in_planes, kh, kw).
struct Conv2d {
    Param w, b;
    int stride = 1, pad = 0;

    Conv2d() = default;
    Conv2d(const std::string& name, int in_planes, int out_planes, int kh, int kw, int stride_,
           int pad_, Rng& rng)
        : w(name + ".w", ad::init_uniform({out_planes, in_planes, kh, kw}, in_planes * kh * kw, rng)),
          b(name + ".b", Tensor({out_planes})),
          stride(stride_),
          pad(pad_) {}

    Var apply(Tape& t, Var x) const {
        return t.conv2d(x, t.param(const_cast<Param&>(w)), t.param(const_cast<Param&>(b)),
                        stride, pad);
    }
    void collect(std::vector<Param*>& out) {
        out.push_back(&w);
        out.push_back(&b);
    }
};

/// (C, H, W) feature map -> (W, C*H) frame sequence.
inline Var cnn_to_seq(Tape& t, Var x) {
    const Tensor& tx = t.val(x);
    if (tx.rank() != 3) throw Error("cnn_to_seq: need (C,H,W), got " + tx.shape_str());
    const int c = tx.dim(0), h = tx.dim(1), w = tx.dim(2);
    Tensor out({w, c * h});
    for (int p = 0; p < c; ++p)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j)
                out.at(j, p * h + i) = tx.v[(static_cast<std::size_t>(p) * h + i) * w + j];
    const int src = x.i;
    return t.record(out, {x}, [src, c, h, w](Tape& tp, const Tensor& g, int) {
        Tensor& gx = tp.grad(Var{src});
        for (int p = 0; p < c; ++p)
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j)
                    gx.v[(static_cast<std::size_t>(p) * h + i) * w + j] +=
                        g.v[static_cast<std::size_t>(j) * (c * h) + p * h + i];
    });
}

// ---------------------------------------------------------------------------
// Batch renormalization
// ---------------------------------------------------------------------------

/// Moving statistics and the clip-bound ramp. r_max ramps 1 -> 3 and d_max
/// 0 -> 5 over the first `ramp_steps` training steps. The step counter lives
/// in a 1-element tensor so it checkpoints through the same path as the
/// moving statistics.
struct BatchRenormState {
    Tensor moving_mean, moving_var;
    Tensor step_count{std::vector<int>{1}};
    double momentum = 0.99;
    double r_max_final = 3.0, d_max_final = 5.0;
    std::int64_t ramp_steps = 5000;

    explicit BatchRenormState(int planes = 0)
        : moving_mean({std::max(planes, 1)}), moving_var({std::max(planes, 1)}, 1.0) {}

    std::int64_t step_value() const { return static_cast<std::int64_t>(step_count.v[0]); }
    void bump_step() { step_count.v[0] += 1.0; }

    double ramp() const {
        return ramp_steps <= 0 ? 1.0
                               : std::min(1.0, static_cast<double>(step_value()) /
                                                   static_cast<double>(ramp_steps));
    }
    double r_max() const { return 1.0 + (r_max_final - 1.0) * ramp(); }
    double d_max() const { return d_max_final * ramp(); }
};

constexpr double kBatchNormEps = 1e-8;

/// Pure batch-renorm graph op over (C, H, W): per-plane statistics across
/// H*W, x_hat = ((x - mu_B)/sigma_B)*r + d with r/d clipped against the
/// moving statistics and treated as constants in backward, then gamma/beta.
/// r_max=1, d_max=0 forces r=1, d=0, which is plain batch normalization.
/// Inference (train=false) uses moving statistics only. Batch means/vars
/// are reported through out_mean/out_var for the caller's state update.
inline Var batch_renorm_op(Tape& t, Var x, Var gamma, Var beta, const Tensor& moving_mean,
                           const Tensor& moving_var, double r_max, double d_max, bool train,
                           Tensor* out_mean = nullptr, Tensor* out_var = nullptr) {
    const Tensor& tx = t.val(x);
    if (tx.rank() != 3) throw Error("batch_renorm: need (C,H,W), got " + tx.shape_str());
    const int c = tx.dim(0);
    const std::int64_t n = static_cast<std::int64_t>(tx.dim(1)) * tx.dim(2);
    if (n == 0) throw Error("batch_renorm: empty batch");
    if (t.val(gamma).size() != c || t.val(beta).size() != c ||
        moving_mean.size() != c || moving_var.size() != c)
        throw Error("batch_renorm: per-plane parameter size mismatch for " + tx.shape_str());

    std::vector<double> mu(c), sigma(c), r(c), d(c);
    for (int p = 0; p < c; ++p) {
        const double* xs = tx.data() + p * n;
        double s = 0.0, s2 = 0.0;
        if (train) {
            for (std::int64_t i = 0; i < n; ++i) {
                s += xs[i];
                s2 += xs[i] * xs[i];
            }
            mu[p] = s / static_cast<double>(n);
            const double var = std::max(0.0, s2 / static_cast<double>(n) - mu[p] * mu[p]);
            sigma[p] = std::sqrt(var + kBatchNormEps);
            if (out_mean) out_mean->v[p] = mu[p];
            if (out_var) out_var->v[p] = var;
            const double sig_mov = std::sqrt(moving_var.v[p] + kBatchNormEps);
            r[p] = std::clamp(sigma[p] / sig_mov, 1.0 / r_max, r_max);
            d[p] = std::clamp((mu[p] - moving_mean.v[p]) / sig_mov, -d_max, d_max);
        } else {
            mu[p] = moving_mean.v[p];
            sigma[p] = std::sqrt(moving_var.v[p] + kBatchNormEps);
            r[p] = 1.0;
            d[p] = 0.0;
        }
    }

    Tensor out(tx.shape);
    const Tensor& g = t.val(gamma);
    const Tensor& be = t.val(beta);
    for (int p = 0; p < c; ++p) {
        const double* xs = tx.data() + p * n;
        double* ys = out.data() + p * n;
        for (std::int64_t i = 0; i < n; ++i)
            ys[i] = g.v[p] * ((xs[i] - mu[p]) / sigma[p] * r[p] + d[p]) + be.v[p];
    }

    const int ix = x.i, ig = gamma.i, ib = beta.i;
    const bool is_train = train;
    return t.record(out, {x, gamma, beta},
                    [ix, ig, ib, mu, sigma, r, d, c, n, is_train](Tape& tp, const Tensor& go, int) {
                        const Tensor& tx = tp.val(Var{ix});
                        const Tensor& g = tp.val(Var{ig});
                        Tensor* gx = tp.needs_grad(Var{ix}) ? &tp.grad(Var{ix}) : nullptr;
                        Tensor* gg = tp.needs_grad(Var{ig}) ? &tp.grad(Var{ig}) : nullptr;
                        Tensor* gb = tp.needs_grad(Var{ib}) ? &tp.grad(Var{ib}) : nullptr;
                        for (int p = 0; p < c; ++p) {
                            const double* xs = tx.data() + p * n;
                            const double* gos = go.data() + p * n;
                            double gsum = 0.0, gz = 0.0;
                            for (std::int64_t i = 0; i < n; ++i) {
                                gsum += gos[i];
                                gz += gos[i] * (xs[i] - mu[p]) / sigma[p];
                            }
                            // x_hat = z*r + d, so dL/dgamma = r*sum(g z) + d*sum(g).
                            if (gg) gg->v[p] += gz * r[p] + gsum * d[p];
                            if (gb) gb->v[p] += gsum;
                            if (gx) {
                                const double scale = g.v[p] * r[p] / sigma[p];
                                if (is_train) {
                                    const double mg = gsum / static_cast<double>(n);
                                    const double mgz = gz / static_cast<double>(n);
                                    for (std::int64_t i = 0; i < n; ++i) {
                                        const double z = (xs[i] - mu[p]) / sigma[p];
                                        gx->v[p * n + i] += scale * (gos[i] - mg - z * mgz);
                                    }
                                } else {
                                    for (std::int64_t i = 0; i < n; ++i)
                                        gx->v[p * n + i] += scale * gos[i];
                                }
                            }
                        }
                    });
}

/// Stateful wrapper owning gamma/beta and the moving statistics.
/// renorm=false pins r=1, d=0 (plain batch normalization, same code path).
struct BatchRenorm {
    Param gamma, beta;
    BatchRenormState state;
    bool renorm = true;
    bool update_stats = true;  // freeze for deterministic re-evaluation

    BatchRenorm() = default;
    BatchRenorm(const std::string& name, int planes, bool renorm_)
        : gamma(name + ".gamma", Tensor({planes}, 1.0)),
          beta(name + ".beta", Tensor({planes})),
          state(planes),
          renorm(renorm_) {}

    /// One forward; in train mode also updates moving stats and the step
    /// counter, so call exactly once per training step per layer.
    Var apply(Tape& t, Var x, bool train) {
        const double rm = renorm ? state.r_max() : 1.0;
        const double dm = renorm ? state.d_max() : 0.0;
        Tensor bm({t.val(x).dim(0)}), bv({t.val(x).dim(0)});
        Var y = batch_renorm_op(t, x, t.param(gamma), t.param(beta), state.moving_mean,
                                state.moving_var, rm, dm, train, &bm, &bv);
        if (train && update_stats) {
            for (std::int64_t p = 0; p < bm.size(); ++p) {
                state.moving_mean.v[p] =
                    state.momentum * state.moving_mean.v[p] + (1.0 - state.momentum) * bm.v[p];
                state.moving_var.v[p] =
                    state.momentum * state.moving_var.v[p] + (1.0 - state.momentum) * bv.v[p];
            }
            state.bump_step();
        }
        return y;
    }
    void collect(std::vector<Param*>& out) {
        out.push_back(&gamma);
        out.push_back(&beta);
    }
    /// Non-trainable tensors for checkpoints.
    void collect_state(std::vector<std::pair<std::string, Tensor*>>& out) {
        out.emplace_back(gamma.name + ".moving_mean", &state.moving_mean);
        out.emplace_back(gamma.name + ".moving_var", &state.moving_var);
        out.emplace_back(gamma.name + ".step", &state.step_count);
    }
};

// ---------------------------------------------------------------------------
// Residual block
// ---------------------------------------------------------------------------

enum class NormMode { none, batch_norm, batch_renorm };

/// Pre-activation residual block: H(x) = F(x) + skip(x) with
/// F = conv_b(act(norm(dropout(conv_a(act(norm(x))))))) and a 1x1 skip
/// projection. conv_a/conv_b are 3x3 pad-1, spatial dims preserved.
struct ResidualBlock {
    Conv2d conv_a, conv_b, skip;
    BatchRenorm norm1, norm2;
    NormMode mode = NormMode::none;
    double dropout_p = 0.0;

    ResidualBlock() = default;
    ResidualBlock(const std::string& name, int in_planes, int out_planes, NormMode mode_,
                  double dropout, Rng& rng)
        : conv_a(name + ".conv_a", in_planes, out_planes, 3, 3, 1, 1, rng),
          conv_b(name + ".conv_b", out_planes, out_planes, 3, 3, 1, 1, rng),
          skip(name + ".skip", in_planes, out_planes, 1, 1, 1, 0, rng),
          norm1(name + ".norm1", in_planes, mode_ == NormMode::batch_renorm),
          norm2(name + ".norm2", out_planes, mode_ == NormMode::batch_renorm),
          mode(mode_),
          dropout_p(dropout) {}

    Var apply(Tape& t, Var x, bool train, Rng& rng) {
        std::vector<Var> xs{x};
        return apply_batch(t, xs, train, rng)[0];
    }

    /// Batched forward: normalization statistics are shared across the
    /// whole mini-batch by concatenating along time at each norm point.
    std::vector<Var> apply_batch(Tape& t, const std::vector<Var>& xs, bool train, Rng& rng) {
        std::vector<Var> u = xs;
        if (mode != NormMode::none) u = norm_batch(t, norm1, u, train);
        for (Var& v : u) v = conv_a.apply(t, t.relu(v));
        if (dropout_p > 0.0)
            for (Var& v : u) v = t.dropout(v, dropout_p, train, rng);
        if (mode != NormMode::none) u = norm_batch(t, norm2, u, train);
        for (std::size_t i = 0; i < u.size(); ++i)
            u[i] = t.add(conv_b.apply(t, t.relu(u[i])), skip.apply(t, xs[i]));
        return u;
    }

    void collect(std::vector<Param*>& out) {
        conv_a.collect(out);
        conv_b.collect(out);
        skip.collect(out);
        if (mode != NormMode::none) {
            norm1.collect(out);
            norm2.collect(out);
        }
    }
    void collect_state(std::vector<std::pair<std::string, Tensor*>>& out) {
        if (mode != NormMode::none) {
            norm1.collect_state(out);
            norm2.collect_state(out);
        }
    }

    static std::vector<Var> norm_batch(Tape& t, BatchRenorm& norm, const std::vector<Var>& xs,
                                       bool train) {
        if (xs.empty()) throw Error("batch_renorm: empty batch");
        if (xs.size() == 1) return {norm.apply(t, xs[0], train)};
        Var joint = norm.apply(t, t.concat(xs, 2), train);
        std::vector<Var> out;
        int off = 0;
        for (Var x : xs) {
            const int w = t.val(x).dim(2);
            out.push_back(t.slice(joint, 2, off, w));
            off += w;
        }
        return out;
    }
};

}  // namespace e2e::nn
