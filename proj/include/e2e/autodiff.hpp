#pragma once

#include <algorithm>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "e2e/rng.hpp"
#include "e2e/tensor.hpp"

namespace e2e::ad {

/// Named trainable tensor with a gradient slot, the unit of checkpointing
/// and optimizer updates.
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;

    Param() = default;
    Param(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
        grad = Tensor(value.shape);
    }
    void zero_grad() { std::fill(grad.v.begin(), grad.v.end(), 0.0); }
};

class Tape;

/// Handle to a node on a tape. Only valid for the tape that created it.
struct Var {
    int i = -1;
    bool valid() const { return i >= 0; }
};

/// Define-by-run reverse-mode tape. Nodes are recorded in construction
/// order, which is already a topological order, so backward() is a single
/// reverse sweep visiting each node exactly once. Tensors are never
/// mutated in place once written.
class Tape {
    struct Node {
        Tensor val;
        Tensor grad;
        std::function<void(Tape&)> back;  // empty for leaves / no-grad nodes
        bool needs_grad = false;
        Param* bound = nullptr;
    };

public:
    /// When set, every op output is scanned and a non-finite value is a
    /// hard error. Tests switch this on.
    bool check_finite = false;

    Var leaf(Tensor t, bool needs_grad = false) {
        return push(std::move(t), needs_grad, nullptr, {});
    }
    Var constant(Tensor t) { return leaf(std::move(t), false); }

    /// Copies the parameter value in; after backward() the node gradient is
    /// added to p.grad. One binding per step.
    Var param(Param& p) { return push(Tensor(p.value), true, &p, {}); }

    const Tensor& val(Var x) const { return nodes_[x.i].val; }
    Tensor& grad(Var x) { return nodes_[x.i].grad; }
    bool needs_grad(Var x) const { return nodes_[x.i].needs_grad; }
    std::size_t node_count() const { return nodes_.size(); }

    /// Reverse sweep from a scalar root. Parameter gradients are
    /// accumulated into their bound Param::grad.
    void backward(Var root) {
        if (val(root).size() != 1) throw Error("backward: root must be scalar");
        for (auto& n : nodes_)
            if (n.needs_grad && n.grad.v.empty()) n.grad = Tensor(n.val.shape);
        nodes_[root.i].grad.v[0] = 1.0;
        for (int i = root.i; i >= 0; --i) {
            Node& n = nodes_[i];
            if (n.needs_grad && n.back) n.back(*this);
        }
        for (auto& n : nodes_)
            if (n.bound)
                for (std::int64_t k = 0; k < n.grad.size(); ++k)
                    n.bound->grad.v[k] += n.grad.v[k];
    }

    // ----- elementwise and broadcasting ops -----

    /// a + b. b may broadcast over rows of a: rank-1 of length a.cols, or (1 x cols).
    Var add(Var a, Var b) {
        const Tensor& ta = val(a);
        const Tensor& tb = val(b);
        if (ta.same_shape(tb)) {
            Tensor out = ta;
            for (std::int64_t k = 0; k < out.size(); ++k) out.v[k] += tb.v[k];
            return unary_pair(out, a, b, [](Tape& t, const Tensor& g, Tensor& ga, Tensor& gb) {
                for (std::int64_t k = 0; k < g.size(); ++k) {
                    ga.v[k] += g.v[k];
                    gb.v[k] += g.v[k];
                }
                (void)t;
            });
        }
        const bool row_bcast = ta.rank() == 2 &&
                               ((tb.rank() == 1 && tb.dim(0) == ta.dim(1)) ||
                                (tb.rank() == 2 && tb.dim(0) == 1 && tb.dim(1) == ta.dim(1)));
        if (!row_bcast)
            throw Error("add: shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
        const int rows = ta.dim(0), cols = ta.dim(1);
        Tensor out = ta;
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j) out.v[static_cast<std::size_t>(i) * cols + j] += tb.v[j];
        return unary_pair(out, a, b,
                          [rows, cols](Tape& t, const Tensor& g, Tensor& ga, Tensor& gb) {
                              (void)t;
                              for (int i = 0; i < rows; ++i)
                                  for (int j = 0; j < cols; ++j) {
                                      const double gv = g.v[static_cast<std::size_t>(i) * cols + j];
                                      ga.v[static_cast<std::size_t>(i) * cols + j] += gv;
                                      gb.v[j] += gv;
                                  }
                          });
    }

    Var mul(Var a, Var b) {
        const Tensor& ta = val(a);
        const Tensor& tb = val(b);
        require_same_shape("mul", ta, tb);
        Tensor out = ta;
        for (std::int64_t k = 0; k < out.size(); ++k) out.v[k] *= tb.v[k];
        int ia = a.i, ib = b.i;
        return record(out, {a, b}, [ia, ib](Tape& t, const Tensor& g, int self) {
            (void)self;
            const Tensor& va = t.nodes_[ia].val;
            const Tensor& vb = t.nodes_[ib].val;
            if (t.nodes_[ia].needs_grad)
                for (std::int64_t k = 0; k < g.size(); ++k) t.nodes_[ia].grad.v[k] += g.v[k] * vb.v[k];
            if (t.nodes_[ib].needs_grad)
                for (std::int64_t k = 0; k < g.size(); ++k) t.nodes_[ib].grad.v[k] += g.v[k] * va.v[k];
        });
    }

    Var scale(Var a, double s) {
        Tensor out = val(a);
        for (double& x : out.v) x *= s;
        int ia = a.i;
        return record(out, {a}, [ia, s](Tape& t, const Tensor& g, int) {
            for (std::int64_t k = 0; k < g.size(); ++k) t.nodes_[ia].grad.v[k] += g.v[k] * s;
        });
    }

    Var tanh_(Var a) {
        Tensor out = val(a);
        for (double& x : out.v) x = std::tanh(x);
        int ia = a.i;
        return record(out, {a}, [ia](Tape& t, const Tensor& g, int self) {
            const Tensor& y = t.nodes_[self].val;
            for (std::int64_t k = 0; k < g.size(); ++k)
                t.nodes_[ia].grad.v[k] += g.v[k] * (1.0 - y.v[k] * y.v[k]);
        });
    }

    Var sigmoid(Var a) {
        Tensor out = val(a);
        for (double& x : out.v) x = 1.0 / (1.0 + std::exp(-x));
        int ia = a.i;
        return record(out, {a}, [ia](Tape& t, const Tensor& g, int self) {
            const Tensor& y = t.nodes_[self].val;
            for (std::int64_t k = 0; k < g.size(); ++k)
                t.nodes_[ia].grad.v[k] += g.v[k] * y.v[k] * (1.0 - y.v[k]);
        });
    }

    Var relu(Var a) {
        Tensor out = val(a);
        for (double& x : out.v) x = x > 0.0 ? x : 0.0;
        int ia = a.i;
        return record(out, {a}, [ia](Tape& t, const Tensor& g, int self) {
            const Tensor& x = t.nodes_[ia].val;
            (void)self;
            for (std::int64_t k = 0; k < g.size(); ++k)
                if (x.v[k] > 0.0) t.nodes_[ia].grad.v[k] += g.v[k];
        });
    }

    // ----- linear algebra -----

    Var matmul(Var a, Var b) {
        Tensor out = matmul_values(val(a), val(b));
        int ia = a.i, ib = b.i;
        return record(out, {a, b}, [ia, ib](Tape& t, const Tensor& g, int) {
            const Tensor& va = t.nodes_[ia].val;
            const Tensor& vb = t.nodes_[ib].val;
            const int m = va.dim(0), k = va.dim(1), n = vb.dim(1);
            if (t.nodes_[ia].needs_grad)
                gemm_nt(m, k, n, g.data(), vb.data(), t.nodes_[ia].grad.data(), true);
            if (t.nodes_[ib].needs_grad)
                gemm_tn(k, n, m, va.data(), g.data(), t.nodes_[ib].grad.data(), true);
        });
    }

    // ----- shape ops -----

    Var reshape(Var a, std::vector<int> shape) {
        const Tensor& ta = val(a);
        if (Tensor::count(shape) != ta.size())
            throw Error("reshape: element count mismatch " + ta.shape_str() + " -> " +
                        Tensor::shape_str(shape));
        Tensor out = Tensor::from(std::move(shape), ta.v);
        int ia = a.i;
        return record(out, {a}, [ia](Tape& t, const Tensor& g, int) {
            for (std::int64_t k = 0; k < g.size(); ++k) t.nodes_[ia].grad.v[k] += g.v[k];
        });
    }

    Var transpose2d(Var a) {
        const Tensor& ta = val(a);
        if (ta.rank() != 2) throw Error("transpose2d: rank-2 required, got " + ta.shape_str());
        const int m = ta.dim(0), n = ta.dim(1);
        Tensor out({n, m});
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) out.at(j, i) = ta.at(i, j);
        int ia = a.i;
        return record(out, {a}, [ia, m, n](Tape& t, const Tensor& g, int) {
            Tensor& ga = t.nodes_[ia].grad;
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    ga.v[static_cast<std::size_t>(i) * n + j] += g.at(j, i);
        });
    }

    Var concat(const std::vector<Var>& xs, int axis) {
        if (xs.empty()) throw Error("concat: empty input list");
        const Tensor& t0 = val(xs[0]);
        const int r = t0.rank();
        if (axis < 0 || axis >= r) throw Error("concat: bad axis");
        std::vector<int> shape = t0.shape;
        int total = 0;
        for (Var x : xs) {
            const Tensor& tx = val(x);
            if (tx.rank() != r) throw Error("concat: rank mismatch");
            for (int d = 0; d < r; ++d)
                if (d != axis && tx.dim(d) != t0.dim(d))
                    throw Error("concat: shape mismatch " + tx.shape_str() + " vs " + t0.shape_str());
            total += tx.dim(axis);
        }
        shape[axis] = total;
        Tensor out(shape);
        // outer = product of dims before axis, inner = product after
        std::int64_t outer = 1, inner = 1;
        for (int d = 0; d < axis; ++d) outer *= shape[d];
        for (int d = axis + 1; d < r; ++d) inner *= shape[d];
        std::int64_t off = 0;
        std::vector<std::int64_t> offsets;
        for (Var x : xs) {
            offsets.push_back(off);
            const Tensor& tx = val(x);
            const std::int64_t ax = tx.dim(axis);
            for (std::int64_t o = 0; o < outer; ++o)
                std::copy(tx.v.begin() + o * ax * inner, tx.v.begin() + (o + 1) * ax * inner,
                          out.v.begin() + (o * total + off) * inner);
            off += ax;
        }
        std::vector<int> idx(xs.size());
        for (std::size_t k = 0; k < xs.size(); ++k) idx[k] = xs[k].i;
        const std::int64_t tot = total;
        return record(out, xs, [idx, offsets, outer, inner, tot](Tape& t, const Tensor& g, int) {
            for (std::size_t k = 0; k < idx.size(); ++k) {
                if (!t.nodes_[idx[k]].needs_grad) continue;
                Tensor& gi = t.nodes_[idx[k]].grad;
                const std::int64_t ax = gi.size() / (outer * inner);
                for (std::int64_t o = 0; o < outer; ++o)
                    for (std::int64_t e = 0; e < ax * inner; ++e)
                        gi.v[o * ax * inner + e] += g.v[(o * tot + offsets[k]) * inner + e];
            }
        });
    }

    Var slice(Var a, int axis, int start, int len) {
        const Tensor& ta = val(a);
        const int r = ta.rank();
        if (axis < 0 || axis >= r || start < 0 || len <= 0 || start + len > ta.dim(axis))
            throw Error("slice: range [" + std::to_string(start) + "," +
                        std::to_string(start + len) + ") out of bounds for axis " +
                        std::to_string(axis) + " of " + ta.shape_str());
        std::vector<int> shape = ta.shape;
        shape[axis] = len;
        std::int64_t outer = 1, inner = 1;
        for (int d = 0; d < axis; ++d) outer *= ta.dim(d);
        for (int d = axis + 1; d < r; ++d) inner *= ta.dim(d);
        const std::int64_t ax = ta.dim(axis);
        Tensor out(shape);
        for (std::int64_t o = 0; o < outer; ++o)
            std::copy(ta.v.begin() + (o * ax + start) * inner,
                      ta.v.begin() + (o * ax + start + len) * inner,
                      out.v.begin() + o * len * inner);
        int ia = a.i;
        return record(out, {a}, [ia, outer, inner, ax, start, len](Tape& t, const Tensor& g, int) {
            Tensor& ga = t.nodes_[ia].grad;
            for (std::int64_t o = 0; o < outer; ++o)
                for (std::int64_t e = 0; e < static_cast<std::int64_t>(len) * inner; ++e)
                    ga.v[(o * ax + start) * inner + e] += g.v[o * len * inner + e];
        });
    }

    /// Row lookup into an embedding table (V x E) -> (1 x E).
    Var embedding_lookup(Var table, int id) {
        const Tensor& tt = val(table);
        if (tt.rank() != 2 || id < 0 || id >= tt.dim(0))
            throw Error("embedding_lookup: id " + std::to_string(id) + " out of range for " +
                        tt.shape_str());
        return slice(table, 0, id, 1);
    }

    // ----- reductions / scalars -----

    Var sum_all(Var a) {
        const Tensor& ta = val(a);
        double s = 0.0;
        for (double x : ta.v) s += x;
        int ia = a.i;
        return record(Tensor::scalar(s), {a}, [ia](Tape& t, const Tensor& g, int) {
            const double gv = g.v[0];
            Tensor& ga = t.nodes_[ia].grad;
            for (double& x : ga.v) x += gv;
        });
    }

    /// Single element as a scalar node (flat row-major index).
    Var pick(Var a, std::int64_t flat_index) {
        const Tensor& ta = val(a);
        if (flat_index < 0 || flat_index >= ta.size())
            throw Error("pick: index " + std::to_string(flat_index) + " out of range for " +
                        ta.shape_str());
        int ia = a.i;
        return record(Tensor::scalar(ta.v[flat_index]), {a},
                      [ia, flat_index](Tape& t, const Tensor& g, int) {
                          t.nodes_[ia].grad.v[flat_index] += g.v[0];
                      });
    }

    // ----- softmax family (last dim of rank-1 or rank-2) -----

    Var softmax(Var a) {
        Tensor out = val(a);
        apply_rows(out, [](double* row, int n) { softmax_row(row, n); });
        int ia = a.i;
        return record(out, {a}, [ia](Tape& t, const Tensor& g, int self) {
            const Tensor& y = t.nodes_[self].val;
            Tensor& ga = t.nodes_[ia].grad;
            const int n = y.rank() == 2 ? y.dim(1) : y.dim(0);
            const std::int64_t rows = y.size() / n;
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* yr = y.data() + r * n;
                const double* gr = g.data() + r * n;
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += gr[j] * yr[j];
                for (int j = 0; j < n; ++j) ga.v[r * n + j] += yr[j] * (gr[j] - dot);
            }
        });
    }

    Var log_softmax(Var a) {
        Tensor out = val(a);
        apply_rows(out, [](double* row, int n) {
            double mx = row[0];
            for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
            double z = 0.0;
            for (int j = 0; j < n; ++j) z += std::exp(row[j] - mx);
            const double lz = mx + std::log(z);
            for (int j = 0; j < n; ++j) row[j] -= lz;
        });
        int ia = a.i;
        return record(out, {a}, [ia](Tape& t, const Tensor& g, int self) {
            const Tensor& y = t.nodes_[self].val;
            Tensor& ga = t.nodes_[ia].grad;
            const int n = y.rank() == 2 ? y.dim(1) : y.dim(0);
            const std::int64_t rows = y.size() / n;
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* yr = y.data() + r * n;
                const double* gr = g.data() + r * n;
                double gsum = 0.0;
                for (int j = 0; j < n; ++j) gsum += gr[j];
                for (int j = 0; j < n; ++j) ga.v[r * n + j] += gr[j] - std::exp(yr[j]) * gsum;
            }
        });
    }

    /// Softmax over entries with mask=true; masked entries are exactly zero
    /// in the output and receive zero gradient. Rank-1 only.
    Var masked_softmax(Var a, const std::vector<bool>& mask) {
        const Tensor& ta = val(a);
        if (ta.rank() != 1 || static_cast<int>(mask.size()) != ta.dim(0))
            throw Error("masked_softmax: mask length " + std::to_string(mask.size()) +
                        " vs input " + ta.shape_str());
        int valid = 0;
        for (bool m : mask) valid += m ? 1 : 0;
        if (valid == 0) throw Error("masked_softmax: all frames masked");
        const int n = ta.dim(0);
        Tensor out({n});
        double mx = -1e300;
        for (int j = 0; j < n; ++j)
            if (mask[j]) mx = std::max(mx, ta.v[j]);
        double z = 0.0;
        for (int j = 0; j < n; ++j)
            if (mask[j]) z += std::exp(ta.v[j] - mx);
        for (int j = 0; j < n; ++j) out.v[j] = mask[j] ? std::exp(ta.v[j] - mx) / z : 0.0;
        int ia = a.i;
        return record(out, {a}, [ia, mask, n](Tape& t, const Tensor& g, int self) {
            const Tensor& y = t.nodes_[self].val;
            Tensor& ga = t.nodes_[ia].grad;
            double dot = 0.0;
            for (int j = 0; j < n; ++j)
                if (mask[j]) dot += g.v[j] * y.v[j];
            for (int j = 0; j < n; ++j)
                if (mask[j]) ga.v[j] += y.v[j] * (g.v[j] - dot);
        });
    }

    // ----- convolution / pooling (input layout: planes x height x width) -----

    Var conv2d(Var x, Var w, Var b, int stride, int pad) {
        return conv2d(x, w, b, stride, pad, pad);
    }

    Var conv2d(Var x, Var w, Var b, int stride, int pad_h, int pad_w) {
        const Tensor& tx = val(x);
        const Tensor& tw = val(w);
        const Tensor& tb = val(b);
        if (tx.rank() != 3 || tw.rank() != 4)
            throw Error("conv2d: need input (C,H,W) and kernel (O,C,kh,kw), got " +
                        tx.shape_str() + " and " + tw.shape_str());
        const int ci = tx.dim(0), h = tx.dim(1), wd = tx.dim(2);
        const int co = tw.dim(0), kh = tw.dim(2), kw = tw.dim(3);
        if (tw.dim(1) != ci)
            throw Error("conv2d: input planes " + std::to_string(ci) + " vs kernel planes " +
                        std::to_string(tw.dim(1)));
        if (tb.size() != co) throw Error("conv2d: bias size mismatch");
        const int oh = (h + 2 * pad_h - kh) / stride + 1;
        const int ow = (wd + 2 * pad_w - kw) / stride + 1;
        if (oh <= 0 || ow <= 0) throw Error("conv2d: kernel larger than padded input");

        Tensor col = im2col(tx, kh, kw, stride, pad_h, pad_w, oh, ow);
        Tensor out({co, oh, ow});
        gemm_nn(co, oh * ow, ci * kh * kw, tw.data(), col.data(), out.data(), false);
        for (int o = 0; o < co; ++o) {
            const double bo = tb.v[o];
            double* p = out.data() + static_cast<std::size_t>(o) * oh * ow;
            for (int e = 0; e < oh * ow; ++e) p[e] += bo;
        }
        int ix = x.i, iw = w.i, ib = b.i;
        return record(out, {x, w, b},
                      [ix, iw, ib, stride, pad_h, pad_w, oh, ow](Tape& t, const Tensor& g, int) {
                          const Tensor& vx = t.nodes_[ix].val;
                          const Tensor& vw = t.nodes_[iw].val;
                          const int ci = vx.dim(0), co = vw.dim(0), kh = vw.dim(2), kw = vw.dim(3);
                          const int kdim = ci * kh * kw, osz = oh * ow;
                          // col is recomputed instead of stored across the step
                          Tensor col = im2col(vx, kh, kw, stride, pad_h, pad_w, oh, ow);
                          if (t.nodes_[iw].needs_grad)
                              gemm_nt(co, kdim, osz, g.data(), col.data(),
                                      t.nodes_[iw].grad.data(), true);
                          if (t.nodes_[ib].needs_grad)
                              for (int o = 0; o < co; ++o) {
                                  double s = 0.0;
                                  const double* p = g.data() + static_cast<std::size_t>(o) * osz;
                                  for (int e = 0; e < osz; ++e) s += p[e];
                                  t.nodes_[ib].grad.v[o] += s;
                              }
                          if (t.nodes_[ix].needs_grad) {
                              Tensor dcol({kdim, osz});
                              gemm_tn(kdim, osz, co, vw.data(), g.data(), dcol.data(), false);
                              col2im_acc(dcol, vx.dim(1), vx.dim(2), ci, kh, kw, stride, pad_h,
                                         pad_w, oh, ow, t.nodes_[ix].grad);
                          }
                      });
    }

    /// 2x2 max pooling, ceil mode: boundary windows are clipped, so output
    /// extents are ceil(H/2) x ceil(W/2).
    Var maxpool2d(Var x) {
        const Tensor& tx = val(x);
        if (tx.rank() != 3) throw Error("maxpool2d: need (C,H,W), got " + tx.shape_str());
        const int c = tx.dim(0), h = tx.dim(1), w = tx.dim(2);
        const int oh = (h + 1) / 2, ow = (w + 1) / 2;
        Tensor out({c, oh, ow});
        std::vector<std::int64_t> argmax(static_cast<std::size_t>(c) * oh * ow);
        for (int p = 0; p < c; ++p)
            for (int i = 0; i < oh; ++i)
                for (int j = 0; j < ow; ++j) {
                    double best = -1e300;
                    std::int64_t besti = -1;
                    for (int di = 0; di < 2; ++di)
                        for (int dj = 0; dj < 2; ++dj) {
                            const int y = 2 * i + di, z = 2 * j + dj;
                            if (y >= h || z >= w) continue;
                            const std::int64_t idx =
                                (static_cast<std::int64_t>(p) * h + y) * w + z;
                            if (tx.v[idx] > best) {
                                best = tx.v[idx];
                                besti = idx;
                            }
                        }
                    const std::int64_t o = (static_cast<std::int64_t>(p) * oh + i) * ow + j;
                    out.v[o] = best;
                    argmax[o] = besti;
                }
        int ix = x.i;
        return record(out, {x}, [ix, argmax](Tape& t, const Tensor& g, int) {
            Tensor& gx = t.nodes_[ix].grad;
            for (std::int64_t o = 0; o < g.size(); ++o) gx.v[argmax[o]] += g.v[o];
        });
    }

    // ----- regularization -----

    /// Inverted dropout: train mode scales kept entries by 1/(1-p) so the
    /// expectation equals the input. p==0 or eval mode is the identity.
    Var dropout(Var x, double p, bool train, Rng& rng) {
        if (p < 0.0 || p >= 1.0) throw Error("dropout: p must be in [0,1)");
        if (!train || p == 0.0) return x;
        const Tensor& tx = val(x);
        Tensor out = tx;
        std::vector<double> mask(tx.v.size());
        const double inv = 1.0 / (1.0 - p);
        for (std::size_t k = 0; k < mask.size(); ++k) {
            mask[k] = rng.bernoulli(p) ? 0.0 : inv;
            out.v[k] *= mask[k];
        }
        int ix = x.i;
        return record(out, {x}, [ix, mask](Tape& t, const Tensor& g, int) {
            Tensor& gx = t.nodes_[ix].grad;
            for (std::int64_t k = 0; k < g.size(); ++k) gx.v[k] += g.v[k] * mask[k];
        });
    }

    // ----- fused LSTM cell -----

    /// One LSTM cell update. zi: (1 x 4H) pre-activation gates laid out
    /// [input | forget | cell | output]; c_prev: (1 x H). Returns (1 x 2H)
    /// as [h | c]; slice to separate.
    Var lstm_cell(Var zi, Var c_prev) {
        const Tensor& z = val(zi);
        const Tensor& cp = val(c_prev);
        if (z.rank() != 2 || cp.rank() != 2 || z.dim(0) != 1 || cp.dim(0) != 1 ||
            z.dim(1) != 4 * cp.dim(1))
            throw Error("lstm_cell: gates " + z.shape_str() + " vs cell " + cp.shape_str());
        const int hsz = cp.dim(1);
        Tensor out({1, 2 * hsz});
        std::vector<double> gates(static_cast<std::size_t>(4) * hsz);  // i,f,g,o post-activation
        for (int k = 0; k < hsz; ++k) {
            const double ig = sigm(z.v[k]);
            const double fg = sigm(z.v[hsz + k]);
            const double gg = std::tanh(z.v[2 * hsz + k]);
            const double og = sigm(z.v[3 * hsz + k]);
            const double c = fg * cp.v[k] + ig * gg;
            out.v[k] = og * std::tanh(c);
            out.v[hsz + k] = c;
            gates[k] = ig;
            gates[hsz + k] = fg;
            gates[2 * hsz + k] = gg;
            gates[3 * hsz + k] = og;
        }
        int iz = zi.i, ic = c_prev.i;
        return record(out, {zi, c_prev}, [iz, ic, hsz, gates](Tape& t, const Tensor& g, int self) {
            const Tensor& y = t.nodes_[self].val;
            const Tensor& cp = t.nodes_[ic].val;
            Tensor* gz = t.nodes_[iz].needs_grad ? &t.nodes_[iz].grad : nullptr;
            Tensor* gc = t.nodes_[ic].needs_grad ? &t.nodes_[ic].grad : nullptr;
            for (int k = 0; k < hsz; ++k) {
                const double ig = gates[k], fg = gates[hsz + k], gg = gates[2 * hsz + k],
                             og = gates[3 * hsz + k];
                const double c = y.v[hsz + k];
                const double tc = std::tanh(c);
                const double dh = g.v[k];
                const double dc = g.v[hsz + k] + dh * og * (1.0 - tc * tc);
                if (gz) {
                    gz->v[k] += dc * gg * ig * (1.0 - ig);
                    gz->v[hsz + k] += dc * cp.v[k] * fg * (1.0 - fg);
                    gz->v[2 * hsz + k] += dc * ig * (1.0 - gg * gg);
                    gz->v[3 * hsz + k] += dh * tc * og * (1.0 - og);
                }
                if (gc) gc->v[k] += dc * fg;
            }
        });
    }

    // ----- generic op recording (used by modules adding fused ops) -----

    /// Record a node with an explicit backward: back(tape, output_grad, self_index).
    Var record(Tensor out, const std::vector<Var>& inputs,
               std::function<void(Tape&, const Tensor&, int)> back) {
        bool ng = false;
        for (Var v : inputs) ng = ng || nodes_[v.i].needs_grad;
        const int self = static_cast<int>(nodes_.size());
        std::function<void(Tape&)> wrapped;
        if (ng && back)
            wrapped = [self, back](Tape& t) { back(t, t.nodes_[self].grad, self); };
        return push(std::move(out), ng, nullptr, std::move(wrapped));
    }

private:
    std::vector<Node> nodes_;

    static double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }

    static void softmax_row(double* row, int n) {
        double mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < n; ++j) {
            row[j] = std::exp(row[j] - mx);
            z += row[j];
        }
        for (int j = 0; j < n; ++j) row[j] /= z;
    }

    template <typename F>
    static void apply_rows(Tensor& t, F f) {
        if (t.rank() == 1) {
            f(t.data(), t.dim(0));
            return;
        }
        if (t.rank() != 2) throw Error("softmax: rank-1 or rank-2 required, got " + t.shape_str());
        for (int i = 0; i < t.dim(0); ++i) f(t.data() + static_cast<std::size_t>(i) * t.dim(1), t.dim(1));
    }

    static Tensor im2col(const Tensor& x, int kh, int kw, int stride, int pad_h, int pad_w,
                         int oh, int ow) {
        const int ci = x.dim(0), h = x.dim(1), w = x.dim(2);
        Tensor col({ci * kh * kw, oh * ow});
        std::size_t r = 0;
        for (int c = 0; c < ci; ++c)
            for (int di = 0; di < kh; ++di)
                for (int dj = 0; dj < kw; ++dj, ++r) {
                    double* dst = col.data() + r * oh * ow;
                    for (int i = 0; i < oh; ++i) {
                        const int y = i * stride + di - pad_h;
                        if (y < 0 || y >= h) {
                            dst += ow;
                            continue;
                        }
                        const double* src = x.data() + (static_cast<std::size_t>(c) * h + y) * w;
                        for (int j = 0; j < ow; ++j) {
                            const int z = j * stride + dj - pad_w;
                            *dst++ = (z < 0 || z >= w) ? 0.0 : src[z];
                        }
                    }
                }
        return col;
    }

    static void col2im_acc(const Tensor& dcol, int h, int w, int ci, int kh, int kw, int stride,
                           int pad_h, int pad_w, int oh, int ow, Tensor& gx) {
        std::size_t r = 0;
        for (int c = 0; c < ci; ++c)
            for (int di = 0; di < kh; ++di)
                for (int dj = 0; dj < kw; ++dj, ++r) {
                    const double* src = dcol.data() + r * oh * ow;
                    for (int i = 0; i < oh; ++i) {
                        const int y = i * stride + di - pad_h;
                        if (y < 0 || y >= h) {
                            src += ow;
                            continue;
                        }
                        double* dst = gx.data() + (static_cast<std::size_t>(c) * h + y) * w;
                        for (int j = 0; j < ow; ++j) {
                            const int z = j * stride + dj - pad_w;
                            const double v = *src++;
                            if (z >= 0 && z < w) dst[z] += v;
                        }
                    }
                }
    }

    Var unary_pair(Tensor out, Var a, Var b,
                   std::function<void(Tape&, const Tensor&, Tensor&, Tensor&)> back) {
        int ia = a.i, ib = b.i;
        return record(std::move(out), {a, b}, [ia, ib, back](Tape& t, const Tensor& g, int) {
            Tensor ga_local, gb_local;
            Tensor& ga = t.nodes_[ia].needs_grad ? t.nodes_[ia].grad
                                                 : (ga_local = Tensor(t.nodes_[ia].val.shape));
            Tensor& gb = t.nodes_[ib].needs_grad ? t.nodes_[ib].grad
                                                 : (gb_local = Tensor(t.nodes_[ib].val.shape));
            back(t, g, ga, gb);
        });
    }

    Var push(Tensor t, bool needs_grad, Param* bound, std::function<void(Tape&)> back) {
        if (check_finite && !t.all_finite())
            throw Error("non-finite value produced at node " + std::to_string(nodes_.size()));
        Node n;
        n.val = std::move(t);
        n.needs_grad = needs_grad;
        n.bound = bound;
        n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }
};

/// Finite-difference gradient checker. Builds the graph twice per probed
/// element with central differences and compares against reverse-mode
/// gradients. Relative error: |a-n| / max(1e-8, |a|+|n|).
inline double grad_check(
    const std::function<Var(Tape&, const std::vector<Var>&)>& f,
    std::vector<Tensor> inputs, double eps = 1e-5) {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(inputs.size());
    for (const Tensor& t : inputs) vars.push_back(tape.leaf(t, true));
    Var root = f(tape, vars);
    if (tape.val(root).size() != 1) throw Error("grad_check: f must be scalar-valued");
    tape.backward(root);

    auto eval = [&](const std::vector<Tensor>& xs) {
        Tape t2;
        std::vector<Var> vs;
        vs.reserve(xs.size());
        for (const Tensor& t : xs) vs.push_back(t2.leaf(t, false));
        return t2.val(f(t2, vs)).v[0];
    };

    double max_rel = 0.0;
    for (std::size_t which = 0; which < inputs.size(); ++which) {
        for (std::int64_t k = 0; k < inputs[which].size(); ++k) {
            const double orig = inputs[which].v[k];
            inputs[which].v[k] = orig + eps;
            const double fp = eval(inputs);
            inputs[which].v[k] = orig - eps;
            const double fm = eval(inputs);
            inputs[which].v[k] = orig;
            const double num = (fp - fm) / (2.0 * eps);
            const double ana = tape.grad(vars[which]).v[k];
            const double rel = std::abs(ana - num) / std::max(1e-8, std::abs(ana) + std::abs(num));
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

/// Uniform +-1/sqrt(fan_in) initialization.
inline Tensor init_uniform(std::vector<int> shape, int fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& x : t.v) x = rng.uniform(-bound, bound);
    return t;
}

}  // namespace e2e::ad
