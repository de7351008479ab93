#pragma once

#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include "e2e/autodiff.hpp"
#include "e2e/tensor.hpp"

namespace e2e::ctc {

using ad::Tensor;

constexpr int kBlank = 0;
constexpr double kLogZero = -std::numeric_limits<double>::infinity();

inline double logadd(double a, double b) {
    if (a == kLogZero) return b;
    if (b == kLogZero) return a;
    const double m = std::max(a, b);
    return m + std::log(std::exp(a - m) + std::exp(b - m));
}
inline double logadd(double a, double b, double c) { return logadd(logadd(a, b), c); }

namespace detail {

inline void check_labels(const Tensor& logprobs, const std::vector<int>& labels,
                         bool allow_empty = false) {
    if (logprobs.rank() != 2) throw Error("ctc: logprobs must be (T, symbols)");
    if (!allow_empty && labels.empty()) throw Error("ctc: empty label sequence");
    for (int c : labels)
        if (c <= kBlank || c >= logprobs.dim(1))
            throw Error("ctc: label id " + std::to_string(c) + " outside charset of " +
                        std::to_string(logprobs.dim(1) - 1));
}

/// Blank-interleaved extended labels: [-, c1, -, c2, ..., -].
inline std::vector<int> extend_labels(const std::vector<int>& labels) {
    std::vector<int> ext(2 * labels.size() + 1, kBlank);
    for (std::size_t i = 0; i < labels.size(); ++i) ext[2 * i + 1] = labels[i];
    return ext;
}

/// log-alpha over extended states; row t holds frames 0..t inclusive.
inline Tensor forward_alpha(const Tensor& lp, const std::vector<int>& ext) {
    const int t_max = lp.dim(0), s_max = static_cast<int>(ext.size());
    Tensor alpha({t_max, s_max}, kLogZero);
    alpha.at(0, 0) = lp.at(0, kBlank);
    if (s_max > 1) alpha.at(0, 1) = lp.at(0, ext[1]);
    for (int t = 1; t < t_max; ++t)
        for (int s = 0; s < s_max; ++s) {
            double acc = alpha.at(t - 1, s);
            if (s >= 1) acc = logadd(acc, alpha.at(t - 1, s - 1));
            if (s >= 2 && ext[s] != kBlank && ext[s] != ext[s - 2])
                acc = logadd(acc, alpha.at(t - 1, s - 2));
            alpha.at(t, s) = acc == kLogZero ? kLogZero : acc + lp.at(t, ext[s]);
        }
    return alpha;
}

inline Tensor backward_beta(const Tensor& lp, const std::vector<int>& ext) {
    const int t_max = lp.dim(0), s_max = static_cast<int>(ext.size());
    Tensor beta({t_max, s_max}, kLogZero);
    beta.at(t_max - 1, s_max - 1) = lp.at(t_max - 1, ext[s_max - 1]);
    if (s_max > 1) beta.at(t_max - 1, s_max - 2) = lp.at(t_max - 1, ext[s_max - 2]);
    for (int t = t_max - 2; t >= 0; --t)
        for (int s = 0; s < s_max; ++s) {
            double acc = beta.at(t + 1, s);
            if (s + 1 < s_max) acc = logadd(acc, beta.at(t + 1, s + 1));
            if (s + 2 < s_max && ext[s] != kBlank && ext[s] != ext[s + 2])
                acc = logadd(acc, beta.at(t + 1, s + 2));
            beta.at(t, s) = acc == kLogZero ? kLogZero : acc + lp.at(t, ext[s]);
        }
    return beta;
}

}  // namespace detail

struct CtcResult {
    double loss = 0.0;       // -log p_ctc(C|X); +inf when impossible
    bool impossible = false;
};

/// -log p(C|X) by the extended-label forward recursion in log space.
/// Targets that cannot be aligned return +inf with the impossible flag set.
inline CtcResult ctc_loss(const Tensor& logprobs, const std::vector<int>& labels) {
    detail::check_labels(logprobs, labels);
    const auto ext = detail::extend_labels(labels);
    if (static_cast<int>(ext.size()) > 2 * logprobs.dim(0) + 1)
        return {std::numeric_limits<double>::infinity(), true};
    const Tensor alpha = detail::forward_alpha(logprobs, ext);
    const int t_last = logprobs.dim(0) - 1, s_max = static_cast<int>(ext.size());
    double logp = alpha.at(t_last, s_max - 1);
    if (s_max > 1) logp = logadd(logp, alpha.at(t_last, s_max - 2));
    if (logp == kLogZero) return {std::numeric_limits<double>::infinity(), true};
    return {-logp, false};
}

struct CtcGradResult {
    Tensor grad;  // d(-log p)/d logits, i.e. y - gamma (softmax-composed)
    Tensor gamma; // per-frame symbol posteriors; rows sum to 1
    double loss = 0.0;
    bool impossible = false;
};

/// Forward-backward posteriors. `grad` is the gradient through the
/// log-softmax that produced `logprobs` (so each row sums to zero);
/// the tape op below uses `gamma` directly as d(-log p)/d logprobs = -gamma.
inline CtcGradResult ctc_grad(const Tensor& logprobs, const std::vector<int>& labels) {
    detail::check_labels(logprobs, labels);
    CtcGradResult r;
    r.grad = Tensor(logprobs.shape);
    r.gamma = Tensor(logprobs.shape);
    const auto ext = detail::extend_labels(labels);
    const int t_max = logprobs.dim(0), s_max = static_cast<int>(ext.size());
    if (s_max > 2 * t_max + 1) {
        r.loss = std::numeric_limits<double>::infinity();
        r.impossible = true;
        return r;
    }
    const Tensor alpha = detail::forward_alpha(logprobs, ext);
    const Tensor beta = detail::backward_beta(logprobs, ext);
    double logp = alpha.at(t_max - 1, s_max - 1);
    if (s_max > 1) logp = logadd(logp, alpha.at(t_max - 1, s_max - 2));
    if (logp == kLogZero) {
        r.loss = std::numeric_limits<double>::infinity();
        r.impossible = true;
        return r;
    }
    r.loss = -logp;
    for (int t = 0; t < t_max; ++t) {
        std::vector<double> lg(logprobs.dim(1), kLogZero);
        for (int s = 0; s < s_max; ++s) {
            const double a = alpha.at(t, s), b = beta.at(t, s);
            if (a == kLogZero || b == kLogZero) continue;
            // alpha and beta both include lp(t, ext[s]); divide one copy out
            lg[ext[s]] = logadd(lg[ext[s]], a + b - logprobs.at(t, ext[s]));
        }
        for (int k = 0; k < logprobs.dim(1); ++k) {
            const double g = lg[k] == kLogZero ? 0.0 : std::exp(lg[k] - logp);
            r.gamma.at(t, k) = g;
            r.grad.at(t, k) = std::exp(logprobs.at(t, k)) - g;
        }
    }
    return r;
}

/// Exhaustive enumeration oracle: sums path products over every alignment
/// that collapses to `labels`. Probabilities, not logs.
inline double ctc_brute_force(const Tensor& probs, const std::vector<int>& labels) {
    detail::check_labels(probs, labels, /*allow_empty=*/true);
    const int t_max = probs.dim(0), ks = probs.dim(1);
    if (t_max > 8 || ks > 5)
        throw Error("ctc_brute_force: enumeration bound exceeded (T<=8, symbols<=5)");
    double total = 0.0;
    std::vector<int> path(t_max, 0);
    while (true) {
        // collapse: merge runs, then drop blanks
        std::vector<int> collapsed;
        for (int t = 0; t < t_max; ++t) {
            if (t > 0 && path[t] == path[t - 1]) continue;
            if (path[t] != kBlank) collapsed.push_back(path[t]);
        }
        if (collapsed == labels) {
            double p = 1.0;
            for (int t = 0; t < t_max; ++t) p *= probs.at(t, path[t]);
            total += p;
        }
        int pos = t_max - 1;
        while (pos >= 0 && path[pos] == ks - 1) path[pos--] = 0;
        if (pos < 0) break;
        ++path[pos];
    }
    return total;
}

/// Frame-wise argmax, merge repeats, drop blanks.
inline std::vector<int> greedy_collapse(const Tensor& logprobs) {
    if (logprobs.rank() != 2) throw Error("greedy_collapse: logprobs must be (T, symbols)");
    std::vector<int> out;
    int prev = -1;
    for (int t = 0; t < logprobs.dim(0); ++t) {
        int arg = 0;
        for (int k = 1; k < logprobs.dim(1); ++k)
            if (logprobs.at(t, k) > logprobs.at(t, arg)) arg = k;
        if (arg != prev && arg != kBlank) out.push_back(arg);
        prev = arg;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Label-synchronous prefix scoring for joint decoding
// ---------------------------------------------------------------------------

/// Per-hypothesis scorer state: log probabilities over frames 0..t of the
/// prefix with the last emission being its final char (ln) or blank (lb),
/// plus the accumulated prefix log score psi.
struct CtcPrefixState {
    std::vector<double> ln, lb;
    int last = kBlank;
    double log_psi = 0.0;
};

/// Incremental CTC prefix scores over a fixed utterance's logprobs.
class CtcPrefixScorer {
public:
    explicit CtcPrefixScorer(const Tensor& logprobs) : lp_(&logprobs) {
        if (logprobs.rank() != 2) throw Error("ctc prefix: logprobs must be (T, symbols)");
    }

    /// State of the empty prefix: psi = 1, all mass on cumulative blanks.
    CtcPrefixState initial() const {
        const int t_max = lp_->dim(0);
        CtcPrefixState s;
        s.ln.assign(t_max, kLogZero);
        s.lb.assign(t_max, 0.0);
        s.lb[0] = lp_->at(0, kBlank);
        for (int t = 1; t < t_max; ++t) s.lb[t] = s.lb[t - 1] + lp_->at(t, kBlank);
        return s;
    }

    /// Extends the prefix with char c; returns {score increment, new state}
    /// where the increment is log psi(g.c) - log psi(g).
    std::pair<double, CtcPrefixState> extend(const CtcPrefixState& s, int c) const {
        if (c <= kBlank || c >= lp_->dim(1))
            throw Error("ctc prefix: unknown char id " + std::to_string(c));
        const int t_max = lp_->dim(0);
        CtcPrefixState ns;
        ns.ln.assign(t_max, kLogZero);
        ns.lb.assign(t_max, kLogZero);
        ns.last = c;
        double psi = kLogZero;
        for (int t = 0; t < t_max; ++t) {
            // mass that can start emitting c at frame t
            double phi = t == 0 ? 0.0 : s.lb[t - 1];
            if (t > 0 && s.last != c) phi = logadd(phi, s.ln[t - 1]);
            if (t == 0 && s.last != kBlank) phi = kLogZero;  // nonempty prefix needs frames
            const double newly = phi == kLogZero ? kLogZero : phi + lp_->at(t, c);
            psi = logadd(psi, newly);
            const double merge = t == 0 ? kLogZero : ns.ln[t - 1];
            ns.ln[t] = logadd(newly, merge == kLogZero ? kLogZero : merge + lp_->at(t, c));
            const double stay = t == 0 ? kLogZero : logadd(ns.lb[t - 1], ns.ln[t - 1]);
            ns.lb[t] = stay == kLogZero ? kLogZero : stay + lp_->at(t, kBlank);
        }
        ns.log_psi = psi;
        // An unreachable extension (psi = 0) reports a -inf increment even
        // when the prefix was already unreachable, so cumulative component
        // sums stay at -inf instead of producing inf - inf = NaN.
        return {psi == kLogZero ? kLogZero : psi - s.log_psi, ns};
    }

    /// Finishing increment: log p_full(g) - log psi(g), where p_full is the
    /// complete-sequence CTC probability (matches -ctc_loss).
    double eos_increment(const CtcPrefixState& s) const {
        const int t_last = lp_->dim(0) - 1;
        const double full = logadd(s.ln[t_last], s.lb[t_last]);
        return full == kLogZero ? kLogZero : full - s.log_psi;
    }

private:
    const Tensor* lp_;
};

// ---------------------------------------------------------------------------
// Tape op
// ---------------------------------------------------------------------------

/// CTC loss as a graph node over log-softmax outputs. The local gradient
/// wrt logprobs is -gamma (the log-softmax node upstream completes the
/// usual y - gamma form). Throws on impossible targets: training filters
/// those before graph construction.
inline ad::Var ctc_loss_op(ad::Tape& tape, ad::Var logprobs, const std::vector<int>& labels) {
    CtcGradResult r = ctc_grad(tape.val(logprobs), labels);
    if (r.impossible)
        throw Error("ctc_loss_op: target cannot be aligned (needs " +
                    std::to_string(labels.size()) + " emissions in " +
                    std::to_string(tape.val(logprobs).dim(0)) + " frames)");
    const Tensor gamma = r.gamma;
    const int src = logprobs.i;
    return tape.record(Tensor::scalar(r.loss), {logprobs},
                       [src, gamma](ad::Tape& t, const Tensor& g, int) {
                           Tensor& gl = t.grad(ad::Var{src});
                           for (std::int64_t k = 0; k < gamma.size(); ++k)
                               gl.v[k] -= g.v[0] * gamma.v[k];
                       });
}

}  // namespace e2e::ctc
