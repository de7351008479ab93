#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "e2e/attention.hpp"
#include "e2e/ctc.hpp"
#include "e2e/lm.hpp"

namespace e2e::search {

using ad::Tape;
using ad::Tensor;
using ad::Var;

struct BeamConfig {
    double lambda = 0.0;  // CTC weight at decode
    double gamma = 0.3;   // LM weight (used only when an LM is supplied)
    int beam = 20;
    double max_len_ratio = 0.8;  // label budget as a fraction of T'
    int max_len = -1;            // absolute budget; overrides the ratio when >= 0
    int nbest = 0;               // size of the returned list; 0 means `beam`
};

/// Weighted combination (1-λ)att + λ·ctc + γ·lm with zero-weight terms
/// skipped outright, so a -inf component under a zero weight cannot poison
/// the total. Score bookkeeping uses exactly this function everywhere.
inline double combined_score(double att, double ctc, double lm, double lambda, double gamma) {
    double s = 0.0;
    if (lambda < 1.0) s += (1.0 - lambda) * att;
    if (lambda > 0.0) s += lambda * ctc;
    if (gamma != 0.0) s += gamma * lm;
    return s;
}

/// A live search hypothesis. Component scores are tracked separately; a
/// component under a zero weight is left at 0 (not evaluated). `total` is
/// always combined_score(att, ctc, lm) of the current sums.
struct Hypothesis {
    std::vector<int> ids;
    double att = 0.0, ctc = 0.0, lm = 0.0, total = 0.0;
    Tensor dec_h, dec_c, att_w;
    ctc::CtcPrefixState ctc_state;
    lm::MultilevelLm::State lm_state;
};

struct DecodeResult {
    std::vector<int> ids;
    double total = 0.0, att = 0.0, ctc = 0.0, lm = 0.0;
};

namespace detail {

/// total desc, then emitted ids lexicographically asc. Distinct hypotheses
/// always carry distinct id sequences, so this is a total order.
template <class H>
inline bool better(const H& a, const H& b) {
    if (a.total != b.total) return a.total > b.total;
    return std::lexicographical_compare(a.ids.begin(), a.ids.end(), b.ids.begin(), b.ids.end());
}

struct Expander {
    const att::Decoder* dec = nullptr;
    const att::Attention* at = nullptr;
    const Tensor* enc = nullptr;
    const ctc::CtcPrefixScorer* scorer = nullptr;
    const lm::MultilevelLm* mlm = nullptr;
    double lambda = 0.0, gamma = 0.0;
    std::vector<bool> mask;

    bool use_ctc() const { return lambda > 0.0; }
    bool use_lm() const { return mlm != nullptr && gamma != 0.0; }

    Hypothesis root() const {
        Hypothesis h;
        h.dec_h = Tensor({1, dec->dec_h});
        h.dec_c = Tensor({1, dec->dec_h});
        h.att_w = at->initial_weights(enc->dim(0), mask);
        if (use_ctc()) h.ctc_state = scorer->initial();
        if (use_lm()) h.lm_state = mlm->initial();
        return h;
    }

    struct StepOut {
        Tensor logp, h, c, a;
    };

    /// One decoder step for `hyp` on a shared per-step tape/context.
    StepOut run_step(Tape& t, const att::Attention::Ctx& ctx, const Hypothesis& hyp) const {
        const int prev = hyp.ids.empty() ? att::kEos : hyp.ids.back();
        att::DecStep s = att::decoder_step(t, *dec, *at, ctx, t.constant(hyp.dec_h),
                                           t.constant(hyp.dec_c), t.constant(hyp.att_w), prev);
        return {t.val(s.logp), t.val(s.h), t.val(s.c), t.val(s.a)};
    }

    Hypothesis extend(const Hypothesis& hyp, const StepOut& so, int c) const {
        Hypothesis n = hyp;
        n.ids.push_back(c);
        n.att += so.logp.v[c];
        n.dec_h = so.h;
        n.dec_c = so.c;
        n.att_w = so.a;
        if (use_ctc()) {
            auto [inc, ns] = scorer->extend(hyp.ctc_state, c);
            n.ctc += inc;
            n.ctc_state = std::move(ns);
        }
        if (use_lm()) n.lm += mlm->score(n.lm_state, c);
        n.total = combined_score(n.att, n.ctc, n.lm, lambda, gamma);
        return n;
    }

    /// End-of-sequence scoring; the returned hypothesis is finished.
    Hypothesis finish(const Hypothesis& hyp, const StepOut& so) const {
        Hypothesis n = hyp;
        n.att += so.logp.v[att::kEos];
        if (use_ctc()) n.ctc += scorer->eos_increment(hyp.ctc_state);
        if (use_lm()) n.lm += mlm->score(n.lm_state, att::kEos);
        n.total = combined_score(n.att, n.ctc, n.lm, lambda, gamma);
        return n;
    }
};

/// Validates inputs, builds the prefix scorer into `scorer` when the CTC
/// component is active, and wires up an Expander over the caller's tensors.
inline Expander make_expander(const att::Decoder& dec, const att::Attention& at,
                              const Tensor& enc, const Tensor& ctc_logprobs,
                              const lm::MultilevelLm* mlm, double lambda, double gamma,
                              std::optional<ctc::CtcPrefixScorer>& scorer) {
    if (!std::isfinite(lambda) || !std::isfinite(gamma))
        throw Error("search: weights must be finite");
    if (lambda < 0.0 || lambda > 1.0)
        throw Error("search: lambda must lie in [0,1], got " + std::to_string(lambda));
    if (enc.rank() != 2 || enc.dim(0) < 1)
        throw Error("search: empty encoder output " + enc.shape_str());
    Expander e;
    e.dec = &dec;
    e.at = &at;
    e.enc = &enc;
    e.mlm = mlm;
    e.lambda = lambda;
    e.gamma = gamma;
    e.mask.assign(static_cast<std::size_t>(enc.dim(0)), true);
    if (lambda > 0.0) {
        if (ctc_logprobs.rank() != 2 || ctc_logprobs.dim(0) < 1 ||
            ctc_logprobs.dim(1) != dec.n_chars + 1)
            throw Error("search: CTC table " + ctc_logprobs.shape_str() + " does not match " +
                        std::to_string(dec.n_chars + 1) + " symbols");
        scorer.emplace(ctc_logprobs);
        e.scorer = &*scorer;
    }
    return e;
}

inline DecodeResult to_result(const Hypothesis& h) {
    return {h.ids, h.total, h.att, h.ctc, h.lm};
}

inline int resolve_max_len(const BeamConfig& bc, int tprime) {
    if (bc.max_len >= 0) return bc.max_len;
    return std::max(0, static_cast<int>(std::floor(bc.max_len_ratio * tprime)));
}

}  // namespace detail

/// Label-synchronous beam search over one utterance. Every step scores all
/// next characters with the attention decoder, adds λ-weighted CTC prefix
/// increments and γ-weighted LM increments, keeps the `beam` best, and moves
/// end-of-sequence candidates to a finished pool. Returns the n-best finished
/// hypotheses, best first; ties break lexicographically on the emitted ids.
inline std::vector<DecodeResult> beam_search(const att::Decoder& dec, const att::Attention& at,
                                             const Tensor& enc, const Tensor& ctc_logprobs,
                                             const lm::MultilevelLm* mlm, const BeamConfig& bc) {
    if (bc.beam < 1) throw Error("search: beam must be >= 1");
    std::optional<ctc::CtcPrefixScorer> scorer;
    detail::Expander ex =
        detail::make_expander(dec, at, enc, ctc_logprobs, mlm, bc.lambda, bc.gamma, scorer);
    const int max_len = detail::resolve_max_len(bc, enc.dim(0));

    std::vector<Hypothesis> live{ex.root()};
    std::vector<Hypothesis> pool;
    for (int len = 0;; ++len) {
        Tape t;
        Var h = t.leaf(*ex.enc);
        att::Attention::Ctx ctx = at.prepare(t, h, ex.mask);
        std::vector<Hypothesis> next;
        for (const Hypothesis& hyp : live) {
            detail::Expander::StepOut so = ex.run_step(t, ctx, hyp);
            pool.push_back(ex.finish(hyp, so));
            if (len < max_len)
                for (int c = 1; c <= dec.n_chars; ++c) next.push_back(ex.extend(hyp, so, c));
        }
        if (len >= max_len || next.empty()) break;
        std::sort(next.begin(), next.end(), detail::better<Hypothesis>);
        if (static_cast<int>(next.size()) > bc.beam) next.resize(bc.beam);
        live = std::move(next);
    }

    std::sort(pool.begin(), pool.end(), detail::better<Hypothesis>);
    const int keep = bc.nbest > 0 ? bc.nbest : bc.beam;
    if (static_cast<int>(pool.size()) > keep) pool.resize(keep);
    std::vector<DecodeResult> out;
    out.reserve(pool.size());
    for (const Hypothesis& h : pool) out.push_back(detail::to_result(h));
    return out;
}

/// Greedy label-synchronous decoding: follow the single best extension at
/// each step, recording the finish score of every visited prefix, and return
/// the best finish seen. Matches beam_search with beam = 1 by construction.
inline DecodeResult greedy_decode(const att::Decoder& dec, const att::Attention& at,
                                  const Tensor& enc, const Tensor& ctc_logprobs,
                                  const lm::MultilevelLm* mlm, const BeamConfig& bc) {
    std::optional<ctc::CtcPrefixScorer> scorer;
    detail::Expander ex =
        detail::make_expander(dec, at, enc, ctc_logprobs, mlm, bc.lambda, bc.gamma, scorer);
    const int max_len = detail::resolve_max_len(bc, enc.dim(0));

    Hypothesis cur = ex.root();
    bool have_best = false;
    Hypothesis best;
    for (int len = 0;; ++len) {
        Tape t;
        Var h = t.leaf(*ex.enc);
        att::Attention::Ctx ctx = at.prepare(t, h, ex.mask);
        detail::Expander::StepOut so = ex.run_step(t, ctx, cur);
        Hypothesis fin = ex.finish(cur, so);
        if (!have_best || detail::better(fin, best)) {
            best = fin;
            have_best = true;
        }
        if (len >= max_len) break;
        bool have_next = false;
        Hypothesis next;
        for (int c = 1; c <= dec.n_chars; ++c) {
            Hypothesis cand = ex.extend(cur, so, c);
            if (!have_next || detail::better(cand, next)) {
                next = std::move(cand);
                have_next = true;
            }
        }
        if (!have_next) break;
        cur = std::move(next);
    }
    return detail::to_result(best);
}

/// Exhaustive oracle: enumerates every label sequence up to max_len and
/// scores it with the identical bookkeeping. Guarded by |S|^max_len <= 1e5.
inline DecodeResult exhaustive_search(const att::Decoder& dec, const att::Attention& at,
                                      const Tensor& enc, const Tensor& ctc_logprobs,
                                      const lm::MultilevelLm* mlm, double lambda, double gamma,
                                      int max_len) {
    if (max_len < 0) throw Error("search: max_len must be >= 0");
    const double bound = std::pow(static_cast<double>(dec.n_chars), max_len);
    if (!(bound <= 1e5))
        throw Error("search: exhaustive enumeration bound exceeded (" +
                    std::to_string(dec.n_chars) + "^" + std::to_string(max_len) + " > 1e5)");
    std::optional<ctc::CtcPrefixScorer> scorer;
    detail::Expander ex =
        detail::make_expander(dec, at, enc, ctc_logprobs, mlm, lambda, gamma, scorer);

    bool have_best = false;
    Hypothesis best;
    // Depth-first walk of the prefix tree, sharing states along the path.
    auto visit = [&](auto&& self, const Hypothesis& hyp, int depth) -> void {
        Tape t;
        Var h = t.leaf(*ex.enc);
        att::Attention::Ctx ctx = at.prepare(t, h, ex.mask);
        detail::Expander::StepOut so = ex.run_step(t, ctx, hyp);
        Hypothesis fin = ex.finish(hyp, so);
        if (!have_best || detail::better(fin, best)) {
            best = fin;
            have_best = true;
        }
        if (depth < max_len)
            for (int c = 1; c <= dec.n_chars; ++c) self(self, ex.extend(hyp, so, c), depth + 1);
    };
    visit(visit, ex.root(), 0);
    return detail::to_result(best);
}

/// Replays the increments for one fixed label sequence; used to cross-check
/// reported totals against from-scratch scoring.
inline DecodeResult score_labels(const att::Decoder& dec, const att::Attention& at,
                                 const Tensor& enc, const Tensor& ctc_logprobs,
                                 const lm::MultilevelLm* mlm, double lambda, double gamma,
                                 const std::vector<int>& ids) {
    std::optional<ctc::CtcPrefixScorer> scorer;
    detail::Expander ex =
        detail::make_expander(dec, at, enc, ctc_logprobs, mlm, lambda, gamma, scorer);
    Hypothesis cur = ex.root();
    for (int c : ids) {
        Tape t;
        Var h = t.leaf(*ex.enc);
        att::Attention::Ctx ctx = at.prepare(t, h, ex.mask);
        detail::Expander::StepOut so = ex.run_step(t, ctx, cur);
        cur = ex.extend(cur, so, c);
    }
    Tape t;
    Var h = t.leaf(*ex.enc);
    att::Attention::Ctx ctx = at.prepare(t, h, ex.mask);
    detail::Expander::StepOut so = ex.run_step(t, ctx, cur);
    Hypothesis fin = ex.finish(cur, so);
    return detail::to_result(fin);
}

}  // namespace e2e::search
