#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "e2e/layers.hpp"
#include "e2e/optim.hpp"
#include "e2e/rng.hpp"
#include "e2e/vocab.hpp"

namespace e2e::lm {

using ad::Param;
using ad::Tape;
using ad::Tensor;
using ad::Var;

/// Recurrent language model over n_out predictable tokens (id 0 is
/// end-of-sequence, 1..n_out-1 ordinary tokens); the extra embedding row
/// n_out is the start-of-sequence input.
struct LstmLm {
    Param embed;  // (n_out + 1, emb)
    std::vector<nn::LstmCell> layers;
    nn::Linear out;
    int n_out = 0, hidden = 0;

    LstmLm() = default;
    LstmLm(const std::string& name, int n_out_, int emb, int hidden_, int n_layers, Rng& rng)
        : embed(name + ".embed", ad::init_uniform({n_out_ + 1, emb}, emb, rng)),
          out(name + ".out", hidden_, n_out_, rng),
          n_out(n_out_),
          hidden(hidden_) {
        int d = emb;
        for (int i = 0; i < n_layers; ++i) {
            layers.emplace_back(name + ".l" + std::to_string(i), d, hidden_, rng);
            d = hidden_;
        }
    }

    int start_id() const { return n_out; }

    struct State {
        std::vector<Tensor> h, c;  // one (1, hidden) pair per layer
    };
    State initial() const {
        State s;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            s.h.emplace_back(std::vector<int>{1, hidden});
            s.c.emplace_back(std::vector<int>{1, hidden});
        }
        return s;
    }

    struct StepVars {
        Var logp;  // (1, n_out)
        std::vector<Var> h, c;
    };

    /// Consume `input_id` (a token id or start_id) on a tape; returns the
    /// log-distribution over the next token and the new state.
    StepVars step_on_tape(Tape& t, const std::vector<Var>& h, const std::vector<Var>& c,
                          int input_id) const {
        if (input_id < 0 || input_id > n_out)
            throw Error("lm: input id " + std::to_string(input_id) + " out of range");
        Var x = t.embedding_lookup(t.param(const_cast<Param&>(embed)), input_id);
        StepVars s;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            auto bound = layers[i].bind(t);
            auto [nh, nc] = bound.step(t, x, h[i], c[i]);
            s.h.push_back(nh);
            s.c.push_back(nc);
            x = nh;
        }
        s.logp = t.log_softmax(out.apply(t, x));
        return s;
    }

    /// Plain-tensor step for decoding; same graph ops on a scratch tape.
    std::pair<Tensor, State> step(const State& st, int input_id) const {
        Tape t;
        std::vector<Var> h, c;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            h.push_back(t.constant(st.h[i]));
            c.push_back(t.constant(st.c[i]));
        }
        StepVars s = step_on_tape(t, h, c, input_id);
        State ns;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            ns.h.push_back(t.val(s.h[i]));
            ns.c.push_back(t.val(s.c[i]));
        }
        Tensor lp = t.val(s.logp);
        lp.shape = {n_out};
        return {lp, ns};
    }

    /// Total negative log-likelihood of `tokens` followed by eos, on a tape.
    Var nll(Tape& t, const std::vector<int>& tokens) const {
        for (int id : tokens)
            if (id < 1 || id >= n_out)
                throw Error("lm: token id " + std::to_string(id) + " out of range");
        std::vector<Var> h, c;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            h.push_back(t.constant(Tensor({1, hidden})));
            c.push_back(t.constant(Tensor({1, hidden})));
        }
        Var total = t.constant(Tensor::scalar(0.0));
        int prev = start_id();
        for (std::size_t l = 0; l <= tokens.size(); ++l) {
            const int target = l < tokens.size() ? tokens[l] : 0;
            StepVars s = step_on_tape(t, h, c, prev);
            total = t.add(total, t.scale(t.pick(s.logp, target), -1.0));
            h = s.h;
            c = s.c;
            prev = target;
        }
        return total;
    }

    void collect(std::vector<Param*>& ps) {
        ps.push_back(&embed);
        for (auto& l : layers) l.collect(ps);
        out.collect(ps);
    }
};

/// exp(mean per-token NLL) over exactly the given tokens (no eos term).
inline double perplexity(const LstmLm& lm, const std::vector<int>& tokens) {
    if (tokens.empty()) throw Error("perplexity: empty token sequence");
    LstmLm::State st = lm.initial();
    int prev = lm.start_id();
    double nll = 0.0;
    for (int tok : tokens) {
        if (tok < 1 || tok >= lm.n_out)
            throw Error("perplexity: token id " + std::to_string(tok) + " out of range");
        auto [lp, ns] = lm.step(st, prev);
        nll -= lp.v[tok];
        st = ns;
        prev = tok;
    }
    return std::exp(nll / static_cast<double>(tokens.size()));
}

struct LmTrainReport {
    std::vector<double> epoch_nll;  // mean NLL per token, per epoch
};

/// Train on token sequences with per-sequence steps and a seeded shuffle.
template <typename Optimizer>
LmTrainReport train_lm(LstmLm& lm, const std::vector<std::vector<int>>& corpus, Optimizer& optim,
                       int epochs, std::uint64_t seed, double clip_norm = 5.0) {
    if (corpus.empty()) throw Error("train_lm: empty corpus");
    std::vector<Param*> ps;
    lm.collect(ps);
    LmTrainReport report;
    std::vector<std::size_t> order(corpus.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (int e = 0; e < epochs; ++e) {
        Rng rng(Rng::mix(seed, static_cast<std::uint64_t>(e), 17));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rng.uniform_int(0, static_cast<int>(i) - 1)]);
        double total = 0.0;
        std::int64_t tokens = 0;
        for (std::size_t idx : order) {
            const auto& seq = corpus[idx];
            Tape t;
            Var loss = lm.nll(t, seq);
            for (Param* p : ps) p->zero_grad();
            t.backward(loss);
            opt::clip_grad_norm(ps, clip_norm);
            optim.step(ps);
            total += t.val(loss).v[0];
            tokens += static_cast<std::int64_t>(seq.size()) + 1;
        }
        report.epoch_nll.push_back(total / static_cast<double>(tokens));
    }
    return report;
}

// ---------------------------------------------------------------------------
// Multilevel character/word scoring
// ---------------------------------------------------------------------------

/// Combines a character-level and a word-level language model. Characters
/// inside a word are scored by the character model; when a delimiter
/// (space or end-of-sequence) completes an in-vocabulary word, the
/// accumulated character mass is replaced by the word model's probability.
/// Out-of-vocabulary words keep their character score plus the word
/// model's unknown-word probability, so no hypothesis ever scores -inf.
struct MultilevelLm {
    const LstmLm* clm = nullptr;       // over eos + characters (n_out = K+1)
    const LstmLm* wlm = nullptr;       // over eos + words + unk (n_out = W+2)
    const vocab::Charset* cs = nullptr;
    const vocab::WordVocab* wv = nullptr;
    int space_id = 0;  // char id of the word delimiter

    int unk_id() const { return wv->size() + 1; }

    struct State {
        LstmLm::State cstate, wstate;
        Tensor clp, wlp;            // cached next-token log-distributions
        double acc = 0.0;           // char-LM mass of the current partial word
        std::vector<int> partial;   // char ids of the current partial word
    };

    State initial() const {
        State s;
        auto [clp, cst] = clm->step(clm->initial(), clm->start_id());
        auto [wlp, wst] = wlm->step(wlm->initial(), wlm->start_id());
        s.cstate = std::move(cst);
        s.wstate = std::move(wst);
        s.clp = std::move(clp);
        s.wlp = std::move(wlp);
        return s;
    }

    /// Close the current word against the word model. Returns the score
    /// increment; the delimiter itself carries no character-model mass so
    /// that closed-vocabulary totals telescope to the word model's total.
    double close_word(State& s) const {
        if (s.partial.empty()) return 0.0;
        const std::string w = cs->decode(s.partial);
        const int wid = wv->id(w);
        double inc;
        int advance;
        if (wid > 0) {
            inc = s.wlp.v[wid] - s.acc;
            advance = wid;
        } else {
            inc = s.wlp.v[unk_id()];
            advance = unk_id();
        }
        auto [wlp, wst] = wlm->step(s.wstate, advance);
        s.wlp = std::move(wlp);
        s.wstate = std::move(wst);
        s.acc = 0.0;
        s.partial.clear();
        return inc;
    }

    /// Score one character id (1..K) or 0 for end-of-sequence.
    double score(State& s, int char_id) const {
        if (char_id == 0) {
            double inc = close_word(s);
            inc += s.wlp.v[0];  // word-model end-of-sequence
            return inc;
        }
        if (char_id < 1 || char_id >= clm->n_out)
            throw Error("multilevel: char id " + std::to_string(char_id) + " out of range");
        if (char_id == space_id) {
            double inc;
            if (s.partial.empty()) {
                // Consecutive delimiters: no word to substitute, so the
                // delimiter keeps its character-model score.
                inc = s.clp.v[char_id];
            } else {
                inc = close_word(s);
            }
            auto [clp, cst] = clm->step(s.cstate, char_id);
            s.clp = std::move(clp);
            s.cstate = std::move(cst);
            return inc;
        }
        const double lp = s.clp.v[char_id];
        s.acc += lp;
        s.partial.push_back(char_id);
        auto [clp, cst] = clm->step(s.cstate, char_id);
        s.clp = std::move(clp);
        s.cstate = std::move(cst);
        return lp;
    }

    /// Total multilevel score of a full character sequence plus eos.
    double score_sequence(const std::vector<int>& char_ids) const {
        State s = initial();
        double total = 0.0;
        for (int c : char_ids) total += score(s, c);
        total += score(s, 0);
        return total;
    }
};

/// Word-model-only total log-probability of a word sequence plus eos.
inline double word_lm_total(const LstmLm& wlm, const std::vector<int>& word_ids) {
    LstmLm::State st = wlm.initial();
    int prev = wlm.start_id();
    double total = 0.0;
    for (std::size_t i = 0; i <= word_ids.size(); ++i) {
        const int target = i < word_ids.size() ? word_ids[i] : 0;
        auto [lp, ns] = wlm.step(st, prev);
        total += lp.v[target];
        st = ns;
        prev = target;
    }
    return total;
}

}  // namespace e2e::lm
