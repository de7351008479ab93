#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "e2e/autodiff.hpp"
#include "e2e/ctc.hpp"

using namespace e2e;
using namespace e2e::ctc;
using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

// Random rows normalized in the log domain.
Tensor random_logprobs(int t, int symbols, Rng& rng, double spread = 2.0) {
    Tensor z({t, symbols});
    for (double& v : z.v) v = rng.uniform(-spread, spread);
    for (int f = 0; f < t; ++f) {
        double mx = z.at(f, 0);
        for (int k = 1; k < symbols; ++k) mx = std::max(mx, z.at(f, k));
        double acc = 0.0;
        for (int k = 0; k < symbols; ++k) acc += std::exp(z.at(f, k) - mx);
        const double lz = mx + std::log(acc);
        for (int k = 0; k < symbols; ++k) z.at(f, k) -= lz;
    }
    return z;
}

Tensor exp_of(const Tensor& lp) {
    Tensor p = lp;
    for (double& v : p.v) v = std::exp(v);
    return p;
}

std::vector<int> random_labels(int max_len, int charset, Rng& rng, int min_len = 1) {
    std::vector<int> l(rng.uniform_int(min_len, max_len));
    for (int& c : l) c = rng.uniform_int(1, charset);
    return l;
}

// All label sequences over charset {1..K} with length <= max_len.
void all_sequences(int charset, int max_len, std::vector<std::vector<int>>& out,
                   std::vector<int>& cur) {
    if (!cur.empty()) out.push_back(cur);
    if (static_cast<int>(cur.size()) == max_len) return;
    for (int c = 1; c <= charset; ++c) {
        cur.push_back(c);
        all_sequences(charset, max_len, out, cur);
        cur.pop_back();
    }
}

}  // namespace

TEST_CASE("single frame loss is the char probability") {
    Tensor lp = Tensor::from({1, 3}, {std::log(0.2), std::log(0.5), std::log(0.3)});
    CtcResult r = ctc_loss(lp, {1});
    REQUIRE_FALSE(r.impossible);
    REQUIRE(r.loss == Catch::Approx(-std::log(0.5)).margin(1e-12));
}

TEST_CASE("two frame uniform case enumerates three paths") {
    const double u = std::log(1.0 / 3.0);
    Tensor lp = Tensor::from({2, 3}, {u, u, u, u, u, u});
    CtcResult r = ctc_loss(lp, {1});
    // paths aa, a-, -a: p = 3/9
    REQUIRE(r.loss == Catch::Approx(std::log(3.0)).margin(1e-12));
}

TEST_CASE("loss matches the brute-force oracle on random instances") {
    Rng rng(101);
    for (int trial = 0; trial < 200; ++trial) {
        const int t = rng.uniform_int(1, 5);
        Tensor lp = random_logprobs(t, 4, rng);
        const auto labels = random_labels(3, 3, rng);
        const double p = ctc_brute_force(exp_of(lp), labels);
        CtcResult r = ctc_loss(lp, labels);
        if (p == 0.0) {
            REQUIRE(r.impossible);
        } else {
            REQUIRE_FALSE(r.impossible);
            REQUIRE(r.loss == Catch::Approx(-std::log(p)).margin(1e-10));
        }
    }
}

TEST_CASE("brute force total probability over all sequences is one") {
    Rng rng(55);
    const int t = 4, charset = 2;
    Tensor p = exp_of(random_logprobs(t, charset + 1, rng));
    std::vector<std::vector<int>> seqs;
    std::vector<int> cur;
    all_sequences(charset, t, seqs, cur);
    double total = ctc_brute_force(p, {});  // empty transcription
    for (const auto& s : seqs) total += ctc_brute_force(p, s);
    REQUIRE(total == Catch::Approx(1.0).margin(1e-12));
    // determinism
    REQUIRE(ctc_brute_force(p, seqs[3]) == ctc_brute_force(p, seqs[3]));
}

TEST_CASE("brute force refuses oversized instances") {
    Tensor p({9, 3}, 0.33);
    REQUIRE_THROWS_AS(ctc_brute_force(p, {1}), Error);
    Tensor wide({4, 6}, 0.16);
    REQUIRE_THROWS_AS(ctc_brute_force(wide, {1}), Error);
}

TEST_CASE("impossible targets flag instead of throwing") {
    Rng rng(7);
    Tensor lp = random_logprobs(2, 4, rng);
    CtcResult r = ctc_loss(lp, {1, 1, 2});  // needs >= 4 frames (blank between repeats)
    REQUIRE(r.impossible);
    REQUIRE(std::isinf(r.loss));
    CtcGradResult g = ctc_grad(lp, {1, 1, 2});
    REQUIRE(g.impossible);
    for (double v : g.grad.v) REQUIRE(v == 0.0);
    // repeat needing a separating blank: "aa" in 2 frames
    REQUIRE(ctc_loss(lp, {1, 1}).impossible);
    REQUIRE_FALSE(ctc_loss(lp, {1, 2}).impossible);
}

TEST_CASE("label validation rejects blank and out-of-range ids") {
    Tensor lp({3, 4}, std::log(0.25));
    REQUIRE_THROWS_AS(ctc_loss(lp, {0}), Error);
    REQUIRE_THROWS_AS(ctc_loss(lp, {4}), Error);
    REQUIRE_THROWS_AS(ctc_loss(lp, {}), Error);
}

TEST_CASE("gradient rows sum to zero and match finite differences") {
    Rng rng(202);
    for (int trial = 0; trial < 20; ++trial) {
        const int t = 4, symbols = 4;
        Tensor logits({t, symbols});
        for (double& v : logits.v) v = rng.uniform(-1.5, 1.5);
        const auto labels = random_labels(2, symbols - 1, rng);

        Tensor lp = logits;  // normalize
        for (int f = 0; f < t; ++f) {
            double mx = lp.at(f, 0);
            for (int k = 1; k < symbols; ++k) mx = std::max(mx, lp.at(f, k));
            double acc = 0.0;
            for (int k = 0; k < symbols; ++k) acc += std::exp(lp.at(f, k) - mx);
            for (int k = 0; k < symbols; ++k) lp.at(f, k) -= mx + std::log(acc);
        }
        CtcGradResult g = ctc_grad(lp, labels);
        REQUIRE_FALSE(g.impossible);
        for (int f = 0; f < t; ++f) {
            double row = 0.0, post = 0.0;
            for (int k = 0; k < symbols; ++k) {
                row += g.grad.at(f, k);
                post += g.gamma.at(f, k);
            }
            REQUIRE(std::abs(row) < 1e-10);
            REQUIRE(post == Catch::Approx(1.0).margin(1e-10));
        }

        // finite differences through the softmax composition
        auto f = [&](Tape& tp, const std::vector<Var>& xs) {
            return ctc_loss_op(tp, tp.log_softmax(xs[0]), labels);
        };
        REQUIRE(ad::grad_check(f, {logits}) < 1e-5);

        // tape-op analytic gradient equals the standalone y - gamma formula
        Tape tp;
        Var vz = tp.leaf(logits, true);
        tp.backward(ctc_loss_op(tp, tp.log_softmax(vz), labels));
        for (std::int64_t k = 0; k < logits.size(); ++k)
            REQUIRE(tp.grad(vz).v[k] == Catch::Approx(g.grad.v[k]).margin(1e-12));
    }
}

TEST_CASE("log space recursion survives tiny probabilities") {
    Tensor lp({6, 3}, -700.0);
    for (int t = 0; t < 6; ++t) lp.at(t, t % 2 == 0 ? 1 : 0) = -1e-3;
    CtcResult r = ctc_loss(lp, {1, 1, 1});
    REQUIRE(std::isfinite(r.loss));
    CtcGradResult g = ctc_grad(lp, {1, 1, 1});
    for (double v : g.grad.v) REQUIRE(std::isfinite(v));
    CtcResult deep = ctc_loss(lp, {2, 2});
    REQUIRE((deep.impossible || std::isfinite(deep.loss)));
}

TEST_CASE("greedy collapse merges repeats and drops blanks") {
    // argmax path [a, a, -, b] -> "ab"
    Tensor lp = Tensor::from({4, 3}, {
        -0.1, -0.05, -3.0,  // a
        -0.2, -0.01, -2.0,  // a
        -0.01, -1.0, -2.0,  // blank
        -2.0, -1.0, -0.3,   // b
    });
    REQUIRE(greedy_collapse(lp) == std::vector<int>{1, 2});
    Tensor blanks({3, 3}, -2.0);
    for (int t = 0; t < 3; ++t) blanks.at(t, 0) = -0.1;
    REQUIRE(greedy_collapse(blanks).empty());
}

TEST_CASE("greedy sequence probability never beats the exhaustive best") {
    Rng rng(303);
    for (int trial = 0; trial < 50; ++trial) {
        const int t = 4, charset = 2;
        Tensor lp = random_logprobs(t, charset + 1, rng);
        Tensor p = exp_of(lp);
        const auto greedy = greedy_collapse(lp);
        const double p_greedy =
            greedy.empty() ? ctc_brute_force(p, {}) : ctc_brute_force(p, greedy);
        std::vector<std::vector<int>> seqs;
        std::vector<int> cur;
        all_sequences(charset, t, seqs, cur);
        double best = ctc_brute_force(p, {});
        for (const auto& s : seqs) best = std::max(best, ctc_brute_force(p, s));
        REQUIRE(p_greedy <= best + 1e-12);
    }
}

TEST_CASE("prefix scores telescope to the full-sequence ctc score") {
    Rng rng(404);
    for (int trial = 0; trial < 100; ++trial) {
        const int t = rng.uniform_int(2, 6), charset = 3;
        Tensor lp = random_logprobs(t, charset + 1, rng);
        const auto labels = random_labels(std::min(3, t), charset, rng);
        CtcResult full = ctc_loss(lp, labels);
        if (full.impossible) continue;

        CtcPrefixScorer scorer(lp);
        CtcPrefixState state = scorer.initial();
        double acc = 0.0;
        for (int c : labels) {
            auto [inc, ns] = scorer.extend(state, c);
            REQUIRE(inc <= 1e-12);  // log prob increments
            acc += inc;
            state = std::move(ns);
        }
        const double eos = scorer.eos_increment(state);
        REQUIRE(eos <= 1e-12);
        REQUIRE(acc + eos == Catch::Approx(-full.loss).margin(1e-9));
    }
}

TEST_CASE("single frame prefix score reduces to the char logprob") {
    Tensor lp = Tensor::from({1, 3}, {std::log(0.3), std::log(0.45), std::log(0.25)});
    CtcPrefixScorer scorer(lp);
    auto [inc, state] = scorer.extend(scorer.initial(), 2);
    REQUIRE(inc == Catch::Approx(std::log(0.25)).margin(1e-12));
    REQUIRE_THROWS_AS(scorer.extend(state, 0), Error);
    REQUIRE_THROWS_AS(scorer.extend(state, 3), Error);
}

TEST_CASE("empty hypothesis eos score is the all-blank probability") {
    Rng rng(505);
    Tensor lp = random_logprobs(4, 3, rng);
    CtcPrefixScorer scorer(lp);
    double blanks = 0.0;
    for (int t = 0; t < 4; ++t) blanks += lp.at(t, kBlank);
    REQUIRE(scorer.eos_increment(scorer.initial()) == Catch::Approx(blanks).margin(1e-12));
}
