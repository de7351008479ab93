#pragma once

#include <limits>
#include <string>
#include <vector>

#include "e2e/tensor.hpp"
#include "e2e/vocab.hpp"

namespace e2e::metrics {

struct EditCounts {
    long long sub = 0, del = 0, ins = 0;
    long long total() const { return sub + del + ins; }
};

/// Minimum-edit alignment with unit costs. When several alignments reach the
/// minimum, substitutions are preferred over insertion+deletion pairs
/// (diagonal moves win ties), then deletions over insertions; this makes the
/// error decomposition deterministic.
template <class Tok>
EditCounts align(const std::vector<Tok>& ref, const std::vector<Tok>& hyp) {
    const std::size_t n = ref.size(), m = hyp.size();
    struct Cell {
        long long cost = 0;
        EditCounts c;
    };
    std::vector<Cell> dp((n + 1) * (m + 1));
    auto at = [&](std::size_t i, std::size_t j) -> Cell& { return dp[i * (m + 1) + j]; };
    for (std::size_t i = 1; i <= n; ++i) {
        at(i, 0).cost = static_cast<long long>(i);
        at(i, 0).c.del = static_cast<long long>(i);
    }
    for (std::size_t j = 1; j <= m; ++j) {
        at(0, j).cost = static_cast<long long>(j);
        at(0, j).c.ins = static_cast<long long>(j);
    }
    for (std::size_t i = 1; i <= n; ++i) {
        for (std::size_t j = 1; j <= m; ++j) {
            const bool match = ref[i - 1] == hyp[j - 1];
            const long long diag = at(i - 1, j - 1).cost + (match ? 0 : 1);
            const long long up = at(i - 1, j).cost + 1;    // deletion
            const long long left = at(i, j - 1).cost + 1;  // insertion
            Cell& cur = at(i, j);
            if (diag <= up && diag <= left) {
                cur.cost = diag;
                cur.c = at(i - 1, j - 1).c;
                if (!match) ++cur.c.sub;
            } else if (up <= left) {
                cur.cost = up;
                cur.c = at(i - 1, j).c;
                ++cur.c.del;
            } else {
                cur.cost = left;
                cur.c = at(i, j - 1).c;
                ++cur.c.ins;
            }
        }
    }
    return at(n, m).c;
}

/// Accumulated error counts at one granularity (words or characters).
struct LevelTotals {
    long long sub = 0, del = 0, ins = 0, ref_tokens = 0;
    bool empty_ref = false;  // some reference had zero tokens

    long long errors() const { return sub + del + ins; }
    /// Error rate in percent: 100*(S+D+I)/N_ref. A zero-token reference
    /// yields 0 when there are no errors and +inf otherwise (flagged).
    double pct() const {
        if (ref_tokens == 0)
            return errors() == 0 ? 0.0 : std::numeric_limits<double>::infinity();
        return 100.0 * static_cast<double>(errors()) / static_cast<double>(ref_tokens);
    }
    void add(const EditCounts& c, long long n_ref) {
        sub += c.sub;
        del += c.del;
        ins += c.ins;
        ref_tokens += n_ref;
        if (n_ref == 0) empty_ref = true;
    }
};

struct ScoreReport {
    LevelTotals word, chr;
    int utterances = 0;

    double wer() const { return word.pct(); }
    double cer() const { return chr.pct(); }
};

/// Character tokens of a transcript: the characters of the
/// whitespace-normalized text (words joined by single spaces).
inline std::vector<char> char_tokens(const std::string& text) {
    std::vector<char> out;
    for (const std::string& w : vocab::WordVocab::split_words(text)) {
        if (!out.empty()) out.push_back(' ');
        for (char c : w) out.push_back(c);
    }
    return out;
}

/// Scores one reference/hypothesis pair at both granularities.
inline ScoreReport score_pair(const std::string& ref, const std::string& hyp) {
    ScoreReport r;
    const auto rw = vocab::WordVocab::split_words(ref);
    const auto hw = vocab::WordVocab::split_words(hyp);
    r.word.add(align(rw, hw), static_cast<long long>(rw.size()));
    const auto rc = char_tokens(ref);
    const auto hc = char_tokens(hyp);
    r.chr.add(align(rc, hc), static_cast<long long>(rc.size()));
    r.utterances = 1;
    return r;
}

inline void merge(ScoreReport& into, const ScoreReport& other) {
    auto merge_level = [](LevelTotals& a, const LevelTotals& b) {
        a.sub += b.sub;
        a.del += b.del;
        a.ins += b.ins;
        a.ref_tokens += b.ref_tokens;
        a.empty_ref = a.empty_ref || b.empty_ref;
    };
    merge_level(into.word, other.word);
    merge_level(into.chr, other.chr);
    into.utterances += other.utterances;
}

/// Scores parallel lists of references and hypotheses.
inline ScoreReport score_corpus(const std::vector<std::string>& refs,
                                const std::vector<std::string>& hyps) {
    if (refs.size() != hyps.size())
        throw Error("score: " + std::to_string(refs.size()) + " references vs " +
                    std::to_string(hyps.size()) + " hypotheses");
    ScoreReport total;
    for (std::size_t i = 0; i < refs.size(); ++i) merge(total, score_pair(refs[i], hyps[i]));
    return total;
}

}  // namespace e2e::metrics
