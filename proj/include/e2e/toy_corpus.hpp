#pragma once

#include <complex>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "e2e/features.hpp"
#include "e2e/rng.hpp"

namespace e2e::toy {

/// Synthetic multichannel keyword corpus. Every utterance is a sequence of
/// keyword "words", each rendered as a fixed multi-harmonic chirp signature,
/// recorded twice: a 2-channel close array at high SNR and a 4-channel
/// distant array with per-channel delay, gain jitter, and stronger noise.
struct ToyCorpusSpec {
    int n_words = 12;                  // keyword vocabulary size (10..20)
    int min_words = 1, max_words = 3;  // words per utterance
    int n_train = 2000, n_dev = 64, n_test = 96;
    int sample_rate = 8000;
    int channels_distant = 4, channels_close = 2;
    double distant_snr_db = 5.0;
    double close_snr_db = 30.0;
    double max_delay_ms = 2.0;  // distant per-channel delay bound
    double max_gain_db = 3.0;   // distant per-channel gain jitter bound
    double word_min_s = 0.3, word_max_s = 0.6, gap_s = 0.1;
    double max_xcorr = 0.8;  // pairwise signature confusability bound
    std::uint64_t seed = 1;

    void validate() const {
        if (n_words < 10 || n_words > 20)
            throw Error("toy corpus: vocabulary must have 10..20 words, got " +
                        std::to_string(n_words));
        if (min_words < 1 || max_words < min_words)
            throw Error("toy corpus: need 1 <= min_words <= max_words");
        if (n_train < 1 || n_dev < 1 || n_test < 1)
            throw Error("toy corpus: every split needs at least one utterance");
        if (sample_rate < 6000)
            throw Error("toy corpus: sample_rate must be at least 6000 Hz");
        if (channels_distant < 1 || channels_close < 1)
            throw Error("toy corpus: channel counts must be positive");
        if (word_min_s < 0.05 || word_max_s < word_min_s)
            throw Error("toy corpus: need 0.05 <= word_min_s <= word_max_s");
        if (gap_s < 0.0) throw Error("toy corpus: gap_s must be nonnegative");
        if (!(max_xcorr > 0.0 && max_xcorr <= 1.0))
            throw Error("toy corpus: max_xcorr must lie in (0,1]");
        if (max_delay_ms < 0.0 || max_gain_db < 0.0)
            throw Error("toy corpus: delay and gain bounds must be nonnegative");
    }
};

/// Fixed keyword inventory: 20 distinct words over 8 letters, so the
/// character set (letters plus the word delimiter) stays at 9 symbols.
inline const std::vector<std::string>& master_words() {
    static const std::vector<std::string> words = {
        "ab", "cd", "ef", "gh", "ace", "bdf", "ceg", "dfh", "ha",  "fc",
        "eb", "gd", "abe", "cdg", "efa", "ghc", "bad", "dec", "feg", "hgf"};
    return words;
}

inline std::vector<std::string> keyword_list(int n) {
    const auto& m = master_words();
    if (n < 1 || n > static_cast<int>(m.size()))
        throw Error("toy corpus: keyword_list supports 1.." + std::to_string(m.size()) +
                    " words, got " + std::to_string(n));
    return std::vector<std::string>(m.begin(), m.begin() + n);
}

struct Signature {
    std::vector<double> samples;  // mono, peak-normalized
};

/// Peak of |cross-correlation(a,b)| over all lags, normalized by the signal
/// energies; 1.0 for identical signals, near 0 for unrelated ones.
inline double normalized_xcorr_peak(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.empty() || b.empty()) throw Error("xcorr: empty signal");
    double ea = 0.0, eb = 0.0;
    for (double x : a) ea += x * x;
    for (double x : b) eb += x * x;
    if (ea <= 0.0 || eb <= 0.0) throw Error("xcorr: silent signal");

    const int n = feat::detail::next_pow2(static_cast<int>(a.size() + b.size() - 1));
    std::vector<std::complex<double>> fa(n), fb(n);
    for (std::size_t i = 0; i < a.size(); ++i) fa[i] = a[i];
    for (std::size_t i = 0; i < b.size(); ++i) fb[i] = b[i];
    feat::detail::fft(fa);
    feat::detail::fft(fb);
    for (int i = 0; i < n; ++i) fa[i] = std::conj(fa[i] * std::conj(fb[i]));
    feat::detail::fft(fa);  // inverse transform up to conjugation and 1/n

    double peak = 0.0;
    for (const auto& z : fa) peak = std::max(peak, std::abs(z));
    return peak / (static_cast<double>(n) * std::sqrt(ea * eb));
}

/// One keyword signature: a Hann-windowed three-harmonic chirp with random
/// base frequency, sweep, harmonic mix, and phases. Peak-normalized to 0.25
/// so renditions survive gain jitter and noise without clipping.
inline Signature make_signature(int sample_rate, double dur_lo, double dur_hi, Rng& rng) {
    constexpr double kTau = 6.283185307179586476925286766559;
    const double dur = rng.uniform(dur_lo, dur_hi);
    const int n = std::max(16, static_cast<int>(dur * sample_rate));
    const double f0 = rng.uniform(200.0, 700.0);
    const double sweep = rng.uniform(-250.0, 250.0);  // Hz of drift across the word
    const double g2 = rng.uniform(0.2, 0.7), g3 = rng.uniform(0.1, 0.5);
    const double th1 = rng.uniform(0.0, kTau), th2 = rng.uniform(0.0, kTau),
                 th3 = rng.uniform(0.0, kTau);

    Signature s;
    s.samples.resize(n);
    const double rate = sweep / dur;
    double peak = 0.0;
    for (int i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / sample_rate;
        const double phase = f0 * t + 0.5 * rate * t * t;  // cycles
        const double env = 0.5 - 0.5 * std::cos(kTau * i / (n - 1));
        const double x = env * (std::sin(kTau * phase + th1) + g2 * std::sin(kTau * 2 * phase + th2) +
                                g3 * std::sin(kTau * 3 * phase + th3));
        s.samples[i] = x;
        peak = std::max(peak, std::abs(x));
    }
    for (double& x : s.samples) x *= 0.25 / peak;
    return s;
}

/// Draws one signature per keyword, redrawing any that correlates too
/// strongly with an earlier one, so the vocabulary stays distinguishable.
inline std::vector<Signature> make_signatures(const ToyCorpusSpec& spec) {
    spec.validate();
    std::vector<Signature> sigs(spec.n_words);
    for (int i = 0; i < spec.n_words; ++i) {
        bool ok = false;
        for (int attempt = 0; attempt < 64 && !ok; ++attempt) {
            Rng rng(Rng::mix(spec.seed, 0x5160u + static_cast<std::uint64_t>(i), attempt));
            sigs[i] = make_signature(spec.sample_rate, spec.word_min_s, spec.word_max_s, rng);
            ok = true;
            for (int j = 0; j < i && ok; ++j)
                ok = normalized_xcorr_peak(sigs[i].samples, sigs[j].samples) < spec.max_xcorr;
        }
        if (!ok)
            throw Error("toy corpus: could not draw a distinguishable signature for word " +
                        std::to_string(i));
    }
    return sigs;
}

// ---------------------------------------------------------------------------
// Utterance rendering
// ---------------------------------------------------------------------------

enum class SetKind { train, dev, test };

inline const char* set_name(SetKind k) {
    switch (k) {
        case SetKind::train: return "train";
        case SetKind::dev: return "dev";
        case SetKind::test: return "test";
    }
    throw Error("toy corpus: unknown set");
}

/// Root of all per-utterance randomness: content, array geometry, and noise
/// seeds all derive from this one value.
inline std::uint64_t utt_seed(const ToyCorpusSpec& spec, SetKind k, int index) {
    const std::uint64_t tag = k == SetKind::train ? 0x7417u : (k == SetKind::dev ? 0xde70u : 0x7e57u);
    return Rng::mix(spec.seed, tag, static_cast<std::uint64_t>(index));
}

struct RenderedUtt {
    std::string transcript;
    std::vector<int> word_ids;
    feat::Waveform close_clean, close;      // pre-noise and final close rendition
    feat::Waveform distant_clean, distant;  // pre-noise and final distant rendition
};

/// Mono concatenation: gap, word, gap, word, ..., gap.
inline std::vector<double> render_clean(const std::vector<int>& word_ids,
                                        const std::vector<Signature>& sigs,
                                        const ToyCorpusSpec& spec) {
    const int gap = static_cast<int>(spec.gap_s * spec.sample_rate);
    std::size_t total = gap;
    for (int w : word_ids) total += sigs[w].samples.size() + gap;
    std::vector<double> out(total, 0.0);
    std::size_t pos = gap;
    for (int w : word_ids) {
        const auto& s = sigs[w].samples;
        std::copy(s.begin(), s.end(), out.begin() + pos);
        pos += s.size() + gap;
    }
    return out;
}

/// Deterministically renders one utterance of a split, including both array
/// renditions; `gen_toy_corpus` writes exactly these waveforms to disk.
inline RenderedUtt render_utterance(const ToyCorpusSpec& spec, const std::vector<Signature>& sigs,
                                    SetKind kind, int index) {
    const std::uint64_t useed = utt_seed(spec, kind, index);
    Rng content(Rng::mix(useed, 1));
    const int nw = static_cast<int>(content.uniform_int(spec.min_words, spec.max_words));
    const auto words = keyword_list(spec.n_words);

    RenderedUtt u;
    for (int i = 0; i < nw; ++i) {
        const int w = static_cast<int>(content.uniform_int(0, spec.n_words - 1));
        u.word_ids.push_back(w);
        if (i) u.transcript += ' ';
        u.transcript += words[w];
    }
    const std::vector<double> clean = render_clean(u.word_ids, sigs, spec);

    u.close_clean.sample_rate = spec.sample_rate;
    u.close_clean.samples.assign(spec.channels_close, clean);
    u.close = feat::add_white_noise(u.close_clean, spec.close_snr_db, Rng::mix(useed, 2));

    Rng geo(Rng::mix(useed, 3));
    const int max_delay =
        static_cast<int>(spec.max_delay_ms * 1e-3 * spec.sample_rate);
    u.distant_clean.sample_rate = spec.sample_rate;
    u.distant_clean.samples.assign(spec.channels_distant,
                                   std::vector<double>(clean.size() + max_delay, 0.0));
    for (int c = 0; c < spec.channels_distant; ++c) {
        const int delay = static_cast<int>(geo.uniform_int(0, max_delay));
        const double gain = std::pow(10.0, geo.uniform(-spec.max_gain_db, spec.max_gain_db) / 20.0);
        for (std::size_t i = 0; i < clean.size(); ++i)
            u.distant_clean.samples[c][i + delay] = gain * clean[i];
    }
    u.distant = feat::add_white_noise(u.distant_clean, spec.distant_snr_db, Rng::mix(useed, 4));
    return u;
}

// ---------------------------------------------------------------------------
// Corpus generation and manifests
// ---------------------------------------------------------------------------

struct UttRecord {
    std::string id;
    std::string path;  // relative to the manifest's directory
    std::string transcript;
    feat::ArrayTag tag = feat::ArrayTag::distant;
    int channels = 0;
};

struct ToyCorpus {
    std::vector<std::string> words;
    std::vector<UttRecord> train, dev, test;
    std::string manifest_train, manifest_dev, manifest_test;
};

inline void write_manifest(const std::string& path, const std::vector<UttRecord>& rows) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("manifest: cannot open " + path);
    for (const UttRecord& r : rows)
        f << r.id << '\t' << r.path << '\t' << r.transcript << '\t' << feat::tag_name(r.tag)
          << '\t' << r.channels << '\n';
    if (!f) throw Error("manifest: short write to " + path);
}

inline std::vector<UttRecord> load_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error("manifest: cannot open " + path);
    std::vector<UttRecord> rows;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string part;
        while (std::getline(ss, part, '\t')) fields.push_back(part);
        if (fields.size() != 5)
            throw Error("manifest: " + path + ":" + std::to_string(lineno) + ": expected 5 fields, got " +
                        std::to_string(fields.size()));
        UttRecord r;
        r.id = fields[0];
        r.path = fields[1];
        r.transcript = fields[2];
        r.tag = feat::tag_from_name(fields[3]);
        try {
            r.channels = std::stoi(fields[4]);
        } catch (const std::exception&) {
            throw Error("manifest: " + path + ":" + std::to_string(lineno) + ": bad channel count '" +
                        fields[4] + "'");
        }
        if (r.channels < 1)
            throw Error("manifest: " + path + ":" + std::to_string(lineno) +
                        ": channels must be positive");
        rows.push_back(std::move(r));
    }
    return rows;
}

/// Renders the full corpus under out_dir:
///   audio/<split>/<id>.wav   16-bit PCM, one file per rendition
///   <split>.tsv              id, path, transcript, tag, channels
///   words.txt                keyword vocabulary, one per line
inline ToyCorpus gen_toy_corpus(const ToyCorpusSpec& spec, const std::string& out_dir) {
    spec.validate();
    if (out_dir.empty()) throw Error("toy corpus: output directory required");
    const std::vector<Signature> sigs = make_signatures(spec);

    ToyCorpus corpus;
    corpus.words = keyword_list(spec.n_words);

    const SetKind kinds[] = {SetKind::train, SetKind::dev, SetKind::test};
    const int counts[] = {spec.n_train, spec.n_dev, spec.n_test};
    std::vector<UttRecord>* rows[] = {&corpus.train, &corpus.dev, &corpus.test};
    std::string* manifest[] = {&corpus.manifest_train, &corpus.manifest_dev,
                               &corpus.manifest_test};

    for (int s = 0; s < 3; ++s) {
        const char* name = set_name(kinds[s]);
        std::filesystem::create_directories(out_dir + "/audio/" + name);
        for (int k = 0; k < counts[s]; ++k) {
            const RenderedUtt u = render_utterance(spec, sigs, kinds[s], k);
            char base[64];
            std::snprintf(base, sizeof base, "%s%04d", name, k);

            const std::string close_id = std::string(base) + "-close";
            const std::string distant_id = std::string(base) + "-distant";
            const std::string close_rel = "audio/" + std::string(name) + "/" + close_id + ".wav";
            const std::string distant_rel =
                "audio/" + std::string(name) + "/" + distant_id + ".wav";
            feat::write_wav(out_dir + "/" + close_rel, u.close);
            feat::write_wav(out_dir + "/" + distant_rel, u.distant);
            rows[s]->push_back(
                {close_id, close_rel, u.transcript, feat::ArrayTag::close, spec.channels_close});
            rows[s]->push_back({distant_id, distant_rel, u.transcript, feat::ArrayTag::distant,
                                spec.channels_distant});
        }
        *manifest[s] = out_dir + "/" + name + ".tsv";
        write_manifest(*manifest[s], *rows[s]);
    }

    std::ofstream words(out_dir + "/words.txt", std::ios::binary);
    if (!words) throw Error("toy corpus: cannot open " + out_dir + "/words.txt");
    for (const auto& w : corpus.words) words << w << '\n';
    return corpus;
}

}  // namespace e2e::toy
