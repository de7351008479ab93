#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "e2e/toy_corpus.hpp"

using namespace e2e;
using Catch::Matchers::WithinAbs;

namespace {

toy::ToyCorpusSpec tiny_spec() {
    toy::ToyCorpusSpec s;
    s.n_words = 10;
    s.min_words = 1;
    s.max_words = 2;
    s.n_train = 4;
    s.n_dev = 2;
    s.n_test = 2;
    s.seed = 11;
    return s;
}

std::string temp_dir(const std::string& tag) {
    auto p = std::filesystem::temp_directory_path() / ("e2e_corpus_" + tag);
    std::filesystem::remove_all(p);
    return p.string();
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

/// Brute-force normalized cross-correlation peak over all integer lags.
double xcorr_peak_naive(const std::vector<double>& a, const std::vector<double>& b) {
    const int la = static_cast<int>(a.size()), lb = static_cast<int>(b.size());
    double ea = 0.0, eb = 0.0;
    for (double x : a) ea += x * x;
    for (double x : b) eb += x * x;
    double peak = 0.0;
    for (int lag = -(lb - 1); lag <= la - 1; ++lag) {
        double c = 0.0;
        for (int j = 0; j < lb; ++j) {
            const int i = j + lag;
            if (i >= 0 && i < la) c += a[i] * b[j];
        }
        peak = std::max(peak, std::abs(c));
    }
    return peak / std::sqrt(ea * eb);
}

}  // namespace

TEST_CASE("keyword inventory is distinct and keeps the character set small") {
    const auto& all = toy::master_words();
    REQUIRE(all.size() == 20);
    std::set<std::string> uniq(all.begin(), all.end());
    CHECK(uniq.size() == all.size());

    std::set<char> chars{' '};
    for (const auto& w : all) {
        REQUIRE(!w.empty());
        for (char c : w) {
            CHECK(c >= 'a');
            CHECK(c <= 'h');
            chars.insert(c);
        }
    }
    CHECK(chars.size() <= 15);  // character budget including the delimiter

    const auto twelve = toy::keyword_list(12);
    REQUIRE(twelve.size() == 12);
    CHECK(std::equal(twelve.begin(), twelve.end(), all.begin()));
    REQUIRE_THROWS(toy::keyword_list(0));
    REQUIRE_THROWS(toy::keyword_list(21));
}

TEST_CASE("normalized cross-correlation peak matches a brute-force oracle") {
    SECTION("identical and scaled signals correlate to 1") {
        Rng rng(3);
        std::vector<double> a(257);
        for (double& x : a) x = rng.gaussian();
        CHECK_THAT(toy::normalized_xcorr_peak(a, a), WithinAbs(1.0, 1e-9));
        std::vector<double> b = a;
        for (double& x : b) x *= 3.0;
        CHECK_THAT(toy::normalized_xcorr_peak(a, b), WithinAbs(1.0, 1e-9));
    }

    SECTION("a shifted copy still correlates to 1") {
        Rng rng(4);
        std::vector<double> a(200);
        for (double& x : a) x = rng.gaussian();
        std::vector<double> shifted(100, 0.0);
        shifted.insert(shifted.end(), a.begin(), a.end());
        CHECK_THAT(toy::normalized_xcorr_peak(a, shifted), WithinAbs(1.0, 1e-9));
    }

    SECTION("distinct tones are weakly correlated") {
        const int n = 4000;
        std::vector<double> a(n), b(n);
        for (int i = 0; i < n; ++i) {
            a[i] = std::sin(6.283185307179586 * 300.0 * i / 8000.0);
            b[i] = std::sin(6.283185307179586 * 700.0 * i / 8000.0);
        }
        CHECK(toy::normalized_xcorr_peak(a, b) < 0.3);
    }

    SECTION("FFT path equals the naive all-lags scan") {
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            Rng rng(100 + seed);
            std::vector<double> a(static_cast<std::size_t>(rng.uniform_int(3, 32)));
            std::vector<double> b(static_cast<std::size_t>(rng.uniform_int(3, 32)));
            for (double& x : a) x = rng.gaussian();
            for (double& x : b) x = rng.gaussian();
            CHECK_THAT(toy::normalized_xcorr_peak(a, b),
                       WithinAbs(xcorr_peak_naive(a, b), 1e-9));
        }
    }

    SECTION("degenerate inputs are rejected") {
        REQUIRE_THROWS(toy::normalized_xcorr_peak({}, {1.0}));
        REQUIRE_THROWS(toy::normalized_xcorr_peak({0.0, 0.0}, {1.0}));
    }
}

TEST_CASE("signatures are deterministic, bounded, and pairwise distinguishable") {
    toy::ToyCorpusSpec spec = tiny_spec();
    spec.n_words = 12;
    const auto sigs = toy::make_signatures(spec);
    REQUIRE(sigs.size() == 12);

    for (const auto& s : sigs) {
        const int lo = static_cast<int>(spec.word_min_s * spec.sample_rate);
        const int hi = static_cast<int>(spec.word_max_s * spec.sample_rate);
        CHECK(static_cast<int>(s.samples.size()) >= lo - 1);
        CHECK(static_cast<int>(s.samples.size()) <= hi + 1);
        double peak = 0.0;
        for (double x : s.samples) peak = std::max(peak, std::abs(x));
        CHECK_THAT(peak, WithinAbs(0.25, 1e-9));
    }
    for (std::size_t i = 0; i < sigs.size(); ++i)
        for (std::size_t j = i + 1; j < sigs.size(); ++j)
            CHECK(toy::normalized_xcorr_peak(sigs[i].samples, sigs[j].samples) < spec.max_xcorr);

    const auto again = toy::make_signatures(spec);
    for (std::size_t i = 0; i < sigs.size(); ++i) CHECK(again[i].samples == sigs[i].samples);

    SECTION("an unsatisfiable confusability bound is reported") {
        toy::ToyCorpusSpec strict = spec;
        strict.max_xcorr = 1e-6;
        REQUIRE_THROWS_WITH(toy::make_signatures(strict),
                            Catch::Matchers::ContainsSubstring("distinguishable"));
    }

    SECTION("spec validation") {
        toy::ToyCorpusSpec bad = spec;
        bad.n_words = 9;
        REQUIRE_THROWS(toy::make_signatures(bad));
        bad = spec;
        bad.n_words = 21;
        REQUIRE_THROWS(bad.validate());
        bad = spec;
        bad.max_words = 0;
        REQUIRE_THROWS(bad.validate());
        bad = spec;
        bad.sample_rate = 4000;
        REQUIRE_THROWS(bad.validate());
        bad = spec;
        bad.max_xcorr = 0.0;
        REQUIRE_THROWS(bad.validate());
    }
}

TEST_CASE("rendered utterances hit the array geometry and SNR contracts") {
    const toy::ToyCorpusSpec spec = tiny_spec();
    const auto sigs = toy::make_signatures(spec);

    const toy::RenderedUtt u = toy::render_utterance(spec, sigs, toy::SetKind::train, 0);
    const toy::RenderedUtt v = toy::render_utterance(spec, sigs, toy::SetKind::train, 0);

    SECTION("rendering is deterministic") {
        CHECK(u.transcript == v.transcript);
        CHECK(u.close.samples == v.close.samples);
        CHECK(u.distant.samples == v.distant.samples);
    }

    SECTION("shape and transcript structure") {
        REQUIRE(!u.word_ids.empty());
        CHECK(static_cast<int>(u.word_ids.size()) >= spec.min_words);
        CHECK(static_cast<int>(u.word_ids.size()) <= spec.max_words);
        const auto words = toy::keyword_list(spec.n_words);
        std::string expect;
        for (std::size_t i = 0; i < u.word_ids.size(); ++i) {
            if (i) expect += ' ';
            expect += words[u.word_ids[i]];
        }
        CHECK(u.transcript == expect);

        CHECK(u.close.channels() == spec.channels_close);
        CHECK(u.distant.channels() == spec.channels_distant);
        const int max_delay = static_cast<int>(spec.max_delay_ms * 1e-3 * spec.sample_rate);
        CHECK(u.distant.length() == u.close.length() + max_delay);
        CHECK(u.close_clean.samples[0] == u.close_clean.samples[1]);  // same source signal
    }

    SECTION("noise injection hits the target SNR before quantization") {
        CHECK_THAT(feat::measure_snr(u.close_clean, u.close), WithinAbs(spec.close_snr_db, 1e-6));
        CHECK_THAT(feat::measure_snr(u.distant_clean, u.distant),
                   WithinAbs(spec.distant_snr_db, 1e-6));
    }

    SECTION("per-channel delay and gain jitter stay inside their bounds") {
        const int max_delay = static_cast<int>(spec.max_delay_ms * 1e-3 * spec.sample_rate);
        auto first_nonzero = [](const std::vector<double>& x) {
            for (std::size_t i = 0; i < x.size(); ++i)
                if (x[i] != 0.0) return static_cast<int>(i);
            return -1;
        };
        const int base = first_nonzero(u.close_clean.samples[0]);
        REQUIRE(base > 0);
        const double lo_gain = std::pow(10.0, -spec.max_gain_db / 20.0);
        const double hi_gain = std::pow(10.0, spec.max_gain_db / 20.0);
        for (int c = 0; c < spec.channels_distant; ++c) {
            const int delay = first_nonzero(u.distant_clean.samples[c]) - base;
            CHECK(delay >= 0);
            CHECK(delay <= max_delay);
            double peak = 0.0;
            for (double x : u.distant_clean.samples[c]) peak = std::max(peak, std::abs(x));
            const double gain = peak / 0.25;  // clean renditions peak at 0.25
            CHECK(gain >= lo_gain - 1e-9);
            CHECK(gain <= hi_gain + 1e-9);
        }
    }
}

TEST_CASE("gen_toy_corpus writes a complete, reproducible corpus") {
    const toy::ToyCorpusSpec spec = tiny_spec();
    const std::string dir = temp_dir("gen");
    const toy::ToyCorpus c = toy::gen_toy_corpus(spec, dir);

    REQUIRE(c.train.size() == 2 * static_cast<std::size_t>(spec.n_train));
    REQUIRE(c.dev.size() == 2 * static_cast<std::size_t>(spec.n_dev));
    REQUIRE(c.test.size() == 2 * static_cast<std::size_t>(spec.n_test));

    SECTION("manifest rows describe real files and cover them exactly once") {
        std::set<std::string> ids;
        std::set<std::string> manifest_paths;
        for (const auto* rows : {&c.train, &c.dev, &c.test}) {
            for (const auto& r : *rows) {
                CHECK(ids.insert(r.id).second);
                CHECK(manifest_paths.insert(r.path).second);
                REQUIRE(std::filesystem::exists(dir + "/" + r.path));
                const feat::Waveform w = feat::read_wav(dir + "/" + r.path);
                CHECK(w.channels() == r.channels);
                CHECK(w.sample_rate == spec.sample_rate);
                CHECK(!r.transcript.empty());
            }
        }
        std::set<std::string> disk;
        for (const auto& e : std::filesystem::recursive_directory_iterator(dir + "/audio"))
            if (e.is_regular_file())
                disk.insert(std::filesystem::relative(e.path(), dir).generic_string());
        CHECK(disk == manifest_paths);
    }

    SECTION("both renditions share an utterance and manifests round-trip") {
        for (std::size_t i = 0; i + 1 < c.train.size(); i += 2) {
            CHECK(c.train[i].tag == feat::ArrayTag::close);
            CHECK(c.train[i + 1].tag == feat::ArrayTag::distant);
            CHECK(c.train[i].transcript == c.train[i + 1].transcript);
            CHECK(c.train[i].channels == spec.channels_close);
            CHECK(c.train[i + 1].channels == spec.channels_distant);
        }
        const auto loaded = toy::load_manifest(c.manifest_train);
        REQUIRE(loaded.size() == c.train.size());
        for (std::size_t i = 0; i < loaded.size(); ++i) {
            CHECK(loaded[i].id == c.train[i].id);
            CHECK(loaded[i].path == c.train[i].path);
            CHECK(loaded[i].transcript == c.train[i].transcript);
            CHECK(loaded[i].tag == c.train[i].tag);
            CHECK(loaded[i].channels == c.train[i].channels);
        }

        std::ifstream words(dir + "/words.txt");
        std::vector<std::string> lines;
        std::string w;
        while (std::getline(words, w))
            if (!w.empty()) lines.push_back(w);
        CHECK(lines == toy::keyword_list(spec.n_words));
    }

    SECTION("the distant files land within 1 dB of the requested SNR") {
        const auto sigs = toy::make_signatures(spec);
        for (int k = 0; k < spec.n_train; ++k) {
            const toy::RenderedUtt u =
                toy::render_utterance(spec, sigs, toy::SetKind::train, k);
            const std::string tmp = dir + "/ref_clean.wav";
            feat::write_wav(tmp, u.distant_clean);
            const feat::Waveform clean_q = feat::read_wav(tmp);
            const feat::Waveform noisy_q = feat::read_wav(dir + "/" + c.train[2 * k + 1].path);
            CHECK_THAT(feat::measure_snr(clean_q, noisy_q),
                       WithinAbs(spec.distant_snr_db, 1.0));

            feat::write_wav(tmp, u.close_clean);
            const feat::Waveform close_clean_q = feat::read_wav(tmp);
            const feat::Waveform close_q = feat::read_wav(dir + "/" + c.train[2 * k].path);
            CHECK_THAT(feat::measure_snr(close_clean_q, close_q),
                       WithinAbs(spec.close_snr_db, 1.0));
        }
        std::filesystem::remove(dir + "/ref_clean.wav");
    }

    SECTION("the same seed reproduces every byte; a new seed does not") {
        const std::string dir2 = temp_dir("gen_again");
        toy::gen_toy_corpus(spec, dir2);
        std::vector<std::string> rel;
        for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
            if (e.is_regular_file())
                rel.push_back(std::filesystem::relative(e.path(), dir).generic_string());
        std::sort(rel.begin(), rel.end());
        REQUIRE(!rel.empty());
        for (const auto& r : rel) {
            REQUIRE(std::filesystem::exists(dir2 + "/" + r));
            CHECK(slurp(dir + "/" + r) == slurp(dir2 + "/" + r));
        }

        toy::ToyCorpusSpec other = spec;
        other.seed = 12;
        const std::string dir3 = temp_dir("gen_other");
        const toy::ToyCorpus c3 = toy::gen_toy_corpus(other, dir3);
        CHECK(slurp(dir + "/" + c.train[0].path) != slurp(dir3 + "/" + c3.train[0].path));
        std::filesystem::remove_all(dir2);
        std::filesystem::remove_all(dir3);
    }

    std::filesystem::remove_all(dir);
}

TEST_CASE("manifest loading rejects malformed rows") {
    const std::string dir = temp_dir("manifest");
    std::filesystem::create_directories(dir);
    const std::string path = dir + "/bad.tsv";

    REQUIRE_THROWS(toy::load_manifest(dir + "/missing.tsv"));

    {
        std::ofstream f(path);
        f << "id1\tau.wav\thello there\tclose\t2\n";
        f << "id2\tau2.wav\thi\tdistant\n";  // four fields only
    }
    REQUIRE_THROWS_WITH(toy::load_manifest(path), Catch::Matchers::ContainsSubstring(":2"));

    {
        std::ofstream f(path);
        f << "id1\ta.wav\thello\tsideways\t2\n";  // unknown tag
    }
    REQUIRE_THROWS(toy::load_manifest(path));

    {
        std::ofstream f(path);
        f << "id1\ta.wav\thello\tclose\tzero\n";  // non-numeric channels
    }
    REQUIRE_THROWS_WITH(toy::load_manifest(path), Catch::Matchers::ContainsSubstring("channel"));

    {
        std::ofstream f(path);
        f << "id1\ta.wav\thello\tclose\t0\n";  // degenerate channels
    }
    REQUIRE_THROWS(toy::load_manifest(path));

    {
        std::ofstream f(path);
        f << "id1\ta.wav\thello world\tclose\t2\n\n";
        f << "id2\tb.wav\tbye\tdistant\t4\n";
    }
    const auto rows = toy::load_manifest(path);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].transcript == "hello world");
    CHECK(rows[1].channels == 4);

    std::filesystem::remove_all(dir);
}
