#include <catch2/catch_amalgamated.hpp>

#include <unistd.h>

#include <filesystem>
#include <fstream>

#include "e2e/gradcheck.hpp"
#include "e2e/pipeline.hpp"
#include "e2e/recipes.hpp"

using namespace e2e;
using Catch::Matchers::ContainsSubstring;

namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& tag) {
    static std::uint64_t counter = 0;
    const fs::path p = fs::temp_directory_path() /
                       ("e2e_pipe_" + tag + "_" + std::to_string(::getpid()) + "_" +
                        std::to_string(counter++));
    fs::create_directories(p);
    return p;
}

void write_file(const fs::path& p, const std::string& text) {
    std::ofstream f(p);
    f << text;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config file format
// ---------------------------------------------------------------------------

TEST_CASE("config parses key=value lines with comments and blanks") {
    const auto c = cfg::Config::from_string(
        "# a comment\n"
        "alpha = 1\n"
        "\n"
        "beta=two words here   \n"
        "gamma = 2.5 # trailing comment\n"
        "flag = true\n",
        "inline");
    CHECK(c.get_int("alpha", 0) == 1);
    CHECK(c.get_str("beta", "") == "two words here");
    CHECK(c.get_double("gamma", 0.0) == 2.5);
    CHECK(c.get_bool("flag", false));
    CHECK(c.entries().size() == 4);
}

TEST_CASE("config later keys win and merge prefers the other side") {
    auto c = cfg::Config::from_string("k = 1\nk = 2\n", "inline");
    CHECK(c.get_int("k", 0) == 2);
    c.merge(cfg::Config::from_string("k = 3\nnew = 4\n", "inline"));
    CHECK(c.get_int("k", 0) == 3);
    CHECK(c.get_int("new", 0) == 4);
}

TEST_CASE("config reports the origin and line of a malformed row") {
    REQUIRE_THROWS_WITH(cfg::Config::from_string("a = 1\nnonsense\n", "weird.conf"),
                        ContainsSubstring("weird.conf") && ContainsSubstring("2"));
}

TEST_CASE("config typed getters validate the full value") {
    const auto c = cfg::Config::from_string(
        "i = 12x\nd = 1.5.2\nb = maybe\nok_i = -3\nok_d = -2.5e-1\nok_b = off\nu = 99\n",
        "inline");
    REQUIRE_THROWS_WITH(c.get_int("i", 0), ContainsSubstring("i") && ContainsSubstring("12x"));
    REQUIRE_THROWS_WITH(c.get_double("d", 0.0), ContainsSubstring("1.5.2"));
    REQUIRE_THROWS_WITH(c.get_bool("b", false), ContainsSubstring("maybe"));
    CHECK(c.get_int("ok_i", 0) == -3);
    CHECK(c.get_double("ok_d", 0.0) == -0.25);
    CHECK_FALSE(c.get_bool("ok_b", true));
    CHECK(c.get_u64("u", 0) == 99);
    CHECK(c.get_int("missing", 41) == 41);
    REQUIRE_THROWS_WITH(c.require_str("missing"), ContainsSubstring("missing"));
}

TEST_CASE("config survives a save/load round trip") {
    auto c = cfg::Config::from_string("a = 1\nb = hello world\n", "inline");
    const auto dir = temp_dir("conf");
    c.save((dir / "x.conf").string());
    const auto back = cfg::Config::from_file((dir / "x.conf").string());
    CHECK(back.entries() == c.entries());
    fs::remove_all(dir);
}

// ---------------------------------------------------------------------------
// Config -> component configurations
// ---------------------------------------------------------------------------

TEST_CASE("feature config scales window sizes with the sample rate") {
    const auto c = cfg::Config::from_string("sample_rate = 16000\nn_mels = 40\n", "inline");
    const auto fc = pipe::feature_config(c);
    CHECK(fc.frame_len == 400);  // 25 ms at 16 kHz
    CHECK(fc.hop == 160);        // 10 ms
    CHECK(fc.n_mels == 40);
    const auto fc8 = pipe::feature_config(cfg::Config());
    CHECK(fc8.frame_len == 200);  // defaults: 25 ms at 8 kHz
    CHECK(fc8.hop == 80);
}

TEST_CASE("model config resolves the encoder kind and dimensions") {
    const auto c = cfg::Config::from_string("encoder = res_brn\nparallel = yes\nplanes1 = 3\n",
                                            "inline");
    const auto mc = pipe::model_config(c, 9, 24);
    CHECK(mc.encoder.kind == enc::EncoderKind::res_brn);
    CHECK(mc.encoder.parallel);
    CHECK(mc.encoder.planes1 == 3);
    CHECK(mc.encoder.feats_per_channel == 24);
    CHECK(mc.n_chars == 9);
}

TEST_CASE("data options follow use_tags and default to the parallel setting") {
    auto d = pipe::data_options(cfg::Config::from_string("parallel = true\n", "inline"));
    CHECK((d.use_distant && d.use_close));
    d = pipe::data_options(cfg::Config());
    CHECK((d.use_distant && !d.use_close));
    d = pipe::data_options(cfg::Config::from_string("use_tags = close\n", "inline"));
    CHECK((!d.use_distant && d.use_close));
    REQUIRE_THROWS_WITH(pipe::data_options(cfg::Config::from_string("use_tags = x\n", "inline")),
                        ContainsSubstring("use_tags"));
    d = pipe::data_options(cfg::Config::from_string("augment = true\n", "inline"));
    CHECK(d.keep_close_audio);
}

TEST_CASE("resolved model conf materializes everything decode needs") {
    const auto base = cfg::Config::from_string("epochs = 3\n", "inline");
    model::ModelConfig mc;
    mc.encoder.kind = enc::EncoderKind::res;
    mc.encoder.parallel = true;
    mc.encoder.channels_distant = 3;
    mc.encoder.channels_close = 1;
    mc.n_chars = 9;
    const auto out = pipe::resolved_model_conf(base, mc);
    CHECK(out.get_str("encoder", "") == "res");
    CHECK(out.get_bool("parallel", false));
    CHECK(out.get_int("model_channels_distant", 0) == 3);
    CHECK(out.get_int("model_channels_close", 0) == 1);
    CHECK(out.get_int("epochs", 0) == 3);  // training keys kept for provenance
    // Rebuilding from the resolved config reproduces the model shape.
    const auto mc2 = pipe::model_config(out, 9, pipe::feature_config(out).feats_per_channel());
    CHECK(mc2.encoder.kind == mc.encoder.kind);
    CHECK(mc2.encoder.channels_distant == 3);
    CHECK(mc2.encoder.channels_close == 1);
}

// ---------------------------------------------------------------------------
// Hypothesis/reference file handling
// ---------------------------------------------------------------------------

TEST_CASE("split_tsv preserves empty fields") {
    CHECK(pipe::split_tsv("a\tb\tc") == std::vector<std::string>{"a", "b", "c"});
    CHECK(pipe::split_tsv("a\t") == std::vector<std::string>{"a", ""});
    CHECK(pipe::split_tsv("") == std::vector<std::string>{""});
    CHECK(pipe::split_tsv("\tx") == std::vector<std::string>{"", "x"});
}

TEST_CASE("read_trn accepts two-column rows, empty hypotheses and manifests") {
    const auto dir = temp_dir("trn");
    write_file(dir / "h.tsv", "u1\thello there\nu2\t\n\nu3\tx\n");
    auto rows = pipe::read_trn((dir / "h.tsv").string());
    REQUIRE(rows.size() == 3);
    CHECK(rows[0] == std::pair<std::string, std::string>{"u1", "hello there"});
    CHECK(rows[1].second.empty());

    write_file(dir / "m.tsv", "u1\taudio/u1.wav\tab cd\tclose\t2\n");
    rows = pipe::read_trn((dir / "m.tsv").string());
    REQUIRE(rows.size() == 1);
    CHECK(rows[0] == std::pair<std::string, std::string>{"u1", "ab cd"});

    // Bare transcripts (no tab) pair line by line via synthetic "#n" ids.
    write_file(dir / "r.txt", "a b c\n");
    write_file(dir / "hy.txt", "a c\n");
    rows = pipe::read_trn((dir / "r.txt").string());
    REQUIRE(rows.size() == 1);
    CHECK(rows[0] == std::pair<std::string, std::string>{"#1", "a b c"});
    const auto sr = pipe::score_files((dir / "r.txt").string(), (dir / "hy.txt").string());
    CHECK(sr.word.pct() == Catch::Approx(100.0 / 3.0));

    write_file(dir / "bad.tsv", "u1\ta\tb\n");
    REQUIRE_THROWS_WITH(pipe::read_trn((dir / "bad.tsv").string()),
                        ContainsSubstring("bad.tsv:1"));
    fs::remove_all(dir);
}

TEST_CASE("score_files joins by id and flags missing references") {
    const auto dir = temp_dir("score");
    write_file(dir / "ref.tsv", "u2\ta b c\nu1\tx y\nu3\tunused row\n");
    write_file(dir / "hyp.tsv", "u1\tx y\nu2\ta c\n");
    const auto sr = pipe::score_files((dir / "ref.tsv").string(), (dir / "hyp.tsv").string());
    CHECK(sr.utterances == 2);
    CHECK(sr.word.ref_tokens == 5);
    CHECK(sr.word.del == 1);
    CHECK(sr.wer() == Catch::Approx(20.0));

    write_file(dir / "hyp2.tsv", "nosuch\tz\n");
    REQUIRE_THROWS_WITH(
        pipe::score_files((dir / "ref.tsv").string(), (dir / "hyp2.tsv").string()),
        ContainsSubstring("nosuch"));
    fs::remove_all(dir);
}

// ---------------------------------------------------------------------------
// Dataset loading, channel subsetting, caching, CMVN
// ---------------------------------------------------------------------------

namespace {

/// Writes a miniature two-utterance corpus (close 2ch + distant 3ch) and
/// returns its directory.
fs::path mini_corpus() {
    const auto dir = temp_dir("data");
    fs::create_directories(dir / "audio");
    Rng rng(3);
    auto make_wav = [&](const std::string& name, int channels, int n) {
        feat::Waveform w;
        w.sample_rate = 8000;
        w.samples.resize(channels);
        for (auto& ch : w.samples) {
            ch.resize(n);
            for (double& x : ch) x = 0.25 * rng.uniform(-1.0, 1.0);
        }
        feat::write_wav((dir / "audio" / name).string(), w);
    };
    make_wav("u1-close.wav", 2, 2400);
    make_wav("u1-distant.wav", 3, 2400);
    make_wav("u2-close.wav", 2, 3200);
    make_wav("u2-distant.wav", 3, 3200);
    write_file(dir / "set.tsv",
               "u1-close\taudio/u1-close.wav\tab\tclose\t2\n"
               "u1-distant\taudio/u1-distant.wav\tab\tdistant\t3\n"
               "u2-close\taudio/u2-close.wav\tba\tclose\t2\n"
               "u2-distant\taudio/u2-distant.wav\tba\tdistant\t3\n");
    return dir;
}

}  // namespace

TEST_CASE("load_dataset extracts per-row features with tag filtering") {
    const auto dir = mini_corpus();
    const vocab::Charset cs = vocab::Charset::from_transcripts({"ab", "ba"});
    feat::FeatureConfig fc;
    fc.frame_len = 200;
    fc.hop = 80;
    fc.n_mels = 8;

    pipe::DataOptions opt;  // defaults: both tags
    auto ds = pipe::load_dataset((dir / "set.tsv").string(), cs, fc, opt);
    REQUIRE(ds.utts.size() == 4);
    CHECK(ds.utts[0].id == "u1-close");
    CHECK(ds.utts[0].channels == 2);
    CHECK(ds.utts[0].feats.dim(1) == 16);  // 2 channels x 8 mels
    CHECK(ds.utts[1].channels == 3);
    CHECK(ds.utts[1].feats.dim(1) == 24);
    CHECK(ds.utts[0].target == cs.encode("ab"));
    CHECK_FALSE(ds.utts[0].audio.has_value());

    opt.use_close = false;
    ds = pipe::load_dataset((dir / "set.tsv").string(), cs, fc, opt);
    REQUIRE(ds.utts.size() == 2);
    CHECK(ds.utts[0].tag == feat::ArrayTag::distant);

    opt.use_close = true;
    opt.use_distant = false;
    opt.keep_close_audio = true;
    ds = pipe::load_dataset((dir / "set.tsv").string(), cs, fc, opt);
    REQUIRE(ds.utts.size() == 2);
    REQUIRE(ds.utts[0].audio.has_value());
    CHECK(ds.utts[0].audio->channels() == 2);
    fs::remove_all(dir);
}

TEST_CASE("channel subsetting keeps the first k channels and resizes features") {
    const auto dir = mini_corpus();
    const vocab::Charset cs = vocab::Charset::from_transcripts({"ab", "ba"});
    feat::FeatureConfig fc;
    fc.frame_len = 200;
    fc.hop = 80;
    fc.n_mels = 8;

    pipe::DataOptions opt;
    opt.distant_channels = 1;
    auto ds = pipe::load_dataset((dir / "set.tsv").string(), cs, fc, opt);
    CHECK(ds.utts[1].channels == 1);
    CHECK(ds.utts[1].feats.dim(1) == 8);
    CHECK(ds.utts[0].channels == 2);  // close untouched

    // Truncation equals extracting from the waveform's first channel.
    feat::Waveform w = feat::read_wav((dir / "audio/u1-distant.wav").string());
    w.samples.resize(1);
    const ad::Tensor want = feat::extract_features(w, feat::ArrayTag::distant, fc).frames;
    CHECK(ds.utts[1].feats.v == want.v);

    // Requesting more channels than present is a no-op.
    feat::Waveform big = pipe::take_channels(feat::read_wav((dir / "audio/u1-close.wav").string()), 5);
    CHECK(big.channels() == 2);
    fs::remove_all(dir);
}

TEST_CASE("feature cache round trips bit-exactly and is keyed by channels") {
    const auto dir = mini_corpus();
    const vocab::Charset cs = vocab::Charset::from_transcripts({"ab", "ba"});
    feat::FeatureConfig fc;
    fc.frame_len = 200;
    fc.hop = 80;
    fc.n_mels = 8;

    pipe::DataOptions opt;
    opt.cache_dir = (dir / "cache").string();
    const auto fresh = pipe::load_dataset((dir / "set.tsv").string(), cs, fc, opt);
    CHECK(fs::exists(dir / "cache/u1-close.feat"));
    const auto cached = pipe::load_dataset((dir / "set.tsv").string(), cs, fc, opt);
    REQUIRE(cached.utts.size() == fresh.utts.size());
    for (std::size_t i = 0; i < fresh.utts.size(); ++i) {
        CHECK(cached.utts[i].feats.v == fresh.utts[i].feats.v);
        CHECK(cached.utts[i].channels == fresh.utts[i].channels);
    }

    pipe::DataOptions sub = opt;
    sub.distant_channels = 1;
    const auto ds1 = pipe::load_dataset((dir / "set.tsv").string(), cs, fc, sub);
    CHECK(fs::exists(dir / "cache/u1-distant-ch1.feat"));  // distinct cache entry
    CHECK(ds1.utts[1].feats.dim(1) == 8);
    fs::remove_all(dir);
}

TEST_CASE("per-tag cmvn normalizes, persists, and refuses missing tags") {
    const auto dir = mini_corpus();
    const vocab::Charset cs = vocab::Charset::from_transcripts({"ab", "ba"});
    feat::FeatureConfig fc;
    fc.frame_len = 200;
    fc.hop = 80;
    fc.n_mels = 8;
    pipe::DataOptions opt;
    auto ds = pipe::load_dataset((dir / "set.tsv").string(), cs, fc, opt);

    const pipe::TagCmvn stats = pipe::compute_cmvn(ds);
    REQUIRE(stats.distant.has_value());
    REQUIRE(stats.close.has_value());
    CHECK(stats.distant->sum.size() == 24);
    CHECK(stats.close->sum.size() == 16);

    auto normed = ds;
    pipe::apply_cmvn(normed, stats);
    // Pooled statistics of the normalized features are ~zero-mean, unit-var.
    feat::CmvnStats after;
    for (const auto& u : normed.utts)
        if (u.tag == feat::ArrayTag::close) {
            feat::FeatureSequence f;
            f.frames = u.feats;
            f.tag = u.tag;
            after.add(f);
        }
    for (int d = 0; d < 16; ++d) {
        CHECK(std::abs(after.mean(d)) < 1e-9);
        CHECK(after.variance(d) == Catch::Approx(1.0).margin(1e-6));
    }
    REQUIRE(normed.cmvn.has_value());  // close stats retained for augmentation

    const auto path = (dir / "cmvn.stats").string();
    pipe::save_cmvn(path, stats);
    const pipe::TagCmvn back = pipe::load_cmvn(path);
    REQUIRE(back.distant.has_value());
    CHECK(back.distant->sum == stats.distant->sum);
    CHECK(back.distant->sumsq == stats.distant->sumsq);
    CHECK(back.close->count == stats.close->count);

    pipe::TagCmvn only_close;
    only_close.close = *stats.close;
    REQUIRE_THROWS_WITH(pipe::apply_cmvn(ds, only_close), ContainsSubstring("distant"));
    fs::remove_all(dir);
}

TEST_CASE("infer_channels sizes branches from the data") {
    const auto dir = mini_corpus();
    const vocab::Charset cs = vocab::Charset::from_transcripts({"ab", "ba"});
    feat::FeatureConfig fc;
    fc.frame_len = 200;
    fc.hop = 80;
    fc.n_mels = 8;
    pipe::DataOptions opt;
    const auto ds = pipe::load_dataset((dir / "set.tsv").string(), cs, fc, opt);

    model::ModelConfig mc;
    mc.encoder.parallel = true;
    pipe::infer_channels(ds, mc);
    CHECK(mc.encoder.channels_distant == 3);
    CHECK(mc.encoder.channels_close == 2);

    model::ModelConfig single;
    single.encoder.parallel = false;
    REQUIRE_THROWS_WITH(pipe::infer_channels(ds, single), ContainsSubstring("channel"));

    pipe::DataOptions close_only;
    close_only.use_distant = false;
    const auto ds2 = pipe::load_dataset((dir / "set.tsv").string(), cs, fc, close_only);
    pipe::infer_channels(ds2, single);
    CHECK(single.encoder.channels_distant == 2);
    fs::remove_all(dir);
}

// ---------------------------------------------------------------------------
// Gradient-check suite
// ---------------------------------------------------------------------------

TEST_CASE("layer gradient suite passes on a single draw per layer") {
    const auto checks = diag::run_layer_checks(1);
    REQUIRE(checks.size() == 9);
    std::vector<std::string> names;
    for (const auto& c : checks) {
        names.push_back(c.layer);
        INFO(c.layer << " worst " << c.worst);
        CHECK(c.passed());
        CHECK(c.seeds == 1);
    }
    CHECK(std::find(names.begin(), names.end(), "attention") != names.end());
    CHECK(std::find(names.begin(), names.end(), "ctc") != names.end());
    REQUIRE_THROWS_AS(diag::run_layer_checks(0), Error);
}

// ---------------------------------------------------------------------------
// LM pack persistence
// ---------------------------------------------------------------------------

TEST_CASE("lm pack save/load round trips scores exactly") {
    const std::vector<std::string> texts{"ab cd", "cd ab", "ab ab", "cd"};
    const vocab::Charset cs = vocab::Charset::from_transcripts(texts);
    auto conf = cfg::Config::from_string("lm_emb = 4\nlm_hidden = 6\nlm_layers = 1\nlm_epochs = 2\n",
                                         "inline");
    auto pack = recipes::train_lms(texts, cs, conf);

    const auto dir = temp_dir("lm");
    recipes::save_lms(*pack, cs, conf, dir.string());
    auto back = recipes::load_lms(dir.string(), cs);

    // Multilevel scoring of a few label sequences matches the original pack.
    for (const std::vector<int>& ids :
         {cs.encode("ab cd"), cs.encode("cd"), cs.encode("ba")}) {
        CHECK(pack->ml.score_sequence(ids) ==
              Catch::Approx(back->ml.score_sequence(ids)).margin(1e-12));
    }

    // A mismatched charset is rejected.
    const vocab::Charset other = vocab::Charset::from_transcripts({"xy z"});
    REQUIRE_THROWS_WITH(recipes::load_lms(dir.string(), other), ContainsSubstring("charset"));
    fs::remove_all(dir);
}
