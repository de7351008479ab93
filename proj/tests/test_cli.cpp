// Smoke tests for the command-line tool.  They spawn the real binary (its
// path arrives in $E2E_TOOL) and drive the documented workflows end to end
// on a miniature corpus: generation, feature extraction, training, language
// model training, decoding, scoring and the self-check commands.
#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

using Catch::Matchers::ContainsSubstring;

namespace {

namespace fs = std::filesystem;

std::string tool_path() {
    const char* p = std::getenv("E2E_TOOL");
    REQUIRE(p != nullptr);
    return p;
}

fs::path temp_dir(const std::string& tag) {
    static std::uint64_t counter = 0;
    const fs::path p = fs::temp_directory_path() /
                       ("e2e_cli_" + tag + "_" + std::to_string(::getpid()) + "_" +
                        std::to_string(counter++));
    fs::create_directories(p);
    return p;
}

void write_file(const fs::path& p, const std::string& text) {
    std::ofstream f(p);
    f << text;
}

std::string read_file(const fs::path& p) {
    std::ifstream f(p);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

struct RunResult {
    int status = -1;
    std::string out;
    std::string err;
};

/// Runs `e2e <args>` with stdout/stderr captured to files.
RunResult run_tool(const std::string& args) {
    const fs::path dir = temp_dir("run");
    const fs::path outp = dir / "out.txt";
    const fs::path errp = dir / "err.txt";
    const std::string cmd =
        tool_path() + " " + args + " > " + outp.string() + " 2> " + errp.string();
    const int rc = std::system(cmd.c_str());
    RunResult r;
    REQUIRE(rc != -1);
    r.status = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    r.out = read_file(outp);
    r.err = read_file(errp);
    fs::remove_all(dir);
    return r;
}

/// metrics.csv with the wall-clock column blanked out, for determinism
/// comparisons (timings legitimately differ between runs).
std::string metrics_without_wall(const fs::path& csv) {
    std::ifstream f(csv);
    std::string line, out;
    while (std::getline(f, line)) {
        const auto pos = line.rfind(',');
        REQUIRE(pos != std::string::npos);
        out += line.substr(0, pos);
        out += '\n';
    }
    return out;
}

/// A shared miniature corpus + config, generated once per test process.
struct Mini {
    fs::path dir;
    fs::path conf;
    fs::path corpus;
};

const Mini& mini() {
    static Mini m = [] {
        Mini mm;
        mm.dir = temp_dir("mini");
        mm.conf = mm.dir / "toy.conf";
        mm.corpus = mm.dir / "corpus";
        write_file(mm.conf,
                   "n_words = 10\n"
                   "min_words = 1\n"
                   "max_words = 2\n"
                   "n_train = 24\n"
                   "n_dev = 6\n"
                   "n_test = 6\n"
                   "sample_rate = 8000\n"
                   "seed = 5\n"
                   "n_mels = 16\n"
                   "planes1 = 4\n"
                   "planes2 = 8\n"
                   "rnn_layers = 1\n"
                   "rnn_cells = 24\n"
                   "rnn_proj = 24\n"
                   "emb_dim = 12\n"
                   "dec_hidden = 24\n"
                   "att_dim = 16\n"
                   "att_filters = 3\n"
                   "att_width = 9\n"
                   "epochs = 2\n"
                   "batch_size = 8\n"
                   "beam = 4\n");
        const auto r = run_tool("gen-corpus --config " + mm.conf.string() + " --out " +
                                mm.corpus.string());
        REQUIRE(r.status == 0);
        return mm;
    }();
    return m;
}

}  // namespace

TEST_CASE("cli: score matches the hand-checked fixtures") {
    const auto dir = temp_dir("score");
    write_file(dir / "r.txt", "a b c\n");
    write_file(dir / "h_del.txt", "a c\n");
    write_file(dir / "h_sub.txt", "a x c\n");

    auto r = run_tool("score --ref " + (dir / "r.txt").string() + " --hyp " +
                      (dir / "h_del.txt").string());
    CHECK(r.status == 0);
    CHECK_THAT(r.out, ContainsSubstring("WER 33.33"));
    CHECK_THAT(r.out, ContainsSubstring("del 1"));

    r = run_tool("score --ref " + (dir / "r.txt").string() + " --hyp " +
                 (dir / "h_sub.txt").string());
    CHECK(r.status == 0);
    CHECK_THAT(r.out, ContainsSubstring("WER 33.33"));
    CHECK_THAT(r.out, ContainsSubstring("sub 1"));
    fs::remove_all(dir);
}

TEST_CASE("cli: unknown flags report usage and exit 2") {
    auto r = run_tool("score --ref a --hyp b --frobnicate");
    CHECK(r.status == 2);
    CHECK_THAT(r.err, ContainsSubstring("--frobnicate"));
    CHECK_THAT(r.err, ContainsSubstring("Usage"));

    // ...even when another parse error (missing required flag) fires too.
    r = run_tool("decode --whatever");
    CHECK(r.status == 2);
    CHECK_THAT(r.err, ContainsSubstring("--whatever"));
    CHECK_THAT(r.err, ContainsSubstring("Usage"));
}

TEST_CASE("cli: bad config values fail naming the key") {
    const auto dir = temp_dir("badconf");
    write_file(dir / "bad.conf", "epochs = banana\n");
    const auto r = run_tool("train --config " + (dir / "bad.conf").string() + " --corpus " +
                            mini().corpus.string() + " --out " + (dir / "m").string());
    CHECK(r.status == 1);
    CHECK_THAT(r.err, ContainsSubstring("epochs"));
    fs::remove_all(dir);
}

TEST_CASE("cli: gen-corpus writes manifests and playable audio") {
    const auto& m = mini();
    REQUIRE(fs::exists(m.corpus / "train.tsv"));
    REQUIRE(fs::exists(m.corpus / "dev.tsv"));
    REQUIRE(fs::exists(m.corpus / "test.tsv"));
    std::ifstream f(m.corpus / "train.tsv");
    std::string line;
    int rows = 0, close_rows = 0, distant_rows = 0;
    while (std::getline(f, line)) {
        ++rows;
        if (line.find("\tclose\t") != std::string::npos) ++close_rows;
        if (line.find("\tdistant\t") != std::string::npos) ++distant_rows;
    }
    CHECK(rows == 2 * 24);  // one close + one distant rendition per utterance
    CHECK(close_rows == 24);
    CHECK(distant_rows == 24);
}

TEST_CASE("cli: train/decode/score round trip with cached features") {
    const auto& m = mini();
    const auto dir = temp_dir("roundtrip");

    // Pre-extract features, then train twice with the same seed: once from the
    // cache and once from raw audio.  Artifacts must match bit for bit.
    auto r = run_tool("extract-features --config " + m.conf.string() + " --manifest " +
                      (m.corpus / "train.tsv").string() + " --out " + (dir / "cache").string());
    REQUIRE(r.status == 0);

    const std::string base = "train --config " + m.conf.string() + " --corpus " +
                             m.corpus.string() + " --seed 7";
    r = run_tool(base + " --out " + (dir / "m1").string());
    REQUIRE(r.status == 0);
    CHECK_THAT(r.out, ContainsSubstring("dev_cer"));
    r = run_tool(base + " --out " + (dir / "m2").string() + " --set cache_dir=" +
                 (dir / "cache").string());
    REQUIRE(r.status == 0);

    const auto m1 = metrics_without_wall(dir / "m1" / "metrics.csv");
    const auto m2 = metrics_without_wall(dir / "m2" / "metrics.csv");
    CHECK(m1 == m2);
    CHECK(read_file(dir / "m1" / "best.ckpt") == read_file(dir / "m2" / "best.ckpt"));
    REQUIRE(fs::exists(dir / "m1" / "model.conf"));
    REQUIRE(fs::exists(dir / "m1" / "charset.txt"));
    REQUIRE(fs::exists(dir / "m1" / "cmvn.stats"));

    // Decode the test manifest and score it against itself: exit 0, TSV rows.
    r = run_tool("decode --model " + (dir / "m1").string() + " --manifest " +
                 (m.corpus / "test.tsv").string() + " --out " + (dir / "hyp.tsv").string());
    REQUIRE(r.status == 0);
    std::ifstream hyp(dir / "hyp.tsv");
    std::string line;
    int rows = 0;
    while (std::getline(hyp, line)) {
        ++rows;
        CHECK(line.find('\t') != std::string::npos);
    }
    CHECK(rows == 6);

    r = run_tool("score --ref " + (m.corpus / "test.tsv").string() + " --hyp " +
                 (dir / "hyp.tsv").string());
    CHECK(r.status == 0);
    CHECK_THAT(r.out, ContainsSubstring("utterances 6"));
    CHECK_THAT(r.out, ContainsSubstring("WER"));
    CHECK_THAT(r.out, ContainsSubstring("CER"));
    fs::remove_all(dir);
}

TEST_CASE("cli: same-seed training is deterministic, resume matches continuous") {
    const auto& m = mini();
    const auto dir = temp_dir("determinism");
    const std::string base = "train --config " + m.conf.string() + " --corpus " +
                             m.corpus.string() + " --seed 11";

    auto r = run_tool(base + " --out " + (dir / "a").string());
    REQUIRE(r.status == 0);
    r = run_tool(base + " --out " + (dir / "b").string());
    REQUIRE(r.status == 0);
    CHECK(metrics_without_wall(dir / "a" / "metrics.csv") ==
          metrics_without_wall(dir / "b" / "metrics.csv"));
    CHECK(read_file(dir / "a" / "best.ckpt") == read_file(dir / "b" / "best.ckpt"));

    // One epoch, then resume for the second: same final checkpoint as a
    // straight two-epoch run.
    r = run_tool(base + " --out " + (dir / "c").string() + " --epochs 1");
    REQUIRE(r.status == 0);
    r = run_tool(base + " --out " + (dir / "c").string() + " --epochs 2 --resume");
    REQUIRE(r.status == 0);
    CHECK(read_file(dir / "c" / "last.ckpt") == read_file(dir / "a" / "last.ckpt"));
    fs::remove_all(dir);
}

TEST_CASE("cli: language model training and fused decoding") {
    const auto& m = mini();
    const auto dir = temp_dir("lm");

    auto r = run_tool("train-lm --config " + m.conf.string() + " --manifest " +
                      (m.corpus / "train.tsv").string() + " --out " + (dir / "lm").string());
    REQUIRE(r.status == 0);
    CHECK_THAT(r.out, ContainsSubstring("ppl"));
    REQUIRE(fs::exists(dir / "lm" / "clm.ckpt"));
    REQUIRE(fs::exists(dir / "lm" / "wlm.ckpt"));
    REQUIRE(fs::exists(dir / "lm" / "words.txt"));

    r = run_tool("train --config " + m.conf.string() + " --corpus " + m.corpus.string() +
                 " --seed 7 --out " + (dir / "m").string());
    REQUIRE(r.status == 0);

    r = run_tool("decode --model " + (dir / "m").string() + " --manifest " +
                 (m.corpus / "test.tsv").string() + " --out " + (dir / "hyp.tsv").string() +
                 " --lm " + (dir / "lm").string() + " --gamma 0.3 --decode-lambda 0.2" +
                 " --nbest 3 --nbest-out " + (dir / "nbest.tsv").string());
    REQUIRE(r.status == 0);

    // n-best rows carry per-component scores; the LM column must be active.
    std::ifstream nb(dir / "nbest.tsv");
    std::string header;
    REQUIRE(std::getline(nb, header));
    CHECK_THAT(header, ContainsSubstring("lm"));
    std::string line;
    int rows = 0;
    bool lm_nonzero = false;
    while (std::getline(nb, line)) {
        ++rows;
        std::vector<std::string> fields;
        std::size_t start = 0;
        for (std::size_t tab = line.find('\t'); tab != std::string::npos;
             tab = line.find('\t', start)) {
            fields.push_back(line.substr(start, tab - start));
            start = tab + 1;
        }
        fields.push_back(line.substr(start));
        REQUIRE(fields.size() == 7);
        if (std::stod(fields[5]) != 0.0) lm_nonzero = true;
    }
    CHECK(rows >= 6);
    CHECK(lm_nonzero);
    fs::remove_all(dir);
}

TEST_CASE("cli: decode routes through the requested encoder branch") {
    const auto& m = mini();
    const auto dir = temp_dir("branch");

    // A parallel model has distinct front-ends for the two renditions.
    auto r = run_tool("train --config " + m.conf.string() + " --corpus " + m.corpus.string() +
                      " --seed 7 --epochs 1 --out " + (dir / "m").string() +
                      " --set parallel=true --set use_tags=both");
    REQUIRE(r.status == 0);

    r = run_tool("decode --model " + (dir / "m").string() + " --manifest " +
                 (m.corpus / "test.tsv").string() + " --out " + (dir / "hd.tsv").string());
    REQUIRE(r.status == 0);
    CHECK_THAT(r.err, ContainsSubstring("distant branch"));

    r = run_tool("decode --model " + (dir / "m").string() + " --manifest " +
                 (m.corpus / "test.tsv").string() + " --out " + (dir / "hc.tsv").string() +
                 " --encoder-branch close");
    REQUIRE(r.status == 0);
    CHECK_THAT(r.err, ContainsSubstring("close branch"));
    fs::remove_all(dir);
}

TEST_CASE("cli: self-check commands succeed") {
    auto r = run_tool("grad-check --seeds 2");
    CHECK(r.status == 0);
    CHECK_THAT(r.out, ContainsSubstring("ok"));

    r = run_tool("oracle-check");
    CHECK(r.status == 0);
    CHECK_THAT(r.out, ContainsSubstring("ok"));
}
