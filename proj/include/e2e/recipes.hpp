#pragma once

#include <chrono>
#include <cstdio>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "e2e/pipeline.hpp"

namespace e2e::recipes {

struct RunResult {
    double dev_cer = 0.0;   // best greedy dev CER over the training run (percent)
    double test_wer = 0.0;  // beam-decoded test WER of the best checkpoint (percent)
    double test_cer = 0.0;
    double wall_s = 0.0;
    train::TrainReport report;
};

struct LmPack {
    lm::LstmLm clm, wlm;
    vocab::WordVocab wv;
    lm::MultilevelLm ml;  // points at the members above and an external charset
};

/// Trains character- and word-level models on the given transcripts and wires
/// them into a multilevel scorer. The charset must outlive the pack.
inline std::unique_ptr<LmPack> train_lms(const std::vector<std::string>& transcripts,
                                         const vocab::Charset& cs, const cfg::Config& conf) {
    if (!cs.has(' ')) throw Error("lm: charset has no word delimiter");
    auto pack = std::make_unique<LmPack>();
    pack->wv = vocab::WordVocab::from_transcripts(transcripts);

    std::vector<std::vector<int>> ccorpus, wcorpus;
    for (const auto& text : transcripts) {
        ccorpus.push_back(cs.encode(text));
        std::vector<int> wids;
        for (const auto& w : vocab::WordVocab::split_words(text)) wids.push_back(pack->wv.id(w));
        wcorpus.push_back(std::move(wids));
    }

    const int emb = conf.get_int("lm_emb", 16);
    const int hidden = conf.get_int("lm_hidden", 32);
    const int layers = conf.get_int("lm_layers", 1);
    const int epochs = conf.get_int("lm_epochs", 10);
    const std::uint64_t seed = conf.get_u64("seed", 1);

    Rng crng(Rng::mix(seed, 0xc1a0, 0)), wrng(Rng::mix(seed, 0xc1a0, 1));
    pack->clm = lm::LstmLm("clm", cs.size() + 1, emb, hidden, layers, crng);
    pack->wlm = lm::LstmLm("wlm", static_cast<int>(pack->wv.size()) + 2, emb, hidden, layers, wrng);

    opt::Adam copt, wopt;
    lm::train_lm(pack->clm, ccorpus, copt, epochs, Rng::mix(seed, 0xc1a0, 2));
    lm::train_lm(pack->wlm, wcorpus, wopt, epochs, Rng::mix(seed, 0xc1a0, 3));

    pack->ml.clm = &pack->clm;
    pack->ml.wlm = &pack->wlm;
    pack->ml.cs = &cs;
    pack->ml.wv = &pack->wv;
    pack->ml.space_id = cs.id(' ');
    return pack;
}

/// Everything an experiment derives from a corpus directory and a config
/// before the first optimizer step.
struct Prepared {
    feat::FeatureConfig fc;
    vocab::Charset cs;
    pipe::DataOptions dopt, eopt;  // training / evaluation loading options
    feat::ArrayTag eval_branch = feat::ArrayTag::distant;
    train::Dataset train_ds, dev_ds;
    std::optional<pipe::TagCmvn> cmvn;  // set when normalization is enabled
    model::ModelConfig mc;
};

/// Loads train/dev data, builds the charset and normalization statistics,
/// and sizes the model. Evaluation always uses a single rendition: distant
/// when it is in play, otherwise close.
inline Prepared prepare_experiment(const std::string& corpus_dir, const cfg::Config& conf) {
    Prepared p;
    const std::string train_tsv = corpus_dir + "/train.tsv";
    p.fc = pipe::feature_config(conf);
    p.dopt = pipe::data_options(conf);
    p.dopt.cache_dir = conf.get_str("cache_dir", "");
    p.eopt = p.dopt;
    p.eopt.keep_close_audio = false;
    if (p.dopt.use_distant) p.eopt.use_close = false;
    p.eval_branch = p.dopt.use_distant ? feat::ArrayTag::distant : feat::ArrayTag::close;

    p.cs = vocab::Charset::from_transcripts(pipe::manifest_transcripts(train_tsv));
    p.train_ds = pipe::load_dataset(train_tsv, p.cs, p.fc, p.dopt);
    p.dev_ds = pipe::load_dataset(corpus_dir + "/dev.tsv", p.cs, p.fc, p.eopt);
    if (conf.get_bool("cmvn", true)) {
        p.cmvn = pipe::compute_cmvn(p.train_ds);
        pipe::apply_cmvn(p.train_ds, *p.cmvn);
        pipe::apply_cmvn(p.dev_ds, *p.cmvn);
    }
    p.mc = pipe::model_config(conf, p.cs.size(), p.fc.feats_per_channel());
    pipe::infer_channels(p.train_ds, p.mc);
    return p;
}

/// One full experiment: build datasets from <corpus_dir>/{train,dev,test}.tsv,
/// train a recognizer under `conf`, beam-decode the evaluation rendition of
/// the test set with the best checkpoint, and score it.
inline RunResult run_experiment(const std::string& corpus_dir, const cfg::Config& conf,
                                const std::string& out_dir) {
    const auto t0 = std::chrono::steady_clock::now();
    if (out_dir.empty()) throw Error("experiment: out_dir must not be empty");

    Prepared p = prepare_experiment(corpus_dir, conf);
    train::Dataset test_ds = pipe::load_dataset(corpus_dir + "/test.tsv", p.cs, p.fc, p.eopt);
    if (p.cmvn) pipe::apply_cmvn(test_ds, *p.cmvn);

    Rng rng(conf.get_u64("seed", 1));
    model::Model m(p.mc, rng);

    train::TrainConfig tc = pipe::train_config(conf);
    tc.out_dir = out_dir;
    opt::AdaDelta optim;

    RunResult res;
    res.report = train::train(m, optim, p.train_ds, p.dev_ds, tc);
    res.dev_cer = res.report.best_dev_cer;

    std::vector<ad::Param*> ps;
    m.collect(ps);
    ckpt::load_params(res.report.best_path, ps);

    std::unique_ptr<LmPack> lms;
    if (conf.get_bool("use_lm", false))
        lms = train_lms(pipe::manifest_transcripts(corpus_dir + "/train.tsv"), p.cs, conf);

    const search::BeamConfig bc = pipe::beam_config(conf);
    const auto hyps =
        pipe::decode_dataset(m, p.cs, test_ds, p.eval_branch, lms ? &lms->ml : nullptr, bc);

    std::map<std::string, std::string> ref_by_id;
    for (const auto& row : toy::load_manifest(corpus_dir + "/test.tsv"))
        ref_by_id[row.id] = row.transcript;
    std::vector<std::string> refs, texts;
    std::ofstream hf(out_dir + "/test_hyps.tsv");
    for (const auto& h : hyps) {
        refs.push_back(ref_by_id.at(h.id));
        texts.push_back(h.text);
        hf << h.id << '\t' << h.text << '\n';
    }
    const metrics::ScoreReport sr = metrics::score_corpus(refs, texts);
    res.test_wer = sr.wer();
    res.test_cer = sr.cer();
    res.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

/// Persists a trained LM pack: checkpoints, vocabularies, and the
/// reconstruction parameters.
inline void save_lms(LmPack& pack, const vocab::Charset& cs, const cfg::Config& conf,
                     const std::string& dir) {
    std::filesystem::create_directories(dir);
    cs.save(dir + "/charset.txt");
    pack.wv.save(dir + "/words.txt");
    std::vector<ad::Param*> cps, wps;
    pack.clm.collect(cps);
    pack.wlm.collect(wps);
    ckpt::save_params(dir + "/clm.ckpt", cps);
    ckpt::save_params(dir + "/wlm.ckpt", wps);
    cfg::Config lc;
    lc.set("lm_emb", std::to_string(conf.get_int("lm_emb", 16)));
    lc.set("lm_hidden", std::to_string(conf.get_int("lm_hidden", 32)));
    lc.set("lm_layers", std::to_string(conf.get_int("lm_layers", 1)));
    lc.save(dir + "/lm.conf");
}

/// Rebuilds a saved LM pack for decoding. The pack scores over the decoder's
/// character ids, so the stored charset must match the model's.
inline std::unique_ptr<LmPack> load_lms(const std::string& dir, const vocab::Charset& cs) {
    const vocab::Charset stored = vocab::Charset::load(dir + "/charset.txt");
    if (stored.chars != cs.chars)
        throw Error("lm: charset in " + dir + " does not match the model's character set");
    if (!cs.has(' ')) throw Error("lm: charset has no word delimiter");

    const cfg::Config lc = cfg::Config::from_file(dir + "/lm.conf");
    const int emb = lc.get_int("lm_emb", 16);
    const int hidden = lc.get_int("lm_hidden", 32);
    const int layers = lc.get_int("lm_layers", 1);

    auto pack = std::make_unique<LmPack>();
    pack->wv = vocab::WordVocab::load(dir + "/words.txt");
    Rng r0(0), r1(1);
    pack->clm = lm::LstmLm("clm", cs.size() + 1, emb, hidden, layers, r0);
    pack->wlm = lm::LstmLm("wlm", pack->wv.size() + 2, emb, hidden, layers, r1);
    std::vector<ad::Param*> cps, wps;
    pack->clm.collect(cps);
    pack->wlm.collect(wps);
    ckpt::load_params(dir + "/clm.ckpt", cps);
    ckpt::load_params(dir + "/wlm.ckpt", wps);

    pack->ml.clm = &pack->clm;
    pack->ml.wlm = &pack->wlm;
    pack->ml.cs = &cs;
    pack->ml.wv = &pack->wv;
    pack->ml.space_id = cs.id(' ');
    return pack;
}

struct AblationVariant {
    std::string name;
    cfg::Config overrides;  // applied on top of the base configuration
};

struct AblationRow {
    std::string variant;
    std::uint64_t seed = 0;
    double dev_cer = 0.0, test_wer = 0.0, wall_s = 0.0;
};

/// The standard comparison grid: encoder variants, channel counts, and
/// decoding additions, each toggled one at a time against the base.
inline std::vector<AblationVariant> standard_variants() {
    auto mk = [](const std::string& name, std::initializer_list<std::pair<const char*, const char*>>
                                              kv) {
        AblationVariant v;
        v.name = name;
        for (const auto& [k, val] : kv) v.overrides.set(k, val);
        return v;
    };
    return {
        mk("single-cnn", {{"parallel", "false"}, {"encoder", "vgg"}}),
        mk("single-cnn-1ch", {{"parallel", "false"}, {"encoder", "vgg"}, {"distant_channels", "1"}}),
        mk("parallel-cnn", {{"parallel", "true"}, {"encoder", "vgg"}}),
        mk("parallel-res", {{"parallel", "true"}, {"encoder", "res"}}),
        mk("parallel-resbrn", {{"parallel", "true"}, {"encoder", "res_brn"}}),
        mk("parallel-resbrn-aug",
           {{"parallel", "true"}, {"encoder", "res_brn"}, {"augment", "true"}}),
        mk("parallel-resbrn-aug-lm",
           {{"parallel", "true"}, {"encoder", "res_brn"}, {"augment", "true"}, {"use_lm", "true"}}),
    };
}

inline double median(std::vector<double> v) {
    if (v.empty()) throw Error("median: empty");
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Median metric for one variant across its seeds (wer: test WER, else dev CER).
inline double median_metric(const std::vector<AblationRow>& rows, const std::string& variant,
                            bool wer) {
    std::vector<double> v;
    for (const auto& r : rows)
        if (r.variant == variant) v.push_back(wer ? r.test_wer : r.dev_cer);
    if (v.empty()) throw Error("ablation: no rows for variant " + variant);
    return median(std::move(v));
}

/// Runs every variant under every seed. Per-run artifacts land under
/// <out_dir>/<variant>-s<seed>/, per-run metrics in <out_dir>/runs.csv, and
/// the comparison table (seed medians, one row per variant) in
/// <out_dir>/ablation.csv.
inline std::vector<AblationRow> run_ablation(const std::string& corpus_dir,
                                             const cfg::Config& base,
                                             const std::vector<AblationVariant>& variants,
                                             const std::vector<std::uint64_t>& seeds,
                                             const std::string& out_dir) {
    if (variants.empty() || seeds.empty()) throw Error("ablation: need variants and seeds");
    std::filesystem::create_directories(out_dir);
    std::ofstream runs(out_dir + "/runs.csv");
    if (!runs) throw Error("ablation: cannot write to " + out_dir);
    runs << "variant,seed,dev_cer,test_wer,wall_s\n";

    std::vector<AblationRow> rows;
    for (const auto& v : variants) {
        for (const std::uint64_t seed : seeds) {
            cfg::Config conf = base;
            conf.merge(v.overrides);
            conf.set("seed", std::to_string(seed));
            const std::string run_dir = out_dir + "/" + v.name + "-s" + std::to_string(seed);
            const RunResult r = run_experiment(corpus_dir, conf, run_dir);

            AblationRow row{v.name, seed, r.dev_cer, r.test_wer, r.wall_s};
            rows.push_back(row);
            char buf[256];
            std::snprintf(buf, sizeof(buf), "%s,%llu,%.4f,%.4f,%.3f", v.name.c_str(),
                          static_cast<unsigned long long>(seed), row.dev_cer, row.test_wer,
                          row.wall_s);
            runs << buf << '\n';
            runs.flush();
        }
    }

    std::ofstream csv(out_dir + "/ablation.csv");
    csv << "variant,dev_cer,test_wer,wall_s\n";
    for (const auto& v : variants) {
        std::vector<double> walls;
        for (const auto& r : rows)
            if (r.variant == v.name) walls.push_back(r.wall_s);
        char buf[256];
        std::snprintf(buf, sizeof(buf), "%s,%.4f,%.4f,%.3f", v.name.c_str(),
                      median_metric(rows, v.name, false), median_metric(rows, v.name, true),
                      median(walls));
        csv << buf << '\n';
    }
    return rows;
}

}  // namespace e2e::recipes
