// Command-line front end: corpus generation, feature extraction, training,
// decoding, scoring, and self-check oracles for the recognizer library.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "e2e/gradcheck.hpp"
#include "e2e/pipeline.hpp"
#include "e2e/recipes.hpp"

using namespace e2e;
using ad::Tape;
using ad::Tensor;

namespace {

// ---------------------------------------------------------------------------
// Config plumbing: every subcommand takes --config plus repeatable --set
// overrides; dedicated flags override both.
// ---------------------------------------------------------------------------

struct ConfArgs {
    std::string config_path;
    std::vector<std::string> sets;
};

void add_conf_flags(CLI::App* cmd, ConfArgs& ca) {
    cmd->add_option("--config", ca.config_path, "configuration file (key=value lines)");
    cmd->add_option("--set", ca.sets, "override one configuration key as KEY=VALUE (repeatable)");
}

cfg::Config build_conf(const ConfArgs& ca) {
    cfg::Config c;
    if (!ca.config_path.empty()) c = cfg::Config::from_file(ca.config_path);
    for (const auto& s : ca.sets) c.merge(cfg::Config::from_string(s, "--set"));
    return c;
}

std::vector<std::uint64_t> parse_seeds(const std::string& csv) {
    std::vector<std::uint64_t> out;
    std::stringstream ss(csv);
    std::string part;
    while (std::getline(ss, part, ',')) {
        if (part.empty()) continue;
        std::size_t pos = 0;
        out.push_back(std::stoull(part, &pos));
        if (pos != part.size()) throw Error("seeds: bad entry '" + part + "'");
    }
    if (out.empty()) throw Error("seeds: empty list");
    return out;
}

void print_epochs(const train::TrainReport& report) {
    std::printf("%6s %12s %12s %8s %8s\n", "epoch", "train_loss", "dev_loss", "dev_cer",
                "wall_s");
    for (const auto& r : report.rows)
        std::printf("%6d %12.6f %12.6f %8.3f %8.3f\n", r.epoch, r.train_loss, r.dev_loss,
                    r.dev_cer, r.wall_s);
    std::printf("best dev CER %.3f%%", report.best_dev_cer);
    if (report.warnings > 0) std::printf("  (%d utterances excluded as CTC-impossible)",
                                         report.warnings);
    std::printf("\n");
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

int cmd_gen_corpus(const cfg::Config& conf, const std::string& out_dir) {
    const toy::ToyCorpusSpec spec = pipe::corpus_spec(conf);
    toy::gen_toy_corpus(spec, out_dir);
    std::printf("corpus: %d train / %d dev / %d test utterances, two renditions each -> %s\n",
                spec.n_train, spec.n_dev, spec.n_test, out_dir.c_str());
    return 0;
}

int cmd_extract_features(const cfg::Config& conf_in, const std::string& manifest,
                         const std::string& out_dir) {
    cfg::Config conf = conf_in;
    if (!conf.has("use_tags")) conf.set("use_tags", "both");  // cache every rendition by default
    const feat::FeatureConfig fc = pipe::feature_config(conf);
    const vocab::Charset cs = vocab::Charset::from_transcripts(pipe::manifest_transcripts(manifest));
    pipe::DataOptions dopt = pipe::data_options(conf);
    dopt.cache_dir = out_dir;
    dopt.keep_close_audio = false;
    const train::Dataset ds = pipe::load_dataset(manifest, cs, fc, dopt);
    std::printf("features: wrote %zu feature files to %s\n", ds.utts.size(), out_dir.c_str());
    return 0;
}

int cmd_train(const cfg::Config& conf, const std::string& corpus_dir, const std::string& out_dir,
              bool resume) {
    recipes::Prepared p = recipes::prepare_experiment(corpus_dir, conf);
    std::fprintf(stderr, "train: %zu train / %zu dev utterances, %d characters, %s encoder%s\n",
                 p.train_ds.utts.size(), p.dev_ds.utts.size(), p.cs.size(),
                 enc::encoder_kind_name(p.mc.encoder.kind).c_str(),
                 p.mc.encoder.parallel ? " (parallel)" : "");

    Rng rng(conf.get_u64("seed", 1));
    model::Model m(p.mc, rng);
    train::TrainConfig tc = pipe::train_config(conf);
    tc.out_dir = out_dir;
    tc.resume = resume;

    std::filesystem::create_directories(out_dir);
    pipe::resolved_model_conf(conf, p.mc).save(out_dir + "/model.conf");
    p.cs.save(out_dir + "/charset.txt");
    if (p.cmvn) pipe::save_cmvn(out_dir + "/cmvn.stats", *p.cmvn);

    opt::AdaDelta optim;
    const train::TrainReport report = train::train(m, optim, p.train_ds, p.dev_ds, tc);
    print_epochs(report);
    std::printf("artifacts in %s: model.conf charset.txt metrics.csv best.ckpt last.ckpt%s\n",
                out_dir.c_str(), p.cmvn ? " cmvn.stats" : "");
    return 0;
}

int cmd_train_lm(const cfg::Config& conf, const std::string& manifest, const std::string& out_dir,
                 const std::string& charset_path) {
    const auto transcripts = pipe::manifest_transcripts(manifest);
    const vocab::Charset cs = charset_path.empty() ? vocab::Charset::from_transcripts(transcripts)
                                                   : vocab::Charset::load(charset_path);
    auto pack = recipes::train_lms(transcripts, cs, conf);
    recipes::save_lms(*pack, cs, conf, out_dir);

    // Report the geometric-mean perplexity over the training text.
    auto ppl = [](const lm::LstmLm& m, const std::vector<std::vector<int>>& corpus) {
        double lognll = 0.0;
        long long tokens = 0;
        for (const auto& seq : corpus) {
            Tape t;
            lognll += t.val(m.nll(t, seq)).v[0];
            tokens += static_cast<long long>(seq.size()) + 1;  // + end of sequence
        }
        return std::exp(lognll / static_cast<double>(tokens));
    };
    std::vector<std::vector<int>> ccorpus, wcorpus;
    for (const auto& text : transcripts) {
        ccorpus.push_back(cs.encode(text));
        std::vector<int> wids;
        for (const auto& w : vocab::WordVocab::split_words(text)) wids.push_back(pack->wv.id(w));
        wcorpus.push_back(std::move(wids));
    }
    std::printf("lm: %zu sentences, char ppl %.3f, word ppl %.3f -> %s\n", transcripts.size(),
                ppl(pack->clm, ccorpus), ppl(pack->wlm, wcorpus), out_dir.c_str());
    return 0;
}

int cmd_decode(const cfg::Config& overrides, const std::string& model_dir,
               const std::string& manifest, const std::string& out_path,
               const std::string& branch_name, const std::string& lm_dir,
               const std::string& ckpt_path, const std::string& nbest_path) {
    cfg::Config conf = cfg::Config::from_file(model_dir + "/model.conf");
    conf.merge(overrides);
    const feat::ArrayTag branch = feat::tag_from_name(branch_name);

    const vocab::Charset cs = vocab::Charset::load(model_dir + "/charset.txt");
    const feat::FeatureConfig fc = pipe::feature_config(conf);
    const model::ModelConfig mc = pipe::model_config(conf, cs.size(), fc.feats_per_channel());
    Rng r0(0);
    model::Model m(mc, r0);
    std::vector<ad::Param*> ps;
    m.collect(ps);
    ckpt::load_params(ckpt_path.empty() ? model_dir + "/best.ckpt" : ckpt_path, ps);

    pipe::DataOptions dopt = pipe::data_options(conf);
    dopt.use_distant = branch == feat::ArrayTag::distant;
    dopt.use_close = !dopt.use_distant;
    dopt.keep_close_audio = false;
    dopt.cache_dir = conf.get_str("cache_dir", "");
    train::Dataset ds = pipe::load_dataset(manifest, cs, fc, dopt);
    if (std::filesystem::exists(model_dir + "/cmvn.stats"))
        pipe::apply_cmvn(ds, pipe::load_cmvn(model_dir + "/cmvn.stats"));

    std::unique_ptr<recipes::LmPack> lms;
    if (!lm_dir.empty()) lms = recipes::load_lms(lm_dir, cs);

    const search::BeamConfig bc = pipe::beam_config(conf);
    const auto hyps = pipe::decode_dataset(m, cs, ds, branch, lms ? &lms->ml : nullptr, bc);

    std::ofstream file;
    const bool to_stdout = out_path.empty() || out_path == "-";
    if (!to_stdout) {
        file.open(out_path);
        if (!file) throw Error("decode: cannot write " + out_path);
    }
    std::ostream& os = to_stdout ? std::cout : file;
    for (const auto& h : hyps) os << h.id << '\t' << h.text << '\n';

    if (!nbest_path.empty()) {
        std::ofstream nb(nbest_path);
        if (!nb) throw Error("decode: cannot write " + nbest_path);
        nb << "id\trank\ttotal\tatt\tctc\tlm\ttext\n";
        char buf[64];
        for (const auto& h : hyps)
            for (std::size_t r = 0; r < h.nbest.size(); ++r) {
                const auto& cand = h.nbest[r];
                nb << h.id << '\t' << r + 1;
                for (double x : {cand.total, cand.att, cand.ctc, cand.lm}) {
                    std::snprintf(buf, sizeof(buf), "\t%.6f", x);
                    nb << buf;
                }
                nb << '\t' << cs.decode(cand.ids) << '\n';
            }
    }
    std::fprintf(stderr, "decode: %zu utterances (%s branch, beam %d)\n", hyps.size(),
                 feat::tag_name(branch), bc.beam);
    return 0;
}

int cmd_score(const std::string& ref_path, const std::string& hyp_path) {
    const metrics::ScoreReport sr = pipe::score_files(ref_path, hyp_path);
    auto line = [](const char* name, const metrics::LevelTotals& t) {
        std::printf("%s %.2f (sub %lld, del %lld, ins %lld, ref %lld)%s\n", name, t.pct(), t.sub,
                    t.del, t.ins, t.ref_tokens, t.empty_ref ? "  [empty reference seen]" : "");
    };
    std::printf("utterances %d\n", sr.utterances);
    line("WER", sr.word);
    line("CER", sr.chr);
    return 0;
}

int cmd_grad_check(int seeds) {
    const auto checks = diag::run_layer_checks(seeds);
    bool all = true;
    for (const auto& c : checks) {
        std::printf("%-20s seeds %-3d worst %.3e  %s\n", c.layer.c_str(), c.seeds, c.worst,
                    c.passed() ? "ok" : "FAIL");
        all = all && c.passed();
    }
    if (!all) std::printf("grad-check: FAILED\n");
    return all ? 0 : 1;
}

// Brute-force minimal edit distance by recursion, independent of the DP.
int edit_distance_recursive(const std::vector<int>& r, const std::vector<int>& h, std::size_t i,
                            std::size_t j) {
    if (i == r.size()) return static_cast<int>(h.size() - j);
    if (j == h.size()) return static_cast<int>(r.size() - i);
    int best = edit_distance_recursive(r, h, i + 1, j + 1) + (r[i] == h[j] ? 0 : 1);
    best = std::min(best, edit_distance_recursive(r, h, i + 1, j) + 1);
    best = std::min(best, edit_distance_recursive(r, h, i, j + 1) + 1);
    return best;
}

void all_token_seqs(int alphabet, int max_len, std::vector<int>& cur,
                    std::vector<std::vector<int>>& out) {
    out.push_back(cur);
    if (static_cast<int>(cur.size()) == max_len) return;
    for (int c = 0; c < alphabet; ++c) {
        cur.push_back(c);
        all_token_seqs(alphabet, max_len, cur, out);
        cur.pop_back();
    }
}

int cmd_oracle_check() {
    // CTC forward value against exhaustive alignment enumeration.
    {
        Rng rng(71);
        int checked = 0;
        double worst = 0.0;
        for (int i = 0; i < 100; ++i) {
            const int tlen = static_cast<int>(rng.uniform_int(1, 6));
            const int symbols = static_cast<int>(rng.uniform_int(2, 4));
            Tensor lp({tlen, symbols});
            for (int f = 0; f < tlen; ++f) {
                double z = 0.0;
                for (int k = 0; k < symbols; ++k) {
                    lp.at(f, k) = rng.uniform(-2.0, 2.0);
                    z += std::exp(lp.at(f, k));
                }
                for (int k = 0; k < symbols; ++k) lp.at(f, k) -= std::log(z);
            }
            std::vector<int> labels(static_cast<std::size_t>(rng.uniform_int(1, 3)));
            for (int& c : labels) c = static_cast<int>(rng.uniform_int(1, symbols - 1));

            Tensor p = lp;
            for (double& v : p.v) v = std::exp(v);
            const double bf = ctc::ctc_brute_force(p, labels);
            const ctc::CtcResult r = ctc::ctc_loss(lp, labels);
            if (r.impossible) {
                if (bf != 0.0) {
                    std::printf("oracle-check: CTC impossibility mismatch\n");
                    return 1;
                }
                continue;
            }
            worst = std::max(worst, std::abs(r.loss + std::log(bf)));
            ++checked;
        }
        if (worst >= 1e-9 || checked < 50) {
            std::printf("oracle-check: CTC oracle FAILED (worst %.3e, %d checked)\n", worst,
                        checked);
            return 1;
        }
        std::printf("ctc oracle         ok (%d instances, worst gap %.3e)\n", checked, worst);
    }

    // Full-width beam against exhaustive enumeration on random tiny models.
    {
        double worst = 0.0;
        for (int i = 0; i < 10; ++i) {
            Rng rng(500 + i);
            att::Decoder dec("dec", 3, 5, 4, 3, rng);
            att::Attention at("att", 4, 3, 5, 2, 3, rng);
            Tensor encm({3, 4});
            for (double& v : encm.v) v = rng.uniform(-1.0, 1.0);
            Tensor ctc_lp({4, 4});
            for (int f = 0; f < 4; ++f) {
                double z = 0.0;
                for (int k = 0; k < 4; ++k) {
                    ctc_lp.at(f, k) = rng.uniform(-2.0, 2.0);
                    z += std::exp(ctc_lp.at(f, k));
                }
                for (int k = 0; k < 4; ++k) ctc_lp.at(f, k) -= std::log(z);
            }
            for (const auto& [lambda, gamma] : std::vector<std::pair<double, double>>{
                     {0.0, 0.0}, {0.1, 0.0}, {1.0, 0.0}}) {
                search::BeamConfig bc;
                bc.lambda = lambda;
                bc.gamma = gamma;
                bc.beam = 200;  // full width at this size
                bc.max_len = 3;
                bc.nbest = 1;
                const auto got = search::beam_search(dec, at, encm, ctc_lp, nullptr, bc);
                const auto want =
                    search::exhaustive_search(dec, at, encm, ctc_lp, nullptr, lambda, gamma, 3);
                if (got.front().ids != want.ids) {
                    std::printf("oracle-check: beam/exhaustive mismatch\n");
                    return 1;
                }
                worst = std::max(worst, std::abs(got.front().total - want.total));
            }
        }
        if (worst >= 1e-9) {
            std::printf("oracle-check: beam oracle FAILED (worst %.3e)\n", worst);
            return 1;
        }
        std::printf("beam oracle        ok (10 models x 3 weightings, worst gap %.3e)\n", worst);
    }

    // WER alignment against brute-force minimal edit distance.
    {
        std::vector<std::vector<int>> seqs;
        std::vector<int> cur;
        all_token_seqs(3, 4, cur, seqs);
        for (const auto& r : seqs)
            for (const auto& h : seqs) {
                const metrics::EditCounts c = metrics::align(r, h);
                const int want =
                    edit_distance_recursive(r, h, 0, 0);
                if (c.sub + c.del + c.ins != want) {
                    std::printf("oracle-check: WER oracle FAILED\n");
                    return 1;
                }
            }
        std::printf("wer oracle         ok (%zu^2 token pairs, exact)\n", seqs.size());
    }

    std::printf("oracle-check: all oracles passed\n");
    return 0;
}

int cmd_ablation(const cfg::Config& conf, const std::string& corpus_dir,
                 const std::string& out_dir, const std::string& seeds_csv,
                 const std::string& variants_csv) {
    std::vector<recipes::AblationVariant> variants = recipes::standard_variants();
    if (!variants_csv.empty()) {
        std::vector<recipes::AblationVariant> picked;
        std::stringstream ss(variants_csv);
        std::string name;
        while (std::getline(ss, name, ',')) {
            bool found = false;
            for (const auto& v : variants)
                if (v.name == name) {
                    picked.push_back(v);
                    found = true;
                }
            if (!found) throw Error("ablation: unknown variant '" + name + "'");
        }
        variants = std::move(picked);
    }
    const auto rows =
        recipes::run_ablation(corpus_dir, conf, variants, parse_seeds(seeds_csv), out_dir);

    std::printf("%-24s %10s %10s %10s\n", "variant", "dev_cer", "test_wer", "wall_s");
    for (const auto& v : variants) {
        std::vector<double> walls;
        for (const auto& r : rows)
            if (r.variant == v.name) walls.push_back(r.wall_s);
        std::printf("%-24s %10.2f %10.2f %10.1f\n", v.name.c_str(),
                    recipes::median_metric(rows, v.name, false),
                    recipes::median_metric(rows, v.name, true), recipes::median(walls));
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"End-to-end multichannel speech recognition toolkit"};
    app.require_subcommand(1);

    // gen-corpus
    auto* gen = app.add_subcommand("gen-corpus", "synthesize the keyword toy corpus");
    ConfArgs gen_conf;
    std::string gen_out;
    std::string gen_seed;
    add_conf_flags(gen, gen_conf);
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--seed", gen_seed, "corpus seed (overrides config)");

    // extract-features
    auto* feats = app.add_subcommand("extract-features", "precompute feature files for a manifest");
    ConfArgs feats_conf;
    std::string feats_manifest, feats_out;
    add_conf_flags(feats, feats_conf);
    feats->add_option("--manifest", feats_manifest, "input manifest (TSV)")->required();
    feats->add_option("--out", feats_out, "feature cache directory")->required();

    // train
    auto* tr = app.add_subcommand("train", "train a recognizer on a generated corpus");
    ConfArgs tr_conf;
    std::string tr_corpus, tr_out, tr_seed, tr_epochs;
    bool tr_resume = false;
    add_conf_flags(tr, tr_conf);
    tr->add_option("--corpus", tr_corpus, "corpus directory (train/dev manifests)")->required();
    tr->add_option("--out", tr_out, "output directory for checkpoints and metrics")->required();
    tr->add_option("--seed", tr_seed, "training seed (overrides config)");
    tr->add_option("--epochs", tr_epochs, "epoch count (overrides config)");
    tr->add_flag("--resume", tr_resume, "continue from <out>/last.ckpt");

    // train-lm
    auto* tlm = app.add_subcommand("train-lm", "train character and word language models");
    ConfArgs tlm_conf;
    std::string tlm_manifest, tlm_out, tlm_charset;
    add_conf_flags(tlm, tlm_conf);
    tlm->add_option("--manifest", tlm_manifest, "manifest with training transcripts")->required();
    tlm->add_option("--out", tlm_out, "output directory")->required();
    tlm->add_option("--charset", tlm_charset, "charset file to share with a trained model");

    // decode
    auto* dec = app.add_subcommand("decode", "beam-decode a manifest with a trained model");
    ConfArgs dec_conf;
    std::string dec_model, dec_manifest, dec_out, dec_branch = "distant", dec_lm, dec_ckpt,
                                                  dec_nbest, dec_beam, dec_gamma, dec_lambda,
                                                  dec_nbest_n;
    add_conf_flags(dec, dec_conf);
    dec->add_option("--model", dec_model, "model directory written by train")->required();
    dec->add_option("--manifest", dec_manifest, "manifest to decode")->required();
    dec->add_option("--out", dec_out, "hypothesis TSV (default: stdout)");
    dec->add_option("--encoder-branch", dec_branch, "encoder branch: distant (default) or close");
    dec->add_option("--lm", dec_lm, "language-model directory written by train-lm");
    dec->add_option("--checkpoint", dec_ckpt, "checkpoint file (default: <model>/best.ckpt)");
    dec->add_option("--nbest-out", dec_nbest, "write the n-best list with component scores here");
    dec->add_option("--beam", dec_beam, "beam width (overrides config)");
    dec->add_option("--gamma", dec_gamma, "LM weight (overrides config)");
    dec->add_option("--decode-lambda", dec_lambda, "CTC weight at decode (overrides config)");
    dec->add_option("--nbest", dec_nbest_n, "n-best size (overrides config)");

    // score
    auto* sc = app.add_subcommand("score", "score hypotheses against references (WER/CER)");
    std::string sc_ref, sc_hyp;
    sc->add_option("--ref", sc_ref, "reference file (id<TAB>text, or a 5-column manifest)")
        ->required();
    sc->add_option("--hyp", sc_hyp, "hypothesis file (id<TAB>text)")->required();

    // grad-check
    auto* gc = app.add_subcommand("grad-check", "finite-difference checks on every layer");
    int gc_seeds = 20;
    gc->add_option("--seeds", gc_seeds, "random draws per layer (default 20)");

    // oracle-check
    app.add_subcommand("oracle-check", "CTC, beam-search and WER brute-force oracles");

    // ablation
    auto* ab = app.add_subcommand("ablation", "train and compare the standard variant grid");
    ConfArgs ab_conf;
    std::string ab_corpus, ab_out, ab_seeds = "1,2,3", ab_variants;
    add_conf_flags(ab, ab_conf);
    ab->add_option("--corpus", ab_corpus, "corpus directory")->required();
    ab->add_option("--out", ab_out, "output directory")->required();
    ab->add_option("--seeds", ab_seeds, "comma-separated seed list (default 1,2,3)");
    ab->add_option("--variants", ab_variants, "comma-separated variant subset (default: all)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        // Unrecognized arguments always report usage with exit 2, even when
        // another parse problem (e.g. a missing required flag) fires first.
        std::vector<std::string> extras = app.remaining(true);
        if (!extras.empty() || dynamic_cast<const CLI::ExtrasError*>(&e) != nullptr) {
            std::cerr << "error: " << e.what();
            if (!extras.empty()) {
                std::cerr << " (unrecognized:";
                for (const auto& x : extras) std::cerr << ' ' << x;
                std::cerr << ')';
            }
            std::cerr << "\n\n" << app.help() << std::flush;
            return 2;
        }
        return app.exit(e);
    }

    try {
        if (gen->parsed()) {
            cfg::Config c = build_conf(gen_conf);
            if (!gen_seed.empty()) c.set("seed", gen_seed);
            return cmd_gen_corpus(c, gen_out);
        }
        if (feats->parsed()) return cmd_extract_features(build_conf(feats_conf), feats_manifest,
                                                         feats_out);
        if (tr->parsed()) {
            cfg::Config c = build_conf(tr_conf);
            if (!tr_seed.empty()) c.set("seed", tr_seed);
            if (!tr_epochs.empty()) c.set("epochs", tr_epochs);
            return cmd_train(c, tr_corpus, tr_out, tr_resume);
        }
        if (tlm->parsed()) return cmd_train_lm(build_conf(tlm_conf), tlm_manifest, tlm_out,
                                               tlm_charset);
        if (dec->parsed()) {
            cfg::Config c = build_conf(dec_conf);
            if (!dec_beam.empty()) c.set("beam", dec_beam);
            if (!dec_gamma.empty()) c.set("gamma", dec_gamma);
            if (!dec_lambda.empty()) c.set("decode_lambda", dec_lambda);
            if (!dec_nbest_n.empty()) c.set("nbest", dec_nbest_n);
            return cmd_decode(c, dec_model, dec_manifest, dec_out, dec_branch, dec_lm, dec_ckpt,
                              dec_nbest);
        }
        if (sc->parsed()) return cmd_score(sc_ref, sc_hyp);
        if (gc->parsed()) return cmd_grad_check(gc_seeds);
        if (app.get_subcommand("oracle-check")->parsed()) return cmd_oracle_check();
        if (ab->parsed()) {
            return cmd_ablation(build_conf(ab_conf), ab_corpus, ab_out, ab_seeds, ab_variants);
        }
        std::cerr << app.help();
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
