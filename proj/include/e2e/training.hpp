#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "e2e/checkpoint.hpp"
#include "e2e/features.hpp"
#include "e2e/metrics.hpp"
#include "e2e/model.hpp"
#include "e2e/optim.hpp"
#include "e2e/search.hpp"

namespace e2e::train {

using ad::Param;
using ad::Tape;
using ad::Tensor;
using ad::Var;

// ---------------------------------------------------------------------------
// Multi-task objective
// ---------------------------------------------------------------------------

/// Frames needed for a CTC alignment of `labels`: one per label plus one per
/// adjacent repeat (the mandatory separating blank).
inline int ctc_min_frames(const std::vector<int>& labels) {
    int need = static_cast<int>(labels.size());
    for (std::size_t i = 1; i < labels.size(); ++i)
        if (labels[i] == labels[i - 1]) ++need;
    return need;
}

struct MtlResult {
    Var loss;          // mean over counted utterances
    int counted = 0;   // utterances contributing to the average
    int warnings = 0;  // utterances excluded for CTC-impossible targets
};

/// L = lambda*ctc_loss + (1-lambda)*attention_nll per utterance, averaged
/// over the batch. Both heads consume one shared encoder forward. The
/// endpoints take a dedicated branch so lambda=1 is bitwise the CTC loss and
/// lambda=0 bitwise the attention loss. Utterances whose target cannot be
/// aligned by CTC (too few encoded frames) are excluded from the average at
/// every lambda — including 0 — so the batch composition never depends on
/// the mixing weight; each exclusion increments `warnings`.
inline MtlResult mtl_loss(Tape& t, model::Model& m, const std::vector<Tensor>& inputs,
                          const std::vector<std::vector<int>>& targets, feat::ArrayTag tag,
                          double lambda, bool train_mode, Rng& rng) {
    if (inputs.empty()) throw Error("mtl_loss: empty batch");
    if (inputs.size() != targets.size())
        throw Error("mtl_loss: " + std::to_string(inputs.size()) + " inputs vs " +
                    std::to_string(targets.size()) + " targets");
    if (!(lambda >= 0.0 && lambda <= 1.0))
        throw Error("mtl_loss: lambda must lie in [0,1], got " + std::to_string(lambda));

    std::vector<Var> hs = m.encoder.encode_batch(t, inputs, tag, train_mode, rng);
    MtlResult res{Var{-1}, 0, 0};
    std::optional<Var> sum;
    for (std::size_t i = 0; i < hs.size(); ++i) {
        const int tprime = t.val(hs[i]).dim(0);
        if (tprime < ctc_min_frames(targets[i])) {
            ++res.warnings;
            continue;
        }
        std::optional<Var> utt;
        if (lambda == 1.0) {
            utt = ctc::ctc_loss_op(t, m.ctc_logprobs(t, hs[i]), targets[i]);
        } else if (lambda == 0.0) {
            utt = att::attention_nll(t, m.dec, m.att, hs[i], targets[i]);
        } else {
            Var c = ctc::ctc_loss_op(t, m.ctc_logprobs(t, hs[i]), targets[i]);
            Var a = att::attention_nll(t, m.dec, m.att, hs[i], targets[i]);
            utt = t.add(t.scale(c, lambda), t.scale(a, 1.0 - lambda));
        }
        sum = sum ? t.add(*sum, *utt) : *utt;
        ++res.counted;
    }
    if (!sum) throw Error("mtl_loss: every utterance in the batch was excluded");
    res.loss = res.counted == 1 ? *sum : t.scale(*sum, 1.0 / res.counted);
    return res;
}

// ---------------------------------------------------------------------------
// Datasets and batching
// ---------------------------------------------------------------------------

struct TrainUtt {
    std::string id;
    Tensor feats;  // (T, channels * per) frame-major features
    std::optional<feat::Waveform> audio;  // kept when augmentation re-extracts
    std::vector<int> target;              // char ids 1..K
    feat::ArrayTag tag = feat::ArrayTag::distant;
    int channels = 1;
};

struct Dataset {
    std::vector<TrainUtt> utts;
    feat::FeatureConfig feat_cfg;         // used when re-extracting augmented audio
    std::optional<feat::CmvnStats> cmvn;  // applied after re-extraction when present
};

struct Batch {
    std::vector<int> utt;  // indices into the dataset
    feat::ArrayTag tag = feat::ArrayTag::distant;
};

/// Groups utterances into single-tag batches, bucketing by length within a
/// tag so batch members have similar frame counts, then shuffles the batch
/// order with the seed. Utterances longer than frame_cap (when positive) or
/// too short for the encoder (< 4 frames) are skipped and counted.
inline std::vector<Batch> make_batches(const std::vector<TrainUtt>& utts, int batch_size,
                                       std::uint64_t seed, int frame_cap = 0,
                                       int* skipped = nullptr) {
    if (utts.empty()) throw Error("make_batches: empty dataset");
    if (batch_size < 1) throw Error("make_batches: batch_size must be >= 1");
    int skip = 0;
    std::vector<int> by_tag[2];
    for (std::size_t i = 0; i < utts.size(); ++i) {
        const int frames = utts[i].feats.dim(0);
        if (frames < 4 || (frame_cap > 0 && frames > frame_cap)) {
            ++skip;
            continue;
        }
        by_tag[static_cast<int>(utts[i].tag)].push_back(static_cast<int>(i));
    }
    if (skipped) *skipped = skip;

    std::vector<Batch> plan;
    for (int tag = 0; tag < 2; ++tag) {
        auto& idx = by_tag[tag];
        std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
            return utts[a].feats.dim(0) < utts[b].feats.dim(0);
        });
        for (std::size_t start = 0; start < idx.size(); start += batch_size) {
            Batch b;
            b.tag = static_cast<feat::ArrayTag>(tag);
            const std::size_t end = std::min(idx.size(), start + batch_size);
            b.utt.assign(idx.begin() + start, idx.begin() + end);
            plan.push_back(std::move(b));
        }
    }
    Rng rng(seed);
    for (std::size_t i = plan.size(); i > 1; --i)
        std::swap(plan[i - 1], plan[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
    return plan;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainConfig {
    double lambda = 0.5;  // CTC weight in the training objective
    int epochs = 15;
    int batch_size = 16;
    double clip_norm = 5.0;
    std::uint64_t seed = 1;
    bool augment_close = false;  // white noise on close-array audio
    double aug_snr_lo = 7.0, aug_snr_hi = 20.0;
    int frame_cap = 3000;
    double dev_max_len_ratio = 0.8;  // greedy-decode label budget on dev
    std::string out_dir;             // empty: keep everything in memory only
    bool resume = false;             // continue from <out_dir>/last.ckpt
};

struct EpochRow {
    int epoch = 0;
    double train_loss = 0.0, dev_loss = 0.0, dev_cer = 0.0, wall_s = 0.0;
};

struct TrainReport {
    std::vector<EpochRow> rows;
    double best_dev_cer = std::numeric_limits<double>::infinity();
    int warnings = 0;  // CTC-impossible exclusions over all epochs
    std::string best_path, last_path, metrics_path;
};

namespace detail {

/// Purpose tags for deriving independent per-epoch RNG streams.
enum : std::uint64_t { kSeedBatchPlan = 1, kSeedDropout = 2, kSeedAugSnr = 3, kSeedAugNoise = 4 };

inline Tensor utt_input(const Dataset& ds, const TrainUtt& u, bool augment, double snr_lo,
                        double snr_hi, std::uint64_t seed, int epoch, int utt_index) {
    if (augment && u.tag == feat::ArrayTag::close && u.audio) {
        const std::uint64_t snr_seed =
            Rng::mix(Rng::mix(seed, static_cast<std::uint64_t>(epoch), kSeedAugSnr),
                     static_cast<std::uint64_t>(utt_index), kSeedAugSnr);
        Rng snr_rng(snr_seed);
        const double snr = snr_rng.uniform(snr_lo, snr_hi);
        const std::uint64_t noise_seed =
            Rng::mix(Rng::mix(seed, static_cast<std::uint64_t>(epoch), kSeedAugNoise),
                     static_cast<std::uint64_t>(utt_index), kSeedAugNoise);
        feat::Waveform noisy = feat::add_white_noise(*u.audio, snr, noise_seed);
        feat::FeatureSequence fs = feat::extract_features(noisy, u.tag, ds.feat_cfg);
        if (ds.cmvn) fs = feat::cmvn_apply(fs, *ds.cmvn);
        return enc::to_cnn_layout(fs.frames, u.channels);
    }
    return enc::to_cnn_layout(u.feats, u.channels);
}

inline double dev_cer_greedy(model::Model& m, const Dataset& dev, double max_len_ratio) {
    long long errors = 0, ref = 0;
    for (const TrainUtt& u : dev.utts) {
        Tensor enc_out = m.encoder.encode(enc::to_cnn_layout(u.feats, u.channels), u.tag);
        Tape t;
        Tensor ctc_lp = t.val(m.ctc_logprobs(t, t.leaf(enc_out)));
        search::BeamConfig bc;
        bc.lambda = 0.0;
        bc.gamma = 0.0;
        bc.max_len_ratio = max_len_ratio;
        search::DecodeResult r = search::greedy_decode(m.dec, m.att, enc_out, ctc_lp, nullptr, bc);
        metrics::EditCounts c = metrics::align(u.target, r.ids);
        errors += c.total();
        ref += static_cast<long long>(u.target.size());
    }
    if (ref == 0) throw Error("dev_cer: empty references");
    return 100.0 * static_cast<double>(errors) / static_cast<double>(ref);
}

inline std::vector<std::pair<std::string, Tensor*>> trainer_tensors(model::Model& m,
                                                                    opt::AdaDelta& optim,
                                                                    Tensor& epoch_count,
                                                                    Tensor& best_cer) {
    auto out = m.named_tensors();
    for (auto& kv : optim.state_tensors("trainer.optim")) out.push_back(kv);
    out.emplace_back("trainer.epoch", &epoch_count);
    out.emplace_back("trainer.best_dev_cer", &best_cer);
    return out;
}

inline void save_named(const std::string& path,
                       const std::vector<std::pair<std::string, Tensor*>>& tensors) {
    std::vector<std::pair<std::string, Tensor>> flat;
    flat.reserve(tensors.size());
    for (const auto& [name, t] : tensors) flat.emplace_back(name, *t);
    ckpt::save_tensors(path, flat);
}

inline void load_named(const std::string& path,
                       const std::vector<std::pair<std::string, Tensor*>>& tensors) {
    auto file = ckpt::load_tensors(path);
    for (const auto& [name, dst] : tensors) {
        bool found = false;
        for (auto& [fname, ft] : file) {
            if (fname != name) continue;
            if (!(ft.shape == dst->shape))
                throw Error("train: checkpoint shape mismatch for " + name);
            *dst = ft;
            found = true;
            break;
        }
        if (!found) throw Error("train: checkpoint missing tensor " + name);
    }
}

/// Rounds tensors to checkpoint storage precision in place. Applied at every
/// persisted epoch boundary so a continuous run and a run resumed from
/// last.ckpt follow bit-identical trajectories.
inline void snap_to_storage(const std::vector<std::pair<std::string, Tensor*>>& tensors) {
    for (const auto& [name, t] : tensors)
        for (double& x : t->v) x = static_cast<double>(static_cast<float>(x));
}

}  // namespace detail

/// Runs MTL training with AdaDelta. Per-epoch metrics go to the returned
/// report and, when out_dir is set, to <out_dir>/metrics.csv along with
/// last.ckpt (full trainer state, for resuming) and best.ckpt (parameters of
/// the best dev-CER epoch). All randomness derives from {seed, epoch}, so a
/// resumed run replays the remaining epochs of the original schedule.
inline TrainReport train(model::Model& m, opt::AdaDelta& optim, const Dataset& train_set,
                         const Dataset& dev_set, const TrainConfig& cfg) {
    if (cfg.epochs < 1) throw Error("train: epochs must be >= 1");
    if (train_set.utts.empty() || dev_set.utts.empty())
        throw Error("train: train and dev sets must be nonempty");

    std::vector<Param*> ps;
    m.collect(ps);
    optim.init(ps);

    Tensor epoch_count({1}), best_cer({1}, std::numeric_limits<double>::infinity());
    auto trainer_state = detail::trainer_tensors(m, optim, epoch_count, best_cer);

    TrainReport report;
    const bool persist = !cfg.out_dir.empty();
    int start_epoch = 0;
    if (persist) {
        std::filesystem::create_directories(cfg.out_dir);
        report.best_path = cfg.out_dir + "/best.ckpt";
        report.last_path = cfg.out_dir + "/last.ckpt";
        report.metrics_path = cfg.out_dir + "/metrics.csv";
        if (cfg.resume && std::filesystem::exists(report.last_path)) {
            detail::load_named(report.last_path, trainer_state);
            start_epoch = static_cast<int>(epoch_count.v[0]);
        }
    }
    report.best_dev_cer = best_cer.v[0];

    std::ofstream csv;
    if (persist) {
        const bool append = start_epoch > 0 && std::filesystem::exists(report.metrics_path);
        csv.open(report.metrics_path, append ? std::ios::app : std::ios::trunc);
        if (!csv) throw Error("train: cannot open " + report.metrics_path);
        if (!append) csv << "epoch,train_loss,dev_loss,dev_cer,wall_s\n";
    }

    for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        auto plan = make_batches(train_set.utts, cfg.batch_size,
                                 Rng::mix(cfg.seed, static_cast<std::uint64_t>(epoch),
                                          detail::kSeedBatchPlan),
                                 cfg.frame_cap);
        double loss_sum = 0.0;
        long long loss_count = 0;
        for (std::size_t bi = 0; bi < plan.size(); ++bi) {
            const Batch& b = plan[bi];
            std::vector<Tensor> inputs;
            std::vector<std::vector<int>> targets;
            inputs.reserve(b.utt.size());
            for (int ui : b.utt) {
                inputs.push_back(detail::utt_input(train_set, train_set.utts[ui],
                                                   cfg.augment_close, cfg.aug_snr_lo,
                                                   cfg.aug_snr_hi, cfg.seed, epoch, ui));
                targets.push_back(train_set.utts[ui].target);
            }
            Tape t;
            Rng drop_rng(Rng::mix(Rng::mix(cfg.seed, static_cast<std::uint64_t>(epoch),
                                           detail::kSeedDropout),
                                  static_cast<std::uint64_t>(bi), detail::kSeedDropout));
            MtlResult r = mtl_loss(t, m, inputs, targets, b.tag, cfg.lambda, true, drop_rng);
            report.warnings += r.warnings;
            const double lv = t.val(r.loss).v[0];
            if (!std::isfinite(lv))
                throw Error("train: non-finite loss in epoch " + std::to_string(epoch) +
                            " batch " + std::to_string(bi) + " (first utterance " +
                            train_set.utts[b.utt.front()].id + ")");
            for (Param* p : ps) p->zero_grad();
            t.backward(r.loss);
            opt::clip_grad_norm(ps, cfg.clip_norm);
            optim.step(ps);
            loss_sum += lv * r.counted;
            loss_count += r.counted;
        }

        EpochRow row;
        row.epoch = epoch;
        row.train_loss = loss_count > 0 ? loss_sum / static_cast<double>(loss_count) : 0.0;

        // Dev loss (eval mode, no augmentation) and greedy CER.
        auto dev_plan = make_batches(dev_set.utts, cfg.batch_size, 0, cfg.frame_cap);
        double dev_sum = 0.0;
        long long dev_count = 0;
        Rng dev_rng(0);
        for (const Batch& b : dev_plan) {
            std::vector<Tensor> inputs;
            std::vector<std::vector<int>> targets;
            for (int ui : b.utt) {
                inputs.push_back(enc::to_cnn_layout(dev_set.utts[ui].feats,
                                                    dev_set.utts[ui].channels));
                targets.push_back(dev_set.utts[ui].target);
            }
            Tape t;
            MtlResult r = mtl_loss(t, m, inputs, targets, b.tag, cfg.lambda, false, dev_rng);
            dev_sum += t.val(r.loss).v[0] * r.counted;
            dev_count += r.counted;
        }
        row.dev_loss = dev_count > 0 ? dev_sum / static_cast<double>(dev_count) : 0.0;
        row.dev_cer = detail::dev_cer_greedy(m, dev_set, cfg.dev_max_len_ratio);
        row.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        report.rows.push_back(row);

        epoch_count.v[0] = static_cast<double>(epoch + 1);
        if (row.dev_cer < best_cer.v[0]) {
            best_cer.v[0] = row.dev_cer;
            report.best_dev_cer = row.dev_cer;
            if (persist) m.save(report.best_path);
        }
        if (persist) {
            detail::save_named(report.last_path, trainer_state);
            detail::snap_to_storage(trainer_state);
            char line[160];
            std::snprintf(line, sizeof line, "%d,%.6f,%.6f,%.6f,%.3f\n", row.epoch,
                          row.train_loss, row.dev_loss, row.dev_cer, row.wall_s);
            csv << line;
            csv.flush();
        }
    }
    return report;
}

}  // namespace e2e::train
