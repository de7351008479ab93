#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <cstring>
#include <sstream>
#include <string>
#include <vector>

#include "e2e/checkpoint.hpp"
#include "e2e/config.hpp"
#include "e2e/lm.hpp"
#include "e2e/metrics.hpp"
#include "e2e/model.hpp"
#include "e2e/search.hpp"
#include "e2e/toy_corpus.hpp"
#include "e2e/training.hpp"

namespace e2e::pipe {

using cfg::Config;

// ---------------------------------------------------------------------------
// Config -> component configurations
// ---------------------------------------------------------------------------

inline feat::FeatureConfig feature_config(const Config& c) {
    feat::FeatureConfig fc;
    const int sr = c.get_int("sample_rate", 8000);
    fc.frame_len = std::max(2, static_cast<int>(sr * c.get_double("frame_ms", 25.0) / 1000.0));
    fc.hop = std::max(1, static_cast<int>(sr * c.get_double("hop_ms", 10.0) / 1000.0));
    fc.n_mels = c.get_int("n_mels", 24);
    fc.fmin = c.get_double("fmin", 20.0);
    fc.pitch = c.get_bool("pitch", false);
    return fc;
}

inline toy::ToyCorpusSpec corpus_spec(const Config& c) {
    toy::ToyCorpusSpec s;
    s.n_words = c.get_int("n_words", s.n_words);
    s.min_words = c.get_int("min_words", s.min_words);
    s.max_words = c.get_int("max_words", s.max_words);
    s.n_train = c.get_int("n_train", s.n_train);
    s.n_dev = c.get_int("n_dev", s.n_dev);
    s.n_test = c.get_int("n_test", s.n_test);
    s.sample_rate = c.get_int("sample_rate", s.sample_rate);
    s.channels_distant = c.get_int("channels_distant", s.channels_distant);
    s.channels_close = c.get_int("channels_close", s.channels_close);
    s.distant_snr_db = c.get_double("distant_snr", s.distant_snr_db);
    s.close_snr_db = c.get_double("close_snr", s.close_snr_db);
    s.max_delay_ms = c.get_double("max_delay_ms", s.max_delay_ms);
    s.max_gain_db = c.get_double("max_gain_db", s.max_gain_db);
    s.word_min_s = c.get_double("word_min_s", s.word_min_s);
    s.word_max_s = c.get_double("word_max_s", s.word_max_s);
    s.gap_s = c.get_double("gap_s", s.gap_s);
    s.max_xcorr = c.get_double("max_xcorr", s.max_xcorr);
    s.seed = c.get_u64("seed", s.seed);
    return s;
}

inline model::ModelConfig model_config(const Config& c, int n_chars, int feats_per_channel) {
    model::ModelConfig mc;
    mc.encoder.kind = enc::encoder_kind_from_name(c.get_str("encoder", "vgg"));
    mc.encoder.parallel = c.get_bool("parallel", false);
    mc.encoder.channels_distant = c.get_int("model_channels_distant", 4);
    mc.encoder.channels_close = c.get_int("model_channels_close", 2);
    mc.encoder.feats_per_channel = feats_per_channel;
    mc.encoder.planes1 = c.get_int("planes1", 6);
    mc.encoder.planes2 = c.get_int("planes2", 12);
    mc.encoder.rnn_layers = c.get_int("rnn_layers", 2);
    mc.encoder.rnn_cells = c.get_int("rnn_cells", 64);
    mc.encoder.rnn_proj = c.get_int("rnn_proj", 64);
    mc.encoder.dropout_p = c.get_double("dropout", 0.0);
    mc.n_chars = n_chars;
    mc.emb_dim = c.get_int("emb_dim", 32);
    mc.dec_hidden = c.get_int("dec_hidden", 64);
    mc.att_dim = c.get_int("att_dim", 64);
    mc.att_filters = c.get_int("att_filters", 4);
    mc.att_width = c.get_int("att_width", 25);
    return mc;
}

inline train::TrainConfig train_config(const Config& c) {
    train::TrainConfig tc;
    tc.lambda = c.get_double("lambda", tc.lambda);
    tc.epochs = c.get_int("epochs", tc.epochs);
    tc.batch_size = c.get_int("batch_size", tc.batch_size);
    tc.clip_norm = c.get_double("clip_norm", tc.clip_norm);
    tc.seed = c.get_u64("seed", tc.seed);
    tc.augment_close = c.get_bool("augment", tc.augment_close);
    tc.aug_snr_lo = c.get_double("aug_snr_lo", tc.aug_snr_lo);
    tc.aug_snr_hi = c.get_double("aug_snr_hi", tc.aug_snr_hi);
    tc.frame_cap = c.get_int("frame_cap", tc.frame_cap);
    tc.dev_max_len_ratio = c.get_double("max_len_ratio", tc.dev_max_len_ratio);
    return tc;
}

inline void set_num(Config& c, const std::string& key, double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    c.set(key, buf);
}

/// Materializes every key `decode` needs to rebuild the feature extractor and
/// the model exactly as trained, on top of the training configuration.
inline Config resolved_model_conf(const Config& conf, const model::ModelConfig& mc) {
    Config out = conf;
    out.set("sample_rate", std::to_string(conf.get_int("sample_rate", 8000)));
    set_num(out, "frame_ms", conf.get_double("frame_ms", 25.0));
    set_num(out, "hop_ms", conf.get_double("hop_ms", 10.0));
    out.set("n_mels", std::to_string(conf.get_int("n_mels", 24)));
    set_num(out, "fmin", conf.get_double("fmin", 20.0));
    out.set("pitch", conf.get_bool("pitch", false) ? "true" : "false");

    out.set("encoder", enc::encoder_kind_name(mc.encoder.kind));
    out.set("parallel", mc.encoder.parallel ? "true" : "false");
    out.set("model_channels_distant", std::to_string(mc.encoder.channels_distant));
    out.set("model_channels_close", std::to_string(mc.encoder.channels_close));
    out.set("planes1", std::to_string(mc.encoder.planes1));
    out.set("planes2", std::to_string(mc.encoder.planes2));
    out.set("rnn_layers", std::to_string(mc.encoder.rnn_layers));
    out.set("rnn_cells", std::to_string(mc.encoder.rnn_cells));
    out.set("rnn_proj", std::to_string(mc.encoder.rnn_proj));
    out.set("emb_dim", std::to_string(mc.emb_dim));
    out.set("dec_hidden", std::to_string(mc.dec_hidden));
    out.set("att_dim", std::to_string(mc.att_dim));
    out.set("att_filters", std::to_string(mc.att_filters));
    out.set("att_width", std::to_string(mc.att_width));

    out.set("distant_channels", std::to_string(conf.get_int("distant_channels", 0)));
    out.set("close_channels", std::to_string(conf.get_int("close_channels", 0)));
    out.set("cmvn", conf.get_bool("cmvn", true) ? "true" : "false");
    return out;
}

inline search::BeamConfig beam_config(const Config& c) {
    search::BeamConfig bc;
    bc.lambda = c.get_double("decode_lambda", 0.0);
    bc.gamma = c.get_double("gamma", 0.3);
    bc.beam = c.get_int("beam", 20);
    bc.max_len_ratio = c.get_double("max_len_ratio", 0.8);
    bc.nbest = c.get_int("nbest", 0);
    return bc;
}

// ---------------------------------------------------------------------------
// Full-precision tensor container for pipeline-internal artifacts (feature
// cache, normalization statistics). Unlike model checkpoints these must
// round-trip f64 payloads bit-exactly, so they get their own format.
// ---------------------------------------------------------------------------

inline void save_tensors64(const std::string& path,
                           const std::vector<std::pair<std::string, ad::Tensor>>& tensors) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("tensors64: cannot open " + path + " for writing");
    out.write("E2EF", 4);
    ckpt::detail::write_u32(out, 1);
    ckpt::detail::write_u32(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        ckpt::detail::write_u32(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        ckpt::detail::write_u32(out, static_cast<std::uint32_t>(t.rank()));
        for (int d = 0; d < t.rank(); ++d)
            ckpt::detail::write_u32(out, static_cast<std::uint32_t>(t.dim(d)));
        out.write(reinterpret_cast<const char*>(t.v.data()),
                  static_cast<std::streamsize>(t.v.size() * sizeof(double)));
    }
    if (!out) throw Error("tensors64: short write to " + path);
}

inline std::vector<std::pair<std::string, ad::Tensor>> load_tensors64(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("tensors64: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "E2EF", 4) != 0)
        throw Error("tensors64: bad magic in " + path);
    const std::uint32_t version = ckpt::detail::read_u32(in);
    if (version != 1) throw Error("tensors64: unsupported version " + std::to_string(version));
    const std::uint32_t count = ckpt::detail::read_u32(in);
    std::vector<std::pair<std::string, ad::Tensor>> tensors;
    tensors.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = ckpt::detail::read_u32(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const std::uint32_t rank = ckpt::detail::read_u32(in);
        std::vector<int> shape(rank);
        for (std::uint32_t d = 0; d < rank; ++d)
            shape[d] = static_cast<int>(ckpt::detail::read_u32(in));
        ad::Tensor t(shape);
        in.read(reinterpret_cast<char*>(t.v.data()),
                static_cast<std::streamsize>(t.v.size() * sizeof(double)));
        if (!in) throw Error("tensors64: truncated tensor " + name + " in " + path);
        tensors.emplace_back(std::move(name), std::move(t));
    }
    return tensors;
}

// ---------------------------------------------------------------------------
// Manifest -> dataset
// ---------------------------------------------------------------------------

struct DataOptions {
    bool use_distant = true, use_close = true;
    int distant_channels = 0, close_channels = 0;  // keep the first k channels; 0 = all
    bool keep_close_audio = false;                 // retain close waveforms for augmentation
    std::string cache_dir;                         // optional feature cache
};

inline DataOptions data_options(const Config& c) {
    DataOptions d;
    const std::string tags = c.get_str("use_tags", c.get_bool("parallel", false) ? "both" : "distant");
    if (tags == "both") {
        d.use_distant = d.use_close = true;
    } else if (tags == "distant") {
        d.use_distant = true;
        d.use_close = false;
    } else if (tags == "close") {
        d.use_distant = false;
        d.use_close = true;
    } else {
        throw Error("config: use_tags must be both|distant|close, got '" + tags + "'");
    }
    d.distant_channels = c.get_int("distant_channels", 0);
    d.close_channels = c.get_int("close_channels", 0);
    d.keep_close_audio = c.get_bool("augment", false);
    return d;
}

inline feat::Waveform take_channels(feat::Waveform w, int k) {
    if (k > 0 && k < w.channels()) w.samples.resize(k);
    return w;
}

inline std::string manifest_dir(const std::string& manifest) {
    const auto parent = std::filesystem::path(manifest).parent_path();
    return parent.empty() ? std::string(".") : parent.string();
}

inline std::string cache_path(const std::string& dir, const std::string& id, int channels) {
    return dir + "/" + id + (channels > 0 ? "-ch" + std::to_string(channels) : "") + ".feat";
}

/// Builds a training/decoding dataset from a manifest, extracting features
/// on the fly (or through the cache directory when set).
inline train::Dataset load_dataset(const std::string& manifest, const vocab::Charset& cs,
                                   const feat::FeatureConfig& fc, const DataOptions& opt) {
    const auto rows = toy::load_manifest(manifest);
    const std::string base = manifest_dir(manifest);
    if (!opt.cache_dir.empty()) std::filesystem::create_directories(opt.cache_dir);

    train::Dataset ds;
    ds.feat_cfg = fc;
    for (const auto& row : rows) {
        if (row.tag == feat::ArrayTag::distant && !opt.use_distant) continue;
        if (row.tag == feat::ArrayTag::close && !opt.use_close) continue;
        const int want =
            row.tag == feat::ArrayTag::distant ? opt.distant_channels : opt.close_channels;

        train::TrainUtt u;
        u.id = row.id;
        u.tag = row.tag;
        u.target = cs.encode(row.transcript);

        std::optional<feat::Waveform> wav;
        auto load_wav = [&]() -> const feat::Waveform& {
            if (!wav) wav = take_channels(feat::read_wav(base + "/" + row.path), want);
            return *wav;
        };

        const std::string cpath =
            opt.cache_dir.empty() ? std::string() : cache_path(opt.cache_dir, row.id, want);
        if (!cpath.empty() && std::filesystem::exists(cpath)) {
            auto tensors = load_tensors64(cpath);
            bool have_frames = false;
            for (auto& [name, t] : tensors) {
                if (name == "frames") {
                    u.feats = t;
                    have_frames = true;
                } else if (name == "channels") {
                    u.channels = static_cast<int>(t.v.at(0));
                }
            }
            if (!have_frames || u.channels < 1)
                throw Error("features: bad cache file " + cpath);
        } else {
            const feat::Waveform& w = load_wav();
            u.feats = feat::extract_features(w, row.tag, fc).frames;
            u.channels = w.channels();
            if (!cpath.empty()) {
                ad::Tensor ch({1}, static_cast<double>(u.channels));
                save_tensors64(cpath, {{"frames", u.feats}, {"channels", ch}});
            }
        }
        if (opt.keep_close_audio && row.tag == feat::ArrayTag::close) u.audio = load_wav();
        ds.utts.push_back(std::move(u));
    }
    if (ds.utts.empty()) throw Error("dataset: no usable rows in " + manifest);
    return ds;
}

inline std::vector<std::string> manifest_transcripts(const std::string& manifest) {
    std::vector<std::string> out;
    for (const auto& row : toy::load_manifest(manifest)) out.push_back(row.transcript);
    if (out.empty()) throw Error("manifest: no rows in " + manifest);
    return out;
}

/// Sets the encoder channel counts from the data. A single-branch encoder
/// requires one uniform channel count; the parallel encoder takes one per
/// array.
inline void infer_channels(const train::Dataset& ds, model::ModelConfig& mc) {
    if (mc.encoder.parallel) {
        for (const auto& u : ds.utts)
            (u.tag == feat::ArrayTag::distant ? mc.encoder.channels_distant
                                              : mc.encoder.channels_close) = u.channels;
        return;
    }
    mc.encoder.channels_distant = ds.utts.front().channels;
    for (const auto& u : ds.utts)
        if (u.channels != mc.encoder.channels_distant)
            throw Error(
                "model: a single-branch encoder needs one channel count; restrict use_tags or "
                "enable the parallel encoder");
}

// ---------------------------------------------------------------------------
// CMVN over a dataset (statistics kept separately per array tag, since the
// feature dimensionality differs between arrays)
// ---------------------------------------------------------------------------

struct TagCmvn {
    std::optional<feat::CmvnStats> distant, close;

    const std::optional<feat::CmvnStats>& by_tag(feat::ArrayTag t) const {
        return t == feat::ArrayTag::distant ? distant : close;
    }
};

inline TagCmvn compute_cmvn(const train::Dataset& ds) {
    TagCmvn out;
    for (const auto& u : ds.utts) {
        feat::FeatureSequence f;
        f.frames = u.feats;
        f.tag = u.tag;
        auto& slot = u.tag == feat::ArrayTag::distant ? out.distant : out.close;
        if (!slot) slot.emplace();
        slot->add(f);
    }
    return out;
}

inline void apply_cmvn(train::Dataset& ds, const TagCmvn& stats) {
    for (auto& u : ds.utts) {
        const auto& slot = stats.by_tag(u.tag);
        if (!slot) throw Error("cmvn: no statistics for tag " + std::string(feat::tag_name(u.tag)));
        feat::FeatureSequence f;
        f.frames = u.feats;
        f.tag = u.tag;
        u.feats = feat::cmvn_apply(f, *slot).frames;
    }
    // Augmented close utterances are re-extracted from audio and must be
    // normalized with the same statistics.
    if (stats.close) ds.cmvn = *stats.close;
}

inline void save_cmvn(const std::string& path, const TagCmvn& stats) {
    std::vector<std::pair<std::string, ad::Tensor>> tensors;
    auto put = [&](const char* tag, const std::optional<feat::CmvnStats>& s) {
        if (!s) return;
        const int d = static_cast<int>(s->sum.size());
        ad::Tensor sum({d}), sumsq({d}), count({1}, static_cast<double>(s->count));
        sum.v = s->sum;
        sumsq.v = s->sumsq;
        tensors.emplace_back(std::string("cmvn.") + tag + ".sum", sum);
        tensors.emplace_back(std::string("cmvn.") + tag + ".sumsq", sumsq);
        tensors.emplace_back(std::string("cmvn.") + tag + ".count", count);
    };
    put("distant", stats.distant);
    put("close", stats.close);
    save_tensors64(path, tensors);
}

inline TagCmvn load_cmvn(const std::string& path) {
    const auto tensors = load_tensors64(path);
    TagCmvn out;
    auto get = [&](const std::string& name) -> const ad::Tensor* {
        for (const auto& [n, t] : tensors)
            if (n == name) return &t;
        return nullptr;
    };
    for (const char* tag : {"distant", "close"}) {
        const ad::Tensor* sum = get(std::string("cmvn.") + tag + ".sum");
        const ad::Tensor* sumsq = get(std::string("cmvn.") + tag + ".sumsq");
        const ad::Tensor* count = get(std::string("cmvn.") + tag + ".count");
        if (!sum) continue;
        if (!sumsq || !count || sumsq->v.size() != sum->v.size())
            throw Error("cmvn: malformed statistics file " + path);
        feat::CmvnStats s;
        s.sum = sum->v;
        s.sumsq = sumsq->v;
        s.count = static_cast<std::int64_t>(count->v.at(0));
        (std::string(tag) == "distant" ? out.distant : out.close) = s;
    }
    if (!out.distant && !out.close) throw Error("cmvn: no statistics in " + path);
    return out;
}

// ---------------------------------------------------------------------------
// Decoding and scoring
// ---------------------------------------------------------------------------

struct DecodeHyp {
    std::string id;
    std::string text;
    std::vector<search::DecodeResult> nbest;  // front() is the best hypothesis
};

/// Decodes every utterance of `ds` whose tag equals `branch` with the given
/// beam configuration; hypotheses come back in manifest order.
inline std::vector<DecodeHyp> decode_dataset(model::Model& m, const vocab::Charset& cs,
                                             const train::Dataset& ds, feat::ArrayTag branch,
                                             const lm::MultilevelLm* mlm,
                                             const search::BeamConfig& bc) {
    std::vector<DecodeHyp> out;
    for (const auto& u : ds.utts) {
        if (u.tag != branch) continue;
        const ad::Tensor enc_out = m.encoder.encode(enc::to_cnn_layout(u.feats, u.channels), branch);
        ad::Tape t;
        const ad::Tensor ctc_lp = t.val(m.ctc_logprobs(t, t.leaf(enc_out)));
        DecodeHyp h;
        h.id = u.id;
        h.nbest = search::beam_search(m.dec, m.att, enc_out, ctc_lp, mlm, bc);
        if (h.nbest.empty()) throw Error("decode: empty n-best for " + u.id);
        h.text = cs.decode(h.nbest.front().ids);
        out.push_back(std::move(h));
    }
    if (out.empty()) throw Error("decode: no utterances with the requested tag");
    return out;
}

/// Tab-split preserving empty fields (an empty hypothesis is a legal row).
inline std::vector<std::string> split_tsv(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = line.find('\t', start);
        if (pos == std::string::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
}

/// Reads "id<TAB>text" rows; also accepts 5-column manifests (using their
/// transcript column) and bare transcripts with no tab at all, which are
/// keyed by line number so two plain-text files pair up line by line.
inline std::vector<std::pair<std::string, std::string>> read_trn(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error("trn: cannot open " + path);
    std::vector<std::pair<std::string, std::string>> out;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const std::vector<std::string> fields = split_tsv(line);
        if (fields.size() == 1)
            out.emplace_back("#" + std::to_string(lineno), fields[0]);
        else if (fields.size() == 2)
            out.emplace_back(fields[0], fields[1]);
        else if (fields.size() == 5)
            out.emplace_back(fields[0], fields[2]);
        else
            throw Error("trn: " + path + ":" + std::to_string(lineno) +
                        ": expected 1 (bare text), 2 (id, text) or 5 (manifest) fields, got " +
                        std::to_string(fields.size()));
    }
    if (out.empty()) throw Error("trn: no rows in " + path);
    return out;
}

/// Joins hypothesis rows to references by id and scores both granularities.
/// Every hypothesis id must have a reference; unmatched references are ignored
/// so a subset decode can still be scored.
inline metrics::ScoreReport score_files(const std::string& ref_path, const std::string& hyp_path) {
    const auto refs = read_trn(ref_path);
    const auto hyps = read_trn(hyp_path);
    std::map<std::string, std::string> by_id;
    for (const auto& [id, text] : refs) by_id[id] = text;
    std::vector<std::string> r, h;
    for (const auto& [id, text] : hyps) {
        auto it = by_id.find(id);
        if (it == by_id.end()) throw Error("score: hypothesis id '" + id + "' has no reference");
        r.push_back(it->second);
        h.push_back(text);
    }
    return metrics::score_corpus(r, h);
}

}  // namespace e2e::pipe
