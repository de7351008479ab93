#pragma once

#include <string>
#include <utility>
#include <vector>

#include "e2e/attention.hpp"
#include "e2e/checkpoint.hpp"
#include "e2e/ctc.hpp"
#include "e2e/encoder.hpp"
#include "e2e/layers.hpp"

namespace e2e::model {

using ad::Param;
using ad::Tape;
using ad::Tensor;
using ad::Var;

struct ModelConfig {
    enc::EncoderConfig encoder;
    int n_chars = 0;  // character ids 1..n_chars; 0 is blank (CTC) / eos (decoder)
    int emb_dim = 64;
    int dec_hidden = 64;
    int att_dim = 64;
    int att_filters = 10;
    int att_width = 100;
};

/// The assembled recognizer: shared encoder, a linear CTC head over the
/// encoder output, and the attention decoder. Both output layers emit
/// n_chars+1 symbols with id 0 doing double duty (CTC blank, decoder eos).
struct Model {
    ModelConfig cfg;
    enc::Encoder encoder;
    nn::Linear ctc_head;
    att::Attention att;
    att::Decoder dec;

    Model() = default;
    Model(const ModelConfig& c, Rng& rng) : cfg(c) {
        if (c.n_chars < 1) throw Error("model: need at least one character");
        encoder = enc::Encoder(c.encoder, rng);
        const int enc_d = encoder.out_dim();
        ctc_head = nn::Linear("model.ctc_head", enc_d, c.n_chars + 1, rng);
        att = att::Attention("model.att", enc_d, c.dec_hidden, c.att_dim, c.att_filters,
                             c.att_width, rng);
        dec = att::Decoder("model.dec", c.n_chars, c.emb_dim, enc_d, c.dec_hidden, rng);
    }

    /// Per-frame CTC log-posteriors (T', n_chars+1) over one encoded sequence.
    Var ctc_logprobs(Tape& t, Var h) { return t.log_softmax(ctc_head.apply(t, h)); }

    void collect(std::vector<Param*>& out) {
        encoder.collect(out);
        ctc_head.collect(out);
        att.collect(out);
        dec.collect(out);
    }
    /// Non-trainable tensors (normalization statistics and step counters).
    void collect_state(std::vector<std::pair<std::string, Tensor*>>& out) {
        encoder.collect_state(out);
    }

    /// Everything that defines the model numerically, for checkpoints.
    std::vector<std::pair<std::string, Tensor*>> named_tensors() {
        std::vector<Param*> ps;
        collect(ps);
        std::vector<std::pair<std::string, Tensor*>> out;
        out.reserve(ps.size() + 8);
        for (Param* p : ps) out.emplace_back(p->name, &p->value);
        collect_state(out);
        return out;
    }

    void save(const std::string& path) {
        std::vector<std::pair<std::string, Tensor>> tensors;
        for (auto& [name, t] : named_tensors()) tensors.emplace_back(name, *t);
        ckpt::save_tensors(path, tensors);
    }
    void load(const std::string& path) {
        auto file = ckpt::load_tensors(path);
        std::vector<std::pair<std::string, Tensor*>> mine = named_tensors();
        for (auto& [name, dst] : mine) {
            bool found = false;
            for (auto& [fname, ft] : file) {
                if (fname != name) continue;
                if (!(ft.shape == dst->shape))
                    throw Error("model: shape mismatch for " + name + ": file " +
                                ft.shape_str() + " vs model " + dst->shape_str());
                *dst = ft;
                found = true;
                break;
            }
            if (!found) throw Error("model: missing tensor " + name + " in " + path);
        }
    }
};

}  // namespace e2e::model
