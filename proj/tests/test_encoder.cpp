#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "e2e/encoder.hpp"
#include "test_util.hpp"

using namespace e2e;
using ad::Param;
using ad::Tape;
using ad::Tensor;
using ad::Var;
using feat::ArrayTag;
using testutil::check_params;
using testutil::rand_tensor;
using testutil::weighted_sum;

namespace {

enc::EncoderConfig tiny_config(enc::EncoderKind kind, bool parallel = false) {
    enc::EncoderConfig c;
    c.kind = kind;
    c.parallel = parallel;
    c.channels_distant = parallel ? 4 : 1;
    c.channels_close = 2;
    c.feats_per_channel = 8;
    c.planes1 = 3;
    c.planes2 = 4;
    c.rnn_layers = 2;
    c.rnn_cells = 5;
    c.rnn_proj = 4;
    return c;
}

}  // namespace

TEST_CASE("subsampling law matches two rounds of ceil-mode halving") {
    CHECK(enc::subsampled_len(4) == 1);
    CHECK(enc::subsampled_len(8) == 2);
    CHECK(enc::subsampled_len(9) == 3);
    CHECK(enc::subsampled_len(100) == 25);
    for (int t = 4; t <= 40; ++t) {
        const int expect = static_cast<int>(
            std::ceil(std::ceil(static_cast<double>(t) / 2.0) / 2.0));
        CHECK(enc::subsampled_len(t) == expect);
    }
}

TEST_CASE("to_cnn_layout splits stacked channels") {
    Tensor frames({2, 6});  // T=2, 3 channels x 2 feats
    for (int i = 0; i < 12; ++i) frames.v[i] = i;
    Tensor x = enc::to_cnn_layout(frames, 3);
    REQUIRE(x.shape == std::vector<int>{3, 2, 2});
    // x(c, m, t) = frames(t, c*2+m)
    CHECK(x.v[0] == 0.0);   // c0 m0 t0
    CHECK(x.v[1] == 6.0);   // c0 m0 t1
    CHECK(x.v[2] == 1.0);   // c0 m1 t0
    CHECK(x.v[4] == 2.0);   // c1 m0 t0
    CHECK(x.v[11] == 11.0); // c2 m1 t1
    CHECK_THROWS_AS(enc::to_cnn_layout(frames, 5), Error);
    CHECK_THROWS_AS(enc::to_cnn_layout(Tensor({4}), 2), Error);
}

TEST_CASE("encoder output length follows the subsampling law") {
    Rng rng(1);
    enc::Encoder encd(tiny_config(enc::EncoderKind::vgg), rng);
    for (int t : {4, 5, 8, 9, 17, 40}) {
        Tape tape;
        Rng r2(2);
        auto out = encd.encode_batch(tape, {rand_tensor({1, 8, t}, rng)}, ArrayTag::distant,
                                     false, r2);
        REQUIRE(out.size() == 1);
        CHECK(tape.val(out[0]).dim(0) == enc::subsampled_len(t));
        CHECK(tape.val(out[0]).dim(1) == encd.out_dim());
    }
}

TEST_CASE("encoder rejects too-short input naming the length") {
    Rng rng(2);
    enc::Encoder encd(tiny_config(enc::EncoderKind::vgg), rng);
    Tape tape;
    try {
        Rng r2(3);
        encd.encode_batch(tape, {Tensor({1, 8, 3})}, ArrayTag::distant, false, r2);
        FAIL("expected error");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("3") != std::string::npos);
    }
}

TEST_CASE("zero input with zero biases encodes to zero") {
    Rng rng(3);
    enc::Encoder encd(tiny_config(enc::EncoderKind::vgg), rng);
    Tape tape;
    Rng r2(4);
    auto out = encd.encode_batch(tape, {Tensor({1, 8, 8})}, ArrayTag::distant, false, r2);
    for (double v : tape.val(out[0]).v) CHECK(v == 0.0);
}

TEST_CASE("residual encoder emits the same shape as the vgg encoder") {
    Rng rng(4);
    enc::Encoder vgg(tiny_config(enc::EncoderKind::vgg), rng);
    enc::Encoder res(tiny_config(enc::EncoderKind::res), rng);
    enc::Encoder brn(tiny_config(enc::EncoderKind::res_brn), rng);
    const Tensor x = rand_tensor({1, 8, 9}, rng);
    for (auto* e : {&vgg, &res, &brn}) {
        Tape tape;
        Rng r2(5);
        auto out = e->encode_batch(tape, {x}, ArrayTag::distant, false, r2);
        CHECK(tape.val(out[0]).shape == std::vector<int>{3, 4});
    }
}

TEST_CASE("residual front-end counts six convolutions including skips") {
    Rng rng(5);
    enc::CnnFrontEnd fe("fe", enc::EncoderKind::res, 2, 3, 4, 0.0, rng);
    std::vector<Param*> ps;
    fe.collect(ps);
    int convs = 0;
    for (Param* p : ps)
        if (p->value.rank() == 4) ++convs;
    CHECK(convs == 6);
}

TEST_CASE("vgg front-end gradients") {
    int tested = 0;
    for (int seed = 50; tested < 20; ++seed) {
        Rng rng(seed);
        enc::VggCnn cnn("cnn", 1, 2, 2, rng);
        const Tensor x = rand_tensor({1, 8, 8}, rng);
        {
            // Keep relu pre-activations away from the kink for finite
            // differences; pooling ties are broken by random data already.
            Tape t;
            Var u1 = cnn.c1a.apply(t, t.constant(x));
            Var u2 = cnn.c1b.apply(t, t.relu(u1));
            Var u3 = cnn.c2a.apply(t, t.maxpool2d(t.relu(u2)));
            Var u4 = cnn.c2b.apply(t, t.relu(u3));
            double m = 1e9;
            for (Var u : {u1, u2, u3, u4})
                for (double v : t.val(u).v) m = std::min(m, std::abs(v));
            if (m < 2e-3) continue;
        }
        ++tested;
        const Tensor w = rand_tensor({2, 2, 2}, rng);
        auto weighted = [&](Tape& t, Var y) { return weighted_sum(t, y, w); };
        std::vector<Param*> ps;
        cnn.collect(ps);
        CHECK(check_params([&](Tape& t) { return weighted(t, cnn.apply(t, t.constant(x))); }, ps,
                           1e-4) < 1.0);
        double err = ad::grad_check(
            [&](Tape& t, const std::vector<Var>& vs) { return weighted(t, cnn.apply(t, vs[0])); },
            {x});
        CHECK(err < 1e-5);
    }
}

TEST_CASE("full encoder gradients through cnn, flatten and blstmp") {
    int tested = 0;
    for (int seed = 150; tested < 5; ++seed) {
        Rng rng(seed);
        auto cfg = tiny_config(enc::EncoderKind::vgg);
        cfg.rnn_layers = 1;
        enc::Encoder encd(cfg, rng);
        const Tensor x = rand_tensor({1, 8, 8}, rng);
        {
            Tape t;
            auto& cnn = *encd.branch_distant.vgg;
            Var u1 = cnn.c1a.apply(t, t.constant(x));
            Var u2 = cnn.c1b.apply(t, t.relu(u1));
            Var u3 = cnn.c2a.apply(t, t.maxpool2d(t.relu(u2)));
            Var u4 = cnn.c2b.apply(t, t.relu(u3));
            double m = 1e9;
            for (Var u : {u1, u2, u3, u4})
                for (double v : t.val(u).v) m = std::min(m, std::abs(v));
            if (m < 2e-3) continue;
        }
        ++tested;
        const Tensor w = rand_tensor({2, 4}, rng);
        std::vector<Param*> ps;
        encd.collect(ps);
        auto build = [&](Tape& t) {
            Rng r2(7);
            auto out = encd.encode_batch(t, {x}, ArrayTag::distant, false, r2);
            return weighted_sum(t, out[0], w);
        };
        CHECK(check_params(build, ps, 1e-4) < 1.0);
    }
}

TEST_CASE("parallel encoder routes tags to branches") {
    Rng rng(6);
    enc::Encoder encd(tiny_config(enc::EncoderKind::vgg, true), rng);
    const Tensor xd = rand_tensor({4, 8, 8}, rng);
    const Tensor xc = rand_tensor({2, 8, 8}, rng);
    Tape tape;
    Rng r2(8);
    auto outd = encd.encode_batch(tape, {xd}, ArrayTag::distant, false, r2);
    auto outc = encd.encode_batch(tape, {xc}, ArrayTag::close, false, r2);
    CHECK(tape.val(outd[0]).shape == tape.val(outc[0]).shape);

    // A distant input pushed through the close branch fails on channel count.
    CHECK_THROWS_AS(encd.encode_batch(tape, {xd}, ArrayTag::close, false, r2), Error);

    // Gradients only reach the branch that was used.
    std::vector<Param*> close_ps, distant_ps;
    encd.branch_close->collect(close_ps);
    encd.branch_distant.collect(distant_ps);
    for (Param* p : close_ps) p->zero_grad();
    for (Param* p : distant_ps) p->zero_grad();
    Tape t2;
    Rng r3(9);
    auto out = encd.encode_batch(t2, {xd}, ArrayTag::distant, true, r3);
    t2.backward(t2.sum_all(out[0]));
    double close_norm = 0.0, distant_norm = 0.0;
    for (Param* p : close_ps)
        for (double g : p->grad.v) close_norm += g * g;
    for (Param* p : distant_ps)
        for (double g : p->grad.v) distant_norm += g * g;
    CHECK(close_norm == 0.0);
    CHECK(distant_norm > 0.0);
}

TEST_CASE("single-branch encoder accepts any tag") {
    Rng rng(7);
    enc::Encoder encd(tiny_config(enc::EncoderKind::vgg), rng);
    const Tensor x = rand_tensor({1, 8, 8}, rng);
    Tape tape;
    Rng r2(10);
    auto a = encd.encode_batch(tape, {x}, ArrayTag::distant, false, r2);
    auto b = encd.encode_batch(tape, {x}, ArrayTag::close, false, r2);
    for (std::size_t k = 0; k < tape.val(a[0]).v.size(); ++k)
        CHECK(tape.val(a[0]).v[k] == tape.val(b[0]).v[k]);
    CHECK_THROWS_AS(encd.encode_batch(tape, {}, ArrayTag::distant, false, r2), Error);
}

TEST_CASE("inference encoding is invariant to batch composition") {
    for (auto kind : {enc::EncoderKind::vgg, enc::EncoderKind::res_brn}) {
        Rng rng(8);
        enc::Encoder encd(tiny_config(kind), rng);
        // Give the renorm layers non-trivial moving statistics.
        if (kind == enc::EncoderKind::res_brn) {
            std::vector<std::pair<std::string, Tensor*>> st;
            encd.collect_state(st);
            Rng r(11);
            for (auto& [name, ten] : st)
                for (auto& v : ten->v)
                    v = name.find("var") != std::string::npos ? r.uniform(0.5, 2.0)
                                                              : r.uniform(-0.5, 0.5);
        }
        const Tensor a = rand_tensor({1, 8, 10}, rng);
        const Tensor b = rand_tensor({1, 8, 6}, rng);
        const Tensor c = rand_tensor({1, 8, 14}, rng);
        Tape t1, t2;
        Rng r1(12), r2(12);
        auto solo = encd.encode_batch(t1, {a}, ArrayTag::distant, false, r1);
        auto batch = encd.encode_batch(t2, {c, a, b}, ArrayTag::distant, false, r2);
        REQUIRE(t1.val(solo[0]).shape == t2.val(batch[1]).shape);
        for (std::size_t k = 0; k < t1.val(solo[0]).v.size(); ++k)
            CHECK(t1.val(solo[0]).v[k] == t2.val(batch[1]).v[k]);
    }
}

TEST_CASE("train-mode renorm encoder couples utterances in a batch") {
    Rng rng(9);
    enc::Encoder encd(tiny_config(enc::EncoderKind::res_brn), rng);
    const Tensor a = rand_tensor({1, 8, 10}, rng);
    Tensor b = rand_tensor({1, 8, 6}, rng);
    for (auto& v : b.v) v += 5.0;
    // Freeze statistics so the two forwards see identical state.
    std::vector<std::pair<std::string, Tensor*>> st;
    encd.collect_state(st);
    encd.branch_distant.res->b1.norm1.update_stats = false;
    encd.branch_distant.res->b1.norm2.update_stats = false;
    encd.branch_distant.res->b2.norm1.update_stats = false;
    encd.branch_distant.res->b2.norm2.update_stats = false;
    Tape t1, t2;
    Rng r1(13), r2(13);
    auto solo = encd.encode_batch(t1, {a}, ArrayTag::distant, true, r1);
    auto batch = encd.encode_batch(t2, {a, b}, ArrayTag::distant, true, r2);
    bool differs = false;
    for (std::size_t k = 0; k < t1.val(solo[0]).v.size(); ++k)
        if (std::abs(t1.val(solo[0]).v[k] - t2.val(batch[0]).v[k]) > 1e-9) differs = true;
    CHECK(differs);
}
