#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gest/svq.hpp"
#include "testutil.hpp"

using namespace gest;
using gest::testutil::randu;

namespace {

SvqConfig tiny_cfg() {
    SvqConfig cfg;
    cfg.region = RegionId::upper_body;
    cfg.pose_dim = 8;
    cfg.hidden = 24;
    cfg.latent_dim = 8;
    cfg.code_dim = 8;
    cfg.codebook_size = 64;
    return cfg;
}

// normalized windows from seeded sessions; stats fit here when none given
// (held-out splits must reuse the training stats)
std::vector<Tensor> make_windows(const std::vector<uint64_t>& seeds, size_t t_w, size_t stride,
                                 NormStats* stats = nullptr) {
    std::vector<SynthSession> sessions;
    for (uint64_t s : seeds) sessions.push_back(gen_session(s, 20.0, desk_region_dims()));
    NormStats local;
    if (stats && stats->mean[0].empty()) *stats = NormStats::fit(sessions);
    const NormStats& st = stats ? *stats : (local = NormStats::fit(sessions));
    std::vector<Tensor> windows;
    for (const auto& sess : sessions) {
        Tensor norm = st.normalize(RegionId::upper_body, sess.poses[0]);
        for (const auto& w : sliding_windows(norm, t_w, stride)) windows.push_back(w.materialize());
    }
    return windows;
}

Codebook simple_codebook(std::vector<double> flat, size_t k, size_t d) {
    Codebook cb;
    cb.entries = Tensor({k, d}, std::move(flat));
    cb.ema_counts.assign(k, 1.0);
    cb.ema_sums = cb.entries;
    cb.decay = 0.99;
    cb.eps = 1e-5;
    return cb;
}

}  // namespace

// ---------------------------------------------------------------------------
// encoder / decoder shapes & causality
// ---------------------------------------------------------------------------

TEST_CASE("encode: 16-frame window gives 4 latent steps") {
    auto ae = StreamAutoencoder::init(tiny_cfg(), 1);
    Rng rng(2);
    Tensor lat = ae.encode_value(randu(rng, {16, 8}));
    CHECK(lat.rows() == 4);
    CHECK(lat.cols() == 8);
    CHECK_THROWS(ae.encode_value(randu(rng, {15, 8})));  // not divisible by 4
}

TEST_CASE("encode: zero weights and zero input give zero latents") {
    auto ae = StreamAutoencoder::init(tiny_cfg(), 1);
    for (auto& p : ae.params.params) std::fill(p->value.data.begin(), p->value.data.end(), 0.0);
    Tensor lat = ae.encode_value(Tensor::zeros({16, 8}));
    for (double v : lat.data) CHECK(v == 0.0);
}

TEST_CASE("encode is deterministic given weights") {
    auto ae = StreamAutoencoder::init(tiny_cfg(), 3);
    Rng rng(4);
    Tensor w = randu(rng, {16, 8});
    CHECK(ae.encode_value(w).data == ae.encode_value(w).data);
}

TEST_CASE("decode: 4 latents give 16 pose frames") {
    auto ae = StreamAutoencoder::init(tiny_cfg(), 5);
    Rng rng(6);
    Tensor out = ae.decode_value(randu(rng, {4, 8}));
    CHECK(out.rows() == 16);
    CHECK(out.cols() == 8);
}

TEST_CASE("decoder causality: perturbing latent step tau leaves earlier frames unchanged") {
    auto ae = StreamAutoencoder::init(tiny_cfg(), 7);
    Rng rng(8);
    Tensor lat = randu(rng, {8, 8});
    Tensor base = ae.decode_value(lat);
    for (size_t tau : std::vector<size_t>{0, 3, 7}) {
        Tensor lat2 = lat;
        for (size_t c = 0; c < 8; ++c) lat2.at(tau, c) += 1.0;
        Tensor out = ae.decode_value(lat2);
        for (size_t t = 0; t < 4 * tau; ++t)
            for (size_t c = 0; c < 8; ++c) CHECK(out.at(t, c) == base.at(t, c));
        bool changed = false;
        for (size_t t = 4 * tau; t < out.rows() && !changed; ++t)
            for (size_t c = 0; c < 8; ++c)
                if (out.at(t, c) != base.at(t, c)) changed = true;
        CHECK(changed);
    }
}

TEST_CASE("streaming equivalence: chunked decode equals batch decode") {
    auto ae = StreamAutoencoder::init(tiny_cfg(), 9);
    Rng rng(10);
    Tensor lat = randu(rng, {64, 8});
    Tensor batch = ae.decode_value(lat);

    DecoderState st = decoder_open(ae);
    double max_diff = 0.0;
    for (size_t tau = 0; tau < 64; ++tau) {
        Tensor one({1, 8});
        std::copy(lat.row_ptr(tau), lat.row_ptr(tau) + 8, one.row_ptr(0));
        Tensor frames = decoder_push(ae, st, one);
        REQUIRE(frames.rows() == 4);
        for (size_t i = 0; i < 4; ++i)
            for (size_t c = 0; c < 8; ++c)
                max_diff =
                    std::max(max_diff, std::abs(frames.at(i, c) - batch.at(4 * tau + i, c)));
    }
    CHECK(max_diff <= 1e-10);

    // mixed chunk sizes hit the same path
    DecoderState st2 = decoder_open(ae);
    Tensor first8({8, 8});
    std::copy(lat.data.begin(), lat.data.begin() + 8 * 8, first8.data.begin());
    Tensor out8 = decoder_push(ae, st2, first8);
    for (size_t t = 0; t < 32; ++t)
        for (size_t c = 0; c < 8; ++c) CHECK(out8.at(t, c) == batch.at(t, c));
}

TEST_CASE("decoder state rejects a different model") {
    auto ae1 = StreamAutoencoder::init(tiny_cfg(), 11);
    auto ae2 = StreamAutoencoder::init(tiny_cfg(), 12);
    DecoderState st = decoder_open(ae1);
    Rng rng(13);
    Tensor lat = randu(rng, {1, 8});
    CHECK_THROWS_AS(decoder_push(ae2, st, lat), std::runtime_error);
}

TEST_CASE("decoder state serialization resumes identically") {
    auto ae = StreamAutoencoder::init(tiny_cfg(), 14);
    Rng rng(15);
    Tensor lat = randu(rng, {12, 8});

    DecoderState full = decoder_open(ae);
    Tensor all = decoder_push(ae, full, lat);

    DecoderState st = decoder_open(ae);
    Tensor head({6, 8});
    std::copy(lat.data.begin(), lat.data.begin() + 6 * 8, head.data.begin());
    decoder_push(ae, st, head);
    DecoderState resumed = DecoderState::from_arrays(st.to_arrays());
    Tensor tail({6, 8});
    std::copy(lat.data.begin() + 6 * 8, lat.data.end(), tail.data.begin());
    Tensor out = decoder_push(ae, resumed, tail);
    for (size_t t = 0; t < 24; ++t)
        for (size_t c = 0; c < 8; ++c) CHECK(out.at(t, c) == all.at(24 + t, c));
}

TEST_CASE("autoencoder checkpoint round trip") {
    auto ae = StreamAutoencoder::init(tiny_cfg(), 16);
    auto b = StreamAutoencoder::from_arrays(ae.to_arrays());
    CHECK(b.weights_fingerprint() == ae.weights_fingerprint());
    Rng rng(17);
    Tensor w = randu(rng, {16, 8});
    CHECK(b.encode_value(w).data == ae.encode_value(w).data);
}

// ---------------------------------------------------------------------------
// quantizer
// ---------------------------------------------------------------------------

TEST_CASE("quantize: nearest neighbor with documented tie-break") {
    Codebook cb = simple_codebook({0.0, 1.0}, 2, 1);
    auto q = quantize(Tensor({1, 1}, {0.4}), cb);
    CHECK(q.tokens[0] == 0);
    CHECK(q.dequantized.data[0] == 0.0);
    CHECK(quantize(Tensor({1, 1}, {0.6}), cb).tokens[0] == 1);
    CHECK(quantize(Tensor({1, 1}, {0.5}), cb).tokens[0] == 0);  // tie -> lowest index
}

TEST_CASE("quantize: empty codebook is a config error") {
    Codebook cb;
    cb.entries = Tensor({0, 1});
    CHECK_THROWS(quantize(Tensor({1, 1}, {0.0}), cb));
}

TEST_CASE("ema_update: hand application of the rule") {
    Codebook cb = simple_codebook({0.0}, 1, 1);
    cb.ema_counts[0] = 1.0;
    cb.ema_sums.data[0] = 0.0;
    ema_update(cb, {0}, Tensor({1, 1}, {1.0}));
    CHECK(cb.ema_counts[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(cb.ema_sums.data[0] == doctest::Approx(0.01).epsilon(1e-12));
    CHECK(cb.entries.data[0] == doctest::Approx(0.01).epsilon(1e-12));
}

TEST_CASE("ema_update: unassigned code keeps its centroid") {
    Codebook cb = simple_codebook({2.5, -1.0}, 2, 1);
    cb.ema_counts = {3.0, 2.0};
    cb.ema_sums = Tensor({2, 1}, {7.5, -2.0});
    ema_update(cb, {0}, Tensor({1, 1}, {7.5}));  // code 1 never assigned
    CHECK(cb.entries.at(1, 0) == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("ema_update: decay to zero gives the batch centroid") {
    Codebook cb = simple_codebook({10.0}, 1, 1);
    cb.decay = 0.0;
    ema_update(cb, {0, 0}, Tensor({2, 1}, {2.0, 4.0}));
    CHECK(cb.entries.data[0] == doctest::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("reset_dead_codes: no-op above floor, adopts latent when dead") {
    Rng rng(20);
    Codebook cb = simple_codebook({1.0, 2.0}, 2, 1);
    cb.ema_counts = {5.0, 4.0};
    Tensor latents({1, 1}, {9.0});
    CHECK(reset_dead_codes(cb, latents, 1.0, rng) == 0);
    CHECK(cb.entries.data[0] == 1.0);

    cb.ema_counts = {0.5, 4.0};
    CHECK(reset_dead_codes(cb, latents, 1.0, rng) == 1);
    CHECK(cb.entries.at(0, 0) == 9.0);
    CHECK(cb.ema_counts[0] == 1.0);
}

TEST_CASE("reset_dead_codes: utilization never decreases") {
    Rng rng(21);
    for (int trial = 0; trial < 30; ++trial) {
        const size_t k = 8;
        Codebook cb = simple_codebook(std::vector<double>(k * 2, 0.0), k, 2);
        for (auto& n : cb.ema_counts) n = rng.uniform(0.0, 3.0);
        Tensor latents({5, 2});
        for (auto& v : latents.data) v = rng.normal();
        const double before = cb.utilization(1.0);
        reset_dead_codes(cb, latents, 1.0, rng);
        CHECK(cb.utilization(1.0) >= before);
        CHECK(cb.utilization(1.0) == 1.0);  // every dead code re-seeded
    }
}

TEST_CASE("projection head: identity init when dims agree, zero head, time shift") {
    auto tok = SvqTokenizer::init(StreamAutoencoder::init(tiny_cfg(), 22), 1);
    Rng rng(23);
    Tensor zhat = randu(rng, {4, 8});
    // identity init: wl = I, w2 = 0
    Tensor out = tok.project_value(zhat);
    for (size_t i = 0; i < zhat.numel(); ++i) CHECK(out.data[i] == doctest::Approx(zhat.data[i]));

    // time-shift equivariance of the pointwise map
    Tensor shifted({4, 8});
    for (size_t t = 0; t < 4; ++t)
        std::copy(zhat.row_ptr((t + 1) % 4), zhat.row_ptr((t + 1) % 4) + 8, shifted.row_ptr(t));
    Tensor out_shifted = tok.project_value(shifted);
    for (size_t t = 0; t < 4; ++t)
        for (size_t c = 0; c < 8; ++c) CHECK(out_shifted.at(t, c) == out.at((t + 1) % 4, c));

    for (auto& p : tok.head_params.params)
        std::fill(p->value.data.begin(), p->value.data.end(), 0.0);
    Tensor zero = tok.project_value(zhat);
    for (double v : zero.data) CHECK(v == 0.0);
}

TEST_CASE("straight-through: gradient w.r.t. z equals gradient w.r.t. dequantized") {
    Rng rng(24);
    Tensor z = randu(rng, {3, 4});
    Tensor zq = randu(rng, {3, 4});
    Tensor w = randu(rng, {4, 4});

    // path A: loss through the straight-through wrapper, gradient lands on z
    auto zv = ag::param(z);
    auto st = straight_through(zv, zq);
    auto lossA = ag::mse_loss(ag::linear(st, ag::constant(w), ag::Var()),
                              ag::constant(Tensor::zeros({3, 4})));
    ag::backward(lossA);

    // path B: the same loss evaluated directly at the dequantized point
    auto zqv = ag::param(zq);
    auto lossB = ag::mse_loss(ag::linear(zqv, ag::constant(w), ag::Var()),
                              ag::constant(Tensor::zeros({3, 4})));
    ag::backward(lossB);

    CHECK(lossA->value.data[0] == lossB->value.data[0]);
    for (size_t i = 0; i < z.numel(); ++i)
        CHECK(zv->grad.data[i] == doctest::Approx(zqv->grad.data[i]).epsilon(1e-12));
}

// ---------------------------------------------------------------------------
// training gates (reduced dims, seeded)
// ---------------------------------------------------------------------------

TEST_CASE("stage 1: seeded training beats the untrained baseline by 5x") {
    auto windows = make_windows({31, 32, 33}, 16, 4);
    REQUIRE(windows.size() >= 200);
    if (windows.size() > 500) windows.resize(500);

    SvqConfig cfg = tiny_cfg();
    SvqTrainOpts opts;
    opts.epochs = 18;
    opts.batch = 16;
    opts.lr = 2e-3;
    opts.seed = 77;

    const StreamAutoencoder untrained = StreamAutoencoder::init(cfg, opts.seed);
    const double base = continuous_recon_l1(untrained, windows);

    StageLog log;
    StreamAutoencoder ae = train_stage1(windows, cfg, opts, &log);
    const double trained = continuous_recon_l1(ae, windows);
    INFO("untrained ", base, " trained ", trained);
    CHECK(trained < 0.2 * base);

    // loss curve: non-increasing 5-epoch moving average
    REQUIRE(log.epoch_losses.size() == opts.epochs);
    auto avg5 = [&](size_t end) {
        double s = 0.0;
        for (size_t i = end - 5; i < end; ++i) s += log.epoch_losses[i];
        return s / 5.0;
    };
    for (size_t end = 6; end <= log.epoch_losses.size(); ++end)
        CHECK(avg5(end) <= avg5(end - 1) * (1.0 + 1e-6));
}

TEST_CASE("stage 1: lambda_ae = 0 leaves weights untouched") {
    auto windows = make_windows({41}, 16, 8);
    windows.resize(8);
    SvqTrainOpts opts;
    opts.epochs = 2;
    opts.lambda_ae = 0.0;
    opts.seed = 5;
    StageLog log;
    StreamAutoencoder ae = train_stage1(windows, tiny_cfg(), opts, &log);
    CHECK(ae.weights_fingerprint() ==
          StreamAutoencoder::init(tiny_cfg(), 5).weights_fingerprint());
    for (double l : log.epoch_losses) CHECK(l == 0.0);
}

TEST_CASE("stage 1: identical seeds give identical weights") {
    auto windows = make_windows({42}, 16, 8);
    windows.resize(24);
    SvqTrainOpts opts;
    opts.epochs = 3;
    opts.seed = 9;
    StreamAutoencoder a = train_stage1(windows, tiny_cfg(), opts);
    StreamAutoencoder b = train_stage1(windows, tiny_cfg(), opts);
    CHECK(a.weights_fingerprint() == b.weights_fingerprint());
}

TEST_CASE("stage 2: freeze contract, quality gate, utilization, idempotence") {
    NormStats stats;
    auto train_wins = make_windows({51, 52, 53, 54, 55, 56}, 16, 4, &stats);
    auto held_wins = make_windows({58}, 16, 8, &stats);

    // CI-budget stage 1: the quantization gate compares against this model
    SvqConfig cfg = tiny_cfg();
    SvqTrainOpts s1;
    s1.epochs = 6;
    s1.lr = 2e-3;
    s1.seed = 88;
    StreamAutoencoder ae = train_stage1(train_wins, cfg, s1);
    const uint64_t ae_fp = ae.weights_fingerprint();
    const double stage1_l1 = continuous_recon_l1(ae, held_wins);

    SvqTrainOpts s2;
    s2.epochs = 15;
    s2.batch = 32;
    s2.lr = 2e-3;
    s2.seed = 89;
    StageLog log;
    SvqTokenizer tok = train_stage2(train_wins, std::move(ae), s2, &log);

    // encoder/decoder untouched by stage 2
    CHECK(tok.ae.weights_fingerprint() == ae_fp);

    const double stage2_l1 = quantized_recon_l1(tok, held_wins);
    INFO("stage1 ", stage1_l1, " stage2 ", stage2_l1);
    CHECK(stage2_l1 <= 1.5 * stage1_l1);

    // codebook health at K=64
    CHECK(log.final_utilization >= 0.5);

    // quantizer idempotence: each centroid is its own nearest code
    QuantizeResult q = quantize(tok.pre_project(tok.ae.encode_value(held_wins[0])), tok.codebook);
    QuantizeResult q2 = quantize(q.dequantized, tok.codebook);
    CHECK(q2.tokens == q.tokens);

    // tokenizer checkpoint round trip
    SvqTokenizer back = SvqTokenizer::from_arrays(tok.to_arrays());
    CHECK(back.weights_fingerprint() == tok.weights_fingerprint());
    CHECK(back.tokenize(held_wins[0]) == tok.tokenize(held_wins[0]));
}
