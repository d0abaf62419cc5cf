#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gest/autograd.hpp"
#include "gest/kernels.hpp"
#include "gradcases.hpp"

using namespace gest;
using namespace gest::ag;
using gest::testutil::randu;

namespace {
Tensor col(std::vector<double> v) {
    const size_t n = v.size();
    return Tensor({n, 1}, std::move(v));
}
}  // namespace

// ---------------------------------------------------------------------------
// causal convolution
// ---------------------------------------------------------------------------

TEST_CASE("causal conv: hand convolution with zero left pad") {
    auto x = constant(col({1, 2, 3}));
    auto w = constant(Tensor({1, 2}, {1, 1}));  // taps oldest..newest
    auto y = conv1d(x, w, Var(), 2, 1, 1, Pad::causal);
    CHECK(y->value.data == std::vector<double>{1, 3, 5});
}

TEST_CASE("causal conv: future perturbation cannot change the past") {
    auto w = constant(Tensor({1, 2}, {1, 1}));
    auto ya = conv1d(constant(col({1, 2, 3})), w, Var(), 2, 1, 1, Pad::causal);
    auto yb = conv1d(constant(col({1, 2, 999})), w, Var(), 2, 1, 1, Pad::causal);
    CHECK(ya->value.data[0] == yb->value.data[0]);
    CHECK(ya->value.data[1] == yb->value.data[1]);
    CHECK(yb->value.data[0] == 1.0);
    CHECK(yb->value.data[1] == 3.0);
}

TEST_CASE("causal conv: dilated receptive field") {
    auto x = constant(col({1, 0, 0, 0}));
    auto w = constant(Tensor({1, 2}, {1, 1}));
    auto y = conv1d(x, w, Var(), 2, 2, 1, Pad::causal);
    CHECK(y->value.data == std::vector<double>{1, 0, 1, 0});
}

TEST_CASE("causal conv: channel mismatch is a shape error") {
    auto x = constant(Tensor({4, 2}));
    auto w = constant(Tensor({1, 3}));  // k*Cin would be 2,4,6... 3 never matches
    CHECK_THROWS(conv1d(x, w, Var(), 3, 1, 1, Pad::causal));
}

TEST_CASE("causal conv: causality property at random depth") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const size_t t_len = 8, cin = 3, cout = 2, k = 3, dil = 1 + rng.uniform_int(2);
        auto x = randu(rng, {t_len, cin});
        auto w = randu(rng, {cout, k * cin});
        const size_t cut = 1 + rng.uniform_int(t_len - 1);
        Tensor x2 = x;
        for (size_t t = cut; t < t_len; ++t)
            for (size_t c = 0; c < cin; ++c) x2.at(t, c) += rng.normal();
        auto ya = conv1d(constant(x), constant(w), Var(), k, dil, 1, Pad::causal);
        auto yb = conv1d(constant(x2), constant(w), Var(), k, dil, 1, Pad::causal);
        for (size_t t = 0; t < cut; ++t)
            for (size_t c = 0; c < cout; ++c) CHECK(ya->value.at(t, c) == yb->value.at(t, c));
    }
}

// ---------------------------------------------------------------------------
// masked attention
// ---------------------------------------------------------------------------

TEST_CASE("attention: single-key softmax is one") {
    Rng rng(3);
    auto q = constant(randu(rng, {1, 4}));
    auto k = constant(randu(rng, {1, 4}));
    auto v = constant(randu(rng, {1, 4}));
    auto y = masked_attention(q, k, v, AttnMask::all(1, 1), 1);
    for (size_t i = 0; i < 4; ++i) CHECK(y->value.data[i] == doctest::Approx(v->value.data[i]));
}

TEST_CASE("attention: causal mask shields the past from future perturbations") {
    Rng rng(4);
    const size_t t_len = 6, d = 8;
    auto q = randu(rng, {t_len, d});
    auto k = randu(rng, {t_len, d});
    auto v = randu(rng, {t_len, d});
    for (size_t cut = 1; cut < t_len; ++cut) {
        Tensor k2 = k, v2 = v;
        for (size_t c = 0; c < d; ++c) {
            k2.at(cut, c) += 1.5;
            v2.at(cut, c) -= 2.5;
        }
        auto mask = AttnMask::causal(t_len);
        auto ya = masked_attention(constant(q), constant(k), constant(v), mask, 2);
        auto yb = masked_attention(constant(q), constant(k2), constant(v2), mask, 2);
        for (size_t t = 0; t < cut; ++t)
            for (size_t c = 0; c < d; ++c) CHECK(ya->value.at(t, c) == yb->value.at(t, c));
    }
}

TEST_CASE("attention: convex combination of equal values returns the value row") {
    auto q = constant(Tensor({1, 2}, {0.3, -0.7}));
    auto k = constant(Tensor({2, 2}, {1.0, 2.0, 1.0, 2.0}));  // identical keys
    auto v = constant(Tensor({2, 2}, {5.0, -1.0, 5.0, -1.0}));
    auto y = masked_attention(q, k, v, AttnMask::all(1, 2), 1);
    CHECK(y->value.data[0] == doctest::Approx(5.0));
    CHECK(y->value.data[1] == doctest::Approx(-1.0));
}

TEST_CASE("attention: all-masked row is a degenerate-attention error") {
    Rng rng(5);
    auto q = constant(randu(rng, {2, 4}));
    auto k = constant(randu(rng, {2, 4}));
    auto v = constant(randu(rng, {2, 4}));
    AttnMask mask = AttnMask::all(2, 2);
    mask.allow[2] = mask.allow[3] = 0;  // row 1 attends nothing
    CHECK_THROWS_AS(masked_attention(q, k, v, mask, 1), std::runtime_error);
}

// ---------------------------------------------------------------------------
// rotary embedding
// ---------------------------------------------------------------------------

TEST_CASE("rotary: position zero is the identity") {
    Rng rng(6);
    auto x = randu(rng, {1, 8});
    auto y = rotary(constant(x), {0.0}, 8);
    CHECK(y->value.data == x.data);
}

TEST_CASE("rotary: odd width is a shape error") {
    auto x = constant(Tensor({2, 6}));
    CHECK_THROWS(rotary(x, {0, 1}, 3));
}

TEST_CASE("rotary: dot products survive a common position shift") {
    Rng rng(7);
    const size_t d = 16;
    auto q = randu(rng, {1, d});
    auto k = randu(rng, {1, d});
    for (double shift : {1.0, 5.0, 111.0}) {
        auto q0 = rotary(constant(q), {3.0}, d);
        auto k0 = rotary(constant(k), {9.0}, d);
        auto q1 = rotary(constant(q), {3.0 + shift}, d);
        auto k1 = rotary(constant(k), {9.0 + shift}, d);
        const double dot0 = kern::dot(q0->value.data.data(), k0->value.data.data(), d);
        const double dot1 = kern::dot(q1->value.data.data(), k1->value.data.data(), d);
        CHECK(std::abs(dot0 - dot1) <= 1e-10);
    }
}

TEST_CASE("rotary: rotations preserve row norms") {
    Rng rng(8);
    const size_t d = 12;
    auto x = randu(rng, {4, d});
    auto y = rotary(constant(x), {0.0, 2.0, 17.0, 1000.0}, d);
    for (size_t t = 0; t < 4; ++t) {
        const double n0 = std::sqrt(kern::dot(x.row_ptr(t), x.row_ptr(t), d));
        const double n1 = std::sqrt(kern::dot(y->value.row_ptr(t), y->value.row_ptr(t), d));
        CHECK(std::abs(n0 - n1) <= 1e-12);
    }
}

// ---------------------------------------------------------------------------
// gradient checks
// ---------------------------------------------------------------------------

TEST_CASE("grad_check: exact linear gradient") {
    // y = 3x at x = 2
    const double err = grad_check(
        [](std::vector<Var>& v) { return scale(mean_all(v[0]), 3.0); }, {Tensor({1}, {2.0})},
        1e-5);
    CHECK(err < 1e-8);
}

TEST_CASE("grad_check: softmax cross entropy at random logits") {
    Rng rng(9);
    auto logits = randu(rng, {3, 5}, -2.0, 2.0);
    const double err = grad_check(
        [](std::vector<Var>& v) {
            return softmax_cross_entropy(v[0], {1, 4, 0});
        },
        {logits});
    CHECK(err < 1e-5);
}

TEST_CASE("grad_check: constant op has zero gradient and zero error") {
    const double err = grad_check(
        [](std::vector<Var>& v) {
            (void)v;
            return constant(Tensor({1}, {5.0}));
        },
        {Tensor({2}, {1.0, 2.0})});
    CHECK(err == 0.0);
}

TEST_CASE("grad_check: eps outside (0, 1e-3] is rejected") {
    auto f = [](std::vector<Var>& v) { return mean_all(v[0]); };
    CHECK_THROWS(grad_check(f, {Tensor({1}, {1.0})}, 0.0));
    CHECK_THROWS(grad_check(f, {Tensor({1}, {1.0})}, 1e-2));
}

TEST_CASE("gradient soundness: every op under 1e-5 at 100 seeded points") {
    for (const auto& c : gest::testutil::nncore_grad_cases()) {
        const double worst = gest::testutil::max_err_over_points(c, 100, 1234);
        INFO("op ", c.name);
        CHECK(worst < 1e-5);
    }
}

// ---------------------------------------------------------------------------
// misc op semantics
// ---------------------------------------------------------------------------

TEST_CASE("layernorm normalizes each row") {
    Rng rng(10);
    auto x = randu(rng, {3, 16});
    auto g = constant(Tensor::full({1, 16}, 1.0));
    auto b = constant(Tensor::zeros({1, 16}));
    auto y = layernorm(constant(x), g, b);
    for (size_t t = 0; t < 3; ++t) {
        double mu = 0.0;
        for (size_t i = 0; i < 16; ++i) mu += y->value.at(t, i);
        CHECK(std::abs(mu / 16.0) < 1e-12);
    }
}

TEST_CASE("adam determinism: identical runs produce identical weights") {
    auto run = [] {
        Rng rng(20);
        ParamSet ps;
        auto w = ps.add(randu(rng, {4, 4}), "w");
        Adam opt(1e-2);
        for (int i = 0; i < 25; ++i) {
            ps.zero_grad();
            auto x = constant(randu(rng, {4, 4}));
            auto loss = mse_loss(linear(x, w, Var()), x);
            backward(loss);
            opt.step(ps);
        }
        return w->value.data;
    };
    CHECK(run() == run());
}

TEST_CASE("tensor values stay finite through a deep composite") {
    Rng rng(21);
    auto x = constant(randu(rng, {6, 8}));
    auto g = constant(Tensor::full({1, 8}, 1.0));
    auto b = constant(Tensor::zeros({1, 8}));
    Var h = x;
    for (int i = 0; i < 4; ++i) {
        auto hn = layernorm(h, g, b);
        h = add(h, masked_attention(hn, hn, hn, AttnMask::causal(6), 2));
    }
    CHECK(h->value.all_finite());
}
