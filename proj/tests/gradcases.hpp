#pragma once

// Gradient-check cases for every differentiable building block. Each case
// draws a fresh random point from its seed and returns grad_check's max
// relative error at that point.

#include "testutil.hpp"

namespace gest::testutil {

inline std::vector<GradCase> nncore_grad_cases() {
    using namespace gest::ag;
    std::vector<GradCase> cases;

    cases.push_back({"linear", [](uint64_t seed) {
        Rng rng(seed);
        auto x = randu(rng, {4, 3});
        auto w = randu(rng, {5, 3});
        auto b = randu(rng, {1, 5});
        return grad_check(
            [](std::vector<Var>& v) { return mean_all(gelu(linear(v[0], v[1], v[2]))); },
            {x, w, b});
    }});

    cases.push_back({"conv1d_causal", [](uint64_t seed) {
        Rng rng(seed);
        auto x = randu(rng, {6, 2});
        auto w = randu(rng, {3, 3 * 2});
        auto b = randu(rng, {1, 3});
        return grad_check(
            [](std::vector<Var>& v) {
                return mean_all(gelu(conv1d(v[0], v[1], v[2], 3, 1, 1, Pad::causal)));
            },
            {x, w, b});
    }});

    cases.push_back({"conv1d_causal_dilated", [](uint64_t seed) {
        Rng rng(seed);
        auto x = randu(rng, {8, 2});
        auto w = randu(rng, {2, 3 * 2});
        auto b = randu(rng, {1, 2});
        return grad_check(
            [](std::vector<Var>& v) {
                return mean_all(gelu(conv1d(v[0], v[1], v[2], 3, 2, 1, Pad::causal)));
            },
            {x, w, b});
    }});

    cases.push_back({"conv1d_same", [](uint64_t seed) {
        Rng rng(seed);
        auto x = randu(rng, {6, 2});
        auto w = randu(rng, {3, 3 * 2});
        auto b = randu(rng, {1, 3});
        return grad_check(
            [](std::vector<Var>& v) {
                return mean_all(gelu(conv1d(v[0], v[1], v[2], 3, 1, 1, Pad::same)));
            },
            {x, w, b});
    }});

    cases.push_back({"conv1d_stride2", [](uint64_t seed) {
        Rng rng(seed);
        auto x = randu(rng, {8, 2});
        auto w = randu(rng, {3, 4 * 2});
        auto b = randu(rng, {1, 3});
        return grad_check(
            [](std::vector<Var>& v) {
                return mean_all(gelu(conv1d(v[0], v[1], v[2], 4, 1, 2, Pad::same)));
            },
            {x, w, b});
    }});

    cases.push_back({"upsample_nn2", [](uint64_t seed) {
        Rng rng(seed);
        auto x = randu(rng, {4, 3});
        return grad_check(
            [](std::vector<Var>& v) { return mean_all(gelu(upsample_nn2(v[0]))); }, {x});
    }});

    cases.push_back({"layernorm", [](uint64_t seed) {
        Rng rng(seed);
        auto x = randu(rng, {4, 6});
        auto g = randu(rng, {1, 6}, 0.5, 1.5);
        auto b = randu(rng, {1, 6});
        return grad_check(
            [](std::vector<Var>& v) { return mean_all(gelu(layernorm(v[0], v[1], v[2]))); },
            {x, g, b});
    }});

    cases.push_back({"gelu", [](uint64_t seed) {
        Rng rng(seed);
        auto x = randu(rng, {3, 5}, -2.0, 2.0);
        return grad_check([](std::vector<Var>& v) { return mean_all(gelu(v[0])); }, {x});
    }});

    cases.push_back({"rotary", [](uint64_t seed) {
        Rng rng(seed);
        auto x = randu(rng, {5, 8});
        return grad_check(
            [](std::vector<Var>& v) {
                return mean_all(gelu(rotary(v[0], {0, 1, 2, 3, 7}, 4)));
            },
            {x});
    }});

    cases.push_back({"masked_attention", [](uint64_t seed) {
        Rng rng(seed);
        auto q = randu(rng, {4, 8});
        auto k = randu(rng, {4, 8});
        auto v = randu(rng, {4, 8});
        return grad_check(
            [](std::vector<Var>& vars) {
                auto mask = AttnMask::causal(4);
                return mean_all(gelu(masked_attention(vars[0], vars[1], vars[2], mask, 2)));
            },
            {q, k, v});
    }});

    cases.push_back({"softmax_cross_entropy", [](uint64_t seed) {
        Rng rng(seed);
        auto logits = randu(rng, {5, 7}, -3.0, 3.0);
        std::vector<size_t> targets = {0, 3, 6, 2, 5};
        return grad_check(
            [targets](std::vector<Var>& v) {
                return softmax_cross_entropy(v[0], targets);
            },
            {logits});
    }});

    cases.push_back({"embedding", [](uint64_t seed) {
        Rng rng(seed);
        auto table = randu(rng, {6, 4});
        std::vector<size_t> idx = {1, 5, 1, 0};
        return grad_check(
            [idx](std::vector<Var>& v) { return mean_all(gelu(embedding(v[0], idx))); },
            {table});
    }});

    cases.push_back({"l1_loss", [](uint64_t seed) {
        Rng rng(seed);
        auto a = randu(rng, {4, 3});
        // keep |a-b| away from the kink so finite differences are valid
        Tensor b = a;
        for (auto& v : b.data) v += (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.1, 1.0);
        return grad_check([](std::vector<Var>& v) { return l1_loss(v[0], v[1]); }, {a, b});
    }});

    cases.push_back({"mse_loss", [](uint64_t seed) {
        Rng rng(seed);
        auto a = randu(rng, {4, 3});
        auto b = randu(rng, {4, 3});
        return grad_check([](std::vector<Var>& v) { return mse_loss(v[0], v[1]); }, {a, b});
    }});

    cases.push_back({"composite_block", [](uint64_t seed) {
        // prenorm attention + residual + feed-forward, the transformer layer shape
        Rng rng(seed);
        auto x = randu(rng, {4, 8});
        auto g = randu(rng, {1, 8}, 0.5, 1.5);
        auto b = randu(rng, {1, 8});
        auto wq = randu(rng, {8, 8}, -0.5, 0.5);
        auto wo = randu(rng, {8, 8}, -0.5, 0.5);
        return grad_check(
            [](std::vector<Var>& v) {
                auto xn = layernorm(v[0], v[1], v[2]);
                auto q = rotary(linear(xn, v[3], Var()), {0, 1, 2, 3}, 4);
                auto attn = masked_attention(q, q, xn, AttnMask::causal(4), 2);
                auto y = add(v[0], linear(attn, v[4], Var()));
                return mean_all(gelu(y));
            },
            {x, g, b, wq, wo});
    }});

    return cases;
}

}  // namespace gest::testutil
