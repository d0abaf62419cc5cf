#pragma once

#include <cmath>
#include <vector>

#include "gest/kernels.hpp"
#include "gest/svq.hpp"

namespace gest::streamops {

// One causal conv step with carried input history (the last (k-1)*dil frames,
// oldest first, zero-initialized to match batch left padding). Gathers the
// same tap window and runs the same matvec as the batch path, so streaming
// and batch outputs are bit-identical.
inline void conv_step(const ConvLayer& c, std::vector<double>& hist, const double* in_frame,
                      size_t cin, double* out_frame) {
    const size_t span = (c.k - 1) * c.dil;
    const size_t cout = c.w->value.rows();
    std::vector<double> win(c.k * cin);
    for (size_t j = 0; j < c.k; ++j) {
        const size_t back = (c.k - 1 - j) * c.dil;
        const double* src = back == 0 ? in_frame : hist.data() + (span - back) * cin;
        std::copy(src, src + cin, win.data() + j * cin);
    }
    kern::matvec(c.w->value.data.data(), win.data(), out_frame, cout, c.k * cin);
    kern::vadd(out_frame, c.b->value.data.data(), out_frame, cout);
    if (span > 0) {
        std::move(hist.begin() + ptrdiff_t(cin), hist.end(), hist.begin());
        std::copy(in_frame, in_frame + cin, hist.end() - ptrdiff_t(cin));
    }
}

inline void gelu_row(const double* in, double* out, size_t n) {
    for (size_t i = 0; i < n; ++i) out[i] = 0.5 * in[i] * (1.0 + std::erf(in[i] * M_SQRT1_2));
}

// y = W x + b on raw rows, matching ag::linear's kernel order.
inline void linear_row(const Tensor& w, const Tensor& b, const double* x, double* y) {
    kern::matvec(w.data.data(), x, y, w.rows(), w.cols());
    kern::vadd(y, b.data.data(), y, w.rows());
}

// Row layernorm matching ag::layernorm's accumulation order.
inline void layernorm_row(const double* x, const double* g, const double* b, double* y, size_t d,
                          double eps = 1e-5) {
    double mu = 0.0;
    for (size_t i = 0; i < d; ++i) mu += x[i];
    mu /= double(d);
    double var = 0.0;
    for (size_t i = 0; i < d; ++i) var += (x[i] - mu) * (x[i] - mu);
    var /= double(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (size_t i = 0; i < d; ++i) y[i] = (x[i] - mu) * inv * g[i] + b[i];
}

// Bounded key/value history, oldest first.
struct KvCache {
    size_t cap = 32;
    std::vector<std::vector<double>> k, v;
    void push(std::vector<double> kr, std::vector<double> vr) {
        k.push_back(std::move(kr));
        v.push_back(std::move(vr));
        if (k.size() > cap) {
            k.erase(k.begin());
            v.erase(v.begin());
        }
    }
    size_t size() const { return k.size(); }
};

// Multi-head attention for one query over cached rows; same per-head score,
// softmax, and accumulation order as ag::masked_attention.
inline void attention_row(const double* q, const KvCache& kv, size_t n_heads, size_t d,
                          double* out) {
    const size_t hd = d / n_heads;
    const double sc = 1.0 / std::sqrt(double(hd));
    std::fill(out, out + d, 0.0);
    std::vector<double> scores(kv.size());
    for (size_t h = 0; h < n_heads; ++h) {
        const size_t off = h * hd;
        double mx = -HUGE_VAL;
        for (size_t j = 0; j < kv.size(); ++j) {
            scores[j] = kern::dot(q + off, kv.k[j].data() + off, hd) * sc;
            if (scores[j] > mx) mx = scores[j];
        }
        double z = 0.0;
        for (size_t j = 0; j < kv.size(); ++j) {
            scores[j] = std::exp(scores[j] - mx);
            z += scores[j];
        }
        for (size_t j = 0; j < kv.size(); ++j)
            kern::axpy(scores[j] / z, kv.v[j].data() + off, out + off, hd);
    }
}

}  // namespace gest::streamops
