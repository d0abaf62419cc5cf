#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "gest/tensor.hpp"

// Tape-based reverse-mode autodiff over Tensor. Forward passes run on the
// kernel layer with a fixed per-row / per-step op order; the stateful
// streaming paths reuse the same kernels in the same order, which is what
// makes the chunked-vs-batch equivalence tests tight.
namespace gest::ag {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn;
    std::string name;  // set for parameters, used by checkpoints

    Tensor& ensure_grad() {
        if (grad.shape != value.shape) grad = Tensor::zeros(value.shape);
        return grad;
    }
};

Var constant(Tensor t);
Var param(Tensor t, std::string name = {});

// Runs reverse-mode accumulation from a scalar root (seed gradient 1).
void backward(const Var& root);

// ---- elementwise / shape ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_rowvec(const Var& x, const Var& row);  // broadcast [1 x d] over [T x d]
Var gelu(const Var& x);
Var detach(const Var& x);
Var concat_rows(const Var& a, const Var& b);
Var slice_rows(const Var& x, size_t start, size_t len);
Var gather_rows(const Var& x, std::vector<size_t> idx);
Var reshape_rows(const Var& x, size_t new_cols);  // row-major reinterpretation
// out[i] = use_row[i] ? row : x[i]  (mask-embedding substitution)
Var select_rows(const Var& x, const Var& row, const std::vector<uint8_t>& use_row);

// ---- dense / conv ----
// y[t] = W x[t] + b ; W is [out x in], b optional [1 x out]
Var linear(const Var& x, const Var& w, const Var& b);

enum class Pad { causal, same };

// 1-D temporal conv over [T x Cin] with kernel [Cout x (k*Cin)] flattened
// tap-major (tap 0 = oldest). Pad::causal uses left-only zero padding;
// Pad::same centers the receptive field (k odd, stride 1 only).
Var conv1d(const Var& x, const Var& w, const Var& b, size_t k, size_t dilation, size_t stride,
           Pad pad);

Var upsample_nn2(const Var& x);  // nearest-neighbor x2 in time

Var layernorm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);

// ---- positions / attention ----
// Pairwise rotations with the standard geometric frequency spectrum, applied
// per head slice. positions[t] is the absolute step index of row t.
Var rotary(const Var& x, const std::vector<double>& positions, size_t head_dim);

// Row primitive behind the rotary op; the streaming paths call it directly so
// batch and incremental results are bit-identical.
void rotary_apply_row(const double* x, double* y, double pos, size_t head_dim, size_t d,
                      bool invert = false);

struct AttnMask {
    // mask[i*tk + j] true = query row i may attend key row j
    std::vector<uint8_t> allow;
    size_t tq = 0, tk = 0;

    static AttnMask all(size_t tq, size_t tk);
    static AttnMask causal(size_t t, size_t window = SIZE_MAX);  // j <= i, i-j < window
    bool at(size_t i, size_t j) const { return allow[i * tk + j] != 0; }
};

// Multi-head scaled dot-product attention, fused (softmax weights kept for
// the backward pass). Throws if a query row has no attendable key.
Var masked_attention(const Var& q, const Var& k, const Var& v, const AttnMask& mask,
                     size_t n_heads = 1);

// ---- losses ----
Var mean_all(const Var& x);
Var l1_loss(const Var& a, const Var& b);   // mean |a - b|
Var mse_loss(const Var& a, const Var& b);  // mean (a - b)^2

// Mean NLL of targets under softmax(logits) over the selected rows. An empty
// selection yields loss 0 (callers warn, per the fusion-loss contract).
Var softmax_cross_entropy(const Var& logits, const std::vector<size_t>& targets,
                          const std::vector<uint8_t>& row_select = {});

Var embedding(const Var& table, const std::vector<size_t>& indices);

// ---- parameters / optimizer ----
struct ParamSet {
    std::vector<Var> params;

    Var add(Tensor t, std::string name) {
        Var v = param(std::move(t), std::move(name));
        params.push_back(v);
        return v;
    }
    void absorb(const ParamSet& o) {
        params.insert(params.end(), o.params.begin(), o.params.end());
    }
    void zero_grad() {
        for (auto& p : params)
            if (p->grad.shape == p->value.shape)
                std::fill(p->grad.data.begin(), p->grad.data.end(), 0.0);
    }
    size_t count() const {
        size_t n = 0;
        for (auto& p : params) n += p->value.numel();
        return n;
    }
};

struct Adam {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    size_t t = 0;
    std::vector<Tensor> m, v;

    explicit Adam(double lr_ = 1e-4) : lr(lr_) {}
    void step(ParamSet& ps);
};

// ---- gradient checking ----
// Central finite differences against the analytic gradient. Returns the max
// relative error over every coordinate of every input, with denominator
// max(1, |analytic|, |numeric|).
double grad_check(const std::function<Var(std::vector<Var>&)>& f, std::vector<Tensor> inputs,
                  double eps = 1e-6);

}  // namespace gest::ag
