#include "gest/autograd.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include "gest/kernels.hpp"

namespace gest::ag {

namespace {

Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> bw,
              const char* /*op*/) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->parents = std::move(parents);
    for (auto& p : n->parents)
        if (p->requires_grad) n->requires_grad = true;
    if (n->requires_grad) n->backward_fn = std::move(bw);
    return n;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (!a->value.same_shape(b->value))
        throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

// dst[i] += g[i] * other[i]
void madd(double* dst, const double* g, const double* other, size_t n) {
    for (size_t i = 0; i < n; ++i) dst[i] += g[i] * other[i];
}

Tensor transpose2d(const Tensor& w) {
    Tensor t({w.cols(), w.rows()});
    for (size_t r = 0; r < w.rows(); ++r)
        for (size_t c = 0; c < w.cols(); ++c) t.at(c, r) = w.at(r, c);
    return t;
}

}  // namespace

Var constant(Tensor t) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    return n;
}

Var param(Tensor t, std::string name) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    n->requires_grad = true;
    n->name = std::move(name);
    return n;
}

void backward(const Var& root) {
    if (root->value.numel() != 1) throw std::invalid_argument("backward: root must be scalar");
    if (!root->requires_grad) return;
    root->ensure_grad();
    root->grad.data[0] = 1.0;

    // reverse post-order over parent edges = consumers before producers
    std::vector<Node*> order;
    std::vector<std::pair<Node*, size_t>> stack{{root.get(), 0}};
    std::unordered_set<Node*> visited{root.get()};
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------------------
// elementwise / shape
// ---------------------------------------------------------------------------

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    Tensor out(a->value.shape);
    kern::vadd(a->value.data.data(), b->value.data.data(), out.data.data(), out.numel());
    return make_node(std::move(out), {a, b},
                     [](Node& n) {
                         for (auto& p : n.parents)
                             if (p->requires_grad)
                                 kern::axpy(1.0, n.grad.data.data(), p->ensure_grad().data.data(),
                                            n.grad.numel());
                     },
                     "add");
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    Tensor out(a->value.shape);
    for (size_t i = 0; i < out.numel(); ++i) out.data[i] = a->value.data[i] - b->value.data[i];
    return make_node(std::move(out), {a, b},
                     [](Node& n) {
                         if (n.parents[0]->requires_grad)
                             kern::axpy(1.0, n.grad.data.data(),
                                        n.parents[0]->ensure_grad().data.data(), n.grad.numel());
                         if (n.parents[1]->requires_grad)
                             kern::axpy(-1.0, n.grad.data.data(),
                                        n.parents[1]->ensure_grad().data.data(), n.grad.numel());
                     },
                     "sub");
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    Tensor out(a->value.shape);
    kern::vmul(a->value.data.data(), b->value.data.data(), out.data.data(), out.numel());
    return make_node(std::move(out), {a, b},
                     [](Node& n) {
                         const size_t m = n.grad.numel();
                         if (n.parents[0]->requires_grad)
                             madd(n.parents[0]->ensure_grad().data.data(), n.grad.data.data(),
                                  n.parents[1]->value.data.data(), m);
                         if (n.parents[1]->requires_grad)
                             madd(n.parents[1]->ensure_grad().data.data(), n.grad.data.data(),
                                  n.parents[0]->value.data.data(), m);
                     },
                     "mul");
}

Var scale(const Var& a, double s) {
    Tensor out = a->value;
    kern::scal(s, out.data.data(), out.numel());
    return make_node(std::move(out), {a},
                     [s](Node& n) {
                         kern::axpy(s, n.grad.data.data(), n.parents[0]->ensure_grad().data.data(),
                                    n.grad.numel());
                     },
                     "scale");
}

Var add_rowvec(const Var& x, const Var& row) {
    const size_t d = x->value.cols();
    if (row->value.numel() != d) throw std::invalid_argument("add_rowvec: width mismatch");
    Tensor out = x->value;
    for (size_t t = 0; t < out.rows(); ++t)
        kern::axpy(1.0, row->value.data.data(), out.row_ptr(t), d);
    return make_node(std::move(out), {x, row},
                     [d](Node& n) {
                         if (n.parents[0]->requires_grad)
                             kern::axpy(1.0, n.grad.data.data(),
                                        n.parents[0]->ensure_grad().data.data(), n.grad.numel());
                         if (n.parents[1]->requires_grad) {
                             double* dr = n.parents[1]->ensure_grad().data.data();
                             for (size_t t = 0; t < n.grad.rows(); ++t)
                                 kern::axpy(1.0, n.grad.row_ptr(t), dr, d);
                         }
                     },
                     "add_rowvec");
}

Var gelu(const Var& x) {
    Tensor out(x->value.shape);
    for (size_t i = 0; i < out.numel(); ++i) {
        const double v = x->value.data[i];
        out.data[i] = 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2));
    }
    return make_node(std::move(out), {x},
                     [](Node& n) {
                         double* dx = n.parents[0]->ensure_grad().data.data();
                         const double* xv = n.parents[0]->value.data.data();
                         for (size_t i = 0; i < n.grad.numel(); ++i) {
                             const double v = xv[i];
                             const double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
                             const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * M_PI);
                             dx[i] += n.grad.data[i] * (cdf + v * pdf);
                         }
                     },
                     "gelu");
}

Var detach(const Var& x) { return constant(x->value); }

Var concat_rows(const Var& a, const Var& b) {
    if (a->value.cols() != b->value.cols())
        throw std::invalid_argument("concat_rows: width mismatch");
    const size_t d = a->value.cols();
    Tensor out({a->value.rows() + b->value.rows(), d});
    std::copy(a->value.data.begin(), a->value.data.end(), out.data.begin());
    std::copy(b->value.data.begin(), b->value.data.end(),
              out.data.begin() + ptrdiff_t(a->value.numel()));
    const size_t na = a->value.numel();
    return make_node(std::move(out), {a, b},
                     [na](Node& n) {
                         if (n.parents[0]->requires_grad)
                             kern::axpy(1.0, n.grad.data.data(),
                                        n.parents[0]->ensure_grad().data.data(), na);
                         if (n.parents[1]->requires_grad)
                             kern::axpy(1.0, n.grad.data.data() + na,
                                        n.parents[1]->ensure_grad().data.data(),
                                        n.grad.numel() - na);
                     },
                     "concat_rows");
}

Var slice_rows(const Var& x, size_t start, size_t len) {
    const size_t d = x->value.cols();
    if (start + len > x->value.rows()) throw std::invalid_argument("slice_rows: out of range");
    Tensor out({len, d});
    std::copy(x->value.data.begin() + ptrdiff_t(start * d),
              x->value.data.begin() + ptrdiff_t((start + len) * d), out.data.begin());
    return make_node(std::move(out), {x},
                     [start, d](Node& n) {
                         kern::axpy(1.0, n.grad.data.data(),
                                    n.parents[0]->ensure_grad().data.data() + start * d,
                                    n.grad.numel());
                     },
                     "slice_rows");
}

Var reshape_rows(const Var& x, size_t new_cols) {
    if (new_cols == 0 || x->value.numel() % new_cols != 0)
        throw std::invalid_argument("reshape_rows: width does not divide element count");
    Tensor out({x->value.numel() / new_cols, new_cols}, x->value.data);
    return make_node(std::move(out), {x},
                     [](Node& n) {
                         kern::axpy(1.0, n.grad.data.data(),
                                    n.parents[0]->ensure_grad().data.data(), n.grad.numel());
                     },
                     "reshape_rows");
}

Var select_rows(const Var& x, const Var& row, const std::vector<uint8_t>& use_row) {
    const size_t d = x->value.cols();
    if (row->value.numel() != d) throw std::invalid_argument("select_rows: width mismatch");
    if (use_row.size() != x->value.rows())
        throw std::invalid_argument("select_rows: mask length mismatch");
    Tensor out = x->value;
    for (size_t t = 0; t < out.rows(); ++t)
        if (use_row[t]) std::copy(row->value.data.begin(), row->value.data.end(), out.row_ptr(t));
    return make_node(std::move(out), {x, row},
                     [use_row, d](Node& n) {
                         for (size_t t = 0; t < n.grad.rows(); ++t) {
                             if (use_row[t]) {
                                 if (n.parents[1]->requires_grad)
                                     kern::axpy(1.0, n.grad.row_ptr(t),
                                                n.parents[1]->ensure_grad().data.data(), d);
                             } else if (n.parents[0]->requires_grad) {
                                 kern::axpy(1.0, n.grad.row_ptr(t),
                                            n.parents[0]->ensure_grad().row_ptr(t), d);
                             }
                         }
                     },
                     "select_rows");
}

Var gather_rows(const Var& x, std::vector<size_t> idx) {
    const size_t d = x->value.cols();
    Tensor out({idx.size(), d});
    for (size_t t = 0; t < idx.size(); ++t) {
        if (idx[t] >= x->value.rows()) throw std::invalid_argument("gather_rows: out of range");
        std::copy(x->value.row_ptr(idx[t]), x->value.row_ptr(idx[t]) + d, out.row_ptr(t));
    }
    return make_node(std::move(out), {x},
                     [idx = std::move(idx), d](Node& n) {
                         Tensor& dx = n.parents[0]->ensure_grad();
                         for (size_t t = 0; t < idx.size(); ++t)
                             kern::axpy(1.0, n.grad.row_ptr(t), dx.row_ptr(idx[t]), d);
                     },
                     "gather_rows");
}

// ---------------------------------------------------------------------------
// dense / conv
// ---------------------------------------------------------------------------

Var linear(const Var& x, const Var& w, const Var& b) {
    const size_t t_len = x->value.rows();
    const size_t in = x->value.cols();
    const size_t out_dim = w->value.rows();
    if (w->value.cols() != in) throw std::invalid_argument("linear: weight/input mismatch");
    if (b && b->value.numel() != out_dim) throw std::invalid_argument("linear: bias mismatch");

    Tensor out({t_len, out_dim});
    for (size_t t = 0; t < t_len; ++t) {
        kern::matvec(w->value.data.data(), x->value.row_ptr(t), out.row_ptr(t), out_dim, in);
        if (b) kern::vadd(out.row_ptr(t), b->value.data.data(), out.row_ptr(t), out_dim);
    }
    std::vector<Var> parents = {x, w};
    if (b) parents.push_back(b);
    return make_node(
        std::move(out), std::move(parents),
        [in, out_dim](Node& n) {
            const Var& x = n.parents[0];
            const Var& w = n.parents[1];
            const size_t t_len = x->value.rows();
            if (x->requires_grad) {
                Tensor wt = transpose2d(w->value);
                Tensor& dx = x->ensure_grad();
                std::vector<double> tmp(in);
                for (size_t t = 0; t < t_len; ++t) {
                    kern::matvec(wt.data.data(), n.grad.row_ptr(t), tmp.data(), in, out_dim);
                    kern::vadd(dx.row_ptr(t), tmp.data(), dx.row_ptr(t), in);
                }
            }
            if (w->requires_grad) {
                Tensor& dw = w->ensure_grad();
                for (size_t t = 0; t < t_len; ++t)
                    for (size_t o = 0; o < out_dim; ++o)
                        kern::axpy(n.grad.at(t, o), x->value.row_ptr(t), dw.row_ptr(o), in);
            }
            if (n.parents.size() > 2 && n.parents[2]->requires_grad) {
                double* db = n.parents[2]->ensure_grad().data.data();
                for (size_t t = 0; t < t_len; ++t)
                    kern::axpy(1.0, n.grad.row_ptr(t), db, out_dim);
            }
        },
        "linear");
}

namespace {

struct ConvGeom {
    size_t k, dilation, stride, pad_left, t_in, t_out, cin, cout;
};

ConvGeom conv_geometry(const Tensor& x, const Tensor& w, size_t k, size_t dilation, size_t stride,
                       Pad pad) {
    ConvGeom g;
    g.k = k;
    g.dilation = dilation;
    g.stride = stride;
    g.t_in = x.rows();
    g.cin = x.cols();
    g.cout = w.rows();
    if (w.cols() != k * g.cin) throw std::invalid_argument("conv1d: kernel/channel mismatch");
    if (k < 1 || dilation < 1) throw std::invalid_argument("conv1d: bad kernel geometry");
    if (pad == Pad::causal) {
        if (stride != 1) throw std::invalid_argument("conv1d: causal conv is stride 1");
        g.pad_left = (k - 1) * dilation;
        g.t_out = g.t_in;
    } else {
        if (stride == 1) {
            if (k % 2 == 0) throw std::invalid_argument("conv1d: same padding needs odd k");
            g.pad_left = (k - 1) / 2 * dilation;
            g.t_out = g.t_in;
        } else if (stride == 2) {
            if (dilation != 1 || k < 2 || k % 2 != 0)
                throw std::invalid_argument("conv1d: stride-2 conv needs even k, dilation 1");
            if (g.t_in % 2 != 0) throw std::invalid_argument("conv1d: stride-2 needs even length");
            g.pad_left = (k - 2) / 2;
            g.t_out = g.t_in / 2;
        } else {
            throw std::invalid_argument("conv1d: unsupported stride");
        }
    }
    return g;
}

void gather_window(const Tensor& x, const ConvGeom& g, size_t tau, double* win) {
    std::fill(win, win + g.k * g.cin, 0.0);
    const ptrdiff_t base = ptrdiff_t(tau * g.stride) - ptrdiff_t(g.pad_left);
    for (size_t j = 0; j < g.k; ++j) {
        const ptrdiff_t pos = base + ptrdiff_t(j * g.dilation);
        if (pos >= 0 && pos < ptrdiff_t(g.t_in))
            std::copy(x.row_ptr(size_t(pos)), x.row_ptr(size_t(pos)) + g.cin, win + j * g.cin);
    }
}

}  // namespace

Var conv1d(const Var& x, const Var& w, const Var& b, size_t k, size_t dilation, size_t stride,
           Pad pad) {
    const ConvGeom g = conv_geometry(x->value, w->value, k, dilation, stride, pad);
    if (b && b->value.numel() != g.cout) throw std::invalid_argument("conv1d: bias mismatch");

    Tensor out({g.t_out, g.cout});
    std::vector<double> win(g.k * g.cin);
    for (size_t tau = 0; tau < g.t_out; ++tau) {
        gather_window(x->value, g, tau, win.data());
        kern::matvec(w->value.data.data(), win.data(), out.row_ptr(tau), g.cout, g.k * g.cin);
        if (b) kern::vadd(out.row_ptr(tau), b->value.data.data(), out.row_ptr(tau), g.cout);
    }
    std::vector<Var> parents = {x, w};
    if (b) parents.push_back(b);
    return make_node(
        std::move(out), std::move(parents),
        [g](Node& n) {
            const Var& x = n.parents[0];
            const Var& w = n.parents[1];
            const size_t wn = g.k * g.cin;
            std::vector<double> win(wn), dwin(wn);
            Tensor wt;
            if (x->requires_grad) wt = transpose2d(w->value);
            for (size_t tau = 0; tau < g.t_out; ++tau) {
                const double* grow = n.grad.row_ptr(tau);
                if (x->requires_grad) {
                    kern::matvec(wt.data.data(), grow, dwin.data(), wn, g.cout);
                    Tensor& dx = x->ensure_grad();
                    const ptrdiff_t base = ptrdiff_t(tau * g.stride) - ptrdiff_t(g.pad_left);
                    for (size_t j = 0; j < g.k; ++j) {
                        const ptrdiff_t pos = base + ptrdiff_t(j * g.dilation);
                        if (pos >= 0 && pos < ptrdiff_t(g.t_in))
                            kern::vadd(dx.row_ptr(size_t(pos)), dwin.data() + j * g.cin,
                                       dx.row_ptr(size_t(pos)), g.cin);
                    }
                }
                if (w->requires_grad) {
                    gather_window(x->value, g, tau, win.data());
                    Tensor& dw = w->ensure_grad();
                    for (size_t o = 0; o < g.cout; ++o)
                        kern::axpy(grow[o], win.data(), dw.row_ptr(o), wn);
                }
                if (n.parents.size() > 2 && n.parents[2]->requires_grad)
                    kern::axpy(1.0, grow, n.parents[2]->ensure_grad().data.data(), g.cout);
            }
        },
        "conv1d");
}

Var upsample_nn2(const Var& x) {
    const size_t t_len = x->value.rows(), d = x->value.cols();
    Tensor out({2 * t_len, d});
    for (size_t t = 0; t < t_len; ++t) {
        std::copy(x->value.row_ptr(t), x->value.row_ptr(t) + d, out.row_ptr(2 * t));
        std::copy(x->value.row_ptr(t), x->value.row_ptr(t) + d, out.row_ptr(2 * t + 1));
    }
    return make_node(std::move(out), {x},
                     [d](Node& n) {
                         Tensor& dx = n.parents[0]->ensure_grad();
                         for (size_t t = 0; t < dx.rows(); ++t) {
                             kern::vadd(dx.row_ptr(t), n.grad.row_ptr(2 * t), dx.row_ptr(t), d);
                             kern::vadd(dx.row_ptr(t), n.grad.row_ptr(2 * t + 1), dx.row_ptr(t), d);
                         }
                     },
                     "upsample_nn2");
}

Var layernorm(const Var& x, const Var& gain, const Var& bias, double eps) {
    const size_t t_len = x->value.rows(), d = x->value.cols();
    if (gain->value.numel() != d || bias->value.numel() != d)
        throw std::invalid_argument("layernorm: gain/bias mismatch");
    Tensor out({t_len, d});
    for (size_t t = 0; t < t_len; ++t) {
        const double* xr = x->value.row_ptr(t);
        double mu = 0.0;
        for (size_t i = 0; i < d; ++i) mu += xr[i];
        mu /= double(d);
        double var = 0.0;
        for (size_t i = 0; i < d; ++i) var += (xr[i] - mu) * (xr[i] - mu);
        var /= double(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        double* yr = out.row_ptr(t);
        for (size_t i = 0; i < d; ++i)
            yr[i] = (xr[i] - mu) * inv * gain->value.data[i] + bias->value.data[i];
    }
    return make_node(
        std::move(out), {x, gain, bias},
        [eps, d](Node& n) {
            const Var& x = n.parents[0];
            const Var& gain = n.parents[1];
            const Var& bias = n.parents[2];
            std::vector<double> xhat(d), dxhat(d);
            for (size_t t = 0; t < n.grad.rows(); ++t) {
                const double* xr = x->value.row_ptr(t);
                const double* gr = n.grad.row_ptr(t);
                double mu = 0.0;
                for (size_t i = 0; i < d; ++i) mu += xr[i];
                mu /= double(d);
                double var = 0.0;
                for (size_t i = 0; i < d; ++i) var += (xr[i] - mu) * (xr[i] - mu);
                var /= double(d);
                const double inv = 1.0 / std::sqrt(var + eps);
                for (size_t i = 0; i < d; ++i) xhat[i] = (xr[i] - mu) * inv;

                if (gain->requires_grad) {
                    double* dg = gain->ensure_grad().data.data();
                    madd(dg, gr, xhat.data(), d);
                }
                if (bias->requires_grad)
                    kern::axpy(1.0, gr, bias->ensure_grad().data.data(), d);
                if (x->requires_grad) {
                    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                    for (size_t i = 0; i < d; ++i) {
                        dxhat[i] = gr[i] * gain->value.data[i];
                        sum_dxhat += dxhat[i];
                        sum_dxhat_xhat += dxhat[i] * xhat[i];
                    }
                    double* dx = x->ensure_grad().row_ptr(t);
                    const double dn = double(d);
                    for (size_t i = 0; i < d; ++i)
                        dx[i] += inv * (dxhat[i] - sum_dxhat / dn - xhat[i] * sum_dxhat_xhat / dn);
                }
            }
        },
        "layernorm");
}

// ---------------------------------------------------------------------------
// rotary / attention
// ---------------------------------------------------------------------------

namespace {
constexpr double kRotaryBase = 10000.0;
}  // namespace

void rotary_apply_row(const double* x, double* y, double pos, size_t head_dim, size_t d,
                      bool invert) {
    for (size_t h0 = 0; h0 < d; h0 += head_dim) {
        for (size_t i = 0; 2 * i + 1 < head_dim; ++i) {
            const double freq = std::pow(kRotaryBase, -2.0 * double(i) / double(head_dim));
            const double a = pos * freq;
            const double c = std::cos(a);
            const double s = invert ? -std::sin(a) : std::sin(a);
            const double x0 = x[h0 + 2 * i], x1 = x[h0 + 2 * i + 1];
            y[h0 + 2 * i] = x0 * c - x1 * s;
            y[h0 + 2 * i + 1] = x0 * s + x1 * c;
        }
    }
}

Var rotary(const Var& x, const std::vector<double>& positions, size_t head_dim) {
    const size_t t_len = x->value.rows(), d = x->value.cols();
    if (head_dim == 0 || head_dim % 2 != 0 || d % head_dim != 0)
        throw std::invalid_argument("rotary: head_dim must be even and divide width");
    if (positions.size() != t_len) throw std::invalid_argument("rotary: positions length");
    Tensor out({t_len, d});
    for (size_t t = 0; t < t_len; ++t)
        rotary_apply_row(x->value.row_ptr(t), out.row_ptr(t), positions[t], head_dim, d, false);
    return make_node(std::move(out), {x},
                     [positions, head_dim, d](Node& n) {
                         Tensor& dx = n.parents[0]->ensure_grad();
                         std::vector<double> tmp(d);
                         for (size_t t = 0; t < n.grad.rows(); ++t) {
                             rotary_apply_row(n.grad.row_ptr(t), tmp.data(), positions[t],
                                              head_dim, d, true);
                             kern::vadd(dx.row_ptr(t), tmp.data(), dx.row_ptr(t), d);
                         }
                     },
                     "rotary");
}

AttnMask AttnMask::all(size_t tq, size_t tk) {
    AttnMask m;
    m.tq = tq;
    m.tk = tk;
    m.allow.assign(tq * tk, 1);
    return m;
}

AttnMask AttnMask::causal(size_t t, size_t window) {
    AttnMask m;
    m.tq = t;
    m.tk = t;
    m.allow.assign(t * t, 0);
    for (size_t i = 0; i < t; ++i)
        for (size_t j = 0; j <= i; ++j)
            if (i - j < window) m.allow[i * t + j] = 1;
    return m;
}

Var masked_attention(const Var& q, const Var& k, const Var& v, const AttnMask& mask,
                     size_t n_heads) {
    const size_t tq = q->value.rows(), tk = k->value.rows(), d = q->value.cols();
    if (k->value.cols() != d || v->value.cols() != d)
        throw std::invalid_argument("attention: width mismatch");
    if (v->value.rows() != tk) throw std::invalid_argument("attention: key/value length mismatch");
    if (mask.tq != tq || mask.tk != tk) throw std::invalid_argument("attention: mask shape");
    if (n_heads == 0 || d % n_heads != 0) throw std::invalid_argument("attention: head split");
    const size_t hd = d / n_heads;
    const double sc = 1.0 / std::sqrt(double(hd));

    // softmax weights per (head, query) over attendable keys, kept for backward
    auto weights = std::make_shared<std::vector<std::vector<std::pair<uint32_t, double>>>>(
        n_heads * tq);

    Tensor out({tq, d});
    std::vector<double> scores;
    for (size_t h = 0; h < n_heads; ++h) {
        const size_t off = h * hd;
        for (size_t i = 0; i < tq; ++i) {
            scores.clear();
            auto& row = (*weights)[h * tq + i];
            row.clear();
            double mx = -HUGE_VAL;
            for (size_t j = 0; j < tk; ++j) {
                if (!mask.at(i, j)) continue;
                const double s =
                    kern::dot(q->value.row_ptr(i) + off, k->value.row_ptr(j) + off, hd) * sc;
                row.push_back({uint32_t(j), 0.0});
                scores.push_back(s);
                if (s > mx) mx = s;
            }
            if (row.empty())
                throw std::runtime_error("attention: query row with no attendable positions");
            double z = 0.0;
            for (double& s : scores) {
                s = std::exp(s - mx);
                z += s;
            }
            double* orow = out.row_ptr(i) + off;
            for (size_t a = 0; a < row.size(); ++a) {
                row[a].second = scores[a] / z;
                kern::axpy(row[a].second, v->value.row_ptr(row[a].first) + off, orow, hd);
            }
        }
    }
    return make_node(
        std::move(out), {q, k, v},
        [weights, n_heads, hd, sc, tq](Node& n) {
            const Var& q = n.parents[0];
            const Var& k = n.parents[1];
            const Var& v = n.parents[2];
            std::vector<double> ds;
            for (size_t h = 0; h < n_heads; ++h) {
                const size_t off = h * hd;
                for (size_t i = 0; i < tq; ++i) {
                    const auto& row = (*weights)[h * tq + i];
                    const double* go = n.grad.row_ptr(i) + off;
                    ds.assign(row.size(), 0.0);
                    double dots = 0.0;
                    for (size_t a = 0; a < row.size(); ++a) {
                        const auto [j, w] = row[a];
                        if (v->requires_grad)
                            kern::axpy(w, go, v->ensure_grad().row_ptr(j) + off, hd);
                        ds[a] = kern::dot(go, v->value.row_ptr(j) + off, hd);
                        dots += row[a].second * ds[a];
                    }
                    for (size_t a = 0; a < row.size(); ++a) {
                        const auto [j, w] = row[a];
                        const double da = w * (ds[a] - dots) * sc;
                        if (q->requires_grad)
                            kern::axpy(da, k->value.row_ptr(j) + off,
                                       q->ensure_grad().row_ptr(i) + off, hd);
                        if (k->requires_grad)
                            kern::axpy(da, q->value.row_ptr(i) + off,
                                       k->ensure_grad().row_ptr(j) + off, hd);
                    }
                }
            }
        },
        "attention");
}

// ---------------------------------------------------------------------------
// losses / embedding
// ---------------------------------------------------------------------------

Var mean_all(const Var& x) {
    double acc = 0.0;
    for (double v : x->value.data) acc += v;
    const size_t n = x->value.numel();
    Tensor out({1});
    out.data[0] = acc / double(n);
    return make_node(std::move(out), {x},
                     [n](Node& nd) {
                         const double g = nd.grad.data[0] / double(n);
                         double* dx = nd.parents[0]->ensure_grad().data.data();
                         for (size_t i = 0; i < n; ++i) dx[i] += g;
                     },
                     "mean_all");
}

Var l1_loss(const Var& a, const Var& b) {
    check_same_shape(a, b, "l1_loss");
    const size_t n = a->value.numel();
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) acc += std::abs(a->value.data[i] - b->value.data[i]);
    Tensor out({1});
    out.data[0] = acc / double(n);
    return make_node(std::move(out), {a, b},
                     [n](Node& nd) {
                         const double g = nd.grad.data[0] / double(n);
                         const double* av = nd.parents[0]->value.data.data();
                         const double* bv = nd.parents[1]->value.data.data();
                         for (size_t i = 0; i < n; ++i) {
                             const double diff = av[i] - bv[i];
                             const double s = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
                             if (nd.parents[0]->requires_grad)
                                 nd.parents[0]->ensure_grad().data[i] += g * s;
                             if (nd.parents[1]->requires_grad)
                                 nd.parents[1]->ensure_grad().data[i] -= g * s;
                         }
                     },
                     "l1_loss");
}

Var mse_loss(const Var& a, const Var& b) {
    check_same_shape(a, b, "mse_loss");
    const size_t n = a->value.numel();
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double d = a->value.data[i] - b->value.data[i];
        acc += d * d;
    }
    Tensor out({1});
    out.data[0] = acc / double(n);
    return make_node(std::move(out), {a, b},
                     [n](Node& nd) {
                         const double g = 2.0 * nd.grad.data[0] / double(n);
                         const double* av = nd.parents[0]->value.data.data();
                         const double* bv = nd.parents[1]->value.data.data();
                         for (size_t i = 0; i < n; ++i) {
                             const double d = g * (av[i] - bv[i]);
                             if (nd.parents[0]->requires_grad)
                                 nd.parents[0]->ensure_grad().data[i] += d;
                             if (nd.parents[1]->requires_grad)
                                 nd.parents[1]->ensure_grad().data[i] -= d;
                         }
                     },
                     "mse_loss");
}

Var softmax_cross_entropy(const Var& logits, const std::vector<size_t>& targets,
                          const std::vector<uint8_t>& row_select) {
    const size_t t_len = logits->value.rows(), k = logits->value.cols();
    if (targets.size() != t_len) throw std::invalid_argument("cross_entropy: target length");
    if (!row_select.empty() && row_select.size() != t_len)
        throw std::invalid_argument("cross_entropy: selection length");
    for (size_t t = 0; t < t_len; ++t) {
        const bool on = row_select.empty() || row_select[t];
        if (on && targets[t] >= k) throw std::invalid_argument("cross_entropy: token index >= K");
    }

    size_t count = 0;
    double acc = 0.0;
    auto probs = std::make_shared<std::vector<double>>();  // selected rows' softmax, row-major
    std::vector<size_t> selected;
    for (size_t t = 0; t < t_len; ++t) {
        if (!row_select.empty() && !row_select[t]) continue;
        ++count;
        selected.push_back(t);
        const double* row = logits->value.row_ptr(t);
        double mx = row[0];
        for (size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        const size_t base = probs->size();
        probs->resize(base + k);
        for (size_t j = 0; j < k; ++j) {
            const double e = std::exp(row[j] - mx);
            (*probs)[base + j] = e;
            z += e;
        }
        for (size_t j = 0; j < k; ++j) (*probs)[base + j] /= z;
        acc -= std::log((*probs)[base + targets[t]]);
    }
    Tensor out({1});
    out.data[0] = count ? acc / double(count) : 0.0;
    return make_node(std::move(out), {logits},
                     [probs, selected = std::move(selected), targets, k, count](Node& nd) {
                         if (!count) return;
                         const double g = nd.grad.data[0] / double(count);
                         Tensor& dl = nd.parents[0]->ensure_grad();
                         for (size_t a = 0; a < selected.size(); ++a) {
                             const size_t t = selected[a];
                             double* dr = dl.row_ptr(t);
                             const double* p = probs->data() + a * k;
                             for (size_t j = 0; j < k; ++j) dr[j] += g * p[j];
                             dr[targets[t]] -= g;
                         }
                     },
                     "softmax_ce");
}

Var embedding(const Var& table, const std::vector<size_t>& indices) {
    const size_t d = table->value.cols();
    Tensor out({indices.size(), d});
    for (size_t t = 0; t < indices.size(); ++t) {
        if (indices[t] >= table->value.rows())
            throw std::invalid_argument("embedding: index out of range");
        std::copy(table->value.row_ptr(indices[t]), table->value.row_ptr(indices[t]) + d,
                  out.row_ptr(t));
    }
    return make_node(std::move(out), {table},
                     [indices, d](Node& n) {
                         Tensor& dt = n.parents[0]->ensure_grad();
                         for (size_t t = 0; t < indices.size(); ++t)
                             kern::axpy(1.0, n.grad.row_ptr(t), dt.row_ptr(indices[t]), d);
                     },
                     "embedding");
}

// ---------------------------------------------------------------------------
// optimizer / gradient checking
// ---------------------------------------------------------------------------

void Adam::step(ParamSet& ps) {
    if (m.empty()) {
        for (auto& p : ps.params) {
            m.push_back(Tensor::zeros(p->value.shape));
            v.push_back(Tensor::zeros(p->value.shape));
        }
    }
    ++t;
    const double c1 = 1.0 - std::pow(beta1, double(t));
    const double c2 = 1.0 - std::pow(beta2, double(t));
    for (size_t i = 0; i < ps.params.size(); ++i) {
        Node& p = *ps.params[i];
        if (p.grad.shape != p.value.shape) continue;  // never touched this step
        for (size_t j = 0; j < p.value.numel(); ++j) {
            const double g = p.grad.data[j];
            m[i].data[j] = beta1 * m[i].data[j] + (1.0 - beta1) * g;
            v[i].data[j] = beta2 * v[i].data[j] + (1.0 - beta2) * g * g;
            const double mh = m[i].data[j] / c1;
            const double vh = v[i].data[j] / c2;
            p.value.data[j] -= lr * mh / (std::sqrt(vh) + eps);
        }
    }
}

double grad_check(const std::function<Var(std::vector<Var>&)>& f, std::vector<Tensor> inputs,
                  double eps) {
    if (eps <= 0.0 || eps > 1e-3) throw std::invalid_argument("grad_check: eps out of range");
    std::vector<Var> vars;
    vars.reserve(inputs.size());
    for (auto& t : inputs) vars.push_back(param(t));
    Var out = f(vars);
    if (!std::isfinite(out->value.data[0]))
        throw std::runtime_error("grad_check: non-finite forward value");
    backward(out);

    auto eval = [&](const std::vector<Tensor>& pts) {
        std::vector<Var> vs;
        vs.reserve(pts.size());
        for (auto& t : pts) vs.push_back(constant(t));
        Var o = f(vs);
        if (!std::isfinite(o->value.data[0]))
            throw std::runtime_error("grad_check: non-finite probe value");
        return o->value.data[0];
    };

    double max_rel = 0.0;
    for (size_t i = 0; i < inputs.size(); ++i) {
        const double analytic_missing = vars[i]->grad.shape == vars[i]->value.shape ? 0.0 : 1.0;
        for (size_t c = 0; c < inputs[i].numel(); ++c) {
            const double orig = inputs[i].data[c];
            const double h = eps * std::max(1.0, std::abs(orig));
            inputs[i].data[c] = orig + h;
            const double fp = eval(inputs);
            inputs[i].data[c] = orig - h;
            const double fm = eval(inputs);
            inputs[i].data[c] = orig;
            const double fd = (fp - fm) / (2.0 * h);
            const double an = analytic_missing ? 0.0 : vars[i]->grad.data[c];
            const double rel =
                std::abs(an - fd) / std::max({1.0, std::abs(an), std::abs(fd)});
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

}  // namespace gest::ag
