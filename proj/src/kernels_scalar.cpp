#include "gest/kernels.hpp"

// Reference kernels. Plain sequential loops; the ground truth the SIMD
// variants are tested against.

namespace gest::kern {
namespace {

double dot_scalar(const double* a, const double* b, size_t n) {
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

void axpy_scalar(double alpha, const double* x, double* y, size_t n) {
    for (size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void scal_scalar(double alpha, double* x, size_t n) {
    for (size_t i = 0; i < n; ++i) x[i] *= alpha;
}

void vadd_scalar(const double* a, const double* b, double* out, size_t n) {
    for (size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void vmul_scalar(const double* a, const double* b, double* out, size_t n) {
    for (size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void matvec_scalar(const double* w, const double* x, double* y, size_t rows, size_t cols) {
    for (size_t r = 0; r < rows; ++r) y[r] = dot_scalar(w + r * cols, x, cols);
}

double sqdist_scalar(const double* a, const double* b, size_t n) {
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return acc;
}

size_t argmin_scalar(const double* z, const double* codes, size_t k, size_t d,
                     double* best_dist) {
    size_t best = 0;
    double bd = sqdist_scalar(z, codes, d);
    for (size_t i = 1; i < k; ++i) {
        const double di = sqdist_scalar(z, codes + i * d, d);
        if (di < bd) {
            bd = di;
            best = i;
        }
    }
    if (best_dist) *best_dist = bd;
    return best;
}

}  // namespace

const Backend& scalar_backend() {
    static const Backend table = {
        "scalar",     dot_scalar,    axpy_scalar,   scal_scalar,
        vadd_scalar,  vmul_scalar,   matvec_scalar, sqdist_scalar,
        argmin_scalar,
    };
    return table;
}

}  // namespace gest::kern
