#pragma once

#include <cstddef>
#include <string>
#include <vector>

// Data-parallel inner loops used by every module. A scalar reference
// implementation always exists; wider variants (AVX2) are selected at runtime
// and are equivalence-tested against the reference. Dispatch is process-wide.
//
// Contract notes:
//  - All kernels are pure and thread-safe.
//  - argmin_sqdist breaks ties toward the lowest index in every backend.
//  - Within one process the selected backend is fixed, so repeated evaluation
//    of the same expression is bit-reproducible.
namespace gest::kern {

struct Backend {
    const char* name;

    // sum_i a[i] * b[i]
    double (*dot)(const double* a, const double* b, size_t n);
    // y[i] += alpha * x[i]
    void (*axpy)(double alpha, const double* x, double* y, size_t n);
    // x[i] *= alpha
    void (*scal)(double alpha, double* x, size_t n);
    // out[i] = a[i] + b[i]
    void (*vadd)(const double* a, const double* b, double* out, size_t n);
    // out[i] = a[i] * b[i]
    void (*vmul)(const double* a, const double* b, double* out, size_t n);
    // y = W x, W row-major [rows x cols]
    void (*matvec)(const double* w, const double* x, double* y, size_t rows, size_t cols);
    // sum_i (a[i] - b[i])^2
    double (*sqdist)(const double* a, const double* b, size_t n);
    // nearest row of codes [k x d] to z under squared L2; lowest index wins ties
    size_t (*argmin_sqdist)(const double* z, const double* codes, size_t k, size_t d,
                            double* best_dist);
};

// Active backend (auto-selected on first use, override with set_backend or the
// GESTURE_KERNELS environment variable: "scalar", "avx2", "auto").
const Backend& active();
void set_backend(const std::string& name);
std::vector<std::string> available();

const Backend& scalar_backend();

inline double dot(const double* a, const double* b, size_t n) { return active().dot(a, b, n); }
inline void axpy(double alpha, const double* x, double* y, size_t n) {
    active().axpy(alpha, x, y, n);
}
inline void scal(double alpha, double* x, size_t n) { active().scal(alpha, x, n); }
inline void vadd(const double* a, const double* b, double* out, size_t n) {
    active().vadd(a, b, out, n);
}
inline void vmul(const double* a, const double* b, double* out, size_t n) {
    active().vmul(a, b, out, n);
}
inline void matvec(const double* w, const double* x, double* y, size_t rows, size_t cols) {
    active().matvec(w, x, y, rows, cols);
}
inline double sqdist(const double* a, const double* b, size_t n) {
    return active().sqdist(a, b, n);
}
inline size_t argmin_sqdist(const double* z, const double* codes, size_t k, size_t d,
                            double* best_dist = nullptr) {
    return active().argmin_sqdist(z, codes, k, d, best_dist);
}

}  // namespace gest::kern
