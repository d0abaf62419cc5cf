// AVX2 kernel variants. Compiled with -mavx2 -mfma for this translation unit
// only; selection happens at runtime via __builtin_cpu_supports.

#include "gest/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

namespace gest::kern {
namespace {

inline double hsum(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d swapped = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, swapped));
}

double dot_avx2(const double* a, const double* b, size_t n) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
        acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
    }
    for (; i + 4 <= n; i += 4) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    }
    double acc = hsum(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

void axpy_avx2(double alpha, const double* x, double* y, size_t n) {
    const __m256d av = _mm256_set1_pd(alpha);
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d yv = _mm256_loadu_pd(y + i);
        yv = _mm256_fmadd_pd(av, _mm256_loadu_pd(x + i), yv);
        _mm256_storeu_pd(y + i, yv);
    }
    for (; i < n; ++i) y[i] += alpha * x[i];
}

void scal_avx2(double alpha, double* x, size_t n) {
    const __m256d av = _mm256_set1_pd(alpha);
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        _mm256_storeu_pd(x + i, _mm256_mul_pd(av, _mm256_loadu_pd(x + i)));
    }
    for (; i < n; ++i) x[i] *= alpha;
}

void vadd_avx2(const double* a, const double* b, double* out, size_t n) {
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    }
    for (; i < n; ++i) out[i] = a[i] + b[i];
}

void vmul_avx2(const double* a, const double* b, double* out, size_t n) {
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    }
    for (; i < n; ++i) out[i] = a[i] * b[i];
}

void matvec_avx2(const double* w, const double* x, double* y, size_t rows, size_t cols) {
    for (size_t r = 0; r < rows; ++r) y[r] = dot_avx2(w + r * cols, x, cols);
}

double sqdist_avx2(const double* a, const double* b, size_t n) {
    __m256d acc = _mm256_setzero_pd();
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d d = _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i));
        acc = _mm256_fmadd_pd(d, d, acc);
    }
    double s = hsum(acc);
    for (; i < n; ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

// Distances are vectorized per row; the winner scan stays scalar so the
// lowest-index tie-break matches the reference exactly.
size_t argmin_avx2(const double* z, const double* codes, size_t k, size_t d,
                   double* best_dist) {
    size_t best = 0;
    double bd = sqdist_avx2(z, codes, d);
    for (size_t i = 1; i < k; ++i) {
        const double di = sqdist_avx2(z, codes + i * d, d);
        if (di < bd) {
            bd = di;
            best = i;
        }
    }
    if (best_dist) *best_dist = bd;
    return best;
}

}  // namespace

const Backend* avx2_backend() {
    static const Backend table = {
        "avx2",     dot_avx2,   axpy_avx2,   scal_avx2, vadd_avx2,
        vmul_avx2,  matvec_avx2, sqdist_avx2, argmin_avx2,
    };
    return &table;
}

}  // namespace gest::kern

#else

namespace gest::kern {
const Backend* avx2_backend() { return nullptr; }
}  // namespace gest::kern

#endif
