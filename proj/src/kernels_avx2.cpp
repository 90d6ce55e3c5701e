#include "lns/kernels.hpp"

// AVX2 backend. Mirrors the scalar reference exactly: mul and add stay
// separate instructions (no fma) and reductions keep the 8-lane layout,
// so results are bit-identical to kernels_scalar.cpp.

#if defined(__AVX2__)

#include <immintrin.h>

namespace lns::kern {
namespace {

void sub_f32(const float* a, const float* b, float* out, size_t n) {
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 va = _mm256_loadu_ps(a + i);
        __m256 vb = _mm256_loadu_ps(b + i);
        _mm256_storeu_ps(out + i, _mm256_sub_ps(va, vb));
    }
    for (; i < n; ++i) out[i] = a[i] - b[i];
}

void widen(const float* x, double* out, size_t n) {
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m128 vx = _mm_loadu_ps(x + i);
        _mm256_storeu_pd(out + i, _mm256_cvtps_pd(vx));
    }
    for (; i < n; ++i) out[i] = static_cast<double>(x[i]);
}

void narrow(const double* x, float* out, size_t n) {
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d vx = _mm256_loadu_pd(x + i);
        _mm_storeu_ps(out + i, _mm256_cvtpd_ps(vx));
    }
    for (; i < n; ++i) out[i] = static_cast<float>(x[i]);
}

void axpy_wf64(double s, const float* x, double* acc, size_t n) {
    __m256d vs = _mm256_set1_pd(s);
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d vx = _mm256_cvtps_pd(_mm_loadu_ps(x + i));
        __m256d va = _mm256_loadu_pd(acc + i);
        _mm256_storeu_pd(acc + i, _mm256_add_pd(va, _mm256_mul_pd(vs, vx)));
    }
    for (; i < n; ++i) acc[i] += s * static_cast<double>(x[i]);
}

void fmacc_wf64(const float* w, const float* x, double* acc, size_t n) {
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d vw = _mm256_cvtps_pd(_mm_loadu_ps(w + i));
        __m256d vx = _mm256_cvtps_pd(_mm_loadu_ps(x + i));
        __m256d va = _mm256_loadu_pd(acc + i);
        _mm256_storeu_pd(acc + i, _mm256_add_pd(va, _mm256_mul_pd(vw, vx)));
    }
    for (; i < n; ++i)
        acc[i] += static_cast<double>(w[i]) * static_cast<double>(x[i]);
}

void axpy_f64(double s, const double* x, double* y, size_t n) {
    __m256d vs = _mm256_set1_pd(s);
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d vx = _mm256_loadu_pd(x + i);
        __m256d vy = _mm256_loadu_pd(y + i);
        _mm256_storeu_pd(y + i, _mm256_add_pd(vy, _mm256_mul_pd(vs, vx)));
    }
    for (; i < n; ++i) y[i] += s * x[i];
}

void scale_f64(double s, double* y, size_t n) {
    __m256d vs = _mm256_set1_pd(s);
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d vy = _mm256_loadu_pd(y + i);
        _mm256_storeu_pd(y + i, _mm256_mul_pd(vy, vs));
    }
    for (; i < n; ++i) y[i] *= s;
}

void update_f32(double s, const double* g, float* y, size_t n) {
    __m256d vs = _mm256_set1_pd(s);
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d vy = _mm256_cvtps_pd(_mm_loadu_ps(y + i));
        __m256d vg = _mm256_loadu_pd(g + i);
        __m256d r = _mm256_add_pd(vy, _mm256_mul_pd(vs, vg));
        _mm_storeu_ps(y + i, _mm256_cvtpd_ps(r));
    }
    for (; i < n; ++i)
        y[i] = static_cast<float>(static_cast<double>(y[i]) + s * g[i]);
}

double dot_f64(const double* a, const double* b, size_t n) {
    // acc_lo holds lanes 0..3, acc_hi lanes 4..7 of the reference scheme
    __m256d acc_lo = _mm256_setzero_pd();
    __m256d acc_hi = _mm256_setzero_pd();
    size_t main = n - n % 8;
    for (size_t j = 0; j < main; j += 8) {
        __m256d a0 = _mm256_loadu_pd(a + j);
        __m256d b0 = _mm256_loadu_pd(b + j);
        __m256d a1 = _mm256_loadu_pd(a + j + 4);
        __m256d b1 = _mm256_loadu_pd(b + j + 4);
        acc_lo = _mm256_add_pd(acc_lo, _mm256_mul_pd(a0, b0));
        acc_hi = _mm256_add_pd(acc_hi, _mm256_mul_pd(a1, b1));
    }
    double lane[8];
    _mm256_storeu_pd(lane, acc_lo);
    _mm256_storeu_pd(lane + 4, acc_hi);
    for (size_t j = main, l = 0; j < n; ++j, ++l) lane[l] += a[j] * b[j];
    double s = 0.0;
    for (size_t l = 0; l < 8; ++l) s += lane[l];
    return s;
}

double sum_f64(const double* x, size_t n) {
    __m256d acc_lo = _mm256_setzero_pd();
    __m256d acc_hi = _mm256_setzero_pd();
    size_t main = n - n % 8;
    for (size_t j = 0; j < main; j += 8) {
        acc_lo = _mm256_add_pd(acc_lo, _mm256_loadu_pd(x + j));
        acc_hi = _mm256_add_pd(acc_hi, _mm256_loadu_pd(x + j + 4));
    }
    double lane[8];
    _mm256_storeu_pd(lane, acc_lo);
    _mm256_storeu_pd(lane + 4, acc_hi);
    for (size_t j = main, l = 0; j < n; ++j, ++l) lane[l] += x[j];
    double s = 0.0;
    for (size_t l = 0; l < 8; ++l) s += lane[l];
    return s;
}

const Ops kAvx2 = {
    "avx2",   sub_f32,  widen,     narrow,     axpy_wf64,
    fmacc_wf64, axpy_f64, scale_f64, update_f32, dot_f64, sum_f64,
};

}  // namespace

const Ops* avx2_ops_impl() { return &kAvx2; }

}  // namespace lns::kern

#else

namespace lns::kern {
const Ops* avx2_ops_impl() { return nullptr; }
}  // namespace lns::kern

#endif  // __AVX2__
