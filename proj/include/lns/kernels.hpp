#pragma once

#include <cstddef>
#include <cstdint>

// Data-parallel inner loops behind the weight-space arithmetic. A scalar
// reference backend defines the semantics; an AVX2 backend is selected at
// runtime when the CPU supports it and must produce bit-identical results
// (the test suite asserts this on every op).
//
// Two rules make bit-equality achievable:
//   * elementwise ops perform the same single-rounded operation per element
//     in either backend (no fma contraction; see -ffp-contract=off),
//   * reductions accumulate into 8 fixed lanes (lane l owns the elements
//     with index ≡ l mod 8 within the main blocks) and combine the lanes
//     sequentially at the end, in both backends.
// Transcendentals are deliberately not part of this table; callers keep
// them scalar so results never depend on a vector math library.

namespace lns::kern {

struct Ops {
    const char* name;

    // out[i] = a[i] - b[i]                       (f32, single rounding)
    void (*sub_f32)(const float* a, const float* b, float* out, size_t n);
    // out[i] = (double)x[i]
    void (*widen)(const float* x, double* out, size_t n);
    // out[i] = (float)x[i]                       (round to nearest)
    void (*narrow)(const double* x, float* out, size_t n);
    // acc[i] += s * (double)x[i]                 (mul and add rounded separately)
    void (*axpy_wf64)(double s, const float* x, double* acc, size_t n);
    // acc[i] += (double)w[i] * (double)x[i]
    void (*fmacc_wf64)(const float* w, const float* x, double* acc, size_t n);
    // y[i] += s * x[i]                           (f64)
    void (*axpy_f64)(double s, const double* x, double* y, size_t n);
    // y[i] *= s                                  (f64)
    void (*scale_f64)(double s, double* y, size_t n);
    // y[i] = (float)((double)y[i] + s * g[i])    (f32 master-weight update)
    void (*update_f32)(double s, const double* g, float* y, size_t n);
    // 8-lane deterministic reductions
    double (*dot_f64)(const double* a, const double* b, size_t n);
    double (*sum_f64)(const double* x, size_t n);
};

// Active backend. Chosen once: the LNS_KERNELS env var ("scalar"/"avx2")
// wins if set and usable, otherwise the best supported backend.
const Ops& ops();

const Ops& scalar_ops();
// nullptr when the binary was built without the AVX2 backend or the CPU
// lacks AVX2.
const Ops* avx2_ops();

bool cpu_has_avx2();

}  // namespace lns::kern
