#include "lns/kernels.hpp"

// Reference backend. Every other backend is tested bit-for-bit against
// these loops.

namespace lns::kern {
namespace {

void sub_f32(const float* a, const float* b, float* out, size_t n) {
    for (size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

void widen(const float* x, double* out, size_t n) {
    for (size_t i = 0; i < n; ++i) out[i] = static_cast<double>(x[i]);
}

void narrow(const double* x, float* out, size_t n) {
    for (size_t i = 0; i < n; ++i) out[i] = static_cast<float>(x[i]);
}

void axpy_wf64(double s, const float* x, double* acc, size_t n) {
    for (size_t i = 0; i < n; ++i) acc[i] += s * static_cast<double>(x[i]);
}

void fmacc_wf64(const float* w, const float* x, double* acc, size_t n) {
    for (size_t i = 0; i < n; ++i)
        acc[i] += static_cast<double>(w[i]) * static_cast<double>(x[i]);
}

void axpy_f64(double s, const double* x, double* y, size_t n) {
    for (size_t i = 0; i < n; ++i) y[i] += s * x[i];
}

void scale_f64(double s, double* y, size_t n) {
    for (size_t i = 0; i < n; ++i) y[i] *= s;
}

void update_f32(double s, const double* g, float* y, size_t n) {
    for (size_t i = 0; i < n; ++i)
        y[i] = static_cast<float>(static_cast<double>(y[i]) + s * g[i]);
}

double dot_f64(const double* a, const double* b, size_t n) {
    double lane[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    size_t main = n - n % 8;
    for (size_t j = 0; j < main; j += 8)
        for (size_t l = 0; l < 8; ++l) lane[l] += a[j + l] * b[j + l];
    for (size_t j = main, l = 0; j < n; ++j, ++l) lane[l] += a[j] * b[j];
    double s = 0.0;
    for (size_t l = 0; l < 8; ++l) s += lane[l];
    return s;
}

double sum_f64(const double* x, size_t n) {
    double lane[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    size_t main = n - n % 8;
    for (size_t j = 0; j < main; j += 8)
        for (size_t l = 0; l < 8; ++l) lane[l] += x[j + l];
    for (size_t j = main, l = 0; j < n; ++j, ++l) lane[l] += x[j];
    double s = 0.0;
    for (size_t l = 0; l < 8; ++l) s += lane[l];
    return s;
}

const Ops kScalar = {
    "scalar", sub_f32,  widen,     narrow,     axpy_wf64,
    fmacc_wf64, axpy_f64, scale_f64, update_f32, dot_f64, sum_f64,
};

}  // namespace

const Ops& scalar_ops() { return kScalar; }

}  // namespace lns::kern
