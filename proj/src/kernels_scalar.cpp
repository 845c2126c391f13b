#include "knnlm/kernels.hpp"

// Reference kernels. Plain loops, no pragmas: these define the semantics
// the SIMD variants are tested against.

namespace knnlm::kernels {
namespace scalar {

float dot_f32(const float* a, const float* b, size_t n) {
    float s = 0.0f;
    for (size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

float l2sq_f32(const float* a, const float* b, size_t n) {
    float s = 0.0f;
    for (size_t i = 0; i < n; ++i) {
        const float d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

void dot_scan_f32(const float* q, const float* rows, size_t n, size_t d, float* out) {
    for (size_t i = 0; i < n; ++i) out[i] = dot_f32(q, rows + i * d, d);
}

void l2sq_scan_f32(const float* q, const float* rows, size_t n, size_t d, float* out) {
    for (size_t i = 0; i < n; ++i) out[i] = l2sq_f32(q, rows + i * d, d);
}

double dot_f64(const double* a, const double* b, size_t n) {
    double s = 0.0;
    for (size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

double l2sq_f64(const double* a, const double* b, size_t n) {
    double s = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

void axpy_f64(double a, const double* x, double* y, size_t n) {
    for (size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

void matvec_f64(const double* W, const double* x, double* y, size_t m, size_t n) {
    for (size_t i = 0; i < m; ++i) y[i] = dot_f64(W + i * n, x, n);
}

void matvec_t_accum_f64(const double* W, const double* u, double* y, size_t m, size_t n) {
    for (size_t i = 0; i < m; ++i) axpy_f64(u[i], W + i * n, y, n);
}

void ger_accum_f64(double* W, const double* u, const double* v, size_t m, size_t n) {
    for (size_t i = 0; i < m; ++i) axpy_f64(u[i], v, W + i * n, n);
}

}  // namespace scalar

const Ops kScalarOps = {
    scalar::dot_f32,    scalar::l2sq_f32,  scalar::dot_scan_f32,       scalar::l2sq_scan_f32,
    scalar::dot_f64,    scalar::l2sq_f64,  scalar::axpy_f64,           scalar::matvec_f64,
    scalar::matvec_t_accum_f64,            scalar::ger_accum_f64,
};

}  // namespace knnlm::kernels
