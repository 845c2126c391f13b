#include "knnlm/kernels.hpp"

// NEON variants for aarch64, where NEON is baseline (no runtime probe
// needed beyond the architecture itself).

#if defined(__aarch64__)
#include <arm_neon.h>

namespace knnlm::kernels {
namespace neon {

float dot_f32(const float* a, const float* b, size_t n) {
    float32x4_t acc0 = vdupq_n_f32(0.0f);
    float32x4_t acc1 = vdupq_n_f32(0.0f);
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 = vfmaq_f32(acc0, vld1q_f32(a + i), vld1q_f32(b + i));
        acc1 = vfmaq_f32(acc1, vld1q_f32(a + i + 4), vld1q_f32(b + i + 4));
    }
    for (; i + 4 <= n; i += 4) {
        acc0 = vfmaq_f32(acc0, vld1q_f32(a + i), vld1q_f32(b + i));
    }
    float s = vaddvq_f32(vaddq_f32(acc0, acc1));
    for (; i < n; ++i) s += a[i] * b[i];
    return s;
}

float l2sq_f32(const float* a, const float* b, size_t n) {
    float32x4_t acc = vdupq_n_f32(0.0f);
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const float32x4_t d = vsubq_f32(vld1q_f32(a + i), vld1q_f32(b + i));
        acc = vfmaq_f32(acc, d, d);
    }
    float s = vaddvq_f32(acc);
    for (; i < n; ++i) {
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
    float64x2_t acc0 = vdupq_n_f64(0.0);
    float64x2_t acc1 = vdupq_n_f64(0.0);
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        acc0 = vfmaq_f64(acc0, vld1q_f64(a + i), vld1q_f64(b + i));
        acc1 = vfmaq_f64(acc1, vld1q_f64(a + i + 2), vld1q_f64(b + i + 2));
    }
    for (; i + 2 <= n; i += 2) {
        acc0 = vfmaq_f64(acc0, vld1q_f64(a + i), vld1q_f64(b + i));
    }
    double s = vaddvq_f64(vaddq_f64(acc0, acc1));
    for (; i < n; ++i) s += a[i] * b[i];
    return s;
}

double l2sq_f64(const double* a, const double* b, size_t n) {
    float64x2_t acc = vdupq_n_f64(0.0);
    size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        const float64x2_t d = vsubq_f64(vld1q_f64(a + i), vld1q_f64(b + i));
        acc = vfmaq_f64(acc, d, d);
    }
    double s = vaddvq_f64(acc);
    for (; i < n; ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

void axpy_f64(double a, const double* x, double* y, size_t n) {
    const float64x2_t va = vdupq_n_f64(a);
    size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        vst1q_f64(y + i, vfmaq_f64(vld1q_f64(y + i), va, vld1q_f64(x + i)));
    }
    for (; i < n; ++i) y[i] += a * x[i];
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

}  // namespace neon

const Ops kNeonOps = {
    neon::dot_f32,    neon::l2sq_f32,  neon::dot_scan_f32,       neon::l2sq_scan_f32,
    neon::dot_f64,    neon::l2sq_f64,  neon::axpy_f64,           neon::matvec_f64,
    neon::matvec_t_accum_f64,          neon::ger_accum_f64,
};

}  // namespace knnlm::kernels

#endif  // aarch64
