#pragma once

#include <cstddef>
#include <cstdint>

// Data-parallel inner loops shared by retrieval (f32 key scans) and model
// training (f64 dense algebra). Every operation has a scalar reference
// implementation plus SIMD variants (AVX2+FMA on x86-64, NEON on aarch64)
// selected once at runtime from CPU capabilities. The scalar and SIMD
// variants may round differently (vector accumulators, FMA contraction);
// equivalence is tested to tolerance, and exactly on integer-valued data.

namespace knnlm::kernels {

enum class Backend { scalar, avx2, neon };

/// Backend chosen for this process. Resolved on first use: the
/// KNNLM_KERNELS env var ("scalar", "avx2", "neon") if set and supported,
/// else the widest supported SIMD, else scalar.
Backend active_backend();

/// Test hook. Throws ConfigError if the backend is unsupported on this CPU.
/// Not safe to call while other threads are inside kernel calls.
void force_backend(Backend b);

const char* backend_name(Backend b);

struct Ops {
    // f32, retrieval side
    float (*dot_f32)(const float*, const float*, size_t);
    float (*l2sq_f32)(const float*, const float*, size_t);
    // out[i] = q . rows[i*d .. ]  /  out[i] = |q - rows[i*d ..]|^2
    void (*dot_scan_f32)(const float* q, const float* rows, size_t n, size_t d, float* out);
    void (*l2sq_scan_f32)(const float* q, const float* rows, size_t n, size_t d, float* out);

    // f64, training side
    double (*dot_f64)(const double*, const double*, size_t);
    double (*l2sq_f64)(const double*, const double*, size_t);
    void (*axpy_f64)(double a, const double* x, double* y, size_t n);  // y += a*x
    // W is row-major m x n.
    void (*matvec_f64)(const double* W, const double* x, double* y, size_t m, size_t n);         // y = W x
    void (*matvec_t_accum_f64)(const double* W, const double* u, double* y, size_t m, size_t n); // y += W^T u
    void (*ger_accum_f64)(double* W, const double* u, const double* v, size_t m, size_t n);      // W += u v^T
};

/// Dispatch table for the active backend.
const Ops& ops();

/// Specific backend tables (scalar always valid; others null when the
/// translation unit is not built for this architecture).
const Ops* backend_ops(Backend b);

/// True if the CPU (and build) can run the given backend.
bool backend_supported(Backend b);

}  // namespace knnlm::kernels
