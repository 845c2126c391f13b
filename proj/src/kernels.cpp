#include "knnlm/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <cstring>
#include <mutex>
#include <string>

#include "knnlm/errors.hpp"

namespace knnlm::kernels {

extern const Ops kScalarOps;
#if defined(__x86_64__) || defined(_M_X64)
extern const Ops kAvx2Ops;
#endif
#if defined(__aarch64__)
extern const Ops kNeonOps;
#endif

bool backend_supported(Backend b) {
    switch (b) {
        case Backend::scalar:
            return true;
        case Backend::avx2:
#if defined(__x86_64__) || defined(_M_X64)
            return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
            return false;
#endif
        case Backend::neon:
#if defined(__aarch64__)
            return true;
#else
            return false;
#endif
    }
    return false;
}

const Ops* backend_ops(Backend b) {
    switch (b) {
        case Backend::scalar:
            return &kScalarOps;
        case Backend::avx2:
#if defined(__x86_64__) || defined(_M_X64)
            return &kAvx2Ops;
#else
            return nullptr;
#endif
        case Backend::neon:
#if defined(__aarch64__)
            return &kNeonOps;
#else
            return nullptr;
#endif
    }
    return nullptr;
}

const char* backend_name(Backend b) {
    switch (b) {
        case Backend::scalar: return "scalar";
        case Backend::avx2: return "avx2";
        case Backend::neon: return "neon";
    }
    return "?";
}

namespace {

Backend pick_backend() {
    if (const char* env = std::getenv("KNNLM_KERNELS")) {
        for (Backend b : {Backend::scalar, Backend::avx2, Backend::neon}) {
            if (std::strcmp(env, backend_name(b)) == 0 && backend_supported(b)) return b;
        }
        // Unknown or unsupported request falls through to auto-detection.
    }
    if (backend_supported(Backend::avx2)) return Backend::avx2;
    if (backend_supported(Backend::neon)) return Backend::neon;
    return Backend::scalar;
}

std::once_flag g_once;
std::atomic<Backend> g_backend{Backend::scalar};
std::atomic<const Ops*> g_ops{nullptr};

void resolve() {
    std::call_once(g_once, [] {
        const Backend b = pick_backend();
        g_backend.store(b, std::memory_order_relaxed);
        g_ops.store(backend_ops(b), std::memory_order_release);
    });
}

}  // namespace

Backend active_backend() {
    resolve();
    return g_backend.load(std::memory_order_relaxed);
}

void force_backend(Backend b) {
    resolve();
    if (!backend_supported(b)) {
        throw ConfigError(std::string("kernel backend not supported on this CPU: ") + backend_name(b));
    }
    g_backend.store(b, std::memory_order_relaxed);
    g_ops.store(backend_ops(b), std::memory_order_release);
}

const Ops& ops() {
    resolve();
    return *g_ops.load(std::memory_order_acquire);
}

}  // namespace knnlm::kernels
