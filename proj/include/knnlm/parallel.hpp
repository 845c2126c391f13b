#pragma once

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace knnlm {

/// Worker count: KNNLM_THREADS env var if set, else hardware concurrency.
inline unsigned thread_count() {
    if (const char* env = std::getenv("KNNLM_THREADS")) {
        const long v = std::atol(env);
        if (v >= 1) return static_cast<unsigned>(v);
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw ? hw : 1;
}

/// Runs fn(begin, end) over a static contiguous partition of [0, n).
/// Results must be written to disjoint, index-addressed outputs so the
/// partition (and thread count) cannot affect the final bytes.
template <typename Fn>
void parallel_for(size_t n, Fn&& fn, size_t min_per_thread = 256) {
    if (n == 0) return;
    const size_t workers =
        std::min<size_t>(thread_count(), std::max<size_t>(1, n / std::max<size_t>(1, min_per_thread)));
    if (workers <= 1) {
        fn(size_t{0}, n);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    const size_t chunk = (n + workers - 1) / workers;
    for (size_t w = 0; w < workers; ++w) {
        const size_t begin = w * chunk;
        const size_t end = std::min(n, begin + chunk);
        if (begin >= end) break;
        pool.emplace_back([&fn, begin, end] { fn(begin, end); });
    }
    for (auto& t : pool) t.join();
}

}  // namespace knnlm
