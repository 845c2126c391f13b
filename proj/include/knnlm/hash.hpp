#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

namespace knnlm {

inline constexpr uint64_t kFnvOffset = 1469598103934665603ULL;
inline constexpr uint64_t kFnvPrime = 1099511628211ULL;

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = kFnvOffset) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= kFnvPrime;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s, uint64_t h = kFnvOffset) {
    return fnv1a64(s.data(), s.size(), h);
}

std::string hash_hex(uint64_t h);

/// FNV-1a over a whole file's bytes. Throws IoError on open/read failure.
uint64_t hash_file(const std::string& path);

}  // namespace knnlm
