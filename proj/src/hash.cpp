#include "knnlm/hash.hpp"

#include <cstdio>
#include <vector>

#include "knnlm/errors.hpp"

namespace knnlm {

std::string hash_hex(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

uint64_t hash_file(const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw IoError(IoCode::open_failed, "cannot open for hashing: " + path);
    uint64_t h = kFnvOffset;
    std::vector<unsigned char> buf(1 << 16);
    size_t got;
    while ((got = std::fread(buf.data(), 1, buf.size(), f)) > 0) {
        h = fnv1a64(buf.data(), got, h);
    }
    const bool bad = std::ferror(f) != 0;
    std::fclose(f);
    if (bad) throw IoError(IoCode::read_failed, "read failed while hashing: " + path);
    return h;
}

}  // namespace knnlm
