#include "knnlm/datastore.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include "knnlm/errors.hpp"
#include "knnlm/hash.hpp"
#include "knnlm/parallel.hpp"

namespace knnlm {

const char* metric_name(Metric m) { return m == Metric::l2 ? "l2" : "ip"; }

Metric metric_from_name(const std::string& name) {
    if (name == "l2") return Metric::l2;
    if (name == "ip") return Metric::ip;
    throw ConfigError("unknown metric: " + name);
}

namespace {

constexpr char kMagic[7] = {'K', 'N', 'N', 'D', 'S', '1', '\0'};
constexpr uint32_t kVersion = 1;
constexpr size_t kHeaderSize = 64;
constexpr size_t kSourceTagBytes = 16;

struct Header {
    uint32_t version;
    uint32_t dim;
    uint64_t count;
    uint8_t metric;
    uint8_t tap;
    char source[kSourceTagBytes];
};

void encode_header(const Header& h, unsigned char* out) {
    std::memset(out, 0, kHeaderSize);
    std::memcpy(out, kMagic, sizeof(kMagic));
    std::memcpy(out + 7, &h.version, 4);
    std::memcpy(out + 11, &h.dim, 4);
    std::memcpy(out + 15, &h.count, 8);
    out[23] = h.metric;
    out[24] = h.tap;
    std::memcpy(out + 25, h.source, kSourceTagBytes);
}

Header decode_header(const unsigned char* in, const std::string& path) {
    if (std::memcmp(in, kMagic, sizeof(kMagic)) != 0) {
        throw IoError(IoCode::bad_magic, "not a datastore file: " + path);
    }
    Header h{};
    std::memcpy(&h.version, in + 7, 4);
    if (h.version != kVersion) {
        throw IoError(IoCode::bad_version, "unsupported datastore version: " + path);
    }
    std::memcpy(&h.dim, in + 11, 4);
    std::memcpy(&h.count, in + 15, 8);
    h.metric = in[23];
    h.tap = in[24];
    std::memcpy(h.source, in + 25, kSourceTagBytes);
    return h;
}

}  // namespace

struct Datastore::Mapping {
    void* base = nullptr;
    size_t length = 0;
    ~Mapping() {
        if (base) ::munmap(base, length);
    }
};

void Datastore::save(const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw IoError(IoCode::open_failed, "cannot write datastore: " + path);

    Header h{};
    h.version = kVersion;
    h.dim = dim_;
    h.count = size_;
    h.metric = static_cast<uint8_t>(metric_);
    h.tap = static_cast<uint8_t>(tap_);
    std::memset(h.source, 0, kSourceTagBytes);
    std::memcpy(h.source, source_.data(), std::min(source_.size(), kSourceTagBytes));

    unsigned char header[kHeaderSize];
    encode_header(h, header);
    bool ok = std::fwrite(header, 1, kHeaderSize, f) == kHeaderSize;
    ok = ok && std::fwrite(keys_, sizeof(float), size_ * dim_, f) == size_ * dim_;
    ok = ok && std::fwrite(values_, sizeof(TokenId), size_, f) == size_;
    std::fclose(f);
    if (!ok) throw IoError(IoCode::write_failed, "datastore write failed: " + path);
    path_ = path;
    checksum_ = hash_file(path);
}

Datastore Datastore::load(const std::string& path) {
    const int fd = ::open(path.c_str(), O_RDONLY);
    if (fd < 0) throw IoError(IoCode::open_failed, "cannot open datastore: " + path);
    struct stat st{};
    if (::fstat(fd, &st) != 0) {
        ::close(fd);
        throw IoError(IoCode::read_failed, "stat failed: " + path);
    }
    const size_t length = static_cast<size_t>(st.st_size);
    if (length < kHeaderSize) {
        ::close(fd);
        throw IoError(IoCode::truncated, "datastore smaller than header: " + path);
    }
    void* base = ::mmap(nullptr, length, PROT_READ, MAP_PRIVATE, fd, 0);
    ::close(fd);
    if (base == MAP_FAILED) throw IoError(IoCode::read_failed, "mmap failed: " + path);
    auto mapping = std::make_shared<Mapping>();
    mapping->base = base;
    mapping->length = length;

    const auto* bytes = static_cast<const unsigned char*>(base);
    const Header h = decode_header(bytes, path);
    const size_t need =
        kHeaderSize + static_cast<size_t>(h.count) * h.dim * sizeof(float) + h.count * sizeof(TokenId);
    if (length < need) throw IoError(IoCode::truncated, "datastore truncated: " + path);
    if (h.metric > 1 || h.tap > 2 || h.dim == 0) {
        throw IoError(IoCode::bad_layout, "datastore header fields out of range: " + path);
    }

    Datastore ds;
    ds.dim_ = h.dim;
    ds.size_ = h.count;
    ds.metric_ = static_cast<Metric>(h.metric);
    ds.tap_ = static_cast<TapPoint>(h.tap);
    ds.source_ = std::string(h.source, strnlen(h.source, kSourceTagBytes));
    ds.mapping_ = std::move(mapping);
    ds.keys_ = reinterpret_cast<const float*>(bytes + kHeaderSize);
    ds.values_ = reinterpret_cast<const TokenId*>(bytes + kHeaderSize + ds.size_ * ds.dim_ * sizeof(float));
    ds.path_ = path;
    ds.checksum_ = hash_file(path);

    for (uint64_t i = 0; i < ds.size_ * ds.dim_; ++i) {
        if (!std::isfinite(ds.keys_[i])) {
            throw IoError(IoCode::bad_layout, "datastore contains non-finite key entries: " + path);
        }
    }
    return ds;
}

Datastore Datastore::from_rows(std::vector<float> keys, std::vector<TokenId> values, uint32_t dim,
                               Metric metric, TapPoint tap, std::string source_tag, size_t vocab) {
    if (dim == 0 || keys.size() != values.size() * dim) {
        throw std::invalid_argument("datastore: keys/values size mismatch");
    }
    for (float v : keys) {
        if (!std::isfinite(v)) throw NumericError("datastore: non-finite key entry");
    }
    if (vocab > 0) {
        for (TokenId v : values) {
            if (v >= vocab) throw std::invalid_argument("datastore: value out of vocab range");
        }
    }
    Datastore ds;
    ds.dim_ = dim;
    ds.size_ = values.size();
    ds.metric_ = metric;
    ds.tap_ = tap;
    ds.source_ = std::move(source_tag);
    ds.own_keys_ = std::move(keys);
    ds.own_values_ = std::move(values);
    ds.keys_ = ds.own_keys_.data();
    ds.values_ = ds.own_values_.data();
    return ds;
}

Datastore build_datastore(const LmParams& params, const AdapterParams* adapters,
                          const TokenSequence& corpus, TapPoint tap, Metric metric_tag,
                          std::string source_tag) {
    if (corpus.size() == 0) throw ConfigError("build_datastore: empty corpus");
    if (adapters && adapters->site1.down_w.cols() != params.dims.hidden) {
        throw ConfigError("build_datastore: adapter dims do not match the model");
    }
    const size_t n = corpus.size();
    const size_t d_h = params.dims.hidden;
    const size_t N = params.dims.window;
    std::vector<float> keys(n * d_h);
    std::vector<TokenId> values(corpus.ids.begin(), corpus.ids.end());

    parallel_for(n, [&](size_t begin, size_t end) {
        LmWorkspace ws;
        std::vector<TokenId> win(N);
        for (size_t i = begin; i < end; ++i) {
            context_window(corpus.ids, i, N, win.data());
            lm_forward_ws(params, adapters, win, ws, /*want_dist=*/false);
            const auto emb = tap_activation(ws, tap);
            float* out = keys.data() + i * d_h;
            for (size_t j = 0; j < d_h; ++j) out[j] = static_cast<float>(emb[j]);
        }
    });

    return Datastore::from_rows(std::move(keys), std::move(values), static_cast<uint32_t>(d_h),
                                metric_tag, tap, std::move(source_tag), params.dims.vocab);
}

}  // namespace knnlm
