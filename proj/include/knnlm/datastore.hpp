#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "knnlm/corpus.hpp"
#include "knnlm/toylm.hpp"

namespace knnlm {

enum class Metric : uint8_t { l2 = 0, ip = 1 };

const char* metric_name(Metric m);
Metric metric_from_name(const std::string& name);

/// Key-value external memory: one (contextual embedding, next token) entry
/// per corpus token, in corpus order. Keys are f32. Backed either by an
/// in-memory buffer (after build) or a read-only file mapping (after load).
///
/// File layout, little-endian, 64-byte header:
///   offset  0: magic "KNNDS1\0" (7 bytes)
///   offset  7: version  u32 = 1
///   offset 11: d_h      u32
///   offset 15: d_s      u64
///   offset 23: metric   u8
///   offset 24: tap      u8
///   offset 25: source tag, 16 bytes zero-padded UTF-8
///   offset 41: zero padding to 64
/// then d_s * d_h key floats (row-major), then d_s u32 values.
class Datastore {
public:
    Datastore() = default;
    Datastore(Datastore&&) noexcept = default;
    Datastore& operator=(Datastore&&) noexcept = default;
    Datastore(const Datastore&) = delete;
    Datastore& operator=(const Datastore&) = delete;

    uint32_t dim() const { return dim_; }
    uint64_t size() const { return size_; }
    Metric metric_tag() const { return metric_; }
    TapPoint tap() const { return tap_; }
    const std::string& source_tag() const { return source_; }

    const float* key(uint64_t i) const { return keys_ + i * dim_; }
    std::span<const float> key_span(uint64_t i) const { return {key(i), dim_}; }
    const float* keys() const { return keys_; }
    TokenId value(uint64_t i) const { return values_[i]; }
    const TokenId* values() const { return values_; }

    /// FNV-1a of the serialized file; 0 for stores never saved or loaded.
    uint64_t file_checksum() const { return checksum_; }
    const std::string& path() const { return path_; }

    void save(const std::string& path);
    static Datastore load(const std::string& path);

    /// In-memory store over externally produced rows (used by build and
    /// tests). Validates value range against vocab when vocab > 0.
    static Datastore from_rows(std::vector<float> keys, std::vector<TokenId> values, uint32_t dim,
                               Metric metric, TapPoint tap, std::string source_tag,
                               size_t vocab = 0);

private:
    struct Mapping;

    uint32_t dim_ = 0;
    uint64_t size_ = 0;
    Metric metric_ = Metric::ip;
    TapPoint tap_ = TapPoint::h2_ln;
    std::string source_;
    std::string path_;
    uint64_t checksum_ = 0;

    const float* keys_ = nullptr;
    const TokenId* values_ = nullptr;
    std::vector<float> own_keys_;
    std::vector<TokenId> own_values_;
    std::shared_ptr<Mapping> mapping_;
};

/// One entry per corpus token: key = tap activation of the window ending
/// before the token (BOS-padded at the start), value = the token itself.
Datastore build_datastore(const LmParams& params, const AdapterParams* adapters,
                          const TokenSequence& corpus, TapPoint tap, Metric metric_tag,
                          std::string source_tag);

}  // namespace knnlm
