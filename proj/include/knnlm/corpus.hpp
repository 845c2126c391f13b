#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace knnlm {

using TokenId = uint32_t;

/// Word-level vocabulary. Ids are dense; 0 and 1 are reserved for the
/// unknown and begin-of-sequence specials. Non-special tokens are ordered
/// by descending corpus frequency, ties broken lexicographically, so
/// construction is deterministic for a fixed corpus.
class Vocab {
public:
    static constexpr TokenId kUnk = 0;
    static constexpr TokenId kBos = 1;
    static constexpr const char* kUnkText = "<unk>";
    static constexpr const char* kBosText = "<bos>";

    /// Builds from whitespace-delimited text, keeping at most
    /// max_size - 2 distinct words beyond the specials.
    static Vocab build(std::string_view text, size_t max_size);

    size_t size() const { return tokens_.size(); }
    TokenId id_of(std::string_view token) const;  // unknown words map to kUnk
    const std::string& token_of(TokenId id) const;
    bool contains(std::string_view token) const { return index_.count(std::string(token)) != 0; }

    /// One token per line; the line number is the id.
    void save(const std::string& path) const;
    static Vocab load(const std::string& path);

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> index_;

    void push(std::string token);
};

struct TokenSequence {
    std::vector<TokenId> ids;
    std::string source;  // domain label, e.g. "pretrain" or "adapt"

    size_t size() const { return ids.size(); }
};

/// Whitespace tokenization; out-of-vocabulary words become <unk>.
TokenSequence encode(std::string_view text, const Vocab& vocab, std::string source_tag = {});

/// Contiguous order-preserving train/dev/test partition. Dev and test get
/// max(1, floor(ratio * n)) tokens each; train absorbs the remainder.
/// Ratios must all be positive and sum to 1 within 1e-9.
std::array<TokenSequence, 3> split(const TokenSequence& seq, double train, double dev, double test);

void save_tokens(const TokenSequence& seq, const std::string& path);
TokenSequence load_tokens(const std::string& path);

std::string read_text_file(const std::string& path);

}  // namespace knnlm
