#include "knnlm/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "knnlm/errors.hpp"

namespace knnlm {

namespace {

template <typename Fn>
void for_each_word(std::string_view text, Fn&& fn) {
    size_t i = 0;
    const size_t n = text.size();
    while (i < n) {
        while (i < n && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        size_t j = i;
        while (j < n && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
        if (j > i) fn(text.substr(i, j - i));
        i = j;
    }
}

}  // namespace

void Vocab::push(std::string token) {
    index_.emplace(token, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(std::move(token));
}

Vocab Vocab::build(std::string_view text, size_t max_size) {
    if (max_size < 2) throw ConfigError("vocab max_size must be at least 2");

    std::unordered_map<std::string, uint64_t> counts;
    for_each_word(text, [&](std::string_view w) { ++counts[std::string(w)]; });

    std::vector<std::pair<std::string, uint64_t>> ranked(counts.begin(), counts.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });

    Vocab v;
    v.push(kUnkText);
    v.push(kBosText);
    const size_t room = max_size - 2;
    for (size_t i = 0; i < ranked.size() && i < room; ++i) {
        if (ranked[i].first == kUnkText || ranked[i].first == kBosText) continue;
        v.push(ranked[i].first);
    }
    return v;
}

TokenId Vocab::id_of(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::token_of(TokenId id) const {
    if (id >= tokens_.size()) throw std::invalid_argument("token id out of range");
    return tokens_[id];
}

void Vocab::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError(IoCode::open_failed, "cannot write vocab: " + path);
    for (const auto& t : tokens_) out << t << '\n';
    if (!out) throw IoError(IoCode::write_failed, "write failed: " + path);
}

Vocab Vocab::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(IoCode::open_failed, "cannot read vocab: " + path);
    Vocab v;
    std::string line;
    while (std::getline(in, line)) v.push(line);
    if (v.size() < 2 || v.tokens_[kUnk] != kUnkText || v.tokens_[kBos] != kBosText) {
        throw IoError(IoCode::bad_layout, "vocab file missing reserved specials: " + path);
    }
    return v;
}

TokenSequence encode(std::string_view text, const Vocab& vocab, std::string source_tag) {
    if (vocab.size() < 2) throw ConfigError("encode: vocab is empty");
    TokenSequence seq;
    seq.source = std::move(source_tag);
    for_each_word(text, [&](std::string_view w) { seq.ids.push_back(vocab.id_of(w)); });
    return seq;
}

std::array<TokenSequence, 3> split(const TokenSequence& seq, double train, double dev, double test) {
    if (!(train > 0.0 && dev > 0.0 && test > 0.0)) {
        throw ConfigError("split: all ratios must be positive");
    }
    if (std::fabs(train + dev + test - 1.0) > 1e-9) {
        throw ConfigError("split: ratios must sum to 1");
    }
    const size_t n = seq.ids.size();
    if (n < 3) throw ConfigError("split: sequence shorter than 3 tokens");

    const size_t n_dev = std::max<size_t>(1, static_cast<size_t>(std::floor(dev * static_cast<double>(n))));
    const size_t n_test = std::max<size_t>(1, static_cast<size_t>(std::floor(test * static_cast<double>(n))));
    if (n_dev + n_test >= n) throw ConfigError("split: dev+test leave no train tokens");
    const size_t n_train = n - n_dev - n_test;

    auto slice = [&](size_t begin, size_t count, const char* part) {
        TokenSequence s;
        s.source = seq.source.empty() ? part : seq.source + "." + part;
        s.ids.assign(seq.ids.begin() + begin, seq.ids.begin() + begin + count);
        return s;
    };
    return {slice(0, n_train, "train"), slice(n_train, n_dev, "dev"), slice(n_train + n_dev, n_test, "test")};
}

namespace {
constexpr char kTokMagic[6] = {'K', 'N', 'N', 'T', 'S', '1'};
}

void save_tokens(const TokenSequence& seq, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError(IoCode::open_failed, "cannot write tokens: " + path);
    out.write(kTokMagic, sizeof(kTokMagic));
    const uint64_t n = seq.ids.size();
    out.write(reinterpret_cast<const char*>(&n), sizeof(n));
    const uint16_t tag_len = static_cast<uint16_t>(std::min<size_t>(seq.source.size(), 65535));
    out.write(reinterpret_cast<const char*>(&tag_len), sizeof(tag_len));
    out.write(seq.source.data(), tag_len);
    out.write(reinterpret_cast<const char*>(seq.ids.data()),
              static_cast<std::streamsize>(n * sizeof(TokenId)));
    if (!out) throw IoError(IoCode::write_failed, "write failed: " + path);
}

TokenSequence load_tokens(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(IoCode::open_failed, "cannot read tokens: " + path);
    char magic[sizeof(kTokMagic)];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kTokMagic, sizeof(kTokMagic)) != 0) {
        throw IoError(IoCode::bad_magic, "not a token file: " + path);
    }
    uint64_t n = 0;
    uint16_t tag_len = 0;
    in.read(reinterpret_cast<char*>(&n), sizeof(n));
    in.read(reinterpret_cast<char*>(&tag_len), sizeof(tag_len));
    TokenSequence seq;
    seq.source.resize(tag_len);
    in.read(seq.source.data(), tag_len);
    seq.ids.resize(n);
    in.read(reinterpret_cast<char*>(seq.ids.data()), static_cast<std::streamsize>(n * sizeof(TokenId)));
    if (!in || in.gcount() != static_cast<std::streamsize>(n * sizeof(TokenId))) {
        throw IoError(IoCode::truncated, "token file truncated: " + path);
    }
    return seq;
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(IoCode::open_failed, "cannot read: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace knnlm
