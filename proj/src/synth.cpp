#include "knnlm/synth.hpp"

#include <array>
#include <cmath>
#include <vector>

#include "knnlm/errors.hpp"
#include "knnlm/rng.hpp"

namespace knnlm {

CorpusStyle corpus_style_from_name(const std::string& name) {
    if (name == "prose") return CorpusStyle::prose;
    if (name == "technical") return CorpusStyle::technical;
    throw ConfigError("unknown corpus style: " + name);
}

namespace {

const char* const kFunctionWords[] = {
    "the",  "of",    "and",  "a",    "to",   "in",   "is",   "was",  "that", "it",
    "for",  "on",    "with", "as",   "his",  "her",  "at",   "by",   "from", "they",
    "we",   "you",   "this", "but",  "not",  "are",  "be",   "have", "had",  "were",
    "which", "one",  "all",  "their", "there", "when", "who",  "will", "more", "no",
    "if",   "out",   "so",   "up",   "what", "about", "into", "than", "its",  "over",
    "after", "then",
};
constexpr size_t kFunctionCount = sizeof(kFunctionWords) / sizeof(kFunctionWords[0]);

std::vector<std::string> make_words(size_t count, uint64_t seed,
                                    const std::vector<std::string>& onsets,
                                    const std::vector<std::string>& suffixes) {
    static const std::array<std::string, 20> cores = {"an", "en", "in", "on", "un", "ar", "er",
                                                      "ir", "or", "ur", "al", "el", "il", "ol",
                                                      "ul", "am", "em", "im", "om", "um"};
    Rng rng(seed);
    std::vector<std::string> words;
    words.reserve(count);
    std::unordered_map<std::string, bool> seen;
    while (words.size() < count) {
        std::string w = onsets[rng.below(onsets.size())];
        w += cores[rng.below(cores.size())];
        if (rng.uniform() < 0.55) w += onsets[rng.below(onsets.size())];
        if (rng.uniform() < 0.6) w += suffixes[rng.below(suffixes.size())];
        if (w.size() < 3 || seen.count(w)) continue;
        seen[w] = true;
        words.push_back(std::move(w));
    }
    return words;
}

std::vector<std::string> prose_words(size_t count) {
    static const std::vector<std::string> onsets = {"b",  "br", "c",  "ch", "d",  "f",  "g",
                                                    "gr", "h",  "l",  "m",  "n",  "p",  "pl",
                                                    "r",  "s",  "st", "t",  "th", "w"};
    static const std::vector<std::string> suffixes = {"e", "ing", "ed", "er", "ly", "s", "en", "le"};
    return make_words(count, 0x705e5eedULL, onsets, suffixes);
}

std::vector<std::string> tech_words(size_t count) {
    static const std::vector<std::string> onsets = {"v",  "x",  "z",  "qu", "k",  "sc", "sp",
                                                    "tr", "cr", "fl", "gl", "pr", "dr", "ph"};
    static const std::vector<std::string> suffixes = {"tron", "ode", "ium",  "ics",   "ase",
                                                      "yte",  "ex",  "axis", "metry", "flux"};
    return make_words(count, 0x7ec45eedULL, onsets, suffixes);
}

struct Lexicon {
    std::vector<std::string> words;  // frequency-ordered: function words first
    uint64_t salt = 0;
};

Lexicon build_lexicon(CorpusStyle style) {
    Lexicon lex;
    for (size_t i = 0; i < kFunctionCount; ++i) lex.words.emplace_back(kFunctionWords[i]);
    const auto prose = prose_words(1450);
    if (style == CorpusStyle::prose) {
        lex.words.insert(lex.words.end(), prose.begin(), prose.end());
        lex.salt = 0x9d2c5680ULL;
    } else {
        const auto tech = tech_words(400);
        lex.words.insert(lex.words.end(), tech.begin(), tech.end());
        // shared slice of the common vocabulary, reweighted by position
        lex.words.insert(lex.words.end(), prose.begin(), prose.begin() + 350);
        lex.salt = 0xb5026f5aULL;
    }
    return lex;
}

/// Fixed pseudo-random successor table entry: j-th candidate next word of
/// word i. Purely positional so both corpora are reproducible.
size_t successor(size_t i, size_t j, uint64_t salt, size_t m) {
    uint64_t h = (static_cast<uint64_t>(i) + 1) * 0x9e3779b97f4a7c15ULL;
    h ^= (static_cast<uint64_t>(j) + 1) * 0xc2b2ae3d27d4eb4fULL;
    h ^= salt;
    h ^= h >> 29;
    h *= 0xbf58476d1ce4e5b9ULL;
    h ^= h >> 32;
    return static_cast<size_t>(h % m);
}

}  // namespace

std::string synth_corpus(CorpusStyle style, size_t n_tokens, uint64_t seed) {
    if (n_tokens == 0) return {};
    const Lexicon lex = build_lexicon(style);
    const size_t m = lex.words.size();
    Rng rng(seed);

    // Zipf-flavored draw: uniform^3 concentrates on the head of the list.
    const auto zipf_draw = [&]() {
        const double u = rng.uniform();
        return std::min(m - 1, static_cast<size_t>(u * u * u * static_cast<double>(m)));
    };
    const auto successor_draw = [&](size_t cur) {
        // 14 candidates, earlier ones more likely
        const double u = rng.uniform();
        const size_t j = static_cast<size_t>(u * u * 14.0);
        return successor(cur, std::min<size_t>(j, 13), lex.salt, m);
    };

    std::string out;
    out.reserve(n_tokens * 7);
    size_t cur = zipf_draw();
    size_t sentence_len = 0;
    size_t line_len = 0;
    for (size_t t = 0; t < n_tokens; ++t) {
        const bool end_sentence = sentence_len >= 5 && rng.uniform() < 0.12;
        const std::string& w = end_sentence ? "." : lex.words[cur];
        out += w;
        ++line_len;
        if (line_len >= 15) {
            out += '\n';
            line_len = 0;
        } else {
            out += ' ';
        }
        if (end_sentence) {
            sentence_len = 0;
            cur = zipf_draw();
            continue;
        }
        ++sentence_len;
        cur = rng.uniform() < 0.2 ? zipf_draw() : successor_draw(cur);
    }
    if (!out.empty() && out.back() == ' ') out.back() = '\n';
    return out;
}

}  // namespace knnlm
