#pragma once

#include <cstdint>
#include <string>

namespace knnlm {

/// Deterministic text synthesizer for experiments and tests. Both styles
/// share the function-word core and a slice of common vocabulary;
/// "technical" adds its own jargon and different transition statistics,
/// giving a real distribution shift while keeping enough overlap for
/// cross-domain retrieval to matter.
enum class CorpusStyle { prose, technical };

CorpusStyle corpus_style_from_name(const std::string& name);

std::string synth_corpus(CorpusStyle style, size_t n_tokens, uint64_t seed);

}  // namespace knnlm
