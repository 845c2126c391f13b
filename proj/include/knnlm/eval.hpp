#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "knnlm/rescorer.hpp"
#include "knnlm/retrieval.hpp"
#include "knnlm/toylm.hpp"

namespace knnlm {

struct EvalRecord {
    size_t position = 0;
    TokenId truth = 0;
    double p_lm = 0.0;   // model probability of the ground truth
    double p_knn = 0.0;  // neighborhood probability of the ground truth
    bool recall_hit = false;
    size_t neighborhood_size = 0;
};

/// lambda * p_knn + (1 - lambda) * p_lm, elementwise.
std::vector<double> interpolate(std::span<const double> p_knn, std::span<const double> p_lm,
                                double lambda);

/// Hyperparameter grids. Defaults: k in {1, 2, 4, ..., 512, 1000} and
/// lambda in {0} + {0.01 * 2^j, capped at 0.98}. Zero is included so a
/// tuned configuration can always fall back to the pure model.
struct GridSpec {
    std::vector<size_t> k_grid;
    std::vector<double> lambda_grid;

    static GridSpec defaults();
    void validate() const;
};

/// Everything an evaluation run reads. With two backends the retrieval
/// budget is split half/half (odd k gives the extra neighbor to the
/// adaptation side) and the halves are concatenated.
struct EvalComponents {
    const LmParams* lm = nullptr;
    const AdapterParams* adapters = nullptr;
    std::vector<RetrievalBackend> backends;  // 0 (pure model), 1, or 2 (merged)
    const RescorerParams* rescorer = nullptr;
    TapPoint tap = TapPoint::h2_ln;
    Metric metric = Metric::ip;
};

/// {k from the pretraining store, k from the adaptation store}.
inline std::pair<size_t, size_t> merged_k_split(size_t k) { return {k / 2, k - k / 2}; }

struct EvalOptions {
    size_t token_limit = 0;  // 0 = whole sequence
};

struct EvalResult {
    double perplexity = 0.0;
    std::vector<EvalRecord> records;
};

/// Per token: query the model (and stores when k > 0 and lambda > 0 or
/// records are wanted), interpolate at the ground truth, and accumulate
/// perplexity. With lambda = 0 the result is bit-identical to the pure
/// model's perplexity.
EvalResult evaluate(const EvalComponents& c, const TokenSequence& tokens, size_t k, double lambda,
                    const EvalOptions& opts = {});

double recall(const std::vector<EvalRecord>& records);
double precision(const std::vector<EvalRecord>& records);

struct GridCell {
    size_t k = 0;
    double lambda = 0.0;
    double perplexity = 0.0;
};

struct GridResult {
    size_t best_k = 0;
    double best_lambda = 0.0;
    double best_perplexity = 0.0;
    std::vector<GridCell> table;  // k-major, lambda-minor
};

/// Exhaustive (k, lambda) search on dev tokens. Retrieval runs once per
/// token at the largest k; smaller k reuse ranked prefixes. Ties prefer
/// the smaller k, then the smaller lambda.
GridResult grid_search(const EvalComponents& c, const TokenSequence& dev, const GridSpec& grid,
                       const EvalOptions& opts = {});

/// Tap embeddings (f32, row-major) for positions [0, n); optionally also
/// the model probability of each position's ground-truth token.
void embed_positions(const LmParams& lm, const AdapterParams* adapters, const TokenSequence& seq,
                     TapPoint tap, size_t n, float* queries_out, double* p_lm_truth_out);

}  // namespace knnlm
