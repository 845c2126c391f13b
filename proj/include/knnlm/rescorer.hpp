#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "knnlm/neural.hpp"
#include "knnlm/retrieval.hpp"
#include "knnlm/tensor.hpp"
#include "knnlm/toylm.hpp"

namespace knnlm {

inline constexpr size_t kRescorerHidden = 128;
inline constexpr size_t kPairFeatures = 6;

/// Input width of the scoring network: key, query and value embeddings
/// (d_h each) plus the six pair features, plus one origin bit in merged
/// mode.
inline size_t rescorer_input_dim(size_t d_h, bool merged_mode) {
    return 3 * d_h + kPairFeatures + (merged_mode ? 1 : 0);
}

/// Raw (un-normalized) feature vector for one neighbor:
///   [key, query, value embedding, q.k, q.v, k.v, |q-k|, |q-v|, |k-v|]
/// with the origin bit appended in merged mode (0 = pretrain store,
/// 1 = adaptation store). Input normalization is learned and lives inside
/// the scoring network.
std::vector<double> build_features(std::span<const double> query, std::span<const double> key,
                                   std::span<const double> value_emb, bool merged_mode,
                                   Origin origin = Origin::pretrain);

/// Convenience overload pulling the key and origin from a retrieved
/// neighbor and the value embedding from the model.
std::vector<double> build_features(std::span<const float> query, const Neighbor& neighbor,
                                   const LmParams& lm, bool merged_mode);

/// Pointwise neighborhood scoring network. Structure:
///   layernorm each input vector -> concat -> denseA -> ReLU -> denseB
///   -> ReLU -> (+ denseA output) -> scalar regression head.
struct RescorerParams {
    size_t d_h = 0;
    bool merged_mode = false;
    Tensor ln_key_gain, ln_key_bias;
    Tensor ln_query_gain, ln_query_bias;
    Tensor ln_value_gain, ln_value_bias;
    Tensor dense_a_w, dense_a_b;  // hidden x d_r, hidden
    Tensor dense_b_w, dense_b_b;  // hidden x hidden, hidden
    Tensor head_w, head_b;        // hidden, 1

    static RescorerParams init(size_t d_h, bool merged_mode, uint64_t seed);
    /// All-zero weights except unit layernorm gains: scores every input 0.
    static RescorerParams zeros(size_t d_h, bool merged_mode);

    size_t input_dim() const { return rescorer_input_dim(d_h, merged_mode); }
    std::vector<Tensor*> tensors();
    std::vector<const Tensor*> tensors() const;

    void save(const std::string& path) const;
    static RescorerParams load(const std::string& path);
};

struct RescorerGrads {
    Tensor ln_key_gain, ln_key_bias, ln_query_gain, ln_query_bias, ln_value_gain, ln_value_bias;
    Tensor dense_a_w, dense_a_b, dense_b_w, dense_b_b, head_w, head_b;
    explicit RescorerGrads(const RescorerParams& p);
    std::vector<const Tensor*> tensors() const;
    void zero();
};

struct RescorerWorkspace {
    std::vector<double> in, a1, r1, a2, r2, h;
    LayerNormCache ln_k, ln_q, ln_v;
    std::vector<double> d_h_buf, d_a2, d_r1, d_a1, d_in;
};

/// Score one raw feature vector; fills the workspace for a later backward.
double rescorer_forward(const RescorerParams& params, std::span<const double> features,
                        RescorerWorkspace& ws);

/// Backprop d(loss)/d(score) through the network, accumulating parameter
/// gradients. Requires the matching forward pass in `ws`.
void rescorer_backward(const RescorerParams& params, std::span<const double> features,
                       RescorerWorkspace& ws, double d_score, RescorerGrads& grads);

struct Rescored {
    std::vector<double> sr;      // learned scores
    std::vector<double> sprime;  // sr - s, the combined score fed to kNN weighting
};

/// Scores every neighbor of the neighborhood (pointwise, no cross-neighbor
/// interaction). Value embeddings come from the model's output projection.
Rescored rescore(const RescorerParams& params, const Neighborhood& hood, const LmParams& lm,
                 bool merged_mode);

/// One retrieved neighbor kept for contrastive training; self-contained so
/// example sets can be cached to disk.
struct NeighborSample {
    std::vector<float> key;
    TokenId value = 0;
    double s = 0.0;
    Origin origin = Origin::pretrain;
};

struct ContrastiveExample {
    std::vector<float> query;
    NeighborSample positive;               // value equals the ground-truth token
    std::vector<NeighborSample> negatives; // values differ from the ground truth
};

struct RescorerTrainConfig {
    double tau = 1.0;
    double lr = 1e-3;
    double weight_decay = 0.01;
    size_t log_interval = 200;  // optimizer steps between dev evaluations
    size_t patience = 3;        // non-improving dev logs before stopping
    uint64_t seed = 3;
    size_t max_tokens = 1000000;  // positions scanned when building examples
    size_t k = 1000;              // neighborhood size for example building
    size_t negatives = 10;
    size_t batch = 32;
    size_t max_epochs = 50;
};

/// Walks up to max_tokens positions of the corpus, retrieves a size-k
/// neighborhood per position (k/2 + k/2 when a second backend is given),
/// and emits one example per position whose neighborhood contains the
/// ground truth: the nearest such neighbor as the positive and
/// `negatives` uniform draws (without replacement) from the rest.
std::vector<ContrastiveExample> build_contrastive_set(const LmParams& lm,
                                                      const AdapterParams* adapters,
                                                      const RetrievalBackend& primary,
                                                      const RetrievalBackend* secondary,
                                                      const TokenSequence& corpus, TapPoint tap,
                                                      Metric metric,
                                                      const RescorerTrainConfig& cfg);

void save_contrastive_set(const std::vector<ContrastiveExample>& examples, size_t d_h,
                          bool merged_mode, const std::string& path);
std::pair<std::vector<ContrastiveExample>, bool> load_contrastive_set(const std::string& path);

/// Softmax-over-candidates loss with the positive as the target:
///   L = -log( exp(s_p/tau) / (exp(s_p/tau) + sum_n exp(s_n/tau)) ).
/// Accumulates parameter gradients when `grads` is non-null.
double contrastive_loss(const RescorerParams& params, const ContrastiveExample& example,
                        const LmParams& lm, double tau, RescorerGrads* grads = nullptr);

struct RescorerTrainStats {
    double initial_dev_loss = 0.0;
    double best_dev_loss = 0.0;
    size_t steps = 0;
    size_t dev_evals = 0;
};

/// AdamW over shuffled example batches; evaluates dev loss every
/// log_interval steps and returns the best-dev checkpoint.
std::pair<RescorerParams, RescorerTrainStats> train_rescorer(
    const std::vector<ContrastiveExample>& train_examples,
    const std::vector<ContrastiveExample>& dev_examples, const LmParams& lm, bool merged_mode,
    const RescorerTrainConfig& cfg);

}  // namespace knnlm
