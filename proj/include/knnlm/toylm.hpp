#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "knnlm/corpus.hpp"
#include "knnlm/neural.hpp"
#include "knnlm/tensor.hpp"

namespace knnlm {

/// Which internal activation serves as the contextual embedding for
/// datastore keys and retrieval queries. The output head always reads the
/// post-layernorm activation regardless of the tap.
enum class TapPoint : uint8_t {
    h1 = 0,      // post-ReLU first dense layer
    h2_pre = 1,  // second dense layer output, before layernorm
    h2_ln = 2,   // after final layernorm (default)
};

const char* tap_name(TapPoint t);
TapPoint tap_from_name(const std::string& name);

struct LmDims {
    size_t window = 5;
    size_t embed = 32;
    size_t hidden = 64;
    size_t vocab = 0;
};

/// Fixed-window feed-forward language model:
///   concat window embeddings -> dense1 -> ReLU -> dense2 -> layernorm
///   -> output projection -> softmax.
/// The output projection starts at zero, so an untrained model is exactly
/// uniform over the vocabulary.
struct LmParams {
    LmDims dims;
    Tensor embed;             // vocab x embed
    Tensor w1, b1;            // hidden x (window*embed), hidden
    Tensor w2, b2;            // hidden x hidden, hidden
    Tensor ln_gain, ln_bias;  // hidden
    Tensor out_w, out_b;      // vocab x hidden, vocab

    static LmParams init(LmDims dims, uint64_t seed);

    std::vector<Tensor*> tensors();
    std::vector<const Tensor*> tensors() const;

    /// Row of the output projection: the d_h-dimensional embedding of a
    /// token in the same space as the contextual representations.
    std::span<const double> value_embedding(TokenId id) const {
        return {out_w.row(id), dims.hidden};
    }

    uint64_t byte_checksum() const;
    void save(const std::string& path) const;
    static LmParams load(const std::string& path);
};

/// Residual bottleneck adapters, one per insertion site (after dense1's
/// ReLU and after dense2). Up-projections start at zero so a fresh adapter
/// is a bitwise identity.
struct AdapterSite {
    Tensor down_w, down_b;  // bottleneck x hidden, bottleneck
    Tensor up_w, up_b;      // hidden x bottleneck, hidden
};

struct AdapterParams {
    size_t bottleneck = 0;
    AdapterSite site1, site2;

    static AdapterParams init(size_t hidden, size_t bottleneck, uint64_t seed);

    std::vector<Tensor*> tensors();
    std::vector<const Tensor*> tensors() const;

    void save(const std::string& path) const;
    static AdapterParams load(const std::string& path);
};

/// Reusable forward/backward buffers for the training and batch-embedding
/// loops.
struct LmWorkspace {
    std::vector<double> x, a1, h1, h1p, a2, h2, z, logits, probs;
    std::vector<double> ad1_pre, ad1_mid, ad2_pre, ad2_mid;
    LayerNormCache ln;
    // backward scratch
    std::vector<double> d_logits, d_z, d_h2, d_a2, d_h1p, d_h1, d_a1, d_x, d_mid;
};

/// Runs the network on one window. When want_dist is false the output
/// head is skipped (datastore building and query embedding only need the
/// tap activation).
void lm_forward_ws(const LmParams& params, const AdapterParams* adapters,
                   std::span<const TokenId> window, LmWorkspace& ws, bool want_dist);

std::span<const double> tap_activation(const LmWorkspace& ws, TapPoint tap);

struct LmForwardResult {
    std::vector<double> embedding;  // activation at the tap, dimension hidden
    std::vector<double> dist;       // next-token distribution, dimension vocab
};

LmForwardResult lm_forward(const LmParams& params, const AdapterParams* adapters,
                           std::span<const TokenId> window, TapPoint tap);

/// Natural-log probability of `target` for this window.
double log_prob(const LmParams& params, const AdapterParams* adapters,
                std::span<const TokenId> window, TokenId target);

struct LmGrads {
    Tensor embed, w1, b1, w2, b2, ln_gain, ln_bias, out_w, out_b;
    explicit LmGrads(const LmParams& p);
    std::vector<const Tensor*> tensors() const;
    void zero();
};

struct AdapterGrads {
    AdapterSite site1, site2;
    explicit AdapterGrads(const AdapterParams& a);
    std::vector<const Tensor*> tensors() const;
    void zero();
};

/// Cross-entropy loss for one (window, target) pair; accumulates parameter
/// gradients into whichever of base_grads / adapter_grads is non-null.
/// Requires a forward pass with want_dist=true already stored in ws.
double lm_backward_ws(const LmParams& params, const AdapterParams* adapters,
                      std::span<const TokenId> window, TokenId target, LmWorkspace& ws,
                      LmGrads* base_grads, AdapterGrads* adapter_grads);

/// Window of the `window`-many ids preceding pos, left-padded with BOS.
void context_window(std::span<const TokenId> ids, size_t pos, size_t window, TokenId* out);

/// exp(mean NLL) over positions [0, limit) of the sequence (limit 0 = all).
/// Forward-only; parallel over positions with a deterministic ordered sum.
double lm_perplexity(const LmParams& params, const AdapterParams* adapters,
                     const TokenSequence& seq, size_t limit = 0);

struct LmTrainConfig {
    double lr = 1e-3;
    double weight_decay = 0.0;
    size_t epochs = 2;
    size_t batch = 64;
    uint64_t seed = 1;
};

struct LmTrainStats {
    double init_ppl = 0.0;  // exactly |V|: zero output head is uniform
    double final_train_ppl = 0.0;
    size_t steps = 0;
};

std::pair<LmParams, LmTrainStats> train_lm(const TokenSequence& corpus, LmDims dims,
                                           const LmTrainConfig& cfg);

struct AdapterTrainConfig {
    size_t bottleneck = 16;
    double lr = 1e-4;
    double weight_decay = 0.01;
    size_t epochs = 12;
    size_t batch = 64;
    size_t patience = 3;  // epochs without dev improvement before stopping
    uint64_t seed = 2;
    size_t dev_limit = 0;
};

struct AdapterTrainStats {
    double base_dev_ppl = 0.0;
    double best_dev_ppl = 0.0;
    size_t steps = 0;
    size_t epochs_run = 0;
};

/// Trains adapters on `train` with the base model frozen; keeps the
/// checkpoint with the best dev perplexity. The zero-initialized adapters
/// (identical to the base model) are the starting best, so the result is
/// never worse than the base on dev.
std::pair<AdapterParams, AdapterTrainStats> train_adapters(const LmParams& base,
                                                           const TokenSequence& train,
                                                           const TokenSequence& dev,
                                                           const AdapterTrainConfig& cfg);

}  // namespace knnlm
