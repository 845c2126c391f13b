#pragma once

#include <functional>
#include <span>
#include <vector>

#include "knnlm/tensor.hpp"

namespace knnlm {

inline constexpr double kLayerNormEps = 1e-5;

/// Numerically stable softmax (max-subtracted). Throws NumericError on
/// non-finite input.
std::vector<double> softmax(std::span<const double> logits);

/// gain * (x - mean) / sqrt(var + eps) + bias. Population variance.
std::vector<double> layernorm(std::span<const double> x, std::span<const double> gain,
                              std::span<const double> bias, double eps = kLayerNormEps);

/// Forward pass that keeps what the backward pass needs.
struct LayerNormCache {
    std::vector<double> xhat;
    double inv_std = 0.0;
};
std::vector<double> layernorm_fwd(std::span<const double> x, std::span<const double> gain,
                                  std::span<const double> bias, LayerNormCache& cache,
                                  double eps = kLayerNormEps);

/// Given d(loss)/d(out), accumulates gain/bias gradients and returns
/// d(loss)/d(x).
std::vector<double> layernorm_bwd(std::span<const double> d_out, std::span<const double> gain,
                                  const LayerNormCache& cache, std::span<double> d_gain,
                                  std::span<double> d_bias);

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

/// AdamW with decoupled weight decay over a fixed group of tensors.
/// One step() advances the shared step count once for the whole group.
class AdamW {
public:
    AdamW(AdamWConfig cfg, const std::vector<Tensor*>& params);

    /// grads[i] must match params[i] in size. Updates parameters in place.
    void step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads);

    uint64_t steps() const { return step_; }
    const AdamWConfig& config() const { return cfg_; }

private:
    AdamWConfig cfg_;
    uint64_t step_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

/// Max over coordinates of |analytic - central difference| /
/// max(1e-8, |analytic| + |numeric|). `f` is re-evaluated at coordinate
/// perturbations of `params`; `analytic` is the caller's gradient at the
/// unperturbed point.
double grad_check(const std::function<double(std::span<const double>)>& f,
                  std::span<double> params, std::span<const double> analytic, double eps = 1e-5);

}  // namespace knnlm
