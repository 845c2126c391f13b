#include "knnlm/neural.hpp"

#include <algorithm>
#include <cmath>

#include "knnlm/errors.hpp"

namespace knnlm {

std::vector<double> softmax(std::span<const double> logits) {
    if (logits.empty()) throw std::invalid_argument("softmax: empty input");
    double mx = logits[0];
    for (double v : logits) {
        if (!std::isfinite(v)) throw NumericError("softmax: non-finite logit");
        mx = std::max(mx, v);
    }
    std::vector<double> out(logits.size());
    double z = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - mx);
        z += out[i];
    }
    const double inv = 1.0 / z;
    for (double& v : out) v *= inv;
    return out;
}

std::vector<double> layernorm(std::span<const double> x, std::span<const double> gain,
                              std::span<const double> bias, double eps) {
    LayerNormCache cache;
    return layernorm_fwd(x, gain, bias, cache, eps);
}

std::vector<double> layernorm_fwd(std::span<const double> x, std::span<const double> gain,
                                  std::span<const double> bias, LayerNormCache& cache, double eps) {
    if (x.size() != gain.size() || x.size() != bias.size()) {
        throw std::invalid_argument("layernorm: gain/bias size mismatch");
    }
    if (x.empty()) throw std::invalid_argument("layernorm: empty input");
    if (eps <= 0.0) throw std::invalid_argument("layernorm: eps must be positive");
    const size_t n = x.size();
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    cache.inv_std = 1.0 / std::sqrt(var + eps);
    cache.xhat.resize(n);
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) {
        cache.xhat[i] = (x[i] - mean) * cache.inv_std;
        out[i] = gain[i] * cache.xhat[i] + bias[i];
    }
    return out;
}

std::vector<double> layernorm_bwd(std::span<const double> d_out, std::span<const double> gain,
                                  const LayerNormCache& cache, std::span<double> d_gain,
                                  std::span<double> d_bias) {
    const size_t n = d_out.size();
    // dxhat_i = d_out_i * gain_i;
    // dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    std::vector<double> dxhat(n);
    for (size_t i = 0; i < n; ++i) {
        dxhat[i] = d_out[i] * gain[i];
        mean_dxhat += dxhat[i];
        mean_dxhat_xhat += dxhat[i] * cache.xhat[i];
        d_gain[i] += d_out[i] * cache.xhat[i];
        d_bias[i] += d_out[i];
    }
    mean_dxhat /= static_cast<double>(n);
    mean_dxhat_xhat /= static_cast<double>(n);
    std::vector<double> dx(n);
    for (size_t i = 0; i < n; ++i) {
        dx[i] = cache.inv_std * (dxhat[i] - mean_dxhat - cache.xhat[i] * mean_dxhat_xhat);
    }
    return dx;
}

AdamW::AdamW(AdamWConfig cfg, const std::vector<Tensor*>& params) : cfg_(cfg) {
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (const Tensor* p : params) {
        m_.emplace_back(p->numel(), 0.0);
        v_.emplace_back(p->numel(), 0.0);
    }
}

void AdamW::step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads) {
    if (params.size() != m_.size() || grads.size() != m_.size()) {
        throw std::invalid_argument("adamw: tensor group size mismatch");
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (size_t t = 0; t < params.size(); ++t) {
        Tensor& p = *params[t];
        const Tensor& g = *grads[t];
        if (p.numel() != m_[t].size() || g.numel() != p.numel()) {
            throw std::invalid_argument("adamw: parameter/gradient shape mismatch");
        }
        auto& m = m_[t];
        auto& v = v_[t];
        for (size_t i = 0; i < p.numel(); ++i) {
            const double gi = g.data[i];
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p.data[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p.data[i]);
        }
    }
}

double grad_check(const std::function<double(std::span<const double>)>& f,
                  std::span<double> params, std::span<const double> analytic, double eps) {
    if (params.size() != analytic.size()) {
        throw std::invalid_argument("grad_check: gradient size mismatch");
    }
    double worst = 0.0;
    for (size_t i = 0; i < params.size(); ++i) {
        const double saved = params[i];
        params[i] = saved + eps;
        const double up = f(params);
        params[i] = saved - eps;
        const double down = f(params);
        params[i] = saved;
        if (!std::isfinite(up) || !std::isfinite(down)) {
            throw NumericError("grad_check: non-finite evaluation");
        }
        const double numeric = (up - down) / (2.0 * eps);
        const double denom = std::max(1e-8, std::fabs(analytic[i]) + std::fabs(numeric));
        worst = std::max(worst, std::fabs(analytic[i] - numeric) / denom);
    }
    return worst;
}

}  // namespace knnlm
