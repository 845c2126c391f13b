#include "knnlm/toylm.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "knnlm/checkpoint.hpp"
#include "knnlm/errors.hpp"
#include "knnlm/hash.hpp"
#include "knnlm/kernels.hpp"
#include "knnlm/parallel.hpp"
#include "knnlm/rng.hpp"

namespace knnlm {

const char* tap_name(TapPoint t) {
    switch (t) {
        case TapPoint::h1: return "h1";
        case TapPoint::h2_pre: return "h2_pre";
        case TapPoint::h2_ln: return "h2_ln";
    }
    return "?";
}

TapPoint tap_from_name(const std::string& name) {
    if (name == "h1") return TapPoint::h1;
    if (name == "h2_pre") return TapPoint::h2_pre;
    if (name == "h2_ln") return TapPoint::h2_ln;
    throw ConfigError("unknown tap point: " + name);
}

namespace {

void fill_gaussian(Tensor& t, Rng& rng, double stddev) {
    for (double& v : t.data) v = rng.gaussian() * stddev;
}

void add_bias(std::span<double> y, const Tensor& b) {
    for (size_t i = 0; i < y.size(); ++i) y[i] += b.data[i];
}

}  // namespace

LmParams LmParams::init(LmDims dims, uint64_t seed) {
    if (dims.vocab < 2 || dims.window == 0 || dims.embed == 0 || dims.hidden == 0) {
        throw ConfigError("lm init: degenerate dimensions");
    }
    Rng rng(seed);
    LmParams p;
    p.dims = dims;
    p.embed = Tensor({dims.vocab, dims.embed});
    p.w1 = Tensor({dims.hidden, dims.window * dims.embed});
    p.b1 = Tensor({dims.hidden});
    p.w2 = Tensor({dims.hidden, dims.hidden});
    p.b2 = Tensor({dims.hidden});
    p.ln_gain = Tensor({dims.hidden});
    p.ln_bias = Tensor({dims.hidden});
    p.out_w = Tensor({dims.vocab, dims.hidden});
    p.out_b = Tensor({dims.vocab});
    fill_gaussian(p.embed, rng, 0.1);
    fill_gaussian(p.w1, rng, 1.0 / std::sqrt(static_cast<double>(dims.window * dims.embed)));
    fill_gaussian(p.w2, rng, 1.0 / std::sqrt(static_cast<double>(dims.hidden)));
    std::fill(p.ln_gain.data.begin(), p.ln_gain.data.end(), 1.0);
    // out_w/out_b stay zero: untrained output is exactly uniform.
    return p;
}

std::vector<Tensor*> LmParams::tensors() {
    return {&embed, &w1, &b1, &w2, &b2, &ln_gain, &ln_bias, &out_w, &out_b};
}

std::vector<const Tensor*> LmParams::tensors() const {
    return {&embed, &w1, &b1, &w2, &b2, &ln_gain, &ln_bias, &out_w, &out_b};
}

uint64_t LmParams::byte_checksum() const {
    uint64_t h = kFnvOffset;
    for (const Tensor* t : tensors()) {
        h = fnv1a64(t->data.data(), t->data.size() * sizeof(double), h);
    }
    return h;
}

namespace {
const char* const kLmNames[] = {"embed", "dense1.w", "dense1.b", "dense2.w", "dense2.b",
                                "ln.gain", "ln.bias", "out.w",   "out.b"};
}

void LmParams::save(const std::string& path) const {
    NamedTensors named;
    auto ts = tensors();
    for (size_t i = 0; i < ts.size(); ++i) named.emplace_back(kLmNames[i], *ts[i]);
    save_checkpoint(path, named);
}

LmParams LmParams::load(const std::string& path) {
    const NamedTensors named = load_checkpoint(path);
    LmParams p;
    p.embed = checkpoint_tensor(named, "embed");
    p.w1 = checkpoint_tensor(named, "dense1.w");
    p.b1 = checkpoint_tensor(named, "dense1.b");
    p.w2 = checkpoint_tensor(named, "dense2.w");
    p.b2 = checkpoint_tensor(named, "dense2.b");
    p.ln_gain = checkpoint_tensor(named, "ln.gain");
    p.ln_bias = checkpoint_tensor(named, "ln.bias");
    p.out_w = checkpoint_tensor(named, "out.w");
    p.out_b = checkpoint_tensor(named, "out.b");
    if (p.embed.shape.size() != 2 || p.w1.shape.size() != 2 || p.w2.shape.size() != 2 ||
        p.out_w.shape.size() != 2) {
        throw IoError(IoCode::bad_layout, "lm checkpoint has malformed shapes: " + path);
    }
    p.dims.vocab = p.embed.shape[0];
    p.dims.embed = p.embed.shape[1];
    p.dims.hidden = p.w2.shape[0];
    if (p.dims.embed == 0 || p.w1.shape[1] % p.dims.embed != 0) {
        throw IoError(IoCode::bad_layout, "lm checkpoint dims inconsistent: " + path);
    }
    p.dims.window = p.w1.shape[1] / p.dims.embed;
    return p;
}

AdapterParams AdapterParams::init(size_t hidden, size_t bottleneck, uint64_t seed) {
    if (bottleneck == 0 || bottleneck >= hidden) {
        throw ConfigError("adapter bottleneck must be in (0, hidden)");
    }
    Rng rng(seed);
    AdapterParams a;
    a.bottleneck = bottleneck;
    for (AdapterSite* site : {&a.site1, &a.site2}) {
        site->down_w = Tensor({bottleneck, hidden});
        site->down_b = Tensor({bottleneck});
        site->up_w = Tensor({hidden, bottleneck});
        site->up_b = Tensor({hidden});
        fill_gaussian(site->down_w, rng, 1.0 / std::sqrt(static_cast<double>(hidden)));
        // up_w/up_b stay zero: identity start.
    }
    return a;
}

std::vector<Tensor*> AdapterParams::tensors() {
    return {&site1.down_w, &site1.down_b, &site1.up_w, &site1.up_b,
            &site2.down_w, &site2.down_b, &site2.up_w, &site2.up_b};
}

std::vector<const Tensor*> AdapterParams::tensors() const {
    return {&site1.down_w, &site1.down_b, &site1.up_w, &site1.up_b,
            &site2.down_w, &site2.down_b, &site2.up_w, &site2.up_b};
}

namespace {
const char* const kAdapterNames[] = {"site1.down.w", "site1.down.b", "site1.up.w", "site1.up.b",
                                     "site2.down.w", "site2.down.b", "site2.up.w", "site2.up.b"};
}

void AdapterParams::save(const std::string& path) const {
    NamedTensors named;
    auto ts = tensors();
    for (size_t i = 0; i < ts.size(); ++i) named.emplace_back(kAdapterNames[i], *ts[i]);
    save_checkpoint(path, named);
}

AdapterParams AdapterParams::load(const std::string& path) {
    const NamedTensors named = load_checkpoint(path);
    AdapterParams a;
    a.site1.down_w = checkpoint_tensor(named, "site1.down.w");
    a.site1.down_b = checkpoint_tensor(named, "site1.down.b");
    a.site1.up_w = checkpoint_tensor(named, "site1.up.w");
    a.site1.up_b = checkpoint_tensor(named, "site1.up.b");
    a.site2.down_w = checkpoint_tensor(named, "site2.down.w");
    a.site2.down_b = checkpoint_tensor(named, "site2.down.b");
    a.site2.up_w = checkpoint_tensor(named, "site2.up.w");
    a.site2.up_b = checkpoint_tensor(named, "site2.up.b");
    if (a.site1.down_w.shape.size() != 2) {
        throw IoError(IoCode::bad_layout, "adapter checkpoint malformed: " + path);
    }
    a.bottleneck = a.site1.down_w.shape[0];
    return a;
}

namespace {

/// h += up(relu(down(h))); keeps pre/mid activations for backward.
void adapter_apply(const AdapterSite& site, std::span<double> h, std::vector<double>& pre,
                   std::vector<double>& mid) {
    const auto& K = kernels::ops();
    const size_t d_a = site.down_w.rows();
    const size_t d_h = h.size();
    pre.resize(d_a);
    mid.resize(d_a);
    K.matvec_f64(site.down_w.data.data(), h.data(), pre.data(), d_a, d_h);
    for (size_t i = 0; i < d_a; ++i) {
        pre[i] += site.down_b.data[i];
        mid[i] = pre[i] > 0.0 ? pre[i] : 0.0;
    }
    // residual add of up-projection
    for (size_t i = 0; i < d_h; ++i) {
        h[i] += K.dot_f64(site.up_w.row(i), mid.data(), d_a) + site.up_b.data[i];
    }
}

}  // namespace

void lm_forward_ws(const LmParams& params, const AdapterParams* adapters,
                   std::span<const TokenId> window, LmWorkspace& ws, bool want_dist) {
    const auto& K = kernels::ops();
    const LmDims& d = params.dims;
    if (window.size() != d.window) throw std::invalid_argument("lm_forward: window size mismatch");

    ws.x.resize(d.window * d.embed);
    for (size_t j = 0; j < d.window; ++j) {
        const TokenId id = window[j];
        if (id >= d.vocab) throw std::invalid_argument("lm_forward: token id out of range");
        std::memcpy(ws.x.data() + j * d.embed, params.embed.row(id), d.embed * sizeof(double));
    }

    ws.a1.resize(d.hidden);
    K.matvec_f64(params.w1.data.data(), ws.x.data(), ws.a1.data(), d.hidden, d.window * d.embed);
    add_bias(ws.a1, params.b1);
    ws.h1.resize(d.hidden);
    for (size_t i = 0; i < d.hidden; ++i) ws.h1[i] = ws.a1[i] > 0.0 ? ws.a1[i] : 0.0;

    ws.h1p = ws.h1;
    if (adapters) adapter_apply(adapters->site1, ws.h1p, ws.ad1_pre, ws.ad1_mid);

    ws.a2.resize(d.hidden);
    K.matvec_f64(params.w2.data.data(), ws.h1p.data(), ws.a2.data(), d.hidden, d.hidden);
    add_bias(ws.a2, params.b2);

    ws.h2 = ws.a2;
    if (adapters) adapter_apply(adapters->site2, ws.h2, ws.ad2_pre, ws.ad2_mid);

    ws.z = layernorm_fwd(ws.h2, params.ln_gain.flat(), params.ln_bias.flat(), ws.ln);

    if (!want_dist) return;
    ws.logits.resize(d.vocab);
    K.matvec_f64(params.out_w.data.data(), ws.z.data(), ws.logits.data(), d.vocab, d.hidden);
    add_bias(ws.logits, params.out_b);
    // stable softmax into ws.probs
    double mx = ws.logits[0];
    for (double v : ws.logits) mx = std::max(mx, v);
    ws.probs.resize(d.vocab);
    double zsum = 0.0;
    for (size_t i = 0; i < d.vocab; ++i) {
        ws.probs[i] = std::exp(ws.logits[i] - mx);
        zsum += ws.probs[i];
    }
    const double inv = 1.0 / zsum;
    for (double& v : ws.probs) v *= inv;
}

std::span<const double> tap_activation(const LmWorkspace& ws, TapPoint tap) {
    switch (tap) {
        case TapPoint::h1: return ws.h1p;
        case TapPoint::h2_pre: return ws.h2;
        case TapPoint::h2_ln: return ws.z;
    }
    throw std::invalid_argument("bad tap");
}

LmForwardResult lm_forward(const LmParams& params, const AdapterParams* adapters,
                           std::span<const TokenId> window, TapPoint tap) {
    LmWorkspace ws;
    lm_forward_ws(params, adapters, window, ws, /*want_dist=*/true);
    const auto emb = tap_activation(ws, tap);
    return {std::vector<double>(emb.begin(), emb.end()), ws.probs};
}

double log_prob(const LmParams& params, const AdapterParams* adapters,
                std::span<const TokenId> window, TokenId target) {
    if (target >= params.dims.vocab) throw std::invalid_argument("log_prob: target out of range");
    LmWorkspace ws;
    lm_forward_ws(params, adapters, window, ws, /*want_dist=*/true);
    return std::log(ws.probs[target]);
}

LmGrads::LmGrads(const LmParams& p)
    : embed(p.embed.shape),
      w1(p.w1.shape),
      b1(p.b1.shape),
      w2(p.w2.shape),
      b2(p.b2.shape),
      ln_gain(p.ln_gain.shape),
      ln_bias(p.ln_bias.shape),
      out_w(p.out_w.shape),
      out_b(p.out_b.shape) {}

std::vector<const Tensor*> LmGrads::tensors() const {
    return {&embed, &w1, &b1, &w2, &b2, &ln_gain, &ln_bias, &out_w, &out_b};
}

void LmGrads::zero() {
    for (Tensor* t : {&embed, &w1, &b1, &w2, &b2, &ln_gain, &ln_bias, &out_w, &out_b}) t->zero();
}

AdapterGrads::AdapterGrads(const AdapterParams& a) {
    for (auto [g, p] : {std::pair{&site1, &a.site1}, std::pair{&site2, &a.site2}}) {
        g->down_w = Tensor(p->down_w.shape);
        g->down_b = Tensor(p->down_b.shape);
        g->up_w = Tensor(p->up_w.shape);
        g->up_b = Tensor(p->up_b.shape);
    }
}

std::vector<const Tensor*> AdapterGrads::tensors() const {
    return {&site1.down_w, &site1.down_b, &site1.up_w, &site1.up_b,
            &site2.down_w, &site2.down_b, &site2.up_w, &site2.up_b};
}

void AdapterGrads::zero() {
    for (AdapterSite* s : {&site1, &site2}) {
        s->down_w.zero();
        s->down_b.zero();
        s->up_w.zero();
        s->up_b.zero();
    }
}

namespace {

/// Backward through h_out = h_in + up(relu(down(h_in))). d_h is d(loss)/d(h_out)
/// on entry and d(loss)/d(h_in) on exit (in place).
void adapter_backward(const AdapterSite& site, const std::vector<double>& h_in,
                      const std::vector<double>& pre, const std::vector<double>& mid,
                      std::vector<double>& d_h, std::vector<double>& d_mid_buf,
                      AdapterSite* grads) {
    const auto& K = kernels::ops();
    const size_t d_a = site.down_w.rows();
    const size_t d_h_n = d_h.size();
    d_mid_buf.assign(d_a, 0.0);
    // d_mid = up_w^T d_h ; up grads
    K.matvec_t_accum_f64(site.up_w.data.data(), d_h.data(), d_mid_buf.data(), d_h_n, d_a);
    if (grads) {
        K.ger_accum_f64(grads->up_w.data.data(), d_h.data(), mid.data(), d_h_n, d_a);
        for (size_t i = 0; i < d_h_n; ++i) grads->up_b.data[i] += d_h[i];
    }
    // relu gate
    for (size_t i = 0; i < d_a; ++i) d_mid_buf[i] = pre[i] > 0.0 ? d_mid_buf[i] : 0.0;
    if (grads) {
        K.ger_accum_f64(grads->down_w.data.data(), d_mid_buf.data(), h_in.data(), d_a, d_h_n);
        for (size_t i = 0; i < d_a; ++i) grads->down_b.data[i] += d_mid_buf[i];
    }
    // residual: d_h_in = d_h_out + down_w^T d_pre
    K.matvec_t_accum_f64(site.down_w.data.data(), d_mid_buf.data(), d_h.data(), d_a, d_h_n);
}

}  // namespace

double lm_backward_ws(const LmParams& params, const AdapterParams* adapters,
                      std::span<const TokenId> window, TokenId target, LmWorkspace& ws,
                      LmGrads* base_grads, AdapterGrads* adapter_grads) {
    const auto& K = kernels::ops();
    const LmDims& d = params.dims;
    if (target >= d.vocab) throw std::invalid_argument("lm_backward: target out of range");
    const double loss = -std::log(ws.probs[target]);

    // d logits = probs - onehot(target)
    ws.d_logits = ws.probs;
    ws.d_logits[target] -= 1.0;

    ws.d_z.assign(d.hidden, 0.0);
    K.matvec_t_accum_f64(params.out_w.data.data(), ws.d_logits.data(), ws.d_z.data(), d.vocab,
                         d.hidden);
    if (base_grads) {
        K.ger_accum_f64(base_grads->out_w.data.data(), ws.d_logits.data(), ws.z.data(), d.vocab,
                        d.hidden);
        for (size_t i = 0; i < d.vocab; ++i) base_grads->out_b.data[i] += ws.d_logits[i];
    }

    static thread_local std::vector<double> null_gain, null_bias;
    std::span<double> dg, db;
    if (base_grads) {
        dg = base_grads->ln_gain.flat();
        db = base_grads->ln_bias.flat();
    } else {
        null_gain.assign(d.hidden, 0.0);
        null_bias.assign(d.hidden, 0.0);
        dg = null_gain;
        db = null_bias;
    }
    ws.d_h2 = layernorm_bwd(ws.d_z, params.ln_gain.flat(), ws.ln, dg, db);

    if (adapters) {
        adapter_backward(adapters->site2, ws.a2, ws.ad2_pre, ws.ad2_mid, ws.d_h2, ws.d_mid,
                         adapter_grads ? &adapter_grads->site2 : nullptr);
    }
    // d_h2 is now d(loss)/d(a2)
    ws.d_h1p.assign(d.hidden, 0.0);
    K.matvec_t_accum_f64(params.w2.data.data(), ws.d_h2.data(), ws.d_h1p.data(), d.hidden, d.hidden);
    if (base_grads) {
        K.ger_accum_f64(base_grads->w2.data.data(), ws.d_h2.data(), ws.h1p.data(), d.hidden,
                        d.hidden);
        for (size_t i = 0; i < d.hidden; ++i) base_grads->b2.data[i] += ws.d_h2[i];
    }

    if (adapters) {
        adapter_backward(adapters->site1, ws.h1, ws.ad1_pre, ws.ad1_mid, ws.d_h1p, ws.d_mid,
                         adapter_grads ? &adapter_grads->site1 : nullptr);
    }
    // relu gate of dense1
    ws.d_a1.resize(d.hidden);
    for (size_t i = 0; i < d.hidden; ++i) ws.d_a1[i] = ws.a1[i] > 0.0 ? ws.d_h1p[i] : 0.0;

    if (base_grads) {
        K.ger_accum_f64(base_grads->w1.data.data(), ws.d_a1.data(), ws.x.data(), d.hidden,
                        d.window * d.embed);
        for (size_t i = 0; i < d.hidden; ++i) base_grads->b1.data[i] += ws.d_a1[i];
        ws.d_x.assign(d.window * d.embed, 0.0);
        K.matvec_t_accum_f64(params.w1.data.data(), ws.d_a1.data(), ws.d_x.data(), d.hidden,
                             d.window * d.embed);
        for (size_t j = 0; j < d.window; ++j) {
            K.axpy_f64(1.0, ws.d_x.data() + j * d.embed, base_grads->embed.row(window[j]), d.embed);
        }
    }
    return loss;
}

void context_window(std::span<const TokenId> ids, size_t pos, size_t window, TokenId* out) {
    for (size_t j = 0; j < window; ++j) {
        const size_t back = window - j;
        out[j] = pos >= back ? ids[pos - back] : Vocab::kBos;
    }
}

double lm_perplexity(const LmParams& params, const AdapterParams* adapters,
                     const TokenSequence& seq, size_t limit) {
    const size_t n = limit == 0 ? seq.size() : std::min(limit, seq.size());
    if (n == 0) throw std::invalid_argument("lm_perplexity: empty sequence");
    std::vector<double> nll(n);
    const size_t N = params.dims.window;
    parallel_for(n, [&](size_t begin, size_t end) {
        LmWorkspace ws;
        std::vector<TokenId> win(N);
        for (size_t t = begin; t < end; ++t) {
            context_window(seq.ids, t, N, win.data());
            lm_forward_ws(params, adapters, win, ws, /*want_dist=*/true);
            nll[t] = -std::log(ws.probs[seq.ids[t]]);
        }
    });
    double total = 0.0;
    for (double v : nll) total += v;  // fixed order
    return std::exp(total / static_cast<double>(n));
}

namespace {

/// One AdamW pass over shuffled positions; returns mean training NLL.
/// Gradients are averaged over each mini-batch.
template <typename BackwardFn, typename StepFn>
double run_epoch(std::vector<size_t>& positions, Rng& rng, size_t batch, BackwardFn&& backward,
                 StepFn&& step) {
    rng.shuffle(positions);
    double epoch_nll = 0.0;
    size_t done = 0;
    while (done < positions.size()) {
        const size_t take = std::min(batch, positions.size() - done);
        double batch_nll = 0.0;
        for (size_t b = 0; b < take; ++b) batch_nll += backward(positions[done + b]);
        step(take);
        epoch_nll += batch_nll;
        done += take;
    }
    return epoch_nll / static_cast<double>(positions.size());
}

void scale_tensors(std::vector<const Tensor*> grads, double s) {
    for (const Tensor* g : grads) {
        auto* t = const_cast<Tensor*>(g);
        for (double& v : t->data) v *= s;
    }
}

}  // namespace

std::pair<LmParams, LmTrainStats> train_lm(const TokenSequence& corpus, LmDims dims,
                                           const LmTrainConfig& cfg) {
    if (corpus.size() <= dims.window) throw ConfigError("train_lm: corpus shorter than window");
    if (cfg.batch == 0 || cfg.epochs == 0) throw ConfigError("train_lm: batch/epochs must be positive");

    LmParams params = LmParams::init(dims, cfg.seed);
    LmGrads grads(params);
    AdamW opt({cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay}, params.tensors());

    Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<size_t> positions(corpus.size());
    std::iota(positions.begin(), positions.end(), size_t{0});

    LmWorkspace ws;
    std::vector<TokenId> win(dims.window);
    LmTrainStats stats;
    stats.init_ppl = static_cast<double>(dims.vocab);

    double last_epoch_nll = std::log(static_cast<double>(dims.vocab));
    for (size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        last_epoch_nll = run_epoch(
            positions, rng, cfg.batch,
            [&](size_t pos) {
                context_window(corpus.ids, pos, dims.window, win.data());
                lm_forward_ws(params, nullptr, win, ws, true);
                return lm_backward_ws(params, nullptr, win, corpus.ids[pos], ws, &grads, nullptr);
            },
            [&](size_t batch_n) {
                scale_tensors(grads.tensors(), 1.0 / static_cast<double>(batch_n));
                opt.step(params.tensors(), grads.tensors());
                grads.zero();
                ++stats.steps;
            });
    }
    stats.final_train_ppl = std::exp(last_epoch_nll);
    return {std::move(params), stats};
}

std::pair<AdapterParams, AdapterTrainStats> train_adapters(const LmParams& base,
                                                           const TokenSequence& train,
                                                           const TokenSequence& dev,
                                                           const AdapterTrainConfig& cfg) {
    if (train.size() == 0) throw ConfigError("train_adapters: empty training corpus");
    if (cfg.bottleneck >= base.dims.hidden) {
        throw ConfigError("train_adapters: bottleneck must be smaller than hidden dim");
    }

    AdapterParams adapters = AdapterParams::init(base.dims.hidden, cfg.bottleneck, cfg.seed);
    AdapterGrads grads(adapters);
    AdamW opt({cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay}, adapters.tensors());

    AdapterTrainStats stats;
    stats.base_dev_ppl = lm_perplexity(base, nullptr, dev, cfg.dev_limit);

    // Zero-initialized adapters reproduce the base model exactly, so the
    // base dev perplexity is the score to beat.
    AdapterParams best = adapters;
    stats.best_dev_ppl = stats.base_dev_ppl;

    Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<size_t> positions(train.size());
    std::iota(positions.begin(), positions.end(), size_t{0});

    LmWorkspace ws;
    std::vector<TokenId> win(base.dims.window);
    size_t since_best = 0;
    for (size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        run_epoch(
            positions, rng, cfg.batch,
            [&](size_t pos) {
                context_window(train.ids, pos, base.dims.window, win.data());
                lm_forward_ws(base, &adapters, win, ws, true);
                return lm_backward_ws(base, &adapters, win, train.ids[pos], ws, nullptr, &grads);
            },
            [&](size_t batch_n) {
                scale_tensors(grads.tensors(), 1.0 / static_cast<double>(batch_n));
                opt.step(adapters.tensors(), grads.tensors());
                grads.zero();
                ++stats.steps;
            });
        ++stats.epochs_run;
        const double dev_ppl = lm_perplexity(base, &adapters, dev, cfg.dev_limit);
        if (dev_ppl < stats.best_dev_ppl) {
            stats.best_dev_ppl = dev_ppl;
            best = adapters;
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            break;
        }
    }
    return {std::move(best), stats};
}

}  // namespace knnlm
