#include "knnlm/rescorer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "knnlm/checkpoint.hpp"
#include "knnlm/errors.hpp"
#include "knnlm/kernels.hpp"
#include "knnlm/parallel.hpp"
#include "knnlm/rng.hpp"

namespace knnlm {

std::vector<double> build_features(std::span<const double> query, std::span<const double> key,
                                   std::span<const double> value_emb, bool merged_mode,
                                   Origin origin) {
    const size_t d = query.size();
    if (key.size() != d || value_emb.size() != d) {
        throw std::invalid_argument("build_features: dimension mismatch");
    }
    const auto& K = kernels::ops();
    std::vector<double> f;
    f.reserve(rescorer_input_dim(d, merged_mode));
    f.insert(f.end(), key.begin(), key.end());
    f.insert(f.end(), query.begin(), query.end());
    f.insert(f.end(), value_emb.begin(), value_emb.end());
    const double* q = query.data();
    const double* k = key.data();
    const double* v = value_emb.data();
    f.push_back(K.dot_f64(q, k, d));
    f.push_back(K.dot_f64(q, v, d));
    f.push_back(K.dot_f64(k, v, d));
    f.push_back(std::sqrt(K.l2sq_f64(q, k, d)));
    f.push_back(std::sqrt(K.l2sq_f64(q, v, d)));
    f.push_back(std::sqrt(K.l2sq_f64(k, v, d)));
    if (merged_mode) f.push_back(origin == Origin::adapt ? 1.0 : 0.0);
    return f;
}

std::vector<double> build_features(std::span<const float> query, const Neighbor& neighbor,
                                   const LmParams& lm, bool merged_mode) {
    std::vector<double> q(query.begin(), query.end());
    const auto kf = neighbor.key();
    std::vector<double> k(kf.begin(), kf.end());
    const auto v = lm.value_embedding(neighbor.value);
    return build_features(q, k, {v.data(), v.size()}, merged_mode, neighbor.origin);
}

namespace {

void fill_gaussian(Tensor& t, Rng& rng, double stddev) {
    for (double& v : t.data) v = rng.gaussian() * stddev;
}

RescorerParams make_shell(size_t d_h, bool merged_mode) {
    RescorerParams p;
    p.d_h = d_h;
    p.merged_mode = merged_mode;
    const size_t d_r = p.input_dim();
    for (Tensor* t : {&p.ln_key_gain, &p.ln_key_bias, &p.ln_query_gain, &p.ln_query_bias,
                      &p.ln_value_gain, &p.ln_value_bias}) {
        *t = Tensor({d_h});
    }
    p.dense_a_w = Tensor({kRescorerHidden, d_r});
    p.dense_a_b = Tensor({kRescorerHidden});
    p.dense_b_w = Tensor({kRescorerHidden, kRescorerHidden});
    p.dense_b_b = Tensor({kRescorerHidden});
    p.head_w = Tensor({kRescorerHidden});
    p.head_b = Tensor({1});
    return p;
}

}  // namespace

RescorerParams RescorerParams::init(size_t d_h, bool merged_mode, uint64_t seed) {
    if (d_h == 0) throw ConfigError("rescorer: d_h must be positive");
    RescorerParams p = make_shell(d_h, merged_mode);
    Rng rng(seed);
    std::fill(p.ln_key_gain.data.begin(), p.ln_key_gain.data.end(), 1.0);
    std::fill(p.ln_query_gain.data.begin(), p.ln_query_gain.data.end(), 1.0);
    std::fill(p.ln_value_gain.data.begin(), p.ln_value_gain.data.end(), 1.0);
    fill_gaussian(p.dense_a_w, rng, 1.0 / std::sqrt(static_cast<double>(p.input_dim())));
    fill_gaussian(p.dense_b_w, rng, 1.0 / std::sqrt(static_cast<double>(kRescorerHidden)));
    fill_gaussian(p.head_w, rng, 1.0 / std::sqrt(static_cast<double>(kRescorerHidden)));
    return p;
}

RescorerParams RescorerParams::zeros(size_t d_h, bool merged_mode) {
    RescorerParams p = make_shell(d_h, merged_mode);
    std::fill(p.ln_key_gain.data.begin(), p.ln_key_gain.data.end(), 1.0);
    std::fill(p.ln_query_gain.data.begin(), p.ln_query_gain.data.end(), 1.0);
    std::fill(p.ln_value_gain.data.begin(), p.ln_value_gain.data.end(), 1.0);
    return p;
}

std::vector<Tensor*> RescorerParams::tensors() {
    return {&ln_key_gain, &ln_key_bias, &ln_query_gain, &ln_query_bias, &ln_value_gain,
            &ln_value_bias, &dense_a_w,  &dense_a_b,    &dense_b_w,     &dense_b_b,
            &head_w,       &head_b};
}

std::vector<const Tensor*> RescorerParams::tensors() const {
    return {&ln_key_gain, &ln_key_bias, &ln_query_gain, &ln_query_bias, &ln_value_gain,
            &ln_value_bias, &dense_a_w,  &dense_a_b,    &dense_b_w,     &dense_b_b,
            &head_w,       &head_b};
}

namespace {
const char* const kRescorerNames[] = {"ln_key.gain",   "ln_key.bias",  "ln_query.gain",
                                      "ln_query.bias", "ln_value.gain", "ln_value.bias",
                                      "dense_a.w",     "dense_a.b",     "dense_b.w",
                                      "dense_b.b",     "head.w",        "head.b"};
}

void RescorerParams::save(const std::string& path) const {
    NamedTensors named;
    auto ts = tensors();
    for (size_t i = 0; i < ts.size(); ++i) named.emplace_back(kRescorerNames[i], *ts[i]);
    Tensor mode({1});
    mode.data[0] = merged_mode ? 1.0 : 0.0;
    named.emplace_back("merged_mode", std::move(mode));
    save_checkpoint(path, named);
}

RescorerParams RescorerParams::load(const std::string& path) {
    const NamedTensors named = load_checkpoint(path);
    const Tensor& gain = checkpoint_tensor(named, "ln_key.gain");
    const Tensor& mode = checkpoint_tensor(named, "merged_mode", {1});
    RescorerParams p = make_shell(gain.numel(), mode.data[0] != 0.0);
    auto ts = p.tensors();
    for (size_t i = 0; i < ts.size(); ++i) {
        *ts[i] = checkpoint_tensor(named, kRescorerNames[i], ts[i]->shape);
    }
    return p;
}

RescorerGrads::RescorerGrads(const RescorerParams& p)
    : ln_key_gain(p.ln_key_gain.shape),
      ln_key_bias(p.ln_key_bias.shape),
      ln_query_gain(p.ln_query_gain.shape),
      ln_query_bias(p.ln_query_bias.shape),
      ln_value_gain(p.ln_value_gain.shape),
      ln_value_bias(p.ln_value_bias.shape),
      dense_a_w(p.dense_a_w.shape),
      dense_a_b(p.dense_a_b.shape),
      dense_b_w(p.dense_b_w.shape),
      dense_b_b(p.dense_b_b.shape),
      head_w(p.head_w.shape),
      head_b(p.head_b.shape) {}

std::vector<const Tensor*> RescorerGrads::tensors() const {
    return {&ln_key_gain, &ln_key_bias, &ln_query_gain, &ln_query_bias, &ln_value_gain,
            &ln_value_bias, &dense_a_w,  &dense_a_b,    &dense_b_w,     &dense_b_b,
            &head_w,       &head_b};
}

void RescorerGrads::zero() {
    for (Tensor* t : {&ln_key_gain, &ln_key_bias, &ln_query_gain, &ln_query_bias, &ln_value_gain,
                      &ln_value_bias, &dense_a_w, &dense_a_b, &dense_b_w, &dense_b_b, &head_w,
                      &head_b}) {
        t->zero();
    }
}

double rescorer_forward(const RescorerParams& params, std::span<const double> features,
                        RescorerWorkspace& ws) {
    const size_t d_h = params.d_h;
    const size_t d_r = params.input_dim();
    if (features.size() != d_r) {
        throw std::invalid_argument("rescorer_forward: feature dimension mismatch");
    }
    const auto& K = kernels::ops();

    ws.in.resize(d_r);
    const auto norm_block = [&](size_t offset, const Tensor& gain, const Tensor& bias,
                                LayerNormCache& cache) {
        const auto out =
            layernorm_fwd(features.subspan(offset, d_h), gain.flat(), bias.flat(), cache);
        std::memcpy(ws.in.data() + offset, out.data(), d_h * sizeof(double));
    };
    norm_block(0, params.ln_key_gain, params.ln_key_bias, ws.ln_k);
    norm_block(d_h, params.ln_query_gain, params.ln_query_bias, ws.ln_q);
    norm_block(2 * d_h, params.ln_value_gain, params.ln_value_bias, ws.ln_v);
    // pair features (and origin bit) pass through unnormalized
    std::memcpy(ws.in.data() + 3 * d_h, features.data() + 3 * d_h,
                (d_r - 3 * d_h) * sizeof(double));

    ws.a1.resize(kRescorerHidden);
    K.matvec_f64(params.dense_a_w.data.data(), ws.in.data(), ws.a1.data(), kRescorerHidden, d_r);
    for (size_t i = 0; i < kRescorerHidden; ++i) ws.a1[i] += params.dense_a_b.data[i];
    ws.r1.resize(kRescorerHidden);
    for (size_t i = 0; i < kRescorerHidden; ++i) ws.r1[i] = ws.a1[i] > 0.0 ? ws.a1[i] : 0.0;

    ws.a2.resize(kRescorerHidden);
    K.matvec_f64(params.dense_b_w.data.data(), ws.r1.data(), ws.a2.data(), kRescorerHidden,
                 kRescorerHidden);
    for (size_t i = 0; i < kRescorerHidden; ++i) ws.a2[i] += params.dense_b_b.data[i];
    ws.r2.resize(kRescorerHidden);
    for (size_t i = 0; i < kRescorerHidden; ++i) ws.r2[i] = ws.a2[i] > 0.0 ? ws.a2[i] : 0.0;

    // skip connection from the first dense layer's output
    ws.h.resize(kRescorerHidden);
    for (size_t i = 0; i < kRescorerHidden; ++i) ws.h[i] = ws.r2[i] + ws.a1[i];

    return K.dot_f64(params.head_w.data.data(), ws.h.data(), kRescorerHidden) +
           params.head_b.data[0];
}

void rescorer_backward(const RescorerParams& params, std::span<const double> features,
                       RescorerWorkspace& ws, double d_score, RescorerGrads& grads) {
    const size_t d_h = params.d_h;
    const size_t d_r = params.input_dim();
    const auto& K = kernels::ops();

    K.axpy_f64(d_score, ws.h.data(), grads.head_w.data.data(), kRescorerHidden);
    grads.head_b.data[0] += d_score;

    ws.d_h_buf.resize(kRescorerHidden);
    for (size_t i = 0; i < kRescorerHidden; ++i) ws.d_h_buf[i] = d_score * params.head_w.data[i];

    ws.d_a2.resize(kRescorerHidden);
    for (size_t i = 0; i < kRescorerHidden; ++i) {
        ws.d_a2[i] = ws.a2[i] > 0.0 ? ws.d_h_buf[i] : 0.0;
    }
    K.ger_accum_f64(grads.dense_b_w.data.data(), ws.d_a2.data(), ws.r1.data(), kRescorerHidden,
                    kRescorerHidden);
    for (size_t i = 0; i < kRescorerHidden; ++i) grads.dense_b_b.data[i] += ws.d_a2[i];

    ws.d_r1.assign(kRescorerHidden, 0.0);
    K.matvec_t_accum_f64(params.dense_b_w.data.data(), ws.d_a2.data(), ws.d_r1.data(),
                         kRescorerHidden, kRescorerHidden);

    // d_a1 collects the ReLU-gated path plus the skip contribution
    ws.d_a1.resize(kRescorerHidden);
    for (size_t i = 0; i < kRescorerHidden; ++i) {
        ws.d_a1[i] = (ws.a1[i] > 0.0 ? ws.d_r1[i] : 0.0) + ws.d_h_buf[i];
    }
    K.ger_accum_f64(grads.dense_a_w.data.data(), ws.d_a1.data(), ws.in.data(), kRescorerHidden,
                    d_r);
    for (size_t i = 0; i < kRescorerHidden; ++i) grads.dense_a_b.data[i] += ws.d_a1[i];

    ws.d_in.assign(d_r, 0.0);
    K.matvec_t_accum_f64(params.dense_a_w.data.data(), ws.d_a1.data(), ws.d_in.data(),
                         kRescorerHidden, d_r);

    const auto norm_back = [&](size_t offset, const Tensor& gain, const LayerNormCache& cache,
                               Tensor& d_gain, Tensor& d_bias) {
        std::span<const double> d_out(ws.d_in.data() + offset, d_h);
        layernorm_bwd(d_out, gain.flat(), cache, d_gain.flat(), d_bias.flat());
    };
    norm_back(0, params.ln_key_gain, ws.ln_k, grads.ln_key_gain, grads.ln_key_bias);
    norm_back(d_h, params.ln_query_gain, ws.ln_q, grads.ln_query_gain, grads.ln_query_bias);
    norm_back(2 * d_h, params.ln_value_gain, ws.ln_v, grads.ln_value_gain, grads.ln_value_bias);
}

Rescored rescore(const RescorerParams& params, const Neighborhood& hood, const LmParams& lm,
                 bool merged_mode) {
    if (hood.neighbors.empty()) throw std::invalid_argument("rescore: empty neighborhood");
    if (params.merged_mode != merged_mode) {
        throw std::invalid_argument("rescore: parameters were trained for a different input mode");
    }
    if (params.d_h != hood.query.size()) {
        throw std::invalid_argument("rescore: dimension mismatch");
    }
    Rescored out;
    out.sr.resize(hood.neighbors.size());
    out.sprime.resize(hood.neighbors.size());
    RescorerWorkspace ws;
    for (size_t i = 0; i < hood.neighbors.size(); ++i) {
        const auto feat = build_features(hood.query, hood.neighbors[i], lm, merged_mode);
        out.sr[i] = rescorer_forward(params, feat, ws);
        out.sprime[i] = out.sr[i] - hood.neighbors[i].s;
    }
    return out;
}

std::vector<ContrastiveExample> build_contrastive_set(const LmParams& lm,
                                                      const AdapterParams* adapters,
                                                      const RetrievalBackend& primary,
                                                      const RetrievalBackend* secondary,
                                                      const TokenSequence& corpus, TapPoint tap,
                                                      Metric metric,
                                                      const RescorerTrainConfig& cfg) {
    if (corpus.size() == 0) throw ConfigError("build_contrastive_set: empty corpus");
    const size_t n = std::min(cfg.max_tokens, corpus.size());
    const size_t d_h = lm.dims.hidden;
    const size_t N = lm.dims.window;
    Rng rng(cfg.seed);
    std::vector<ContrastiveExample> examples;

    const size_t chunk = 1024;
    std::vector<float> queries(chunk * d_h);
    // Merged retrieval splits the budget half/half, extra to the adaptation side.
    const size_t k_primary = secondary ? cfg.k / 2 : cfg.k;
    const size_t k_secondary = secondary ? cfg.k - cfg.k / 2 : 0;

    for (size_t begin = 0; begin < n; begin += chunk) {
        const size_t end = std::min(n, begin + chunk);
        const size_t m = end - begin;
        parallel_for(m, [&](size_t lo, size_t hi) {
            LmWorkspace ws;
            std::vector<TokenId> win(N);
            for (size_t i = lo; i < hi; ++i) {
                context_window(corpus.ids, begin + i, N, win.data());
                lm_forward_ws(lm, adapters, win, ws, /*want_dist=*/false);
                const auto emb = tap_activation(ws, tap);
                for (size_t j = 0; j < d_h; ++j) {
                    queries[i * d_h + j] = static_cast<float>(emb[j]);
                }
            }
        });
        auto hoods = primary.batch(queries.data(), m, k_primary, metric);
        std::vector<Neighborhood> hoods2;
        if (secondary) hoods2 = secondary->batch(queries.data(), m, k_secondary, metric);

        // Sampling consumes the RNG in position order; this stays serial.
        for (size_t i = 0; i < m; ++i) {
            if (secondary) hoods[i] = merge_neighborhoods(hoods[i], hoods2[i]);
            const Neighborhood& hood = hoods[i];
            const TokenId truth = corpus.ids[begin + i];

            size_t best_pos = hood.size();
            std::vector<uint32_t> decoys;
            decoys.reserve(hood.size());
            for (size_t j = 0; j < hood.size(); ++j) {
                if (hood.neighbors[j].value == truth) {
                    if (best_pos == hood.size() || hood.neighbors[j].s < hood.neighbors[best_pos].s) {
                        best_pos = j;
                    }
                } else {
                    decoys.push_back(static_cast<uint32_t>(j));
                }
            }
            if (best_pos == hood.size()) continue;  // ground truth not retrieved

            const auto sample_of = [&](size_t j) {
                const Neighbor& nb = hood.neighbors[j];
                NeighborSample s;
                const auto key = nb.key();
                s.key.assign(key.begin(), key.end());
                s.value = nb.value;
                s.s = nb.s;
                s.origin = nb.origin;
                return s;
            };

            ContrastiveExample ex;
            ex.query.assign(queries.data() + i * d_h, queries.data() + (i + 1) * d_h);
            ex.positive = sample_of(best_pos);
            if (decoys.size() <= cfg.negatives) {
                for (uint32_t j : decoys) ex.negatives.push_back(sample_of(j));
            } else {
                for (uint64_t pick : rng.sample_distinct(decoys.size(), cfg.negatives)) {
                    ex.negatives.push_back(sample_of(decoys[pick]));
                }
            }
            examples.push_back(std::move(ex));
        }
    }
    return examples;
}

namespace {
constexpr char kCxMagic[6] = {'K', 'N', 'N', 'C', 'X', '1'};
constexpr uint32_t kCxVersion = 1;

void write_sample(std::ofstream& out, const NeighborSample& s) {
    out.write(reinterpret_cast<const char*>(s.key.data()),
              static_cast<std::streamsize>(s.key.size() * sizeof(float)));
    out.write(reinterpret_cast<const char*>(&s.value), sizeof(s.value));
    out.write(reinterpret_cast<const char*>(&s.s), sizeof(s.s));
    const uint8_t origin = static_cast<uint8_t>(s.origin);
    out.write(reinterpret_cast<const char*>(&origin), sizeof(origin));
}

NeighborSample read_sample(std::ifstream& in, size_t d_h, const std::string& path) {
    NeighborSample s;
    s.key.resize(d_h);
    in.read(reinterpret_cast<char*>(s.key.data()),
            static_cast<std::streamsize>(d_h * sizeof(float)));
    in.read(reinterpret_cast<char*>(&s.value), sizeof(s.value));
    in.read(reinterpret_cast<char*>(&s.s), sizeof(s.s));
    uint8_t origin = 0;
    in.read(reinterpret_cast<char*>(&origin), sizeof(origin));
    if (!in) throw IoError(IoCode::truncated, "contrastive set truncated: " + path);
    s.origin = static_cast<Origin>(origin);
    return s;
}
}  // namespace

void save_contrastive_set(const std::vector<ContrastiveExample>& examples, size_t d_h,
                          bool merged_mode, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(IoCode::open_failed, "cannot write contrastive set: " + path);
    out.write(kCxMagic, sizeof(kCxMagic));
    auto put = [&out](const auto& v) { out.write(reinterpret_cast<const char*>(&v), sizeof(v)); };
    put(kCxVersion);
    put(static_cast<uint32_t>(d_h));
    put(static_cast<uint8_t>(merged_mode ? 1 : 0));
    put(static_cast<uint64_t>(examples.size()));
    for (const auto& ex : examples) {
        out.write(reinterpret_cast<const char*>(ex.query.data()),
                  static_cast<std::streamsize>(ex.query.size() * sizeof(float)));
        write_sample(out, ex.positive);
        put(static_cast<uint8_t>(ex.negatives.size()));
        for (const auto& s : ex.negatives) write_sample(out, s);
    }
    if (!out) throw IoError(IoCode::write_failed, "contrastive set write failed: " + path);
}

std::pair<std::vector<ContrastiveExample>, bool> load_contrastive_set(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(IoCode::open_failed, "cannot read contrastive set: " + path);
    char magic[sizeof(kCxMagic)];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kCxMagic, sizeof(kCxMagic)) != 0) {
        throw IoError(IoCode::bad_magic, "not a contrastive set: " + path);
    }
    auto get = [&in, &path](auto& v) {
        in.read(reinterpret_cast<char*>(&v), sizeof(v));
        if (!in) throw IoError(IoCode::truncated, "contrastive set truncated: " + path);
    };
    uint32_t version = 0, d_h = 0;
    uint8_t merged = 0;
    uint64_t count = 0;
    get(version);
    if (version != kCxVersion) {
        throw IoError(IoCode::bad_version, "unsupported contrastive set version: " + path);
    }
    get(d_h);
    get(merged);
    get(count);
    std::vector<ContrastiveExample> examples;
    examples.reserve(count);
    for (uint64_t i = 0; i < count; ++i) {
        ContrastiveExample ex;
        ex.query.resize(d_h);
        in.read(reinterpret_cast<char*>(ex.query.data()),
                static_cast<std::streamsize>(d_h * sizeof(float)));
        ex.positive = read_sample(in, d_h, path);
        uint8_t n_neg = 0;
        get(n_neg);
        ex.negatives.reserve(n_neg);
        for (uint8_t j = 0; j < n_neg; ++j) ex.negatives.push_back(read_sample(in, d_h, path));
        examples.push_back(std::move(ex));
    }
    return {std::move(examples), merged != 0};
}

double contrastive_loss(const RescorerParams& params, const ContrastiveExample& example,
                        const LmParams& lm, double tau, RescorerGrads* grads) {
    if (tau <= 0.0) throw ConfigError("contrastive_loss: tau must be positive");
    const size_t n_cand = 1 + example.negatives.size();
    if (example.positive.key.size() != params.d_h) {
        throw std::invalid_argument("contrastive_loss: example dimension mismatch");
    }

    std::vector<std::vector<double>> feats;
    feats.reserve(n_cand);
    std::vector<double> q(example.query.begin(), example.query.end());
    const auto feat_of = [&](const NeighborSample& s) {
        std::vector<double> key(s.key.begin(), s.key.end());
        const auto v = lm.value_embedding(s.value);
        return build_features(q, key, {v.data(), v.size()}, params.merged_mode, s.origin);
    };
    feats.push_back(feat_of(example.positive));
    for (const auto& s : example.negatives) feats.push_back(feat_of(s));

    std::vector<double> scores(n_cand);
    RescorerWorkspace ws;
    for (size_t j = 0; j < n_cand; ++j) {
        scores[j] = rescorer_forward(params, feats[j], ws) / tau;
    }
    const std::vector<double> p = softmax(scores);
    const double loss = -std::log(p[0]);

    if (grads) {
        for (size_t j = 0; j < n_cand; ++j) {
            const double d_score = (p[j] - (j == 0 ? 1.0 : 0.0)) / tau;
            rescorer_forward(params, feats[j], ws);  // restore activations for this candidate
            rescorer_backward(params, feats[j], ws, d_score, *grads);
        }
    }
    return loss;
}

std::pair<RescorerParams, RescorerTrainStats> train_rescorer(
    const std::vector<ContrastiveExample>& train_examples,
    const std::vector<ContrastiveExample>& dev_examples, const LmParams& lm, bool merged_mode,
    const RescorerTrainConfig& cfg) {
    if (train_examples.empty()) throw ConfigError("train_rescorer: no training examples");
    if (cfg.batch == 0) throw ConfigError("train_rescorer: batch must be positive");

    RescorerParams params = RescorerParams::init(lm.dims.hidden, merged_mode, cfg.seed);
    RescorerGrads grads(params);
    AdamW opt({cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay}, params.tensors());

    const auto dev_loss = [&](const RescorerParams& p) {
        if (dev_examples.empty()) return 0.0;
        double total = 0.0;
        for (const auto& ex : dev_examples) total += contrastive_loss(p, ex, lm, cfg.tau);
        return total / static_cast<double>(dev_examples.size());
    };

    RescorerTrainStats stats;
    stats.initial_dev_loss = dev_loss(params);
    stats.best_dev_loss = stats.initial_dev_loss;
    RescorerParams best = params;
    size_t stall = 0;
    bool stop = false;

    Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<size_t> order(train_examples.size());
    std::iota(order.begin(), order.end(), size_t{0});

    for (size_t epoch = 0; epoch < cfg.max_epochs && !stop; ++epoch) {
        rng.shuffle(order);
        size_t done = 0;
        while (done < order.size() && !stop) {
            const size_t take = std::min(cfg.batch, order.size() - done);
            grads.zero();
            for (size_t b = 0; b < take; ++b) {
                contrastive_loss(params, train_examples[order[done + b]], lm, cfg.tau, &grads);
            }
            for (const Tensor* g : grads.tensors()) {
                auto* t = const_cast<Tensor*>(g);
                for (double& v : t->data) v /= static_cast<double>(take);
            }
            opt.step(params.tensors(), grads.tensors());
            done += take;
            ++stats.steps;

            if (!dev_examples.empty() && stats.steps % cfg.log_interval == 0) {
                const double loss = dev_loss(params);
                ++stats.dev_evals;
                if (loss < stats.best_dev_loss) {
                    stats.best_dev_loss = loss;
                    best = params;
                    stall = 0;
                } else if (++stall >= cfg.patience) {
                    stop = true;
                }
            }
        }
    }
    // If training never reached a dev evaluation, keep the final weights.
    if (stats.dev_evals == 0) {
        best = params;
        stats.best_dev_loss = dev_loss(params);
    }
    return {std::move(best), stats};
}

}  // namespace knnlm
