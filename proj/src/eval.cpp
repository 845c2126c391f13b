#include "knnlm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "knnlm/errors.hpp"
#include "knnlm/parallel.hpp"

namespace knnlm {

std::vector<double> interpolate(std::span<const double> p_knn, std::span<const double> p_lm,
                                double lambda) {
    if (p_knn.size() != p_lm.size()) {
        throw std::invalid_argument("interpolate: distributions differ in size");
    }
    if (!(lambda >= 0.0 && lambda <= 1.0)) {
        throw ConfigError("interpolate: lambda must be in [0, 1]");
    }
    std::vector<double> out(p_knn.size());
    for (size_t i = 0; i < out.size(); ++i) {
        out[i] = lambda * p_knn[i] + (1.0 - lambda) * p_lm[i];
    }
    return out;
}

GridSpec GridSpec::defaults() {
    GridSpec g;
    for (size_t k = 1; k <= 512; k *= 2) g.k_grid.push_back(k);
    g.k_grid.push_back(1000);
    g.lambda_grid.push_back(0.0);
    for (double l = 0.01; l < 0.98; l *= 2.0) g.lambda_grid.push_back(l);
    g.lambda_grid.push_back(0.98);
    return g;
}

void GridSpec::validate() const {
    if (k_grid.empty() || lambda_grid.empty()) throw ConfigError("grid: empty axis");
    for (size_t i = 0; i < k_grid.size(); ++i) {
        if (k_grid[i] == 0) throw ConfigError("grid: k values must be positive");
        if (i > 0 && k_grid[i] <= k_grid[i - 1]) throw ConfigError("grid: k values must ascend");
    }
    for (size_t i = 0; i < lambda_grid.size(); ++i) {
        if (!(lambda_grid[i] >= 0.0 && lambda_grid[i] <= 1.0)) {
            throw ConfigError("grid: lambda values must lie in [0, 1]");
        }
        if (i > 0 && lambda_grid[i] <= lambda_grid[i - 1]) {
            throw ConfigError("grid: lambda values must ascend");
        }
    }
}

void embed_positions(const LmParams& lm, const AdapterParams* adapters, const TokenSequence& seq,
                     TapPoint tap, size_t n, float* queries_out, double* p_lm_truth_out) {
    const size_t d_h = lm.dims.hidden;
    const size_t N = lm.dims.window;
    parallel_for(n, [&](size_t begin, size_t end) {
        LmWorkspace ws;
        std::vector<TokenId> win(N);
        for (size_t t = begin; t < end; ++t) {
            context_window(seq.ids, t, N, win.data());
            lm_forward_ws(lm, adapters, win, ws, /*want_dist=*/p_lm_truth_out != nullptr);
            if (queries_out) {
                const auto emb = tap_activation(ws, tap);
                for (size_t j = 0; j < d_h; ++j) {
                    queries_out[t * d_h + j] = static_cast<float>(emb[j]);
                }
            }
            if (p_lm_truth_out) p_lm_truth_out[t] = ws.probs[seq.ids[t]];
        }
    });
}

namespace {

/// Concatenation of the per-store prefixes of a merged neighborhood
/// (boundary = size of the pretraining half), rebuilt as index pairs so
/// scoring can walk them without copying neighbors.
struct HoodView {
    const Neighborhood* hood = nullptr;
    size_t half_boundary = 0;  // = hood->size() for single-store retrieval
    bool merged = false;

    template <typename Fn>
    void for_prefix(size_t k, Fn&& fn) const {
        if (!merged) {
            const size_t n = std::min(k, hood->size());
            for (size_t i = 0; i < n; ++i) fn(i);
            return;
        }
        const auto [kp, ka] = merged_k_split(k);
        const size_t np = std::min(kp, half_boundary);
        const size_t na = std::min(ka, hood->size() - half_boundary);
        for (size_t i = 0; i < np; ++i) fn(i);
        for (size_t i = 0; i < na; ++i) fn(half_boundary + i);
    }
};

double truth_mass_view(const HoodView& view, size_t k, TokenId truth,
                       const std::vector<double>* rescored, bool* hit_out, size_t* size_out) {
    double amax = -std::numeric_limits<double>::infinity();
    size_t count = 0;
    view.for_prefix(k, [&](size_t i) {
        const double a = rescored ? (*rescored)[i] : -view.hood->neighbors[i].s;
        amax = std::max(amax, a);
        ++count;
    });
    double num = 0.0, total = 0.0;
    bool hit = false;
    view.for_prefix(k, [&](size_t i) {
        const double a = rescored ? (*rescored)[i] : -view.hood->neighbors[i].s;
        const double w = std::exp(a - amax);
        if (view.hood->neighbors[i].value == truth) {
            num += w;
            hit = true;
        }
        total += w;
    });
    if (hit_out) *hit_out = hit;
    if (size_out) *size_out = count;
    return count == 0 ? 0.0 : num * (1.0 / total);
}

struct RetrievedBatch {
    std::vector<Neighborhood> hoods;
    std::vector<std::vector<double>> sprime;  // per hood, when rescoring
    size_t half_boundary = 0;
    bool merged = false;

    HoodView view(size_t t) const { return {&hoods[t], merged ? half_boundary : hoods[t].size(), merged}; }
};

RetrievedBatch retrieve_batch(const EvalComponents& c, const float* queries, size_t n, size_t k) {
    RetrievedBatch out;
    if (c.backends.empty()) throw ConfigError("evaluate: retrieval requested without a datastore");
    if (c.backends.size() == 1) {
        out.hoods = c.backends[0].batch(queries, n, k, c.metric);
    } else {
        const auto [kp, ka] = merged_k_split(k);
        out.merged = true;
        if (kp == 0) {
            out.hoods = c.backends[1].batch(queries, n, ka, c.metric);
            out.half_boundary = 0;
        } else {
            out.hoods = c.backends[0].batch(queries, n, kp, c.metric);
            auto adapt = c.backends[1].batch(queries, n, ka, c.metric);
            // every hood from one store has the same size: min(kp, d_s)
            out.half_boundary = out.hoods[0].size();
            for (size_t t = 0; t < n; ++t) {
                out.hoods[t] = merge_neighborhoods(out.hoods[t], adapt[t]);
            }
        }
    }
    if (c.rescorer) {
        const bool merged_mode = c.rescorer->merged_mode;
        out.sprime.resize(n);
        parallel_for(n, [&](size_t begin, size_t end) {
            for (size_t t = begin; t < end; ++t) {
                out.sprime[t] = rescore(*c.rescorer, out.hoods[t], *c.lm, merged_mode).sprime;
            }
        });
    }
    return out;
}

}  // namespace

EvalResult evaluate(const EvalComponents& c, const TokenSequence& tokens, size_t k, double lambda,
                    const EvalOptions& opts) {
    if (!c.lm) throw ConfigError("evaluate: missing model");
    if (tokens.size() == 0) throw ConfigError("evaluate: empty token sequence");
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("evaluate: lambda out of range");
    if (k == 0 && lambda > 0.0) throw ConfigError("evaluate: k = 0 requires lambda = 0");

    const size_t n = opts.token_limit == 0 ? tokens.size() : std::min(opts.token_limit, tokens.size());
    const size_t d_h = c.lm->dims.hidden;
    const bool want_knn = k > 0 && !c.backends.empty();

    std::vector<float> queries(want_knn ? n * d_h : 0);
    std::vector<double> p_lm(n);
    embed_positions(*c.lm, c.adapters, tokens, c.tap, n, want_knn ? queries.data() : nullptr,
                    p_lm.data());

    EvalResult result;
    result.records.resize(n);

    if (want_knn) {
        const RetrievedBatch batch = retrieve_batch(c, queries.data(), n, k);
        parallel_for(n, [&](size_t begin, size_t end) {
            for (size_t t = begin; t < end; ++t) {
                EvalRecord& r = result.records[t];
                r.position = t;
                r.truth = tokens.ids[t];
                r.p_lm = p_lm[t];
                const auto view = batch.view(t);
                const std::vector<double>* sp = batch.sprime.empty() ? nullptr : &batch.sprime[t];
                r.p_knn = truth_mass_view(view, k, r.truth, sp, &r.recall_hit, &r.neighborhood_size);
            }
        });
    } else {
        for (size_t t = 0; t < n; ++t) {
            result.records[t] = {t, tokens.ids[t], p_lm[t], 0.0, false, 0};
        }
    }

    double nll = 0.0;
    for (size_t t = 0; t < n; ++t) {
        const EvalRecord& r = result.records[t];
        // An empty neighborhood degrades to the pure model for that token.
        const double p = (want_knn && r.neighborhood_size == 0)
                             ? r.p_lm
                             : lambda * r.p_knn + (1.0 - lambda) * r.p_lm;
        nll += -std::log(p);
    }
    result.perplexity = std::exp(nll / static_cast<double>(n));
    return result;
}

double recall(const std::vector<EvalRecord>& records) {
    if (records.empty()) throw std::invalid_argument("recall: no records");
    size_t hits = 0;
    for (const auto& r : records) hits += r.recall_hit ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(records.size());
}

double precision(const std::vector<EvalRecord>& records) {
    if (records.empty()) throw std::invalid_argument("precision: no records");
    size_t wins = 0;
    for (const auto& r : records) wins += r.p_lm < r.p_knn ? 1 : 0;
    return static_cast<double>(wins) / static_cast<double>(records.size());
}

GridResult grid_search(const EvalComponents& c, const TokenSequence& dev, const GridSpec& grid,
                       const EvalOptions& opts) {
    grid.validate();
    if (!c.lm) throw ConfigError("grid_search: missing model");
    if (dev.size() == 0) throw ConfigError("grid_search: empty dev tokens");

    const size_t n = opts.token_limit == 0 ? dev.size() : std::min(opts.token_limit, dev.size());
    const size_t d_h = c.lm->dims.hidden;
    const size_t k_max = grid.k_grid.back();

    std::vector<float> queries(n * d_h);
    std::vector<double> p_lm(n);
    embed_positions(*c.lm, c.adapters, dev, c.tap, n, queries.data(), p_lm.data());

    const RetrievedBatch batch = retrieve_batch(c, queries.data(), n, k_max);

    // p_knn(truth) per (position, k); prefixes of the k_max retrieval.
    const size_t n_k = grid.k_grid.size();
    std::vector<double> p_knn(n * n_k);
    parallel_for(n, [&](size_t begin, size_t end) {
        for (size_t t = begin; t < end; ++t) {
            const auto view = batch.view(t);
            const std::vector<double>* sp = batch.sprime.empty() ? nullptr : &batch.sprime[t];
            for (size_t ki = 0; ki < n_k; ++ki) {
                p_knn[t * n_k + ki] =
                    truth_mass_view(view, grid.k_grid[ki], dev.ids[t], sp, nullptr, nullptr);
            }
        }
    });

    GridResult result;
    for (size_t ki = 0; ki < n_k; ++ki) {
        for (double lambda : grid.lambda_grid) {
            double nll = 0.0;
            for (size_t t = 0; t < n; ++t) {
                nll += -std::log(lambda * p_knn[t * n_k + ki] + (1.0 - lambda) * p_lm[t]);
            }
            result.table.push_back({grid.k_grid[ki], lambda, std::exp(nll / static_cast<double>(n))});
        }
    }
    // Strict < keeps the smallest k, then smallest lambda, on ties.
    size_t best = 0;
    for (size_t i = 1; i < result.table.size(); ++i) {
        if (result.table[i].perplexity < result.table[best].perplexity) best = i;
    }
    result.best_k = result.table[best].k;
    result.best_lambda = result.table[best].lambda;
    result.best_perplexity = result.table[best].perplexity;
    return result;
}

}  // namespace knnlm
