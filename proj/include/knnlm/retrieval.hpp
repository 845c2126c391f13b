#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "knnlm/datastore.hpp"

namespace knnlm {

enum class Origin : uint8_t { pretrain = 0, adapt = 1 };

struct Neighbor {
    const Datastore* store = nullptr;
    uint64_t index = 0;
    TokenId value = 0;
    /// Ranking key under the retrieval metric, recomputed in f64 from the
    /// stored f32 values: squared L2 for Metric::l2, inner product for
    /// Metric::ip.
    double metric_score = 0.0;
    /// Squared L2 distance to the query. Neighbor weighting always uses
    /// this, regardless of the retrieval metric.
    double s = 0.0;
    Origin origin = Origin::pretrain;

    std::span<const float> key() const { return store->key_span(index); }
};

/// Ranked neighbor list. For a single-store retrieval the ranking is
/// strict under (metric, ascending index). A merged neighborhood is the
/// plain concatenation of its halves; ordering holds per origin.
struct Neighborhood {
    std::vector<float> query;
    Metric metric = Metric::l2;
    size_t requested_k = 0;
    std::vector<Neighbor> neighbors;

    size_t size() const { return neighbors.size(); }
};

/// Exact top-k scan. Candidates are pre-selected with the f32 kernels and
/// re-ranked in f64, ties broken by ascending datastore index. Returns
/// min(k, store size) neighbors.
Neighborhood knn_exact(const Datastore& store, std::span<const float> query, size_t k,
                       Metric metric, Origin origin = Origin::pretrain);

/// Batched exact search; one pass of the key matrix serves a whole block
/// of queries. Results are in query order and identical to per-query
/// knn_exact.
std::vector<Neighborhood> knn_exact_batch(const Datastore& store, const float* queries,
                                          size_t n_queries, size_t k, Metric metric,
                                          Origin origin = Origin::pretrain);

/// Inverted-file index: k-means coarse quantizer plus per-centroid posting
/// lists over a backing datastore.
struct IvfIndex {
    uint32_t n_list = 0;
    uint32_t dim = 0;
    uint64_t seed = 0;
    std::vector<float> centroids;             // n_list x dim
    std::vector<std::vector<uint64_t>> lists;  // entry indices per centroid
    const Datastore* store = nullptr;
    std::string store_path;
    uint64_t store_checksum = 0;
};

/// 20 k-means iterations, centroids seeded by sampling distinct keys.
/// Deterministic for a fixed seed.
IvfIndex build_ivf(const Datastore& store, size_t n_list, uint64_t seed);

void save_ivf(const IvfIndex& index, const std::string& path);
/// Loads and binds to `store`; the recorded backing-store checksum must
/// match or IoError(checksum_mismatch) is thrown.
IvfIndex load_ivf(const std::string& path, const Datastore& store);

/// Exact search restricted to the n_probe nearest centroids' lists. With
/// n_probe = n_list the result matches knn_exact exactly.
Neighborhood knn_ivf(const IvfIndex& index, std::span<const float> query, size_t k, size_t n_probe,
                     Metric metric, Origin origin = Origin::pretrain);

std::vector<Neighborhood> knn_ivf_batch(const IvfIndex& index, const float* queries,
                                        size_t n_queries, size_t k, size_t n_probe, Metric metric,
                                        Origin origin = Origin::pretrain);

/// Distribution over the vocabulary induced by the neighborhood:
/// p(w) proportional to sum_i 1[value_i = w] * exp(a_i), where a_i = -s_i
/// by default or a_i = rescored[i] when given. Tokens absent from the
/// neighborhood get probability zero.
std::vector<double> knn_probability(const Neighborhood& hood, size_t vocab_size,
                                    const std::vector<double>* rescored = nullptr);

/// Concatenates two neighborhoods for the same query (disjoint stores, no
/// deduplication, origin flags preserved).
Neighborhood merge_neighborhoods(const Neighborhood& kp, const Neighborhood& ka);

/// Uniform handle over exact or IVF-backed retrieval from one store.
struct RetrievalBackend {
    const Datastore* store = nullptr;
    const IvfIndex* ivf = nullptr;  // null = exact scan
    size_t n_probe = 0;
    Origin origin = Origin::pretrain;

    Neighborhood query(std::span<const float> q, size_t k, Metric metric) const;
    std::vector<Neighborhood> batch(const float* queries, size_t n_queries, size_t k,
                                    Metric metric) const;
};

}  // namespace knnlm
