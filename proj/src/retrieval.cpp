#include "knnlm/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <queue>

#include "knnlm/errors.hpp"
#include "knnlm/kernels.hpp"
#include "knnlm/parallel.hpp"
#include "knnlm/rng.hpp"

namespace knnlm {

namespace {

constexpr size_t kRowBlock = 4096;
constexpr size_t kQueryChunk = 64;
// The f32 scan pre-selects this many extra candidates before the f64
// re-rank, so rounding differences at the top-k boundary cannot drop a
// true neighbor.
constexpr size_t kOverfetch = 32;

struct Candidate {
    float score;  // l2sq, or negated dot so that smaller is always better
    uint64_t index;
};

struct CandidateWorse {
    bool operator()(const Candidate& a, const Candidate& b) const {
        if (a.score != b.score) return a.score < b.score;
        return a.index < b.index;
    }
};

/// Bounded worst-on-top selection of the f32 scan results.
class TopK {
public:
    explicit TopK(size_t cap) : cap_(cap) {}

    void offer(float score, uint64_t index) {
        if (heap_.size() < cap_) {
            heap_.push({score, index});
            return;
        }
        const Candidate& worst = heap_.top();
        if (score < worst.score || (score == worst.score && index < worst.index)) {
            heap_.pop();
            heap_.push({score, index});
        }
    }

    float threshold() const {
        return heap_.size() < cap_ ? std::numeric_limits<float>::infinity() : heap_.top().score;
    }

    std::vector<Candidate> drain() {
        std::vector<Candidate> out;
        out.reserve(heap_.size());
        while (!heap_.empty()) {
            out.push_back(heap_.top());
            heap_.pop();
        }
        return out;
    }

private:
    size_t cap_;
    std::priority_queue<Candidate, std::vector<Candidate>, CandidateWorse> heap_;
};

double l2sq_f64_of_f32(const float* a, const float* b, size_t n) {
    double s = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        s += d * d;
    }
    return s;
}

double dot_f64_of_f32(const float* a, const float* b, size_t n) {
    double s = 0.0;
    for (size_t i = 0; i < n; ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return s;
}

/// f64 re-rank of the f32-selected candidates; fills final Neighborhood.
void finalize(const Datastore& store, std::span<const float> query, size_t k, Metric metric,
              Origin origin, std::vector<Candidate> cands, Neighborhood& out) {
    struct Scored {
        double rank_key;
        uint64_t index;
        double s;
        double metric_score;
    };
    std::vector<Scored> scored;
    scored.reserve(cands.size());
    for (const Candidate& c : cands) {
        const float* row = store.key(c.index);
        const double s = l2sq_f64_of_f32(query.data(), row, query.size());
        double metric_score, rank_key;
        if (metric == Metric::l2) {
            metric_score = s;
            rank_key = s;
        } else {
            metric_score = dot_f64_of_f32(query.data(), row, query.size());
            rank_key = -metric_score;
        }
        scored.push_back({rank_key, c.index, s, metric_score});
    }
    std::sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
        if (a.rank_key != b.rank_key) return a.rank_key < b.rank_key;
        return a.index < b.index;
    });
    if (scored.size() > k) scored.resize(k);

    out.query.assign(query.begin(), query.end());
    out.metric = metric;
    out.requested_k = k;
    out.neighbors.clear();
    out.neighbors.reserve(scored.size());
    for (const Scored& s : scored) {
        out.neighbors.push_back(
            {&store, s.index, store.value(s.index), s.metric_score, s.s, origin});
    }
}

void check_query(const Datastore& store, std::span<const float> query, size_t k) {
    if (query.size() != store.dim()) {
        throw std::invalid_argument("knn: query dimension does not match datastore");
    }
    if (k == 0) throw std::invalid_argument("knn: k must be positive");
}

}  // namespace

Neighborhood knn_exact(const Datastore& store, std::span<const float> query, size_t k,
                       Metric metric, Origin origin) {
    auto hoods = knn_exact_batch(store, query.data(), 1, k, metric, origin);
    return std::move(hoods[0]);
}

std::vector<Neighborhood> knn_exact_batch(const Datastore& store, const float* queries,
                                          size_t n_queries, size_t k, Metric metric,
                                          Origin origin) {
    const size_t d = store.dim();
    check_query(store, {queries, d}, k);
    std::vector<Neighborhood> out(n_queries);
    if (n_queries == 0) return out;

    const size_t cap = std::min<size_t>(k + kOverfetch, store.size());
    const size_t n_chunks = (n_queries + kQueryChunk - 1) / kQueryChunk;

    parallel_for(
        n_chunks,
        [&](size_t chunk_begin, size_t chunk_end) {
            std::vector<float> scores(kRowBlock);
            for (size_t c = chunk_begin; c < chunk_end; ++c) {
                const size_t q_begin = c * kQueryChunk;
                const size_t q_end = std::min(n_queries, q_begin + kQueryChunk);
                std::vector<TopK> heaps;
                heaps.reserve(q_end - q_begin);
                for (size_t q = q_begin; q < q_end; ++q) heaps.emplace_back(cap);

                const auto& K = kernels::ops();
                for (uint64_t row = 0; row < store.size(); row += kRowBlock) {
                    const size_t block = std::min<uint64_t>(kRowBlock, store.size() - row);
                    const float* rows = store.key(row);
                    for (size_t q = q_begin; q < q_end; ++q) {
                        const float* qv = queries + q * d;
                        if (metric == Metric::l2) {
                            K.l2sq_scan_f32(qv, rows, block, d, scores.data());
                        } else {
                            K.dot_scan_f32(qv, rows, block, d, scores.data());
                            for (size_t j = 0; j < block; ++j) scores[j] = -scores[j];
                        }
                        TopK& heap = heaps[q - q_begin];
                        const float thr = heap.threshold();
                        for (size_t j = 0; j < block; ++j) {
                            if (scores[j] <= thr) heap.offer(scores[j], row + j);
                        }
                    }
                }
                for (size_t q = q_begin; q < q_end; ++q) {
                    finalize(store, {queries + q * d, d}, k, metric, origin,
                             heaps[q - q_begin].drain(), out[q]);
                }
            }
        },
        /*min_per_thread=*/1);
    return out;
}

// ---------------------------------------------------------------------------
// IVF

namespace {

/// Index of the nearest centroid by f32 squared L2, ties to the lowest id.
uint32_t nearest_centroid(const float* key, const std::vector<float>& centroids, size_t n_list,
                          size_t d, std::vector<float>& buf) {
    kernels::ops().l2sq_scan_f32(key, centroids.data(), n_list, d, buf.data());
    uint32_t best = 0;
    for (uint32_t c = 1; c < n_list; ++c) {
        if (buf[c] < buf[best]) best = c;
    }
    return best;
}

}  // namespace

IvfIndex build_ivf(const Datastore& store, size_t n_list, uint64_t seed) {
    if (n_list == 0 || n_list > store.size()) {
        throw ConfigError("build_ivf: n_list must be in [1, datastore size]");
    }
    const size_t d = store.dim();
    const size_t n = store.size();

    IvfIndex index;
    index.n_list = static_cast<uint32_t>(n_list);
    index.dim = static_cast<uint32_t>(d);
    index.seed = seed;
    index.store = &store;
    index.store_path = store.path();
    index.store_checksum = store.file_checksum();

    Rng rng(seed);
    index.centroids.resize(n_list * d);
    const auto picks = rng.sample_distinct(n, n_list);
    for (size_t c = 0; c < picks.size(); ++c) {
        std::memcpy(index.centroids.data() + c * d, store.key(picks[c]), d * sizeof(float));
    }

    std::vector<uint32_t> assign(n);
    std::vector<double> sums(n_list * d);
    std::vector<uint64_t> counts(n_list);
    for (int iter = 0; iter < 20; ++iter) {
        parallel_for(n, [&](size_t begin, size_t end) {
            std::vector<float> buf(n_list);
            for (size_t i = begin; i < end; ++i) {
                assign[i] = nearest_centroid(store.key(i), index.centroids, n_list, d, buf);
            }
        });
        // Accumulate means in f64 and in fixed row order.
        std::fill(sums.begin(), sums.end(), 0.0);
        std::fill(counts.begin(), counts.end(), 0);
        for (size_t i = 0; i < n; ++i) {
            double* dst = sums.data() + static_cast<size_t>(assign[i]) * d;
            const float* src = store.key(i);
            for (size_t j = 0; j < d; ++j) dst[j] += static_cast<double>(src[j]);
            ++counts[assign[i]];
        }
        for (size_t c = 0; c < n_list; ++c) {
            if (counts[c] == 0) continue;  // empty cell keeps its centroid
            const double inv = 1.0 / static_cast<double>(counts[c]);
            float* dst = index.centroids.data() + c * d;
            const double* src = sums.data() + c * d;
            for (size_t j = 0; j < d; ++j) dst[j] = static_cast<float>(src[j] * inv);
        }
    }

    index.lists.assign(n_list, {});
    parallel_for(n, [&](size_t begin, size_t end) {
        std::vector<float> buf(n_list);
        for (size_t i = begin; i < end; ++i) {
            assign[i] = nearest_centroid(store.key(i), index.centroids, n_list, d, buf);
        }
    });
    for (size_t i = 0; i < n; ++i) index.lists[assign[i]].push_back(i);
    return index;
}

namespace {
constexpr char kIvfMagic[7] = {'K', 'N', 'N', 'I', 'V', 'F', '1'};
constexpr uint32_t kIvfVersion = 1;
}  // namespace

void save_ivf(const IvfIndex& index, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(IoCode::open_failed, "cannot write ivf index: " + path);
    out.write(kIvfMagic, sizeof(kIvfMagic));
    auto put = [&out](const auto& v) { out.write(reinterpret_cast<const char*>(&v), sizeof(v)); };
    put(kIvfVersion);
    put(index.n_list);
    put(index.dim);
    put(index.seed);
    const uint16_t path_len = static_cast<uint16_t>(std::min<size_t>(index.store_path.size(), 65535));
    put(path_len);
    out.write(index.store_path.data(), path_len);
    put(index.store_checksum);
    out.write(reinterpret_cast<const char*>(index.centroids.data()),
              static_cast<std::streamsize>(index.centroids.size() * sizeof(float)));
    for (const auto& list : index.lists) put(static_cast<uint64_t>(list.size()));
    for (const auto& list : index.lists) {
        out.write(reinterpret_cast<const char*>(list.data()),
                  static_cast<std::streamsize>(list.size() * sizeof(uint64_t)));
    }
    if (!out) throw IoError(IoCode::write_failed, "ivf write failed: " + path);
}

IvfIndex load_ivf(const std::string& path, const Datastore& store) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(IoCode::open_failed, "cannot read ivf index: " + path);
    char magic[sizeof(kIvfMagic)];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kIvfMagic, sizeof(kIvfMagic)) != 0) {
        throw IoError(IoCode::bad_magic, "not an ivf index: " + path);
    }
    auto get = [&in, &path](auto& v) {
        in.read(reinterpret_cast<char*>(&v), sizeof(v));
        if (!in) throw IoError(IoCode::truncated, "ivf index truncated: " + path);
    };
    uint32_t version = 0;
    get(version);
    if (version != kIvfVersion) throw IoError(IoCode::bad_version, "unsupported ivf version: " + path);

    IvfIndex index;
    get(index.n_list);
    get(index.dim);
    get(index.seed);
    uint16_t path_len = 0;
    get(path_len);
    index.store_path.resize(path_len);
    in.read(index.store_path.data(), path_len);
    get(index.store_checksum);
    if (index.dim != store.dim()) {
        throw IoError(IoCode::bad_layout, "ivf dimension does not match datastore: " + path);
    }
    if (index.store_checksum != store.file_checksum()) {
        throw IoError(IoCode::checksum_mismatch, "ivf index was built for a different datastore: " + path);
    }
    index.centroids.resize(static_cast<size_t>(index.n_list) * index.dim);
    in.read(reinterpret_cast<char*>(index.centroids.data()),
            static_cast<std::streamsize>(index.centroids.size() * sizeof(float)));
    std::vector<uint64_t> lengths(index.n_list);
    in.read(reinterpret_cast<char*>(lengths.data()),
            static_cast<std::streamsize>(lengths.size() * sizeof(uint64_t)));
    if (!in) throw IoError(IoCode::truncated, "ivf index truncated: " + path);
    index.lists.resize(index.n_list);
    uint64_t total = 0;
    for (size_t c = 0; c < index.n_list; ++c) {
        index.lists[c].resize(lengths[c]);
        in.read(reinterpret_cast<char*>(index.lists[c].data()),
                static_cast<std::streamsize>(lengths[c] * sizeof(uint64_t)));
        total += lengths[c];
    }
    if (!in) throw IoError(IoCode::truncated, "ivf index truncated: " + path);
    if (total != store.size()) {
        throw IoError(IoCode::bad_layout, "ivf lists do not cover the datastore: " + path);
    }
    std::vector<bool> seen(store.size(), false);
    for (const auto& list : index.lists) {
        for (uint64_t i : list) {
            if (i >= store.size() || seen[i]) {
                throw IoError(IoCode::bad_layout, "ivf lists are not a partition: " + path);
            }
            seen[i] = true;
        }
    }
    index.store = &store;
    return index;
}

Neighborhood knn_ivf(const IvfIndex& index, std::span<const float> query, size_t k, size_t n_probe,
                     Metric metric, Origin origin) {
    auto hoods = knn_ivf_batch(index, query.data(), 1, k, n_probe, metric, origin);
    return std::move(hoods[0]);
}

std::vector<Neighborhood> knn_ivf_batch(const IvfIndex& index, const float* queries,
                                        size_t n_queries, size_t k, size_t n_probe, Metric metric,
                                        Origin origin) {
    if (!index.store) throw std::invalid_argument("knn_ivf: index is not bound to a datastore");
    const Datastore& store = *index.store;
    const size_t d = store.dim();
    check_query(store, {queries, d}, k);
    if (n_probe == 0 || n_probe > index.n_list) {
        throw std::invalid_argument("knn_ivf: n_probe must be in [1, n_list]");
    }

    std::vector<Neighborhood> out(n_queries);
    const size_t cap_base = std::min<size_t>(k + kOverfetch, store.size());

    parallel_for(
        n_queries,
        [&](size_t begin, size_t end) {
            const auto& K = kernels::ops();
            std::vector<float> cdist(index.n_list);
            std::vector<uint32_t> order(index.n_list);
            std::vector<float> scores;
            for (size_t q = begin; q < end; ++q) {
                const float* qv = queries + q * d;
                // Probe order under the query metric, ties by centroid id.
                if (metric == Metric::l2) {
                    K.l2sq_scan_f32(qv, index.centroids.data(), index.n_list, d, cdist.data());
                } else {
                    K.dot_scan_f32(qv, index.centroids.data(), index.n_list, d, cdist.data());
                    for (auto& v : cdist) v = -v;
                }
                std::iota(order.begin(), order.end(), 0u);
                std::sort(order.begin(), order.end(), [&](uint32_t a, uint32_t b) {
                    if (cdist[a] != cdist[b]) return cdist[a] < cdist[b];
                    return a < b;
                });

                TopK heap(cap_base);
                for (size_t p = 0; p < n_probe; ++p) {
                    const auto& list = index.lists[order[p]];
                    if (list.empty()) continue;
                    scores.resize(list.size());
                    for (size_t j = 0; j < list.size(); ++j) {
                        const float* row = store.key(list[j]);
                        scores[j] = metric == Metric::l2 ? K.l2sq_f32(qv, row, d)
                                                         : -K.dot_f32(qv, row, d);
                    }
                    const float thr = heap.threshold();
                    for (size_t j = 0; j < list.size(); ++j) {
                        if (scores[j] <= thr) heap.offer(scores[j], list[j]);
                    }
                }
                finalize(store, {qv, d}, k, metric, origin, heap.drain(), out[q]);
            }
        },
        /*min_per_thread=*/1);
    return out;
}

// ---------------------------------------------------------------------------

std::vector<double> knn_probability(const Neighborhood& hood, size_t vocab_size,
                                    const std::vector<double>* rescored) {
    if (hood.neighbors.empty()) throw std::invalid_argument("knn_probability: empty neighborhood");
    if (rescored && rescored->size() != hood.neighbors.size()) {
        throw std::invalid_argument("knn_probability: rescored length mismatch");
    }
    double amax = -std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < hood.neighbors.size(); ++i) {
        const double a = rescored ? (*rescored)[i] : -hood.neighbors[i].s;
        amax = std::max(amax, a);
    }
    std::vector<double> dist(vocab_size, 0.0);
    double total = 0.0;
    for (size_t i = 0; i < hood.neighbors.size(); ++i) {
        const double a = rescored ? (*rescored)[i] : -hood.neighbors[i].s;
        const TokenId v = hood.neighbors[i].value;
        if (v >= vocab_size) throw std::invalid_argument("knn_probability: value out of vocab");
        const double w = std::exp(a - amax);
        dist[v] += w;
        total += w;
    }
    const double inv = 1.0 / total;
    for (double& p : dist) p *= inv;
    return dist;
}

Neighborhood merge_neighborhoods(const Neighborhood& kp, const Neighborhood& ka) {
    if (kp.query.size() != ka.query.size() ||
        std::memcmp(kp.query.data(), ka.query.data(), kp.query.size() * sizeof(float)) != 0) {
        throw std::invalid_argument("merge_neighborhoods: queries differ");
    }
    if (kp.metric != ka.metric) {
        throw std::invalid_argument("merge_neighborhoods: metrics differ");
    }
    Neighborhood merged;
    merged.query = kp.query;
    merged.metric = kp.metric;
    merged.requested_k = kp.requested_k + ka.requested_k;
    merged.neighbors.reserve(kp.neighbors.size() + ka.neighbors.size());
    merged.neighbors.insert(merged.neighbors.end(), kp.neighbors.begin(), kp.neighbors.end());
    merged.neighbors.insert(merged.neighbors.end(), ka.neighbors.begin(), ka.neighbors.end());
    return merged;
}

Neighborhood RetrievalBackend::query(std::span<const float> q, size_t k, Metric metric) const {
    if (ivf) return knn_ivf(*ivf, q, k, n_probe, metric, origin);
    return knn_exact(*store, q, k, metric, origin);
}

std::vector<Neighborhood> RetrievalBackend::batch(const float* queries, size_t n_queries, size_t k,
                                                  Metric metric) const {
    if (ivf) return knn_ivf_batch(*ivf, queries, n_queries, k, n_probe, metric, origin);
    return knn_exact_batch(*store, queries, n_queries, k, metric, origin);
}

}  // namespace knnlm
