#include "knnlm/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>
#include <span>

#include "doctest.h"
#include "knnlm/errors.hpp"
#include "knnlm/hash.hpp"
#include "knnlm/rng.hpp"

using namespace knnlm;
namespace fs = std::filesystem;

namespace {

Datastore make_store(std::vector<std::vector<float>> rows, std::vector<TokenId> values,
                     Metric metric = Metric::l2) {
    const uint32_t d = static_cast<uint32_t>(rows[0].size());
    std::vector<float> keys;
    for (const auto& r : rows) keys.insert(keys.end(), r.begin(), r.end());
    return Datastore::from_rows(std::move(keys), std::move(values), d, metric, TapPoint::h2_ln,
                                "test");
}

Datastore gaussian_store(size_t n, uint32_t d, uint64_t seed, size_t vocab = 100) {
    Rng rng(seed);
    std::vector<float> keys(n * d);
    std::vector<TokenId> values(n);
    for (auto& v : keys) v = static_cast<float>(rng.gaussian());
    for (auto& v : values) v = static_cast<TokenId>(rng.below(vocab));
    return Datastore::from_rows(std::move(keys), std::move(values), d, Metric::l2,
                                TapPoint::h2_ln, "test", vocab);
}

/// Independent oracle: full f64 sort by (metric, index).
std::vector<uint64_t> brute_force_topk(const Datastore& ds, std::span<const float> q, size_t k,
                                       Metric metric) {
    struct Entry {
        double key;
        uint64_t idx;
    };
    std::vector<Entry> entries;
    entries.reserve(ds.size());
    for (uint64_t i = 0; i < ds.size(); ++i) {
        const float* row = ds.key(i);
        double acc = 0;
        if (metric == Metric::l2) {
            for (size_t j = 0; j < q.size(); ++j) {
                const double dd = double(q[j]) - double(row[j]);
                acc += dd * dd;
            }
        } else {
            for (size_t j = 0; j < q.size(); ++j) acc += double(q[j]) * double(row[j]);
            acc = -acc;
        }
        entries.push_back({acc, i});
    }
    std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
        if (a.key != b.key) return a.key < b.key;
        return a.idx < b.idx;
    });
    std::vector<uint64_t> out;
    for (size_t i = 0; i < std::min(k, entries.size()); ++i) out.push_back(entries[i].idx);
    return out;
}

std::vector<uint64_t> indices_of(const Neighborhood& hood) {
    std::vector<uint64_t> out;
    for (const auto& n : hood.neighbors) out.push_back(n.index);
    return out;
}

}  // namespace

TEST_CASE("a stored key retrieves itself at distance zero") {
    const Datastore ds = make_store({{1, 0}, {0, 1}}, {3, 4});
    const std::vector<float> q{1, 0};
    const Neighborhood hood = knn_exact(ds, q, 2, Metric::l2);
    REQUIRE(hood.size() == 2);
    CHECK(hood.neighbors[0].index == 0);
    CHECK(hood.neighbors[0].s == 0.0);
    CHECK(hood.neighbors[1].index == 1);
    CHECK(hood.neighbors[1].s == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(hood.neighbors[0].value == 3);
}

TEST_CASE("k larger than the store returns everything") {
    const Datastore ds = make_store({{1, 0}, {0, 1}, {1, 1}}, {1, 2, 3});
    const std::vector<float> q{0.5, 0.5};
    CHECK(knn_exact(ds, q, 10, Metric::l2).size() == 3);
}

TEST_CASE("dimension mismatch and k=0 are rejected") {
    const Datastore ds = make_store({{1, 0}}, {1});
    const std::vector<float> q3{1, 0, 0};
    CHECK_THROWS_AS(knn_exact(ds, q3, 1, Metric::l2), std::invalid_argument);
    const std::vector<float> q{1, 0};
    CHECK_THROWS_AS(knn_exact(ds, q, 0, Metric::l2), std::invalid_argument);
}

TEST_CASE("inner-product retrieval ranks by dot but keeps squared-L2 weights") {
    const Datastore ds = make_store({{2, 0}, {1, 0}, {0, 3}}, {1, 2, 3});
    const std::vector<float> q{1, 0};
    const Neighborhood hood = knn_exact(ds, q, 3, Metric::ip);
    REQUIRE(hood.size() == 3);
    CHECK(hood.neighbors[0].index == 0);  // dot 2
    CHECK(hood.neighbors[1].index == 1);  // dot 1
    CHECK(hood.neighbors[2].index == 2);  // dot 0
    CHECK(hood.neighbors[0].metric_score == doctest::Approx(2.0));
    CHECK(hood.neighbors[0].s == doctest::Approx(1.0));  // |(1,0)-(2,0)|^2
    CHECK(hood.neighbors[1].s == doctest::Approx(0.0));
}

TEST_CASE("exact search matches the brute-force oracle") {
    const Datastore ds = gaussian_store(2000, 16, 77);
    Rng rng(78);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<float> q(16);
        for (auto& v : q) v = static_cast<float>(rng.gaussian());
        for (Metric m : {Metric::l2, Metric::ip}) {
            CHECK(indices_of(knn_exact(ds, q, 10, m)) == brute_force_topk(ds, q, 10, m));
        }
    }
}

TEST_CASE("ties break by ascending datastore index") {
    const Datastore ds = make_store({{1, 0}, {1, 0}, {1, 0}}, {1, 2, 3});
    const std::vector<float> q{1, 0};
    const auto hood = knn_exact(ds, q, 2, Metric::l2);
    CHECK(hood.neighbors[0].index == 0);
    CHECK(hood.neighbors[1].index == 1);
}

TEST_CASE("batch retrieval equals per-query retrieval") {
    const Datastore ds = gaussian_store(3000, 8, 5);
    Rng rng(6);
    const size_t nq = 150;
    std::vector<float> queries(nq * 8);
    for (auto& v : queries) v = static_cast<float>(rng.gaussian());
    const auto batch = knn_exact_batch(ds, queries.data(), nq, 7, Metric::ip);
    REQUIRE(batch.size() == nq);
    for (size_t i : {size_t{0}, size_t{13}, size_t{149}}) {
        const std::span<const float> q(queries.data() + i * 8, 8);
        const auto single = knn_exact(ds, q, 7, Metric::ip);
        CHECK(indices_of(batch[i]) == indices_of(single));
    }
}

TEST_CASE("l2 distances are non-decreasing with rank") {
    const Datastore ds = gaussian_store(500, 12, 9);
    Rng rng(10);
    std::vector<float> q(12);
    for (auto& v : q) v = static_cast<float>(rng.gaussian());
    const auto hood = knn_exact(ds, q, 50, Metric::l2);
    for (size_t i = 1; i < hood.size(); ++i) {
        CHECK(hood.neighbors[i].s >= hood.neighbors[i - 1].s);
    }
}

// --------------------------------------------------------------------------
// IVF

TEST_CASE("ivf with a single list holds every entry") {
    const Datastore ds = gaussian_store(100, 4, 11);
    const IvfIndex index = build_ivf(ds, 1, 3);
    REQUIRE(index.lists.size() == 1);
    CHECK(index.lists[0].size() == 100);
}

TEST_CASE("ivf separates two well-spread clusters") {
    Rng rng(13);
    std::vector<float> keys;
    std::vector<TokenId> values;
    for (int i = 0; i < 200; ++i) {
        const bool second = i >= 100;
        for (int j = 0; j < 4; ++j) {
            keys.push_back(static_cast<float>(rng.gaussian() * 0.05 + (second ? 8.0 : -8.0)));
        }
        values.push_back(second ? 1 : 0);
    }
    const Datastore ds = Datastore::from_rows(std::move(keys), std::move(values), 4, Metric::l2,
                                              TapPoint::h2_ln, "clusters");
    const IvfIndex index = build_ivf(ds, 2, 17);
    // each list pure with respect to cluster membership
    for (const auto& list : index.lists) {
        REQUIRE(!list.empty());
        const bool second = list[0] >= 100;
        for (uint64_t i : list) CHECK((i >= 100) == second);
    }
}

TEST_CASE("ivf build is deterministic for a fixed seed") {
    const Datastore ds = gaussian_store(400, 8, 21);
    const IvfIndex a = build_ivf(ds, 16, 5);
    const IvfIndex b = build_ivf(ds, 16, 5);
    CHECK(a.centroids == b.centroids);
    CHECK(a.lists == b.lists);
}

TEST_CASE("n_list larger than the store is rejected") {
    const Datastore ds = gaussian_store(10, 4, 23);
    CHECK_THROWS_AS(build_ivf(ds, 11, 1), ConfigError);
}

TEST_CASE("full probing reproduces exact search exactly") {
    const Datastore ds = gaussian_store(3000, 16, 31);
    const IvfIndex index = build_ivf(ds, 25, 7);
    Rng rng(32);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<float> q(16);
        for (auto& v : q) v = static_cast<float>(rng.gaussian());
        for (Metric m : {Metric::l2, Metric::ip}) {
            CHECK(indices_of(knn_ivf(index, q, 10, 25, m)) ==
                  indices_of(knn_exact(ds, q, 10, m)));
        }
    }
}

TEST_CASE("a query at a centroid with one probe stays in that cell") {
    const Datastore ds = gaussian_store(500, 8, 41);
    const IvfIndex index = build_ivf(ds, 8, 9);
    for (size_t c = 0; c < 8; ++c) {
        if (index.lists[c].empty()) continue;
        const std::span<const float> centroid(index.centroids.data() + c * 8, 8);
        const auto hood = knn_ivf(index, centroid, 5, 1, Metric::l2);
        const std::set<uint64_t> cell(index.lists[c].begin(), index.lists[c].end());
        for (const auto& n : hood.neighbors) CHECK(cell.count(n.index) == 1);
    }
}

TEST_CASE("partial probing keeps high overlap with exact search") {
    const Datastore ds = gaussian_store(10000, 16, 51);
    const IvfIndex index = build_ivf(ds, 64, 11);
    Rng rng(52);
    double overlap = 0;
    const int trials = 60;
    for (int t = 0; t < trials; ++t) {
        std::vector<float> q(16);
        for (auto& v : q) v = static_cast<float>(rng.gaussian());
        const auto approx = indices_of(knn_ivf(index, q, 10, 16, Metric::l2));
        const auto exact = indices_of(knn_exact(ds, q, 10, Metric::l2));
        const std::set<uint64_t> exact_set(exact.begin(), exact.end());
        size_t hits = 0;
        for (uint64_t i : approx) hits += exact_set.count(i);
        overlap += static_cast<double>(hits) / 10.0;
    }
    CHECK(overlap / trials >= 0.9);
}

TEST_CASE("ivf persistence round-trips and validates its backing store") {
    const auto dir = fs::temp_directory_path() / "knnlm_retrieval_test";
    fs::create_directories(dir);
    Datastore ds = gaussian_store(600, 8, 61);
    ds.save((dir / "store.knnds").string());
    const Datastore loaded_store = Datastore::load((dir / "store.knnds").string());

    const IvfIndex index = build_ivf(loaded_store, 12, 13);
    save_ivf(index, (dir / "index.knnivf").string());
    const IvfIndex back = load_ivf((dir / "index.knnivf").string(), loaded_store);
    CHECK(back.centroids == index.centroids);
    CHECK(back.lists == index.lists);
    CHECK(back.seed == index.seed);

    // byte-identical on re-save
    save_ivf(back, (dir / "index2.knnivf").string());
    CHECK(hash_file((dir / "index.knnivf").string()) ==
          hash_file((dir / "index2.knnivf").string()));

    // a different datastore fails the checksum gate
    Datastore other = gaussian_store(600, 8, 62);
    other.save((dir / "other.knnds").string());
    const Datastore other_loaded = Datastore::load((dir / "other.knnds").string());
    try {
        load_ivf((dir / "index.knnivf").string(), other_loaded);
        FAIL("expected checksum mismatch");
    } catch (const IoError& e) {
        CHECK(e.code == IoCode::checksum_mismatch);
    }
    fs::remove_all(dir);
}

// --------------------------------------------------------------------------
// neighborhood probability and merging

namespace {
Neighborhood hood_with(const Datastore& ds, std::vector<float> query,
                       std::vector<std::pair<uint64_t, double>> entries, Metric m = Metric::l2,
                       Origin origin = Origin::pretrain) {
    Neighborhood h;
    h.query = std::move(query);
    h.metric = m;
    h.requested_k = entries.size();
    for (auto [idx, s] : entries) {
        h.neighbors.push_back({&ds, idx, ds.value(idx), s, s, origin});
    }
    return h;
}
}  // namespace

TEST_CASE("knn_probability closed forms") {
    const Datastore ds = make_store({{0, 0}, {1, 1}, {2, 2}}, {5, 6, 5});
    const std::vector<float> q{0, 0};

    // single neighbor: all mass on its value
    auto h1 = hood_with(ds, q, {{0, 0.7}});
    auto p1 = knn_probability(h1, 10);
    CHECK(p1[5] == doctest::Approx(1.0).epsilon(1e-12));

    // equal distances, distinct values: an even split
    auto h2 = hood_with(ds, q, {{0, 0.3}, {1, 0.3}});
    auto p2 = knn_probability(h2, 10);
    CHECK(p2[5] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(p2[6] == doctest::Approx(0.5).epsilon(1e-12));

    // s = 0 vs s = ln 2: weights 1 and 1/2
    auto h3 = hood_with(ds, q, {{0, 0.0}, {1, std::log(2.0)}});
    auto p3 = knn_probability(h3, 10);
    CHECK(p3[5] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(p3[6] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

    // absent tokens get zero
    CHECK(p3[7] == 0.0);

    Neighborhood empty;
    CHECK_THROWS_AS(knn_probability(empty, 10), std::invalid_argument);
}

TEST_CASE("knn_probability sums to one on random neighborhoods") {
    const Datastore ds = gaussian_store(64, 4, 71, 12);
    Rng rng(72);
    for (int trial = 0; trial < 1000; ++trial) {
        Neighborhood h;
        h.query = {0, 0, 0, 0};
        h.metric = Metric::l2;
        const size_t n = 1 + rng.below(20);
        for (size_t i = 0; i < n; ++i) {
            const uint64_t idx = rng.below(64);
            const double s = rng.uniform() * 30.0;
            h.neighbors.push_back({&ds, idx, ds.value(idx), s, s, Origin::pretrain});
        }
        const auto p = knn_probability(h, 12);
        double sum = 0;
        for (double v : p) {
            CHECK(v >= 0.0);
            sum += v;
        }
        CHECK(std::fabs(sum - 1.0) < 1e-6);
    }
}

TEST_CASE("rescored weights with sprime = -s reproduce the default path") {
    const Datastore ds = gaussian_store(32, 4, 81, 12);
    Rng rng(82);
    Neighborhood h;
    h.query = {0, 0, 0, 0};
    std::vector<double> sprime;
    for (size_t i = 0; i < 12; ++i) {
        const uint64_t idx = rng.below(32);
        const double s = rng.uniform() * 10.0;
        h.neighbors.push_back({&ds, idx, ds.value(idx), s, s, Origin::pretrain});
        sprime.push_back(-s);
    }
    const auto base = knn_probability(h, 12);
    const auto rescored = knn_probability(h, 12, &sprime);
    for (size_t i = 0; i < base.size(); ++i) CHECK(std::fabs(base[i] - rescored[i]) < 1e-9);
}

TEST_CASE("merging concatenates with origins preserved") {
    const Datastore p_store = make_store({{0, 0}, {1, 1}}, {1, 2});
    const Datastore a_store = make_store({{0, 1}, {1, 0}}, {3, 4});
    const std::vector<float> q{0, 0};

    auto kp = hood_with(p_store, q, {{0, 0.1}, {1, 0.2}}, Metric::l2, Origin::pretrain);
    auto ka = hood_with(a_store, q, {{0, 0.05}}, Metric::l2, Origin::adapt);
    const auto merged = merge_neighborhoods(kp, ka);
    REQUIRE(merged.size() == 3);
    CHECK(merged.requested_k == 3);
    CHECK(merged.neighbors[0].origin == Origin::pretrain);
    CHECK(merged.neighbors[2].origin == Origin::adapt);
    CHECK(merged.neighbors[2].value == 3);

    // identity merge
    Neighborhood empty_a;
    empty_a.query = q;
    empty_a.metric = Metric::l2;
    const auto same = merge_neighborhoods(kp, empty_a);
    CHECK(indices_of(same) == indices_of(kp));

    // mismatched queries are rejected
    auto kb = hood_with(a_store, {1, 0}, {{0, 0.05}});
    CHECK_THROWS_AS(merge_neighborhoods(kp, kb), std::invalid_argument);
}

TEST_CASE("merged sizes add up and containment holds") {
    const Datastore p_store = gaussian_store(5000, 8, 91, 40);
    const Datastore a_store = gaussian_store(900, 8, 92, 40);
    Rng rng(93);
    std::vector<float> q(8);
    for (auto& v : q) v = static_cast<float>(rng.gaussian());

    const auto kp = knn_exact(p_store, q, 500, Metric::l2, Origin::pretrain);
    const auto ka = knn_exact(a_store, q, 500, Metric::l2, Origin::adapt);
    const auto merged = merge_neighborhoods(kp, ka);
    CHECK(merged.size() == 1000);

    // recall-hit containment: any value present in a half is in the union
    const auto contains = [](const Neighborhood& h, TokenId v) {
        for (const auto& n : h.neighbors) {
            if (n.value == v) return true;
        }
        return false;
    };
    for (TokenId v = 0; v < 40; ++v) {
        if (contains(kp, v) || contains(ka, v)) CHECK(contains(merged, v));
    }
}
