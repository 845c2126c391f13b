#include "knnlm/eval.hpp"

#include <cmath>

#include "doctest.h"
#include "knnlm/errors.hpp"
#include "knnlm/rng.hpp"

using namespace knnlm;

namespace {

struct Fixture {
    LmDims dims{2, 6, 8, 12};
    LmParams lm;
    TokenSequence corpus;
    Datastore store;

    Fixture() : lm(LmParams::init(dims, 3)) {
        Rng rng(4);
        for (auto& v : lm.out_w.data) v = rng.gaussian() * 0.3;
        for (int i = 0; i < 300; ++i) {
            corpus.ids.push_back(static_cast<TokenId>(2 + rng.below(10)));
        }
        store = build_datastore(lm, nullptr, corpus, TapPoint::h2_ln, Metric::l2, "adapt");
    }

    EvalComponents components(const RescorerParams* rescorer = nullptr) {
        EvalComponents c;
        c.lm = &lm;
        c.backends = {RetrievalBackend{&store, nullptr, 0, Origin::adapt}};
        c.rescorer = rescorer;
        c.tap = TapPoint::h2_ln;
        c.metric = Metric::l2;
        return c;
    }
};

}  // namespace

TEST_CASE("interpolation boundaries and hand arithmetic") {
    const std::vector<double> p_knn{1.0, 0.0}, p_lm{0.5, 0.5};
    CHECK(interpolate(p_knn, p_lm, 0.0) == p_lm);
    CHECK(interpolate(p_knn, p_lm, 1.0) == p_knn);
    const auto mixed = interpolate(p_knn, p_lm, 0.25);
    CHECK(mixed[0] == doctest::Approx(0.625).epsilon(1e-12));
    CHECK(mixed[1] == doctest::Approx(0.375).epsilon(1e-12));
    CHECK_THROWS_AS(interpolate(p_knn, p_lm, 1.5), ConfigError);
    CHECK_THROWS_AS(interpolate(p_knn, p_lm, -0.1), ConfigError);
}

TEST_CASE("interpolation preserves the simplex on random inputs") {
    Rng rng(5);
    for (int trial = 0; trial < 1000; ++trial) {
        const size_t n = 2 + rng.below(30);
        std::vector<double> a(n), b(n);
        double za = 0, zb = 0;
        for (size_t i = 0; i < n; ++i) {
            a[i] = rng.uniform() + 1e-12;
            b[i] = rng.uniform() + 1e-12;
            za += a[i];
            zb += b[i];
        }
        for (size_t i = 0; i < n; ++i) {
            a[i] /= za;
            b[i] /= zb;
        }
        const auto out = interpolate(a, b, rng.uniform());
        double sum = 0;
        for (double v : out) {
            CHECK(v >= 0.0);
            sum += v;
        }
        CHECK(std::fabs(sum - 1.0) < 1e-6);
    }
}

TEST_CASE("lambda = 0 reproduces the pure model bit-for-bit") {
    Fixture f;
    const auto pure = lm_perplexity(f.lm, nullptr, f.corpus);
    const auto with_knn = evaluate(f.components(), f.corpus, 16, 0.0);
    CHECK(with_knn.perplexity == pure);

    const auto no_knn = evaluate(f.components(), f.corpus, 0, 0.0);
    CHECK(no_knn.perplexity == pure);
}

TEST_CASE("degenerate single-token case with a matching neighbor") {
    const LmDims dims{2, 4, 6, 9};
    LmParams lm = LmParams::init(dims, 7);
    TokenSequence one;
    one.ids = {5};
    const Datastore ds = build_datastore(lm, nullptr, one, TapPoint::h2_ln, Metric::l2, "x");
    EvalComponents c;
    c.lm = &lm;
    c.backends = {RetrievalBackend{&ds, nullptr, 0, Origin::adapt}};
    c.tap = TapPoint::h2_ln;
    c.metric = Metric::l2;
    const auto res = evaluate(c, one, 1, 1.0);
    CHECK(res.perplexity == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(res.records[0].p_knn == 1.0);
    CHECK(res.records[0].recall_hit);
}

TEST_CASE("evaluate is deterministic") {
    Fixture f;
    const auto a = evaluate(f.components(), f.corpus, 8, 0.4);
    const auto b = evaluate(f.components(), f.corpus, 8, 0.4);
    CHECK(a.perplexity == b.perplexity);
}

TEST_CASE("evaluate validates its arguments") {
    Fixture f;
    CHECK_THROWS_AS(evaluate(f.components(), f.corpus, 0, 0.5), ConfigError);
    TokenSequence empty;
    CHECK_THROWS_AS(evaluate(f.components(), empty, 4, 0.5), ConfigError);
}

TEST_CASE("recall and precision definitions") {
    std::vector<EvalRecord> records(4);
    records[0] = {0, 1, 0.2, 0.5, true, 4};
    records[1] = {1, 1, 0.2, 0.1, true, 4};
    records[2] = {2, 1, 0.2, 0.0, false, 4};
    records[3] = {3, 1, 0.2, 0.0, false, 4};
    CHECK(recall(records) == 0.5);
    CHECK(precision(records) == 0.25);

    // ties count as failures (strict inequality)
    records[1].p_knn = 0.2;
    CHECK(precision(records) == 0.25);

    // all hits
    for (auto& r : records) r.recall_hit = true;
    CHECK(recall(records) == 1.0);

    // no-hit tokens always lose to the model (p_lm > 0 under softmax)
    std::vector<EvalRecord> misses(3);
    for (size_t i = 0; i < 3; ++i) misses[i] = {i, 1, 0.3, 0.0, false, 4};
    CHECK(precision(misses) == 0.0);

    CHECK_THROWS_AS(recall({}), std::invalid_argument);
    CHECK_THROWS_AS(precision({}), std::invalid_argument);
}

TEST_CASE("retrieving the whole store makes recall a containment check") {
    Fixture f;
    const auto res = evaluate(f.components(), f.corpus, f.store.size(), 0.5);
    // brute-force oracle: token recalled iff it appears anywhere in values
    std::vector<bool> present(f.dims.vocab, false);
    for (uint64_t i = 0; i < f.store.size(); ++i) present[f.store.value(i)] = true;
    size_t expected = 0;
    for (TokenId t : f.corpus.ids) expected += present[t] ? 1 : 0;
    CHECK(recall(res.records) ==
          doctest::Approx(double(expected) / f.corpus.size()).epsilon(1e-12));
}

TEST_CASE("recall is non-decreasing in k on nested neighborhoods") {
    Fixture f;
    double prev = 0.0;
    for (size_t k : {1u, 4u, 16u, 64u}) {
        const auto res = evaluate(f.components(), f.corpus, k, 0.5);
        const double r = recall(res.records);
        CHECK(r >= prev);
        prev = r;
    }
}

TEST_CASE("zero-scoring rescorer reproduces the distance-only evaluation") {
    Fixture f;
    const RescorerParams zero = RescorerParams::zeros(f.dims.hidden, false);
    const auto base = evaluate(f.components(), f.corpus, 12, 0.37, {1000});
    const auto rescored = evaluate(f.components(&zero), f.corpus, 12, 0.37, {1000});
    CHECK(std::fabs(base.perplexity - rescored.perplexity) < 1e-9);
    for (size_t i = 0; i < base.records.size(); ++i) {
        CHECK(std::fabs(base.records[i].p_knn - rescored.records[i].p_knn) < 1e-9);
    }
}

TEST_CASE("grid search: singleton grid and lambda-zero guarantee") {
    Fixture f;
    GridSpec single;
    single.k_grid = {1};
    single.lambda_grid = {0.0};
    const auto res = grid_search(f.components(), f.corpus, single);
    CHECK(res.best_k == 1);
    CHECK(res.best_lambda == 0.0);
    CHECK(res.best_perplexity == lm_perplexity(f.lm, nullptr, f.corpus));

    // a grid containing lambda = 0 never loses to the pure model
    GridSpec grid;
    grid.k_grid = {1, 4, 16};
    grid.lambda_grid = {0.0, 0.2, 0.8};
    const auto tuned = grid_search(f.components(), f.corpus, grid);
    CHECK(tuned.best_perplexity <= lm_perplexity(f.lm, nullptr, f.corpus));
    CHECK(tuned.table.size() == 9);
}

TEST_CASE("grid search prefix reuse equals independent evaluations") {
    Fixture f;
    GridSpec grid;
    grid.k_grid = {1, 2, 4, 8, 32};
    grid.lambda_grid = {0.0, 0.1, 0.5, 0.9};
    const auto res = grid_search(f.components(), f.corpus, grid);
    for (const auto& cell : res.table) {
        const auto indep = evaluate(f.components(), f.corpus, cell.k, cell.lambda);
        CHECK(std::fabs(cell.perplexity - indep.perplexity) < 1e-9);
    }
}

TEST_CASE("grid search validates the grid") {
    Fixture f;
    GridSpec bad;
    bad.k_grid = {};
    bad.lambda_grid = {0.1};
    CHECK_THROWS_AS(grid_search(f.components(), f.corpus, bad), ConfigError);
    bad.k_grid = {4, 2};
    CHECK_THROWS_AS(grid_search(f.components(), f.corpus, bad), ConfigError);
    bad.k_grid = {2, 4};
    bad.lambda_grid = {0.5, 0.2};
    CHECK_THROWS_AS(grid_search(f.components(), f.corpus, bad), ConfigError);
}

TEST_CASE("default grids match the documented shapes") {
    const GridSpec g = GridSpec::defaults();
    CHECK(g.k_grid == std::vector<size_t>{1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1000});
    REQUIRE(g.lambda_grid.size() == 9);
    CHECK(g.lambda_grid.front() == 0.0);
    CHECK(g.lambda_grid[1] == 0.01);
    CHECK(g.lambda_grid.back() == 0.98);
    g.validate();
}

TEST_CASE("merged evaluation splits the budget and contains both halves") {
    Fixture f;
    // second store from a shifted slice of the same corpus
    TokenSequence second;
    for (size_t i = 0; i < 150; ++i) second.ids.push_back(f.corpus.ids[i]);
    const Datastore store_a =
        build_datastore(f.lm, nullptr, second, TapPoint::h2_ln, Metric::l2, "adapt");

    EvalComponents c = f.components();
    c.backends.push_back(RetrievalBackend{&store_a, nullptr, 0, Origin::adapt});
    c.backends[0].origin = Origin::pretrain;

    const auto res = evaluate(c, f.corpus, 10, 0.5, {40});
    for (const auto& r : res.records) CHECK(r.neighborhood_size == 10);

    // odd k: the adaptation side gets the extra neighbor
    const auto odd = evaluate(c, f.corpus, 7, 0.5, {10});
    for (const auto& r : odd.records) CHECK(r.neighborhood_size == 7);
    CHECK(merged_k_split(7).first == 3);
    CHECK(merged_k_split(7).second == 4);
}
