#include "knnlm/rescorer.hpp"

#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "knnlm/errors.hpp"
#include "knnlm/neural.hpp"
#include "knnlm/rng.hpp"

using namespace knnlm;

namespace {

std::vector<double> random_vec(size_t n, Rng& rng) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.gaussian();
    return v;
}

NeighborSample sample_from(const std::vector<double>& key, TokenId value, double s,
                           Origin origin = Origin::pretrain) {
    NeighborSample ns;
    ns.key.assign(key.begin(), key.end());
    ns.value = value;
    ns.s = s;
    ns.origin = origin;
    return ns;
}

ContrastiveExample random_example(size_t d_h, size_t negatives, const LmParams& lm, Rng& rng) {
    ContrastiveExample ex;
    const auto q = random_vec(d_h, rng);
    ex.query.assign(q.begin(), q.end());
    ex.positive = sample_from(random_vec(d_h, rng),
                              static_cast<TokenId>(rng.below(lm.dims.vocab)), rng.uniform() * 4);
    for (size_t i = 0; i < negatives; ++i) {
        ex.negatives.push_back(sample_from(random_vec(d_h, rng),
                                           static_cast<TokenId>(rng.below(lm.dims.vocab)),
                                           rng.uniform() * 4));
    }
    return ex;
}

}  // namespace

TEST_CASE("feature vector dimensions follow the 3*d_h + 6 rule") {
    Rng rng(1);
    const size_t d = 8;
    const auto q = random_vec(d, rng), k = random_vec(d, rng), v = random_vec(d, rng);
    CHECK(build_features(q, k, v, false).size() == 30);
    CHECK(build_features(q, k, v, true).size() == 31);
    CHECK(rescorer_input_dim(64, false) == 198);

    const auto short_v = random_vec(d - 1, rng);
    CHECK_THROWS_AS(build_features(q, k, short_v, false), std::invalid_argument);
}

TEST_CASE("pair features: degenerate identical inputs") {
    Rng rng(2);
    const size_t d = 6;
    const auto q = random_vec(d, rng);
    const auto f = build_features(q, q, q, false);
    double norm_sq = 0;
    for (double x : q) norm_sq += x * x;
    // (q.k, q.v, k.v, |q-k|, |q-v|, |k-v|)
    CHECK(f[3 * d + 0] == doctest::Approx(norm_sq).epsilon(1e-12));
    CHECK(f[3 * d + 1] == doctest::Approx(norm_sq).epsilon(1e-12));
    CHECK(f[3 * d + 2] == doctest::Approx(norm_sq).epsilon(1e-12));
    CHECK(f[3 * d + 3] == 0.0);
    CHECK(f[3 * d + 4] == 0.0);
    CHECK(f[3 * d + 5] == 0.0);
}

TEST_CASE("pair features: orthonormal inputs") {
    const std::vector<double> q{1, 0, 0}, k{0, 1, 0}, v{0, 0, 1};
    const auto f = build_features(q, k, v, false);
    const double root2 = std::sqrt(2.0);
    CHECK(f[9] == 0.0);
    CHECK(f[10] == 0.0);
    CHECK(f[11] == 0.0);
    CHECK(f[12] == doctest::Approx(root2).epsilon(1e-12));
    CHECK(f[13] == doctest::Approx(root2).epsilon(1e-12));
    CHECK(f[14] == doctest::Approx(root2).epsilon(1e-12));
}

TEST_CASE("origin bit is appended only in merged mode") {
    Rng rng(3);
    const auto q = random_vec(4, rng), k = random_vec(4, rng), v = random_vec(4, rng);
    CHECK(build_features(q, k, v, true, Origin::pretrain).back() == 0.0);
    CHECK(build_features(q, k, v, true, Origin::adapt).back() == 1.0);
}

TEST_CASE("zero parameters score everything zero, so sprime = -s") {
    const LmDims dims{2, 4, 6, 9};
    LmParams lm = LmParams::init(dims, 4);
    Rng rng(5);
    for (auto& x : lm.out_w.data) x = rng.gaussian() * 0.2;

    std::vector<float> keys;
    std::vector<TokenId> values;
    for (int i = 0; i < 5; ++i) {
        for (int j = 0; j < 6; ++j) keys.push_back(static_cast<float>(rng.gaussian()));
        values.push_back(static_cast<TokenId>(i));
    }
    const Datastore ds = Datastore::from_rows(std::move(keys), std::move(values), 6, Metric::l2,
                                              TapPoint::h2_ln, "t", 9);
    std::vector<float> q(6);
    for (auto& x : q) x = static_cast<float>(rng.gaussian());
    const Neighborhood hood = knn_exact(ds, q, 5, Metric::l2);

    const RescorerParams zero = RescorerParams::zeros(6, false);
    const Rescored out = rescore(zero, hood, lm, false);
    for (size_t i = 0; i < hood.size(); ++i) {
        CHECK(out.sr[i] == 0.0);
        CHECK(out.sprime[i] == -hood.neighbors[i].s);
        // the combination identity holds exactly
        CHECK(out.sprime[i] + hood.neighbors[i].s - out.sr[i] == 0.0);
    }
}

TEST_CASE("rescoring is pointwise: permuting neighbors permutes outputs") {
    const LmDims dims{2, 4, 6, 9};
    LmParams lm = LmParams::init(dims, 6);
    Rng rng(7);
    for (auto& x : lm.out_w.data) x = rng.gaussian() * 0.2;
    const RescorerParams params = RescorerParams::init(6, false, 8);

    std::vector<float> keys;
    std::vector<TokenId> values;
    for (int i = 0; i < 6; ++i) {
        for (int j = 0; j < 6; ++j) keys.push_back(static_cast<float>(rng.gaussian()));
        values.push_back(static_cast<TokenId>(i));
    }
    const Datastore ds = Datastore::from_rows(std::move(keys), std::move(values), 6, Metric::l2,
                                              TapPoint::h2_ln, "t", 9);
    std::vector<float> q(6);
    for (auto& x : q) x = static_cast<float>(rng.gaussian());
    Neighborhood hood = knn_exact(ds, q, 6, Metric::l2);

    const Rescored a = rescore(params, hood, lm, false);
    std::reverse(hood.neighbors.begin(), hood.neighbors.end());
    const Rescored b = rescore(params, hood, lm, false);
    for (size_t i = 0; i < hood.size(); ++i) {
        CHECK(a.sr[i] == b.sr[hood.size() - 1 - i]);
    }
}

TEST_CASE("identity sprime + s - sr = 0 holds exactly for random parameters") {
    const LmDims dims{2, 4, 6, 9};
    LmParams lm = LmParams::init(dims, 9);
    Rng rng(10);
    for (auto& x : lm.out_w.data) x = rng.gaussian() * 0.2;
    const RescorerParams params = RescorerParams::init(6, false, 11);

    std::vector<float> keys;
    std::vector<TokenId> values;
    for (int i = 0; i < 8; ++i) {
        for (int j = 0; j < 6; ++j) keys.push_back(static_cast<float>(rng.gaussian()));
        values.push_back(static_cast<TokenId>(rng.below(9)));
    }
    const Datastore ds = Datastore::from_rows(std::move(keys), std::move(values), 6, Metric::l2,
                                              TapPoint::h2_ln, "t", 9);
    std::vector<float> q(6);
    for (auto& x : q) x = static_cast<float>(rng.gaussian());
    const Neighborhood hood = knn_exact(ds, q, 8, Metric::l2);
    const Rescored out = rescore(params, hood, lm, false);
    for (size_t i = 0; i < hood.size(); ++i) {
        CHECK(out.sprime[i] + hood.neighbors[i].s - out.sr[i] == 0.0);
    }
}

TEST_CASE("contrastive loss closed forms with zero parameters") {
    const LmDims dims{2, 4, 6, 9};
    const LmParams lm = LmParams::init(dims, 12);
    const RescorerParams zero = RescorerParams::zeros(6, false);
    Rng rng(13);

    // all scores equal: loss = ln(1 + #negatives)
    for (size_t m : {1u, 5u, 10u}) {
        const auto ex = random_example(6, m, lm, rng);
        const double loss = contrastive_loss(zero, ex, lm, 1.0);
        CHECK(loss == doctest::Approx(std::log(1.0 + m)).epsilon(1e-9));
    }
}

TEST_CASE("contrastive loss is positive and beats indifference after training") {
    const LmDims dims{2, 4, 6, 20};
    LmParams lm = LmParams::init(dims, 14);
    Rng rng(15);
    for (auto& x : lm.out_w.data) x = rng.gaussian() * 0.5;

    // learnable structure: positives sit near the query, negatives far
    const auto make_example = [&](Rng& r) {
        ContrastiveExample ex;
        const auto q = random_vec(6, r);
        ex.query.assign(q.begin(), q.end());
        auto pos_key = q;
        for (auto& x : pos_key) x += r.gaussian() * 0.1;
        ex.positive = sample_from(pos_key, 2, 0.2 + r.uniform());
        for (int i = 0; i < 6; ++i) {
            auto neg_key = random_vec(6, r);
            for (auto& x : neg_key) x *= 2.0;
            ex.negatives.push_back(
                sample_from(neg_key, static_cast<TokenId>(3 + r.below(10)), 3.0 + r.uniform()));
        }
        return ex;
    };
    std::vector<ContrastiveExample> train, dev, held;
    for (int i = 0; i < 150; ++i) train.push_back(make_example(rng));
    for (int i = 0; i < 30; ++i) dev.push_back(make_example(rng));
    for (int i = 0; i < 50; ++i) held.push_back(make_example(rng));

    RescorerTrainConfig cfg;
    cfg.log_interval = 20;
    cfg.max_epochs = 12;
    cfg.seed = 16;
    const auto [params, stats] = train_rescorer(train, dev, lm, false, cfg);

    double total = 0;
    for (const auto& ex : held) {
        const double loss = contrastive_loss(params, ex, lm, 1.0);
        CHECK(loss > 0.0);
        total += loss;
    }
    CHECK(total / held.size() < std::log(7.0));  // indifference over 1+6 candidates
    CHECK(stats.best_dev_loss < stats.initial_dev_loss);
}

TEST_CASE("contrastive gradients pass the finite-difference check") {
    const LmDims dims{2, 4, 6, 9};
    for (uint64_t seed : {21u, 22u, 23u, 24u, 25u}) {
        LmParams lm = LmParams::init(dims, seed);
        Rng rng(seed * 3 + 1);
        for (auto& x : lm.out_w.data) x = rng.gaussian() * 0.4;
        RescorerParams params = RescorerParams::init(6, true, seed);
        ContrastiveExample ex = random_example(6, 4, lm, rng);
        ex.negatives[1].origin = Origin::adapt;

        RescorerGrads grads(params);
        contrastive_loss(params, ex, lm, 0.7, &grads);
        const auto loss_fn = [&](std::span<const double>) {
            return contrastive_loss(params, ex, lm, 0.7);
        };
        auto ts = params.tensors();
        const auto gs = grads.tensors();
        for (size_t t = 0; t < ts.size(); ++t) {
            const double err = grad_check(loss_fn, ts[t]->flat(), gs[t]->flat());
            INFO("rescorer tensor ", t, " seed ", seed);
            CHECK(err < 1e-3);
        }
    }
}

TEST_CASE("build_contrastive_set follows the positive/negative selection rules") {
    // hand-built store: values chosen so neighborhoods are predictable
    const LmDims dims{2, 4, 6, 9};
    LmParams lm = LmParams::init(dims, 31);
    Rng rng(32);
    for (auto& x : lm.out_w.data) x = rng.gaussian() * 0.2;

    // corpus of 30 tokens over values {2, 3, 4}
    TokenSequence corpus;
    for (int i = 0; i < 30; ++i) corpus.ids.push_back(static_cast<TokenId>(2 + i % 3));
    const Datastore ds = build_datastore(lm, nullptr, corpus, TapPoint::h2_ln, Metric::l2, "a");

    RetrievalBackend backend{&ds, nullptr, 0, Origin::adapt};
    RescorerTrainConfig cfg;
    cfg.k = 8;
    cfg.negatives = 10;
    cfg.max_tokens = 30;
    cfg.seed = 33;
    const auto examples =
        build_contrastive_set(lm, nullptr, backend, nullptr, corpus, TapPoint::h2_ln, Metric::l2, cfg);
    REQUIRE(!examples.empty());
    for (const auto& ex : examples) {
        // self-retrieval makes the nearest positive exact
        CHECK(ex.positive.s == doctest::Approx(0.0).epsilon(1e-6));
        CHECK(ex.negatives.size() <= 10);
        for (const auto& n : ex.negatives) CHECK(n.value != ex.positive.value);
    }

    // deterministic under the seed
    const auto again =
        build_contrastive_set(lm, nullptr, backend, nullptr, corpus, TapPoint::h2_ln, Metric::l2, cfg);
    REQUIRE(again.size() == examples.size());
    for (size_t i = 0; i < examples.size(); ++i) {
        CHECK(again[i].query == examples[i].query);
        CHECK(again[i].positive.key == examples[i].positive.key);
        REQUIRE(again[i].negatives.size() == examples[i].negatives.size());
        for (size_t j = 0; j < examples[i].negatives.size(); ++j) {
            CHECK(again[i].negatives[j].key == examples[i].negatives[j].key);
        }
    }
}

TEST_CASE("positions without a retrieved ground truth are skipped") {
    const LmDims dims{2, 4, 6, 20};
    LmParams lm = LmParams::init(dims, 41);
    Rng rng(42);
    for (auto& x : lm.out_w.data) x = rng.gaussian() * 0.2;

    // store whose values never include the corpus tokens
    std::vector<float> keys(5 * 6);
    for (auto& x : keys) x = static_cast<float>(rng.gaussian());
    const Datastore ds =
        Datastore::from_rows(std::move(keys), {10, 11, 12, 13, 14}, 6, Metric::l2,
                             TapPoint::h2_ln, "w", 20);
    TokenSequence corpus;
    for (int i = 0; i < 12; ++i) corpus.ids.push_back(static_cast<TokenId>(2 + i % 3));

    RetrievalBackend backend{&ds, nullptr, 0, Origin::pretrain};
    RescorerTrainConfig cfg;
    cfg.k = 5;
    cfg.max_tokens = 12;
    const auto examples =
        build_contrastive_set(lm, nullptr, backend, nullptr, corpus, TapPoint::h2_ln, Metric::l2, cfg);
    CHECK(examples.empty());
}

TEST_CASE("nearest positive is selected and few decoys saturate the negatives") {
    // three positives at distances 0.1 / 0.5 / 0.9 and five decoys
    const LmDims dims{2, 4, 2, 9};
    LmParams lm = LmParams::init(dims, 51);

    ContrastiveExample probe;  // only used to reach the selection logic via a real store
    (void)probe;
    std::vector<float> keys;
    std::vector<TokenId> values;
    const auto push_row = [&](float x, float y, TokenId v) {
        keys.push_back(x);
        keys.push_back(y);
        values.push_back(v);
    };
    // query will sit at the origin; distances are x^2
    push_row(std::sqrt(0.5f), 0, 7);   // positive, s = 0.5
    push_row(std::sqrt(0.1f), 0, 7);   // positive, s = 0.1  <- nearest
    push_row(std::sqrt(0.9f), 0, 7);   // positive, s = 0.9
    for (int i = 0; i < 5; ++i) push_row(2.0f + i, 0, static_cast<TokenId>(i));

    const Datastore ds = Datastore::from_rows(std::move(keys), std::move(values), 2, Metric::l2,
                                              TapPoint::h2_ln, "t", 9);
    const std::vector<float> q{0, 0};
    const Neighborhood hood = knn_exact(ds, q, 8, Metric::l2);

    // replicate the builder's selection rules directly on the neighborhood
    size_t best = hood.size();
    std::vector<size_t> decoys;
    for (size_t j = 0; j < hood.size(); ++j) {
        if (hood.neighbors[j].value == 7) {
            if (best == hood.size() || hood.neighbors[j].s < hood.neighbors[best].s) best = j;
        } else {
            decoys.push_back(j);
        }
    }
    REQUIRE(best < hood.size());
    CHECK(hood.neighbors[best].s == doctest::Approx(0.1).epsilon(1e-4));
    CHECK(decoys.size() == 5);  // example would carry all five negatives
}

TEST_CASE("contrastive sets round-trip through the cache file") {
    const auto dir = std::filesystem::temp_directory_path() / "knnlm_rescorer_test";
    std::filesystem::create_directories(dir);
    const LmDims dims{2, 4, 6, 9};
    const LmParams lm = LmParams::init(dims, 61);
    Rng rng(62);
    std::vector<ContrastiveExample> examples;
    for (int i = 0; i < 7; ++i) examples.push_back(random_example(6, 1 + i % 4, lm, rng));
    examples[2].negatives[0].origin = Origin::adapt;

    const auto path = (dir / "set.knncx").string();
    save_contrastive_set(examples, 6, true, path);
    const auto [back, merged] = load_contrastive_set(path);
    CHECK(merged);
    REQUIRE(back.size() == examples.size());
    for (size_t i = 0; i < back.size(); ++i) {
        CHECK(back[i].query == examples[i].query);
        CHECK(back[i].positive.key == examples[i].positive.key);
        CHECK(back[i].positive.s == examples[i].positive.s);
        REQUIRE(back[i].negatives.size() == examples[i].negatives.size());
        for (size_t j = 0; j < back[i].negatives.size(); ++j) {
            CHECK(back[i].negatives[j].key == examples[i].negatives[j].key);
            CHECK(back[i].negatives[j].origin == examples[i].negatives[j].origin);
        }
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("rescorer checkpoints round-trip including the input mode") {
    const auto dir = std::filesystem::temp_directory_path() / "knnlm_rescorer_ckpt";
    std::filesystem::create_directories(dir);
    const RescorerParams params = RescorerParams::init(6, true, 71);
    const auto path = (dir / "r.knnp").string();
    params.save(path);
    const RescorerParams back = RescorerParams::load(path);
    CHECK(back.d_h == 6);
    CHECK(back.merged_mode);
    for (size_t i = 0; i < params.dense_a_w.numel(); ++i) {
        CHECK(static_cast<float>(params.dense_a_w.data[i]) ==
              static_cast<float>(back.dense_a_w.data[i]));
    }
    std::filesystem::remove_all(dir);
}
