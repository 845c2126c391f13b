#include "knnlm/datastore.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "knnlm/errors.hpp"
#include "knnlm/hash.hpp"
#include "knnlm/rng.hpp"

using namespace knnlm;
namespace fs = std::filesystem;

namespace {

LmDims tiny_dims() { return {2, 4, 8, 10}; }

TokenSequence seq(std::vector<TokenId> ids) {
    TokenSequence s;
    s.ids = std::move(ids);
    return s;
}

Datastore random_store(size_t n, uint32_t d, uint64_t seed, size_t vocab = 50) {
    Rng rng(seed);
    std::vector<float> keys(n * d);
    std::vector<TokenId> values(n);
    for (auto& v : keys) v = static_cast<float>(rng.gaussian());
    for (auto& v : values) v = static_cast<TokenId>(rng.below(vocab));
    return Datastore::from_rows(std::move(keys), std::move(values), d, Metric::ip, TapPoint::h2_ln,
                                "test", vocab);
}

fs::path test_dir() {
    const auto dir = fs::temp_directory_path() / "knnlm_datastore_test";
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("datastore has one entry per token in corpus order") {
    const LmParams p = LmParams::init(tiny_dims(), 1);
    const TokenSequence corpus = seq({4, 7});
    const Datastore ds = build_datastore(p, nullptr, corpus, TapPoint::h2_ln, Metric::l2, "x");
    REQUIRE(ds.size() == 2);
    CHECK(ds.value(0) == 4);
    CHECK(ds.value(1) == 7);

    // entry 0: window [BOS, BOS]; entry 1: window [BOS, 4]
    const std::vector<TokenId> w0{Vocab::kBos, Vocab::kBos}, w1{Vocab::kBos, 4};
    const auto e0 = lm_forward(p, nullptr, w0, TapPoint::h2_ln).embedding;
    const auto e1 = lm_forward(p, nullptr, w1, TapPoint::h2_ln).embedding;
    for (size_t j = 0; j < ds.dim(); ++j) {
        CHECK(ds.key(0)[j] == static_cast<float>(e0[j]));
        CHECK(ds.key(1)[j] == static_cast<float>(e1[j]));
    }
}

TEST_CASE("single-token corpus yields the all-BOS context entry") {
    const LmParams p = LmParams::init(tiny_dims(), 2);
    const Datastore ds = build_datastore(p, nullptr, seq({9}), TapPoint::h1, Metric::ip, "x");
    REQUIRE(ds.size() == 1);
    const std::vector<TokenId> w{Vocab::kBos, Vocab::kBos};
    const auto e = lm_forward(p, nullptr, w, TapPoint::h1).embedding;
    for (size_t j = 0; j < ds.dim(); ++j) CHECK(ds.key(0)[j] == static_cast<float>(e[j]));
}

TEST_CASE("entry count matches an arbitrary corpus length") {
    const LmParams p = LmParams::init(tiny_dims(), 3);
    TokenSequence corpus;
    for (size_t i = 0; i < 100000; ++i) corpus.ids.push_back(static_cast<TokenId>(i % 10));
    const Datastore ds = build_datastore(p, nullptr, corpus, TapPoint::h2_ln, Metric::ip, "big");
    CHECK(ds.size() == 100000);
}

TEST_CASE("empty corpus is rejected") {
    const LmParams p = LmParams::init(tiny_dims(), 4);
    CHECK_THROWS_AS(build_datastore(p, nullptr, seq({}), TapPoint::h2_ln, Metric::ip, "x"),
                    ConfigError);
}

TEST_CASE("save/load round-trips bytes and metadata") {
    const auto dir = test_dir();
    const auto path = (dir / "store.knnds").string();
    Datastore ds = random_store(1000, 8, 5);
    ds.save(path);
    const Datastore back = Datastore::load(path);

    CHECK(back.dim() == ds.dim());
    CHECK(back.size() == ds.size());
    CHECK(back.metric_tag() == ds.metric_tag());
    CHECK(back.tap() == ds.tap());
    CHECK(back.source_tag() == ds.source_tag());
    CHECK(std::memcmp(back.keys(), ds.keys(), ds.size() * ds.dim() * sizeof(float)) == 0);
    CHECK(std::memcmp(back.values(), ds.values(), ds.size() * sizeof(TokenId)) == 0);

    // a second save produces identical bytes
    const auto path2 = (dir / "store2.knnds").string();
    Datastore again = random_store(1000, 8, 5);
    again.save(path2);
    CHECK(back.file_checksum() == hash_file(path2));
    fs::remove_all(dir);
}

TEST_CASE("rebuilding from identical inputs is byte-identical") {
    const auto dir = test_dir();
    const LmParams p = LmParams::init(tiny_dims(), 6);
    TokenSequence corpus;
    for (size_t i = 0; i < 5000; ++i) corpus.ids.push_back(static_cast<TokenId>(i % 9));
    const auto pa = (dir / "a.knnds").string();
    const auto pb = (dir / "b.knnds").string();
    Datastore a = build_datastore(p, nullptr, corpus, TapPoint::h2_ln, Metric::ip, "same");
    Datastore b = build_datastore(p, nullptr, corpus, TapPoint::h2_ln, Metric::ip, "same");
    a.save(pa);
    b.save(pb);
    CHECK(hash_file(pa) == hash_file(pb));
    fs::remove_all(dir);
}

TEST_CASE("load rejects corruption with distinct codes") {
    const auto dir = test_dir();
    const auto path = (dir / "corrupt.knnds").string();
    Datastore ds = random_store(64, 4, 9);
    ds.save(path);

    SUBCASE("truncated file") {
        fs::resize_file(path, fs::file_size(path) - 1);
        try {
            Datastore::load(path);
            FAIL("expected IoError");
        } catch (const IoError& e) {
            CHECK(e.code == IoCode::truncated);
        }
    }

    SUBCASE("bad magic") {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(0);
        f.write("NOPE", 4);
        f.close();
        try {
            Datastore::load(path);
            FAIL("expected IoError");
        } catch (const IoError& e) {
            CHECK(e.code == IoCode::bad_magic);
        }
    }

    SUBCASE("future version") {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(7);
        const uint32_t v2 = 2;
        f.write(reinterpret_cast<const char*>(&v2), 4);
        f.close();
        try {
            Datastore::load(path);
            FAIL("expected IoError");
        } catch (const IoError& e) {
            CHECK(e.code == IoCode::bad_version);
        }
    }
    fs::remove_all(dir);
}

TEST_CASE("from_rows validates values and finiteness") {
    std::vector<float> keys(8, 0.0f);
    CHECK_THROWS_AS(
        Datastore::from_rows(keys, {3, 99}, 4, Metric::ip, TapPoint::h2_ln, "x", 10),
        std::invalid_argument);
    keys[2] = INFINITY;
    CHECK_THROWS_AS(Datastore::from_rows(keys, {3, 4}, 4, Metric::ip, TapPoint::h2_ln, "x", 10),
                    NumericError);
}
