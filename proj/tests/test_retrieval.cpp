#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "support.hpp"

using namespace diffreg;
using testing_support::make_dataset;
using testing_support::make_sample;

namespace {

// Independent oracle: full sort of every candidate by (squared distance, sample_id).
std::vector<std::size_t> brute_force_pool(const Dataset& ds, std::span<const double> q,
                                          const std::vector<std::size_t>& candidates, std::size_t p) {
    std::vector<std::pair<double, std::size_t>> all;
    for (std::size_t i : candidates) {
        double d = 0.0;
        for (std::size_t k = 0; k < q.size(); ++k) {
            d += (q[k] - ds.samples[i].features[k]) * (q[k] - ds.samples[i].features[k]);
        }
        all.emplace_back(d, i);
    }
    std::sort(all.begin(), all.end(), [&](const auto& a, const auto& b) {
        if (a.first != b.first) {
            return a.first < b.first;
        }
        return ds.samples[a.second].sample_id < ds.samples[b.second].sample_id;
    });
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < std::min(p, all.size()); ++i) {
        out.push_back(all[i].second);
    }
    return out;
}

Dataset random_points(std::size_t n, std::size_t d, std::uint64_t seed, int label_min, int label_max) {
    Rng rng = make_stream(seed, {1});
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_int_distribution<int> age(label_min, label_max);
    std::vector<Sample> samples;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> f(d);
        for (auto& v : f) {
            v = normal(rng);
        }
        samples.push_back(make_sample("s" + std::to_string(100000 + i), "p" + std::to_string(i % 97), age(rng), f));
    }
    return make_dataset(std::move(samples), label_min, label_max);
}

} // namespace

TEST(ReferenceIndex, RoundingPutsNearbyLabelsInOneBucket) {
    const auto idx = build_reference_index(make_dataset(
        {make_sample("a", "p", 30.2, {0}), make_sample("b", "p", 29.8, {0}), make_sample("c", "p", 30.0, {0})}, 20,
        40));
    EXPECT_EQ(idx.bucket(30).size(), 3u);
    EXPECT_TRUE(idx.bucket(29).empty());
}

TEST(ReferenceIndex, DistinctLabelsGiveDistinctBuckets) {
    const auto idx =
        build_reference_index(make_dataset({make_sample("a", "p", 30, {0}), make_sample("b", "p", 31, {0})}, 20, 40));
    EXPECT_EQ(idx.bucket(30).size(), 1u);
    EXPECT_EQ(idx.bucket(31).size(), 1u);
}

TEST(ReferenceIndex, ConservationAndHalfAwayFromZero) {
    const auto ds = generate_synthetic(testing_support::small_synth(3));
    const auto idx = build_reference_index(ds);
    std::size_t total = 0;
    for (int a = ds.label_min; a <= ds.label_max; ++a) {
        for (std::size_t i : idx.bucket(a)) {
            EXPECT_EQ(label_bucket(idx.sample(i).label), a);
        }
        total += idx.bucket(a).size();
    }
    EXPECT_EQ(total, ds.size());
    EXPECT_EQ(label_bucket(30.5), 31);
    EXPECT_EQ(label_bucket(29.5), 30);
    EXPECT_EQ(label_bucket(-0.5), -1);
}

TEST(ReferenceIndex, EmptyDatasetIsRejected) {
    Dataset ds;
    ds.feature_dim = 1;
    EXPECT_THROW(build_reference_index(ds), Error);
}

TEST(Retrieval, UndersizedBucketReturnsEverything) {
    const auto idx = build_reference_index(make_dataset(
        {make_sample("a", "p1", 30, {0}), make_sample("b", "p2", 30, {1}), make_sample("c", "p3", 30, {2}),
         make_sample("d", "p4", 40, {0})},
        20, 50));
    RetrievalConfig cfg;
    Rng rng = make_stream(1);
    const std::vector<double> q{0.5};
    const auto res = retrieve_references(idx, q, 30, cfg, rng);
    std::set<std::size_t> got(res.references.begin(), res.references.end());
    EXPECT_EQ(got, (std::set<std::size_t>{0, 1, 2}));
    EXPECT_EQ(res.widen_used, 0);
}

TEST(Retrieval, PoolOfTwoMatchesBruteForceOnThousandCandidates) {
    auto ds = random_points(1000, 6, 9, 30, 30);
    const auto idx = build_reference_index(ds);
    std::vector<std::size_t> all(ds.size());
    std::iota(all.begin(), all.end(), 0);
    Rng rng = make_stream(2);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<double> q(6);
        for (auto& v : q) {
            v = normal(rng);
        }
        const auto pool = nearest_pool(idx, q, all, 2);
        const auto oracle = brute_force_pool(ds, q, all, 2);
        ASSERT_EQ(pool.size(), 2u);
        EXPECT_EQ(pool[0].index, oracle[0]);
        EXPECT_EQ(pool[1].index, oracle[1]);
    }
}

TEST(Retrieval, TenFromThirtyAreDistinctPoolMembers) {
    const auto ds = random_points(400, 4, 3, 30, 31);
    const auto idx = build_reference_index(ds);
    RetrievalConfig cfg;
    Rng rng = make_stream(5);
    const std::vector<double> q{0.1, 0.2, 0.3, 0.4};
    const auto res = retrieve_references(idx, q, 30, cfg, rng);
    ASSERT_EQ(res.pool.size(), 30u);
    ASSERT_EQ(res.references.size(), 10u);
    std::set<std::size_t> pool;
    for (const auto& c : res.pool) {
        pool.insert(c.index);
    }
    std::set<std::size_t> refs(res.references.begin(), res.references.end());
    EXPECT_EQ(refs.size(), 10u);
    for (auto r : refs) {
        EXPECT_TRUE(pool.count(r));
    }
}

TEST(Retrieval, TieBreakBySampleId) {
    const auto idx = build_reference_index(make_dataset(
        {make_sample("z", "p1", 30, {1.0}), make_sample("m", "p2", 30, {-1.0}), make_sample("a", "p3", 30, {1.0})}, 20,
        40));
    const std::vector<std::size_t> cand{0, 1, 2};
    const std::vector<double> q{0.0};
    const auto pool = nearest_pool(idx, q, cand, 2);
    EXPECT_EQ(idx.sample(pool[0].index).sample_id, "a");
    EXPECT_EQ(idx.sample(pool[1].index).sample_id, "m");
}

TEST(Retrieval, PoolOptimalityAgainstOracle) {
    const auto ds = random_points(3000, 5, 21, 20, 40);
    const auto idx = build_reference_index(ds);
    RetrievalConfig cfg;
    cfg.exclude_subject = true;
    Rng rng = make_stream(8);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_int_distribution<int> age(15, 45);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> q(5);
        for (auto& v : q) {
            v = normal(rng);
        }
        const int target = age(rng);
        const std::string excluded = "p" + std::to_string(trial % 97);
        const auto res = retrieve_references(idx, q, target, cfg, rng, excluded);
        int widen = -1;
        const auto candidates = age_candidates(idx, target, cfg.max_widen, excluded, widen);
        EXPECT_EQ(widen, res.widen_used);
        const auto oracle = brute_force_pool(ds, q, candidates, cfg.pool_size);
        ASSERT_EQ(res.pool.size(), oracle.size());
        for (std::size_t i = 0; i < oracle.size(); ++i) {
            EXPECT_EQ(res.pool[i].index, oracle[i]);
        }
        const double worst_in = res.pool.back().distance;
        std::set<std::size_t> in_pool;
        for (const auto& c : res.pool) {
            in_pool.insert(c.index);
        }
        for (std::size_t c : candidates) {
            if (!in_pool.count(c)) {
                EXPECT_LE(worst_in, squared_distance(q, ds.samples[c].features));
            }
        }
        for (std::size_t r : res.references) {
            EXPECT_NE(ds.samples[r].subject_id, excluded);
            EXPECT_LE(std::abs(label_bucket(ds.samples[r].label) - idx.clamp_age(target)), res.widen_used);
        }
    }
}

TEST(Retrieval, WideningIsMinimalAndSymmetric) {
    const auto idx = build_reference_index(make_dataset(
        {make_sample("a", "p1", 27, {0}), make_sample("b", "p2", 33, {0}), make_sample("c", "p3", 34, {0})}, 20, 40));
    RetrievalConfig cfg;
    Rng rng = make_stream(1);
    const std::vector<double> q{0};
    auto res = retrieve_references(idx, q, 30, cfg, rng);
    EXPECT_EQ(res.widen_used, 3);
    std::set<std::size_t> got(res.references.begin(), res.references.end());
    EXPECT_EQ(got, (std::set<std::size_t>{0, 1}));
    cfg.max_widen = 2;
    EXPECT_THROW(retrieve_references(idx, q, 30, cfg, rng), Error);
    try {
        retrieve_references(idx, q, 30, cfg, rng);
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::retrieval);
    }
}

TEST(Retrieval, SubjectExclusionAppliesBeforeWidening) {
    const auto idx = build_reference_index(
        make_dataset({make_sample("a", "me", 30, {0}), make_sample("b", "other", 31, {0})}, 20, 40));
    RetrievalConfig cfg;
    Rng rng = make_stream(1);
    const std::vector<double> q{0};
    const auto res = retrieve_references(idx, q, 30, cfg, rng, std::string("me"));
    ASSERT_EQ(res.references.size(), 1u);
    EXPECT_EQ(res.references[0], 1u);
    EXPECT_EQ(res.widen_used, 1);
    cfg.exclude_subject = false;
    const auto res2 = retrieve_references(idx, q, 30, cfg, rng, std::string("me"));
    EXPECT_EQ(res2.references[0], 0u);
}

TEST(Retrieval, DeterministicGivenSeed) {
    const auto ds = random_points(500, 3, 4, 30, 32);
    const auto idx = build_reference_index(ds);
    RetrievalConfig cfg;
    const std::vector<double> q{0.3, -0.2, 0.9};
    Rng a = make_stream(77);
    Rng b = make_stream(77);
    EXPECT_EQ(retrieve_references(idx, q, 31, cfg, a).references, retrieve_references(idx, q, 31, cfg, b).references);
}

TEST(Retrieval, RandomMethodDrawsFromTheWholeBucket) {
    const auto ds = random_points(300, 3, 4, 30, 30);
    const auto idx = build_reference_index(ds);
    RetrievalConfig cfg;
    cfg.method = RetrievalMethod::random;
    Rng rng = make_stream(3);
    const std::vector<double> q{0, 0, 0};
    const auto res = retrieve_references(idx, q, 30, cfg, rng);
    EXPECT_EQ(res.pool.size(), 300u);
    EXPECT_EQ(res.references.size(), 10u);
}

TEST(RetrievalConfig, RMustNotExceedP) {
    RetrievalConfig cfg;
    cfg.num_references = 31;
    EXPECT_THROW(cfg.validate(), Error);
    cfg.num_references = 30;
    EXPECT_NO_THROW(cfg.validate());
    RetrievalConfig defaults;
    EXPECT_EQ(defaults.pool_size, 30u);
    EXPECT_EQ(defaults.num_references, 10u);
}

TEST(Retrieval, QueryDimensionMismatchIsInputError) {
    const auto idx = build_reference_index(make_dataset({make_sample("a", "p", 30, {0, 1})}, 20, 40));
    RetrievalConfig cfg;
    Rng rng = make_stream(1);
    const std::vector<double> q{0};
    EXPECT_THROW(retrieve_references(idx, q, 30, cfg, rng), Error);
}
