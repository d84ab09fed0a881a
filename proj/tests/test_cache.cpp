#include <gtest/gtest.h>

#include <random>

#include "moesim/cache.hpp"
#include "moesim/tracegen.hpp"
#include "oracles.hpp"

using namespace moesim;

namespace {

MrsState state(uint32_t layers, std::vector<double> s, double alpha, uint32_t p) {
    MrsState m;
    m.num_layers = layers;
    m.num_routed = static_cast<uint32_t>(s.size()) / layers;
    m.alpha = alpha;
    m.p = p;
    m.S = std::move(s);
    return m;
}

MrsState flat_mrs(uint32_t layers, uint32_t routed) {
    ModelConfig c;
    c.num_layers = layers;
    c.num_routed = routed;
    c.num_activated = 1;
    return MrsState::uniform(c);
}

}  // namespace

TEST(MrsUpdate, HandExample) {
    auto m = state(1, {0.4, 0.2, 0.0}, 0.5, 2);
    mrs_update(m, 0, std::vector<double>{0.6, 0.3, 0.1});
    EXPECT_DOUBLE_EQ(m.S[0], 0.5);
    EXPECT_DOUBLE_EQ(m.S[1], 0.25);
    EXPECT_EQ(m.S[2], 0.0);
}

TEST(MrsUpdate, AlphaOneCopiesTopP) {
    auto m = state(1, {0.9, 0.9, 0.9, 0.9}, 1.0, 2);
    const std::vector<double> s{0.1, 0.5, 0.3, 0.1};
    mrs_update(m, 0, s);
    EXPECT_EQ(m.S, top_p(s, 2));
    EXPECT_EQ(m.S, (std::vector<double>{0.0, 0.5, 0.3, 0.0}));
}

TEST(MrsUpdate, AlphaZeroLeavesScoresAlone) {
    const std::vector<double> before{0.3, 0.2, 0.1, 0.4};
    auto m = state(1, before, 0.0, 2);
    mrs_update(m, 0, std::vector<double>{0.1, 0.5, 0.3, 0.1});
    EXPECT_EQ(m.S, before);
}

TEST(MrsUpdate, EqualScoresFavourLowerIndices) {
    auto m = state(1, {0.0, 0.0, 0.0, 0.0}, 1.0, 2);
    mrs_update(m, 0, std::vector<double>{0.25, 0.25, 0.25, 0.25});
    EXPECT_EQ(m.S, (std::vector<double>{0.25, 0.25, 0.0, 0.0}));
}

TEST(MrsUpdate, OtherLayersUntouched) {
    auto m = state(2, {0.1, 0.2, 0.3, 0.4}, 0.5, 1);
    mrs_update(m, 1, std::vector<double>{0.9, 0.1});
    EXPECT_EQ(m.S[0], 0.1);
    EXPECT_EQ(m.S[1], 0.2);
}

TEST(MrsUpdate, GeometricDecayIsExact) {
    for (double alpha : {0.5, 0.3, 0.9}) {
        auto m = state(1, {0.7, 0.2, 0.1}, alpha, 1);
        double expected = m.S[2];
        for (int k = 1; k <= 20; ++k) {
            mrs_update(m, 0, std::vector<double>{0.8, 0.15, 0.05});
            expected *= 1.0 - alpha;
            EXPECT_EQ(m.S[2], expected) << "alpha " << alpha << " k " << k;
        }
    }
}

TEST(MrsUpdate, NoDecayVariantKeepsOutsiders) {
    auto m = state(1, {0.7, 0.2, 0.1}, 0.5, 1);
    m.decay = false;
    mrs_update(m, 0, std::vector<double>{0.8, 0.15, 0.05});
    EXPECT_EQ(m.S[1], 0.2);
    EXPECT_EQ(m.S[2], 0.1);
}

TEST(MrsUpdate, BoundedByOneOnProbabilityVectors) {
    std::mt19937_64 rng(4);
    std::gamma_distribution<double> g(0.3, 1.0);
    auto m = state(1, std::vector<double>(8, 0.125), 0.7, 4);
    for (int i = 0; i < 1000; ++i) {
        std::vector<double> s(8);
        double sum = 0.0;
        for (auto& v : s) sum += v = g(rng) + 1e-12;
        for (auto& v : s) v /= sum;
        mrs_update(m, 0, s);
        for (double v : m.S) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
        }
    }
}

TEST(MrsUpdate, WrongLengthIsAContractError) {
    auto m = state(1, {0.1, 0.2, 0.3}, 0.5, 2);
    EXPECT_THROW(mrs_update(m, 0, std::vector<double>{0.5, 0.5}), ContractError);
}

TEST(Lookup, Basics) {
    ExpertCache c(2, PolicyKind::kLru);
    EXPECT_FALSE(c.lookup({0, 0}));
    c.insert({0, 0});
    EXPECT_TRUE(c.lookup({0, 0}));
    EXPECT_EQ(c.stats().lookups, 2u);
    EXPECT_EQ(c.stats().hits, 1u);
}

TEST(Lookup, LruEvictsTheOtherOne) {
    ExpertCache c(2, PolicyKind::kLru);
    const ExpertRef A{0, 0}, B{0, 1}, C{0, 2};
    c.insert(A);
    c.insert(B);
    c.lookup(A);
    EXPECT_EQ(c.insert(C), B);
}

TEST(Lookup, MrsLookupDoesNotChangeOrder) {
    auto m = flat_mrs(1, 4);
    m.S = {0.5, 0.2, 0.1, 0.0};
    ExpertCache c(2, PolicyKind::kMrs, m);
    c.insert({0, 0});
    c.insert({0, 1});
    for (int i = 0; i < 5; ++i) c.lookup({0, 1});
    EXPECT_EQ(c.victim(), (ExpertRef{0, 1}));
}

TEST(Insert, MrsEvictsMinimumScore) {
    auto m = flat_mrs(1, 3);
    m.S = {0.5, 0.2, 0.9};
    ExpertCache one(1, PolicyKind::kMrs, m);
    one.insert({0, 0});
    EXPECT_EQ(one.insert({0, 1}), (ExpertRef{0, 0}));

    ExpertCache two(2, PolicyKind::kMrs, m);
    two.insert({0, 0});
    two.insert({0, 1});
    EXPECT_EQ(two.insert({0, 2}), (ExpertRef{0, 1}));
}

TEST(Insert, MrsTiesGoToLowerRef) {
    auto m = flat_mrs(2, 2);
    ExpertCache c(3, PolicyKind::kMrs, m);
    c.insert({1, 1});
    c.insert({0, 1});
    c.insert({1, 0});
    EXPECT_EQ(c.insert({0, 0}), (ExpertRef{0, 1}));
}

TEST(Insert, PinnedResidentsCannotBeEvicted) {
    ExpertCache c(1, PolicyKind::kMrs, flat_mrs(1, 2));
    c.insert({0, 0});
    c.pin({0, 0});
    EXPECT_FALSE(c.can_insert());
    EXPECT_THROW(c.insert({0, 1}), EvictionFailure);
    c.unpin({0, 0});
    EXPECT_EQ(c.insert({0, 1}), (ExpertRef{0, 0}));
}

TEST(Insert, PinsAreCounted) {
    ExpertCache c(1, PolicyKind::kLru);
    c.insert({0, 0});
    c.pin({0, 0});
    c.pin({0, 0});
    c.unpin({0, 0});
    EXPECT_TRUE(c.pinned({0, 0}));
    c.unpin({0, 0});
    EXPECT_FALSE(c.pinned({0, 0}));
}

TEST(Insert, MrsVictimHasMinimumScoreAmongUnpinned) {
    std::mt19937_64 rng(8);
    const auto cfg = qwen2_config();
    ExpertCache c(64, PolicyKind::kMrs, MrsState::uniform(cfg));
    const auto trace = generate_trace(cfg, calibrated_params("qwen2", 3), 0, 20);
    std::bernoulli_distribution pin(0.2);
    for (const auto& fp : trace.passes)
        for (const auto& req : fp.layers) {
            std::vector<ExpertRef> pinned;
            for (uint32_t e : req.activated) {
                const ExpertRef ref{req.layer, e};
                if (c.lookup(ref)) continue;
                if (!c.can_insert()) continue;
                const auto predicted = c.victim();
                double lowest = 2.0;
                for (auto r : c.resident())
                    if (!c.pinned(r)) lowest = std::min(lowest, c.mrs().score(r));
                const auto victim = c.insert(ref);
                EXPECT_EQ(victim, predicted);
                if (victim) {
                    EXPECT_EQ(c.mrs().score(*victim), lowest);
                }
                if (pin(rng)) {
                    c.pin(ref);
                    pinned.push_back(ref);
                }
            }
            c.update_scores(req.layer, req.scores);
            for (auto r : pinned) c.unpin(r);
        }
}

TEST(ReferenceCrossCheck, LruAndLfuMatchTextbook) {
    for (auto kind : {PolicyKind::kLru, PolicyKind::kLfu}) {
        for (uint64_t seed = 0; seed < 20; ++seed) {
            std::mt19937_64 rng(seed);
            const size_t capacity = 1 + seed % 6;
            // Small universes thrash, skewed ones favour a hot set, cyclic ones
            // defeat LRU.
            const uint32_t universe = static_cast<uint32_t>(capacity + 1 + seed % 5);
            std::uniform_int_distribution<uint32_t> pick(0, universe - 1);
            std::geometric_distribution<uint32_t> hot(0.4);
            ExpertCache lib(capacity, kind);
            oracle::Lru lru(capacity);
            oracle::Lfu lfu(capacity);
            for (int i = 0; i < 2000; ++i) {
                uint32_t e = seed % 3 == 0 ? pick(rng) : seed % 3 == 1 ? std::min(hot(rng), universe - 1)
                                                                        : static_cast<uint32_t>(i % universe);
                const ExpertRef ref{e / 4, e % 4};
                const bool ref_hit = kind == PolicyKind::kLru ? lru.access(ref) : lfu.access(ref);
                ASSERT_EQ(lib.lookup(ref), ref_hit) << policy_name(kind) << " seed " << seed << " step " << i;
                if (!ref_hit) {
                    const auto want = kind == PolicyKind::kLru ? lru.insert(ref) : lfu.insert(ref);
                    ASSERT_EQ(lib.insert(ref), want) << policy_name(kind) << " seed " << seed << " step " << i;
                }
            }
        }
    }
}

TEST(HitRate, Values) {
    EXPECT_DOUBLE_EQ(*hit_rate({100, 30, 0, 0}), 0.30);
    EXPECT_EQ(*hit_rate({7, 7, 0, 0}), 1.0);
    EXPECT_FALSE(hit_rate({}).has_value());
}

TEST(Capacity, FloorOfRatio) {
    EXPECT_EQ(cache_capacity(qwen2_config(), 0.25), 448u);
    EXPECT_EQ(cache_capacity(mixtral_config(), 0.1), 25u);
    EXPECT_EQ(cache_capacity(mixtral_config(), 1.0), 256u);
    EXPECT_THROW(cache_capacity(mixtral_config(), 0.0), ContractError);
}

TEST(Replay, StatsInvariants) {
    const auto cfg = deepseek_config();
    const auto trace = generate_trace(cfg, calibrated_params("deepseek", 2), 0, 40);
    for (auto kind : {PolicyKind::kMrs, PolicyKind::kLru, PolicyKind::kLfu}) {
        const auto s = replay_on_demand(trace, kind, 0.25);
        EXPECT_LE(s.hits, s.lookups);
        EXPECT_LE(s.evictions, s.inserts);
        EXPECT_EQ(s.lookups, 40u * cfg.num_layers * cfg.num_activated);
    }
}

TEST(Replay, MrsBeatsLruAtQuarterCapacity) {
    const auto trace = generate_trace(qwen2_config(), calibrated_params("qwen2", 1), 0, 100);
    const double mrs = *hit_rate(replay_on_demand(trace, PolicyKind::kMrs, 0.25));
    const double lru = *hit_rate(replay_on_demand(trace, PolicyKind::kLru, 0.25));
    EXPECT_GE(mrs - lru, 0.03);
}
