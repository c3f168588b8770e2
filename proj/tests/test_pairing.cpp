#include <gtest/gtest.h>

#include <map>
#include <random>
#include <set>

#include "abstain/pairing.hpp"
#include "support.hpp"

using namespace abstain;

namespace {

EmbeddingStore random_store(std::uint64_t seed, std::size_t n_anchor, std::size_t n_cand, std::size_t d) {
    std::mt19937_64 g(seed);
    EmbeddingStore s(d);
    for (std::size_t i = 0; i < n_anchor; ++i) {
        const auto v = oracle::random_unit(g, d);
        s.add("anchor/" + std::to_string(1000 + i), std::span<const double>(v), Role::anchor, Split::train);
    }
    for (std::size_t i = 0; i < n_cand; ++i) {
        const auto v = oracle::random_unit(g, d);
        s.add("positive/" + std::to_string(1000 + i), std::span<const double>(v), Role::positive_pool, Split::train);
    }
    return s;
}

double f32_dot(const EmbeddingStore& s, std::size_t i, std::size_t j) {
    double d = 0.0;
    for (std::size_t k = 0; k < s.dim(); ++k) d += static_cast<double>(s.row(i)[k]) * s.row(j)[k];
    return d;
}

const EmbeddingStore& tiny_split() {
    static const EmbeddingStore s = assign_splits(synth_corpus(oracle::tiny_spec()), {}, 7);
    return s;
}

}  // namespace

TEST(RnnFilter, MatchesBruteForceMutualTopOne) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto s = random_store(seed, 25, 30, 6);
        const auto a = s.indices(Role::anchor);
        const auto c = s.indices(Role::positive_pool);
        std::set<std::pair<std::size_t, std::size_t>> want;
        for (auto i : a) {
            std::size_t bc = c[0];
            for (auto j : c) {
                if (f32_dot(s, i, j) > f32_dot(s, i, bc)) bc = j;
            }
            std::size_t ba = a[0];
            for (auto k : a) {
                if (f32_dot(s, k, bc) > f32_dot(s, ba, bc)) ba = k;
            }
            if (ba == i) want.emplace(i, bc);
        }
        std::set<std::pair<std::size_t, std::size_t>> got;
        for (const auto& p : rnn_filter(s, a, c)) got.emplace(p.anchor, p.candidate);
        EXPECT_EQ(got, want) << "seed " << seed;
    }
}

TEST(RnnFilter, OutputSortedByAnchorId) {
    const auto s = random_store(3, 40, 40, 5);
    const auto pairs = rnn_filter(s, s.indices(Role::anchor), s.indices(Role::positive_pool));
    ASSERT_FALSE(pairs.empty());
    for (std::size_t i = 1; i < pairs.size(); ++i) EXPECT_LT(s.id(pairs[i - 1].anchor), s.id(pairs[i].anchor));
}

TEST(RnnFilter, TiesGoToLowerIdAndDuplicatesAreDropped) {
    EmbeddingStore s(2);
    const std::vector<double> e1{1.0, 0.0}, e2{0.0, 1.0};
    const std::vector<double> mix{0.8, 0.6};
    s.add("anchor/a", std::span<const double>(e1), Role::anchor);
    s.add("positive/b", std::span<const double>(mix), Role::positive_pool);
    s.add("positive/a", std::span<const double>(mix), Role::positive_pool);
    s.add("anchor/z", std::span<const double>(e2), Role::anchor);
    s.add("positive/z", std::span<const double>(e2), Role::positive_pool);
    const auto pairs = rnn_filter(s, s.indices(Role::anchor), s.indices(Role::positive_pool));
    ASSERT_EQ(pairs.size(), 1u);
    EXPECT_EQ(s.id(pairs[0].anchor), "anchor/a");
    EXPECT_EQ(s.id(pairs[0].candidate), "positive/a");
}

TEST(RnnFilter, EmptyInputsGiveNoPairs) {
    const auto s = random_store(1, 3, 3, 4);
    EXPECT_TRUE(rnn_filter(s, {}, s.indices(Role::positive_pool)).empty());
    EXPECT_TRUE(rnn_filter(s, s.indices(Role::anchor), {}).empty());
}

TEST(BandNegatives, MatchesBruteForceScan) {
    const auto& s = tiny_split();
    const auto pool = s.indices(Role::mid_pool);
    const NegativeBand band{0.5, 0.8};
    for (auto a : s.indices(Role::anchor, Split::train)) {
        const auto got = band_negatives(s, a, pool, band);
        std::set<std::size_t> want;
        for (auto p : pool) {
            const double c = f32_dot(s, a, p);
            if (c >= 0.5 && c <= 0.8) want.insert(p);
        }
        EXPECT_EQ(std::set<std::size_t>(got.begin(), got.end()), want);
        for (std::size_t i = 1; i < got.size(); ++i) EXPECT_GE(f32_dot(s, a, got[i - 1]), f32_dot(s, a, got[i]));
    }
    EXPECT_THROW(band_negatives(s, 0, pool, NegativeBand{0.8, 0.5}), ConfigError);
}

TEST(Assemble, ExposureSemantics) {
    const auto& s = tiny_split();
    PairingConfig cfg;
    for (auto ex : all_exposures) {
        cfg.exposure = ex;
        const auto m = exposure_mask(ex);
        const auto set = assemble_tuples(s, cfg, Split::train);
        ASSERT_FALSE(set.tuples.empty());
        EXPECT_EQ(set.ood_pool.empty(), !m.easy) << to_string(ex);
        for (const auto& t : set.tuples) {
            EXPECT_EQ(t.use_hard_negative, m.hard);
            EXPECT_EQ(t.pool.size(), t.pool_mid + t.pool_reserve + t.pool_easy);
            EXPECT_EQ(t.pool_reserve, m.mid ? s.count(Role::reserve) : 0u);
            if (!m.mid) {
                EXPECT_EQ(t.pool_mid, 0u);
            }
            if (!m.easy) {
                EXPECT_EQ(t.pool_easy, 0u);
            }
            for (std::size_t k = 0; k < t.pool.size(); ++k) {
                const Role r = s.role(t.pool[k]);
                const Role want = k < t.pool_mid                    ? Role::mid_pool
                                  : k < t.pool_mid + t.pool_reserve ? Role::reserve
                                                                    : Role::easy_ood;
                EXPECT_EQ(r, want);
            }
            EXPECT_EQ(pair_key(s.id(t.anchor)), pair_key(s.id(t.hard_negative)));
            EXPECT_EQ(s.role(t.positive), Role::positive_pool);
        }
        if (ex == NegativeExposure::hard_only) {
            for (const auto& t : set.tuples) EXPECT_TRUE(t.pool.empty());
        }
    }
}

TEST(Assemble, NoLeakageAcrossSplits) {
    const auto& s = tiny_split();
    std::set<std::string> held;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s.split(i) != Split::unassigned) held.insert(s.id(i));
    }
    PairingConfig cfg;
    for (auto split : {Split::train, Split::val}) {
        const auto set = assemble_tuples(s, cfg, split);
        std::size_t violations = 0;
        for (const auto& t : set.tuples) {
            for (auto p : t.pool) violations += held.count(s.id(p));
            EXPECT_EQ(s.split(t.anchor), split);
            EXPECT_EQ(s.split(t.positive), split);
        }
        for (auto o : set.ood_pool) violations += held.count(s.id(o));
        EXPECT_EQ(violations, 0u);
    }
}

TEST(Assemble, MissingHardNegativeThrows) {
    EmbeddingStore s(2);
    const std::vector<double> a{1.0, 0.0}, p{0.8, 0.6};
    s.add("anchor/1", std::span<const double>(a), Role::anchor, Split::train);
    s.add("positive/1", std::span<const double>(p), Role::positive_pool, Split::train);
    EXPECT_THROW(assemble_tuples(s, PairingConfig{}, Split::train), MissingHardNegative);
}

TEST(Mining, ExactlyKDistinctPoolMembers) {
    std::vector<std::size_t> pool(20);
    for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = 100 + i;
    for (std::uint64_t key = 0; key < 200; ++key) {
        const auto m = mine_negatives(pool, 8, 0, key);
        ASSERT_EQ(m.refs.size(), 8u);
        std::set<std::size_t> u(m.refs.begin(), m.refs.end());
        EXPECT_EQ(u.size(), 8u);
        for (auto r : m.refs) EXPECT_TRUE(r >= 100 && r < 120);
        for (bool b : m.mask) EXPECT_TRUE(b);
    }
}

TEST(Mining, SmallPoolIsPaddedAndMasked) {
    const std::vector<std::size_t> pool{4, 9, 2};
    const auto m = mine_negatives(pool, 8, 77, 1);
    ASSERT_EQ(m.refs.size(), 8u);
    EXPECT_EQ(std::count(m.mask.begin(), m.mask.end(), true), 3);
    for (std::size_t k = 3; k < 8; ++k) {
        EXPECT_EQ(m.refs[k], 77u);
        EXPECT_FALSE(m.mask[k]);
    }
    EXPECT_TRUE(mine_negatives(pool, 0, 0, 1).refs.empty());
    EXPECT_EQ(mine_negatives({}, 4, 5, 1).mask, std::vector<bool>(4, false));
}

TEST(Mining, InclusionIsUniform) {
    // each of 20 items lands in a k = 8 draw with probability 0.4; the
    // chi-square statistic over 10000 draws has 19 degrees of freedom
    std::vector<std::size_t> pool(20);
    for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
    std::vector<double> counts(20, 0.0);
    for (std::uint64_t key = 0; key < 10000; ++key) {
        for (auto r : mine_negatives(pool, 8, 0, CounterRng::derive_key({99, key})).refs) counts[r] += 1.0;
    }
    double chi2 = 0.0;
    for (double c : counts) chi2 += (c - 4000.0) * (c - 4000.0) / 4000.0;
    EXPECT_LT(chi2, 43.82);  // p = 0.001
}

TEST(Mining, KeyedByEpochAndAnchor) {
    const auto& s = tiny_split();
    const auto set = assemble_tuples(s, PairingConfig{}, Split::train);
    const auto& t = set.tuples.front();
    ASSERT_GT(t.pool.size(), 16u);
    const auto a = sample_k_mine(s, t, 8, 42, 0);
    const auto b = sample_k_mine(s, t, 8, 42, 0);
    const auto c = sample_k_mine(s, t, 8, 42, 1);
    const auto d = sample_k_mine(s, t, 8, 43, 0);
    EXPECT_EQ(a.mined_negatives, b.mined_negatives);
    EXPECT_NE(a.mined_negatives, c.mined_negatives);
    EXPECT_NE(a.mined_negatives, d.mined_negatives);
    EXPECT_EQ(a.mined_mask.size(), 8u);
}

TEST(Tuples, JsonlHasOneLinePerTuple) {
    const auto& s = tiny_split();
    auto set = assemble_tuples(s, PairingConfig{}, Split::val);
    const auto text = tuples_to_jsonl(s, set);
    EXPECT_EQ(static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')), set.tuples.size());
    const auto first = nlohmann::json::parse(text.substr(0, text.find('\n')));
    EXPECT_EQ(first["anchor"], s.id(set.tuples[0].anchor));
}

TEST(Exposure, ParseRoundTrip) {
    for (auto e : all_exposures) EXPECT_EQ(parse_exposure(to_string(e)), e);
    EXPECT_FALSE(parse_exposure("some"));
}
