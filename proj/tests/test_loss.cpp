#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "abstain/loss.hpp"
#include "support.hpp"

using namespace abstain;
using dm::Vec;

namespace {

// 2-d unit vectors at a given angle from the x axis
Vec at(double theta) { return {std::cos(theta), std::sin(theta)}; }

double ref_softplus(double x, double t) { return t * std::log(1.0 + std::exp(x / t)); }

struct Fixture {
    dm::Matrix z;
    dm::ColVec e;
    LatentBatch batch;
};

// rows: per anchor a, p, hn and 4 negatives, then 5 OOD rows
Fixture random_fixture(std::uint64_t seed, std::size_t n_anchor, std::size_t d) {
    std::mt19937_64 g(seed);
    std::normal_distribution<double> nd;
    const std::size_t per = 7;
    const std::size_t n = n_anchor * per + 5;
    Fixture f;
    f.z.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    f.e.resize(static_cast<Eigen::Index>(n));
    for (std::size_t r = 0; r < n; ++r) {
        const auto u = oracle::random_unit(g, d);
        for (std::size_t c = 0; c < d; ++c) f.z(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = u[c];
        f.e(static_cast<Eigen::Index>(r)) = nd(g);
    }
    for (std::size_t b = 0; b < n_anchor; ++b) {
        AnchorSlots s;
        s.a = b * per;
        s.p = b * per + 1;
        s.hn = b * per + 2;
        for (std::size_t k = 0; k < 4; ++k) {
            s.neg.push_back(b * per + 3 + k);
            s.mask.push_back(k != 2 || b % 2 == 0);
        }
        f.batch.anchors.push_back(s);
    }
    for (std::size_t k = 0; k < 5; ++k) f.batch.ood.push_back(n_anchor * per + k);
    return f;
}

}  // namespace

TEST(Terms, HardNegativeFixtureByHand) {
    // cos(A, P) = 0.9, cos(A, HN) = 0.7, E_P = -1, E_HN = +1:
    // softplus(0.2 + 0.7 - 0.9) + softplus(-1 - 1 + 1) = ln 2 + ln(1 + e^-1)
    const Vec za = at(0.0), zp = at(std::acos(0.9)), zh = at(-std::acos(0.7));
    const LossConfig c;
    const double want = std::log(2.0) + std::log1p(std::exp(-1.0));
    EXPECT_NEAR(want, 1.006408868078168, 1e-15);
    EXPECT_NEAR(hn_hinge(za, zp, zh, -1.0, 1.0, c), want, 1e-12);
    EXPECT_EQ(hn_hinge(za, zp, zh, -1.0, 1.0, c, false), 0.0);
}

TEST(Terms, CoincidentNegativeIsPureMargin) {
    const Vec za = at(0.0), zp = at(0.3);
    LossConfig c;
    c.m_sim = 0.35;
    c.m_e = 0.8;
    c.lambda = 0.5;
    c.temperature = 0.7;
    const double want = ref_softplus(0.35, 0.7) + 0.5 * ref_softplus(0.8, 0.7);
    EXPECT_NEAR(hn_hinge(za, zp, zp, 0.4, 0.4, c), want, 1e-14);
}

TEST(Terms, SimAndEnergyTermsMatchReference) {
    const Vec za = at(0.1), zp = at(0.5), zn = at(-0.4);
    const double x = 0.2 + std::cos(0.5) - std::cos(0.4);
    EXPECT_NEAR(sim_term(za, zp, zn, 0.2, 1.3), ref_softplus(x, 1.3), 1e-14);
    EXPECT_NEAR(energy_term(0.3, -0.2, 1.0, 2.0, 1.3), 2.0 * ref_softplus(1.5, 1.3), 1e-14);
}

TEST(Terms, NoEnergyAblationDropsEnergyHalf) {
    const Vec za = at(0.0), zp = at(0.2), zn = at(0.9);
    LossConfig c;
    c.ablation = Ablation::no_energy;
    EXPECT_EQ(combined_term(za, zp, zn, 5.0, -3.0, c), sim_term(za, zp, zn, c.m_sim, c.temperature));
}

TEST(Core, EqualTermsGiveLogKShift) {
    const std::vector<double> v(6, 0.8);
    const std::vector<bool> m(6, true);
    for (double t : {0.25, 1.0, 3.0}) EXPECT_NEAR(core_loss(v, m, t), 0.8 + std::log(6.0) / t, 1e-14);
}

TEST(Core, LargeTemperatureApproachesHardestTerm) {
    const std::vector<double> v{0.2, 1.7, 0.4};
    const std::vector<bool> m(3, true);
    EXPECT_NEAR(core_loss(v, m, 1e4), 1.7, 1e-3);
    EXPECT_GE(core_loss(v, m, 1.0), 1.7);
}

TEST(OodHinge, PicksHighestCosineItem) {
    const Vec za = at(0.0), zp = at(0.2);
    const std::vector<Vec> ood{at(1.4), at(0.6), at(-1.0)};
    const std::vector<double> e{0.0, 3.0, -5.0};
    const LossConfig c;
    const auto h = ood_hinge(za, zp, 0.1, ood, e, c);
    ASSERT_TRUE(h.selected);
    EXPECT_EQ(*h.selected, 1u);
    EXPECT_EQ(h.value, combined_term(za, zp, ood[1], 0.1, 3.0, c));

    LossConfig by_e;
    by_e.hardest_by = HardestBy::energy;
    EXPECT_EQ(*ood_hinge(za, zp, 0.1, ood, e, by_e).selected, 2u);
}

TEST(OodHinge, AblationAndEmptyPool) {
    const Vec za = at(0.0), zp = at(0.2);
    LossConfig c;
    EXPECT_THROW(ood_hinge(za, zp, 0.0, {}, {}, c), EmptyOODPool);
    c.ablation = Ablation::no_ext_ood;
    const std::vector<Vec> ood{at(1.0)};
    const std::vector<double> e{0.0};
    const auto h = ood_hinge(za, zp, 0.0, ood, e, c);
    EXPECT_EQ(h.value, 0.0);
    EXPECT_FALSE(h.selected);
}

TEST(SoftmaxCe, ReferenceValues) {
    EXPECT_NEAR(softmax_ce({10.0, -10.0}, 0), 2.0611536203143807e-9, 1e-23);
    EXPECT_NEAR(softmax_ce({10.0, -10.0}, 1), 20.0 + 2.0611536203143807e-9, 1e-12);
    EXPECT_NEAR(softmax_ce({0.0, 0.0}, 1), std::log(2.0), 1e-15);
    EXPECT_TRUE(std::isfinite(softmax_ce({1e4, -1e4}, 1)));
    EXPECT_THROW(softmax_ce({0.0, 0.0}, 2), ConfigError);
}

TEST(Batch, TotalDecomposesAndMatchesScalarTerms) {
    auto f = random_fixture(1, 3, 6);
    LossConfig c;
    c.w_ood = 0.7;
    c.w_hn = 1.3;
    const auto rep = ecsctl_total(f.batch, f.z, f.e, c);
    EXPECT_NEAR(rep.total, rep.core + 0.7 * rep.ood_hinge + 1.3 * rep.hn_hinge, 1e-12);
    double mean_total = 0.0;
    auto row = [&](std::size_t r) {
        return Vec(f.z.row(static_cast<Eigen::Index>(r)).data(), f.z.row(static_cast<Eigen::Index>(r)).data() + f.z.cols());
    };
    for (std::size_t b = 0; b < 3; ++b) {
        const auto& s = f.batch.anchors[b];
        const auto& al = rep.per_anchor[b];
        const Vec za = row(s.a), zp = row(s.p);
        std::vector<double> terms;
        std::vector<bool> mask;
        for (std::size_t k = 0; k < s.neg.size(); ++k) {
            terms.push_back(combined_term(za, zp, row(s.neg[k]), f.e(s.p), f.e(s.neg[k]), c));
            mask.push_back(s.mask[k]);
        }
        EXPECT_NEAR(al.core, core_loss(terms, mask, c.temperature), 1e-12);
        std::vector<Vec> oz;
        std::vector<double> oe;
        for (auto r : f.batch.ood) {
            oz.push_back(row(r));
            oe.push_back(f.e(r));
        }
        EXPECT_NEAR(al.ood, ood_hinge(za, zp, f.e(s.p), oz, oe, c).value, 1e-12);
        EXPECT_NEAR(al.hn, hn_hinge(za, zp, row(s.hn), f.e(s.p), f.e(s.hn), c), 1e-12);
        EXPECT_NEAR(al.total, al.core + 0.7 * al.ood + 1.3 * al.hn, 1e-12);
        mean_total += al.total / 3.0;
    }
    EXPECT_NEAR(rep.total, mean_total, 1e-12);
}

TEST(Batch, GradientMatchesFiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
        auto f = random_fixture(seed, 3, 5);
        LossConfig c;
        c.temperature = seed % 2 ? 0.5 : 1.0;
        c.ablation = seed % 4 == 3 ? Ablation::no_energy : Ablation::none;
        dm::Matrix dz;
        dm::ColVec de;
        ecsctl_total(f.batch, f.z, f.e, c, &dz, &de);
        std::vector<double> flat(f.z.data(), f.z.data() + f.z.size());
        flat.insert(flat.end(), f.e.data(), f.e.data() + f.e.size());
        std::vector<double> an(dz.data(), dz.data() + dz.size());
        an.insert(an.end(), de.data(), de.data() + de.size());
        const auto fd = oracle::fd_gradient(
            [&](const std::vector<double>& v) {
                dm::Matrix z = f.z;
                dm::ColVec e = f.e;
                std::copy(v.begin(), v.begin() + z.size(), z.data());
                std::copy(v.begin() + z.size(), v.end(), e.data());
                return ecsctl_total(f.batch, z, e, c).total;
            },
            flat, 1e-6);
        EXPECT_LT(oracle::rel_err(an, fd), 1e-7) << seed;
    }
}

TEST(Batch, MaskedSlotsNeverReadOrDifferentiated) {
    auto f = random_fixture(3, 2, 4);
    const LossConfig c;
    dm::Matrix dz1, dz2;
    dm::ColVec de1, de2;
    const auto r1 = ecsctl_total(f.batch, f.z, f.e, c, &dz1, &de1);
    // anchor 1 has slot 2 masked; point it somewhere else
    ASSERT_FALSE(f.batch.anchors[1].mask[2]);
    auto other = f.batch;
    other.anchors[1].neg[2] = 0;
    const auto r2 = ecsctl_total(other, f.z, f.e, c, &dz2, &de2);
    EXPECT_EQ(r1.total, r2.total);
    EXPECT_TRUE(dz1 == dz2);
    EXPECT_TRUE(de1 == de2);
    // the masked row itself receives no gradient from anywhere
    const auto masked_row = static_cast<Eigen::Index>(f.batch.anchors[1].neg[2]);
    EXPECT_EQ(dz1.row(masked_row).norm(), 0.0);
    EXPECT_EQ(de1(masked_row), 0.0);
}

TEST(Batch, AnchorWithoutValidNegativesHasZeroCore) {
    auto f = random_fixture(4, 2, 4);
    for (auto&& m : f.batch.anchors[0].mask) m = false;
    const auto rep = ecsctl_total(f.batch, f.z, f.e, LossConfig{});
    EXPECT_EQ(rep.per_anchor[0].core, 0.0);
    EXPECT_GT(rep.per_anchor[1].core, 0.0);
}

TEST(Batch, AblationsAndExposureSwitchOffTerms) {
    auto f = random_fixture(5, 3, 4);
    LossConfig ne;
    ne.ablation = Ablation::no_energy;
    EXPECT_EQ(ecsctl_total(f.batch, f.z, f.e, ne).energy_terms, 0.0);
    LossConfig no;
    no.ablation = Ablation::no_ext_ood;
    const auto r = ecsctl_total(f.batch, f.z, f.e, no);
    EXPECT_EQ(r.ood_hinge, 0.0);
    for (const auto& a : r.per_anchor) EXPECT_FALSE(a.ood_pick);

    auto off = f.batch;
    off.ood_active = false;
    off.ood.clear();
    EXPECT_EQ(ecsctl_total(off, f.z, f.e, LossConfig{}).ood_hinge, 0.0);
    f.batch.ood.clear();
    EXPECT_THROW(ecsctl_total(f.batch, f.z, f.e, LossConfig{}), EmptyOODPool);
}

TEST(Batch, HnSlotDisabledContributesNothing) {
    auto f = random_fixture(6, 2, 4);
    for (auto& s : f.batch.anchors) s.use_hn = false;
    const auto r = ecsctl_total(f.batch, f.z, f.e, LossConfig{});
    EXPECT_EQ(r.hn_hinge, 0.0);
}

TEST(SoftmaxBatch, GradientMatchesFiniteDifferences) {
    std::mt19937_64 g(8);
    std::normal_distribution<double> nd;
    dm::Matrix logits(5, 2);
    for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = 2.0 * nd(g);
    const LabeledRows entries{{0, 1, 1, 3, 4, 2}, {0, 0, 1, 1, 1, 0}};
    dm::Matrix dl;
    const double loss = softmax_batch(entries, logits, &dl);
    double want = 0.0;
    for (std::size_t i = 0; i < 6; ++i) {
        const auto r = static_cast<Eigen::Index>(entries.rows[i]);
        const double l0 = logits(r, 0), l1 = logits(r, 1);
        const double lse = std::log(std::exp(l0) + std::exp(l1));
        want += (lse - (entries.labels[i] ? l1 : l0)) / 6.0;
    }
    EXPECT_NEAR(loss, want, 1e-14);
    const auto fd = oracle::fd_gradient(
        [&](const std::vector<double>& v) {
            dm::Matrix l = logits;
            std::copy(v.begin(), v.end(), l.data());
            return softmax_batch(entries, l);
        },
        std::vector<double>(logits.data(), logits.data() + logits.size()), 1e-6);
    EXPECT_LT(oracle::rel_err(std::vector<double>(dl.data(), dl.data() + dl.size()), fd), 1e-8);
}

TEST(Config, ValidatesTemperatureAndWeights) {
    LossConfig c;
    c.temperature = 0.0;
    EXPECT_THROW(c.validate(), NonPositiveTemperature);
    c = {};
    c.w_ood = -1.0;
    EXPECT_THROW(c.validate(), ConfigError);
    EXPECT_EQ(parse_ablation("no_energy"), Ablation::no_energy);
    EXPECT_FALSE(parse_ablation("none_of_it"));
}
