#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "abstain/diffmath.hpp"
#include "support.hpp"

using namespace abstain;
using dm::Vec;

TEST(L2Normalize, ProducesUnitVector) {
    const Vec v{3.0, 4.0};
    const auto u = dm::l2_normalize(v);
    EXPECT_DOUBLE_EQ(u[0], 0.6);
    EXPECT_DOUBLE_EQ(u[1], 0.8);
}

TEST(L2Normalize, DegenerateNormThrows) {
    EXPECT_THROW(dm::l2_normalize(Vec{0.0, 0.0, 0.0}), DegenerateNorm);
    EXPECT_THROW(dm::l2_normalize(Vec{1e-13, 0.0}), DegenerateNorm);
}

TEST(L2Normalize, BackwardMatchesFiniteDifferences) {
    std::mt19937_64 g(1);
    std::normal_distribution<double> n;
    Vec v(7), w(7);
    for (auto& x : v) x = 2.0 * n(g);
    for (auto& x : w) x = n(g);
    // f(v) = w . normalize(v)
    auto f = [&](const std::vector<double>& x) { return oracle::dot(w, dm::l2_normalize(x)); };
    const auto fd = oracle::fd_gradient(f, v);
    const auto an = dm::l2_normalize_backward(v, w);
    EXPECT_LT(oracle::rel_err(an, fd), 1e-8);
}

TEST(L2Normalize, BatchedRowsAgreeWithSingle) {
    std::mt19937_64 g(2);
    std::normal_distribution<double> n;
    dm::Matrix u(4, 5), gz(4, 5);
    for (Eigen::Index i = 0; i < u.size(); ++i) {
        u.data()[i] = n(g);
        gz.data()[i] = n(g);
    }
    const auto fwd = dm::normalize_rows(u);
    const auto back = dm::normalize_rows_backward(fwd, gz);
    for (Eigen::Index r = 0; r < 4; ++r) {
        Vec row(u.row(r).data(), u.row(r).data() + 5);
        Vec grow(gz.row(r).data(), gz.row(r).data() + 5);
        const auto z = dm::l2_normalize(row);
        const auto d = dm::l2_normalize_backward(row, grow);
        for (Eigen::Index c = 0; c < 5; ++c) {
            EXPECT_NEAR(fwd.z(r, c), z[static_cast<std::size_t>(c)], 1e-15);
            EXPECT_NEAR(back(r, c), d[static_cast<std::size_t>(c)], 1e-14);
        }
    }
}

TEST(Cosine, UnitVectorsIsDotProduct) {
    const Vec a{1.0, 0.0}, b{0.6, 0.8};
    EXPECT_DOUBLE_EQ(dm::cosine(a, b), 0.6);
    EXPECT_THROW(dm::cosine(a, Vec{1.0}), ShapeMismatch);
}

TEST(Gelu, ExactErfValues) {
    // x * Phi(x) with Phi from the standard normal CDF
    EXPECT_NEAR(dm::gelu(1.0), 0.8413447460685429, 1e-15);
    EXPECT_NEAR(dm::gelu(-1.0), -0.15865525393145707, 1e-15);
    EXPECT_EQ(dm::gelu(0.0), 0.0);
}

TEST(Gelu, GradientMatchesFiniteDifferences) {
    for (double x : {-3.0, -1.2, -0.1, 0.0, 0.4, 2.5}) {
        const double h = 1e-6;
        const double fd = (dm::gelu(x + h) - dm::gelu(x - h)) / (2 * h);
        EXPECT_NEAR(dm::gelu_grad(x), fd, 1e-8) << x;
    }
}

TEST(SoftplusT, ReferenceValues) {
    // T log(1 + exp(x / T))
    EXPECT_NEAR(dm::softplus_t(2.0, 1.0), 2.12692801104297, 1e-13);
    EXPECT_NEAR(dm::softplus_t(-1.0, 1.0), 0.313261687518223, 1e-14);
    EXPECT_NEAR(dm::softplus_t(0.0, 1.0), std::log(2.0), 1e-15);
    EXPECT_NEAR(dm::softplus_t(2.0, 2.0), 2.0 * std::log1p(std::exp(1.0)), 1e-14);
}

TEST(SoftplusT, StableAtExtremes) {
    EXPECT_DOUBLE_EQ(dm::softplus_t(1000.0, 1.0), 1000.0);
    const double tiny = dm::softplus_t(-1000.0, 1.0);
    EXPECT_GE(tiny, 0.0);
    EXPECT_LT(tiny, 1e-300);
    EXPECT_TRUE(std::isfinite(dm::softplus_t(1e6, 0.01)));
}

TEST(SoftplusT, GradientIsSigmoid) {
    for (double x : {-30.0, -2.0, 0.0, 0.7, 40.0}) {
        for (double t : {0.5, 1.0, 3.0}) {
            const double sig = 1.0 / (1.0 + std::exp(-x / t));
            EXPECT_NEAR(dm::softplus_t_grad(x, t), sig, 1e-15);
        }
    }
}

TEST(SoftplusT, NonPositiveTemperatureThrows) {
    EXPECT_THROW(dm::softplus_t(1.0, 0.0), NonPositiveTemperature);
    EXPECT_THROW(dm::softplus_t(1.0, -1.0), NonPositiveTemperature);
    EXPECT_THROW(dm::softplus_t_grad(1.0, 0.0), NonPositiveTemperature);
}

TEST(LogSumExpT, SingletonAndSymmetry) {
    const std::vector<bool> one{true};
    EXPECT_DOUBLE_EQ(dm::logsumexp_t(Vec{1.7}, one, 1.0), 1.7);
    const Vec same(5, 0.9);
    const std::vector<bool> all(5, true);
    for (double t : {0.5, 1.0, 4.0}) EXPECT_NEAR(dm::logsumexp_t(same, all, t), 0.9 + std::log(5.0) / t, 1e-14);
}

TEST(LogSumExpT, MaskedSlotsIgnored) {
    const std::vector<bool> mask{true, false, true};
    const double a = dm::logsumexp_t(Vec{1.0, 99.0, 2.0}, mask, 1.0);
    const double b = dm::logsumexp_t(Vec{1.0, -5.0, 2.0}, mask, 1.0);
    EXPECT_EQ(a, b);
    const auto w = dm::logsumexp_t_grad(Vec{1.0, 99.0, 2.0}, mask, 1.0);
    EXPECT_EQ(w[1], 0.0);
    EXPECT_NEAR(w[0] + w[2], 1.0, 1e-15);
}

TEST(LogSumExpT, EmptyMaskThrows) {
    EXPECT_THROW(dm::logsumexp_t(Vec{1.0, 2.0}, std::vector<bool>{false, false}, 1.0), EmptyMask);
    EXPECT_THROW(dm::logsumexp_t(Vec{}, std::vector<bool>{}, 1.0), EmptyMask);
}

TEST(LogSumExpT, TemperatureLimits) {
    const Vec v{0.3, 1.1, 2.0, 0.7};
    const std::vector<bool> m(4, true);
    EXPECT_NEAR(dm::logsumexp_t(v, m, 1e3), 2.0, 1e-2);
    const double mean = (0.3 + 1.1 + 2.0 + 0.7) / 4.0;
    EXPECT_NEAR(dm::logsumexp_t(v, m, 1e-3) - std::log(4.0) / 1e-3, mean, 1e-2);
}

TEST(LogSumExpT, GradientMatchesFiniteDifferences) {
    const Vec v{0.3, -1.1, 2.0, 0.7};
    const std::vector<bool> m{true, true, false, true};
    for (double t : {0.3, 1.0, 5.0}) {
        auto f = [&](const std::vector<double>& x) { return dm::logsumexp_t(x, m, t); };
        EXPECT_LT(oracle::rel_err(dm::logsumexp_t_grad(v, m, t), oracle::fd_gradient(f, v)), 1e-8);
    }
}

TEST(Linear, ForwardBackward) {
    dm::Matrix w(2, 3);
    w << 1, 2, 3, -1, 0, 0.5;
    dm::ColVec b(2);
    b << 0.1, -0.2;
    const Vec x{1.0, -1.0, 2.0};
    const auto y = dm::linear(w, b, x);
    EXPECT_DOUBLE_EQ(y[0], 1 - 2 + 6 + 0.1);
    EXPECT_DOUBLE_EQ(y[1], -1 + 0 + 1 - 0.2);
    const Vec g{0.5, 2.0};
    const auto gr = dm::linear_backward(w, x, g);
    EXPECT_DOUBLE_EQ(gr.dW(1, 2), 2.0 * 2.0);
    EXPECT_DOUBLE_EQ(gr.db(0), 0.5);
    EXPECT_DOUBLE_EQ(gr.dx[0], 0.5 * 1 + 2.0 * -1);
    EXPECT_THROW(dm::linear(w, b, Vec{1.0}), ShapeMismatch);
}

TEST(Linear, RowsAgreeWithSingle) {
    std::mt19937_64 g(3);
    std::normal_distribution<double> n;
    dm::Matrix w(3, 4), x(5, 4);
    dm::ColVec b(3);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = n(g);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = n(g);
    for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = n(g);
    const auto y = dm::linear_rows(x, w, b);
    for (Eigen::Index r = 0; r < 5; ++r) {
        const Vec xr(x.row(r).data(), x.row(r).data() + 4);
        const auto yr = dm::linear(w, b, xr);
        for (Eigen::Index c = 0; c < 3; ++c) EXPECT_NEAR(y(r, c), yr[static_cast<std::size_t>(c)], 1e-14);
    }
}

TEST(GradCheck, AcceptsCorrectAndRejectsWrongGradient) {
    dm::ScalarObjective good = [](std::span<const double> p, Vec* g) {
        double f = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            f += std::sin(p[i]) * p[i];
            if (g) (*g)[i] = std::cos(p[i]) * p[i] + std::sin(p[i]);
        }
        return f;
    };
    dm::ScalarObjective bad = [&](std::span<const double> p, Vec* g) {
        const double f = good(p, g);
        if (g) (*g)[0] += 0.1;
        return f;
    };
    const Vec p{0.3, -1.2, 2.0};
    EXPECT_LT(dm::grad_check(good, p), 1e-7);
    EXPECT_GT(dm::grad_check(bad, p), 0.05);
}
