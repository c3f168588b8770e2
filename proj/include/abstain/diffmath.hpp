#pragma once

// Forward primitives of the model/loss graph with hand-derived adjoints.
// Scalar and single-vector forms carry the contracts; the row-batched forms
// (`*_rows`) are what the training loop runs and must agree with them.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "abstain/error.hpp"

namespace abstain::dm {

using Vec = std::vector<double>;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ColVec = Eigen::VectorXd;

inline constexpr double eps_norm = 1e-12;

namespace detail {
inline void require_same_size(std::size_t a, std::size_t b, const char* what) {
    if (a != b) {
        throw ShapeMismatch(std::string(what) + ": " + std::to_string(a) + " vs " + std::to_string(b));
    }
}
}  // namespace detail

inline double dot(std::span<const double> u, std::span<const double> v) {
    detail::require_same_size(u.size(), v.size(), "dot");
    double s = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
    return s;
}

inline double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

// ---------------------------------------------------------------------------
// l2_normalize

inline Vec l2_normalize(std::span<const double> v) {
    const double n = l2_norm(v);
    if (!(n > eps_norm)) throw DegenerateNorm("l2_normalize: norm " + std::to_string(n));
    Vec out(v.begin(), v.end());
    for (auto& x : out) x /= n;
    return out;
}

/// Vector-Jacobian product of l2_normalize at v:
/// (I/|v| - v v^T/|v|^3) g = (g - u (u.g)) / |v|, u = v/|v|.
inline Vec l2_normalize_backward(std::span<const double> v, std::span<const double> grad_out) {
    detail::require_same_size(v.size(), grad_out.size(), "l2_normalize_backward");
    const double n = l2_norm(v);
    if (!(n > eps_norm)) throw DegenerateNorm("l2_normalize_backward: norm " + std::to_string(n));
    double ug = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) ug += v[i] * grad_out[i];
    ug /= n;
    Vec out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = (grad_out[i] - (v[i] / n) * ug) / n;
    return out;
}

/// Cosine of two unit vectors. Under the unit-norm contract this is the dot
/// product; d/du = v, d/dv = u.
inline double cosine(std::span<const double> u, std::span<const double> v) { return dot(u, v); }

// ---------------------------------------------------------------------------
// GELU, exact erf form

inline double normal_cdf(double x) noexcept { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

inline double normal_pdf(double x) noexcept {
    return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

inline double gelu(double x) noexcept { return x * normal_cdf(x); }

inline double gelu_grad(double x) noexcept { return normal_cdf(x) + x * normal_pdf(x); }

// ---------------------------------------------------------------------------
// softplus_T(x) = T log(1 + exp(x/T))

inline void require_temperature(double t) {
    if (!(t > 0.0)) throw NonPositiveTemperature("temperature must be > 0, got " + std::to_string(t));
}

inline double softplus_t(double x, double t) {
    require_temperature(t);
    const double s = x / t;
    return t * (std::max(s, 0.0) + std::log1p(std::exp(-std::abs(s))));
}

/// d/dx softplus_T(x) = sigmoid(x/T).
inline double softplus_t_grad(double x, double t) {
    require_temperature(t);
    const double s = x / t;
    if (s >= 0.0) return 1.0 / (1.0 + std::exp(-s));
    const double e = std::exp(s);
    return e / (1.0 + e);
}

// ---------------------------------------------------------------------------
// Masked temperature LogSumExp: (1/T) log sum_{mask} exp(T v_k)

/// `mask` is any random-access range of bool-convertible flags.
template <typename Mask>
double logsumexp_t(std::span<const double> values, const Mask& mask, double t) {
    require_temperature(t);
    detail::require_same_size(values.size(), static_cast<std::size_t>(std::size(mask)), "logsumexp_t");
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t k = 0; k < values.size(); ++k) {
        if (mask[k]) {
            mx = std::max(mx, values[k]);
            any = true;
        }
    }
    if (!any) throw EmptyMask("logsumexp_t: no valid entries");
    double s = 0.0;
    for (std::size_t k = 0; k < values.size(); ++k) {
        if (mask[k]) s += std::exp(t * (values[k] - mx));
    }
    return mx + std::log(s) / t;
}

/// Gradient of logsumexp_t w.r.t. each value: softmax(T v) over the mask,
/// zero at masked-out slots.
template <typename Mask>
Vec logsumexp_t_grad(std::span<const double> values, const Mask& mask, double t) {
    const double lse = logsumexp_t(values, mask, t);
    Vec w(values.size(), 0.0);
    for (std::size_t k = 0; k < values.size(); ++k) {
        if (mask[k]) w[k] = std::exp(t * (values[k] - lse));
    }
    return w;
}

// ---------------------------------------------------------------------------
// Affine layer y = W x + b

struct LinearGrads {
    Matrix dW;
    ColVec db;
    Vec dx;
};

inline Vec linear(const Matrix& w, const ColVec& b, std::span<const double> x) {
    detail::require_same_size(static_cast<std::size_t>(w.cols()), x.size(), "linear: W cols vs x");
    detail::require_same_size(static_cast<std::size_t>(w.rows()), static_cast<std::size_t>(b.size()),
                              "linear: W rows vs b");
    const Eigen::Map<const ColVec> xv(x.data(), static_cast<Eigen::Index>(x.size()));
    const ColVec y = w * xv + b;
    return {y.data(), y.data() + y.size()};
}

/// dW = g x^T, db = g, dx = W^T g.
inline LinearGrads linear_backward(const Matrix& w, std::span<const double> x, std::span<const double> g) {
    detail::require_same_size(static_cast<std::size_t>(w.cols()), x.size(), "linear_backward: W cols vs x");
    detail::require_same_size(static_cast<std::size_t>(w.rows()), g.size(), "linear_backward: W rows vs g");
    const Eigen::Map<const ColVec> xv(x.data(), static_cast<Eigen::Index>(x.size()));
    const Eigen::Map<const ColVec> gv(g.data(), static_cast<Eigen::Index>(g.size()));
    LinearGrads out;
    out.dW = gv * xv.transpose();
    out.db = gv;
    const ColVec dx = w.transpose() * gv;
    out.dx.assign(dx.data(), dx.data() + dx.size());
    return out;
}

// ---------------------------------------------------------------------------
// Row-batched forms. Each row of X is one example.

/// Y = X W^T + 1 b^T
inline Matrix linear_rows(const Matrix& x, const Matrix& w, const ColVec& b) {
    if (x.cols() != w.cols()) {
        throw ShapeMismatch("linear_rows: X cols " + std::to_string(x.cols()) + " vs W cols " +
                            std::to_string(w.cols()));
    }
    Matrix y = x * w.transpose();
    y.rowwise() += b.transpose();
    return y;
}

inline Matrix gelu_rows(const Matrix& h) { return h.unaryExpr([](double v) { return gelu(v); }); }

/// dH = dG .* gelu'(H)
inline Matrix gelu_rows_backward(const Matrix& h, const Matrix& grad_out) {
    return grad_out.cwiseProduct(h.unaryExpr([](double v) { return gelu_grad(v); }));
}

struct NormalizedRows {
    Matrix z;
    ColVec norms;
};

inline NormalizedRows normalize_rows(const Matrix& u) {
    NormalizedRows out{Matrix(u.rows(), u.cols()), ColVec(u.rows())};
    for (Eigen::Index i = 0; i < u.rows(); ++i) {
        const double n = u.row(i).norm();
        if (!(n > eps_norm)) throw DegenerateNorm("normalize_rows: row " + std::to_string(i));
        out.norms(i) = n;
        out.z.row(i) = u.row(i) / n;
    }
    return out;
}

/// Row-wise VJP of l2_normalize: dU_i = (dZ_i - z_i (z_i . dZ_i)) / |u_i|.
inline Matrix normalize_rows_backward(const NormalizedRows& fwd, const Matrix& grad_out) {
    Matrix du(grad_out.rows(), grad_out.cols());
    for (Eigen::Index i = 0; i < grad_out.rows(); ++i) {
        const double zg = fwd.z.row(i).dot(grad_out.row(i));
        du.row(i) = (grad_out.row(i) - fwd.z.row(i) * zg) / fwd.norms(i);
    }
    return du;
}

// ---------------------------------------------------------------------------
// Finite-difference checker

/// Objective for grad_check: returns f(params); when `grad` is non-null it
/// must also be filled with the analytic gradient (same length as params).
using ScalarObjective = std::function<double(std::span<const double> params, Vec* grad)>;

/// Max over coordinates of |analytic - central difference| / max(1, |central difference|).
inline double grad_check(const ScalarObjective& f, std::span<const double> params, double eps = 1e-4) {
    Vec analytic(params.size(), 0.0);
    f(params, &analytic);
    Vec probe(params.begin(), params.end());
    double worst = 0.0;
    for (std::size_t i = 0; i < probe.size(); ++i) {
        const double keep = probe[i];
        probe[i] = keep + eps;
        const double fp = f(probe, nullptr);
        probe[i] = keep - eps;
        const double fm = f(probe, nullptr);
        probe[i] = keep;
        const double fd = (fp - fm) / (2.0 * eps);
        worst = std::max(worst, std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd)));
    }
    return worst;
}

}  // namespace abstain::dm
