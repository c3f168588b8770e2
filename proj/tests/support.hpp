#pragma once

// Independent reference implementations used as test oracles. Nothing here
// calls into the code under test except for plain data types.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "abstain/corpus.hpp"
#include "abstain/model.hpp"

namespace oracle {

inline std::vector<double> random_unit(std::mt19937_64& g, std::size_t d) {
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> v(d);
    double s = 0.0;
    for (auto& x : v) {
        x = n(g);
        s += x * x;
    }
    for (auto& x : v) x /= std::sqrt(s);
    return v;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

/// P(score_ood > score_id) + 0.5 P(equal), by counting all pairs.
inline double auroc_pairs(const std::vector<double>& s, const std::vector<bool>& ood) {
    double wins = 0.0, pairs = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (!ood[i]) continue;
        for (std::size_t j = 0; j < s.size(); ++j) {
            if (ood[j]) continue;
            pairs += 1.0;
            if (s[i] > s[j]) wins += 1.0;
            else if (s[i] == s[j]) wins += 0.5;
        }
    }
    return wins / pairs;
}

/// Average precision by scanning every distinct threshold from the top:
/// AP = sum over thresholds of (recall gain) * precision at that threshold.
inline double ap_thresholds(const std::vector<double>& s, const std::vector<bool>& ood) {
    std::vector<double> u(s);
    std::sort(u.begin(), u.end(), std::greater<>());
    u.erase(std::unique(u.begin(), u.end()), u.end());
    double n_pos = 0.0;
    for (bool b : ood) n_pos += b ? 1.0 : 0.0;
    double prev_recall = 0.0, ap = 0.0;
    for (double t : u) {
        double tp = 0.0, pred = 0.0;
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (s[i] >= t) {
                pred += 1.0;
                tp += ood[i] ? 1.0 : 0.0;
            }
        }
        const double recall = tp / n_pos;
        ap += (recall - prev_recall) * (tp / pred);
        prev_recall = recall;
    }
    return ap;
}

struct SweepRates {
    double tpr, fpr;
};

inline SweepRates rates(const std::vector<double>& s, const std::vector<bool>& ood, double tau) {
    double tp = 0, fp = 0, np = 0, nn = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (ood[i]) {
            np += 1;
            if (s[i] > tau) tp += 1;
        } else {
            nn += 1;
            if (s[i] > tau) fp += 1;
        }
    }
    return {tp / np, fp / nn};
}

/// Candidates built independently: every value strictly between two
/// adjacent distinct scores (their midpoint), plus +-infinity, in
/// ascending order.
inline std::vector<double> sweep_candidates(const std::vector<double>& s) {
    std::vector<double> c{-INFINITY};
    std::vector<double> sorted(s);
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 1; i < sorted.size(); ++i) {
        if (sorted[i] != sorted[i - 1]) c.push_back((sorted[i - 1] + sorted[i]) / 2.0);
    }
    c.push_back(INFINITY);
    return c;
}

struct SweepBest {
    double tau_deterr, tau_95;
};

/// Exhaustive scan over the candidates: first DetErr minimiser, and the
/// candidate whose TPR is closest to 0.95 (ties: higher TPR, then lower FPR).
inline SweepBest sweep_thresholds(const std::vector<double>& s, const std::vector<bool>& ood) {
    const auto cand = sweep_candidates(s);
    SweepBest b{cand[0], cand[0]};
    double best_err = 2.0;
    SweepRates best95{-1.0, 2.0};
    double best_gap = 2.0;
    for (double t : cand) {
        const auto r = rates(s, ood, t);
        const double err = 0.5 * (r.fpr + (1.0 - r.tpr));
        if (err < best_err) {
            best_err = err;
            b.tau_deterr = t;
        }
        const double gap = std::abs(r.tpr - 0.95);
        if (gap < best_gap || (gap == best_gap && (r.tpr > best95.tpr || (r.tpr == best95.tpr && r.fpr < best95.fpr)))) {
            best_gap = gap;
            best95 = r;
            b.tau_95 = t;
        }
    }
    return b;
}

/// Central finite differences of f at x.
inline std::vector<double> fd_gradient(const std::function<double(const std::vector<double>&)>& f,
                                       std::vector<double> x, double h = 1e-5) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double keep = x[i];
        x[i] = keep + h;
        const double fp = f(x);
        x[i] = keep - h;
        const double fm = f(x);
        x[i] = keep;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

/// ||a - b|| / max(||a||, ||b||, tiny)
inline double rel_err(const std::vector<double>& a, const std::vector<double>& b) {
    double d = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        d += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return std::sqrt(d) / std::max({std::sqrt(na), std::sqrt(nb), 1e-12});
}

/// Flattens all tensors of a parameter set.
inline std::vector<double> flatten(const abstain::ModelParams& p) {
    std::vector<double> out;
    for (auto t : p.tensors()) out.insert(out.end(), t.begin(), t.end());
    return out;
}

inline void unflatten(const std::vector<double>& v, abstain::ModelParams& p) {
    std::size_t k = 0;
    for (auto t : p.tensors()) {
        for (auto& x : t) x = v[k++];
    }
}

/// Small synthetic corpus for fast tests.
inline abstain::SynthSpec tiny_spec(std::uint64_t seed = 7) {
    abstain::SynthSpec s;
    s.dim = 64;
    s.n_id_clusters = 2;
    s.n_anchors = 120;
    s.n_easy_ood = 120;
    s.n_mid = 160;
    s.n_reserve = 30;
    s.n_ood_clusters = 2;
    s.topic_dim = 4;
    s.confusion_dim = 2;
    s.seed = seed;
    return s;
}

}  // namespace oracle
