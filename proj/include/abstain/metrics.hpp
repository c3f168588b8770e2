#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "abstain/error.hpp"

namespace abstain {

enum class Method : std::uint8_t { ebm_energy, softmax_prob, knn };

inline std::string_view to_string(Method m) noexcept {
    switch (m) {
        case Method::ebm_energy: return "ebm";
        case Method::softmax_prob: return "softmax";
        case Method::knn: return "knn";
    }
    return "?";
}

inline std::optional<Method> parse_method(std::string_view s) noexcept {
    for (auto m : {Method::ebm_energy, Method::softmax_prob, Method::knn}) {
        if (to_string(m) == s) return m;
    }
    return std::nullopt;
}

/// Scores oriented so that higher means "more likely OOD, abstain";
/// labels are true for OOD.
struct ScoredSet {
    std::vector<double> scores;
    std::vector<bool> labels;
    Method method = Method::ebm_energy;

    [[nodiscard]] std::size_t n_ood() const { return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), true)); }
    [[nodiscard]] std::size_t n_id() const { return labels.size() - n_ood(); }

    void require_both_classes(const char* what) const {
        if (scores.size() != labels.size()) throw ShapeMismatch(std::string(what) + ": scores vs labels");
        if (n_ood() == 0 || n_id() == 0) throw SingleClass(std::string(what) + ": both classes are required");
    }
};

/// Mann-Whitney U / (n_ood * n_id) with average ranks for ties.
inline double auroc(const ScoredSet& s) {
    s.require_both_classes("auroc");
    const std::size_t n = s.scores.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s.scores[a] < s.scores[b]; });
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && s.scores[idx[j]] == s.scores[idx[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
        for (std::size_t k = i; k < j; ++k) {
            if (s.labels[idx[k]]) rank_sum += avg;
        }
        i = j;
    }
    const auto n1 = static_cast<double>(s.n_ood());
    const auto n0 = static_cast<double>(s.n_id());
    return (rank_sum - n1 * (n1 + 1.0) / 2.0) / (n1 * n0);
}

/// Step-wise average precision with OOD as the positive class. Equal
/// scores form one block: precision is taken after the whole block.
inline double aupr(const ScoredSet& s) {
    s.require_both_classes("aupr");
    const std::size_t n = s.scores.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s.scores[a] > s.scores[b]; });
    const auto n_pos = static_cast<double>(s.n_ood());
    double tp = 0.0, fp = 0.0, ap = 0.0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        double pos = 0.0, neg = 0.0;
        while (j < n && s.scores[idx[j]] == s.scores[idx[i]]) {
            (s.labels[idx[j]] ? pos : neg) += 1.0;
            ++j;
        }
        tp += pos;
        fp += neg;
        if (pos > 0) ap += pos * (tp / (tp + fp));
        i = j;
    }
    return ap / n_pos;
}

/// Rates when abstaining iff score > tau.
struct Rates {
    double tpr = 0.0;  // OOD scored above tau
    double fpr = 0.0;  // ID scored above tau
    [[nodiscard]] double fnr() const noexcept { return 1.0 - tpr; }
    [[nodiscard]] double det_err() const noexcept { return 0.5 * (fpr + fnr()); }
};

inline Rates rates_at(const ScoredSet& s, double tau) {
    s.require_both_classes("rates_at");
    double above_ood = 0.0, above_id = 0.0;
    for (std::size_t i = 0; i < s.scores.size(); ++i) {
        if (s.scores[i] > tau) (s.labels[i] ? above_ood : above_id) += 1.0;
    }
    return {above_ood / static_cast<double>(s.n_ood()), above_id / static_cast<double>(s.n_id())};
}

/// -inf, midpoints of adjacent sorted unique scores, +inf.
inline std::vector<double> candidate_thresholds(const std::vector<double>& scores) {
    std::vector<double> u(scores);
    std::sort(u.begin(), u.end());
    u.erase(std::unique(u.begin(), u.end()), u.end());
    std::vector<double> c;
    c.reserve(u.size() + 1);
    c.push_back(-std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i + 1 < u.size(); ++i) c.push_back(0.5 * (u[i] + u[i + 1]));
    c.push_back(std::numeric_limits<double>::infinity());
    return c;
}

struct Thresholds {
    double tau_deterr = 0.0;
    double tau_95 = 0.0;
    std::string calibrated_on = "val";
};

/// tau_deterr minimises (FPR + FNR) / 2 over the candidates (first, i.e.
/// lowest, candidate on ties); tau_95 has TPR closest to 0.95 (ties: higher
/// TPR, then lower FPR, then lower threshold).
inline Thresholds calibrate(const ScoredSet& val) {
    val.require_both_classes("calibrate");
    std::vector<double> ood, id;
    for (std::size_t i = 0; i < val.scores.size(); ++i) (val.labels[i] ? ood : id).push_back(val.scores[i]);
    std::sort(ood.begin(), ood.end());
    std::sort(id.begin(), id.end());
    auto frac_above = [](const std::vector<double>& v, double tau) {
        const auto it = std::upper_bound(v.begin(), v.end(), tau);
        return static_cast<double>(v.end() - it) / static_cast<double>(v.size());
    };

    Thresholds th;
    double best_err = std::numeric_limits<double>::infinity();
    double best_gap = std::numeric_limits<double>::infinity();
    Rates best95{};
    bool have95 = false;
    for (double tau : candidate_thresholds(val.scores)) {
        const Rates r{frac_above(ood, tau), frac_above(id, tau)};
        if (r.det_err() < best_err) {
            best_err = r.det_err();
            th.tau_deterr = tau;
        }
        const double gap = std::abs(r.tpr - 0.95);
        const bool better = !have95 || gap < best_gap ||
                            (gap == best_gap && (r.tpr > best95.tpr || (r.tpr == best95.tpr && r.fpr < best95.fpr)));
        if (better) {
            best_gap = gap;
            best95 = r;
            th.tau_95 = tau;
            have95 = true;
        }
    }
    return th;
}

struct MetricReport {
    std::string method;
    std::string config;
    std::string scenario;
    double auroc = 0.0;
    double aupr = 0.0;
    double fpr_at_95 = 0.0;
    double det_err = 0.0;
    double tau_deterr = 0.0;
    double tau_95 = 0.0;
    std::size_t n_id = 0;
    std::size_t n_ood = 0;
    std::uint64_t seed = 0;
};

/// Threshold-free metrics on `test` plus rates at the frozen thresholds.
inline MetricReport evaluate(const ScoredSet& test, const Thresholds& th) {
    MetricReport r;
    r.method = std::string(to_string(test.method));
    r.auroc = auroc(test);
    r.aupr = aupr(test);
    r.fpr_at_95 = rates_at(test, th.tau_95).fpr;
    r.det_err = rates_at(test, th.tau_deterr).det_err();
    r.tau_deterr = th.tau_deterr;
    r.tau_95 = th.tau_95;
    r.n_id = test.n_id();
    r.n_ood = test.n_ood();
    return r;
}

/// JSON cannot hold infinities; sentinel thresholds are written as strings.
inline nlohmann::json threshold_json(double tau) {
    if (std::isinf(tau)) return tau > 0 ? "inf" : "-inf";
    return tau;
}

inline double threshold_from_json(const nlohmann::json& j) {
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        if (s == "inf") return std::numeric_limits<double>::infinity();
        if (s == "-inf") return -std::numeric_limits<double>::infinity();
        throw FormatError("bad threshold value '" + s + "'");
    }
    return j.get<double>();
}

inline nlohmann::json to_json(const MetricReport& r) {
    return {{"method", r.method},     {"config", r.config},
            {"scenario", r.scenario}, {"auroc", r.auroc},
            {"aupr", r.aupr},         {"fpr_at_95", r.fpr_at_95},
            {"det_err", r.det_err},   {"tau_deterr", threshold_json(r.tau_deterr)},
            {"tau_95", threshold_json(r.tau_95)},
            {"n_id", r.n_id},         {"n_ood", r.n_ood},
            {"seed", r.seed}};
}

inline MetricReport report_from_json(const nlohmann::json& j) {
    MetricReport r;
    r.method = j.at("method").get<std::string>();
    r.config = j.at("config").get<std::string>();
    r.scenario = j.at("scenario").get<std::string>();
    r.auroc = j.at("auroc").get<double>();
    r.aupr = j.at("aupr").get<double>();
    r.fpr_at_95 = j.at("fpr_at_95").get<double>();
    r.det_err = j.at("det_err").get<double>();
    r.tau_deterr = threshold_from_json(j.at("tau_deterr"));
    r.tau_95 = threshold_from_json(j.at("tau_95"));
    r.n_id = j.at("n_id").get<std::size_t>();
    r.n_ood = j.at("n_ood").get<std::size_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
    return r;
}

inline nlohmann::json to_json(const Thresholds& t) {
    return {{"tau_deterr", threshold_json(t.tau_deterr)}, {"tau_95", threshold_json(t.tau_95)},
            {"calibrated_on", t.calibrated_on}};
}

inline Thresholds thresholds_from_json(const nlohmann::json& j) {
    Thresholds t;
    t.tau_deterr = threshold_from_json(j.at("tau_deterr"));
    t.tau_95 = threshold_from_json(j.at("tau_95"));
    t.calibrated_on = j.value("calibrated_on", std::string("val"));
    return t;
}

/// Abstain iff score > tau (a score equal to tau is answered).
inline bool abstains(double score, double tau) noexcept { return score > tau; }

}  // namespace abstain
