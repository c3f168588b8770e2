#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <functional>
#include <mutex>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "abstain/config.hpp"
#include "abstain/corpus.hpp"
#include "abstain/error.hpp"
#include "abstain/metrics.hpp"
#include "abstain/model.hpp"
#include "abstain/pairing.hpp"
#include "abstain/train.hpp"

namespace abstain {

// ---------------------------------------------------------------------------
// kNN baseline

/// Exact cosine kNN over unit reference rows. Score = 1 - (k-th largest
/// cosine), so farther from the reference set scores higher.
class KnnIndex {
public:
    KnnIndex(dm::Matrix refs, std::size_t k) : refs_(std::move(refs)), k_(k) {
        if (k_ == 0) throw ConfigError("knn k must be >= 1");
        if (static_cast<std::size_t>(refs_.rows()) < k_) {
            throw IndexTooSmall("knn reference set has " + std::to_string(refs_.rows()) + " rows, k = " +
                                std::to_string(k_));
        }
    }

    /// Train-split anchors and positives.
    static KnnIndex from_store(const EmbeddingStore& store, std::size_t k) {
        auto rows = store.indices(Role::anchor, Split::train);
        const auto pos = store.indices(Role::positive_pool, Split::train);
        rows.insert(rows.end(), pos.begin(), pos.end());
        std::sort(rows.begin(), rows.end());
        return {store.gather(rows), k};
    }

    [[nodiscard]] std::size_t k() const noexcept { return k_; }
    [[nodiscard]] std::size_t size() const noexcept { return static_cast<std::size_t>(refs_.rows()); }
    [[nodiscard]] std::size_t dim() const noexcept { return static_cast<std::size_t>(refs_.cols()); }

    [[nodiscard]] double score(std::span<const double> x) const {
        if (x.size() != dim()) throw DimensionMismatch("knn: query dim " + std::to_string(x.size()));
        const Eigen::Map<const dm::ColVec> q(x.data(), static_cast<Eigen::Index>(x.size()));
        const dm::ColVec sims = refs_ * q;
        return kth(std::vector<double>(sims.data(), sims.data() + sims.size()));
    }

    [[nodiscard]] std::vector<double> score_rows(const dm::Matrix& q) const {
        if (static_cast<std::size_t>(q.cols()) != dim()) throw DimensionMismatch("knn: query dim mismatch");
        const dm::Matrix sims = q * refs_.transpose();
        std::vector<double> out(static_cast<std::size_t>(q.rows()));
        std::vector<double> row(size());
        for (Eigen::Index i = 0; i < q.rows(); ++i) {
            for (Eigen::Index j = 0; j < sims.cols(); ++j) row[static_cast<std::size_t>(j)] = sims(i, j);
            out[static_cast<std::size_t>(i)] = kth(row);
        }
        return out;
    }

private:
    [[nodiscard]] double kth(std::vector<double> sims) const {
        std::nth_element(sims.begin(), sims.begin() + static_cast<std::ptrdiff_t>(k_ - 1), sims.end(),
                         std::greater<>());
        return 1.0 - sims[k_ - 1];
    }

    dm::Matrix refs_;
    std::size_t k_;
};

// ---------------------------------------------------------------------------
// Scoring

inline Method method_for(Head h) noexcept { return h == Head::ebm ? Method::ebm_energy : Method::softmax_prob; }

/// Single-embedding abstention score from a trained model.
inline double score(Method m, const ModelParams& p, std::span<const double> x) {
    const auto z = project(p, x);
    if (m == Method::ebm_energy) return energy(p, z);
    if (m == Method::softmax_prob) return prob_ood(softmax_logits(p, z));
    throw ConfigError("score: kNN needs an index, not model parameters");
}

inline double score(const KnnIndex& index, std::span<const double> x) { return index.score(x); }

/// Scores every row of `x` (batched forward).
using RowScorer = std::function<std::vector<double>(const dm::Matrix&)>;

inline RowScorer model_scorer(const ModelParams& p, Method m) {
    return [&p, m](const dm::Matrix& x) {
        const auto pc = project_rows(p, x);
        std::vector<double> out(static_cast<std::size_t>(x.rows()));
        if (m == Method::ebm_energy) {
            const auto hc = energy_rows(p, pc.z.z);
            for (Eigen::Index i = 0; i < x.rows(); ++i) out[static_cast<std::size_t>(i)] = hc.out(i, 0);
        } else {
            const auto hc = softmax_rows(p, pc.z.z);
            for (Eigen::Index i = 0; i < x.rows(); ++i) {
                out[static_cast<std::size_t>(i)] = prob_ood({hc.out(i, 0), hc.out(i, 1)});
            }
        }
        return out;
    };
}

inline RowScorer knn_scorer(const KnnIndex& index) {
    return [&index](const dm::Matrix& x) { return index.score_rows(x); };
}

// ---------------------------------------------------------------------------
// Scenarios

struct ScenarioRows {
    std::vector<std::size_t> id;
    std::vector<std::size_t> ood;
};

/// ID = the split's anchors. hard = their paired hard negatives; easy = the
/// easy-OOD items assigned to the split (balanced to the anchor count at
/// split time); mixed = both OOD kinds against the same ID rows.
inline ScenarioRows scenario_rows(const EmbeddingStore& store, Split split, Scenario sc) {
    ScenarioRows r;
    r.id = store.indices(Role::anchor, split);
    if (sc == Scenario::hard || sc == Scenario::mixed) {
        const auto h = store.indices(Role::hard_negative, split);
        r.ood.insert(r.ood.end(), h.begin(), h.end());
    }
    if (sc == Scenario::easy || sc == Scenario::mixed) {
        const auto e = store.indices(Role::easy_ood, split);
        r.ood.insert(r.ood.end(), e.begin(), e.end());
    }
    return r;
}

inline ScoredSet scored_set(const EmbeddingStore& store, const ScenarioRows& rows, const RowScorer& scorer, Method m) {
    std::vector<std::size_t> all = rows.id;
    all.insert(all.end(), rows.ood.begin(), rows.ood.end());
    ScoredSet s;
    s.method = m;
    s.scores = scorer(store.gather(all));
    s.labels.assign(all.size(), false);
    std::fill(s.labels.begin() + static_cast<std::ptrdiff_t>(rows.id.size()), s.labels.end(), true);
    return s;
}

struct ScenarioResult {
    Thresholds thresholds;
    MetricReport report;
};

/// Calibrates on val, then evaluates on test with the frozen thresholds.
inline ScenarioResult run_scenario(const EmbeddingStore& store, const RowScorer& scorer, Method m, Scenario sc) {
    ScenarioResult r;
    r.thresholds = calibrate(scored_set(store, scenario_rows(store, Split::val, sc), scorer, m));
    r.report = evaluate(scored_set(store, scenario_rows(store, Split::test, sc), scorer, m), r.thresholds);
    r.report.scenario = std::string(to_string(sc));
    return r;
}

// ---------------------------------------------------------------------------
// Ablation grid

inline constexpr std::array<Scenario, 3> all_scenarios{Scenario::hard, Scenario::easy, Scenario::mixed};
inline constexpr std::array<Method, 3> all_methods{Method::ebm_energy, Method::softmax_prob, Method::knn};

struct TrainedCell {
    NegativeExposure exposure;
    Head head;
    FitResult fit;
    std::vector<ScenarioResult> scenarios;
};

struct GridResult {
    std::vector<MetricReport> cells;  // config-major, then method, then scenario
    std::vector<TrainedCell> trained;
    std::vector<ScenarioResult> knn;
    std::vector<std::string> failures;
};

/// Sets up training for one (exposure, head) pair and fits it.
inline FitResult train_cell(const EmbeddingStore& store, const RunConfig& cfg, NegativeExposure ex, Head head,
                            const BatchObserver& observer = {}) {
    RunConfig c = cfg;
    c.pairing.exposure = ex;
    c.loss.head = head;
    const auto train = assemble_tuples(store, c.pairing, Split::train);
    const auto val = assemble_tuples(store, c.pairing, Split::val);
    return fit(store, train, val, c.loss, c.train_config(), c.pairing, config_hash(c), observer);
}

/// Worker count from ABSTAIN_THREADS (default 1, at least 1).
inline std::size_t worker_cap() {
    if (const char* v = std::getenv("ABSTAIN_THREADS")) {
        try {
            const long n = std::stol(v);
            if (n >= 1) return static_cast<std::size_t>(n);
        } catch (const std::exception&) {
        }
        throw ConfigError("ABSTAIN_THREADS must be a positive integer");
    }
    return 1;
}

/// Trains both parametric heads per exposure, scores all three methods in
/// all three scenarios. kNN is scored once and repeated in every config row.
/// A failing cell is recorded in `failures` and leaves its reports out.
/// `observer` may be called from several worker threads.
inline GridResult ablation_grid(const EmbeddingStore& store, const RunConfig& cfg,
                                std::span<const NegativeExposure> configs, std::size_t workers = 1,
                                const BatchObserver& observer = {}) {
    GridResult g;
    const auto index = KnnIndex::from_store(store, cfg.knn_k);
    for (auto sc : all_scenarios) g.knn.push_back(run_scenario(store, knn_scorer(index), Method::knn, sc));

    struct Task {
        NegativeExposure ex;
        Head head;
    };
    std::vector<Task> tasks;
    for (auto ex : configs) {
        for (auto h : {Head::ebm, Head::softmax}) tasks.push_back({ex, h});
    }
    std::vector<std::optional<TrainedCell>> done(tasks.size());
    std::vector<std::string> errors(tasks.size());
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (std::size_t i = next++; i < tasks.size(); i = next++) {
            const auto& t = tasks[i];
            try {
                TrainedCell cell{t.ex, t.head, train_cell(store, cfg, t.ex, t.head, observer), {}};
                const auto scorer = model_scorer(cell.fit.best.params, method_for(t.head));
                for (auto sc : all_scenarios) cell.scenarios.push_back(run_scenario(store, scorer, method_for(t.head), sc));
                done[i] = std::move(cell);
            } catch (const Error& e) {
                errors[i] = std::string(to_string(t.ex)) + "/" + std::string(to_string(t.head)) + ": " + e.kind() +
                            ": " + e.what();
            }
        }
    };
    const std::size_t n_workers = std::max<std::size_t>(1, std::min(workers, tasks.size()));
    if (n_workers == 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(work);
        for (auto& th : pool) th.join();
    }

    for (std::size_t i = 0; i < tasks.size(); ++i) {
        if (!errors[i].empty()) g.failures.push_back(errors[i]);
    }
    for (auto ex : configs) {
        const std::string name(to_string(ex));
        for (auto m : all_methods) {
            const std::vector<ScenarioResult>* res = nullptr;
            if (m == Method::knn) {
                res = &g.knn;
            } else {
                for (std::size_t i = 0; i < tasks.size(); ++i) {
                    if (tasks[i].ex == ex && method_for(tasks[i].head) == m && done[i]) res = &done[i]->scenarios;
                }
            }
            if (!res) continue;
            for (const auto& r : *res) {
                MetricReport rep = r.report;
                rep.config = name;
                rep.seed = cfg.seed;
                g.cells.push_back(rep);
            }
        }
    }
    for (auto& d : done) {
        if (d) g.trained.push_back(std::move(*d));
    }
    return g;
}

inline const MetricReport* find_cell(const std::vector<MetricReport>& cells, std::string_view config,
                                     std::string_view method, std::string_view scenario) {
    for (const auto& c : cells) {
        if (c.config == config && c.method == method && c.scenario == scenario) return &c;
    }
    return nullptr;
}

inline std::string fmt_double(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string grid_csv(const std::vector<MetricReport>& cells) {
    std::string out = "config,method,scenario,auroc,aupr,fpr_at_95,det_err,tau_deterr,tau_95,n_id,n_ood,seed\n";
    for (const auto& c : cells) {
        out += c.config + "," + c.method + "," + c.scenario + "," + fmt_double(c.auroc) + "," + fmt_double(c.aupr) +
               "," + fmt_double(c.fpr_at_95) + "," + fmt_double(c.det_err) + "," + fmt_double(c.tau_deterr) + "," +
               fmt_double(c.tau_95) + "," + std::to_string(c.n_id) + "," + std::to_string(c.n_ood) + "," +
               std::to_string(c.seed) + "\n";
    }
    return out;
}

/// FPR@95 per (config, method) in the hard scenario.
inline std::string plot_fpr95_csv(const std::vector<MetricReport>& cells) {
    std::string out = "config,method,fpr_at_95\n";
    for (const auto& c : cells) {
        if (c.scenario == "hard") out += c.config + "," + c.method + "," + fmt_double(c.fpr_at_95) + "\n";
    }
    return out;
}

/// DetErr per method, hard scenario, all-negatives training.
inline std::string plot_deterr_csv(const std::vector<MetricReport>& cells) {
    std::string out = "method,det_err\n";
    for (const auto& c : cells) {
        if (c.scenario == "hard" && c.config == "all") out += c.method + "," + fmt_double(c.det_err) + "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// Qualitative orderings over a grid

struct OrderingCheck {
    int id = 0;
    std::string name;
    bool pass = false;
    std::string detail;
};

inline std::vector<OrderingCheck> check_orderings(const std::vector<MetricReport>& cells) {
    std::vector<OrderingCheck> out;
    auto get = [&](const char* cfg, const char* m, const char* sc) -> const MetricReport* {
        return find_cell(cells, cfg, m, sc);
    };
    auto missing = [&](int id, const char* name) {
        out.push_back({id, name, false, "grid cells missing"});
    };
    char buf[256];

    {
        const auto* e = get("all", "ebm", "hard");
        const auto* s = get("all", "softmax", "hard");
        if (!e || !s) {
            missing(7, "all negatives: EBM beats softmax on hard OOD");
        } else {
            const bool ok = e->auroc >= s->auroc + 0.01 && e->det_err < s->det_err;
            std::snprintf(buf, sizeof buf, "AUROC ebm %.4f vs softmax %.4f; DetErr ebm %.4f vs softmax %.4f", e->auroc,
                          s->auroc, e->det_err, s->det_err);
            out.push_back({7, "all negatives: EBM beats softmax on hard OOD", ok, buf});
        }
    }
    {
        const auto* ea = get("all", "ebm", "easy");
        const auto* eh = get("hard_only", "ebm", "easy");
        const auto* sa = get("all", "softmax", "easy");
        const auto* sh = get("hard_only", "softmax", "easy");
        if (!ea || !eh || !sa || !sh) {
            missing(8, "hard_only collapses easy-OOD detection");
        } else {
            const bool ok = ea->auroc - eh->auroc >= 0.15 && sa->auroc - sh->auroc >= 0.15;
            std::snprintf(buf, sizeof buf, "easy AUROC ebm %.4f -> %.4f, softmax %.4f -> %.4f", ea->auroc, eh->auroc,
                          sa->auroc, sh->auroc);
            out.push_back({8, "hard_only collapses easy-OOD detection", ok, buf});
        }
    }
    {
        const char* cfgs[] = {"easy_only", "no_hard"};
        bool ok = true;
        bool have = true;
        std::string d;
        for (const char* c : cfgs) {
            for (const char* m : {"ebm", "softmax"}) {
                const auto* r = get(c, m, "hard");
                if (!r) {
                    have = false;
                    continue;
                }
                ok = ok && r->auroc <= 0.65;
                std::snprintf(buf, sizeof buf, "%s/%s hard AUROC %.4f; ", c, m, r->auroc);
                d += buf;
            }
        }
        if (!have) {
            missing(9, "easy_only / no_hard collapse hard-OOD detection");
        } else {
            out.push_back({9, "easy_only / no_hard collapse hard-OOD detection", ok, d});
        }
    }
    {
        const auto* h = get("all", "knn", "hard");
        const auto* e = get("all", "knn", "easy");
        if (!h || !e) {
            missing(10, "kNN: strong on easy, weaker on hard, config-independent");
        } else {
            bool same = true;
            for (const auto& c : cells) {
                if (c.method != "knn") continue;
                const auto* ref = get("all", "knn", c.scenario.c_str());
                same = same && ref && c.auroc == ref->auroc && c.aupr == ref->aupr && c.fpr_at_95 == ref->fpr_at_95 &&
                       c.det_err == ref->det_err && c.tau_deterr == ref->tau_deterr && c.tau_95 == ref->tau_95;
            }
            const bool ok = e->auroc >= 0.97 && h->auroc <= e->auroc - 0.05 && same;
            std::snprintf(buf, sizeof buf, "kNN easy %.4f, hard %.4f, identical across configs: %s", e->auroc, h->auroc,
                          same ? "yes" : "no");
            out.push_back({10, "kNN: strong on easy, weaker on hard, config-independent", ok, buf});
        }
    }
    {
        const auto* a = get("all", "ebm", "mixed");
        const auto* he = get("hard_easy", "ebm", "mixed");
        if (!a || !he) {
            missing(11, "hard+easy recovers mixed detection");
        } else {
            const bool ok = std::abs(a->auroc - he->auroc) <= 0.02;
            std::snprintf(buf, sizeof buf, "EBM mixed AUROC all %.4f vs hard_easy %.4f", a->auroc, he->auroc);
            out.push_back({11, "hard+easy recovers mixed detection", ok, buf});
        }
    }
    return out;
}

}  // namespace abstain
