#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "abstain/config.hpp"
#include "abstain/corpus.hpp"
#include "abstain/evalx.hpp"
#include "abstain/metrics.hpp"
#include "abstain/model.hpp"
#include "abstain/pairing.hpp"
#include "abstain/train.hpp"

namespace abstain::cmd {

namespace fs = std::filesystem;

/// Inputs shared by the commands. Paths left empty fall back to files in
/// `out` written by earlier commands.
struct Context {
    RunConfig cfg;
    fs::path out = "out";
    std::optional<fs::path> data;
    std::optional<fs::path> checkpoint;
    std::optional<fs::path> thresholds;
    std::optional<Method> method;  // for calibrate/eval/score without a checkpoint (knn)
    std::optional<Scenario> scenario;  // eval: only this scenario
    bool strict = false;
    std::ostream* warn = &std::cerr;
};

inline void write_json(const fs::path& p, const nlohmann::json& j) { io::write_file(p, j.dump(2) + "\n"); }

/// Effective config beside the outputs, with its hash.
inline void write_config(const Context& ctx) {
    auto j = to_json(ctx.cfg);
    write_json(ctx.out / "config.json", j);
    io::write_file(ctx.out / "config.hash", config_hash(ctx.cfg) + "\n");
}

/// Loads --data, else `out/data.emb1`, else generates the synthetic corpus.
/// Splits are assigned (deterministically from the seed) when the store has
/// none.
inline EmbeddingStore obtain_store(const Context& ctx) {
    EmbeddingStore store;
    if (ctx.data) {
        store = load_embeddings(*ctx.data);
    } else if (fs::exists(ctx.out / "data.emb1")) {
        store = load_embeddings(ctx.out / "data.emb1");
    } else {
        store = synth_corpus(ctx.cfg.synth_spec());
    }
    if (store.count(Split::unassigned) == store.size()) store = assign_splits(store, ctx.cfg.splits, ctx.cfg.seed);
    return store;
}

// ---------------------------------------------------------------------------

inline nlohmann::json gen_data(const Context& ctx) {
    const auto store = synth_corpus(ctx.cfg.synth_spec());
    save_embeddings(store, ctx.out / "data.emb1");
    auto summary = store.summary();
    summary["data_hash"] = data_hash(ctx.cfg);
    write_json(ctx.out / "data_summary.json", summary);
    write_config(ctx);
    return summary;
}

inline nlohmann::json prep(const Context& ctx) {
    const auto store = obtain_store(ctx);
    save_embeddings(store, ctx.out / "prepared.emb1");
    const auto train = assemble_tuples(store, ctx.cfg.pairing, Split::train);
    const auto val = assemble_tuples(store, ctx.cfg.pairing, Split::val);
    io::write_file(ctx.out / "tuples_train.jsonl", tuples_to_jsonl(store, train));
    io::write_file(ctx.out / "tuples_val.jsonl", tuples_to_jsonl(store, val));
    nlohmann::json s = {
        {"negatives", std::string(to_string(ctx.cfg.pairing.exposure))},
        {"train_anchors", store.indices(Role::anchor, Split::train).size()},
        {"val_anchors", store.indices(Role::anchor, Split::val).size()},
        {"train_tuples", train.tuples.size()},
        {"val_tuples", val.tuples.size()},
        {"ood_pool", train.ood_pool.size()},
        {"store", store.summary()},
    };
    write_json(ctx.out / "prep_summary.json", s);
    write_config(ctx);
    return s;
}

inline FitResult train(const Context& ctx, const BatchObserver& observer = {}) {
    const auto store = obtain_store(ctx);
    const auto& c = ctx.cfg;
    const auto tr = assemble_tuples(store, c.pairing, Split::train);
    const auto va = assemble_tuples(store, c.pairing, Split::val);
    auto result = fit(store, tr, va, c.loss, c.train_config(), c.pairing, config_hash(c), observer);
    save_checkpoint(result.best, ctx.out / "checkpoint.ckpt");
    io::write_file(ctx.out / "history.csv", history_csv(result.history));
    write_json(ctx.out / "history.json",
               {{"history", history_json(result.history)}, {"best_epoch", result.best.epoch},
                {"best_val_loss", result.best.val_loss}, {"config_hash", result.best.config_hash}});
    write_config(ctx);
    return result;
}

namespace detail {

/// A loaded scorer: model parameters or a kNN index, whichever applies.
struct Scorer {
    Method method = Method::knn;
    std::optional<Checkpoint> ckpt;
    std::optional<KnnIndex> index;

    [[nodiscard]] RowScorer rows() const {
        if (ckpt) return model_scorer(ckpt->params, method);
        return knn_scorer(*index);
    }
    [[nodiscard]] double one(std::span<const double> x) const {
        if (ckpt) return abstain::score(method, ckpt->params, x);
        return index->score(x);
    }
};

inline void check_hash(const Context& ctx, const Checkpoint& ck) {
    RunConfig c = ctx.cfg;
    c.loss.head = ck.head;
    const auto expected = config_hash(c);
    if (ck.config_hash == expected) return;
    const std::string msg = "checkpoint config hash " + ck.config_hash + " differs from run config hash " + expected;
    if (ctx.strict) throw ConfigHashMismatch(msg);
    if (ctx.warn) *ctx.warn << nlohmann::json{{"warning", "ConfigHashMismatch"}, {"message", msg}}.dump() << "\n";
}

inline Scorer load_scorer(const Context& ctx, const EmbeddingStore* store) {
    Scorer s;
    const bool want_knn = ctx.method && *ctx.method == Method::knn;
    if (!want_knn) {
        const fs::path p = ctx.checkpoint ? *ctx.checkpoint : ctx.out / "checkpoint.ckpt";
        s.ckpt = load_checkpoint(p);
        check_hash(ctx, *s.ckpt);
        s.method = method_for(s.ckpt->head);
        if (ctx.method && *ctx.method != s.method) {
            throw ConfigError("checkpoint head '" + std::string(to_string(s.ckpt->head)) + "' does not match --method");
        }
        return s;
    }
    if (!store) throw ConfigError("kNN scoring needs the embedding store (--data)");
    s.method = Method::knn;
    s.index = KnnIndex::from_store(*store, ctx.cfg.knn_k);
    return s;
}

inline nlohmann::json thresholds_doc(const Thresholds& t, Method m, Scenario sc, const std::string& hash) {
    auto j = to_json(t);
    j["method"] = std::string(to_string(m));
    j["scenario"] = std::string(to_string(sc));
    j["config_hash"] = hash;
    return j;
}

}  // namespace detail

/// Thresholds from the val split only, for the configured scenario.
inline Thresholds calibrate(const Context& ctx) {
    const auto store = obtain_store(ctx);
    const auto sc = ctx.scenario.value_or(ctx.cfg.scenario);
    const auto s = detail::load_scorer(ctx, &store);
    const auto th = abstain::calibrate(scored_set(store, scenario_rows(store, Split::val, sc), s.rows(), s.method));
    write_json(ctx.out / "thresholds.json", detail::thresholds_doc(th, s.method, sc, config_hash(ctx.cfg)));
    return th;
}

inline std::vector<MetricReport> eval(const Context& ctx) {
    const auto store = obtain_store(ctx);
    const auto s = detail::load_scorer(ctx, &store);
    std::vector<Scenario> scs;
    if (ctx.scenario) {
        scs.push_back(*ctx.scenario);
    } else {
        scs.assign(all_scenarios.begin(), all_scenarios.end());
    }
    std::vector<MetricReport> reports;
    for (auto sc : scs) {
        auto r = run_scenario(store, s.rows(), s.method, sc);
        r.report.config = std::string(to_string(ctx.cfg.pairing.exposure));
        r.report.seed = ctx.cfg.seed;
        write_json(ctx.out / ("report_" + std::string(to_string(sc)) + ".json"), to_json(r.report));
        write_json(ctx.out / ("thresholds_" + std::string(to_string(sc)) + ".json"),
                   detail::thresholds_doc(r.thresholds, s.method, sc, config_hash(ctx.cfg)));
        reports.push_back(r.report);
    }
    io::write_file(ctx.out / "reports.csv", grid_csv(reports));
    io::write_file(ctx.out / "plot_fpr95.csv", plot_fpr95_csv(reports));
    io::write_file(ctx.out / "plot_deterr.csv", plot_deterr_csv(reports));
    return reports;
}

struct GridOutcome {
    GridResult grid;
    std::vector<OrderingCheck> orderings;
};

inline GridOutcome grid(const Context& ctx, std::size_t workers) {
    const auto store = obtain_store(ctx);
    GridOutcome o;
    o.grid = ablation_grid(store, ctx.cfg, all_exposures, workers);
    o.orderings = check_orderings(o.grid.cells);

    const auto& cells = o.grid.cells;
    io::write_file(ctx.out / "grid.csv", grid_csv(cells));
    auto arr = nlohmann::json::array();
    for (const auto& c : cells) arr.push_back(to_json(c));
    write_json(ctx.out / "grid.json", arr);
    io::write_file(ctx.out / "plot_fpr95_hard.csv", plot_fpr95_csv(cells));
    io::write_file(ctx.out / "plot_deterr_hard.csv", plot_deterr_csv(cells));
    for (const auto& c : cells) {
        write_json(ctx.out / "cells" / (c.config + "_" + c.method) / ("report_" + c.scenario + ".json"), to_json(c));
    }
    for (const auto& t : o.grid.trained) {
        const auto dir = ctx.out / "cells" / (std::string(to_string(t.exposure)) + "_" +
                                              std::string(to_string(method_for(t.head))));
        io::write_file(dir / "history.csv", history_csv(t.fit.history));
    }
    auto ord = nlohmann::json::array();
    for (const auto& c : o.orderings) ord.push_back({{"id", c.id}, {"name", c.name}, {"pass", c.pass}, {"detail", c.detail}});
    write_json(ctx.out / "manifest.json",
               {{"cells", cells.size()}, {"failures", o.grid.failures}, {"orderings", ord},
                {"config_hash", config_hash(ctx.cfg)}});
    write_config(ctx);
    return o;
}

/// Parses a comma/space separated list of numbers.
inline dm::Vec parse_vector(const std::string& s) {
    dm::Vec v;
    std::string tok;
    auto flush = [&] {
        if (tok.empty()) return;
        try {
            std::size_t used = 0;
            v.push_back(std::stod(tok, &used));
            if (used != tok.size()) throw std::invalid_argument(tok);
        } catch (const std::exception&) {
            throw FormatError("bad number '" + tok + "' in vector");
        }
        tok.clear();
    };
    for (char ch : s) {
        if (ch == ',' || ch == ' ' || ch == '\t' || ch == '\n' || ch == '[' || ch == ']') {
            flush();
        } else {
            tok.push_back(ch);
        }
    }
    flush();
    return v;
}

/// Reads query vectors from an EMB1 file or a JSON array (one vector or an
/// array of vectors).
inline std::vector<dm::Vec> read_queries(const fs::path& p) {
    const auto bytes = io::read_file(p);
    std::vector<dm::Vec> out;
    if (bytes.rfind("EMB1", 0) == 0) {
        const auto st = decode_emb1(bytes);
        for (std::size_t i = 0; i < st.size(); ++i) out.push_back(st.row_f64(i));
        return out;
    }
    try {
        const auto j = nlohmann::json::parse(bytes);
        if (j.is_array() && !j.empty() && j.front().is_array()) {
            for (const auto& r : j) out.push_back(r.get<dm::Vec>());
        } else {
            out.push_back(j.get<dm::Vec>());
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("cannot read query vectors from " + p.string() + ": " + e.what());
    }
    return out;
}

/// Scores queries against frozen thresholds: abstain iff score > tau.
inline std::vector<nlohmann::json> score(const Context& ctx, const std::vector<dm::Vec>& queries) {
    std::optional<EmbeddingStore> store;
    if (ctx.method && *ctx.method == Method::knn) store = obtain_store(ctx);
    const auto s = detail::load_scorer(ctx, store ? &*store : nullptr);
    const fs::path tp = ctx.thresholds ? *ctx.thresholds : ctx.out / "thresholds.json";
    nlohmann::json tj;
    try {
        tj = nlohmann::json::parse(io::read_file(tp));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("cannot parse thresholds " + tp.string() + ": " + e.what());
    }
    const auto th = thresholds_from_json(tj);
    const double tau = ctx.cfg.tau_95 ? th.tau_95 : th.tau_deterr;
    const std::size_t dim = s.ckpt ? s.ckpt->params.dims.input : s.index->dim();

    std::vector<nlohmann::json> out;
    for (const auto& q : queries) {
        if (q.size() != dim) {
            throw DimensionMismatch("query has dim " + std::to_string(q.size()) + ", expected " + std::to_string(dim));
        }
        const double v = s.one(dm::l2_normalize(q));
        out.push_back({{"score", v},
                       {"threshold", threshold_json(tau)},
                       {"tau", ctx.cfg.tau_95 ? "tpr95" : "deterr"},
                       {"method", std::string(to_string(s.method))},
                       {"decision", abstains(v, tau) ? "abstain" : "answer"}});
    }
    return out;
}

/// Exit code for an error class: 2 config, 3 data, 4 training, 1 otherwise.
inline int exit_code(ErrorClass c) noexcept {
    switch (c) {
        case ErrorClass::config: return 2;
        case ErrorClass::data: return 3;
        case ErrorClass::training: return 4;
        case ErrorClass::internal: return 1;
    }
    return 1;
}

inline nlohmann::json error_json(const Error& e) { return {{"error", e.kind()}, {"message", e.what()}}; }

}  // namespace abstain::cmd
