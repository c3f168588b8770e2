// abstain: command-line front end for corpus generation, training,
// calibration, evaluation, the ablation grid and single-query scoring.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "abstain/abstain.hpp"

namespace {

using namespace abstain;

struct Flags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string head, negatives, ablation, scenario, tau, method;
    std::string out = "out";
    std::string data, checkpoint, thresholds, vector, input;
    bool strict = false;
    bool assert_orderings = false;
};

template <typename T, typename Parse>
T parse_flag(const std::string& v, Parse parse, const char* name) {
    auto r = parse(v);
    if (!r) throw ConfigError(std::string("bad value for --") + name + ": '" + v + "'");
    return *r;
}

cmd::Context build_context(const Flags& f) {
    cmd::Context ctx;
    if (!f.config.empty()) ctx.cfg = load_config(f.config);
    if (f.seed) ctx.cfg.seed = *f.seed;
    if (!f.head.empty()) ctx.cfg.loss.head = parse_flag<Head>(f.head, parse_head, "head");
    if (!f.negatives.empty()) {
        ctx.cfg.pairing.exposure = parse_flag<NegativeExposure>(f.negatives, parse_exposure, "negatives");
    }
    if (!f.ablation.empty()) ctx.cfg.loss.ablation = parse_flag<Ablation>(f.ablation, parse_ablation, "ablation");
    if (!f.scenario.empty()) {
        ctx.scenario = parse_flag<Scenario>(f.scenario, parse_scenario, "scenario");
        ctx.cfg.scenario = *ctx.scenario;
    }
    if (!f.tau.empty()) {
        if (f.tau != "deterr" && f.tau != "tpr95") throw ConfigError("bad value for --tau: '" + f.tau + "'");
        ctx.cfg.tau_95 = f.tau == "tpr95";
    }
    if (!f.method.empty()) ctx.method = parse_flag<Method>(f.method, parse_method, "method");
    ctx.cfg.out = f.out;
    ctx.out = f.out;
    if (!f.data.empty()) ctx.data = f.data;
    if (!f.checkpoint.empty()) ctx.checkpoint = f.checkpoint;
    if (!f.thresholds.empty()) ctx.thresholds = f.thresholds;
    ctx.strict = f.strict;
    return ctx;
}

void print(const nlohmann::json& j) { std::cout << j.dump() << "\n"; }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Energy-based abstention: train, calibrate and evaluate OOD abstention scorers"};
    app.require_subcommand(1);
    Flags f;

    auto common = [&](CLI::App* s) {
        s->add_option("--config", f.config, "JSON config file (flags override its keys)");
        s->add_option("--seed", f.seed, "Run seed");
        s->add_option("--out", f.out, "Output directory");
        s->add_option("--data", f.data, "EMB1 embedding file (default: OUT/data.emb1 or synthetic)");
        s->add_option("--negatives", f.negatives, "Negative exposure")
            ->check(CLI::IsMember({"all", "hard_only", "easy_only", "no_hard", "no_easy", "hard_easy"}));
        s->add_option("--head", f.head, "Trained head")->check(CLI::IsMember({"ebm", "softmax"}));
        s->add_option("--ablation", f.ablation, "Loss ablation")
            ->check(CLI::IsMember({"none", "no_energy", "no_ext_ood"}));
    };
    auto scoring = [&](CLI::App* s) {
        s->add_option("--checkpoint", f.checkpoint, "Checkpoint (default: OUT/checkpoint.ckpt)");
        s->add_option("--method", f.method, "Scorer; 'knn' needs no checkpoint")
            ->check(CLI::IsMember({"ebm", "softmax", "knn"}));
        s->add_option("--scenario", f.scenario, "Scenario")->check(CLI::IsMember({"hard", "easy", "mixed"}));
        s->add_flag("--strict", f.strict, "Fail on checkpoint/config hash mismatch");
    };

    auto* gen = app.add_subcommand("gen-data", "Generate the synthetic embedding corpus");
    common(gen);
    auto* prep = app.add_subcommand("prep", "Assign splits and assemble training tuples");
    common(prep);
    auto* train = app.add_subcommand("train", "Train one head and keep the best-validation checkpoint");
    common(train);
    auto* cal = app.add_subcommand("calibrate", "Calibrate thresholds on the validation split");
    common(cal);
    scoring(cal);
    auto* ev = app.add_subcommand("eval", "Calibrate on val and evaluate on test");
    common(ev);
    scoring(ev);
    auto* grid = app.add_subcommand("grid", "Run the full ablation grid");
    common(grid);
    grid->add_flag("--assert-orderings", f.assert_orderings, "Exit 1 unless the expected orderings hold");
    auto* sc = app.add_subcommand("score", "Score query vectors against frozen thresholds");
    common(sc);
    scoring(sc);
    sc->add_option("--thresholds", f.thresholds, "Thresholds JSON (default: OUT/thresholds.json)");
    sc->add_option("--tau", f.tau, "Operating point")->check(CLI::IsMember({"deterr", "tpr95"}));
    sc->add_option("--vector", f.vector, "Inline comma-separated vector");
    sc->add_option("--input", f.input, "EMB1 or JSON file of query vectors");

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        const auto ctx = build_context(f);
        if (gen->parsed()) {
            print(cmd::gen_data(ctx));
        } else if (prep->parsed()) {
            print(cmd::prep(ctx));
        } else if (train->parsed()) {
            const auto r = cmd::train(ctx);
            print({{"best_epoch", r.best.epoch},
                   {"best_val_loss", r.best.val_loss},
                   {"initial_train_loss", r.history.front().train_loss},
                   {"final_train_loss", r.history.back().train_loss},
                   {"checkpoint", (ctx.out / "checkpoint.ckpt").string()}});
        } else if (cal->parsed()) {
            print(to_json(cmd::calibrate(ctx)));
        } else if (ev->parsed()) {
            for (const auto& r : cmd::eval(ctx)) print(to_json(r));
        } else if (grid->parsed()) {
            const auto o = cmd::grid(ctx, worker_cap());
            std::cout << grid_csv(o.grid.cells);
            bool all_pass = true;
            for (const auto& c : o.orderings) {
                std::cout << (c.pass ? "PASS" : "FAIL") << " ordering " << c.id << ": " << c.name << " (" << c.detail
                          << ")\n";
                all_pass = all_pass && c.pass;
            }
            if (!o.grid.failures.empty()) {
                for (const auto& e : o.grid.failures) std::cerr << nlohmann::json{{"failed_cell", e}}.dump() << "\n";
                return 5;
            }
            if (f.assert_orderings && !all_pass) return 1;
        } else if (sc->parsed()) {
            std::vector<dm::Vec> queries;
            if (!f.vector.empty()) queries.push_back(cmd::parse_vector(f.vector));
            if (!f.input.empty()) {
                auto more = cmd::read_queries(f.input);
                queries.insert(queries.end(), more.begin(), more.end());
            }
            if (queries.empty()) throw ConfigError("score needs --vector or --input");
            for (const auto& r : cmd::score(ctx, queries)) print(r);
        }
    } catch (const Error& e) {
        std::cerr << cmd::error_json(e).dump() << "\n";
        return cmd::exit_code(e.error_class());
    } catch (const std::exception& e) {
        std::cerr << nlohmann::json{{"error", "Internal"}, {"message", e.what()}}.dump() << "\n";
        return 1;
    }
    return 0;
}
