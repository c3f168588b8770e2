#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>

#include "abstain/corpus.hpp"
#include "abstain/error.hpp"
#include "abstain/loss.hpp"
#include "abstain/pairing.hpp"
#include "abstain/train.hpp"

namespace abstain {

enum class Scenario : std::uint8_t { hard, easy, mixed };

inline std::string_view to_string(Scenario s) noexcept {
    switch (s) {
        case Scenario::hard: return "hard";
        case Scenario::easy: return "easy";
        case Scenario::mixed: return "mixed";
    }
    return "?";
}

inline std::optional<Scenario> parse_scenario(std::string_view s) noexcept {
    for (auto x : {Scenario::hard, Scenario::easy, Scenario::mixed}) {
        if (to_string(x) == s) return x;
    }
    return std::nullopt;
}

/// Everything a run depends on. `seed` drives corpus geometry, splits,
/// initialisation and sampling; the per-module seed fields are overwritten
/// from it by `synth_spec()` and `train_config()`.
struct RunConfig {
    std::uint64_t seed = 42;
    SynthSpec synth;
    SplitFractions splits;
    PairingConfig pairing;
    LossConfig loss;
    TrainConfig train;
    Scenario scenario = Scenario::hard;
    bool tau_95 = false;  // score decisions at tau_95 instead of tau_deterr
    std::size_t knn_k = 5;
    std::string out = "out";

    [[nodiscard]] SynthSpec synth_spec() const {
        SynthSpec s = synth;
        s.seed = seed;
        return s;
    }
    [[nodiscard]] TrainConfig train_config() const {
        TrainConfig t = train;
        t.seed = seed;
        return t;
    }
};

namespace detail {

template <typename T>
void take(const nlohmann::json& j, const char* key, T& dst) {
    if (!j.contains(key)) return;
    try {
        dst = j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config key '") + key + "': " + e.what());
    }
}

template <typename Parse, typename T>
void take_enum(const nlohmann::json& j, const char* key, Parse parse, T& dst) {
    if (!j.contains(key)) return;
    if (!j.at(key).is_string()) throw ConfigError(std::string("config key '") + key + "' must be a string");
    auto v = parse(j.at(key).get<std::string>());
    if (!v) throw ConfigError(std::string("config key '") + key + "': unknown value '" + j.at(key).get<std::string>() + "'");
    dst = *v;
}

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be an object");
    for (const auto& [k, v] : j.items()) {
        bool ok = false;
        for (const char* n : known) ok = ok || k == n;
        if (!ok) throw ConfigError("unknown config key '" + where + (where.empty() ? "" : ".") + k + "'");
    }
}

inline nlohmann::json band_json(const NegativeBand& b) { return nlohmann::json::array({b.lo, b.hi}); }

inline void take_band(const nlohmann::json& j, const char* key, NegativeBand& b) {
    std::array<double, 2> a{b.lo, b.hi};
    take(j, key, a);
    b = {a[0], a[1]};
}

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
    using nlohmann::json;
    const auto& s = c.synth;
    const auto& l = c.loss;
    const auto& t = c.train;
    return json{
        {"seed", c.seed},
        {"synth",
         {{"dim", s.dim},
          {"n_id_clusters", s.n_id_clusters},
          {"n_anchors", s.n_anchors},
          {"n_easy_ood", s.n_easy_ood},
          {"n_mid", s.n_mid},
          {"n_reserve", s.n_reserve},
          {"n_ood_clusters", s.n_ood_clusters},
          {"hard_perturbation_angle", s.hard_perturbation_angle},
          {"easy_ood_separation_angle", s.easy_ood_separation_angle},
          {"mid_band", s.mid_band},
          {"anchor_angle", s.anchor_angle},
          {"ood_cap_angle", s.ood_cap_angle},
          {"topic_dim", s.topic_dim},
          {"confusion_dim", s.confusion_dim},
          {"confusion_overlap", s.confusion_overlap},
          {"isotropic_noise", s.isotropic_noise},
          {"shared_cosine", s.shared_cosine}}},
        {"splits", {{"train", c.splits.train}, {"val", c.splits.val}, {"test", c.splits.test}}},
        {"pairing",
         {{"mid_band", detail::band_json(c.pairing.mid_band)},
          {"easy_band", detail::band_json(c.pairing.easy_band)},
          {"k_mine", c.pairing.k_mine},
          {"ood_batch", c.pairing.ood_batch},
          {"negatives", std::string(to_string(c.pairing.exposure))}}},
        {"loss",
         {{"m_sim", l.m_sim},
          {"m_e", l.m_e},
          {"lambda", l.lambda},
          {"temperature", l.temperature},
          {"w_ood", l.w_ood},
          {"w_hn", l.w_hn},
          {"head", std::string(to_string(l.head))},
          {"ablation", std::string(to_string(l.ablation))},
          {"hardest_by", l.hardest_by == HardestBy::cosine ? "cosine" : "energy"}}},
        {"train",
         {{"lr0", t.lr0},
          {"lr_min", t.lr_min},
          {"weight_decay", t.weight_decay},
          {"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"betas", {t.beta1, t.beta2}},
          {"eps_adam", t.eps_adam},
          {"grad_clip", t.grad_clip},
          {"hidden", t.hidden},
          {"latent", t.latent},
          {"head_hidden", t.head_hidden},
          {"resample_per_epoch", t.resample_per_epoch}}},
        {"eval", {{"scenario", std::string(to_string(c.scenario))}, {"tau", c.tau_95 ? "tpr95" : "deterr"}, {"knn_k", c.knn_k}}},
        {"out", c.out},
    };
}

/// Overlays the keys present in `j` onto `base`. Unknown keys are errors.
inline RunConfig config_from_json(const nlohmann::json& j, RunConfig base = {}) {
    using detail::take;
    detail::reject_unknown(j, {"seed", "synth", "splits", "pairing", "loss", "train", "eval", "out"}, "");
    RunConfig c = std::move(base);
    take(j, "seed", c.seed);
    take(j, "out", c.out);
    if (j.contains("synth")) {
        const auto& s = j.at("synth");
        detail::reject_unknown(s,
                               {"dim", "n_id_clusters", "n_anchors", "n_easy_ood", "n_mid", "n_reserve", "n_ood_clusters",
                                "hard_perturbation_angle", "easy_ood_separation_angle", "mid_band", "anchor_angle",
                                "ood_cap_angle", "topic_dim", "confusion_dim", "confusion_overlap", "isotropic_noise",
                                "shared_cosine"},
                               "synth");
        auto& d = c.synth;
        take(s, "dim", d.dim);
        take(s, "n_id_clusters", d.n_id_clusters);
        take(s, "n_anchors", d.n_anchors);
        take(s, "n_easy_ood", d.n_easy_ood);
        take(s, "n_mid", d.n_mid);
        take(s, "n_reserve", d.n_reserve);
        take(s, "n_ood_clusters", d.n_ood_clusters);
        take(s, "hard_perturbation_angle", d.hard_perturbation_angle);
        take(s, "easy_ood_separation_angle", d.easy_ood_separation_angle);
        take(s, "mid_band", d.mid_band);
        take(s, "anchor_angle", d.anchor_angle);
        take(s, "ood_cap_angle", d.ood_cap_angle);
        take(s, "topic_dim", d.topic_dim);
        take(s, "confusion_dim", d.confusion_dim);
        take(s, "confusion_overlap", d.confusion_overlap);
        take(s, "isotropic_noise", d.isotropic_noise);
        take(s, "shared_cosine", d.shared_cosine);
    }
    if (j.contains("splits")) {
        const auto& s = j.at("splits");
        detail::reject_unknown(s, {"train", "val", "test"}, "splits");
        take(s, "train", c.splits.train);
        take(s, "val", c.splits.val);
        take(s, "test", c.splits.test);
    }
    if (j.contains("pairing")) {
        const auto& p = j.at("pairing");
        detail::reject_unknown(p, {"mid_band", "easy_band", "k_mine", "ood_batch", "negatives"}, "pairing");
        detail::take_band(p, "mid_band", c.pairing.mid_band);
        detail::take_band(p, "easy_band", c.pairing.easy_band);
        take(p, "k_mine", c.pairing.k_mine);
        take(p, "ood_batch", c.pairing.ood_batch);
        detail::take_enum(p, "negatives", parse_exposure, c.pairing.exposure);
    }
    if (j.contains("loss")) {
        const auto& l = j.at("loss");
        detail::reject_unknown(l, {"m_sim", "m_e", "lambda", "temperature", "w_ood", "w_hn", "head", "ablation", "hardest_by"},
                               "loss");
        take(l, "m_sim", c.loss.m_sim);
        take(l, "m_e", c.loss.m_e);
        take(l, "lambda", c.loss.lambda);
        take(l, "temperature", c.loss.temperature);
        take(l, "w_ood", c.loss.w_ood);
        take(l, "w_hn", c.loss.w_hn);
        detail::take_enum(l, "head", parse_head, c.loss.head);
        detail::take_enum(l, "ablation", parse_ablation, c.loss.ablation);
        detail::take_enum(
            l, "hardest_by",
            [](std::string_view s) -> std::optional<HardestBy> {
                if (s == "cosine") return HardestBy::cosine;
                if (s == "energy") return HardestBy::energy;
                return std::nullopt;
            },
            c.loss.hardest_by);
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        detail::reject_unknown(t,
                               {"lr0", "lr_min", "weight_decay", "epochs", "batch_size", "betas", "eps_adam", "grad_clip",
                                "hidden", "latent", "head_hidden", "resample_per_epoch"},
                               "train");
        auto& d = c.train;
        take(t, "lr0", d.lr0);
        take(t, "lr_min", d.lr_min);
        take(t, "weight_decay", d.weight_decay);
        take(t, "epochs", d.epochs);
        take(t, "batch_size", d.batch_size);
        std::array<double, 2> betas{d.beta1, d.beta2};
        take(t, "betas", betas);
        d.beta1 = betas[0];
        d.beta2 = betas[1];
        take(t, "eps_adam", d.eps_adam);
        take(t, "grad_clip", d.grad_clip);
        take(t, "hidden", d.hidden);
        take(t, "latent", d.latent);
        take(t, "head_hidden", d.head_hidden);
        take(t, "resample_per_epoch", d.resample_per_epoch);
    }
    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        detail::reject_unknown(e, {"scenario", "tau", "knn_k"}, "eval");
        detail::take_enum(e, "scenario", parse_scenario, c.scenario);
        if (e.contains("tau")) {
            const auto s = e.at("tau").get<std::string>();
            if (s != "deterr" && s != "tpr95") throw ConfigError("eval.tau must be 'deterr' or 'tpr95'");
            c.tau_95 = s == "tpr95";
        }
        take(e, "knn_k", c.knn_k);
    }
    return c;
}

inline RunConfig load_config(const std::filesystem::path& path, RunConfig base = {}) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(io::read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("cannot parse " + path.string() + ": " + e.what());
    } catch (const FormatError& e) {
        throw ConfigError(e.what());
    }
    return config_from_json(j, std::move(base));
}

/// Keys are sorted by nlohmann::json's object map, so the dump is canonical.
inline std::string canonical_dump(const nlohmann::json& j) { return j.dump(); }

inline std::string fnv1a_hex(std::string_view s) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(id_hash(s)));
    return buf;
}

/// Hash of everything that affects training (output directory and
/// evaluation choices excluded).
inline std::string config_hash(const RunConfig& c) {
    auto j = to_json(c);
    j.erase("out");
    j.erase("eval");
    return fnv1a_hex(canonical_dump(j));
}

/// Hash of the corpus-defining part (geometry + splits + seed).
inline std::string data_hash(const RunConfig& c) {
    auto j = to_json(c);
    return fnv1a_hex(canonical_dump({{"seed", j["seed"]}, {"synth", j["synth"]}, {"splits", j["splits"]}}));
}

}  // namespace abstain
