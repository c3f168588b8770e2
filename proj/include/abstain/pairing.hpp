#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "abstain/corpus.hpp"
#include "abstain/error.hpp"
#include "abstain/rng.hpp"

namespace abstain {

enum class NegativeExposure : std::uint8_t { all, hard_only, easy_only, no_hard, no_easy, hard_easy };

inline constexpr std::array<NegativeExposure, 6> all_exposures{
    NegativeExposure::all,     NegativeExposure::hard_only, NegativeExposure::easy_only,
    NegativeExposure::no_hard, NegativeExposure::no_easy,   NegativeExposure::hard_easy};

inline std::string_view to_string(NegativeExposure e) noexcept {
    switch (e) {
        case NegativeExposure::all: return "all";
        case NegativeExposure::hard_only: return "hard_only";
        case NegativeExposure::easy_only: return "easy_only";
        case NegativeExposure::no_hard: return "no_hard";
        case NegativeExposure::no_easy: return "no_easy";
        case NegativeExposure::hard_easy: return "hard_easy";
    }
    return "?";
}

inline std::optional<NegativeExposure> parse_exposure(std::string_view s) noexcept {
    for (auto e : all_exposures) {
        if (to_string(e) == s) return e;
    }
    return std::nullopt;
}

/// Which negative sources a training configuration sees. "Mid" covers the
/// in-domain mid-band items and the uniform reserve; "easy" covers the
/// easy-OOD pool, both as mined candidates and as the OOD hinge batch.
struct ExposureMask {
    bool hard = false;
    bool mid = false;
    bool easy = false;
};

inline ExposureMask exposure_mask(NegativeExposure e) noexcept {
    switch (e) {
        case NegativeExposure::all: return {true, true, true};
        case NegativeExposure::hard_only: return {true, false, false};
        case NegativeExposure::easy_only: return {false, false, true};
        case NegativeExposure::no_hard: return {false, true, true};
        case NegativeExposure::no_easy: return {true, true, false};
        case NegativeExposure::hard_easy: return {true, false, true};
    }
    return {};
}

struct NegativeBand {
    double lo = -1.0;
    double hi = 1.0;

    void validate() const {
        if (!(lo >= -1.0 && hi <= 1.0 && lo < hi)) {
            throw ConfigError("negative band needs -1 <= lo < hi <= 1, got [" + std::to_string(lo) + ", " +
                              std::to_string(hi) + "]");
        }
    }
    [[nodiscard]] bool contains(double c) const noexcept { return lo <= c && c <= hi; }
};

struct PairingConfig {
    NegativeBand mid_band{0.5, 0.8};
    NegativeBand easy_band{-1.0, 0.3};
    std::size_t k_mine = 8;
    std::size_t ood_batch = 64;
    NegativeExposure exposure = NegativeExposure::all;
};

struct PositivePair {
    std::size_t anchor;
    std::size_t candidate;
    double cosine;
};

namespace detail {

/// cos(rows a, rows b) as an |a| x |b| matrix.
inline dm::Matrix cosine_block(const EmbeddingStore& store, std::span<const std::size_t> a,
                               std::span<const std::size_t> b) {
    const dm::Matrix xa = store.gather(a);
    const dm::Matrix xb = store.gather(b);
    return xa * xb.transpose();
}

/// Is (c, id_c) a better top-1 than (best, id_best)? Higher cosine wins;
/// equal cosines go to the lower id.
inline bool better(double c, const std::string& id_c, double best, const std::string& id_best) {
    return c > best || (c == best && id_c < id_best);
}

}  // namespace detail

/// Reciprocal nearest-neighbour pairs between anchors and candidates, ordered
/// by anchor id. Near-identical pairs (cosine > 1 - 1e-9) are dropped.
inline std::vector<PositivePair> rnn_filter(const EmbeddingStore& store, std::span<const std::size_t> anchors,
                                            std::span<const std::size_t> candidates) {
    std::vector<PositivePair> out;
    if (anchors.empty() || candidates.empty()) return out;
    const dm::Matrix c = detail::cosine_block(store, anchors, candidates);
    const auto na = static_cast<Eigen::Index>(anchors.size());
    const auto nc = static_cast<Eigen::Index>(candidates.size());

    std::vector<Eigen::Index> top_c(anchors.size()), top_a(candidates.size());
    for (Eigen::Index i = 0; i < na; ++i) {
        Eigen::Index best = 0;
        for (Eigen::Index j = 1; j < nc; ++j) {
            if (detail::better(c(i, j), store.id(candidates[j]), c(i, best), store.id(candidates[best]))) best = j;
        }
        top_c[i] = best;
    }
    for (Eigen::Index j = 0; j < nc; ++j) {
        Eigen::Index best = 0;
        for (Eigen::Index i = 1; i < na; ++i) {
            if (detail::better(c(i, j), store.id(anchors[i]), c(best, j), store.id(anchors[best]))) best = i;
        }
        top_a[j] = best;
    }
    for (Eigen::Index i = 0; i < na; ++i) {
        const Eigen::Index j = top_c[i];
        if (top_a[j] != i) continue;
        if (c(i, j) > 1.0 - 1e-9) continue;
        out.push_back({anchors[i], candidates[j], c(i, j)});
    }
    std::sort(out.begin(), out.end(),
              [&](const PositivePair& x, const PositivePair& y) { return store.id(x.anchor) < store.id(y.anchor); });
    return out;
}

/// Pool items whose cosine to the anchor lies in the band, by descending
/// cosine then ascending id.
inline std::vector<std::size_t> band_negatives(const EmbeddingStore& store, std::size_t anchor,
                                               std::span<const std::size_t> pool, const NegativeBand& band) {
    band.validate();
    const dm::Vec a = store.row_f64(anchor);
    std::vector<std::pair<double, std::size_t>> hits;
    for (auto p : pool) {
        const dm::Vec v = store.row_f64(p);
        const double c = dm::dot(a, v);
        if (band.contains(c)) hits.emplace_back(c, p);
    }
    std::sort(hits.begin(), hits.end(), [&](const auto& x, const auto& y) {
        return x.first > y.first || (x.first == y.first && store.id(x.second) < store.id(y.second));
    });
    std::vector<std::size_t> out;
    out.reserve(hits.size());
    for (const auto& h : hits) out.push_back(h.second);
    return out;
}

struct TrainingTuple {
    std::size_t anchor = 0;
    std::size_t positive = 0;
    std::size_t hard_negative = 0;  // always the paired confusable
    bool use_hard_negative = true;  // false under no_hard / easy_only
    std::vector<std::size_t> pool;  // candidate negatives for k_mine sampling
    std::size_t pool_mid = 0, pool_reserve = 0, pool_easy = 0;
    std::vector<std::size_t> mined_negatives;
    std::vector<bool> mined_mask;
};

struct TupleSet {
    std::vector<TrainingTuple> tuples;
    std::vector<std::size_t> ood_pool;  // shared external-negative pool for the OOD hinge
    NegativeExposure exposure = NegativeExposure::all;
};

/// Builds one tuple per RNN-surviving anchor of `split`. Candidate pools only
/// draw from unassigned records, so no train/val/test item is ever a
/// negative.
inline TupleSet assemble_tuples(const EmbeddingStore& store, const PairingConfig& cfg, Split split) {
    cfg.mid_band.validate();
    cfg.easy_band.validate();
    const ExposureMask ex = exposure_mask(cfg.exposure);

    const auto anchors = store.indices(Role::anchor, split);
    const auto candidates = store.indices(Role::positive_pool, split);
    const auto pairs = rnn_filter(store, anchors, candidates);

    std::unordered_map<std::string, std::size_t> hard_by_key;
    for (auto h : store.indices(Role::hard_negative, split)) hard_by_key.emplace(std::string(pair_key(store.id(h))), h);

    const auto mid = store.indices(Role::mid_pool, Split::unassigned);
    const auto reserve = store.indices(Role::reserve, Split::unassigned);
    const auto easy = store.indices(Role::easy_ood, Split::unassigned);

    std::vector<std::size_t> anchor_rows;
    anchor_rows.reserve(pairs.size());
    for (const auto& p : pairs) anchor_rows.push_back(p.anchor);
    const dm::Matrix xa = store.gather(anchor_rows);

    // Band membership for every (anchor, item) in one product per pool.
    auto banded = [&](const std::vector<std::size_t>& pool, const NegativeBand& band) {
        std::vector<std::vector<std::size_t>> per_anchor(pairs.size());
        if (pool.empty() || pairs.empty()) return per_anchor;
        const dm::Matrix c = xa * store.gather(pool).transpose();
        for (std::size_t i = 0; i < pairs.size(); ++i) {
            std::vector<std::pair<double, std::size_t>> hits;
            for (std::size_t j = 0; j < pool.size(); ++j) {
                const double v = c(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
                if (band.contains(v)) hits.emplace_back(v, pool[j]);
            }
            std::sort(hits.begin(), hits.end(), [&](const auto& x, const auto& y) {
                return x.first > y.first || (x.first == y.first && store.id(x.second) < store.id(y.second));
            });
            for (const auto& h : hits) per_anchor[i].push_back(h.second);
        }
        return per_anchor;
    };
    const auto mid_hits = ex.mid ? banded(mid, cfg.mid_band) : std::vector<std::vector<std::size_t>>(pairs.size());
    const auto easy_hits = ex.easy ? banded(easy, cfg.easy_band) : std::vector<std::vector<std::size_t>>(pairs.size());

    TupleSet set;
    set.exposure = cfg.exposure;
    if (ex.easy) set.ood_pool = easy;
    set.tuples.reserve(pairs.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto& p = pairs[i];
        auto it = hard_by_key.find(std::string(pair_key(store.id(p.anchor))));
        if (it == hard_by_key.end()) {
            throw MissingHardNegative("anchor '" + store.id(p.anchor) + "' has no paired hard negative");
        }
        TrainingTuple t;
        t.anchor = p.anchor;
        t.positive = p.candidate;
        t.hard_negative = it->second;
        t.use_hard_negative = ex.hard;
        t.pool = mid_hits[i];
        t.pool_mid = mid_hits[i].size();
        if (ex.mid) {
            t.pool.insert(t.pool.end(), reserve.begin(), reserve.end());
            t.pool_reserve = reserve.size();
        }
        t.pool.insert(t.pool.end(), easy_hits[i].begin(), easy_hits[i].end());
        t.pool_easy = easy_hits[i].size();
        set.tuples.push_back(std::move(t));
    }
    return set;
}

struct MinedNegatives {
    std::vector<std::size_t> refs;
    std::vector<bool> mask;
};

/// FNV-1a of an id; folds record identity into sampling keys.
inline std::uint64_t id_hash(std::string_view s) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t mining_key(std::uint64_t seed, std::uint64_t epoch, std::string_view anchor_id) noexcept {
    return CounterRng::derive_key({seed, 0x3A11Eull, epoch, id_hash(anchor_id)});
}

/// k distinct pool members drawn uniformly, or the whole pool padded with
/// `pad` (mask false) when the pool is smaller than k.
inline MinedNegatives mine_negatives(std::span<const std::size_t> pool, std::size_t k, std::size_t pad,
                                     std::uint64_t key) {
    MinedNegatives out;
    out.refs.reserve(k);
    out.mask.reserve(k);
    if (pool.size() >= k) {
        CounterRng rng(key);
        for (auto pos : rng.sample_without_replacement(pool.size(), k)) {
            out.refs.push_back(pool[pos]);
            out.mask.push_back(true);
        }
        return out;
    }
    for (auto p : pool) {
        out.refs.push_back(p);
        out.mask.push_back(true);
    }
    while (out.refs.size() < k) {
        out.refs.push_back(pad);
        out.mask.push_back(false);
    }
    return out;
}

inline TrainingTuple sample_k_mine(const EmbeddingStore& store, const TrainingTuple& tuple, std::size_t k_mine,
                                   std::uint64_t seed, std::uint64_t epoch = 0) {
    TrainingTuple t = tuple;
    auto m = mine_negatives(tuple.pool, k_mine, tuple.anchor, mining_key(seed, epoch, store.id(tuple.anchor)));
    t.mined_negatives = std::move(m.refs);
    t.mined_mask = std::move(m.mask);
    return t;
}

/// One JSON object per tuple, for audit.
inline std::string tuples_to_jsonl(const EmbeddingStore& store, const TupleSet& set) {
    std::string out;
    for (const auto& t : set.tuples) {
        nlohmann::json j;
        j["anchor"] = store.id(t.anchor);
        j["positive"] = store.id(t.positive);
        j["hard_negative"] = store.id(t.hard_negative);
        j["use_hard_negative"] = t.use_hard_negative;
        j["pool_mid"] = t.pool_mid;
        j["pool_reserve"] = t.pool_reserve;
        j["pool_easy"] = t.pool_easy;
        if (!t.mined_negatives.empty()) {
            auto ids = nlohmann::json::array();
            for (auto r : t.mined_negatives) ids.push_back(store.id(r));
            j["mined"] = ids;
            j["mask"] = t.mined_mask;
        }
        out += j.dump();
        out += '\n';
    }
    return out;
}

}  // namespace abstain
