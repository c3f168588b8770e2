#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "abstain/corpus.hpp"
#include "abstain/error.hpp"
#include "abstain/loss.hpp"
#include "abstain/model.hpp"
#include "abstain/pairing.hpp"
#include "abstain/rng.hpp"

namespace abstain {

struct TrainConfig {
    double lr0 = 1e-3;
    double lr_min = 0.0;
    double weight_decay = 1e-4;
    std::size_t epochs = 20;
    std::size_t batch_size = 128;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps_adam = 1e-8;
    double grad_clip = 1.0;
    std::uint64_t seed = 42;
    std::size_t hidden = 512;
    std::size_t latent = 256;
    std::size_t head_hidden = 256;
    /// Draw fresh k_mine negatives every epoch (otherwise epoch 0's draw is reused).
    bool resample_per_epoch = true;

    void validate() const {
        if (!(lr0 >= 0.0)) throw ConfigError("train.lr0 must be >= 0");
        if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
        if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
        if (!(grad_clip > 0.0)) throw ConfigError("train.grad_clip must be > 0");
    }
};

inline double cosine_lr(std::size_t t, std::size_t total_steps, double lr0, double lr_min = 0.0) {
    if (total_steps == 0) return lr0;
    const double frac = static_cast<double>(t) / static_cast<double>(total_steps);
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

/// Which tensor groups a step updates. The head not selected for training
/// keeps its initial values.
struct ActiveGroups {
    bool projector = true;
    bool energy_head = true;
    bool softmax_head = true;

    [[nodiscard]] bool contains(ParamGroup g) const noexcept {
        switch (g) {
            case ParamGroup::projector: return projector;
            case ParamGroup::energy_head: return energy_head;
            case ParamGroup::softmax_head: return softmax_head;
        }
        return false;
    }
    static ActiveGroups for_head(Head h) noexcept { return {true, h == Head::ebm, h == Head::softmax}; }
};

inline OptimState init_optim(const ModelParams& p) { return {zeros_like(p), zeros_like(p), 0}; }

/// One AdamW step (decoupled decay, bias correction) after global-norm
/// clipping over the active groups. `grads` is clipped in place. Returns
/// the pre-clip gradient norm.
inline double adamw_step(ModelParams& params, ModelParams& grads, OptimState& state, double lr, const TrainConfig& c,
                         const ActiveGroups& active = {}) {
    auto pt = params.tensors();
    auto gt = grads.tensors();
    auto mt = state.m.tensors();
    auto vt = state.v.tensors();

    double sq = 0.0;
    for (std::size_t i = 0; i < ModelParams::tensor_count; ++i) {
        if (!active.contains(ModelParams::group_of(i))) continue;
        for (double g : gt[i]) {
            if (!std::isfinite(g)) throw NonFiniteGradient("non-finite gradient in tensor " + std::to_string(i));
            sq += g * g;
        }
    }
    const double norm = std::sqrt(sq);
    const double scale = norm > c.grad_clip ? c.grad_clip / (norm + 1e-6) : 1.0;

    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(c.beta1, t);
    const double bc2 = 1.0 - std::pow(c.beta2, t);
    for (std::size_t i = 0; i < ModelParams::tensor_count; ++i) {
        if (!active.contains(ModelParams::group_of(i))) continue;
        auto p = pt[i];
        auto g = gt[i];
        auto m = mt[i];
        auto v = vt[i];
        for (std::size_t k = 0; k < p.size(); ++k) {
            g[k] *= scale;
            p[k] *= 1.0 - lr * c.weight_decay;
            m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
            v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
            p[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + c.eps_adam);
        }
    }
    return norm;
}

// ---------------------------------------------------------------------------
// Batches

/// A batch expressed over its unique store rows: the EC-SCTL slots and the
/// softmax (row, label) multiset refer to positions in `rows`.
struct BatchPlan {
    std::vector<std::size_t> rows;
    LatentBatch ebm;
    LabeledRows softmax;
};

inline BatchPlan plan_batch(const TupleSet& set, std::span<const std::size_t> tuple_ids,
                            std::span<const MinedNegatives> mined, std::span<const std::size_t> ood_items) {
    if (mined.size() != tuple_ids.size()) throw ShapeMismatch("plan_batch: mined vs tuples");
    BatchPlan plan;
    for (std::size_t b = 0; b < tuple_ids.size(); ++b) {
        const auto& t = set.tuples[tuple_ids[b]];
        plan.rows.push_back(t.anchor);
        plan.rows.push_back(t.positive);
        if (t.use_hard_negative) plan.rows.push_back(t.hard_negative);
        for (std::size_t k = 0; k < mined[b].refs.size(); ++k) {
            if (mined[b].mask[k]) plan.rows.push_back(mined[b].refs[k]);
        }
    }
    plan.rows.insert(plan.rows.end(), ood_items.begin(), ood_items.end());
    std::sort(plan.rows.begin(), plan.rows.end());
    plan.rows.erase(std::unique(plan.rows.begin(), plan.rows.end()), plan.rows.end());
    auto pos = [&](std::size_t r) {
        return static_cast<std::size_t>(std::lower_bound(plan.rows.begin(), plan.rows.end(), r) - plan.rows.begin());
    };

    const bool ebm_ood = exposure_mask(set.exposure).easy;
    plan.ebm.ood_active = ebm_ood;
    for (auto r : ood_items) plan.ebm.ood.push_back(pos(r));
    auto& sm = plan.softmax;
    for (std::size_t b = 0; b < tuple_ids.size(); ++b) {
        const auto& t = set.tuples[tuple_ids[b]];
        AnchorSlots s;
        s.a = pos(t.anchor);
        s.p = pos(t.positive);
        s.use_hn = t.use_hard_negative;
        s.hn = t.use_hard_negative ? pos(t.hard_negative) : s.a;
        for (std::size_t k = 0; k < mined[b].refs.size(); ++k) {
            // masked slots point at the anchor row and are never read
            s.neg.push_back(mined[b].mask[k] ? pos(mined[b].refs[k]) : s.a);
            s.mask.push_back(mined[b].mask[k]);
        }
        plan.ebm.anchors.push_back(std::move(s));

        sm.rows.push_back(pos(t.anchor));
        sm.labels.push_back(0);
        sm.rows.push_back(pos(t.positive));
        sm.labels.push_back(0);
        if (t.use_hard_negative) {
            sm.rows.push_back(pos(t.hard_negative));
            sm.labels.push_back(1);
        }
        for (std::size_t k = 0; k < mined[b].refs.size(); ++k) {
            if (!mined[b].mask[k]) continue;
            sm.rows.push_back(pos(mined[b].refs[k]));
            sm.labels.push_back(1);
        }
    }
    for (auto r : ood_items) {
        sm.rows.push_back(pos(r));
        sm.labels.push_back(1);
    }
    return plan;
}

/// Batch loss for the selected head; fills `grads` (accumulated, caller
/// zeroes) when non-null and the EC-SCTL report when `report` is non-null.
inline double batch_objective(const ModelParams& p, const dm::Matrix& x, const BatchPlan& plan, const LossConfig& c,
                              ModelParams* grads = nullptr, BatchLossReport* report = nullptr) {
    const auto pc = project_rows(p, x);
    const dm::Matrix& z = pc.z.z;
    dm::Matrix dz;
    double loss = 0.0;
    if (c.head == Head::ebm) {
        const auto hc = energy_rows(p, z);
        const dm::ColVec e = hc.out.col(0);
        dm::ColVec de;
        auto rep = ecsctl_total(plan.ebm, z, e, c, grads ? &dz : nullptr, grads ? &de : nullptr);
        loss = rep.total;
        if (grads) {
            const dm::Matrix dout = de;
            dz += head_backward(p.energy1, p.energy2, z, hc, dout, grads->energy1, grads->energy2);
        }
        if (report) *report = std::move(rep);
    } else {
        const auto hc = softmax_rows(p, z);
        dm::Matrix dl;
        loss = softmax_batch(plan.softmax, hc.out, grads ? &dl : nullptr);
        if (grads) dz = head_backward(p.softmax1, p.softmax2, z, hc, dl, grads->softmax1, grads->softmax2);
    }
    if (grads) projector_backward(p, x, pc, dz, *grads);
    return loss;
}

// ---------------------------------------------------------------------------
// fit

struct EpochRecord {
    std::size_t epoch = 0;  // 0 = before any update
    double train_loss = 0.0;
    double val_loss = 0.0;
    double lr = 0.0;  // learning rate at the epoch's last step (lr0 for epoch 0)
};

struct BatchEvent {
    std::size_t epoch = 0;
    std::size_t step = 0;
    double lr = 0.0;
    double loss = 0.0;
    double grad_norm = 0.0;
    const BatchLossReport* report = nullptr;  // EBM head only
};

using BatchObserver = std::function<void(const BatchEvent&)>;

struct FitResult {
    Checkpoint best;
    std::vector<EpochRecord> history;
    std::vector<double> lr_trace;  // one entry per optimizer step
};

namespace detail {

inline std::vector<std::size_t> sample_ood(const TupleSet& set, std::size_t n, std::uint64_t key) {
    if (!exposure_mask(set.exposure).easy || set.ood_pool.empty() || n == 0) return {};
    CounterRng rng(key);
    const std::size_t k = std::min(n, set.ood_pool.size());
    std::vector<std::size_t> out;
    out.reserve(k);
    for (auto i : rng.sample_without_replacement(set.ood_pool.size(), k)) out.push_back(set.ood_pool[i]);
    std::sort(out.begin(), out.end());
    return out;
}

inline std::vector<MinedNegatives> mine_all(const EmbeddingStore& store, const TupleSet& set, std::size_t k,
                                            std::uint64_t seed, std::uint64_t epoch) {
    std::vector<MinedNegatives> out;
    out.reserve(set.tuples.size());
    for (const auto& t : set.tuples) {
        out.push_back(mine_negatives(t.pool, k, t.anchor, mining_key(seed, epoch, store.id(t.anchor))));
    }
    return out;
}

/// Loss of `p` over the whole set in batches, weighted by anchors per batch.
inline double set_loss(const ModelParams& p, const EmbeddingStore& store, const TupleSet& set,
                       std::span<const MinedNegatives> mined, const LossConfig& c, std::size_t batch_size,
                       std::size_t ood_batch, std::uint64_t ood_key) {
    double total = 0.0;
    std::vector<std::size_t> ids;
    for (std::size_t s = 0, b = 0; s < set.tuples.size(); s += batch_size, ++b) {
        const std::size_t e = std::min(set.tuples.size(), s + batch_size);
        ids.resize(e - s);
        for (std::size_t i = s; i < e; ++i) ids[i - s] = i;
        const auto ood = sample_ood(set, ood_batch, CounterRng::derive_key({ood_key, b}));
        const auto plan = plan_batch(set, ids, mined.subspan(s, e - s), ood);
        total += batch_objective(p, store.gather(plan.rows), plan, c) * static_cast<double>(e - s);
    }
    return total / static_cast<double>(set.tuples.size());
}

}  // namespace detail

/// Trains the projector and the head selected by `loss.head`, keeping the
/// parameters with the lowest validation loss (the initial parameters count
/// as epoch 0).
inline FitResult fit(const EmbeddingStore& store, const TupleSet& train, const TupleSet& val, const LossConfig& loss,
                     const TrainConfig& tc, const PairingConfig& pc, const std::string& config_hash = {},
                     const BatchObserver& observer = {}) {
    tc.validate();
    loss.validate();
    if (train.tuples.empty()) throw EmptySplit("no training tuples");
    if (val.tuples.empty()) throw EmptySplit("no validation tuples");

    const ModelDims dims{store.dim(), tc.hidden, tc.latent, tc.head_hidden};
    ModelParams params = init_params(dims, tc.seed);
    OptimState optim = init_optim(params);
    const auto active = ActiveGroups::for_head(loss.head);

    const std::size_t n = train.tuples.size();
    const std::size_t steps_per_epoch = (n + tc.batch_size - 1) / tc.batch_size;
    const std::size_t total_steps = steps_per_epoch * tc.epochs;

    const auto val_mined = detail::mine_all(store, val, pc.k_mine, tc.seed, 0x7A1ull);
    const auto val_ood_key = CounterRng::derive_key({tc.seed, 0x7A10ull});
    auto val_loss = [&] {
        return detail::set_loss(params, store, val, val_mined, loss, tc.batch_size, pc.ood_batch, val_ood_key);
    };

    FitResult out;
    {
        const auto mined0 = detail::mine_all(store, train, pc.k_mine, tc.seed, 0);
        EpochRecord r0;
        r0.train_loss = detail::set_loss(params, store, train, mined0, loss, tc.batch_size, pc.ood_batch,
                                         CounterRng::derive_key({tc.seed, 0x0D0ull}));
        r0.val_loss = val_loss();
        r0.lr = cosine_lr(0, total_steps, tc.lr0, tc.lr_min);
        out.history.push_back(r0);
        out.best = {params, optim, 0, r0.val_loss, config_hash, tc.seed, loss.head};
    }

    std::size_t step = 0;
    std::vector<std::size_t> order(n);
    std::vector<MinedNegatives> mined;
    std::vector<MinedNegatives> batch_mined;
    ModelParams grads = zeros_like(params);
    for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        CounterRng shuffle_rng(CounterRng::derive_key({tc.seed, 0x5E0ull, epoch}));
        shuffle_rng.shuffle(std::span<std::size_t>(order));
        if (tc.resample_per_epoch || epoch == 1) {
            mined = detail::mine_all(store, train, pc.k_mine, tc.seed, tc.resample_per_epoch ? epoch : 1);
        }

        double epoch_loss = 0.0;
        double lr = tc.lr0;
        for (std::size_t s = 0, b = 0; s < n; s += tc.batch_size, ++b) {
            const std::size_t e = std::min(n, s + tc.batch_size);
            const std::span<const std::size_t> ids(order.data() + s, e - s);
            batch_mined.clear();
            for (auto id : ids) batch_mined.push_back(mined[id]);
            const auto ood = detail::sample_ood(train, pc.ood_batch, CounterRng::derive_key({tc.seed, 0x00Dull, epoch, b}));
            const auto plan = plan_batch(train, ids, batch_mined, ood);

            grads.set_zero();
            BatchLossReport rep;
            const double l = batch_objective(params, store.gather(plan.rows), plan, loss, &grads, &rep);
            if (!std::isfinite(l)) throw DivergedLoss("training loss is not finite at step " + std::to_string(step));
            lr = cosine_lr(step, total_steps, tc.lr0, tc.lr_min);
            const double gnorm = adamw_step(params, grads, optim, lr, tc, active);
            out.lr_trace.push_back(lr);
            if (observer) observer({epoch, step, lr, l, gnorm, loss.head == Head::ebm ? &rep : nullptr});
            epoch_loss += l * static_cast<double>(e - s);
            ++step;
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = epoch_loss / static_cast<double>(n);
        rec.val_loss = val_loss();
        rec.lr = lr;
        if (!std::isfinite(rec.val_loss)) throw DivergedLoss("validation loss is not finite at epoch " + std::to_string(epoch));
        out.history.push_back(rec);
        if (rec.val_loss < out.best.val_loss) {
            out.best = {params, optim, epoch, rec.val_loss, config_hash, tc.seed, loss.head};
        }
    }
    return out;
}

inline std::string history_csv(const std::vector<EpochRecord>& h) {
    std::string out = "epoch,train_loss,val_loss,lr\n";
    char buf[160];
    for (const auto& r : h) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g\n", r.epoch, r.train_loss, r.val_loss, r.lr);
        out += buf;
    }
    return out;
}

inline nlohmann::json history_json(const std::vector<EpochRecord>& h) {
    auto a = nlohmann::json::array();
    for (const auto& r : h) {
        a.push_back({{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"val_loss", r.val_loss}, {"lr", r.lr}});
    }
    return a;
}

}  // namespace abstain
