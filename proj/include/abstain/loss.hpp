#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "abstain/diffmath.hpp"
#include "abstain/error.hpp"
#include "abstain/model.hpp"

namespace abstain {

enum class Ablation : std::uint8_t { none, no_energy, no_ext_ood };

inline std::string_view to_string(Ablation a) noexcept {
    switch (a) {
        case Ablation::none: return "none";
        case Ablation::no_energy: return "no_energy";
        case Ablation::no_ext_ood: return "no_ext_ood";
    }
    return "?";
}

inline std::optional<Ablation> parse_ablation(std::string_view s) noexcept {
    for (auto a : {Ablation::none, Ablation::no_energy, Ablation::no_ext_ood}) {
        if (to_string(a) == s) return a;
    }
    return std::nullopt;
}

/// How the OOD hinge picks its single external negative.
enum class HardestBy : std::uint8_t { cosine, energy };

struct LossConfig {
    double m_sim = 0.2;
    double m_e = 1.0;
    double lambda = 1.0;
    double temperature = 1.0;
    double w_ood = 1.0;
    double w_hn = 1.0;
    Head head = Head::ebm;
    Ablation ablation = Ablation::none;
    HardestBy hardest_by = HardestBy::cosine;

    void validate() const {
        dm::require_temperature(temperature);
        if (!(w_ood >= 0.0 && w_hn >= 0.0 && lambda >= 0.0)) throw ConfigError("loss weights must be >= 0");
    }
    [[nodiscard]] bool energy_on() const noexcept { return ablation != Ablation::no_energy; }
};

// ---------------------------------------------------------------------------
// Scalar terms

/// softplus_T(m_sim + cos(zA, zN) - cos(zA, zP))
inline double sim_term(std::span<const double> za, std::span<const double> zp, std::span<const double> zn,
                       double m_sim, double t) {
    return dm::softplus_t(m_sim + dm::cosine(za, zn) - dm::cosine(za, zp), t);
}

/// lambda * softplus_T(E_P - E_N + m_E)
inline double energy_term(double e_p, double e_n, double m_e, double lambda, double t) {
    return lambda * dm::softplus_t(e_p - e_n + m_e, t);
}

template <typename Mask>
double core_loss(std::span<const double> terms, const Mask& mask, double t) {
    return dm::logsumexp_t(terms, mask, t);
}

/// Per-negative combined term; the energy half is dropped under no_energy.
inline double combined_term(std::span<const double> za, std::span<const double> zp, std::span<const double> zn,
                            double e_p, double e_n, const LossConfig& c) {
    double v = sim_term(za, zp, zn, c.m_sim, c.temperature);
    if (c.energy_on()) v += energy_term(e_p, e_n, c.m_e, c.lambda, c.temperature);
    return v;
}

struct HingeResult {
    double value = 0.0;
    std::optional<std::size_t> selected;
};

/// Combined term against the hardest member of `ood_z` (highest cosine to
/// the anchor, or lowest energy under HardestBy::energy; ties go to the
/// first). Zero under no_ext_ood.
inline HingeResult ood_hinge(std::span<const double> za, std::span<const double> zp, double e_p,
                             std::span<const dm::Vec> ood_z, std::span<const double> ood_e, const LossConfig& c) {
    if (c.ablation == Ablation::no_ext_ood) return {};
    if (ood_z.empty()) throw EmptyOODPool("ood_hinge: empty external pool");
    if (ood_e.size() != ood_z.size()) throw ShapeMismatch("ood_hinge: energies vs vectors");
    std::size_t best = 0;
    double best_key = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < ood_z.size(); ++j) {
        const double key = c.hardest_by == HardestBy::cosine ? dm::cosine(za, ood_z[j]) : -ood_e[j];
        if (key > best_key) {
            best_key = key;
            best = j;
        }
    }
    return {combined_term(za, zp, ood_z[best], e_p, ood_e[best], c), best};
}

inline double hn_hinge(std::span<const double> za, std::span<const double> zp, std::span<const double> z_hn,
                       double e_p, double e_hn, const LossConfig& c, bool present = true) {
    if (!present) return 0.0;
    return combined_term(za, zp, z_hn, e_p, e_hn, c);
}

/// -log softmax(logits)[y]
inline double softmax_ce(const std::array<double, 2>& logits, int y) {
    if (y != 0 && y != 1) throw ConfigError("softmax_ce: class must be 0 or 1");
    // log(1 + exp(l_other - l_y)) without cancellation
    const double d = logits[static_cast<std::size_t>(1 - y)] - logits[static_cast<std::size_t>(y)];
    return std::max(d, 0.0) + std::log1p(std::exp(-std::abs(d)));
}

// ---------------------------------------------------------------------------
// Batched EC-SCTL over latent rows

/// Row indices (into the latent matrix) for one anchor's tuple.
struct AnchorSlots {
    std::size_t a = 0, p = 0, hn = 0;
    bool use_hn = true;
    std::vector<std::size_t> neg;
    std::vector<bool> mask;
};

struct LatentBatch {
    std::vector<AnchorSlots> anchors;
    std::vector<std::size_t> ood;  // rows of the external-negative batch
    bool ood_active = true;        // exposure includes the external pool
};

struct AnchorLoss {
    double core = 0.0;
    double ood = 0.0;
    double hn = 0.0;
    double total = 0.0;
    std::optional<std::size_t> ood_pick;  // row picked by the OOD hinge
};

struct BatchLossReport {
    double total = 0.0;
    double core = 0.0;
    double ood_hinge = 0.0;
    double hn_hinge = 0.0;
    /// Sum of every energy-margin term evaluated (0 under no_energy).
    double energy_terms = 0.0;
    std::vector<AnchorLoss> per_anchor;
};

namespace detail {

/// Value of one combined term plus its partials; dsim multiplies
/// (zN - zP) for zA, zA for zN and -zA for zP; de multiplies +1 for E_P
/// and -1 for E_N.
struct TermParts {
    double value = 0.0;
    double energy = 0.0;
    double dsim = 0.0;
    double de = 0.0;
};

inline TermParts term_parts(const dm::Matrix& z, const dm::ColVec& e, std::size_t a, std::size_t p, std::size_t n,
                            double cos_ap, const LossConfig& c) {
    const auto ia = static_cast<Eigen::Index>(a);
    const auto in = static_cast<Eigen::Index>(n);
    TermParts t;
    const double xs = c.m_sim + z.row(ia).dot(z.row(in)) - cos_ap;
    t.value = dm::softplus_t(xs, c.temperature);
    t.dsim = dm::softplus_t_grad(xs, c.temperature);
    if (c.energy_on()) {
        const double xe = e(static_cast<Eigen::Index>(p)) - e(in) + c.m_e;
        t.energy = c.lambda * dm::softplus_t(xe, c.temperature);
        t.value += t.energy;
        t.de = c.lambda * dm::softplus_t_grad(xe, c.temperature);
    }
    return t;
}

inline void scatter_term(const dm::Matrix& z, std::size_t a, std::size_t p, std::size_t n, const TermParts& t,
                         double scale, dm::Matrix& dz, dm::ColVec& de) {
    const auto ia = static_cast<Eigen::Index>(a);
    const auto ip = static_cast<Eigen::Index>(p);
    const auto in = static_cast<Eigen::Index>(n);
    const double s = scale * t.dsim;
    if (s != 0.0) {
        dz.row(ia) += s * (z.row(in) - z.row(ip));
        dz.row(in) += s * z.row(ia);
        dz.row(ip) -= s * z.row(ia);
    }
    const double g = scale * t.de;
    if (g != 0.0) {
        de(ip) += g;
        de(in) -= g;
    }
}

}  // namespace detail

/// Mean over anchors of core + w_OOD * ood + w_HN * hn. `z` holds unit
/// latents and `e` their energies, both indexed by the slot rows. When
/// `dz`/`de` are non-null they are resized and filled with the gradient.
/// Anchors with no valid mined negative contribute a zero core term.
inline BatchLossReport ecsctl_total(const LatentBatch& batch, const dm::Matrix& z, const dm::ColVec& e,
                                    const LossConfig& c, dm::Matrix* dz = nullptr, dm::ColVec* de = nullptr) {
    c.validate();
    if (batch.anchors.empty()) throw ShapeMismatch("ecsctl_total: empty batch");
    if (z.rows() != e.size()) throw ShapeMismatch("ecsctl_total: latent rows vs energies");
    const bool want = dz != nullptr && de != nullptr;
    if (want) {
        *dz = dm::Matrix::Zero(z.rows(), z.cols());
        *de = dm::ColVec::Zero(e.size());
    }
    const bool ood_on = batch.ood_active && c.ablation != Ablation::no_ext_ood;
    if (ood_on && batch.ood.empty()) throw EmptyOODPool("ecsctl_total: external batch is empty");

    const double inv_b = 1.0 / static_cast<double>(batch.anchors.size());
    BatchLossReport rep;
    rep.per_anchor.reserve(batch.anchors.size());
    std::vector<detail::TermParts> parts;
    std::vector<double> vals;
    for (const auto& s : batch.anchors) {
        if (s.neg.size() != s.mask.size()) throw ShapeMismatch("ecsctl_total: negatives vs mask");
        const auto ia = static_cast<Eigen::Index>(s.a);
        const double cos_ap = z.row(ia).dot(z.row(static_cast<Eigen::Index>(s.p)));
        AnchorLoss al;

        parts.assign(s.neg.size(), {});
        vals.assign(s.neg.size(), 0.0);
        bool any = false;
        for (std::size_t k = 0; k < s.neg.size(); ++k) {
            if (!s.mask[k]) continue;
            any = true;
            parts[k] = detail::term_parts(z, e, s.a, s.p, s.neg[k], cos_ap, c);
            vals[k] = parts[k].value;
            rep.energy_terms += parts[k].energy;
        }
        if (any) {
            al.core = dm::logsumexp_t(vals, s.mask, c.temperature);
            if (want) {
                const auto w = dm::logsumexp_t_grad(vals, s.mask, c.temperature);
                for (std::size_t k = 0; k < s.neg.size(); ++k) {
                    if (s.mask[k]) detail::scatter_term(z, s.a, s.p, s.neg[k], parts[k], inv_b * w[k], *dz, *de);
                }
            }
        }

        if (ood_on) {
            std::size_t pick = batch.ood.front();
            double best = -std::numeric_limits<double>::infinity();
            for (auto r : batch.ood) {
                const auto ir = static_cast<Eigen::Index>(r);
                const double key = c.hardest_by == HardestBy::cosine ? z.row(ia).dot(z.row(ir)) : -e(ir);
                if (key > best) {
                    best = key;
                    pick = r;
                }
            }
            const auto t = detail::term_parts(z, e, s.a, s.p, pick, cos_ap, c);
            al.ood = t.value;
            al.ood_pick = pick;
            rep.energy_terms += t.energy;
            if (want) detail::scatter_term(z, s.a, s.p, pick, t, inv_b * c.w_ood, *dz, *de);
        }

        if (s.use_hn) {
            const auto t = detail::term_parts(z, e, s.a, s.p, s.hn, cos_ap, c);
            al.hn = t.value;
            rep.energy_terms += t.energy;
            if (want) detail::scatter_term(z, s.a, s.p, s.hn, t, inv_b * c.w_hn, *dz, *de);
        }

        al.total = al.core + c.w_ood * al.ood + c.w_hn * al.hn;
        rep.core += al.core;
        rep.ood_hinge += al.ood;
        rep.hn_hinge += al.hn;
        rep.per_anchor.push_back(al);
    }
    rep.core *= inv_b;
    rep.ood_hinge *= inv_b;
    rep.hn_hinge *= inv_b;
    rep.total = rep.core + c.w_ood * rep.ood_hinge + c.w_hn * rep.hn_hinge;
    return rep;
}

// ---------------------------------------------------------------------------
// Batched softmax cross-entropy

/// (row, class) entries; class 0 = in-domain, 1 = OOD.
struct LabeledRows {
    std::vector<std::size_t> rows;
    std::vector<int> labels;
};

/// Mean CE over entries of `logits` (n x 2). Fills `dlogits` when non-null.
inline double softmax_batch(const LabeledRows& entries, const dm::Matrix& logits, dm::Matrix* dlogits = nullptr) {
    if (entries.rows.size() != entries.labels.size()) throw ShapeMismatch("softmax_batch: rows vs labels");
    if (entries.rows.empty()) throw ShapeMismatch("softmax_batch: no entries");
    if (logits.cols() != 2) throw ShapeMismatch("softmax_batch: logits must have 2 columns");
    if (dlogits) *dlogits = dm::Matrix::Zero(logits.rows(), 2);
    const double inv_n = 1.0 / static_cast<double>(entries.rows.size());
    double total = 0.0;
    for (std::size_t i = 0; i < entries.rows.size(); ++i) {
        const auto r = static_cast<Eigen::Index>(entries.rows[i]);
        const std::array<double, 2> l{logits(r, 0), logits(r, 1)};
        const int y = entries.labels[i];
        total += softmax_ce(l, y);
        if (dlogits) {
            const double p1 = prob_ood(l);
            (*dlogits)(r, 0) += inv_n * ((1.0 - p1) - (y == 0 ? 1.0 : 0.0));
            (*dlogits)(r, 1) += inv_n * (p1 - (y == 1 ? 1.0 : 0.0));
        }
    }
    return total * inv_n;
}

}  // namespace abstain
