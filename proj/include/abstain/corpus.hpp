#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "abstain/diffmath.hpp"
#include "abstain/error.hpp"
#include "abstain/rng.hpp"

namespace abstain {

enum class Role : std::uint8_t { anchor, positive_pool, hard_negative, mid_pool, easy_ood, reserve };
enum class Split : std::uint8_t { train, val, test, unassigned };

inline constexpr std::array<Role, 6> all_roles{Role::anchor,   Role::positive_pool, Role::hard_negative,
                                               Role::mid_pool, Role::easy_ood,      Role::reserve};
inline constexpr std::array<Split, 4> all_splits{Split::train, Split::val, Split::test, Split::unassigned};

inline std::string_view to_string(Role r) noexcept {
    switch (r) {
        case Role::anchor: return "anchor";
        case Role::positive_pool: return "positive-pool";
        case Role::hard_negative: return "hard-negative";
        case Role::mid_pool: return "mid-pool";
        case Role::easy_ood: return "easy-ood";
        case Role::reserve: return "reserve";
    }
    return "?";
}

inline std::string_view to_string(Split s) noexcept {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
        case Split::unassigned: return "unassigned";
    }
    return "?";
}

inline std::optional<Role> parse_role(std::string_view s) noexcept {
    for (auto r : all_roles) {
        if (to_string(r) == s) return r;
    }
    return std::nullopt;
}

inline std::optional<Split> parse_split(std::string_view s) noexcept {
    for (auto x : all_splits) {
        if (to_string(x) == s) return x;
    }
    return std::nullopt;
}

/// Records of one anchor/positive/hard-negative triple share the part of
/// their id after the first '/', e.g. "anchor/000017", "positive/000017",
/// "hard/000017". Ids without '/' are their own key.
inline std::string_view pair_key(std::string_view id) noexcept {
    const auto slash = id.find('/');
    return slash == std::string_view::npos ? id : id.substr(slash + 1);
}

/// Row-major f32 matrix of unit vectors with per-row id, role and split.
class EmbeddingStore {
public:
    EmbeddingStore() = default;
    explicit EmbeddingStore(std::size_t dim) : dim_(dim) {}

    [[nodiscard]] std::size_t size() const noexcept { return ids_.size(); }
    [[nodiscard]] std::size_t dim() const noexcept { return dim_; }

    [[nodiscard]] std::span<const float> row(std::size_t i) const noexcept {
        return {data_.data() + i * dim_, dim_};
    }
    [[nodiscard]] dm::Vec row_f64(std::size_t i) const {
        auto r = row(i);
        return {r.begin(), r.end()};
    }
    [[nodiscard]] const std::string& id(std::size_t i) const noexcept { return ids_[i]; }
    [[nodiscard]] Role role(std::size_t i) const noexcept { return roles_[i]; }
    [[nodiscard]] Split split(std::size_t i) const noexcept { return splits_[i]; }
    [[nodiscard]] std::span<const float> data() const noexcept { return data_; }

    [[nodiscard]] std::optional<std::size_t> find(const std::string& id) const {
        auto it = index_.find(id);
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }

    [[nodiscard]] std::vector<std::size_t> indices(Role r) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < size(); ++i) {
            if (roles_[i] == r) out.push_back(i);
        }
        return out;
    }

    [[nodiscard]] std::vector<std::size_t> indices(Role r, Split s) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < size(); ++i) {
            if (roles_[i] == r && splits_[i] == s) out.push_back(i);
        }
        return out;
    }

    [[nodiscard]] std::size_t count(Role r) const noexcept {
        return static_cast<std::size_t>(std::count(roles_.begin(), roles_.end(), r));
    }
    [[nodiscard]] std::size_t count(Split s) const noexcept {
        return static_cast<std::size_t>(std::count(splits_.begin(), splits_.end(), s));
    }

    template <typename T>
    void add(std::string id, std::span<const T> v, Role role, Split split = Split::unassigned) {
        if (v.size() != dim_) {
            throw DimensionMismatch("row '" + id + "' has dim " + std::to_string(v.size()) + ", store dim " +
                                    std::to_string(dim_));
        }
        if (index_.contains(id)) throw DuplicateId("duplicate id '" + id + "'");
        index_.emplace(id, ids_.size());
        for (auto x : v) data_.push_back(static_cast<float>(x));
        ids_.push_back(std::move(id));
        roles_.push_back(role);
        splits_.push_back(split);
    }

    void set_split(std::size_t i, Split s) noexcept { splits_[i] = s; }

    /// Overwrites row i (used by probes that swap test vectors for noise).
    void set_row(std::size_t i, std::span<const float> v) {
        if (v.size() != dim_) throw DimensionMismatch("set_row: dim mismatch");
        std::copy(v.begin(), v.end(), data_.begin() + static_cast<std::ptrdiff_t>(i * dim_));
    }

    /// Gathers rows into an f64 matrix.
    [[nodiscard]] dm::Matrix gather(std::span<const std::size_t> rows) const {
        dm::Matrix x(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(dim_));
        for (std::size_t r = 0; r < rows.size(); ++r) {
            auto src = row(rows[r]);
            for (std::size_t c = 0; c < dim_; ++c) {
                x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = src[c];
            }
        }
        return x;
    }

    [[nodiscard]] nlohmann::json summary() const {
        nlohmann::json roles = nlohmann::json::object();
        for (auto r : all_roles) roles[std::string(to_string(r))] = count(r);
        nlohmann::json splits = nlohmann::json::object();
        for (auto s : all_splits) splits[std::string(to_string(s))] = count(s);
        return {{"n", size()}, {"dim", dim_}, {"roles", roles}, {"splits", splits}};
    }

    friend bool operator==(const EmbeddingStore&, const EmbeddingStore&) = default;

private:
    std::size_t dim_ = 0;
    std::vector<float> data_;
    std::vector<std::string> ids_;
    std::vector<Role> roles_;
    std::vector<Split> splits_;
    std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Little-endian byte helpers shared by the EMB1 and CKPT formats.

namespace io {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}
inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}
inline void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }
inline void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

/// Bounds-checked little-endian reader over a byte buffer.
class Reader {
public:
    explicit Reader(std::string_view bytes) : bytes_(bytes) {}

    std::string_view take(std::size_t n, const char* what) {
        if (bytes_.size() - pos_ < n) throw FormatError(std::string("truncated while reading ") + what);
        auto s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::uint32_t u32(const char* what) {
        auto s = take(4, what);
        std::uint32_t v = 0;
        for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[static_cast<std::size_t>(i)]);
        return v;
    }
    std::uint64_t u64(const char* what) {
        auto s = take(8, what);
        std::uint64_t v = 0;
        for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[static_cast<std::size_t>(i)]);
        return v;
    }
    float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
    double f64(const char* what) { return std::bit_cast<double>(u64(what)); }

    [[nodiscard]] std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

private:
    std::string_view bytes_;
    std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace io

// ---------------------------------------------------------------------------
// EMB1: "EMB1" | u32 rows | u32 dim | rows*dim f32 | u64 trailer length |
// JSON-lines trailer, one {"id","role","split"} object per row.

inline std::string encode_emb1(const EmbeddingStore& store) {
    std::string out = "EMB1";
    io::put_u32(out, static_cast<std::uint32_t>(store.size()));
    io::put_u32(out, static_cast<std::uint32_t>(store.dim()));
    for (float v : store.data()) io::put_f32(out, v);
    std::string trailer;
    for (std::size_t i = 0; i < store.size(); ++i) {
        nlohmann::json line = {{"id", store.id(i)},
                               {"role", std::string(to_string(store.role(i)))},
                               {"split", std::string(to_string(store.split(i)))}};
        trailer += line.dump();
        trailer += '\n';
    }
    io::put_u64(out, trailer.size());
    out += trailer;
    return out;
}

/// Rows within 1e-3 of unit norm are kept bit-for-bit; rows with norm in
/// [0.5, 2] are rescaled to unit norm; anything else is rejected.
inline EmbeddingStore decode_emb1(std::string_view bytes) {
    io::Reader rd(bytes);
    if (rd.take(4, "magic") != "EMB1") throw FormatError("bad magic (expected EMB1)");
    const std::uint32_t rows = rd.u32("row count");
    const std::uint32_t dim = rd.u32("dim");
    if (dim == 0) throw FormatError("dim is zero");
    const std::uint64_t payload = static_cast<std::uint64_t>(rows) * dim * 4u;
    if (rd.remaining() < payload + 8) throw FormatError("truncated matrix payload");
    std::vector<float> values(static_cast<std::size_t>(rows) * dim);
    for (auto& v : values) v = rd.f32("matrix");
    const std::uint64_t trailer_len = rd.u64("trailer length");
    if (rd.remaining() != trailer_len) {
        throw FormatError("trailer length " + std::to_string(trailer_len) + " does not match remaining " +
                          std::to_string(rd.remaining()) + " bytes");
    }
    const std::string trailer(rd.take(trailer_len, "trailer"));

    EmbeddingStore store(dim);
    std::istringstream lines(trailer);
    std::string line;
    std::size_t r = 0;
    std::vector<float> buf(dim);
    while (std::getline(lines, line)) {
        if (line.empty()) continue;
        if (r >= rows) throw FormatError("trailer has more entries than rows");
        nlohmann::json meta;
        try {
            meta = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("trailer line " + std::to_string(r) + ": " + e.what());
        }
        if (!meta.is_object() || !meta.contains("id") || !meta.contains("role") || !meta.contains("split") ||
            !meta["id"].is_string() || !meta["role"].is_string() || !meta["split"].is_string()) {
            throw FormatError("trailer line " + std::to_string(r) + " lacks id/role/split strings");
        }
        auto role = parse_role(meta["role"].get<std::string>());
        auto split = parse_split(meta["split"].get<std::string>());
        if (!role || !split) throw FormatError("trailer line " + std::to_string(r) + ": unknown role or split");

        std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(r * dim), dim, buf.begin());
        double sq = 0.0;
        for (float v : buf) sq += static_cast<double>(v) * v;
        const double norm = std::sqrt(sq);
        if (!(norm >= 0.5 && norm <= 2.0)) {
            throw NormError("row '" + meta["id"].get<std::string>() + "' has norm " + std::to_string(norm));
        }
        if (std::abs(norm - 1.0) > 1e-3) {
            for (auto& v : buf) v = static_cast<float>(v / norm);
        }
        store.add(meta["id"].get<std::string>(), std::span<const float>(buf), *role, *split);
        ++r;
    }
    if (r != rows) throw FormatError("trailer has " + std::to_string(r) + " entries for " + std::to_string(rows) + " rows");
    return store;
}

inline void save_embeddings(const EmbeddingStore& store, const std::filesystem::path& path) {
    io::write_file(path, encode_emb1(store));
}

inline EmbeddingStore load_embeddings(const std::filesystem::path& path) {
    return decode_emb1(io::read_file(path));
}

// ---------------------------------------------------------------------------
// Synthetic corpus

/// Geometry of the synthetic stand-in corpus. In-domain clusters live on
/// caps around centres that share a common "format" direction; each cluster
/// has a topical tangent subspace plus a small confusion subspace that
/// hard negatives rotate into. Easy OOD lives on separate caps.
struct SynthSpec {
    std::size_t dim = 1024;
    std::size_t n_id_clusters = 5;
    std::size_t n_anchors = 2000;
    std::size_t n_easy_ood = 2000;
    std::size_t n_mid = 4000;
    std::size_t n_reserve = 500;
    std::size_t n_ood_clusters = 5;
    double hard_perturbation_angle = 0.35;
    double easy_ood_separation_angle = 1.2;
    std::array<double, 2> mid_band{0.5, 0.8};        // cosine to the item's cluster centre
    std::array<double, 2> anchor_angle{0.4, 0.5};    // anchor angle from its cluster centre
    std::array<double, 2> ood_cap_angle{0.3, 0.6};   // easy-OOD angle from its cap centre
    std::size_t topic_dim = 16;
    std::size_t confusion_dim = 4;
    double confusion_overlap = 0.33;
    double isotropic_noise = 0.3;
    double shared_cosine = 0.33;  // cosine between any two cap centres
    std::uint64_t seed = 42;

    [[nodiscard]] std::size_t basis_size() const noexcept {
        return 1 + n_id_clusters * (1 + topic_dim + confusion_dim) + n_ood_clusters * (1 + topic_dim);
    }
};

inline void validate(const SynthSpec& s) {
    if (s.dim < 8) throw ConfigError("synth.dim must be >= 8");
    if (s.n_id_clusters == 0 || s.n_anchors == 0) throw ConfigError("synth needs at least one cluster and anchor");
    if (!(s.hard_perturbation_angle > 0.0 && s.hard_perturbation_angle < s.easy_ood_separation_angle &&
          s.easy_ood_separation_angle < std::numbers::pi / 2)) {
        throw ConfigError("synth angles must satisfy 0 < hard < easy_separation < pi/2");
    }
    if (!(s.mid_band[0] < s.mid_band[1] && s.mid_band[0] >= -1.0 && s.mid_band[1] <= 1.0)) {
        throw ConfigError("synth.mid_band must be an increasing cosine interval");
    }
    if (!(s.anchor_angle[0] <= s.anchor_angle[1] && s.anchor_angle[1] < std::numbers::pi / 2)) {
        throw ConfigError("synth.anchor_angle must be an increasing interval below pi/2");
    }
    if (s.topic_dim == 0 || s.confusion_dim == 0) throw ConfigError("synth subspace dims must be positive");
    if (s.n_easy_ood > 0 && s.n_ood_clusters == 0) throw ConfigError("synth.n_ood_clusters must be positive");
    if (!(s.shared_cosine >= 0.0 && s.shared_cosine < 1.0)) throw ConfigError("synth.shared_cosine must be in [0,1)");
}

namespace detail {

inline void orthogonalize_against(dm::ColVec& v, const dm::ColVec& u) { v -= u.dot(v) * u; }

inline dm::ColVec unit(const dm::ColVec& v) {
    const double n = v.norm();
    if (!(n > dm::eps_norm)) throw InfeasibleGeometry("degenerate direction while generating corpus");
    return v / n;
}

inline dm::ColVec gaussian(CounterRng& rng, std::size_t n) {
    dm::ColVec v(static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = rng.normal();
    return v;
}

/// Columns of `basis` weighted by iid normals, scaled by 1/sqrt(k).
inline dm::ColVec subspace_draw(CounterRng& rng, const dm::Matrix& basis) {
    const dm::ColVec w = gaussian(rng, static_cast<std::size_t>(basis.cols()));
    return basis * w / std::sqrt(static_cast<double>(basis.cols()));
}

struct SynthGeometry {
    dm::Matrix centres;                 // n_id_clusters x dim (rows)
    std::vector<dm::Matrix> topics;     // dim x topic_dim per cluster
    std::vector<dm::Matrix> confusions; // dim x confusion_dim per cluster
    dm::Matrix ood_centres;
    std::vector<dm::Matrix> ood_topics;
};

inline SynthGeometry build_geometry(const SynthSpec& s) {
    const auto d = static_cast<Eigen::Index>(s.dim);
    const auto nb = static_cast<Eigen::Index>(s.basis_size());
    CounterRng rng(CounterRng::derive_key({s.seed, 0xBA515ull}));
    dm::Matrix g(d, nb);
    for (Eigen::Index i = 0; i < d; ++i) {
        for (Eigen::Index j = 0; j < nb; ++j) g(i, j) = rng.normal();
    }
    const Eigen::HouseholderQR<dm::Matrix> qr(g);
    const dm::Matrix q = qr.householderQ() * dm::Matrix::Identity(d, nb);

    Eigen::Index col = 0;
    auto take = [&](std::size_t k) {
        dm::Matrix b = q.middleCols(col, static_cast<Eigen::Index>(k));
        col += static_cast<Eigen::Index>(k);
        return b;
    };
    const dm::ColVec shared = take(1).col(0);
    const double a = std::sqrt(s.shared_cosine);
    const double b = std::sqrt(1.0 - s.shared_cosine);

    SynthGeometry geo;
    geo.centres.resize(static_cast<Eigen::Index>(s.n_id_clusters), d);
    for (std::size_t j = 0; j < s.n_id_clusters; ++j) {
        geo.centres.row(static_cast<Eigen::Index>(j)) = (a * shared + b * take(1).col(0)).transpose();
        geo.topics.push_back(take(s.topic_dim));
        geo.confusions.push_back(take(s.confusion_dim));
    }
    geo.ood_centres.resize(static_cast<Eigen::Index>(s.n_ood_clusters), d);
    for (std::size_t k = 0; k < s.n_ood_clusters; ++k) {
        geo.ood_centres.row(static_cast<Eigen::Index>(k)) = (a * shared + b * take(1).col(0)).transpose();
        geo.ood_topics.push_back(take(s.topic_dim));
    }
    return geo;
}

/// Unit tangent at an in-domain centre: topical spread, a share of the
/// confusion subspace, and isotropic noise, orthogonal to the centre.
inline dm::ColVec id_tangent(CounterRng& rng, const SynthSpec& s, const SynthGeometry& geo, std::size_t j) {
    const dm::ColVec c = geo.centres.row(static_cast<Eigen::Index>(j)).transpose();
    dm::ColVec t = subspace_draw(rng, geo.topics[j]) + s.confusion_overlap * subspace_draw(rng, geo.confusions[j]) +
                   s.isotropic_noise * gaussian(rng, s.dim) / std::sqrt(static_cast<double>(s.dim));
    orthogonalize_against(t, c);
    return unit(t);
}

inline dm::ColVec on_cap(const dm::ColVec& centre, const dm::ColVec& tangent, double angle) {
    return std::cos(angle) * centre + std::sin(angle) * tangent;
}

}  // namespace detail

inline std::string synth_id(std::string_view prefix, std::size_t i) {
    std::ostringstream os;
    os << prefix << '/';
    os.width(6);
    os.fill('0');
    os << i;
    return os.str();
}

/// Deterministic synthetic corpus. Rows are emitted in role order: anchors,
/// positives, hard negatives, mid-pool, reserve, easy OOD.
inline EmbeddingStore synth_corpus(const SynthSpec& s) {
    validate(s);
    if (s.basis_size() > s.dim) {
        throw InfeasibleGeometry("dim " + std::to_string(s.dim) + " cannot hold " + std::to_string(s.basis_size()) +
                                 " orthogonal cluster directions");
    }
    // Hard negatives keep the anchor's angle to its centre, which needs
    // sin^2(alpha) >= (1 - cos h) / 2, i.e. alpha >= h / 2.
    if (s.anchor_angle[0] < s.hard_perturbation_angle / 2.0) {
        throw InfeasibleGeometry("anchor_angle lower bound must be >= hard_perturbation_angle / 2");
    }
    if (s.n_easy_ood > 0 && s.shared_cosine >= std::cos(s.easy_ood_separation_angle)) {
        throw InfeasibleGeometry("shared_cosine leaves no room for easy-OOD separation");
    }

    const auto geo = detail::build_geometry(s);
    const double hard = s.hard_perturbation_angle;
    EmbeddingStore store(s.dim);

    std::vector<dm::ColVec> anchors(s.n_anchors), positives(s.n_anchors), hards(s.n_anchors);
    for (std::size_t i = 0; i < s.n_anchors; ++i) {
        CounterRng rng(CounterRng::derive_key({s.seed, 0xA2C40ull, i}));
        const std::size_t j = i % s.n_id_clusters;
        const dm::ColVec c = geo.centres.row(static_cast<Eigen::Index>(j)).transpose();
        const double alpha = rng.uniform(s.anchor_angle[0], s.anchor_angle[1]);
        const dm::ColVec w = detail::id_tangent(rng, s, geo, j);
        const dm::ColVec a = detail::on_cap(c, w, alpha);

        // positive: isotropic perturbation by an angle in [h/8, h/2)
        const double phi = rng.uniform(hard / 8.0, hard / 2.0);
        dm::ColVec v = detail::gaussian(rng, s.dim);
        detail::orthogonalize_against(v, a);
        const dm::ColVec p = detail::on_cap(a, detail::unit(v), phi);

        // hard negative: rotate the tangent towards the confusion subspace so
        // that cos(anchor, hard) = cos(h) and the angle to the centre is kept.
        dm::ColVec t = detail::subspace_draw(rng, geo.confusions[j]);
        detail::orthogonalize_against(t, w);
        t = detail::unit(t);
        const double sin2 = std::sin(alpha) * std::sin(alpha);
        const double cos_beta = 1.0 - (1.0 - std::cos(hard)) / sin2;
        const double beta = std::acos(std::clamp(cos_beta, -1.0, 1.0));
        const dm::ColVec w2 = std::cos(beta) * w + std::sin(beta) * t;
        anchors[i] = a;
        positives[i] = p;
        hards[i] = detail::on_cap(c, w2, alpha);
    }
    for (std::size_t i = 0; i < s.n_anchors; ++i) {
        store.add(synth_id("anchor", i), std::span<const double>(anchors[i].data(), s.dim), Role::anchor);
    }
    for (std::size_t i = 0; i < s.n_anchors; ++i) {
        store.add(synth_id("positive", i), std::span<const double>(positives[i].data(), s.dim), Role::positive_pool);
    }
    for (std::size_t i = 0; i < s.n_anchors; ++i) {
        store.add(synth_id("hard", i), std::span<const double>(hards[i].data(), s.dim), Role::hard_negative);
    }

    auto band_items = [&](std::size_t n, std::uint64_t tag, std::string_view prefix, Role role) {
        for (std::size_t i = 0; i < n; ++i) {
            CounterRng rng(CounterRng::derive_key({s.seed, tag, i}));
            const auto j = static_cast<std::size_t>(rng.below(s.n_id_clusters));
            const dm::ColVec c = geo.centres.row(static_cast<Eigen::Index>(j)).transpose();
            const double cosv = rng.uniform(s.mid_band[0], s.mid_band[1]);
            const dm::ColVec w = detail::id_tangent(rng, s, geo, j);
            const dm::ColVec x = detail::on_cap(c, w, std::acos(cosv));
            store.add(synth_id(prefix, i), std::span<const double>(x.data(), s.dim), role);
        }
    };
    band_items(s.n_mid, 0x31D00ull, "mid", Role::mid_pool);
    band_items(s.n_reserve, 0x2E5E2ull, "reserve", Role::reserve);

    const double max_cos = std::cos(s.easy_ood_separation_angle);
    for (std::size_t i = 0; i < s.n_easy_ood; ++i) {
        CounterRng rng(CounterRng::derive_key({s.seed, 0xE0E0ull, i}));
        const auto k = static_cast<std::size_t>(rng.below(s.n_ood_clusters));
        const dm::ColVec o = geo.ood_centres.row(static_cast<Eigen::Index>(k)).transpose();
        bool placed = false;
        for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
            dm::ColVec w = detail::subspace_draw(rng, geo.ood_topics[k]) +
                           s.isotropic_noise * detail::gaussian(rng, s.dim) / std::sqrt(static_cast<double>(s.dim));
            detail::orthogonalize_against(w, o);
            const dm::ColVec x = detail::on_cap(o, detail::unit(w), rng.uniform(s.ood_cap_angle[0], s.ood_cap_angle[1]));
            if ((geo.centres * x).maxCoeff() <= max_cos) {
                store.add(synth_id("ood", i), std::span<const double>(x.data(), s.dim), Role::easy_ood);
                placed = true;
            }
        }
        if (!placed) throw InfeasibleGeometry("could not place easy-OOD item " + std::to_string(i));
    }
    return store;
}

/// Centres of the in-domain caps for a SynthSpec (for geometry checks in tests).
inline dm::Matrix synth_cluster_centres(const SynthSpec& s) { return detail::build_geometry(s).centres; }

// ---------------------------------------------------------------------------
// Splits

struct SplitFractions {
    double train = 0.8;
    double val = 0.1;
    double test = 0.1;
};

/// Partitions anchors (each moving with its positive and hard negative) into
/// train/val/test. Easy-OOD items are drawn into val and test in the same
/// count as that split's anchors; the rest, like mid-pool and reserve
/// items, stay unassigned and form the training negative pools.
inline EmbeddingStore assign_splits(const EmbeddingStore& store, const SplitFractions& f, std::uint64_t seed) {
    if (std::abs(f.train + f.val + f.test - 1.0) > 1e-9 || f.train < 0 || f.val < 0 || f.test < 0) {
        throw ConfigError("split fractions must be non-negative and sum to 1");
    }
    for (std::size_t i = 0; i < store.size(); ++i) {
        if (store.split(i) != Split::unassigned) throw ConfigError("store already has split assignments");
    }
    EmbeddingStore out = store;
    auto anchors = store.indices(Role::anchor);
    CounterRng rng(CounterRng::derive_key({seed, 0x5B117ull}));
    rng.shuffle(std::span<std::size_t>(anchors));

    const std::size_t n = anchors.size();
    const auto n_val = static_cast<std::size_t>(std::llround(f.val * static_cast<double>(n)));
    const auto n_test = static_cast<std::size_t>(std::llround(f.test * static_cast<double>(n)));
    if (n_val + n_test > n) throw EmptySplit("val + test exceed anchor count");
    const std::size_t n_train = n - n_val - n_test;
    if ((f.train > 0 && n_train == 0) || (f.val > 0 && n_val == 0) || (f.test > 0 && n_test == 0)) {
        throw EmptySplit("a split with positive fraction received no anchors");
    }

    std::unordered_map<std::string, Split> by_key;
    for (std::size_t r = 0; r < n; ++r) {
        const Split s = r < n_train ? Split::train : (r < n_train + n_val ? Split::val : Split::test);
        out.set_split(anchors[r], s);
        by_key.emplace(std::string(pair_key(store.id(anchors[r]))), s);
    }
    for (std::size_t i = 0; i < store.size(); ++i) {
        const Role r = store.role(i);
        if (r != Role::positive_pool && r != Role::hard_negative) continue;
        auto it = by_key.find(std::string(pair_key(store.id(i))));
        if (it != by_key.end()) out.set_split(i, it->second);
    }

    auto easy = store.indices(Role::easy_ood);
    rng.shuffle(std::span<std::size_t>(easy));
    const std::size_t e_val = std::min(n_val, easy.size());
    const std::size_t e_test = std::min(n_test, easy.size() - e_val);
    for (std::size_t r = 0; r < e_val; ++r) out.set_split(easy[r], Split::val);
    for (std::size_t r = e_val; r < e_val + e_test; ++r) out.set_split(easy[r], Split::test);
    return out;
}

}  // namespace abstain
