#pragma once

#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "abstain/corpus.hpp"
#include "abstain/diffmath.hpp"
#include "abstain/error.hpp"
#include "abstain/rng.hpp"

namespace abstain {

enum class Head : std::uint8_t { ebm, softmax };

inline std::string_view to_string(Head h) noexcept { return h == Head::ebm ? "ebm" : "softmax"; }

inline std::optional<Head> parse_head(std::string_view s) noexcept {
    if (s == "ebm") return Head::ebm;
    if (s == "softmax") return Head::softmax;
    return std::nullopt;
}

struct ModelDims {
    std::size_t input = 1024;
    std::size_t hidden = 512;
    std::size_t latent = 256;
    std::size_t head_hidden = 256;

    friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

struct Dense {
    dm::Matrix w;  // out x in
    dm::ColVec b;  // out
};

enum class ParamGroup : std::uint8_t { projector, energy_head, softmax_head };

/// Projector d -> hidden -> latent (GELU, then L2 normalisation); energy
/// head latent -> head_hidden -> 1; softmax head latent -> head_hidden -> 2.
struct ModelParams {
    ModelDims dims;
    Dense proj1, proj2;
    Dense energy1, energy2;
    Dense softmax1, softmax2;

    static constexpr std::size_t tensor_count = 12;

    /// Tensors in declaration order: W then b of each layer.
    [[nodiscard]] std::array<std::span<double>, tensor_count> tensors() {
        std::array<std::span<double>, tensor_count> t;
        std::size_t k = 0;
        for (Dense* d : {&proj1, &proj2, &energy1, &energy2, &softmax1, &softmax2}) {
            t[k++] = {d->w.data(), static_cast<std::size_t>(d->w.size())};
            t[k++] = {d->b.data(), static_cast<std::size_t>(d->b.size())};
        }
        return t;
    }
    [[nodiscard]] std::array<std::span<const double>, tensor_count> tensors() const {
        auto t = const_cast<ModelParams*>(this)->tensors();
        std::array<std::span<const double>, tensor_count> out;
        for (std::size_t i = 0; i < tensor_count; ++i) out[i] = t[i];
        return out;
    }
    [[nodiscard]] std::array<std::pair<std::size_t, std::size_t>, tensor_count> shapes() const {
        std::array<std::pair<std::size_t, std::size_t>, tensor_count> s;
        std::size_t k = 0;
        for (const Dense* d : {&proj1, &proj2, &energy1, &energy2, &softmax1, &softmax2}) {
            s[k++] = {static_cast<std::size_t>(d->w.rows()), static_cast<std::size_t>(d->w.cols())};
            s[k++] = {static_cast<std::size_t>(d->b.size()), 1};
        }
        return s;
    }
    static constexpr ParamGroup group_of(std::size_t tensor) noexcept {
        return tensor < 4 ? ParamGroup::projector : (tensor < 8 ? ParamGroup::energy_head : ParamGroup::softmax_head);
    }

    void set_zero() {
        for (auto t : tensors()) std::fill(t.begin(), t.end(), 0.0);
    }

    [[nodiscard]] std::size_t size() const {
        std::size_t n = 0;
        for (auto t : tensors()) n += t.size();
        return n;
    }

    friend bool operator==(const ModelParams& a, const ModelParams& b) {
        if (!(a.dims == b.dims)) return false;
        auto ta = a.tensors();
        auto tb = b.tensors();
        for (std::size_t i = 0; i < tensor_count; ++i) {
            if (ta[i].size() != tb[i].size() || !std::equal(ta[i].begin(), ta[i].end(), tb[i].begin())) return false;
        }
        return true;
    }
};

/// Same shapes, all zeros.
inline ModelParams zeros_like(const ModelParams& p) {
    ModelParams z = p;
    z.set_zero();
    return z;
}

namespace detail {
inline Dense kaiming_dense(std::size_t out, std::size_t in, std::uint64_t key) {
    Dense d{dm::Matrix(static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in)),
            dm::ColVec::Zero(static_cast<Eigen::Index>(out))};
    const double bound = std::sqrt(6.0 / static_cast<double>(in));
    CounterRng rng(key);
    for (Eigen::Index i = 0; i < d.w.size(); ++i) d.w.data()[i] = rng.uniform(-bound, bound);
    return d;
}
}  // namespace detail

/// Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases.
inline ModelParams init_params(const ModelDims& dims, std::uint64_t seed) {
    if (dims.input == 0 || dims.hidden == 0 || dims.latent == 0 || dims.head_hidden == 0) {
        throw ConfigError("model dimensions must be positive");
    }
    auto key = [&](std::uint64_t layer) { return CounterRng::derive_key({seed, 0x1217ull, layer}); };
    ModelParams p;
    p.dims = dims;
    p.proj1 = detail::kaiming_dense(dims.hidden, dims.input, key(0));
    p.proj2 = detail::kaiming_dense(dims.latent, dims.hidden, key(1));
    p.energy1 = detail::kaiming_dense(dims.head_hidden, dims.latent, key(2));
    p.energy2 = detail::kaiming_dense(1, dims.head_hidden, key(3));
    p.softmax1 = detail::kaiming_dense(dims.head_hidden, dims.latent, key(4));
    p.softmax2 = detail::kaiming_dense(2, dims.head_hidden, key(5));
    return p;
}

// ---------------------------------------------------------------------------
// Single-vector forward passes

inline dm::Vec project(const ModelParams& p, std::span<const double> x) {
    if (x.size() != p.dims.input) {
        throw DimensionMismatch("project: input dim " + std::to_string(x.size()) + ", model expects " +
                                std::to_string(p.dims.input));
    }
    dm::Vec h = dm::linear(p.proj1.w, p.proj1.b, x);
    for (auto& v : h) v = dm::gelu(v);
    return dm::l2_normalize(dm::linear(p.proj2.w, p.proj2.b, h));
}

namespace detail {
inline dm::Vec head_forward(const Dense& l1, const Dense& l2, std::span<const double> z) {
    dm::Vec h = dm::linear(l1.w, l1.b, z);
    for (auto& v : h) v = dm::gelu(v);
    return dm::linear(l2.w, l2.b, h);
}
}  // namespace detail

inline double energy(const ModelParams& p, std::span<const double> z) {
    return detail::head_forward(p.energy1, p.energy2, z)[0];
}

inline std::array<double, 2> softmax_logits(const ModelParams& p, std::span<const double> z) {
    const auto o = detail::head_forward(p.softmax1, p.softmax2, z);
    return {o[0], o[1]};
}

/// softmax(logits)[1], computed stably.
inline double prob_ood(const std::array<double, 2>& logits) noexcept {
    const double d = logits[0] - logits[1];
    if (d >= 0) {
        const double e = std::exp(-d);
        return e / (1.0 + e);
    }
    return 1.0 / (1.0 + std::exp(d));
}

// ---------------------------------------------------------------------------
// Row-batched forward / backward

struct ProjectorCache {
    dm::Matrix h1;  // pre-activation of hidden layer
    dm::Matrix g1;  // gelu(h1)
    dm::NormalizedRows z;
};

inline ProjectorCache project_rows(const ModelParams& p, const dm::Matrix& x) {
    if (static_cast<std::size_t>(x.cols()) != p.dims.input) {
        throw DimensionMismatch("project_rows: input dim " + std::to_string(x.cols()) + ", model expects " +
                                std::to_string(p.dims.input));
    }
    ProjectorCache c;
    c.h1 = dm::linear_rows(x, p.proj1.w, p.proj1.b);
    c.g1 = dm::gelu_rows(c.h1);
    c.z = dm::normalize_rows(dm::linear_rows(c.g1, p.proj2.w, p.proj2.b));
    return c;
}

/// Accumulates projector gradients for upstream dZ into `grads`.
inline void projector_backward(const ModelParams& p, const dm::Matrix& x, const ProjectorCache& c,
                               const dm::Matrix& dz, ModelParams& grads) {
    const dm::Matrix du = dm::normalize_rows_backward(c.z, dz);
    grads.proj2.w.noalias() += du.transpose() * c.g1;
    grads.proj2.b += du.colwise().sum().transpose();
    const dm::Matrix dg = du * p.proj2.w;
    const dm::Matrix dh = dm::gelu_rows_backward(c.h1, dg);
    grads.proj1.w.noalias() += dh.transpose() * x;
    grads.proj1.b += dh.colwise().sum().transpose();
}

struct HeadCache {
    dm::Matrix h1;
    dm::Matrix g1;
    dm::Matrix out;
};

inline HeadCache head_rows(const Dense& l1, const Dense& l2, const dm::Matrix& z) {
    HeadCache c;
    c.h1 = dm::linear_rows(z, l1.w, l1.b);
    c.g1 = dm::gelu_rows(c.h1);
    c.out = dm::linear_rows(c.g1, l2.w, l2.b);
    return c;
}

/// Accumulates head gradients into (g1, g2) and returns dZ.
inline dm::Matrix head_backward(const Dense& l1, const Dense& l2, const dm::Matrix& z, const HeadCache& c,
                                const dm::Matrix& dout, Dense& g1, Dense& g2) {
    g2.w.noalias() += dout.transpose() * c.g1;
    g2.b += dout.colwise().sum().transpose();
    const dm::Matrix dh = dm::gelu_rows_backward(c.h1, dout * l2.w);
    g1.w.noalias() += dh.transpose() * z;
    g1.b += dh.colwise().sum().transpose();
    return dh * l1.w;
}

inline HeadCache energy_rows(const ModelParams& p, const dm::Matrix& z) { return head_rows(p.energy1, p.energy2, z); }
inline HeadCache softmax_rows(const ModelParams& p, const dm::Matrix& z) {
    return head_rows(p.softmax1, p.softmax2, z);
}

// ---------------------------------------------------------------------------
// Checkpoints

struct OptimState {
    ModelParams m;
    ModelParams v;
    std::uint64_t step = 0;

    friend bool operator==(const OptimState&, const OptimState&) = default;
};

struct Checkpoint {
    ModelParams params;
    OptimState optim;
    std::uint64_t epoch = 0;
    double val_loss = 0.0;
    std::string config_hash;
    std::uint64_t seed = 0;
    Head head = Head::ebm;
};

namespace detail {
inline void put_tensors(std::string& out, const ModelParams& p) {
    const auto shapes = p.shapes();
    const auto ts = p.tensors();
    for (std::size_t i = 0; i < ModelParams::tensor_count; ++i) {
        io::put_u32(out, static_cast<std::uint32_t>(shapes[i].first));
        io::put_u32(out, static_cast<std::uint32_t>(shapes[i].second));
        for (double v : ts[i]) io::put_f64(out, v);
    }
}

struct RawTensor {
    std::uint32_t rows = 0, cols = 0;
    std::vector<double> data;
};

inline RawTensor read_tensor(io::Reader& r) {
    RawTensor t;
    t.rows = r.u32("tensor rows");
    t.cols = r.u32("tensor cols");
    const std::size_t n = static_cast<std::size_t>(t.rows) * t.cols;
    if (n * 8 > r.remaining()) throw FormatError("truncated while reading tensor data");
    t.data.resize(n);
    for (auto& v : t.data) v = r.f64("tensor data");
    return t;
}

inline void fill_tensors(std::span<const RawTensor> raw, ModelParams& p) {
    const auto shapes = p.shapes();
    auto ts = p.tensors();
    for (std::size_t i = 0; i < ModelParams::tensor_count; ++i) {
        if (raw[i].rows != shapes[i].first || raw[i].cols != shapes[i].second) {
            throw FormatError("checkpoint tensor " + std::to_string(i) + " has shape " + std::to_string(raw[i].rows) +
                              "x" + std::to_string(raw[i].cols) + ", expected " + std::to_string(shapes[i].first) +
                              "x" + std::to_string(shapes[i].second));
        }
        std::copy(raw[i].data.begin(), raw[i].data.end(), ts[i].begin());
    }
}

inline ModelParams params_for(const ModelDims& d) {
    ModelParams p;
    p.dims = d;
    auto dense = [](std::size_t out, std::size_t in) {
        return Dense{dm::Matrix::Zero(static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in)),
                     dm::ColVec::Zero(static_cast<Eigen::Index>(out))};
    };
    p.proj1 = dense(d.hidden, d.input);
    p.proj2 = dense(d.latent, d.hidden);
    p.energy1 = dense(d.head_hidden, d.latent);
    p.energy2 = dense(1, d.head_hidden);
    p.softmax1 = dense(d.head_hidden, d.latent);
    p.softmax2 = dense(2, d.head_hidden);
    return p;
}
}  // namespace detail

/// "CKPT" | u32 tensor count | (u32 rows, u32 cols, f64 data)* for params,
/// Adam first moments, Adam second moments | u64 length | JSON metadata.
inline std::string encode_checkpoint(const Checkpoint& c) {
    std::string out = "CKPT";
    io::put_u32(out, static_cast<std::uint32_t>(3 * ModelParams::tensor_count));
    detail::put_tensors(out, c.params);
    detail::put_tensors(out, c.optim.m);
    detail::put_tensors(out, c.optim.v);
    const nlohmann::json meta = {
        {"epoch", c.epoch},
        {"val_loss", c.val_loss},
        {"step", c.optim.step},
        {"config_hash", c.config_hash},
        {"seed", c.seed},
        {"head", std::string(to_string(c.head))},
        {"dims",
         {{"input", c.params.dims.input},
          {"hidden", c.params.dims.hidden},
          {"latent", c.params.dims.latent},
          {"head_hidden", c.params.dims.head_hidden}}},
    };
    const std::string m = meta.dump();
    io::put_u64(out, m.size());
    out += m;
    return out;
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
    io::Reader r(bytes);
    if (r.take(4, "magic") != "CKPT") throw FormatError("not a CKPT file");
    if (r.u32("tensor count") != 3 * ModelParams::tensor_count) throw FormatError("unexpected tensor count");

    std::vector<detail::RawTensor> raw;
    for (std::size_t i = 0; i < 3 * ModelParams::tensor_count; ++i) raw.push_back(detail::read_tensor(r));
    const ModelDims d{raw[0].cols, raw[0].rows, raw[2].rows, raw[4].rows};

    Checkpoint c;
    c.params = detail::params_for(d);
    c.optim.m = detail::params_for(d);
    c.optim.v = detail::params_for(d);
    const std::span<const detail::RawTensor> all(raw);
    detail::fill_tensors(all.subspan(0, ModelParams::tensor_count), c.params);
    detail::fill_tensors(all.subspan(ModelParams::tensor_count, ModelParams::tensor_count), c.optim.m);
    detail::fill_tensors(all.subspan(2 * ModelParams::tensor_count, ModelParams::tensor_count), c.optim.v);
    const auto len = r.u64("metadata length");
    if (len != r.remaining()) throw FormatError("metadata length does not match file size");
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(r.take(len, "metadata"));
        c.epoch = meta.at("epoch").get<std::uint64_t>();
        c.val_loss = meta.at("val_loss").get<double>();
        c.optim.step = meta.at("step").get<std::uint64_t>();
        c.config_hash = meta.at("config_hash").get<std::string>();
        c.seed = meta.at("seed").get<std::uint64_t>();
        auto h = parse_head(meta.at("head").get<std::string>());
        if (!h) throw FormatError("unknown head in checkpoint");
        c.head = *h;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint metadata: ") + e.what());
    }
    return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
    io::write_file(path, encode_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(io::read_file(path)); }

}  // namespace abstain
