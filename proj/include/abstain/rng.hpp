#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <span>
#include <utility>
#include <vector>

namespace abstain {

/// Counter-based 64-bit generator.
///
/// Output i of a stream with key k is `mix64(k + (i + 1) * golden)`, where
/// `mix64` is the SplitMix64 finaliser. Any (key, counter) pair can be
/// evaluated without touching other draws, so per-(seed, epoch, anchor)
/// streams are derived by hashing the tuple into a key with `derive_key`.
/// Sequences are reproducible within this implementation; no attempt is
/// made to match any other library's generator.
class CounterRng {
public:
    static constexpr std::uint64_t golden = 0x9E3779B97F4A7C15ull;

    explicit CounterRng(std::uint64_t key) noexcept : key_(key) {}

    static constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    /// Folds a list of integers into a stream key.
    static constexpr std::uint64_t derive_key(std::initializer_list<std::uint64_t> parts) noexcept {
        std::uint64_t h = 0x6A09E667F3BCC909ull;
        for (auto p : parts) h = mix64(h ^ mix64(p + golden));
        return h;
    }

    std::uint64_t next_u64() noexcept { return mix64(key_ + (++counter_) * golden); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). Multiply-shift; bias is below 2^-64 * n.
    std::uint64_t below(std::uint64_t n) noexcept {
        return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    /// Standard normal via Box-Muller (both branches used).
    double normal() noexcept {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double t = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(t);
        has_spare_ = true;
        return r * std::cos(t);
    }

    /// k distinct positions from [0, n) (Floyd's algorithm), returned in
    /// draw order. Requires k <= n.
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
        std::vector<std::size_t> out;
        out.reserve(k);
        for (std::size_t j = n - k; j < n; ++j) {
            const auto t = static_cast<std::size_t>(below(j + 1));
            bool seen = false;
            for (auto v : out) {
                if (v == t) {
                    seen = true;
                    break;
                }
            }
            out.push_back(seen ? j : t);
        }
        // Floyd's output is a uniform subset but not a uniform order; shuffle.
        shuffle(std::span<std::size_t>(out));
        return out;
    }

    template <typename T>
    void shuffle(std::span<T> xs) noexcept {
        for (std::size_t i = xs.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(below(i));
            std::swap(xs[i - 1], xs[j]);
        }
    }

    [[nodiscard]] std::uint64_t key() const noexcept { return key_; }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace abstain
