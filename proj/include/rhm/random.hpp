#pragma once

// Counter-based random streams.
//
// A Stream is the pair (key, counter). Draw i returns
//     splitmix64_finalize(key + (i + 1) * 0x9e3779b97f4a7c15)
// so the sequence depends only on the key, never on global state. Sub-seeds for
// parallel work are derived with derive_seed(), which folds each coordinate in
// through the same finalizer:
//     derive_seed(seed, a, b) = mix64(mix64(seed ^ mix64(a ^ K1)) ^ mix64(b ^ K2))
// with K1 = 0x243f6a8885a308d3 and K2 = 0x13198a2e03707344.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace rhm {

constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) noexcept {
    return mix64(mix64(seed ^ mix64(a ^ 0x243f6a8885a308d3ULL)) ^ mix64(b ^ 0x13198a2e03707344ULL));
}

class Stream {
public:
    explicit Stream(std::uint64_t key = 0) noexcept : key_(key) {}

    std::uint64_t key() const noexcept { return key_; }
    std::uint64_t counter() const noexcept { return counter_; }

    std::uint64_t next_u64() noexcept {
        ++counter_;
        return mix64(key_ + counter_ * kGolden);
    }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform01() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform on [lo, hi).
    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform01(); }

    /// Unbiased integer in [0, n); n must be positive. Lemire's multiply-shift with rejection.
    std::uint64_t below(std::uint64_t n) noexcept {
        __uint128_t prod = static_cast<__uint128_t>(next_u64()) * n;
        auto low = static_cast<std::uint64_t>(prod);
        if (low < n) {
            const std::uint64_t threshold = (0 - n) % n;
            while (low < threshold) {
                prod = static_cast<__uint128_t>(next_u64()) * n;
                low = static_cast<std::uint64_t>(prod);
            }
        }
        return static_cast<std::uint64_t>(prod >> 64);
    }

    /// Standard normal via Box-Muller; the second variate of each pair is cached.
    double normal() noexcept {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        // u1 in (0, 1] keeps the log finite.
        const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    /// Independent child stream; advances this stream by one draw.
    Stream split() noexcept { return Stream(mix64(next_u64() ^ 0xa4093822299f31d0ULL)); }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

/// In-place Fisher-Yates shuffle.
template <typename T>
void shuffle(std::vector<T>& v, Stream& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.below(i));
        std::swap(v[i - 1], v[j]);
    }
}

}  // namespace rhm
