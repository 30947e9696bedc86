// SPDX-License-Identifier: Apache-2.0
//
// Scalar/vector primitives shared by the model, graph and metric code.
// Everything accumulates in double, regardless of the storage type of the
// operands.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

namespace strace {

using Vec = std::vector<double>;

/// Numerically stable softmax (max-subtracted).
inline Vec softmax(std::span<const double> logits) {
    if (logits.empty()) {
        throw std::invalid_argument("softmax: empty input");
    }
    const double peak = *std::max_element(logits.begin(), logits.end());
    Vec out(logits.size());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - peak);
        total += out[i];
    }
    for (double& v : out) {
        v /= total;
    }
    return out;
}

/// gain_i * x_i / sqrt(mean(x^2) + eps). An all-zero x maps to all-zero
/// output whenever eps > 0.
template <typename Gain>
Vec rms_norm(std::span<const double> x, std::span<const Gain> gain, double eps) {
    if (x.size() != gain.size()) {
        throw std::invalid_argument("rms_norm: gain length does not match input length");
    }
    if (x.empty()) {
        return {};
    }
    double sq = 0.0;
    for (double v : x) {
        sq += v * v;
    }
    const double denom = std::sqrt(sq / static_cast<double>(x.size()) + eps);
    Vec out(x.size());
    if (denom == 0.0) {
        return out;
    }
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = static_cast<double>(gain[i]) * x[i] / denom;
    }
    return out;
}

inline Vec rms_norm(const Vec& x, const Vec& gain, double eps) {
    return rms_norm<double>(std::span<const double>(x), std::span<const double>(gain), eps);
}

inline double l1_norm(std::span<const double> x) {
    double s = 0.0;
    for (double v : x) {
        s += std::abs(v);
    }
    return s;
}

inline bool all_finite(std::span<const double> x) {
    return std::all_of(x.begin(), x.end(), [](double v) { return std::isfinite(v); });
}

// ---------------------------------------------------------------------------
// Counter-based PRNG. Output k (1-based) of the stream with key `seed` is
// splitmix64_mix(seed + k * golden), i.e. exactly the SplitMix64 sequence
// seeded with `seed`. Because every draw is addressable by index, the stream
// can be indexed directly (draw_at) or split into independent child streams.
// ---------------------------------------------------------------------------

inline constexpr std::uint64_t kGoldenGamma = 0x9e3779b97f4a7c15ULL;

constexpr std::uint64_t splitmix64_mix(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Map 64 random bits to [0, 1) with 53-bit resolution.
constexpr double bits_to_unit(std::uint64_t bits) noexcept {
    return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

class Rng {
public:
    explicit constexpr Rng(std::uint64_t seed) noexcept : seed_(seed) {}

    constexpr std::uint64_t seed() const noexcept { return seed_; }
    constexpr std::uint64_t position() const noexcept { return counter_; }

    constexpr std::uint64_t next_u64() noexcept {
        ++counter_;
        return splitmix64_mix(seed_ + counter_ * kGoldenGamma);
    }

    /// Uniform in [0, 1).
    constexpr double uniform() noexcept { return bits_to_unit(next_u64()); }

    /// Box-Muller; consumes two uniforms per call.
    double normal(double mean = 0.0, double stddev = 1.0) noexcept {
        const double u1 = uniform();
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log1p(-u1));
        return mean + stddev * radius * std::cos(2.0 * std::numbers::pi * u2);
    }

    /// Stateless access to draw `index` (0-based) of the stream keyed by seed.
    static constexpr double draw_at(std::uint64_t seed, std::uint64_t index) noexcept {
        return bits_to_unit(splitmix64_mix(seed + (index + 1) * kGoldenGamma));
    }

    /// Independent child stream. Does not advance this stream.
    constexpr Rng split(std::uint64_t stream) const noexcept {
        return Rng(splitmix64_mix(seed_ ^ splitmix64_mix(stream + kGoldenGamma)));
    }

private:
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
};

/// Deterministic seed for a (base, a, b) triple, e.g. (run seed, instance, replicate).
constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) noexcept {
    return Rng(base).split(a).split(b).seed();
}

}  // namespace strace
