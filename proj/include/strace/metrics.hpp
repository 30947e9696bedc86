// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <stdexcept>
#include <utility>
#include <vector>

#include "strace/numerics.hpp"

namespace strace {

namespace detail {

inline void check_distribution(std::span<const double> p, const char* who) {
    if (p.empty()) throw std::invalid_argument(std::string(who) + ": empty distribution");
    double total = 0.0;
    for (double v : p) {
        if (!std::isfinite(v) || v < 0.0) throw std::invalid_argument(std::string(who) + ": invalid probability");
        total += v;
    }
    if (std::abs(total - 1.0) > 1e-6) {
        throw std::invalid_argument(std::string(who) + ": distribution does not sum to 1");
    }
}

/// Token ids ordered by descending probability, ties by ascending id.
inline std::vector<std::size_t> ranked_tokens(std::span<const double> p) {
    std::vector<std::size_t> ids(p.size());
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    std::stable_sort(ids.begin(), ids.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
    return ids;
}

}  // namespace detail

/// 1/2 * sum |P_v - Q_v|
inline double total_variation(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) throw std::invalid_argument("total_variation: length mismatch");
    detail::check_distribution(p, "total_variation");
    detail::check_distribution(q, "total_variation");
    double s = 0.0;
    for (std::size_t v = 0; v < p.size(); ++v) s += std::abs(p[v] - q[v]);
    return 0.5 * s;
}

/// Entropy in nats, 0 ln 0 = 0.
inline double shannon_entropy(std::span<const double> p) {
    detail::check_distribution(p, "shannon_entropy");
    double h = 0.0;
    for (double v : p) {
        if (v > 0.0) h -= v * std::log(v);
    }
    return h;
}

/// Smallest prefix of tokens (descending probability, ties by id) whose
/// cumulative mass reaches k_percent / 100. Returned in rank order.
inline std::vector<std::size_t> nucleus_set(std::span<const double> p, double k_percent) {
    if (!(k_percent > 0.0 && k_percent <= 100.0)) throw std::invalid_argument("nucleus_set: k must lie in (0, 100]");
    detail::check_distribution(p, "nucleus_set");
    const double target = k_percent / 100.0;
    const auto ranked = detail::ranked_tokens(p);
    std::vector<std::size_t> out;
    double mass = 0.0;
    for (auto id : ranked) {
        out.push_back(id);
        mass += p[id];
        if (mass >= target - 1e-12) break;
    }
    return out;
}

/// Trace distribution of one grid point.
struct GridDistribution {
    double rel_size;
    Vec probs;
};

/// Smallest grid size whose top-|N_k| token set equals the full model's
/// nucleus N_k; nullopt when no grid point reconstructs it.
inline std::optional<double> nucleus_reconstruction_size(std::span<const double> full,
                                                         const std::vector<GridDistribution>& grid_traces,
                                                         double k_percent) {
    auto target = nucleus_set(full, k_percent);
    std::sort(target.begin(), target.end());
    for (std::size_t g = 0; g < grid_traces.size(); ++g) {
        if (g > 0 && !(grid_traces[g].rel_size > grid_traces[g - 1].rel_size)) {
            throw std::invalid_argument("nucleus_reconstruction_size: grid must be ascending");
        }
        const auto& q = grid_traces[g].probs;
        if (q.size() != full.size()) throw std::invalid_argument("nucleus_reconstruction_size: length mismatch");
        auto ranked = detail::ranked_tokens(q);
        ranked.resize(target.size());
        std::sort(ranked.begin(), ranked.end());
        if (ranked == target) return grid_traces[g].rel_size;
    }
    return std::nullopt;
}

/// Reconstruction error curve on 0 = s_0 < ... < s_K = 1.
struct DensityProfile {
    std::vector<double> sizes;
    std::vector<double> errors;

    void validate() const {
        if (sizes.size() < 2 || sizes.size() != errors.size()) {
            throw std::invalid_argument("density profile: need >= 2 points and one error per point");
        }
        if (sizes.front() != 0.0 || sizes.back() != 1.0) {
            throw std::invalid_argument("density profile: grid must start at 0 and end at 1");
        }
        for (std::size_t k = 1; k < sizes.size(); ++k) {
            if (!(sizes[k] > sizes[k - 1])) throw std::invalid_argument("density profile: grid not ascending");
        }
        for (double e : errors) {
            if (!(e >= 0.0 && e <= 1.0)) throw std::invalid_argument("density profile: error outside [0, 1]");
        }
    }
};

/// Measured grid errors bracketed with eps(0) = error_at_zero and eps(1) = 0.
inline DensityProfile make_density_profile(const std::vector<double>& grid, const std::vector<double>& errors,
                                           double error_at_zero) {
    if (grid.size() != errors.size()) throw std::invalid_argument("density profile: grid/error length mismatch");
    DensityProfile p;
    p.sizes.push_back(0.0);
    p.errors.push_back(error_at_zero);
    p.sizes.insert(p.sizes.end(), grid.begin(), grid.end());
    p.errors.insert(p.errors.end(), errors.begin(), errors.end());
    p.sizes.push_back(1.0);
    p.errors.push_back(0.0);
    p.validate();
    return p;
}

enum class DensityAxis : std::uint8_t { linear, log10 };

/// Trapezoid AUC of eps over s:
///   linear: C = 1/2 sum_{k=1..K} (s_k - s_{k-1}) (eps_k + eps_{k-1})
///   log10:  same over x = log10 s, with s_0 = 0 replaced by s_1, so the
///           first segment has zero width and eps(0) drops out.
inline double computational_density(const DensityProfile& profile, DensityAxis axis = DensityAxis::linear) {
    profile.validate();
    const auto& s = profile.sizes;
    const auto& e = profile.errors;
    double c = 0.0;
    for (std::size_t k = 1; k < s.size(); ++k) {
        double width = s[k] - s[k - 1];
        if (axis == DensityAxis::log10) {
            if (k == 1) continue;
            width = std::log10(s[k]) - std::log10(s[k - 1]);
        }
        c += width * (e[k] + e[k - 1]);
    }
    return 0.5 * c;
}

inline double computational_density(const std::vector<double>& sizes, const std::vector<double>& errors,
                                    DensityAxis axis = DensityAxis::linear) {
    return computational_density(DensityProfile{sizes, errors}, axis);
}

/// 1-based average ranks (ties share the mean of their positions).
inline std::vector<double> average_ranks(std::span<const double> xs) {
    std::vector<std::size_t> idx(xs.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
    std::vector<double> ranks(xs.size());
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j + 1 < idx.size() && xs[idx[j + 1]] == xs[idx[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t t = i; t <= j; ++t) ranks[idx[t]] = r;
        i = j + 1;
    }
    return ranks;
}

class UndefinedCorrelation : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Pearson correlation of average ranks.
inline double spearman(std::span<const double> xs, std::span<const double> ys) {
    if (xs.size() != ys.size()) throw std::invalid_argument("spearman: length mismatch");
    if (xs.size() < 2) throw std::invalid_argument("spearman: need at least 2 observations");
    const auto rx = average_ranks(xs);
    const auto ry = average_ranks(ys);
    const double n = static_cast<double>(rx.size());
    const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
    const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) throw UndefinedCorrelation("spearman: constant input has no rank variance");
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// Relative frequency of each token in a corpus. Unseen tokens map to 0.
class TokenFrequency {
public:
    TokenFrequency() = default;
    explicit TokenFrequency(std::map<std::int32_t, double> freq) : freq_(std::move(freq)) {}

    double operator()(std::int32_t token) const {
        auto it = freq_.find(token);
        return it == freq_.end() ? 0.0 : it->second;
    }
    const std::map<std::int32_t, double>& table() const { return freq_; }

private:
    std::map<std::int32_t, double> freq_;
};

template <typename Range>
TokenFrequency token_frequency(const Range& tokens) {
    std::map<std::int32_t, std::uint64_t> counts;
    std::uint64_t total = 0;
    for (auto t : tokens) {
        ++counts[static_cast<std::int32_t>(t)];
        ++total;
    }
    if (total == 0) throw std::invalid_argument("token_frequency: empty corpus");
    std::map<std::int32_t, double> freq;
    for (auto [tok, c] : counts) freq[tok] = static_cast<double>(c) / static_cast<double>(total);
    return TokenFrequency(std::move(freq));
}

inline constexpr double kLossProbabilityFloor = 1e-12;

/// -ln P(gold), with P floored at 1e-12.
inline double lm_loss(std::span<const double> p, std::size_t gold) {
    if (gold >= p.size()) throw std::invalid_argument("lm_loss: gold token outside vocabulary");
    return -std::log(std::max(p[gold], kLossProbabilityFloor));
}

}  // namespace strace
