// SPDX-License-Identifier: Apache-2.0
//
// Structural summaries of traces: depth makeup, edge-type makeup, and how
// concentrated edge usage is across components.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "strace/graph.hpp"
#include "strace/trace.hpp"

namespace strace {

inline constexpr std::size_t kDefaultDepthBins = 4;

/// Fraction of edges per layer-depth bin; bin = floor((layer-1) * bins / L).
inline std::vector<double> layer_composition(const CompGraph& graph, const Trace& trace,
                                             std::size_t n_bins = kDefaultDepthBins) {
    if (n_bins == 0) throw std::invalid_argument("layer_composition: need at least one bin");
    if (trace.edges.empty()) throw std::invalid_argument("layer_composition: empty trace");
    const std::size_t L = graph.shape().n_layers;
    std::vector<double> bins(n_bins, 0.0);
    for (auto e : trace.edges) {
        const std::size_t layer = graph.edge_id(e).layer;
        bins[(layer - 1) * n_bins / L] += 1.0;
    }
    for (double& b : bins) b /= static_cast<double>(trace.edges.size());
    return bins;
}

struct TypeComposition {
    double attention = 0.0;
    double mlp = 0.0;
    double residual = 0.0;
};

inline TypeComposition type_composition_from_counts(std::uint64_t attn, std::uint64_t mlp, std::uint64_t resid) {
    const double total = static_cast<double>(attn + mlp + resid);
    if (total == 0.0) throw std::invalid_argument("type_composition: empty trace");
    return {static_cast<double>(attn) / total, static_cast<double>(mlp) / total, static_cast<double>(resid) / total};
}

inline TypeComposition type_composition(const CompGraph& graph, const Trace& trace) {
    std::uint64_t attn = 0, mlp = 0, resid = 0;
    for (auto e : trace.edges) {
        switch (graph.edge_id(e).kind) {
            case EdgeKind::Attn: ++attn; break;
            case EdgeKind::Mlp: ++mlp; break;
            default: ++resid; break;
        }
    }
    return type_composition_from_counts(attn, mlp, resid);
}

/// Composition of the complete graph, from closed-form counts only.
inline TypeComposition full_graph_composition(const GraphShape& shape) {
    const auto c = shape.edge_counts();
    return type_composition_from_counts(c.attn, c.mlp, c.resid);
}

/// Edge count per component ordinal (see component_index).
inline std::vector<std::uint64_t> component_counts(const CompGraph& graph, const Trace& trace) {
    std::vector<std::uint64_t> counts(graph.shape().component_count(), 0);
    for (auto e : trace.edges) ++counts[component_index(graph.shape(), component_of(graph.edge_id(e)))];
    return counts;
}

struct FrequencyCurve {
    std::vector<std::size_t> ranked;  // component ordinals, most used first
    std::vector<double> x;            // 0.01, 0.02, ..., 1.00
    std::vector<double> y;            // cumulative edge share of the top ceil(x * U) components
};

/// Cumulative edge allocation over components ranked by usage. The universe
/// U is counts.size(), i.e. every component that could occur.
inline FrequencyCurve frequency_curve(const std::vector<std::uint64_t>& counts) {
    if (counts.empty()) throw std::invalid_argument("frequency_curve: empty component universe");
    const std::uint64_t total = std::accumulate(counts.begin(), counts.end(), std::uint64_t{0});
    if (total == 0) throw std::invalid_argument("frequency_curve: no edges");

    FrequencyCurve curve;
    curve.ranked.resize(counts.size());
    std::iota(curve.ranked.begin(), curve.ranked.end(), std::size_t{0});
    std::stable_sort(curve.ranked.begin(), curve.ranked.end(),
                     [&](std::size_t a, std::size_t b) { return counts[a] > counts[b]; });

    std::vector<std::uint64_t> prefix(counts.size() + 1, 0);
    for (std::size_t r = 0; r < counts.size(); ++r) prefix[r + 1] = prefix[r] + counts[curve.ranked[r]];

    const double universe = static_cast<double>(counts.size());
    for (int step = 1; step <= 100; ++step) {
        const double x = step / 100.0;
        // The small offset keeps exact products (0.5 * 2) from rounding up.
        auto top = static_cast<std::size_t>(std::ceil(x * universe - 1e-9));
        top = std::min(top, counts.size());
        curve.x.push_back(x);
        curve.y.push_back(static_cast<double>(prefix[top]) / static_cast<double>(total));
    }
    return curve;
}

/// Pools component counts over every trace (all at the same relative size).
inline FrequencyCurve component_frequency_curve(const CompGraph& graph, const std::vector<Trace>& traces) {
    if (traces.empty()) throw std::invalid_argument("component_frequency_curve: no traces");
    std::vector<std::uint64_t> counts(graph.shape().component_count(), 0);
    for (const auto& t : traces) {
        const auto c = component_counts(graph, t);
        for (std::size_t i = 0; i < c.size(); ++i) counts[i] += c[i];
    }
    return frequency_curve(counts);
}

}  // namespace strace
