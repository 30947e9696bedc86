// SPDX-License-Identifier: Apache-2.0
//
// s-Trace extraction by greedy best-first search from the output node.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <queue>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "strace/graph.hpp"
#include "strace/numerics.hpp"

namespace strace {

struct Trace {
    std::vector<std::size_t> edges;  // dense edge indices, selection order
    std::vector<std::size_t> nodes;  // dense node indices, root first, then in discovery order
    std::size_t budget = 0;
    double rel_size = 0.0;  // |E_s| / |E|
};

/// Strictly ascending relative sizes in (0, 1).
class SizeGrid {
public:
    SizeGrid() = default;
    explicit SizeGrid(std::vector<double> points) : points_(std::move(points)) {
        if (points_.empty()) throw std::invalid_argument("size grid is empty");
        for (std::size_t i = 0; i < points_.size(); ++i) {
            const double s = points_[i];
            if (!(s > 0.0 && s < 1.0)) throw std::invalid_argument("size grid values must lie in (0, 1)");
            if (i > 0 && !(s > points_[i - 1])) throw std::invalid_argument("size grid must be strictly ascending");
        }
    }

    /// The 26-point default grid, 1e-5 .. 8e-1.
    static SizeGrid default_grid() {
        return SizeGrid({1e-5, 2e-5, 4e-5, 8e-5, 1e-4, 2e-4, 4e-4, 8e-4, 1e-3, 1.2e-3, 1.4e-3, 2e-3, 3e-3,
                         4e-3, 6e-3, 8e-3, 1e-2, 2e-2, 4e-2, 6e-2, 8e-2, 1e-1, 2e-1, 4e-1, 6e-1, 8e-1});
    }

    const std::vector<double>& points() const { return points_; }
    std::size_t size() const { return points_.size(); }
    double operator[](std::size_t i) const { return points_[i]; }

private:
    std::vector<double> points_;
};

/// max(1, ceil(rel * |E|)), capped at |E|. The product is rounded down by a
/// relative 1e-9 first so decimal grid values that are exact multiples of
/// 1/|E| (0.1 * 30) do not spill into the next integer.
inline std::size_t budget_for(double rel_size, std::size_t edge_count) {
    const double raw = rel_size * static_cast<double>(edge_count);
    const double b = std::ceil(raw - 1e-9 * std::max(1.0, raw));
    const auto budget = static_cast<std::size_t>(std::max(1.0, b));
    return std::min(budget, edge_count);
}

namespace detail {

struct QueueEntry {
    double score;
    std::size_t edge;
};

/// Max-heap on score; equal scores pop the smaller dense index first.
struct QueueOrder {
    bool operator()(const QueueEntry& a, const QueueEntry& b) const {
        if (a.score != b.score) return a.score < b.score;
        return a.edge > b.edge;
    }
};

}  // namespace detail

/// Greedy best-first traversal. Returns up to max_edges edge indices in
/// selection order. score(edge_index) supplies the priority of each edge.
template <typename ScoreFn>
std::vector<std::size_t> best_first_order(const CompGraph& graph, ScoreFn&& score, std::size_t max_edges) {
    std::vector<std::size_t> order;
    std::vector<char> visited(graph.node_count(), 0);
    std::priority_queue<detail::QueueEntry, std::vector<detail::QueueEntry>, detail::QueueOrder> frontier;

    const NodeId root = graph.root();
    visited[graph.node_index(root)] = 1;
    for (auto e : graph.incoming(root)) frontier.push({score(e), e});

    while (!frontier.empty() && order.size() < max_edges) {
        const auto top = frontier.top();
        frontier.pop();
        order.push_back(top.edge);
        const NodeId u = graph.source(graph.edge_id(top.edge));
        const std::size_t ui = graph.node_index(u);
        if (!visited[ui]) {
            visited[ui] = 1;
            for (auto e : graph.incoming(u)) frontier.push({score(e), e});
        }
    }
    return order;
}

/// Trace made of the first `budget` edges of a selection order.
inline Trace trace_prefix(const CompGraph& graph, const std::vector<std::size_t>& order, std::size_t budget) {
    Trace t;
    t.budget = budget;
    const std::size_t count = std::min(budget, order.size());
    t.edges.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count));
    std::vector<char> seen(graph.node_count(), 0);
    const std::size_t root = graph.node_index(graph.root());
    seen[root] = 1;
    t.nodes.push_back(root);
    for (auto e : t.edges) {
        const std::size_t u = graph.node_index(graph.source(graph.edge_id(e)));
        if (!seen[u]) {
            seen[u] = 1;
            t.nodes.push_back(u);
        }
    }
    t.rel_size = static_cast<double>(t.edges.size()) / static_cast<double>(graph.edge_count());
    return t;
}

inline Trace extract_trace(const CompGraph& graph, const ImportanceScores& scores, std::size_t budget) {
    if (scores.size() != graph.edge_count()) throw std::invalid_argument("scores do not match graph");
    const auto order = best_first_order(graph, [&](std::size_t e) { return scores[e]; }, budget);
    return trace_prefix(graph, order, budget);
}

namespace detail {

inline std::vector<Trace> snapshots(const CompGraph& graph, const SizeGrid& grid,
                                    const std::vector<std::size_t>& order) {
    std::vector<Trace> out;
    out.reserve(grid.size());
    for (double s : grid.points()) out.push_back(trace_prefix(graph, order, budget_for(s, graph.edge_count())));
    return out;
}

inline std::size_t max_budget(const CompGraph& graph, const SizeGrid& grid) {
    std::size_t b = 0;
    for (double s : grid.points()) b = std::max(b, budget_for(s, graph.edge_count()));
    return b;
}

}  // namespace detail

/// One traversal, snapshotted at every grid budget. Traces are nested.
inline std::vector<Trace> extract_trace_grid(const CompGraph& graph, const ImportanceScores& scores,
                                             const SizeGrid& grid) {
    if (scores.size() != graph.edge_count()) throw std::invalid_argument("scores do not match graph");
    const auto order =
        best_first_order(graph, [&](std::size_t e) { return scores[e]; }, detail::max_budget(graph, grid));
    return detail::snapshots(graph, grid, order);
}

/// Baseline priority: uniform draw in [0,1) per edge, +1 for residual and MLP
/// edges so they always outrank attention edges.
inline double random_priority(const CompGraph& graph, std::size_t edge, std::uint64_t seed) {
    const double u = Rng::draw_at(seed, edge);
    return graph.edge_id(edge).kind == EdgeKind::Attn ? u : u + 1.0;
}

inline Trace extract_random_trace(const CompGraph& graph, std::size_t budget, std::uint64_t seed) {
    const auto order =
        best_first_order(graph, [&](std::size_t e) { return random_priority(graph, e, seed); }, budget);
    return trace_prefix(graph, order, budget);
}

inline std::vector<Trace> extract_random_trace_grid(const CompGraph& graph, const SizeGrid& grid,
                                                    std::uint64_t seed) {
    const auto order = best_first_order(
        graph, [&](std::size_t e) { return random_priority(graph, e, seed); }, detail::max_budget(graph, grid));
    return detail::snapshots(graph, grid, order);
}

/// {model_hash, n, budget, rel_size, edges}
inline nlohmann::ordered_json trace_to_json(const CompGraph& graph, const Trace& trace, const std::string& model_hash) {
    nlohmann::ordered_json j;
    j["model_hash"] = model_hash;
    j["n"] = graph.shape().n_tokens;
    j["budget"] = trace.budget;
    j["rel_size"] = trace.rel_size;
    auto edges = nlohmann::ordered_json::array();
    for (auto e : trace.edges) edges.push_back(graph.edge_text(e));
    j["edges"] = std::move(edges);
    return j;
}

}  // namespace strace
