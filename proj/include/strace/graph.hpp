// SPDX-License-Identifier: Apache-2.0
//
// Token-level computational graph of a decomposed forward pass.
//
// Nodes: H(l, i) for l in 0..L and Z(l, i) for l in 1..L.
// Edges into Z(l, i):  ResidAttn(l, i) from H(l-1, i)
//                      Attn(l, i, j, k) from H(l-1, j) for every source j <= i and head k
// Edges into H(l, i):  ResidMlp(l, i) and Mlp(l, i), both from Z(l, i)
//
// Domain ids (NodeId, EdgeId) use 1-based tokens and heads. Every edge also
// has a dense index; dense order is the total EdgeId order used for tie
// breaking: layer asc, kind (A < M < RA < RM), target asc, source asc, head asc.
// Masked (j > i) attention edges do not exist in E.

#pragma once

#include <cmath>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "strace/model.hpp"
#include "strace/numerics.hpp"

namespace strace {

enum class NodeKind : std::uint8_t { H, Z };

struct NodeId {
    NodeKind kind = NodeKind::H;
    std::size_t layer = 0;
    std::size_t token = 1;

    friend auto operator<=>(const NodeId&, const NodeId&) = default;
};

enum class EdgeKind : std::uint8_t { Attn, Mlp, ResidAttn, ResidMlp };

struct EdgeId {
    EdgeKind kind = EdgeKind::Attn;
    std::size_t layer = 1;
    std::size_t target = 1;  // token i
    std::size_t source = 0;  // token j, Attn only
    std::size_t head = 0;    // head k, Attn only

    static EdgeId attn(std::size_t layer, std::size_t target, std::size_t source, std::size_t head) {
        return {EdgeKind::Attn, layer, target, source, head};
    }
    static EdgeId mlp(std::size_t layer, std::size_t token) { return {EdgeKind::Mlp, layer, token, 0, 0}; }
    static EdgeId resid_attn(std::size_t layer, std::size_t token) {
        return {EdgeKind::ResidAttn, layer, token, 0, 0};
    }
    static EdgeId resid_mlp(std::size_t layer, std::size_t token) { return {EdgeKind::ResidMlp, layer, token, 0, 0}; }

    friend bool operator==(const EdgeId&, const EdgeId&) = default;
};

/// `A:l{layer}:h{head}:{j}->{i}`, `M:l{layer}:{i}`, `RA:l{layer}:{i}`, `RM:l{layer}:{i}`
inline std::string to_string(const EdgeId& e) {
    const std::string l = std::to_string(e.layer);
    const std::string i = std::to_string(e.target);
    switch (e.kind) {
        case EdgeKind::Attn:
            return "A:l" + l + ":h" + std::to_string(e.head) + ":" + std::to_string(e.source) + "->" + i;
        case EdgeKind::Mlp: return "M:l" + l + ":" + i;
        case EdgeKind::ResidAttn: return "RA:l" + l + ":" + i;
        case EdgeKind::ResidMlp: return "RM:l" + l + ":" + i;
    }
    return {};
}

inline EdgeId parse_edge(const std::string& text) {
    auto fail = [&]() -> EdgeId { throw std::invalid_argument("malformed edge encoding '" + text + "'"); };
    unsigned long layer = 0, head = 0, src = 0, tgt = 0;
    int used = 0;
    if (std::sscanf(text.c_str(), "A:l%lu:h%lu:%lu->%lu%n", &layer, &head, &src, &tgt, &used) == 4 &&
        static_cast<std::size_t>(used) == text.size()) {
        return EdgeId::attn(layer, tgt, src, head);
    }
    if (std::sscanf(text.c_str(), "RA:l%lu:%lu%n", &layer, &tgt, &used) == 2 &&
        static_cast<std::size_t>(used) == text.size()) {
        return EdgeId::resid_attn(layer, tgt);
    }
    if (std::sscanf(text.c_str(), "RM:l%lu:%lu%n", &layer, &tgt, &used) == 2 &&
        static_cast<std::size_t>(used) == text.size()) {
        return EdgeId::resid_mlp(layer, tgt);
    }
    if (std::sscanf(text.c_str(), "M:l%lu:%lu%n", &layer, &tgt, &used) == 2 &&
        static_cast<std::size_t>(used) == text.size()) {
        return EdgeId::mlp(layer, tgt);
    }
    return fail();
}

/// Token-collapsed component an edge belongs to.
struct ComponentId {
    enum class Kind : std::uint8_t { Attn, Mlp, ResidAttn, ResidMlp };
    Kind kind = Kind::Attn;
    std::size_t layer = 1;
    std::size_t head = 0;  // 1-based, Attn only

    friend auto operator<=>(const ComponentId&, const ComponentId&) = default;
};

inline ComponentId component_of(const EdgeId& e) {
    switch (e.kind) {
        case EdgeKind::Attn: return {ComponentId::Kind::Attn, e.layer, e.head};
        case EdgeKind::Mlp: return {ComponentId::Kind::Mlp, e.layer, 0};
        case EdgeKind::ResidAttn: return {ComponentId::Kind::ResidAttn, e.layer, 0};
        case EdgeKind::ResidMlp: return {ComponentId::Kind::ResidMlp, e.layer, 0};
    }
    return {};
}

inline std::string to_string(const ComponentId& c) {
    const std::string l = std::to_string(c.layer);
    switch (c.kind) {
        case ComponentId::Kind::Attn: return "attn:l" + l + ":h" + std::to_string(c.head);
        case ComponentId::Kind::Mlp: return "mlp:l" + l;
        case ComponentId::Kind::ResidAttn: return "resid-attn:l" + l;
        case ComponentId::Kind::ResidMlp: return "resid-mlp:l" + l;
    }
    return {};
}

/// Closed-form sizes of E under the causal convention.
struct EdgeCounts {
    std::uint64_t attn = 0;
    std::uint64_t mlp = 0;
    std::uint64_t resid = 0;
    std::uint64_t total() const { return attn + mlp + resid; }
};

struct GraphShape {
    std::size_t n_layers = 1;
    std::size_t n_heads = 1;
    std::size_t n_tokens = 1;

    std::uint64_t node_count() const { return n_tokens * (2 * n_layers + 1); }

    EdgeCounts edge_counts() const {
        const std::uint64_t L = n_layers, H = n_heads, n = n_tokens;
        return {L * H * n * (n + 1) / 2, L * n, 2 * L * n};
    }

    /// Number of distinct ComponentIds that can occur: L*N_H attn + L mlp + 2L resid.
    std::size_t component_count() const { return n_layers * (n_heads + 3); }

    friend bool operator==(const GraphShape&, const GraphShape&) = default;
};

/// Dense ordinal of a component in [0, component_count()), in ComponentId order.
inline std::size_t component_index(const GraphShape& s, const ComponentId& c) {
    const std::size_t base = (c.layer - 1) * (s.n_heads + 3);
    switch (c.kind) {
        case ComponentId::Kind::Attn: return base + (c.head - 1);
        case ComponentId::Kind::Mlp: return base + s.n_heads;
        case ComponentId::Kind::ResidAttn: return base + s.n_heads + 1;
        case ComponentId::Kind::ResidMlp: return base + s.n_heads + 2;
    }
    return 0;
}

/// Implicit DAG over a GraphShape. Adjacency is computed from index
/// arithmetic, so very large shapes can be queried without materializing E.
class CompGraph {
public:
    CompGraph() = default;
    explicit CompGraph(GraphShape shape) : shape_(shape) {
        if (shape.n_layers == 0 || shape.n_heads == 0 || shape.n_tokens == 0) {
            throw std::invalid_argument("graph shape dimensions must be >= 1");
        }
        const std::size_t n = shape.n_tokens;
        attn_per_layer_ = shape.n_heads * n * (n + 1) / 2;
        per_layer_ = attn_per_layer_ + 3 * n;
    }

    const GraphShape& shape() const { return shape_; }
    std::size_t node_count() const { return static_cast<std::size_t>(shape_.node_count()); }
    std::size_t edge_count() const { return per_layer_ * shape_.n_layers; }

    NodeId root() const { return {NodeKind::H, shape_.n_layers, shape_.n_tokens}; }

    std::size_t node_index(const NodeId& v) const {
        check_node(v);
        const std::size_t n = shape_.n_tokens;
        if (v.kind == NodeKind::H) return v.layer * n + (v.token - 1);
        return (shape_.n_layers + 1) * n + (v.layer - 1) * n + (v.token - 1);
    }

    NodeId node_id(std::size_t index) const {
        const std::size_t n = shape_.n_tokens;
        const std::size_t h_nodes = (shape_.n_layers + 1) * n;
        if (index < h_nodes) return {NodeKind::H, index / n, index % n + 1};
        index -= h_nodes;
        return {NodeKind::Z, index / n + 1, index % n + 1};
    }

    std::size_t edge_index(const EdgeId& e) const {
        check_edge(e);
        const std::size_t n = shape_.n_tokens;
        const std::size_t base = (e.layer - 1) * per_layer_;
        switch (e.kind) {
            case EdgeKind::Attn:
                return base + shape_.n_heads * ((e.target - 1) * e.target / 2 + (e.source - 1)) + (e.head - 1);
            case EdgeKind::Mlp: return base + attn_per_layer_ + (e.target - 1);
            case EdgeKind::ResidAttn: return base + attn_per_layer_ + n + (e.target - 1);
            case EdgeKind::ResidMlp: return base + attn_per_layer_ + 2 * n + (e.target - 1);
        }
        return 0;
    }

    EdgeId edge_id(std::size_t index) const {
        if (index >= edge_count()) throw std::out_of_range("edge index out of range");
        const std::size_t n = shape_.n_tokens;
        const std::size_t layer = index / per_layer_ + 1;
        std::size_t off = index % per_layer_;
        if (off < attn_per_layer_) {
            const std::size_t head = off % shape_.n_heads + 1;
            const std::size_t pair = off / shape_.n_heads;  // (i-1)i/2 + (j-1)
            std::size_t i = static_cast<std::size_t>((std::sqrt(8.0 * static_cast<double>(pair) + 1.0) + 1.0) / 2.0);
            while (i > 1 && (i - 1) * i / 2 > pair) --i;
            while (i * (i + 1) / 2 <= pair) ++i;
            const std::size_t j = pair - (i - 1) * i / 2 + 1;
            return EdgeId::attn(layer, i, j, head);
        }
        off -= attn_per_layer_;
        const std::size_t token = off % n + 1;
        switch (off / n) {
            case 0: return EdgeId::mlp(layer, token);
            case 1: return EdgeId::resid_attn(layer, token);
            default: return EdgeId::resid_mlp(layer, token);
        }
    }

    NodeId source(const EdgeId& e) const {
        switch (e.kind) {
            case EdgeKind::Attn: return {NodeKind::H, e.layer - 1, e.source};
            case EdgeKind::ResidAttn: return {NodeKind::H, e.layer - 1, e.target};
            default: return {NodeKind::Z, e.layer, e.target};
        }
    }

    NodeId target(const EdgeId& e) const {
        if (e.kind == EdgeKind::Attn || e.kind == EdgeKind::ResidAttn) return {NodeKind::Z, e.layer, e.target};
        return {NodeKind::H, e.layer, e.target};
    }

    /// Dense indices of the edges entering v, ascending.
    std::vector<std::size_t> incoming(const NodeId& v) const {
        check_node(v);
        std::vector<std::size_t> out;
        if (v.kind == NodeKind::H) {
            if (v.layer == 0) return out;
            out = {edge_index(EdgeId::mlp(v.layer, v.token)), edge_index(EdgeId::resid_mlp(v.layer, v.token))};
            return out;
        }
        out.reserve(1 + shape_.n_heads * v.token);
        const std::size_t first = edge_index(EdgeId::attn(v.layer, v.token, 1, 1));
        for (std::size_t k = 0; k < shape_.n_heads * v.token; ++k) out.push_back(first + k);
        out.push_back(edge_index(EdgeId::resid_attn(v.layer, v.token)));
        return out;
    }

    std::string edge_text(std::size_t index) const { return to_string(edge_id(index)); }

private:
    void check_node(const NodeId& v) const {
        const bool layer_ok = v.kind == NodeKind::H ? v.layer <= shape_.n_layers
                                                    : (v.layer >= 1 && v.layer <= shape_.n_layers);
        if (!layer_ok || v.token < 1 || v.token > shape_.n_tokens) {
            throw std::out_of_range("node id outside graph shape");
        }
    }
    void check_edge(const EdgeId& e) const {
        bool ok = e.layer >= 1 && e.layer <= shape_.n_layers && e.target >= 1 && e.target <= shape_.n_tokens;
        if (e.kind == EdgeKind::Attn) {
            ok = ok && e.source >= 1 && e.source <= e.target && e.head >= 1 && e.head <= shape_.n_heads;
        }
        if (!ok) throw std::out_of_range("edge id outside graph shape: " + to_string(e));
    }

    GraphShape shape_{};
    std::size_t attn_per_layer_ = 0;
    std::size_t per_layer_ = 0;
};

inline CompGraph build_graph(const ForwardRecord& record) {
    if (!record.complete()) {
        throw std::invalid_argument("build_graph: forward record is incomplete");
    }
    return CompGraph({record.n_layers(), record.n_heads(), record.n_tokens()});
}

/// Node-normalized importance, indexed by dense edge index.
class ImportanceScores {
public:
    ImportanceScores() = default;
    ImportanceScores(const CompGraph& graph, std::vector<double> scores) : scores_(std::move(scores)) {
        if (scores_.size() != graph.edge_count()) {
            throw std::invalid_argument("importance scores do not cover every edge");
        }
    }

    double operator[](std::size_t edge) const { return scores_[edge]; }
    std::size_t size() const { return scores_.size(); }
    const std::vector<double>& values() const { return scores_; }

private:
    std::vector<double> scores_;
};

/// L1 norm of the vector an edge carries.
inline double edge_l1(const ForwardRecord& record, const EdgeId& e) {
    const std::size_t i = e.target - 1;
    switch (e.kind) {
        case EdgeKind::Attn: return record.attn_contribution_l1(e.layer, e.head - 1, i, e.source - 1);
        case EdgeKind::Mlp: return l1_norm(record.mlp_out(e.layer, i));
        case EdgeKind::ResidAttn: return l1_norm(record.h(e.layer - 1, i));
        case EdgeKind::ResidMlp: return l1_norm(record.z(e.layer, i));
    }
    return 0.0;
}

/// I(e) = |v_e|_1 / sum_{e' -> v} |v_e'|_1; uniform over the incoming set when
/// every incoming vector is zero.
inline ImportanceScores importance(const ForwardRecord& record, const CompGraph& graph) {
    const GraphShape expected{record.n_layers(), record.n_heads(), record.n_tokens()};
    if (!(graph.shape() == expected)) {
        throw std::invalid_argument("importance: graph was not built from this record");
    }
    std::vector<double> scores(graph.edge_count(), 0.0);
    for (std::size_t v = 0; v < graph.node_count(); ++v) {
        const auto in = graph.incoming(graph.node_id(v));
        if (in.empty()) continue;
        double total = 0.0;
        for (auto e : in) {
            scores[e] = edge_l1(record, graph.edge_id(e));
            total += scores[e];
        }
        for (auto e : in) {
            scores[e] = total > 0.0 ? scores[e] / total : 1.0 / static_cast<double>(in.size());
        }
    }
    return ImportanceScores(graph, std::move(scores));
}

}  // namespace strace
