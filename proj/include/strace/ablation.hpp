// SPDX-License-Identifier: Apache-2.0
//
// Masked re-inference. Every sublayer is recomputed from the masked upstream
// states; attention weights are never reused from the unmasked run.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

#include "strace/graph.hpp"
#include "strace/model.hpp"
#include "strace/trace.hpp"

namespace strace {

enum class AblationMode : std::uint8_t {
    after_softmax,   // contribution a_ij * u_j multiplied by m_ij
    before_softmax,  // masked logits set to -inf, remaining weights renormalize
};

class EdgeMask {
public:
    EdgeMask() = default;
    EdgeMask(const GraphShape& shape, bool keep_all, AblationMode mode = AblationMode::after_softmax)
        : shape_(shape), keep_(CompGraph(shape).edge_count(), keep_all ? 1 : 0), mode_(mode) {}

    static EdgeMask all(const GraphShape& s, AblationMode mode = AblationMode::after_softmax) {
        return EdgeMask(s, true, mode);
    }
    static EdgeMask none(const GraphShape& s, AblationMode mode = AblationMode::after_softmax) {
        return EdgeMask(s, false, mode);
    }
    /// Keeps exactly the trace's edges.
    static EdgeMask from_trace(const CompGraph& g, const Trace& t, AblationMode mode = AblationMode::after_softmax) {
        EdgeMask m = none(g.shape(), mode);
        for (auto e : t.edges) m.keep_.at(e) = 1;
        return m;
    }

    const GraphShape& shape() const { return shape_; }
    AblationMode mode() const { return mode_; }
    void set_mode(AblationMode mode) { mode_ = mode; }

    bool kept(std::size_t edge) const { return keep_[edge] != 0; }
    void set(std::size_t edge, bool keep) { keep_.at(edge) = keep ? 1 : 0; }
    std::size_t size() const { return keep_.size(); }
    std::size_t kept_count() const {
        std::size_t c = 0;
        for (auto k : keep_) c += k;
        return c;
    }

private:
    GraphShape shape_{};
    std::vector<std::uint8_t> keep_;
    AblationMode mode_ = AblationMode::after_softmax;
};

/// Final distribution of the forward pass restricted to the mask's kept edges.
inline Vec masked_forward(const ModelConfig& config, const Weights& weights, const TokenSequence& tokens,
                          const EdgeMask& mask) {
    validate_tokens(config, tokens);
    const std::size_t n = tokens.size();
    const GraphShape shape{config.n_layers, config.n_heads, n};
    if (!(mask.shape() == shape)) {
        throw std::invalid_argument("masked_forward: mask shape does not match model and input");
    }
    const CompGraph graph(shape);
    const bool before = mask.mode() == AblationMode::before_softmax;

    std::vector<Vec> states(n);
    for (std::size_t i = 0; i < n; ++i) states[i] = detail::embed(config, weights, tokens, i);

    for (std::size_t l = 1; l <= config.n_layers; ++l) {
        const auto& lw = weights.layers[l - 1];
        const auto proj = detail::project_heads(config, lw, states);
        const auto values = detail::output_values(config, lw, proj);
        std::vector<Vec> next(n);
        for (std::size_t i = 0; i < n; ++i) {
            Vec z(config.d_model, 0.0);
            if (mask.kept(graph.edge_index(EdgeId::resid_attn(l, i + 1)))) z = states[i];
            const std::size_t first = graph.edge_index(EdgeId::attn(l, i + 1, 1, 1));
            for (std::size_t h = 0; h < config.n_heads; ++h) {
                auto kept = [&](std::size_t j) { return mask.kept(first + j * config.n_heads + h); };
                Vec logits = detail::attention_logits(config, proj, h, i);
                if (before) {
                    bool any = false;
                    for (std::size_t j = 0; j <= i; ++j) {
                        if (kept(j)) any = true;
                        else logits[j] = -std::numeric_limits<double>::infinity();
                    }
                    if (!any) continue;  // every source masked: head contributes zero
                }
                const Vec a = softmax(logits);
                for (std::size_t j = 0; j <= i; ++j) {
                    if (!kept(j)) continue;
                    for (std::size_t d = 0; d < config.d_model; ++d) z[d] += a[j] * values[h][j][d];
                }
            }
            Vec h(config.d_model, 0.0);
            if (mask.kept(graph.edge_index(EdgeId::resid_mlp(l, i + 1)))) h = z;
            if (mask.kept(graph.edge_index(EdgeId::mlp(l, i + 1)))) {
                const Vec m = detail::mlp(config, lw, z);
                for (std::size_t d = 0; d < config.d_model; ++d) h[d] += m[d];
            }
            next[i] = std::move(h);
        }
        states = std::move(next);
    }
    return logits_from_state(config, weights, states[n - 1]);
}

inline Vec masked_forward_presoftmax(const ModelConfig& config, const Weights& weights, const TokenSequence& tokens,
                                     EdgeMask mask) {
    mask.set_mode(AblationMode::before_softmax);
    return masked_forward(config, weights, tokens, mask);
}

/// Zeroes the trace's attention and MLP edges; residual edges always stay.
inline Vec inverse_ablation(const ModelConfig& config, const Weights& weights, const TokenSequence& tokens,
                            const Trace& trace, AblationMode mode = AblationMode::after_softmax) {
    const GraphShape shape{config.n_layers, config.n_heads, tokens.size()};
    const CompGraph graph(shape);
    EdgeMask mask = EdgeMask::all(shape, mode);
    for (auto e : trace.edges) {
        if (e >= graph.edge_count()) throw std::invalid_argument("inverse_ablation: trace edge outside graph");
        const auto kind = graph.edge_id(e).kind;
        if (kind == EdgeKind::Attn || kind == EdgeKind::Mlp) mask.set(e, false);
    }
    return masked_forward(config, weights, tokens, mask);
}

}  // namespace strace
