// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "strace/ablation.hpp"
#include "support.hpp"

using namespace strace;
using test_util::Gen;
using test_util::tv_ref;

namespace {

struct Case {
    ModelConfig config;
    Weights weights;
    TokenSequence tokens;
    CompGraph graph;
};

Case make_case(Gen& g, std::size_t n = 0) {
    Case c;
    c.config = g.config(3, 24, 10);
    c.weights = random_model(c.config, g.seed(), false, 0.3);
    c.tokens = g.tokens(c.config, n ? n : g.range(1, 10));
    c.graph = CompGraph({c.config.n_layers, c.config.n_heads, c.tokens.size()});
    return c;
}

Vec embed_ref(const Case& c, std::size_t i) {
    Vec h(c.config.d_model);
    for (std::size_t d = 0; d < h.size(); ++d)
        h[d] = double(c.weights.tok_emb.data[c.tokens[i] * h.size() + d]) + double(c.weights.pos_emb.data[i * h.size() + d]);
    return h;
}

EdgeMask residual_chain(const Case& c, AblationMode mode) {
    EdgeMask m = EdgeMask::none(c.graph.shape(), mode);
    const std::size_t n = c.tokens.size();
    for (std::size_t l = 1; l <= c.config.n_layers; ++l) {
        m.set(c.graph.edge_index(EdgeId::resid_attn(l, n)), true);
        m.set(c.graph.edge_index(EdgeId::resid_mlp(l, n)), true);
    }
    return m;
}

void expect_distribution(const Vec& p) {
    double total = 0.0;
    for (double v : p) {
        EXPECT_GE(v, 0.0);
        total += v;
    }
    EXPECT_NEAR(total, 1.0, 1e-9);
}

constexpr AblationMode kModes[] = {AblationMode::after_softmax, AblationMode::before_softmax};

}  // namespace

TEST(MaskedForward, FullMaskIsIdentity) {
    Gen g(51);
    for (int rep = 0; rep < 15; ++rep) {
        const auto c = make_case(g);
        const auto full = forward_plain(c.config, c.weights, c.tokens);
        for (auto mode : kModes) {
            EXPECT_LT(tv_ref(full, masked_forward(c.config, c.weights, c.tokens, EdgeMask::all(c.graph.shape(), mode))),
                      1e-8);
        }
        EXPECT_LT(tv_ref(full, masked_forward_presoftmax(c.config, c.weights, c.tokens, EdgeMask::all(c.graph.shape()))),
                  1e-8);
    }
}

TEST(MaskedForward, EmptyMaskIsUniform) {
    Gen g(52);
    for (int rep = 0; rep < 15; ++rep) {
        const auto c = make_case(g);
        for (auto mode : kModes) {
            const auto p = masked_forward(c.config, c.weights, c.tokens, EdgeMask::none(c.graph.shape(), mode));
            EXPECT_LT(tv_ref(p, test_util::uniform(c.config.vocab_size)), 1e-9);
        }
    }
}

TEST(MaskedForward, ResidualChainEqualsEmbeddingReadout) {
    Gen g(53);
    for (int rep = 0; rep < 10; ++rep) {
        const auto c = make_case(g);
        const auto expect = logits_from_state(c.config, c.weights, embed_ref(c, c.tokens.size() - 1));
        for (auto mode : kModes) {
            const auto p = masked_forward(c.config, c.weights, c.tokens, residual_chain(c, mode));
            EXPECT_LT(tv_ref(p, expect), 1e-12);
        }
    }
}

// Oracle: dropping every edge of one kind equals zeroing the matrix that produces it.
TEST(MaskedForward, DroppingAllMlpEdgesEqualsZeroedMlp) {
    Gen g(54);
    for (int rep = 0; rep < 10; ++rep) {
        auto c = make_case(g);
        EdgeMask m = EdgeMask::all(c.graph.shape());
        for (std::size_t e = 0; e < c.graph.edge_count(); ++e)
            if (c.graph.edge_id(e).kind == EdgeKind::Mlp) m.set(e, false);
        const auto masked = masked_forward(c.config, c.weights, c.tokens, m);
        for (auto& lw : c.weights.layers) std::fill(lw.w_out.data.begin(), lw.w_out.data.end(), 0.0f);
        EXPECT_LT(tv_ref(masked, forward_plain(c.config, c.weights, c.tokens)), 1e-12);
    }
}

TEST(MaskedForward, DroppingAllAttentionEdgesEqualsZeroedOutputProjection) {
    Gen g(55);
    for (int rep = 0; rep < 10; ++rep) {
        auto c = make_case(g);
        for (auto mode : kModes) {
            EdgeMask m = EdgeMask::all(c.graph.shape(), mode);
            for (std::size_t e = 0; e < c.graph.edge_count(); ++e)
                if (c.graph.edge_id(e).kind == EdgeKind::Attn) m.set(e, false);
            const auto masked = masked_forward(c.config, c.weights, c.tokens, m);
            auto w = c.weights;
            for (auto& lw : w.layers) std::fill(lw.wo.data.begin(), lw.wo.data.end(), 0.0f);
            EXPECT_LT(tv_ref(masked, forward_plain(c.config, w, c.tokens)), 1e-12);
        }
    }
}

TEST(MaskedForward, SingleTokenSelfEdgeMaskedInBothModes) {
    Gen g(56);
    const auto c = make_case(g, 1);
    EdgeMask after = EdgeMask::all(c.graph.shape(), AblationMode::after_softmax);
    after.set(c.graph.edge_index(EdgeId::attn(1, 1, 1, 1)), false);
    EdgeMask before = after;
    before.set_mode(AblationMode::before_softmax);
    const auto pa = masked_forward(c.config, c.weights, c.tokens, after);
    const auto pb = masked_forward(c.config, c.weights, c.tokens, before);
    EXPECT_LT(tv_ref(pa, pb), 1e-15);
    // Same as zeroing head 1's columns of W_O in layer 1.
    auto w = c.weights;
    auto& wo = w.layers[0].wo;
    for (std::size_t r = 0; r < wo.rows(); ++r)
        for (std::size_t k = 0; k < c.config.d_head; ++k) wo.data[r * wo.cols() + k] = 0.0f;
    EXPECT_LT(tv_ref(pa, forward_plain(c.config, w, c.tokens)), 1e-12);
}

TEST(MaskedForward, BeforeSoftmaxRenormalizesKeptSources) {
    // Two tokens, one layer/head: masking source 1 of target 2 before the
    // softmax routes all of target 2's attention to itself.
    ModelConfig cfg;
    cfg.n_layers = 1;
    cfg.n_heads = 1;
    cfg.d_model = 8;
    cfg.d_head = 4;
    cfg.d_ff = 8;
    cfg.vocab_size = 12;
    cfg.max_seq = 4;
    const auto w = random_model(cfg, 3, false, 0.5);
    const TokenSequence t{2, 7};
    const CompGraph graph({1, 1, 2});
    EdgeMask m = EdgeMask::all(graph.shape(), AblationMode::before_softmax);
    m.set(graph.edge_index(EdgeId::attn(1, 2, 1, 1)), false);
    const auto rec = forward_decomposed(cfg, w, t);
    Vec z = rec.h(0, 1);
    for (std::size_t d = 0; d < z.size(); ++d) z[d] += rec.head_value(1, 0, 1)[d];  // weight 1 on self
    Vec h = z;
    const auto mlp = detail::mlp(cfg, w.layers[0], z);
    for (std::size_t d = 0; d < h.size(); ++d) h[d] += mlp[d];
    EXPECT_LT(tv_ref(masked_forward(cfg, w, t, m), logits_from_state(cfg, w, h)), 1e-12);
}

TEST(MaskedForward, RandomMasksGiveValidDistributions) {
    Gen g(57);
    std::size_t differing = 0;
    for (int rep = 0; rep < 20; ++rep) {
        const auto c = make_case(g, g.range(2, 10));
        EdgeMask m = EdgeMask::none(c.graph.shape());
        for (std::size_t e = 0; e < m.size(); ++e) m.set(e, g.range(0, 1) == 1);
        const auto pa = masked_forward(c.config, c.weights, c.tokens, m);
        m.set_mode(AblationMode::before_softmax);
        const auto pb = masked_forward(c.config, c.weights, c.tokens, m);
        expect_distribution(pa);
        expect_distribution(pb);
        EXPECT_LE(tv_ref(pa, pb), 1.0);
        differing += tv_ref(pa, pb) > 1e-12;
    }
    EXPECT_GT(differing, 10u);
}

TEST(MaskedForward, ShapeMismatchThrows) {
    Gen g(58);
    const auto c = make_case(g, 3);
    EXPECT_THROW(masked_forward(c.config, c.weights, c.tokens, EdgeMask::all({c.config.n_layers, c.config.n_heads, 4})),
                 std::invalid_argument);
}

TEST(EdgeMaskType, FromTraceKeepsExactlyTraceEdges) {
    const CompGraph graph({2, 2, 3});
    Trace t;
    t.edges = {0, 5, 7};
    const auto m = EdgeMask::from_trace(graph, t);
    EXPECT_EQ(m.kept_count(), 3u);
    EXPECT_TRUE(m.kept(5));
    EXPECT_FALSE(m.kept(1));
    Trace bad;
    bad.edges = {graph.edge_count()};
    EXPECT_THROW(EdgeMask::from_trace(graph, bad), std::out_of_range);
}

TEST(InverseAblation, EmptyTraceIsFullModel) {
    Gen g(59);
    const auto c = make_case(g);
    const auto p = inverse_ablation(c.config, c.weights, c.tokens, Trace{});
    EXPECT_LT(tv_ref(p, forward_plain(c.config, c.weights, c.tokens)), 1e-8);
}

TEST(InverseAblation, AllComputeEdgesLeavesResidualStream) {
    Gen g(60);
    for (int rep = 0; rep < 5; ++rep) {
        const auto c = make_case(g);
        Trace t;
        for (std::size_t e = 0; e < c.graph.edge_count(); ++e) t.edges.push_back(e);  // residuals are ignored
        const auto p = inverse_ablation(c.config, c.weights, c.tokens, t);
        const auto expect = logits_from_state(c.config, c.weights, embed_ref(c, c.tokens.size() - 1));
        EXPECT_LT(tv_ref(p, expect), 1e-12);
    }
}
