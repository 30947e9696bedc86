// SPDX-License-Identifier: Apache-2.0
//
// Pre-norm decoder-only transformer with three forward paths:
//
//   forward_plain       fused reference pass (concat heads -> W_O), no recording
//   forward_decomposed  records every node state and every edge vector so that
//                       z^l_i = h^{l-1}_i + sum_{k,j} phi^{l,k}_{ij}
//                       h^l_i = z^l_i + mlp_l(z^l_i)
//                       hold as identities
//   (masked forward lives in ablation.hpp and reuses the helpers below)
//
// Layers are numbered 1..L, residual states h^0..h^L. Token and head indices
// in this header are 0-based.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "strace/numerics.hpp"

namespace strace {

enum class Activation : std::uint8_t { gelu, silu };

inline std::string to_string(Activation a) {
    return a == Activation::gelu ? "gelu" : "silu";
}

inline Activation activation_from_string(const std::string& s) {
    if (s == "gelu") return Activation::gelu;
    if (s == "silu") return Activation::silu;
    throw std::invalid_argument("unknown activation '" + s + "'");
}

struct ModelConfig {
    std::size_t n_layers = 2;
    std::size_t d_model = 16;
    std::size_t n_heads = 2;
    std::size_t d_head = 8;
    std::size_t d_ff = 64;
    std::size_t vocab_size = 257;
    std::size_t max_seq = 64;
    double norm_eps = 1e-5;
    Activation activation = Activation::gelu;

    std::size_t attn_width() const { return n_heads * d_head; }

    void validate() const {
        auto positive = [](std::size_t v, const char* name) {
            if (v == 0) throw std::invalid_argument(std::string("model config: ") + name + " must be >= 1");
        };
        positive(n_layers, "n_layers");
        positive(d_model, "d_model");
        positive(n_heads, "n_heads");
        positive(d_head, "d_head");
        positive(d_ff, "d_ff");
        positive(vocab_size, "vocab_size");
        positive(max_seq, "max_seq");
        if (!(norm_eps > 0.0) || !std::isfinite(norm_eps)) {
            throw std::invalid_argument("model config: norm_eps must be a positive finite number");
        }
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Dense row-major float32 tensor (rank 1 or 2).
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
        std::size_t n = 1;
        for (auto d : shape) n *= d;
        data.assign(n, 0.0f);
    }

    std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
    std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }
    float at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
    std::span<const float> row(std::size_t r) const {
        return std::span<const float>(data).subspan(r * cols(), cols());
    }
    std::span<const float> flat() const { return data; }

    friend bool operator==(const Tensor&, const Tensor&) = default;
};

struct LayerWeights {
    Tensor attn_norm;  // [d_model]
    Tensor wq;         // [n_heads*d_head, d_model], head k owns rows k*d_head..
    Tensor wk;
    Tensor wv;
    Tensor wo;         // [d_model, n_heads*d_head], head k owns cols k*d_head..
    Tensor mlp_norm;   // [d_model]
    Tensor w_in;       // [d_ff, d_model]
    Tensor w_out;      // [d_model, d_ff]

    friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

struct Weights {
    Tensor tok_emb;  // [vocab, d_model]
    Tensor pos_emb;  // [max_seq, d_model]
    std::vector<LayerWeights> layers;
    Tensor final_norm;  // [d_model]
    Tensor unembed;     // [vocab, d_model]

    friend bool operator==(const Weights&, const Weights&) = default;
};

/// Name/shape/tensor triples in canonical (file manifest) order.
template <typename TensorPtr>
struct NamedTensor {
    std::string name;
    std::vector<std::size_t> shape;
    TensorPtr tensor;
};

/// Works on mutable weights (layers are resized to the config) and on const
/// weights (layer count must already match).
template <typename W>
auto tensor_manifest(const ModelConfig& c, W& w) {
    using Ptr = decltype(&w.tok_emb);
    if constexpr (std::is_const_v<W>) {
        if (w.layers.size() != c.n_layers) {
            throw std::invalid_argument("weights have " + std::to_string(w.layers.size()) + " layers, config says " +
                                        std::to_string(c.n_layers));
        }
    } else {
        w.layers.resize(c.n_layers);
    }
    const std::size_t d = c.d_model;
    const std::size_t aw = c.attn_width();
    std::vector<NamedTensor<Ptr>> out;
    out.push_back({"tok_emb", {c.vocab_size, d}, &w.tok_emb});
    out.push_back({"pos_emb", {c.max_seq, d}, &w.pos_emb});
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        auto& lw = w.layers[l];
        const std::string p = "layers." + std::to_string(l) + ".";
        out.push_back({p + "attn_norm", {d}, &lw.attn_norm});
        out.push_back({p + "wq", {aw, d}, &lw.wq});
        out.push_back({p + "wk", {aw, d}, &lw.wk});
        out.push_back({p + "wv", {aw, d}, &lw.wv});
        out.push_back({p + "wo", {d, aw}, &lw.wo});
        out.push_back({p + "mlp_norm", {d}, &lw.mlp_norm});
        out.push_back({p + "w_in", {c.d_ff, d}, &lw.w_in});
        out.push_back({p + "w_out", {d, c.d_ff}, &lw.w_out});
    }
    out.push_back({"final_norm", {d}, &w.final_norm});
    out.push_back({"unembed", {c.vocab_size, d}, &w.unembed});
    return out;
}

inline bool is_norm_gain(const std::string& name) {
    return name.ends_with("norm");
}

/// Seeded random weights: N(0, init_std) matrices, unit norm gains. Each
/// tensor draws from its own split stream. With zero_weights every entry
/// (gains included) is zero.
inline Weights random_model(const ModelConfig& config, std::uint64_t seed, bool zero_weights = false,
                            double init_std = 0.02) {
    config.validate();
    Weights w;
    const Rng root(seed);
    std::uint64_t ordinal = 0;
    for (auto& nt : tensor_manifest(config, w)) {
        *nt.tensor = Tensor(nt.shape);
        Rng rng = root.split(ordinal++);
        if (zero_weights) continue;
        const bool gain = is_norm_gain(nt.name);
        for (float& v : nt.tensor->data) {
            v = gain ? 1.0f : static_cast<float>(rng.normal(0.0, init_std));
        }
    }
    return w;
}

using TokenSequence = std::vector<std::int32_t>;

inline void validate_tokens(const ModelConfig& c, const TokenSequence& tokens) {
    if (tokens.empty()) {
        throw std::invalid_argument("token sequence is empty");
    }
    if (tokens.size() > c.max_seq) {
        throw std::invalid_argument("token sequence too long: " + std::to_string(tokens.size()) + " > max_seq " +
                                    std::to_string(c.max_seq));
    }
    for (auto t : tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= c.vocab_size) {
            throw std::invalid_argument("token id " + std::to_string(t) + " outside vocabulary");
        }
    }
}

namespace detail {

/// y = W x for W of shape [rows, cols], restricted to rows [r0, r0+nr).
inline Vec matvec_rows(const Tensor& w, std::span<const double> x, std::size_t r0, std::size_t nr) {
    Vec y(nr, 0.0);
    const std::size_t cols = w.cols();
    for (std::size_t r = 0; r < nr; ++r) {
        const float* row = w.data.data() + (r0 + r) * cols;
        double acc = 0.0;
        for (std::size_t c = 0; c < cols; ++c) acc += static_cast<double>(row[c]) * x[c];
        y[r] = acc;
    }
    return y;
}

inline Vec matvec(const Tensor& w, std::span<const double> x) {
    return matvec_rows(w, x, 0, w.rows());
}

/// y = W[:, c0:c0+x.size()] x
inline Vec matvec_cols(const Tensor& w, std::span<const double> x, std::size_t c0) {
    Vec y(w.rows(), 0.0);
    const std::size_t cols = w.cols();
    for (std::size_t r = 0; r < w.rows(); ++r) {
        const float* row = w.data.data() + r * cols + c0;
        double acc = 0.0;
        for (std::size_t c = 0; c < x.size(); ++c) acc += static_cast<double>(row[c]) * x[c];
        y[r] = acc;
    }
    return y;
}

inline double activate(Activation a, double x) {
    if (a == Activation::silu) return x / (1.0 + std::exp(-x));
    constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
    return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

inline Vec norm_with(const Tensor& gain, std::span<const double> x, double eps) {
    return rms_norm<float>(x, gain.flat(), eps);
}

/// mlp_l(z) := W_out act(W_in rms_norm(z))
inline Vec mlp(const ModelConfig& c, const LayerWeights& lw, std::span<const double> z) {
    const Vec normed = norm_with(lw.mlp_norm, z, c.norm_eps);
    Vec hidden = matvec(lw.w_in, normed);
    for (double& v : hidden) v = activate(c.activation, v);
    return matvec(lw.w_out, hidden);
}

inline Vec embed(const ModelConfig& c, const Weights& w, const TokenSequence& tokens, std::size_t i) {
    Vec h(c.d_model);
    const auto tok = w.tok_emb.row(static_cast<std::size_t>(tokens[i]));
    const auto pos = w.pos_emb.row(i);
    for (std::size_t d = 0; d < c.d_model; ++d) h[d] = static_cast<double>(tok[d]) + static_cast<double>(pos[d]);
    return h;
}

/// Per-layer attention inputs computed from the incoming residual states.
struct HeadProjections {
    // [head][token] -> d_head vectors
    std::vector<std::vector<Vec>> q, k, v;
};

inline HeadProjections project_heads(const ModelConfig& c, const LayerWeights& lw, const std::vector<Vec>& states) {
    HeadProjections p;
    p.q.assign(c.n_heads, std::vector<Vec>(states.size()));
    p.k = p.q;
    p.v = p.q;
    for (std::size_t j = 0; j < states.size(); ++j) {
        const Vec normed = norm_with(lw.attn_norm, states[j], c.norm_eps);
        for (std::size_t h = 0; h < c.n_heads; ++h) {
            p.q[h][j] = matvec_rows(lw.wq, normed, h * c.d_head, c.d_head);
            p.k[h][j] = matvec_rows(lw.wk, normed, h * c.d_head, c.d_head);
            p.v[h][j] = matvec_rows(lw.wv, normed, h * c.d_head, c.d_head);
        }
    }
    return p;
}

/// Scaled dot-product logits of target i against sources 0..i.
inline Vec attention_logits(const ModelConfig& c, const HeadProjections& p, std::size_t head, std::size_t i) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(c.d_head));
    Vec logits(i + 1);
    for (std::size_t j = 0; j <= i; ++j) {
        double dot = 0.0;
        for (std::size_t d = 0; d < c.d_head; ++d) dot += p.q[head][i][d] * p.k[head][j][d];
        logits[j] = dot * scale;
    }
    return logits;
}

/// O-projected value of every (head, source) pair: u_{k,j} = W_O[:, head k] v_{k,j}.
inline std::vector<std::vector<Vec>> output_values(const ModelConfig& c, const LayerWeights& lw,
                                                   const HeadProjections& p) {
    std::vector<std::vector<Vec>> u(c.n_heads);
    for (std::size_t h = 0; h < c.n_heads; ++h) {
        u[h].reserve(p.v[h].size());
        for (const Vec& v : p.v[h]) u[h].push_back(matvec_cols(lw.wo, v, h * c.d_head));
    }
    return u;
}

}  // namespace detail

/// softmax(unembed * final_norm(state)).
inline Vec logits_from_state(const ModelConfig& config, const Weights& weights, std::span<const double> state) {
    if (state.size() != config.d_model) {
        throw std::invalid_argument("logits_from_state: state length does not match d_model");
    }
    const Vec normed = detail::norm_with(weights.final_norm, state, config.norm_eps);
    return softmax(detail::matvec(weights.unembed, normed));
}

/// Residual stream states of the fused forward pass, h^0..h^L per token.
struct PlainStates {
    std::vector<std::vector<Vec>> h;  // [layer 0..L][token]
    Vec probs;
};

inline PlainStates forward_plain_states(const ModelConfig& config, const Weights& weights,
                                        const TokenSequence& tokens) {
    validate_tokens(config, tokens);
    const std::size_t n = tokens.size();
    PlainStates out;
    std::vector<Vec> x(n);
    for (std::size_t i = 0; i < n; ++i) x[i] = detail::embed(config, weights, tokens, i);
    out.h.push_back(x);

    for (const auto& lw : weights.layers) {
        const auto proj = detail::project_heads(config, lw, x);
        for (std::size_t i = 0; i < n; ++i) {
            Vec concat(config.attn_width(), 0.0);
            for (std::size_t h = 0; h < config.n_heads; ++h) {
                const Vec a = softmax(detail::attention_logits(config, proj, h, i));
                for (std::size_t j = 0; j <= i; ++j) {
                    for (std::size_t d = 0; d < config.d_head; ++d) concat[h * config.d_head + d] += a[j] * proj.v[h][j][d];
                }
            }
            const Vec attn = detail::matvec(lw.wo, concat);
            for (std::size_t d = 0; d < config.d_model; ++d) x[i][d] += attn[d];
        }
        for (std::size_t i = 0; i < n; ++i) {
            const Vec m = detail::mlp(config, lw, x[i]);
            for (std::size_t d = 0; d < config.d_model; ++d) x[i][d] += m[d];
        }
        out.h.push_back(x);
    }
    out.probs = logits_from_state(config, weights, x[n - 1]);
    return out;
}

inline Vec forward_plain(const ModelConfig& config, const Weights& weights, const TokenSequence& tokens) {
    return forward_plain_states(config, weights, tokens).probs;
}

/// Everything one decomposed forward pass produces. Attention edge vectors
/// are stored factored as weight * O-projected value, and materialized on
/// demand by attn_contribution().
class ForwardRecord {
public:
    ForwardRecord() = default;
    ForwardRecord(const ModelConfig& config, std::size_t n) : config_(config), n_(n) {
        h_.assign((config.n_layers + 1) * n, Vec{});
        z_.assign(config.n_layers * n, Vec{});
        mlp_.assign(config.n_layers * n, Vec{});
        values_.assign(config.n_layers * config.n_heads * n, Vec{});
        weights_.assign(config.n_layers * config.n_heads * triangle(n), 0.0);
    }

    const ModelConfig& config() const { return config_; }
    std::size_t n_tokens() const { return n_; }
    std::size_t n_layers() const { return config_.n_layers; }
    std::size_t n_heads() const { return config_.n_heads; }

    /// h^layer_token, layer in [0, L].
    const Vec& h(std::size_t layer, std::size_t token) const { return h_[layer * n_ + token]; }
    Vec& h(std::size_t layer, std::size_t token) { return h_[layer * n_ + token]; }

    /// z^layer_token, layer in [1, L].
    const Vec& z(std::size_t layer, std::size_t token) const { return z_[(layer - 1) * n_ + token]; }
    Vec& z(std::size_t layer, std::size_t token) { return z_[(layer - 1) * n_ + token]; }

    /// mlp_layer(z^layer_token)
    const Vec& mlp_out(std::size_t layer, std::size_t token) const { return mlp_[(layer - 1) * n_ + token]; }
    Vec& mlp_out(std::size_t layer, std::size_t token) { return mlp_[(layer - 1) * n_ + token]; }

    /// a^{layer,head}_{target,source}, source <= target.
    double attn_weight(std::size_t layer, std::size_t head, std::size_t target, std::size_t source) const {
        return weights_[weight_index(layer, head, target, source)];
    }
    double& attn_weight(std::size_t layer, std::size_t head, std::size_t target, std::size_t source) {
        return weights_[weight_index(layer, head, target, source)];
    }

    /// W_O-projected value of (head, source) at layer; independent of target.
    const Vec& head_value(std::size_t layer, std::size_t head, std::size_t source) const {
        return values_[((layer - 1) * config_.n_heads + head) * n_ + source];
    }
    Vec& head_value(std::size_t layer, std::size_t head, std::size_t source) {
        return values_[((layer - 1) * config_.n_heads + head) * n_ + source];
    }

    /// phi^{layer,head}(h_target, h_source)
    Vec attn_contribution(std::size_t layer, std::size_t head, std::size_t target, std::size_t source) const {
        if (source > target) {
            throw std::out_of_range("attn_contribution: causal mask excludes source > target");
        }
        const double a = attn_weight(layer, head, target, source);
        Vec out = head_value(layer, head, source);
        for (double& v : out) v *= a;
        return out;
    }

    /// L1 norm of phi without materializing it (weights are nonnegative).
    double attn_contribution_l1(std::size_t layer, std::size_t head, std::size_t target, std::size_t source) const {
        return attn_weight(layer, head, target, source) * l1_norm(head_value(layer, head, source));
    }

    const Vec& probs() const { return probs_; }
    Vec& probs() { return probs_; }

    bool complete() const {
        if (n_ == 0 || probs_.size() != config_.vocab_size) return false;
        auto sized = [&](const std::vector<Vec>& vs) {
            for (const auto& v : vs)
                if (v.size() != config_.d_model) return false;
            return true;
        };
        return sized(h_) && sized(z_) && sized(mlp_) && sized(values_);
    }

    bool finite() const {
        auto ok = [](const std::vector<Vec>& vs) {
            for (const auto& v : vs)
                if (!all_finite(v)) return false;
            return true;
        };
        return ok(h_) && ok(z_) && ok(mlp_) && ok(values_) && all_finite(weights_) && all_finite(probs_);
    }

private:
    static std::size_t triangle(std::size_t n) { return n * (n + 1) / 2; }
    std::size_t weight_index(std::size_t layer, std::size_t head, std::size_t target, std::size_t source) const {
        return ((layer - 1) * config_.n_heads + head) * triangle(n_) + triangle(target) + source;
    }

    ModelConfig config_{};
    std::size_t n_ = 0;
    std::vector<Vec> h_, z_, mlp_, values_;
    std::vector<double> weights_;
    Vec probs_;
};

inline ForwardRecord forward_decomposed(const ModelConfig& config, const Weights& weights,
                                        const TokenSequence& tokens) {
    validate_tokens(config, tokens);
    const std::size_t n = tokens.size();
    ForwardRecord rec(config, n);
    std::vector<Vec> states(n);
    for (std::size_t i = 0; i < n; ++i) {
        states[i] = detail::embed(config, weights, tokens, i);
        rec.h(0, i) = states[i];
    }

    for (std::size_t l = 1; l <= config.n_layers; ++l) {
        const auto& lw = weights.layers[l - 1];
        const auto proj = detail::project_heads(config, lw, states);
        auto values = detail::output_values(config, lw, proj);
        for (std::size_t h = 0; h < config.n_heads; ++h) {
            for (std::size_t j = 0; j < n; ++j) rec.head_value(l, h, j) = std::move(values[h][j]);
        }
        for (std::size_t i = 0; i < n; ++i) {
            Vec z = rec.h(l - 1, i);
            for (std::size_t h = 0; h < config.n_heads; ++h) {
                const Vec a = softmax(detail::attention_logits(config, proj, h, i));
                for (std::size_t j = 0; j <= i; ++j) {
                    rec.attn_weight(l, h, i, j) = a[j];
                    const Vec& u = rec.head_value(l, h, j);
                    for (std::size_t d = 0; d < config.d_model; ++d) z[d] += a[j] * u[d];
                }
            }
            rec.z(l, i) = std::move(z);
        }
        for (std::size_t i = 0; i < n; ++i) {
            rec.mlp_out(l, i) = detail::mlp(config, lw, rec.z(l, i));
            Vec h = rec.z(l, i);
            const Vec& m = rec.mlp_out(l, i);
            for (std::size_t d = 0; d < config.d_model; ++d) h[d] += m[d];
            rec.h(l, i) = h;
            states[i] = std::move(h);
        }
    }
    rec.probs() = logits_from_state(config, weights, rec.h(config.n_layers, n - 1));
    return rec;
}

}  // namespace strace
