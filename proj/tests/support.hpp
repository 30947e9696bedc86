// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for the test suite: seeded generators for property tests and
// small reference computations that avoid the library's own code paths.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "strace/model.hpp"
#include "strace/numerics.hpp"

namespace strace::test_util {

inline std::filesystem::path data_dir() {
    return std::filesystem::path(STRACE_TEST_DATA_DIR);
}

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Scratch directory unique to the calling test; wiped on creation.
inline std::filesystem::path scratch_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("strace_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

/// Draws integers and configs from a seeded stream.
class Gen {
public:
    explicit Gen(std::uint64_t seed) : rng_(seed) {}

    std::size_t range(std::size_t lo, std::size_t hi) {  // inclusive
        return lo + static_cast<std::size_t>(rng_.uniform() * static_cast<double>(hi - lo + 1));
    }
    double real(double lo, double hi) { return lo + (hi - lo) * rng_.uniform(); }
    std::uint64_t seed() { return rng_.next_u64(); }

    Vec vec(std::size_t n, double scale = 1.0) {
        Vec v(n);
        for (double& x : v) x = rng_.normal(0.0, scale);
        return v;
    }

    Vec distribution(std::size_t n) {
        Vec v(n);
        double total = 0.0;
        for (double& x : v) total += (x = rng_.uniform() + 1e-3);
        for (double& x : v) x /= total;
        return v;
    }

    ModelConfig config(std::size_t max_layers = 4, std::size_t max_d = 64, std::size_t max_seq = 16) {
        ModelConfig c;
        c.n_layers = range(1, max_layers);
        c.d_model = range(8, max_d);
        c.n_heads = range(1, 4);
        c.d_head = range(2, 16);
        c.d_ff = range(4, 4 * c.d_model);
        c.vocab_size = range(5, 300);
        c.max_seq = max_seq;
        c.activation = range(0, 1) == 0 ? Activation::gelu : Activation::silu;
        return c;
    }

    TokenSequence tokens(const ModelConfig& c, std::size_t n) {
        TokenSequence t(n);
        for (auto& x : t) x = static_cast<std::int32_t>(range(0, c.vocab_size - 1));
        return t;
    }

private:
    Rng rng_;
};

inline double max_abs_diff(const Vec& a, const Vec& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

/// Plain-loop total variation, independent of metrics.hpp.
inline double tv_ref(const Vec& p, const Vec& q) {
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
    return s / 2.0;
}

inline Vec uniform(std::size_t n) {
    return Vec(n, 1.0 / static_cast<double>(n));
}

}  // namespace strace::test_util
