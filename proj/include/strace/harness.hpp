// SPDX-License-Identifier: Apache-2.0
//
// End-to-end experiment runner. One instance = one corpus sequence; the last
// token is the gold continuation and the rest is the model input. Instances
// are the unit of parallelism and results are always merged in id order, so
// outputs do not depend on the worker count.

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "strace/ablation.hpp"
#include "strace/analysis.hpp"
#include "strace/corpus.hpp"
#include "strace/graph.hpp"
#include "strace/metrics.hpp"
#include "strace/model.hpp"
#include "strace/model_io.hpp"
#include "strace/trace.hpp"

namespace strace {

inline constexpr const char* kVersion = "1.0.0";

inline std::vector<double> default_nucleus_ks() {
    return {1, 5, 10, 20, 30, 40, 50, 60, 70, 80, 90};
}

struct ExperimentConfig {
    std::string model_path;          // empty: generate a random model
    ModelConfig model_config{};      // used when model_path is empty
    std::uint64_t model_seed = 0;
    std::string corpus_path;
    std::optional<std::string> corpus_text;  // in-memory corpus, takes precedence over corpus_path
    std::size_t min_words = 10;
    std::size_t max_words = 60;
    SizeGrid grid = SizeGrid::default_grid();
    AblationMode mode = AblationMode::after_softmax;
    DensityAxis density_axis = DensityAxis::linear;
    std::string out_dir;
    std::size_t instance_limit = 0;  // 0: every qualifying sequence
    std::size_t jobs = 1;
    std::uint64_t seed = 0;
    std::vector<double> nucleus_ks = default_nucleus_ks();
    std::size_t depth_bins = kDefaultDepthBins;
    bool dump_traces = true;
    std::optional<std::size_t> inject_nan_instance;  // test hook: corrupt this instance's forward record
};

/// STRACE_LAB_THREADS, when set to a positive integer, overrides the configured worker count.
inline std::size_t resolve_jobs(std::size_t requested) {
    if (const char* env = std::getenv("STRACE_LAB_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
    }
    return std::max<std::size_t>(1, requested);
}

template <typename Fn>
void parallel_for(std::size_t count, std::size_t jobs, Fn&& fn) {
    jobs = std::min(std::max<std::size_t>(1, jobs), std::max<std::size_t>(1, count));
    if (jobs == 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(jobs);
    for (std::size_t w = 0; w < jobs; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < count; i = next++) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

/// Model, corpus and derived lookup tables shared read-only by all workers.
struct Experiment {
    ModelConfig config;
    Weights weights;
    std::string model_hash;
    std::vector<TokenSequence> sequences;
    TokenFrequency frequency;
};

inline Experiment prepare_experiment(const ExperimentConfig& cfg) {
    Experiment exp;
    if (!cfg.model_path.empty()) {
        auto [config, weights] = load_model(cfg.model_path);
        exp.config = config;
        exp.weights = std::move(weights);
    } else {
        exp.config = cfg.model_config;
        exp.weights = random_model(cfg.model_config, cfg.model_seed);
    }
    if (exp.config.vocab_size < kByteVocab) {
        throw std::invalid_argument("byte-level corpus needs vocab_size >= 257");
    }
    exp.model_hash = model_hash(exp.config, exp.weights);

    auto seqs = cfg.corpus_text ? ingest_text(*cfg.corpus_text, cfg.min_words, cfg.max_words, exp.config.max_seq)
                                : ingest_corpus(cfg.corpus_path, cfg.min_words, cfg.max_words, exp.config.max_seq);
    std::vector<std::int32_t> all;
    for (const auto& s : seqs) {
        for (std::size_t t = 1; t < s.size(); ++t) all.push_back(s[t]);  // skip BOS
    }
    exp.frequency = token_frequency(all);
    std::erase_if(seqs, [](const TokenSequence& s) { return s.size() < 2; });
    if (cfg.instance_limit > 0 && seqs.size() > cfg.instance_limit) seqs.resize(cfg.instance_limit);
    if (seqs.empty()) throw CorpusError("no instance with at least one input token and a gold token");
    exp.sequences = std::move(seqs);
    return exp;
}

class NumericAnomaly : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Decomposed forward + graph + importance + nested greedy traces for one instance.
struct InstanceContext {
    TokenSequence input;
    std::int32_t gold = 0;
    ForwardRecord record;
    CompGraph graph;
    ImportanceScores scores;
    std::vector<Trace> traces;
};

inline InstanceContext prepare_instance(const Experiment& exp, const ExperimentConfig& cfg, std::size_t id) {
    InstanceContext ctx;
    const auto& seq = exp.sequences.at(id);
    ctx.input.assign(seq.begin(), seq.end() - 1);
    ctx.gold = seq.back();
    ctx.record = forward_decomposed(exp.config, exp.weights, ctx.input);
    if (cfg.inject_nan_instance && *cfg.inject_nan_instance == id) {
        ctx.record.h(0, 0)[0] = std::numeric_limits<double>::quiet_NaN();
    }
    if (!ctx.record.finite()) throw NumericAnomaly("non-finite value in forward record");
    ctx.graph = build_graph(ctx.record);
    ctx.scores = importance(ctx.record, ctx.graph);
    if (!all_finite(ctx.scores.values())) throw NumericAnomaly("non-finite importance score");
    ctx.traces = extract_trace_grid(ctx.graph, ctx.scores, cfg.grid);
    return ctx;
}

inline Vec trace_distribution(const Experiment& exp, const InstanceContext& ctx, const Trace& trace,
                              AblationMode mode) {
    Vec q = masked_forward(exp.config, exp.weights, ctx.input, EdgeMask::from_trace(ctx.graph, trace, mode));
    if (!all_finite(q)) throw NumericAnomaly("non-finite masked output");
    return q;
}

enum class InstanceStatus : std::uint8_t { ok, skipped };

struct InstanceResult {
    std::size_t id = 0;
    InstanceStatus status = InstanceStatus::skipped;
    std::string error;
    std::size_t n_tokens = 0;
    std::size_t edge_count = 0;
    std::vector<std::size_t> budgets;
    std::vector<double> tv;                          // one per grid point
    std::vector<std::optional<double>> nucleus;      // one per k; nullopt = not reached
    double error_at_zero = 0.0;
    double density = 0.0;
    double entropy = 0.0;
    double loss = 0.0;
    std::int32_t top1_token = 0;
    double top1_freq = 0.0;
    std::vector<TypeComposition> types;              // per grid point
    std::vector<std::vector<double>> depth;          // per grid point, depth_bins fractions
    std::vector<std::vector<std::uint64_t>> components;  // per grid point, per component ordinal
    std::vector<std::string> trace_dumps;            // JSON lines

    bool ok() const { return status == InstanceStatus::ok; }
};

inline std::size_t argmax_token(const Vec& p) {
    return static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
}

inline InstanceResult evaluate_instance(const Experiment& exp, const ExperimentConfig& cfg, std::size_t id) {
    InstanceResult r;
    r.id = id;
    try {
        const InstanceContext ctx = prepare_instance(exp, cfg, id);
        const Vec& full = ctx.record.probs();
        r.n_tokens = ctx.input.size();
        r.edge_count = ctx.graph.edge_count();

        std::vector<GridDistribution> dists;
        for (std::size_t g = 0; g < cfg.grid.size(); ++g) {
            const Trace& t = ctx.traces[g];
            Vec q = trace_distribution(exp, ctx, t, cfg.mode);
            r.budgets.push_back(t.budget);
            r.tv.push_back(total_variation(full, q));
            dists.push_back({cfg.grid[g], std::move(q)});

            r.types.push_back(type_composition(ctx.graph, t));
            r.depth.push_back(layer_composition(ctx.graph, t, cfg.depth_bins));
            r.components.push_back(component_counts(ctx.graph, t));
            if (cfg.dump_traces) {
                auto j = trace_to_json(ctx.graph, t, exp.model_hash);
                nlohmann::ordered_json line;
                line["instance_id"] = id;
                line["s_rel"] = cfg.grid[g];
                for (auto& [k, v] : j.items()) line[k] = v;
                r.trace_dumps.push_back(line.dump());
            }
        }
        for (double k : cfg.nucleus_ks) r.nucleus.push_back(nucleus_reconstruction_size(full, dists, k));

        const Vec empty = masked_forward(exp.config, exp.weights, ctx.input,
                                         EdgeMask::none(ctx.graph.shape(), cfg.mode));
        r.error_at_zero = total_variation(full, empty);
        r.density = computational_density(make_density_profile(cfg.grid.points(), r.tv, r.error_at_zero),
                                          cfg.density_axis);
        r.entropy = shannon_entropy(full);
        r.loss = lm_loss(full, static_cast<std::size_t>(ctx.gold));
        r.top1_token = static_cast<std::int32_t>(argmax_token(full));
        r.top1_freq = exp.frequency(r.top1_token);

        const bool finite = all_finite(r.tv) && std::isfinite(r.density) && std::isfinite(r.entropy) &&
                            std::isfinite(r.loss);
        if (!finite) throw NumericAnomaly("non-finite metric");
        r.status = InstanceStatus::ok;
    } catch (const std::exception& e) {
        InstanceResult skipped;
        skipped.id = id;
        skipped.status = InstanceStatus::skipped;
        skipped.error = e.what();
        return skipped;
    }
    return r;
}

// ---------------------------------------------------------------------------
// Output helpers
// ---------------------------------------------------------------------------

inline std::string fmt_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.12g", v);
    return buf;
}

inline std::ofstream open_output(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
    return out;
}

inline std::string to_string(AblationMode m) {
    return m == AblationMode::after_softmax ? "after" : "before";
}

inline std::string depth_category(std::size_t bin) {
    return "depth_" + std::to_string(bin);
}

struct RunSummary {
    std::vector<InstanceResult> results;
    std::size_t ok = 0;
    std::size_t skipped = 0;
};

inline void write_tv_csv(const std::filesystem::path& path, const ExperimentConfig& cfg,
                         const std::vector<InstanceResult>& results) {
    auto out = open_output(path);
    out << "instance_id,s_rel,budget_edges,tv\n";
    for (const auto& r : results) {
        if (!r.ok()) continue;
        for (std::size_t g = 0; g < cfg.grid.size(); ++g) {
            out << r.id << ',' << fmt_real(cfg.grid[g]) << ',' << r.budgets[g] << ',' << fmt_real(r.tv[g]) << '\n';
        }
    }
}

inline void write_nucleus_csv(const std::filesystem::path& path, const ExperimentConfig& cfg,
                              const std::vector<InstanceResult>& results) {
    auto out = open_output(path);
    out << "instance_id,k_percent,s_min_rel\n";
    for (const auto& r : results) {
        if (!r.ok()) continue;
        for (std::size_t k = 0; k < cfg.nucleus_ks.size(); ++k) {
            out << r.id << ',' << fmt_real(cfg.nucleus_ks[k]) << ',';
            if (r.nucleus[k]) out << fmt_real(*r.nucleus[k]);
            out << '\n';
        }
    }
}

inline void write_density_csv(const std::filesystem::path& path, const std::vector<InstanceResult>& results) {
    auto out = open_output(path);
    out << "instance_id,density,entropy,loss,top1_token,top1_freq,status\n";
    for (const auto& r : results) {
        if (r.ok()) {
            out << r.id << ',' << fmt_real(r.density) << ',' << fmt_real(r.entropy) << ',' << fmt_real(r.loss) << ','
                << r.top1_token << ',' << fmt_real(r.top1_freq) << ",ok\n";
        } else {
            out << r.id << ",,,,,,skipped\n";
        }
    }
}

/// Mean composition over ok instances, per grid point.
inline void write_structure_csv(const std::filesystem::path& path, const std::vector<double>& grid,
                                const std::vector<std::vector<TypeComposition>>& types,
                                const std::vector<std::vector<std::vector<double>>>& depth, std::size_t bins) {
    auto out = open_output(path);
    out << "s_rel,category,fraction\n";
    const double n = static_cast<double>(types.size());
    if (types.empty()) return;
    for (std::size_t g = 0; g < grid.size(); ++g) {
        TypeComposition mean;
        std::vector<double> dmean(bins, 0.0);
        for (std::size_t r = 0; r < types.size(); ++r) {
            mean.attention += types[r][g].attention / n;
            mean.mlp += types[r][g].mlp / n;
            mean.residual += types[r][g].residual / n;
            for (std::size_t b = 0; b < bins; ++b) dmean[b] += depth[r][g][b] / n;
        }
        const std::string s = fmt_real(grid[g]);
        out << s << ",attention," << fmt_real(mean.attention) << '\n';
        out << s << ",mlp," << fmt_real(mean.mlp) << '\n';
        out << s << ",residual," << fmt_real(mean.residual) << '\n';
        for (std::size_t b = 0; b < bins; ++b) out << s << ',' << depth_category(b) << ',' << fmt_real(dmean[b]) << '\n';
    }
}

/// Component counts pooled over ok instances, per grid point.
inline void write_freqcurve_csv(const std::filesystem::path& path, const std::vector<double>& grid,
                                const std::vector<std::vector<std::vector<std::uint64_t>>>& components) {
    auto out = open_output(path);
    out << "s_rel,x_fraction,y_cumulative\n";
    if (components.empty()) return;
    for (std::size_t g = 0; g < grid.size(); ++g) {
        std::vector<std::uint64_t> pooled(components.front()[g].size(), 0);
        for (const auto& inst : components) {
            for (std::size_t c = 0; c < pooled.size(); ++c) pooled[c] += inst[g][c];
        }
        const auto curve = frequency_curve(pooled);
        for (std::size_t x = 0; x < curve.x.size(); ++x) {
            out << fmt_real(grid[g]) << ',' << fmt_real(curve.x[x]) << ',' << fmt_real(curve.y[x]) << '\n';
        }
    }
}

inline nlohmann::ordered_json manifest_json(const ExperimentConfig& cfg, const Experiment& exp,
                                            const RunSummary& summary, const std::string& command) {
    nlohmann::ordered_json j;
    j["tool"] = "strace-lab";
    j["version"] = kVersion;
    j["command"] = command;
    j["model"] = detail::config_to_json(exp.config);
    j["model_hash"] = exp.model_hash;
    j["model_path"] = cfg.model_path;
    j["model_seed"] = cfg.model_seed;
    j["corpus_path"] = cfg.corpus_text ? std::string("<memory>") : cfg.corpus_path;
    j["min_words"] = cfg.min_words;
    j["max_words"] = cfg.max_words;
    j["grid"] = cfg.grid.points();
    j["mode"] = to_string(cfg.mode);
    j["density_axis"] = cfg.density_axis == DensityAxis::linear ? "linear" : "log10";
    j["seed"] = cfg.seed;
    j["nucleus_k"] = cfg.nucleus_ks;
    j["depth_bins"] = cfg.depth_bins;
    j["instances"] = summary.results.size();
    j["ok"] = summary.ok;
    j["skipped"] = summary.skipped;
    auto skipped = nlohmann::ordered_json::array();
    for (const auto& r : summary.results) {
        if (!r.ok()) skipped.push_back({{"instance_id", r.id}, {"reason", r.error}});
    }
    j["skipped_instances"] = std::move(skipped);
    return j;
}

inline RunSummary summarize(std::vector<InstanceResult> results) {
    RunSummary s;
    for (const auto& r : results) (r.ok() ? s.ok : s.skipped)++;
    s.results = std::move(results);
    return s;
}

/// Full pipeline; writes tv_vs_size.csv, nucleus.csv, density.csv,
/// structure.csv, freqcurve.csv, manifest.json and (optionally) traces.jsonl.
inline RunSummary run_experiment(const ExperimentConfig& cfg) {
    const Experiment exp = prepare_experiment(cfg);
    std::vector<InstanceResult> results(exp.sequences.size());
    parallel_for(results.size(), resolve_jobs(cfg.jobs),
                 [&](std::size_t i) { results[i] = evaluate_instance(exp, cfg, i); });
    RunSummary summary = summarize(std::move(results));

    if (cfg.out_dir.empty()) return summary;
    const std::filesystem::path dir(cfg.out_dir);
    std::filesystem::create_directories(dir);
    write_tv_csv(dir / "tv_vs_size.csv", cfg, summary.results);
    write_nucleus_csv(dir / "nucleus.csv", cfg, summary.results);
    write_density_csv(dir / "density.csv", summary.results);

    std::vector<std::vector<TypeComposition>> types;
    std::vector<std::vector<std::vector<double>>> depth;
    std::vector<std::vector<std::vector<std::uint64_t>>> components;
    for (const auto& r : summary.results) {
        if (!r.ok()) continue;
        types.push_back(r.types);
        depth.push_back(r.depth);
        components.push_back(r.components);
    }
    write_structure_csv(dir / "structure.csv", cfg.grid.points(), types, depth, cfg.depth_bins);
    write_freqcurve_csv(dir / "freqcurve.csv", cfg.grid.points(), components);
    if (cfg.dump_traces) {
        auto out = open_output(dir / "traces.jsonl");
        for (const auto& r : summary.results) {
            for (const auto& line : r.trace_dumps) out << line << '\n';
        }
    }
    open_output(dir / "manifest.json") << manifest_json(cfg, exp, summary, "run").dump(2) << '\n';
    return summary;
}

// ---------------------------------------------------------------------------
// Baselines and ablations
// ---------------------------------------------------------------------------

struct BaselineResult {
    std::size_t id = 0;
    bool ok = false;
    std::vector<double> tv_greedy;                 // per grid point
    std::vector<std::vector<double>> tv_random;    // [seed][grid point]
};

/// Greedy traces vs the residual/MLP-first random traversal, n_seeds replicates per instance.
inline std::vector<BaselineResult> run_random_baseline(const ExperimentConfig& cfg, std::size_t n_seeds) {
    const Experiment exp = prepare_experiment(cfg);
    std::vector<BaselineResult> results(exp.sequences.size());
    parallel_for(results.size(), resolve_jobs(cfg.jobs), [&](std::size_t i) {
        BaselineResult r;
        r.id = i;
        try {
            const auto ctx = prepare_instance(exp, cfg, i);
            const Vec& full = ctx.record.probs();
            for (const auto& t : ctx.traces) {
                r.tv_greedy.push_back(total_variation(full, trace_distribution(exp, ctx, t, cfg.mode)));
            }
            for (std::size_t s = 0; s < n_seeds; ++s) {
                const auto traces = extract_random_trace_grid(ctx.graph, cfg.grid, derive_seed(cfg.seed, i, s));
                std::vector<double> tv;
                for (const auto& t : traces) tv.push_back(total_variation(full, trace_distribution(exp, ctx, t, cfg.mode)));
                r.tv_random.push_back(std::move(tv));
            }
            r.ok = true;
        } catch (const std::exception&) {
            r.ok = false;
        }
        results[i] = std::move(r);
    });

    if (!cfg.out_dir.empty()) {
        std::filesystem::create_directories(cfg.out_dir);
        auto out = open_output(std::filesystem::path(cfg.out_dir) / "baseline_random.csv");
        out << "instance_id,s_rel,tv_greedy,tv_random_mean,tv_random_min,tv_random_max\n";
        for (const auto& r : results) {
            if (!r.ok) continue;
            for (std::size_t g = 0; g < cfg.grid.size(); ++g) {
                double mean = 0.0, lo = 1.0, hi = 0.0;
                for (const auto& tv : r.tv_random) {
                    mean += tv[g] / static_cast<double>(r.tv_random.size());
                    lo = std::min(lo, tv[g]);
                    hi = std::max(hi, tv[g]);
                }
                out << r.id << ',' << fmt_real(cfg.grid[g]) << ',' << fmt_real(r.tv_greedy[g]) << ','
                    << fmt_real(mean) << ',' << fmt_real(lo) << ',' << fmt_real(hi) << '\n';
            }
        }
    }
    return results;
}

struct InverseResult {
    std::size_t id = 0;
    bool ok = false;
    std::vector<double> tv_kept;     // sufficiency: only the trace kept
    std::vector<double> tv_inverse;  // necessity: trace attn/MLP edges removed
};

inline std::vector<InverseResult> run_inverse_ablation(const ExperimentConfig& cfg) {
    const Experiment exp = prepare_experiment(cfg);
    std::vector<InverseResult> results(exp.sequences.size());
    parallel_for(results.size(), resolve_jobs(cfg.jobs), [&](std::size_t i) {
        InverseResult r;
        r.id = i;
        try {
            const auto ctx = prepare_instance(exp, cfg, i);
            const Vec& full = ctx.record.probs();
            for (const auto& t : ctx.traces) {
                r.tv_kept.push_back(total_variation(full, trace_distribution(exp, ctx, t, cfg.mode)));
                r.tv_inverse.push_back(
                    total_variation(full, inverse_ablation(exp.config, exp.weights, ctx.input, t, cfg.mode)));
            }
            r.ok = all_finite(r.tv_kept) && all_finite(r.tv_inverse);
        } catch (const std::exception&) {
            r.ok = false;
        }
        results[i] = std::move(r);
    });

    if (!cfg.out_dir.empty()) {
        std::filesystem::create_directories(cfg.out_dir);
        auto out = open_output(std::filesystem::path(cfg.out_dir) / "inverse_ablation.csv");
        out << "instance_id,s_rel,tv_sufficiency,tv_necessity\n";
        for (const auto& r : results) {
            if (!r.ok) continue;
            for (std::size_t g = 0; g < cfg.grid.size(); ++g) {
                out << r.id << ',' << fmt_real(cfg.grid[g]) << ',' << fmt_real(r.tv_kept[g]) << ','
                    << fmt_real(r.tv_inverse[g]) << '\n';
            }
        }
    }
    return results;
}

// ---------------------------------------------------------------------------
// Correlation studies
// ---------------------------------------------------------------------------

struct CorrelationRow {
    std::string metric;
    std::optional<double> rho;  // nullopt: undefined (constant column)
    std::size_t n = 0;
};

/// Spearman of density against entropy, loss and top-1 token frequency over ok instances.
inline std::vector<CorrelationRow> correlate(const std::vector<InstanceResult>& results) {
    std::vector<double> density, entropy, loss, freq;
    for (const auto& r : results) {
        if (!r.ok()) continue;
        density.push_back(r.density);
        entropy.push_back(r.entropy);
        loss.push_back(r.loss);
        freq.push_back(r.top1_freq);
    }
    if (density.size() < 2) throw std::invalid_argument("correlate: need at least 2 ok instances");
    auto row = [&](const char* name, const std::vector<double>& ys) {
        CorrelationRow c{name, std::nullopt, density.size()};
        try {
            c.rho = spearman(density, ys);
        } catch (const UndefinedCorrelation&) {
        }
        return c;
    };
    return {row("entropy", entropy), row("loss", loss), row("top1_freq", freq)};
}

struct ModelComparison {
    std::optional<double> rho;
    std::size_t n = 0;
};

/// Spearman of the density vectors of two runs over their shared ok instance ids.
inline ModelComparison compare_models(const std::vector<InstanceResult>& a, const std::vector<InstanceResult>& b) {
    std::map<std::size_t, double> da;
    for (const auto& r : a)
        if (r.ok()) da[r.id] = r.density;
    std::vector<double> xs, ys;
    for (const auto& r : b) {
        if (!r.ok()) continue;
        auto it = da.find(r.id);
        if (it == da.end()) continue;
        xs.push_back(it->second);
        ys.push_back(r.density);
    }
    if (xs.empty()) throw std::invalid_argument("compare_models: no shared instance ids");
    ModelComparison out;
    out.n = xs.size();
    if (xs.size() >= 2) {
        try {
            out.rho = spearman(xs, ys);
        } catch (const UndefinedCorrelation&) {
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Readers for `analyze`
// ---------------------------------------------------------------------------

inline std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path,
                                                      const std::string& expected_header) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read '" + path.string() + "'");
    std::string line;
    if (!std::getline(in, line) || line != expected_header) {
        throw std::runtime_error("'" + path.string() + "' does not start with header '" + expected_header + "'");
    }
    std::vector<std::vector<std::string>> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::size_t start = 0;
        for (std::size_t i = 0; i <= line.size(); ++i) {
            if (i == line.size() || line[i] == ',') {
                fields.push_back(line.substr(start, i - start));
                start = i + 1;
            }
        }
        rows.push_back(std::move(fields));
    }
    return rows;
}

/// density.csv -> InstanceResults carrying only the density-table fields.
inline std::vector<InstanceResult> read_density_csv(const std::filesystem::path& path) {
    std::vector<InstanceResult> out;
    for (const auto& f : read_csv(path, "instance_id,density,entropy,loss,top1_token,top1_freq,status")) {
        if (f.size() != 7) throw std::runtime_error("density.csv: malformed row");
        InstanceResult r;
        r.id = std::stoul(f[0]);
        r.status = f[6] == "ok" ? InstanceStatus::ok : InstanceStatus::skipped;
        if (r.ok()) {
            r.density = std::stod(f[1]);
            r.entropy = std::stod(f[2]);
            r.loss = std::stod(f[3]);
            r.top1_token = std::stoi(f[4]);
            r.top1_freq = std::stod(f[5]);
        }
        out.push_back(std::move(r));
    }
    return out;
}

inline void write_correlations_csv(const std::filesystem::path& path, const std::vector<CorrelationRow>& rows) {
    auto out = open_output(path);
    out << "metric,rho,n\n";
    for (const auto& r : rows) {
        out << r.metric << ',' << (r.rho ? fmt_real(*r.rho) : std::string()) << ',' << r.n << '\n';
    }
}

/// Per-k median of s_min over instances; NOT_REACHED ranks above every grid value.
inline void write_nucleus_summary(const std::filesystem::path& in, const std::filesystem::path& out_path) {
    std::map<double, std::vector<std::optional<double>>> by_k;
    for (const auto& f : read_csv(in, "instance_id,k_percent,s_min_rel")) {
        if (f.size() != 3) throw std::runtime_error("nucleus.csv: malformed row");
        by_k[std::stod(f[1])].push_back(f[2].empty() ? std::nullopt : std::optional<double>(std::stod(f[2])));
    }
    auto out = open_output(out_path);
    out << "k_percent,median_s_min_rel,reached_fraction\n";
    for (auto& [k, vals] : by_k) {
        std::sort(vals.begin(), vals.end(), [](const auto& a, const auto& b) {
            if (!a) return false;
            if (!b) return true;
            return *a < *b;
        });
        std::size_t reached = 0;
        for (const auto& v : vals) reached += v.has_value();
        const auto& med = vals[(vals.size() - 1) / 2];
        out << fmt_real(k) << ',' << (med ? fmt_real(*med) : std::string()) << ','
            << fmt_real(static_cast<double>(reached) / static_cast<double>(vals.size())) << '\n';
    }
}

/// traces.jsonl + manifest.json -> structure.csv or freqcurve.csv.
inline void analyze_traces(const std::filesystem::path& in_dir, const std::filesystem::path& out_path,
                           bool frequency, std::size_t bins) {
    std::ifstream mf(in_dir / "manifest.json");
    if (!mf) throw std::runtime_error("cannot read manifest.json in '" + in_dir.string() + "'");
    const auto manifest = nlohmann::json::parse(mf);
    const std::size_t L = manifest.at("model").at("n_layers").get<std::size_t>();
    const std::size_t H = manifest.at("model").at("n_heads").get<std::size_t>();
    const auto grid = manifest.at("grid").get<std::vector<double>>();

    std::ifstream tf(in_dir / "traces.jsonl");
    if (!tf) throw std::runtime_error("cannot read traces.jsonl in '" + in_dir.string() + "'");

    std::map<std::size_t, std::size_t> grid_index;
    std::map<std::size_t, std::size_t> slot_of_instance;
    std::vector<std::vector<TypeComposition>> types;
    std::vector<std::vector<std::vector<double>>> depth;
    std::vector<std::vector<std::vector<std::uint64_t>>> components;
    std::string line;
    while (std::getline(tf, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        const std::size_t id = j.at("instance_id").get<std::size_t>();
        const double s = j.at("s_rel").get<double>();
        const auto g = static_cast<std::size_t>(std::find(grid.begin(), grid.end(), s) - grid.begin());
        if (g == grid.size()) throw std::runtime_error("traces.jsonl: s_rel not on the manifest grid");
        auto [it, fresh] = slot_of_instance.emplace(id, types.size());
        if (fresh) {
            types.emplace_back(grid.size());
            depth.emplace_back(grid.size());
            components.emplace_back(grid.size());
        }
        const std::size_t slot = it->second;
        const CompGraph graph({L, H, j.at("n").get<std::size_t>()});
        Trace t;
        for (const auto& e : j.at("edges")) t.edges.push_back(graph.edge_index(parse_edge(e.get<std::string>())));
        types[slot][g] = type_composition(graph, t);
        depth[slot][g] = layer_composition(graph, t, bins);
        components[slot][g] = component_counts(graph, t);
    }
    if (frequency) {
        write_freqcurve_csv(out_path, grid, components);
    } else {
        write_structure_csv(out_path, grid, types, depth, bins);
    }
}

}  // namespace strace
