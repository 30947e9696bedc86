// SPDX-License-Identifier: Apache-2.0
//
// strace-lab: command-line front end for the trace experiments.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "strace/harness.hpp"

namespace fs = std::filesystem;
using namespace strace;

namespace {

SizeGrid parse_grid(const std::string& text) {
    if (text == "default") return SizeGrid::default_grid();
    std::vector<double> pts;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t used = 0;
        const double v = std::stod(item, &used);
        if (used != item.size()) throw std::invalid_argument("bad grid value '" + item + "'");
        pts.push_back(v);
    }
    return SizeGrid(std::move(pts));
}

AblationMode parse_mode(const std::string& text) {
    if (text == "after") return AblationMode::after_softmax;
    if (text == "before") return AblationMode::before_softmax;
    throw std::invalid_argument("mode must be 'after' or 'before'");
}

struct RunOptions {
    std::string model;
    std::string corpus;
    std::string grid = "default";
    std::string mode = "after";
    std::string axis = "linear";
    std::string out_dir;
    std::size_t jobs = 1;
    std::uint64_t seed = 0;
    std::size_t limit = 0;
    std::size_t min_words = 10;
    std::size_t max_words = 60;
    std::size_t depth_bins = kDefaultDepthBins;
    bool no_traces = false;

    void attach(CLI::App* app) {
        app->add_option("--model", model, "weight file written by gen-model")->required()->check(CLI::ExistingFile);
        app->add_option("--corpus", corpus, "UTF-8 text corpus")->required()->check(CLI::ExistingFile);
        app->add_option("--grid", grid, "'default' or comma-separated relative sizes")->capture_default_str();
        app->add_option("--mode", mode, "ablation mode: after|before")->capture_default_str();
        app->add_option("--density-axis", axis, "density integration axis: linear|log10")->capture_default_str();
        app->add_option("--jobs", jobs, "worker threads (STRACE_LAB_THREADS overrides)")->capture_default_str();
        app->add_option("--seed", seed, "experiment seed")->capture_default_str();
        app->add_option("--out-dir", out_dir, "output directory")->required();
        app->add_option("--limit", limit, "maximum number of instances (0 = all)")->capture_default_str();
        app->add_option("--min-words", min_words)->capture_default_str();
        app->add_option("--max-words", max_words)->capture_default_str();
        app->add_option("--depth-bins", depth_bins)->capture_default_str();
        app->add_flag("--no-traces", no_traces, "do not write traces.jsonl");
    }

    ExperimentConfig config() const {
        ExperimentConfig cfg;
        cfg.model_path = model;
        cfg.corpus_path = corpus;
        cfg.grid = parse_grid(grid);
        cfg.mode = parse_mode(mode);
        if (axis == "linear") cfg.density_axis = DensityAxis::linear;
        else if (axis == "log10") cfg.density_axis = DensityAxis::log10;
        else throw std::invalid_argument("density axis must be 'linear' or 'log10'");
        cfg.out_dir = out_dir;
        cfg.jobs = jobs;
        cfg.seed = seed;
        cfg.instance_limit = limit;
        cfg.min_words = min_words;
        cfg.max_words = max_words;
        cfg.depth_bins = depth_bins;
        cfg.dump_traces = !no_traces;
        return cfg;
    }
};

// A directory argument resolves to the file the run wrote there.
fs::path input_file(const std::string& in, const char* default_name) {
    fs::path p(in);
    return fs::is_directory(p) ? p / default_name : p;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"s-trace lab: trace extraction and masked re-inference on toy transformers"};
    app.set_version_flag("--version", std::string(kVersion));
    app.require_subcommand(1);

    // gen-model
    ModelConfig mc;
    std::uint64_t model_seed = 0;
    std::string model_out;
    std::string activation = "gelu";
    bool zero = false;
    auto* gen = app.add_subcommand("gen-model", "write a seeded random model");
    gen->add_option("--d-model", mc.d_model)->capture_default_str();
    gen->add_option("--layers", mc.n_layers)->capture_default_str();
    gen->add_option("--heads", mc.n_heads)->capture_default_str();
    gen->add_option("--d-head", mc.d_head)->capture_default_str();
    gen->add_option("--d-ff", mc.d_ff)->capture_default_str();
    gen->add_option("--vocab", mc.vocab_size)->capture_default_str();
    gen->add_option("--max-seq", mc.max_seq)->capture_default_str();
    gen->add_option("--activation", activation, "gelu|silu")->capture_default_str();
    gen->add_option("--seed", model_seed)->capture_default_str();
    gen->add_flag("--zero", zero, "all-zero weights");
    gen->add_option("--out", model_out)->required();

    // run
    RunOptions run_opts;
    auto* run = app.add_subcommand("run", "extract traces and evaluate every grid point");
    run_opts.attach(run);

    // analyze
    std::string an_in, an_in2, an_out;
    std::size_t an_bins = kDefaultDepthBins;
    auto* analyze = app.add_subcommand("analyze", "summarize the outputs of a run");
    analyze->require_subcommand(1);
    auto add_io = [&](CLI::App* sub) {
        sub->add_option("--in", an_in, "run output directory or input file")->required();
        sub->add_option("--out", an_out, "output CSV")->required();
    };
    auto* an_structure = analyze->add_subcommand("structure", "type and depth composition from traces.jsonl");
    add_io(an_structure);
    an_structure->add_option("--depth-bins", an_bins)->capture_default_str();
    auto* an_frequency = analyze->add_subcommand("frequency", "component frequency curve from traces.jsonl");
    add_io(an_frequency);
    auto* an_density = analyze->add_subcommand("density", "Spearman of density vs entropy, loss, token frequency");
    add_io(an_density);
    auto* an_nucleus = analyze->add_subcommand("nucleus", "median nucleus reconstruction size per k");
    add_io(an_nucleus);
    auto* an_compare = analyze->add_subcommand("compare", "Spearman of density between two runs");
    add_io(an_compare);
    an_compare->add_option("--in2", an_in2, "second run directory or density.csv")->required();

    // baseline random
    RunOptions base_opts;
    std::size_t n_seeds = 10;
    auto* baseline = app.add_subcommand("baseline", "baselines against the greedy trace");
    baseline->require_subcommand(1);
    auto* random = baseline->add_subcommand("random", "residual/MLP-first random traversal");
    base_opts.attach(random);
    random->add_option("--seeds", n_seeds, "random replicates per instance")->capture_default_str();

    // ablate inverse
    RunOptions abl_opts;
    auto* ablate = app.add_subcommand("ablate", "ablation studies");
    ablate->require_subcommand(1);
    auto* inverse = ablate->add_subcommand("inverse", "remove the trace instead of keeping it");
    abl_opts.attach(inverse);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            mc.activation = activation_from_string(activation);
            mc.validate();
            if (const auto parent = fs::path(model_out).parent_path(); !parent.empty()) {
                fs::create_directories(parent);
            }
            save_model(model_out, mc, random_model(mc, model_seed, zero));
            std::printf("wrote %s (%s)\n", model_out.c_str(), model_hash(mc, load_model(model_out).second).c_str());
        } else if (*run) {
            const auto summary = run_experiment(run_opts.config());
            std::printf("instances: %zu ok, %zu skipped\n", summary.ok, summary.skipped);
            for (const auto& r : summary.results) {
                if (!r.ok()) std::fprintf(stderr, "skipped instance %zu: %s\n", r.id, r.error.c_str());
            }
        } else if (*an_structure || *an_frequency) {
            analyze_traces(an_in, an_out, an_frequency->parsed(), an_bins);
        } else if (*an_density) {
            const auto rows = correlate(read_density_csv(input_file(an_in, "density.csv")));
            write_correlations_csv(an_out, rows);
            for (const auto& r : rows) {
                std::printf("%-10s rho=%s n=%zu\n", r.metric.c_str(),
                            r.rho ? fmt_real(*r.rho).c_str() : "undefined", r.n);
            }
        } else if (*an_nucleus) {
            write_nucleus_summary(input_file(an_in, "nucleus.csv"), an_out);
        } else if (*an_compare) {
            const auto cmp = compare_models(read_density_csv(input_file(an_in, "density.csv")),
                                            read_density_csv(input_file(an_in2, "density.csv")));
            write_correlations_csv(an_out, {{"density", cmp.rho, cmp.n}});
            std::printf("rho=%s n=%zu\n", cmp.rho ? fmt_real(*cmp.rho).c_str() : "undefined", cmp.n);
        } else if (*random) {
            const auto results = run_random_baseline(base_opts.config(), n_seeds);
            std::size_t ok = 0;
            for (const auto& r : results) ok += r.ok;
            std::printf("instances: %zu ok of %zu\n", ok, results.size());
        } else if (*inverse) {
            const auto results = run_inverse_ablation(abl_opts.config());
            std::size_t ok = 0;
            for (const auto& r : results) ok += r.ok;
            std::printf("instances: %zu ok of %zu\n", ok, results.size());
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "strace-lab: %s\n", e.what());
        return 1;
    }
    return 0;
}
