// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <map>

#include <json.hpp>

#include "strace/harness.hpp"
#include "support.hpp"

using namespace strace;
namespace fs = std::filesystem;

namespace {

ExperimentConfig smoke_config(const std::string& out) {
    ExperimentConfig cfg;
    cfg.model_config.n_layers = 2;
    cfg.model_config.d_model = 32;
    cfg.model_config.n_heads = 2;
    cfg.model_config.d_head = 16;
    cfg.model_config.d_ff = 64;
    cfg.model_config.max_seq = 24;
    cfg.model_seed = 11;
    cfg.corpus_path = (test_util::data_dir() / "corpus.txt").string();
    cfg.instance_limit = 5;
    cfg.out_dir = out;
    cfg.seed = 3;
    return cfg;
}

std::vector<std::string> lines_of(const fs::path& p) {
    std::ifstream in(p);
    std::vector<std::string> out;
    for (std::string line; std::getline(in, line);) out.push_back(line);
    return out;
}

const char* kCsvs[] = {"tv_vs_size.csv", "nucleus.csv", "density.csv", "structure.csv", "freqcurve.csv"};

}  // namespace

TEST(Harness, SmokeRunWritesEveryTable) {
    const auto dir = test_util::scratch_dir("harness_smoke");
    const auto summary = run_experiment(smoke_config(dir.string()));
    EXPECT_EQ(summary.ok, 5u);
    EXPECT_EQ(summary.skipped, 0u);

    const auto tv = lines_of(dir / "tv_vs_size.csv");
    ASSERT_EQ(tv.size(), 1 + 5 * 26u);
    EXPECT_EQ(tv[0], "instance_id,s_rel,budget_edges,tv");
    EXPECT_EQ(lines_of(dir / "nucleus.csv")[0], "instance_id,k_percent,s_min_rel");
    EXPECT_EQ(lines_of(dir / "nucleus.csv").size(), 1 + 5 * 11u);
    EXPECT_EQ(lines_of(dir / "density.csv")[0], "instance_id,density,entropy,loss,top1_token,top1_freq,status");
    EXPECT_EQ(lines_of(dir / "structure.csv")[0], "s_rel,category,fraction");
    EXPECT_EQ(lines_of(dir / "structure.csv").size(), 1 + 26 * (3 + kDefaultDepthBins));
    EXPECT_EQ(lines_of(dir / "freqcurve.csv")[0], "s_rel,x_fraction,y_cumulative");
    EXPECT_EQ(lines_of(dir / "freqcurve.csv").size(), 1 + 26 * 100u);
    EXPECT_EQ(lines_of(dir / "traces.jsonl").size(), 5 * 26u);

    // Mean TV falls from the smallest to the largest trace.
    double small = 0.0, large = 0.0;
    for (const auto& r : summary.results) {
        ASSERT_EQ(r.tv.size(), 26u);
        ASSERT_EQ(r.nucleus.size(), 11u);
        small += r.tv.front();
        large += r.tv.back();
    }
    EXPECT_LT(large, small);

    std::ifstream mf(dir / "manifest.json");
    const auto manifest = nlohmann::json::parse(mf);
    EXPECT_EQ(manifest["ok"], 5);
    EXPECT_EQ(manifest["skipped"], 0);
    EXPECT_EQ(manifest["grid"].size(), 26u);
    EXPECT_EQ(manifest["seed"], 3);
    EXPECT_EQ(manifest["version"], kVersion);
}

TEST(Harness, TraceDumpMatchesTvTable) {
    const auto dir = test_util::scratch_dir("harness_dump");
    auto cfg = smoke_config(dir.string());
    cfg.instance_limit = 2;
    cfg.grid = SizeGrid({0.01, 0.1, 0.5});
    run_experiment(cfg);
    const auto tv = lines_of(dir / "tv_vs_size.csv");
    const auto traces = lines_of(dir / "traces.jsonl");
    ASSERT_EQ(traces.size(), 6u);
    for (std::size_t k = 0; k < traces.size(); ++k) {
        const auto j = nlohmann::json::parse(traces[k]);
        EXPECT_EQ(j["instance_id"], k / 3);
        EXPECT_EQ(j["edges"].size(), j["budget"].get<std::size_t>());
        // budget column of the TV table agrees with the dump
        EXPECT_NE(tv[k + 1].find("," + std::to_string(j["budget"].get<std::size_t>()) + ","), std::string::npos);
    }
}

TEST(Harness, InjectedNanIsSkipped) {
    const auto dir = test_util::scratch_dir("harness_nan");
    auto cfg = smoke_config(dir.string());
    cfg.inject_nan_instance = 2;
    const auto summary = run_experiment(cfg);
    EXPECT_EQ(summary.ok, 4u);
    EXPECT_EQ(summary.skipped, 1u);
    EXPECT_EQ(summary.ok + summary.skipped, summary.results.size());
    EXPECT_FALSE(summary.results[2].ok());
    EXPECT_NE(summary.results[2].error.find("non-finite"), std::string::npos);
    const auto density = lines_of(dir / "density.csv");
    ASSERT_EQ(density.size(), 6u);
    EXPECT_EQ(density[3], "2,,,,,,skipped");
    EXPECT_EQ(lines_of(dir / "tv_vs_size.csv").size(), 1 + 4 * 26u);
    std::ifstream mf(dir / "manifest.json");
    const auto manifest = nlohmann::json::parse(mf);
    EXPECT_EQ(manifest["skipped_instances"][0]["instance_id"], 2);
}

TEST(Harness, ByteIdenticalAcrossRunsAndWorkers) {
    const auto a = test_util::scratch_dir("harness_det_a");
    const auto b = test_util::scratch_dir("harness_det_b");
    const auto c = test_util::scratch_dir("harness_det_c");
    auto cfg = smoke_config(a.string());
    cfg.jobs = 1;
    run_experiment(cfg);
    cfg.out_dir = b.string();
    run_experiment(cfg);
    cfg.out_dir = c.string();
    cfg.jobs = 4;
    run_experiment(cfg);
    for (const char* name : kCsvs) {
        const auto ref = test_util::read_file(a / name);
        EXPECT_FALSE(ref.empty());
        EXPECT_EQ(ref, test_util::read_file(b / name)) << name;
        EXPECT_EQ(ref, test_util::read_file(c / name)) << name;
    }
    EXPECT_EQ(test_util::read_file(a / "traces.jsonl"), test_util::read_file(c / "traces.jsonl"));
}

TEST(Harness, ThreadEnvOverride) {
    ::setenv("STRACE_LAB_THREADS", "6", 1);
    EXPECT_EQ(resolve_jobs(1), 6u);
    ::setenv("STRACE_LAB_THREADS", "zero", 1);
    EXPECT_EQ(resolve_jobs(3), 3u);
    ::unsetenv("STRACE_LAB_THREADS");
    EXPECT_EQ(resolve_jobs(0), 1u);
}

TEST(Harness, LoadFailuresAbort) {
    auto cfg = smoke_config("");
    cfg.corpus_path = "/nonexistent/corpus.txt";
    EXPECT_THROW(run_experiment(cfg), CorpusError);
    cfg = smoke_config("");
    cfg.model_path = "/nonexistent/model.bin";
    EXPECT_THROW(run_experiment(cfg), ModelFileError);
    cfg = smoke_config("");
    cfg.model_config.vocab_size = 100;
    EXPECT_THROW(run_experiment(cfg), std::invalid_argument);
}

TEST(Harness, ModelFileAndGeneratedModelAgree) {
    const auto dir = test_util::scratch_dir("harness_model_file");
    auto cfg = smoke_config("");
    cfg.instance_limit = 2;
    save_model((dir / "m.bin").string(), cfg.model_config, random_model(cfg.model_config, cfg.model_seed));
    const auto generated = run_experiment(cfg);
    cfg.model_path = (dir / "m.bin").string();
    const auto loaded = run_experiment(cfg);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(generated.results[i].tv, loaded.results[i].tv);
}

namespace {

std::vector<InstanceResult> synthetic(const std::vector<double>& density, const std::vector<double>& entropy) {
    std::vector<InstanceResult> out;
    for (std::size_t i = 0; i < density.size(); ++i) {
        InstanceResult r;
        r.id = i;
        r.status = InstanceStatus::ok;
        r.density = density[i];
        r.entropy = entropy[i];
        r.loss = entropy[i] * 2.0;
        r.top1_freq = -entropy[i];
        out.push_back(r);
    }
    return out;
}

}  // namespace

TEST(Correlate, MonotoneFixture) {
    const auto rows = correlate(synthetic({0.1, 0.2, 0.3, 0.4}, {1.0, 1.5, 2.5, 4.0}));
    ASSERT_EQ(rows.size(), 3u);
    EXPECT_EQ(rows[0].metric, "entropy");
    EXPECT_DOUBLE_EQ(*rows[0].rho, 1.0);
    EXPECT_DOUBLE_EQ(*rows[1].rho, 1.0);
    EXPECT_DOUBLE_EQ(*rows[2].rho, -1.0);
    EXPECT_EQ(rows[0].n, 4u);
}

TEST(Correlate, TwoInstancesAreDegenerate) {
    const auto up = correlate(synthetic({0.1, 0.2}, {3.0, 5.0}));
    EXPECT_DOUBLE_EQ(std::abs(*up[0].rho), 1.0);
    const auto down = correlate(synthetic({0.1, 0.2}, {5.0, 3.0}));
    EXPECT_DOUBLE_EQ(*down[0].rho, -1.0);
}

TEST(Correlate, ConstantColumnIsUndefined) {
    const auto rows = correlate(synthetic({0.1, 0.2, 0.3}, {1.0, 1.0, 1.0}));
    EXPECT_FALSE(rows[0].rho.has_value());
    EXPECT_THROW(correlate(synthetic({0.1}, {1.0})), std::invalid_argument);
    auto skipped = synthetic({0.1, 0.2, 0.3}, {1.0, 2.0, 3.0});
    skipped[1].status = InstanceStatus::skipped;
    EXPECT_EQ(correlate(skipped)[0].n, 2u);
}

// Permutation null: with shuffled pairing the correlation over 1000 instances
// stays small. The 95th percentile of |rho| is checked over 200 replicates.
TEST(Correlate, ShuffledNullIsSmall) {
    test_util::Gen g(81);
    std::vector<double> abs_rho;
    for (int rep = 0; rep < 200; ++rep) {
        std::vector<double> d(1000), e(1000);
        for (auto& v : d) v = g.real(0, 1);
        for (auto& v : e) v = g.real(0, 5);
        abs_rho.push_back(std::abs(*correlate(synthetic(d, e))[0].rho));
    }
    std::sort(abs_rho.begin(), abs_rho.end());
    EXPECT_LT(abs_rho[189], 0.08);
}

TEST(CompareModels, SameResultsAndErrors) {
    const auto a = synthetic({0.3, 0.1, 0.2, 0.5}, {1, 2, 3, 4});
    const auto same = compare_models(a, a);
    EXPECT_DOUBLE_EQ(*same.rho, 1.0);
    EXPECT_EQ(same.n, 4u);

    auto b = a;
    for (auto& r : b) r.id += 100;
    EXPECT_THROW(compare_models(a, b), std::invalid_argument);

    auto partial = a;
    partial.erase(partial.begin());
    EXPECT_EQ(compare_models(a, partial).n, 3u);
}

TEST(CompareModels, IndependentModelsOnSameCorpus) {
    auto cfg = smoke_config("");
    cfg.instance_limit = 6;
    cfg.grid = SizeGrid({0.001, 0.01, 0.1, 0.5});
    const auto a = run_experiment(cfg);
    cfg.model_seed = 12;
    const auto b = run_experiment(cfg);
    const auto cmp = compare_models(a.results, b.results);
    EXPECT_EQ(cmp.n, 6u);
    ASSERT_TRUE(cmp.rho.has_value());
    EXPECT_GE(*cmp.rho, -1.0);
    EXPECT_LE(*cmp.rho, 1.0);
}

TEST(Analyze, RebuildsStructureAndFrequencyFromDumps) {
    const auto dir = test_util::scratch_dir("harness_analyze");
    auto cfg = smoke_config(dir.string());
    cfg.instance_limit = 3;
    run_experiment(cfg);
    analyze_traces(dir, dir / "structure_again.csv", false, kDefaultDepthBins);
    analyze_traces(dir, dir / "freq_again.csv", true, kDefaultDepthBins);
    EXPECT_EQ(test_util::read_file(dir / "structure.csv"), test_util::read_file(dir / "structure_again.csv"));
    EXPECT_EQ(test_util::read_file(dir / "freqcurve.csv"), test_util::read_file(dir / "freq_again.csv"));

    analyze_traces(dir, dir / "structure_2bins.csv", false, 2);
    EXPECT_EQ(lines_of(dir / "structure_2bins.csv").size(), 1 + 26 * 5u);
}

TEST(Analyze, DensityAndNucleusReaders) {
    const auto dir = test_util::scratch_dir("harness_readers");
    auto cfg = smoke_config(dir.string());
    cfg.inject_nan_instance = 0;
    const auto summary = run_experiment(cfg);
    const auto back = read_density_csv(dir / "density.csv");
    ASSERT_EQ(back.size(), summary.results.size());
    EXPECT_FALSE(back[0].ok());
    for (std::size_t i = 1; i < back.size(); ++i) {
        EXPECT_TRUE(back[i].ok());
        EXPECT_NEAR(back[i].density, summary.results[i].density, 1e-11);
        EXPECT_EQ(back[i].top1_token, summary.results[i].top1_token);
    }
    write_correlations_csv(dir / "corr.csv", correlate(back));
    const auto corr = lines_of(dir / "corr.csv");
    ASSERT_EQ(corr.size(), 4u);
    EXPECT_EQ(corr[0], "metric,rho,n");
    EXPECT_EQ(corr[1].substr(0, 8), "entropy,");

    write_nucleus_summary(dir / "nucleus.csv", dir / "nucleus_summary.csv");
    const auto nuc = lines_of(dir / "nucleus_summary.csv");
    ASSERT_EQ(nuc.size(), 12u);
    EXPECT_EQ(nuc[0], "k_percent,median_s_min_rel,reached_fraction");
    EXPECT_THROW(read_density_csv(dir / "tv_vs_size.csv"), std::runtime_error);
}

TEST(Baselines, RandomAndInverseTables) {
    const auto dir = test_util::scratch_dir("harness_baselines");
    auto cfg = smoke_config(dir.string());
    cfg.instance_limit = 3;
    cfg.grid = SizeGrid({0.01, 0.1, 0.5});
    const auto base = run_random_baseline(cfg, 4);
    ASSERT_EQ(base.size(), 3u);
    for (const auto& r : base) {
        EXPECT_TRUE(r.ok);
        EXPECT_EQ(r.tv_random.size(), 4u);
        EXPECT_EQ(r.tv_greedy.size(), 3u);
    }
    const auto lines = lines_of(dir / "baseline_random.csv");
    EXPECT_EQ(lines[0], "instance_id,s_rel,tv_greedy,tv_random_mean,tv_random_min,tv_random_max");
    EXPECT_EQ(lines.size(), 1 + 9u);

    const auto inv = run_inverse_ablation(cfg);
    ASSERT_EQ(inv.size(), 3u);
    const auto ilines = lines_of(dir / "inverse_ablation.csv");
    EXPECT_EQ(ilines[0], "instance_id,s_rel,tv_sufficiency,tv_necessity");
    EXPECT_EQ(ilines.size(), 1 + 9u);
    // Sufficiency TVs agree with the main run.
    cfg.out_dir.clear();
    const auto run = run_experiment(cfg);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(inv[i].tv_kept, run.results[i].tv);
        EXPECT_EQ(base[i].tv_greedy, run.results[i].tv);
    }
}
