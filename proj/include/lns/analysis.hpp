#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lns/baselines.hpp"
#include "lns/localizer.hpp"
#include "lns/stitcher.hpp"
#include "lns/toymodel.hpp"

namespace lns {

// One fully trained suite: pretrained model plus per-task finetunes, the
// raw material every merge method consumes.
struct SuiteArtifacts {
    SuiteConfig cfg;
    TaskSuite suite;
    ToyArch arch;
    ParamSet pre;
    std::vector<ParamSet> fts;
    std::vector<TaskVector> tvs;
    std::vector<double> ft_acc;  // finetuned accuracy on each task's test split
};

SuiteArtifacts build_suite_artifacts(const SuiteConfig& cfg);

struct LocalizeResult {
    Mask mask;
    SparseTaskVector sptv;
    double achieved_sparsity = 0.0;
    double lambda = 0.0;  // the L1 coefficient actually used (trained path)
};

// Localize one task at a sparsity fraction, trained or dataless.
LocalizeResult localize_task(const SuiteArtifacts& art, size_t task, bool trained,
                             double sparsity, const LocalizeConfig& base_cfg, uint64_t seed);

// Per-task and average evaluation of one merged model plus provenance.
struct MergeReport {
    std::string method;
    std::string hyperparameters_json;  // canonical JSON object
    std::vector<double> per_task;
    double average = 0.0;
    double pretrain_acc = 0.0;    // merged model on the held-out pretrain task
    double union_fraction = 0.0;  // union support / total params (0 for global methods)
    uint64_t seed = 0;
    std::string timestamp;

    uint64_t config_hash() const;  // over method, hyperparameters, seed
    std::string to_json() const;
};

struct MergeOptions {
    std::string method;  // simple | ta | ties | fisher | regmean | lns | lns-dataless
    double alpha = 0.4;  // task arithmetic coefficient
    bool alpha_sweep = false;  // grid {0.1 .. 1.0} on validation, overrides alpha
    double ties_k = 20.0;      // percent
    double ties_alpha = 1.0;
    double sparsity = 0.05;  // fraction, localize-and-stitch paths
    int shots = 64;
    int epochs = 10;
    double lambda = 1e-3;
    double lr = 200.0;  // score learning rate
    bool auto_lambda = false;
    size_t fisher_samples = 256;
    size_t gram_samples = 256;
    double ridge_rel = 1e-3;
    uint64_t seed = 0;
    std::string timestamp;  // empty = stamp wall clock
};

struct MergeOutcome {
    ParamSet merged;
    MergeReport report;
    std::vector<Mask> masks;              // localize-and-stitch paths only
    std::vector<SparseTaskVector> sptvs;  // ditto
};

MergeOutcome run_merge(const SuiteArtifacts& art, const MergeOptions& opts);

// Pairwise mask Jaccard and masked-task-vector cosine, n x n row-major.
struct PairMatrices {
    size_t n = 0;
    std::vector<double> jaccard;
    std::vector<double> cosine;
};

PairMatrices pairwise_matrices(std::span<const Mask> masks,
                               std::span<const SparseTaskVector> sptvs);

struct RetentionResult {
    double pre_acc = 0.0;
    double merged_acc = 0.0;
    double delta = 0.0;  // merged - pre on the pretrain task
};

RetentionResult retention_check(const SuiteArtifacts& art, const ParamSet& merged);

// RFC-4180 CSV with a header row, UTF-8, '.' decimal point.
void write_csv(const std::string& path, std::span<const std::string> header,
               const std::vector<std::vector<std::string>>& rows);
std::string csv_escape(const std::string& field);
std::string fmt_double(double v);

// Scripted experiment bundles; each writes one or more CSVs plus a
// summary.json into out_dir.
struct ExperimentOptions {
    std::string name;  // grafting | conflict | sparsity-sweep | shots-sweep |
                       // compression | continual | retention
    SuiteConfig suite_cfg;
    std::vector<uint64_t> seeds = {1, 2, 3};
    std::string out_dir;
    std::vector<double> sparsity_grid = {0.005, 0.01, 0.02, 0.05, 0.10, 0.20, 0.50, 1.0};
    std::vector<int> shots_grid = {8, 64, 256};
    double trained_sparsity = 0.05;
    double dataless_sparsity = 0.05;
    int shots = 64;  // per class, for every trained-localization path
};

// Returns the summary JSON that was also written to disk.
std::string run_experiment(const ExperimentOptions& opts);

}  // namespace lns
