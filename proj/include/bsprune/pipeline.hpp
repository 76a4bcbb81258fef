#pragma once

#include <map>
#include <string>
#include <vector>

#include "bsprune/builders.hpp"
#include "bsprune/dataset.hpp"
#include "bsprune/graph.hpp"
#include "bsprune/importance.hpp"
#include "bsprune/pruner.hpp"
#include "bsprune/trainer.hpp"

namespace bsprune {

struct StageConfig {
    double remove_fraction = 0.0;  // 0 skips the stage
    std::string method = "taylor_fo";
    int epochs = 10;  // retraining epochs after the prune
    int iterations = 1;
};

struct DatasetConfig {
    std::string kind = "synthetic";  // synthetic | mnist
    // synthetic
    int n = 1200;
    int h = 16, w = 16, c = 1;
    int classes = 2;
    double noise = 1.0;
    // mnist
    std::string images_path, labels_path;
    int upsample = 1;
    int limit = 0;  // optional truncation for desk-scale runs
    double val_fraction = 0.1;
};

struct RunConfig {
    std::uint64_t seed = 1;
    ArchSpec arch;
    DatasetConfig dataset;
    TrainConfig train;         // Step 3
    StageConfig basis_stage;   // Step 4
    StageConfig channel_stage; // Step 5
    bool recompute_bn = true;
    std::string out_dir;     // empty -> nothing written
    std::string checkpoint;  // starting point for the prune subcommand
};

RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);

struct StageRecord {
    std::string stage;
    double accuracy = 0.0;
    std::int64_t params = 0;
    std::int64_t flops = 0;
    double param_pr = 0.0;  // vs the decomposed unpruned model
    double flop_pr = 0.0;
};

struct RunResult {
    std::vector<StageRecord> stages;
    NetGraph final_graph;
    std::int64_t baseline_params = 0;  // undecomposed model, for paper-style ratios
    std::int64_t baseline_flops = 0;
    std::vector<std::pair<std::string, std::string>> importance_dumps;  // (filename, contents)
    std::vector<std::pair<std::string, std::string>> mask_dumps;
    std::string report_csv;
};

/// The full procedure: head replacement and BN insertion, decomposition,
/// scaling-factor training, basis pruning with retraining, then channel
/// pruning with retraining. Checkpoints land in out_dir after every stage;
/// a stage failure propagates with the stage name attached and earlier
/// checkpoints intact.
RunResult run_procedure(const RunConfig& cfg);

/// Steps 4-5 only, starting from an already trained decomposed graph
/// (typically loaded from a checkpoint).
RunResult run_pruning_stages(NetGraph g, const RunConfig& cfg);

void emit_report(const RunResult& result, const RunConfig& cfg, const std::string& dir);

/// Basis-pruning ablation: trains Step 3 per seed, then removes half of the
/// basis vectors of every decomposed pair under each scoring method and
/// measures validation accuracy without retraining.
struct AblationResult {
    std::vector<std::string> methods;
    std::map<std::string, std::vector<double>> per_seed_accuracy;
    std::map<std::string, double> mean_accuracy;
};

AblationResult run_basis_ablation(const RunConfig& base, const std::vector<std::uint64_t>& seeds);

/// Keep-indicator table retaining the top ceil(r/2) scores of each layer.
ImportanceTable half_removal_indicator(const ImportanceTable& table);

Dataset build_dataset(const DatasetConfig& cfg, std::uint64_t seed);

}  // namespace bsprune
