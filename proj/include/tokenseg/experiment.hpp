#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tokenseg/config.hpp"
#include "tokenseg/data.hpp"
#include "tokenseg/trainer.hpp"

namespace tokenseg {

struct RunRecord {
    ExperimentConfig config;
    std::vector<StepMetrics> metrics;
    std::vector<std::pair<int, real>> epoch_val;  // (epoch, val mIoU)
    IouReport final_val;
    double wall_seconds = 0;  // reported on stdout only, never in files
};

// Builds the data, trains per config (train.mode sup_only disables all
// unsupervised machinery), evaluates the student on val after each epoch,
// and writes config.txt, metrics.txt, eval.txt, report.txt and checkpoints
// under config.output_dir. Everything written is deterministic in
// (config, seeds).
RunRecord run_experiment(const ExperimentConfig& cfg);

struct GridCell {
    std::string value;
    uint64_t seed = 0;
    bool ok = false;
    real final_miou = 0;
    std::string error;
};

struct GridResult {
    std::string axis;
    std::vector<std::string> values;
    std::vector<uint64_t> seeds;
    std::vector<GridCell> cells;  // values-major, |values| * |seeds|
    std::string table;            // mean +/- std of final mIoU per value
};

// Cross product of values x seeds along one axis of
// {augmentation, branch_design, rho, theta}. Failed cells are marked and
// the grid continues. threads > 1 runs cells concurrently; outputs are
// per-cell directories so the table is identical either way.
GridResult run_ablation_grid(const ExperimentConfig& base, const std::string& axis,
                             const std::vector<std::string>& values,
                             const std::vector<uint64_t>& seeds, int threads);

// TOKENSEG_THREADS, default 1; rejects non-positive or garbage values.
int grid_threads_from_env();

}  // namespace tokenseg
