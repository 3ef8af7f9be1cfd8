// Experiment driver: a spec names a dataset/vocabulary/encoder triple plus
// methods x shots x seeds; the runner executes every cell, saves per-cell
// artifacts and emits deterministic CSV (no timestamps anywhere). Failed
// cells are recorded and the rest continue.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ctxopt/train.hpp"

namespace ctxopt {

extern const std::vector<std::string> kKnownMethods;

struct ExperimentSpec {
    std::string dataset_path;
    std::string vocab_path;
    std::string encoder_path;
    std::vector<std::string> methods = {"coop", "zeroshot"};
    std::vector<int> shots = {1, 2, 4, 8, 16};
    std::vector<std::uint64_t> seeds = {1, 2, 3};
    std::string output_dir = "out";
    PromptConfig prompt;
    TrainConfig train;
    std::vector<std::string> templates; // empty = the dataset's hand-crafted template
    EnsembleMode ensemble_mode = EnsembleMode::kEmbeddings;
    bool allow_any_shots = false;

    static ExperimentSpec from_json(const nlohmann::json& j);
    static ExperimentSpec load(const std::string& path);
    nlohmann::json to_json() const;
    std::string hash() const; // fnv1a64 hex over the canonical dump
};

struct CellResult {
    std::string method;
    int shots = 0;
    std::uint64_t seed = 0;
    RunResult result;
    std::string error; // non-empty when the cell failed

    bool ok() const { return error.empty(); }
};

struct ExperimentOutcome {
    std::string run_dir; // <output_dir>/runs/<spec-hash>
    std::vector<CellResult> cells;
    std::string results_csv; // also written to <run_dir>/results.csv
    bool all_ok = true;
    bool dry_run = false;
};

// Validates every referenced file and the whole cell grid up front; dry_run
// stops there. jobs > 1 runs cells on that many threads; the merge order is
// canonical either way.
ExperimentOutcome run_experiment(const ExperimentSpec& spec, std::size_t jobs = 1,
                                 bool dry_run = false);

// Wide table for plotting: one row per shots value, one column per method,
// cells hold the seed-mean accuracy. Input rows come from results.csv files.
std::string pivot_results_csv(const std::vector<std::string>& results_csv_paths);

} // namespace ctxopt
