#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mxacl/config.hpp"
#include "mxacl/data.hpp"
#include "mxacl/model.hpp"
#include "mxacl/training.hpp"

namespace mxacl::cli {

enum ExitCode : int { kOk = 0, kValidation = 2, kDivergence = 3, kIo = 4 };

/// Runs one command; args exclude the program name. Never throws.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Default lambda grid of the sweep command.
std::vector<double> default_lambda_grid();

/// One trained model plus its log.
struct SeedRun {
  MultiExitModel model;
  TrainLog log;
  std::uint64_t seed = 0;
};

/// Stage 1 of a two-stage run for one seed, logged as train_seed would log it.
SeedRun train_seed_stage1(const RunConfig& c, const Dataset& data, const Vocab& vocab, std::uint64_t seed);

/// Trains one seed under c. A two-stage run given `stage1` (from train_seed_stage1 with the
/// same model config, seed and stage-1 settings) continues from a copy of it.
SeedRun train_seed(const RunConfig& c, const Dataset& data, const Vocab& vocab, std::uint64_t seed,
                   const SeedRun* stage1 = nullptr);

struct SweepResult {
  /// Preset name, lambda, score table over the configured seeds.
  struct Cell {
    std::string method;
    double lambda = 0.0;
    ScoreTable table;
  };
  std::vector<std::string> methods;
  std::vector<double> grid;
  std::vector<Cell> cells;  ///< method-major, grid order

  /// "lambda,<method>...,<method>_std..." with mean cross-layer averages.
  void write_table_csv(std::ostream& os) const;
  /// "method,lambda,seed,exit_layer,score".
  void write_scores_csv(std::ostream& os) const;
  /// Per method: means per lambda and their spread (max - min).
  nlohmann::json summary() const;
};

/// Runs every (method, lambda) pair of the grid over c.seeds. Stage 1 is shared across the
/// grid when a method's stage-1 objective is cross-entropy, which does not depend on lambda.
SweepResult run_lambda_sweep(const RunConfig& c, const Dataset& data, const std::vector<std::string>& methods,
                             const std::vector<double>& grid);

}  // namespace mxacl::cli
