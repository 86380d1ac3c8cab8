#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dprune/checkpoint.hpp"
#include "dprune/config.hpp"
#include "dprune/pruner.hpp"
#include "dprune/train.hpp"

namespace dprune::harness {

namespace fs = std::filesystem;

using Log = std::function<void(const std::string&)>;

struct Splits {
  std::vector<data::DetectionSample> train;
  std::vector<data::DetectionSample> val;
};

Splits load_splits(const data::DatasetConfig& cfg);

// Trains from scratch. Writes checkpoint.ldtc, train_metrics.csv,
// spectra.csv and diagnostics.csv into out_dir.
struct TrainOutcome {
  Checkpoint checkpoint;
  std::vector<EpochRecord> epochs;
};
TrainOutcome run_train(const ExperimentConfig& cfg, const Splits& splits, const fs::path& out_dir,
                       const Log& log = nullptr);

// Group scores per coupling space for the configured method.
std::vector<std::vector<double>> method_scores(const det::Model& model, const prune::CouplingGroups& groups,
                                               const ExperimentConfig& cfg, const std::vector<data::DetectionSample>& images,
                                               int round, prune::ImportanceTable* table_out = nullptr);

struct RoundMetrics {
  int round = 0;
  double target_rate = 0;    // cumulative, w.r.t. the unpruned model
  double realized_rate = 0;  // cumulative
  std::size_t params = 0;
  std::size_t macs = 0;
  double map = 0;
  std::string note;
};

struct PruneOutcome {
  Checkpoint checkpoint;
  std::vector<RoundMetrics> rounds;  // round 0 is the input model
};

// Iterative trace / select / apply / retrain. Writes rounds_<method>.csv,
// importance_<method>.csv and pruned_<method>.ldtc into out_dir.
PruneOutcome run_prune(const ExperimentConfig& cfg, const Checkpoint& input, const Splits& splits,
                       const fs::path& out_dir, const Log& log = nullptr);

// Writes eval.json and eval.csv (per-class AP).
EvalResult run_eval(const Checkpoint& ck, const std::vector<data::DetectionSample>& split, const fs::path& out_dir);

// Importance over D training images plus the Pearson correlation of
// per-channel importance between disjoint batches. Writes importance.csv and
// stability.csv.
struct TraceOutcome {
  prune::ImportanceTable table;
  std::vector<double> min_correlation;  // per traced layer
};
TraceOutcome run_trace(const ExperimentConfig& cfg, const Checkpoint& ck, const Splits& splits,
                       const fs::path& out_dir);

// SVG plots and summary.csv from the CSVs of a run directory.
void run_report(const fs::path& run_dir);

double pearson(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace dprune::harness
