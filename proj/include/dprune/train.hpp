#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dprune/detector.hpp"
#include "dprune/discriminant.hpp"
#include "dprune/model.hpp"
#include "dprune/synthdet.hpp"

namespace dprune::harness {

struct OptimizerConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int batch_size = 16;
  int epochs = 30;
  double grad_clip = 10.0;  // global L2 norm; 0 disables
  bool class_balanced = true;
  void validate() const;
  bool operator==(const OptimizerConfig&) const = default;
};

// SGD momentum buffers, one per parameter tensor (weights then biases).
struct OptimizerState {
  std::vector<std::vector<float>> momentum;
  bool operator==(const OptimizerState&) const = default;
};

OptimizerState fresh_optimizer(const det::Parameters<float>& params);

struct StepLosses {
  double det = 0, ld = 0, cov = 0, total = 0;
  double grad_norm = 0;  // before clipping
  std::vector<int> k;
};

// One SGD step on a batch; returns the losses measured before the update.
StepLosses sgd_step(const det::ModelGraph& graph, det::Parameters<float>& params, OptimizerState& opt,
                    const Tensor& images, const std::vector<det::GroundTruth>& gt,
                    const det::DetectionLossConfig& det_cfg, const ldt::LdtConfig& ldt_cfg,
                    const OptimizerConfig& opt_cfg, double lr);

// Cosine decay from base_lr at step 0 to 0 at total_steps.
double cosine_lr(double base_lr, long step, long total_steps);

// Image order for one epoch: a seeded shuffle, interleaved across each
// image's dominant class when balancing is on.
std::vector<int> epoch_order(const std::vector<data::DetectionSample>& samples, std::uint64_t seed, int epoch,
                             bool class_balanced);

Tensor gather_images(const std::vector<data::DetectionSample>& samples, const std::vector<int>& idx,
                     std::size_t first, std::size_t count);
std::vector<det::GroundTruth> gather_truth(const std::vector<data::DetectionSample>& samples,
                                           const std::vector<int>& idx, std::size_t first, std::size_t count);

struct EvalResult {
  det::MapResult map;
  std::size_t params = 0;
  std::size_t macs = 0;
};

EvalResult evaluate(const det::Model& model, const std::vector<data::DetectionSample>& samples,
                    const det::DecodeConfig& decode = {}, int batch_size = 32);

// Per-scale discriminant statistics over a fixed sample set.
std::vector<ldt::ScaleDiagnostics> diagnose(const det::Model& model, const std::vector<data::DetectionSample>& samples,
                                            const det::DetectionLossConfig& det_cfg, const ldt::LdtConfig& ldt_cfg,
                                            int batch_size = 32);

struct EpochRecord {
  int epoch = 0;
  double lr = 0;
  double det = 0, ld = 0, cov = 0, total = 0;  // batch means
  double val_map = 0;
  std::vector<ldt::ScaleDiagnostics> scales;
};

struct TrainOptions {
  OptimizerConfig optimizer;
  det::DetectionLossConfig detection;
  ldt::LdtConfig ldt;
  std::uint64_t seed = 1;
  int first_epoch = 0;     // resume point
  int diag_samples = 128;  // val images used for per-epoch diagnostics
  bool eval_each_epoch = true;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Trains in place for epochs [first_epoch, optimizer.epochs).
std::vector<EpochRecord> train(det::Model& model, OptimizerState& opt, const std::vector<data::DetectionSample>& train,
                               const std::vector<data::DetectionSample>& val, const TrainOptions& options,
                               const EpochCallback& on_epoch = nullptr);

}  // namespace dprune::harness
