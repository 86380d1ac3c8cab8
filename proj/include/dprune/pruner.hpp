#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "dprune/detector.hpp"
#include "dprune/discriminant.hpp"
#include "dprune/model.hpp"
#include "dprune/synthdet.hpp"

namespace dprune::prune {

using det::GroundTruth;

// Per-channel discriminant energy: power(c) = sum_k max(lambda_k, 0) * v_k[c]^2
// with each eigenvector scaled to unit length.
VectorD neck_discriminant_power(const EigenSolution& sol);

// Channels whose power reaches phi * max power. Empty when all powers are 0.
std::vector<int> retained_channels(const VectorD& power, double phi);

// Location attention on a height x width grid of the given stride: 1 at
// cells whose center lies inside a projected box, otherwise the max over
// objects of a * max(d, 1)^(-b), d the squared cell distance to the box
// center. All zero when there are no objects.
BasicTensor<float> attention_mask(const GroundTruth& gt, int height, int width, int stride, double a, double b);

enum class UtilitySource { kNeck, kDet };

// One traced activation per prunable conv: the conv's output, or the relu
// applied to it when that relu is its only consumer.
struct TracedLayer {
  int conv = -1;
  int layer = -1;
  int stride = 1;
  int channels = 0;
};

std::vector<TracedLayer> traced_layers(const det::ModelGraph& graph, const std::vector<int>& protect);

// Discriminant solution per scale, computed from the model's own neck
// features on a set of images. Scales without a solvable problem get zero
// power.
struct NeckDiscriminants {
  std::vector<VectorD> power;             // per scale
  std::vector<std::vector<int>> retained;  // per scale
};

NeckDiscriminants neck_discriminants(const det::Model& model, const std::vector<data::DetectionSample>& samples,
                                     const det::DetectionLossConfig& det_cfg, const ldt::LdtConfig& ldt_cfg,
                                     int batch_size = 32);

// Scalar whose gradient defines utility: sum over scales, cells and retained
// channels of power * neck feature.
template <typename T>
BasicTensor<T> neck_objective(const std::vector<BasicTensor<T>>& neck, const NeckDiscriminants& nd);

struct UtilityConfig {
  UtilitySource source = UtilitySource::kNeck;
  det::DetectionLossConfig detection;
};

// Per traced layer, per channel: mean over cells and images of dT/dF.
template <typename T>
std::vector<std::vector<double>> channel_utility(const det::ModelGraph& graph, const det::Parameters<T>& params,
                                                 const BasicTensor<T>& images, const std::vector<GroundTruth>& gt,
                                                 const std::vector<TracedLayer>& traced, const NeckDiscriminants& nd,
                                                 const UtilityConfig& cfg);

struct ImportanceConfig {
  double a = 1.2;
  double b = 0.062;
  bool location = true;  // false: uniform mask of ones
};

// Signed sums S[l][c] = (1/D) sum_d sum_ij M * u * F before the final
// absolute value; activations[l] is traced layer l over the D images.
template <typename T>
std::vector<std::vector<double>> signed_importance(const std::vector<BasicTensor<T>>& activations,
                                                   const std::vector<GroundTruth>& gt,
                                                   const std::vector<TracedLayer>& traced,
                                                   const std::vector<std::vector<double>>& utility,
                                                   const ImportanceConfig& cfg);

struct ImportanceTable {
  std::vector<TracedLayer> layers;
  std::vector<std::vector<double>> utility;     // [layer][channel]
  std::vector<std::vector<double>> signed_sum;  // before |.|
  std::vector<std::vector<double>> importance;  // |signed_sum|
  std::vector<std::vector<std::vector<double>>> batch_importance;  // [batch][layer][channel]
  int images = 0;
};

struct TraceConfig {
  UtilityConfig utility;
  ImportanceConfig importance;
  ldt::LdtConfig ldt;
  int batch_size = 32;
};

// Utility and importance over the given images, batch by batch; the table
// averages batch sums weighted by batch size.
ImportanceTable channel_importance(const det::Model& model, const std::vector<data::DetectionSample>& samples,
                                   const TraceConfig& cfg);

// Channel spaces: every conv output and elementwise add belongs to one space;
// all channels with the same index in a space form a coupling group.
struct CouplingGroups {
  std::vector<int> space_of_layer;             // per layer
  std::vector<int> out_space;                  // per conv
  std::vector<int> in_space;                   // per conv
  std::vector<int> space_channels;             // per space
  std::vector<std::vector<int>> space_convs;   // producers of each space
  std::vector<char> space_fixed;               // input image or protected producer
  std::vector<int> space_first_conv;           // tie-break key

  int spaces() const { return static_cast<int>(space_channels.size()); }
};

CouplingGroups build_coupling_groups(const det::ModelGraph& graph, const std::vector<int>& protect);

// Convs that are never pruned by default: the first conv, the class/box
// outputs and the shared head convs (outside the traced neck objective).
std::vector<int> default_protected(const det::ModelGraph& graph);

struct PruneMask {
  std::vector<std::vector<char>> keep;  // per space, per channel
  bool operator==(const PruneMask&) const = default;
};

PruneMask full_mask(const CouplingGroups& groups);

// Parameter count of the graph with the mask applied.
std::size_t masked_parameter_count(const det::ModelGraph& graph, const CouplingGroups& groups, const PruneMask& mask);

// Group score per space and channel: sum of member importances, or of the
// signed sums before the absolute value.
std::vector<std::vector<double>> group_scores(const CouplingGroups& groups, const ImportanceTable& table,
                                              bool use_signed = false);

class InfeasibleRate : public std::runtime_error {
 public:
  InfeasibleRate(double requested, double max_rate);
  double max_rate() const { return max_rate_; }

 private:
  double max_rate_;
};

// Drops groups in ascending score order (ties by first conv id, channel)
// until the removed parameter fraction reaches rate.
PruneMask select_prune_mask(const det::ModelGraph& graph, const CouplingGroups& groups,
                            const std::vector<std::vector<double>>& scores, double rate);

// Physically removes dropped channels; the result is a dense smaller model.
det::Model apply_prune(const det::Model& model, const CouplingGroups& groups, const PruneMask& mask);

// Forward hook forcing dropped channels to zero at every producer output.
template <typename T>
det::LayerHook<T> zero_mask_hook(const det::ModelGraph& graph, const CouplingGroups& groups, const PruneMask& mask);

// Cumulative target after round r of R: 1 - (1 - target)^(r / R).
double cumulative_rate(double target, int round, int rounds);

}  // namespace dprune::prune
