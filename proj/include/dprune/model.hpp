#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dprune/tape.hpp"
#include "dprune/tensor.hpp"

namespace dprune::det {

enum class LayerKind : int { kInput = 0, kConv, kRelu, kPool, kUpsample, kAdd };
const char* layer_kind_name(LayerKind kind);

// One set of convolution weights. A conv may be applied by several layers
// (the detection head is shared across scales).
struct ConvSpec {
  std::string name;
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 1;
  int stride = 1;
  bool operator==(const ConvSpec&) const = default;
};

struct Layer {
  std::string name;
  LayerKind kind = LayerKind::kInput;
  std::vector<int> inputs;  // producer layer ids
  int conv = -1;            // ConvSpec index when kind == kConv
  int channels = 0;         // output channel count
  int stride = 1;           // cumulative stride w.r.t. the input image
  bool operator==(const Layer&) const = default;
};

struct ScaleOutput {
  int neck_layer = -1;  // post-activation neck feature fed to the head
  int cls_layer = -1;
  int box_layer = -1;
  int stride = 1;
  bool operator==(const ScaleOutput&) const = default;
};

struct ArchConfig {
  std::vector<int> backbone_widths{16, 32, 64};
  int neck_channels = 32;
  int num_scales = 3;
  int head_convs = 2;
  int num_classes = 4;
  int in_channels = 3;
  std::uint64_t seed = 1;

  void validate() const;
  bool operator==(const ArchConfig&) const = default;
};

struct ModelGraph {
  std::vector<ConvSpec> convs;
  std::vector<Layer> layers;  // topologically ordered; layer 0 is the input
  std::vector<ScaleOutput> scales;
  int num_classes = 0;

  // Checks DAG order and channel consistency of every edge.
  void validate() const;
  int find_conv(const std::string& name) const;
  int max_stride() const;
  std::size_t parameter_count() const;
  // Multiply-accumulates of one forward pass on an image of the given size.
  std::size_t macs(int height, int width) const;
  bool operator==(const ModelGraph&) const = default;
};

template <typename T>
struct Parameters {
  std::vector<BasicTensor<T>> weights;  // [Cout,Cin,k,k] per conv
  std::vector<BasicTensor<T>> biases;   // [Cout] per conv

  template <typename U>
  Parameters<U> cast() const {
    Parameters<U> out;
    for (const auto& w : weights) out.weights.push_back(w.template cast<U>());
    for (const auto& b : biases) out.biases.push_back(b.template cast<U>());
    return out;
  }
};

template <typename T>
Parameters<T> watch(Tape<T>& tape, const Parameters<T>& params) {
  Parameters<T> out;
  for (const auto& w : params.weights) out.weights.push_back(tape.watch(w));
  for (const auto& b : params.biases) out.biases.push_back(tape.watch(b));
  return out;
}

struct Model {
  ModelGraph graph;
  Parameters<float> params;
};

// Backbone of conv-relu-pool stages, FPN-style neck (1x1 laterals, nearest
// top-down upsampling + add, 3x3 smoothing conv + relu per scale) and a head
// shared across scales (3x3 convs, then 1x1 class and box branches).
ModelGraph build_graph(const ArchConfig& arch);
Model build_model(const ArchConfig& arch);

// Uniform fan-in init: weights ~ U(-sqrt(6/fan_in), sqrt(6/fan_in)), zero
// biases, class-branch bias at the 0.01 prior.
Parameters<float> init_parameters(const ModelGraph& graph, std::uint64_t seed);

void check_parameters(const ModelGraph& graph, const Parameters<float>& params);

// Replaces a layer's output during forward; used for channel masking and
// activation perturbation.
template <typename T>
using LayerHook = std::function<BasicTensor<T>(int layer, const BasicTensor<T>& output)>;

template <typename T>
struct ForwardResult {
  std::vector<BasicTensor<T>> layers;  // output of every layer
  std::vector<BasicTensor<T>> neck;    // per scale [N,C_neck,Hs,Ws]
  std::vector<BasicTensor<T>> cls;     // per scale [N,G,Hs,Ws]
  std::vector<BasicTensor<T>> box;     // per scale [N,4,Hs,Ws]
};

template <typename T>
ForwardResult<T> forward(const ModelGraph& graph, const Parameters<T>& params, const BasicTensor<T>& images,
                         const LayerHook<T>& hook = nullptr);

}  // namespace dprune::det
