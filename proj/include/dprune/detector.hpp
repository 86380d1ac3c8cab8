#pragma once

#include <limits>
#include <utility>
#include <vector>

#include "dprune/model.hpp"
#include "dprune/synthdet.hpp"

namespace dprune::det {

using GroundTruth = std::vector<data::DetectionObject>;

// FCOS-style scale ranges on max(l,t,r,b): scale s accepts (m*stride[s-1], m*stride[s]],
// the first scale starts at 0 and the last is unbounded. m = 8 gives the
// classic FCOS proportions; the toy images use a tighter default.
struct AssignmentConfig {
  float range_multiplier = 3.0f;
  bool operator==(const AssignmentConfig&) const = default;
};

struct SizeRange {
  float lo = 0;
  float hi = std::numeric_limits<float>::infinity();
};

std::vector<SizeRange> scale_ranges(const std::vector<int>& strides, const AssignmentConfig& cfg);

struct ScaleAssignment {
  int stride = 1;
  int height = 0;
  int width = 0;
  // Per (image, cell): index into that image's object list, or -1.
  std::vector<int> cell_object;
  // (image, object) pairs owning at least one positive cell, in order.
  std::vector<std::pair<int, int>> objects;
};

// A cell is positive for an object when its center lies strictly inside the
// box and max(l,t,r,b) falls in the scale's range; the smallest box wins.
std::vector<ScaleAssignment> assign_targets(const std::vector<int>& strides, int image_height, int image_width,
                                            const std::vector<GroundTruth>& gt, const AssignmentConfig& cfg);

std::vector<int> scale_strides(const ModelGraph& graph);

// Classification term: mean over every cell and class, or the same sum
// divided by the number of positive cells (FCOS convention).
enum class ClsNormalization { kMean, kPositives };

struct DetectionLossConfig {
  AssignmentConfig assignment;
  double box_weight = 1.0;
  ClsNormalization cls_norm = ClsNormalization::kPositives;
  bool operator==(const DetectionLossConfig&) const = default;
};

// BCE-with-logits over every cell and class of every scale (normalized per
// cls_norm) plus box_weight * mean smooth-L1 (beta 1, stride units) over the
// positive cells' four box distances.
template <typename T>
BasicTensor<T> detection_loss(const std::vector<BasicTensor<T>>& cls, const std::vector<BasicTensor<T>>& box,
                              const std::vector<int>& strides, const std::vector<GroundTruth>& gt,
                              const DetectionLossConfig& cfg = {});

struct Detection {
  data::Box box;
  int class_id = 0;
  float score = 0;
};

struct DecodeConfig {
  float score_thresh = 0.05f;
  float nms_iou = 0.5f;
  int max_detections = 100;
};

// Per image: sigmoid scores above the threshold decoded to boxes, greedy
// per-class NMS, ordered by score then by (scale, cell, class) index.
std::vector<std::vector<Detection>> decode_detections(const std::vector<Tensor>& cls, const std::vector<Tensor>& box,
                                                      const std::vector<int>& strides, const DecodeConfig& cfg = {});

// Greedy NMS over candidates already sorted in output order.
std::vector<Detection> nms(const std::vector<Detection>& sorted, float iou_thresh);

struct MapResult {
  double map = 0;
  std::vector<double> ap;            // per class; NaN when the class has no GT
  std::vector<int> gt_count;         // per class
};

// 101-point interpolated AP per class, mean over classes present in GT.
MapResult evaluate_map(const std::vector<std::vector<Detection>>& predictions, const std::vector<GroundTruth>& gt,
                       int num_classes, double iou_thresh = 0.5);

}  // namespace dprune::det
