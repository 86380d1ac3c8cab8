#include "dprune/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "dprune/ops.hpp"

namespace dprune::det {

std::vector<SizeRange> scale_ranges(const std::vector<int>& strides, const AssignmentConfig& cfg) {
  std::vector<SizeRange> r(strides.size());
  for (std::size_t s = 0; s < strides.size(); ++s) {
    r[s].lo = s == 0 ? 0.0f : cfg.range_multiplier * static_cast<float>(strides[s - 1]);
    r[s].hi = s + 1 == strides.size() ? std::numeric_limits<float>::infinity()
                                      : cfg.range_multiplier * static_cast<float>(strides[s]);
  }
  return r;
}

std::vector<int> scale_strides(const ModelGraph& graph) {
  std::vector<int> s;
  for (const ScaleOutput& so : graph.scales) s.push_back(so.stride);
  return s;
}

std::vector<ScaleAssignment> assign_targets(const std::vector<int>& strides, int image_height, int image_width,
                                            const std::vector<GroundTruth>& gt, const AssignmentConfig& cfg) {
  const auto ranges = scale_ranges(strides, cfg);
  std::vector<ScaleAssignment> out(strides.size());
  for (std::size_t s = 0; s < strides.size(); ++s) {
    ScaleAssignment& a = out[s];
    a.stride = strides[s];
    a.height = image_height / a.stride;
    a.width = image_width / a.stride;
    const std::size_t cells = static_cast<std::size_t>(a.height) * a.width;
    a.cell_object.assign(gt.size() * cells, -1);
    for (std::size_t n = 0; n < gt.size(); ++n) {
      std::vector<char> used(gt[n].size(), 0);
      for (int i = 0; i < a.height; ++i) {
        for (int j = 0; j < a.width; ++j) {
          const float cx = (j + 0.5f) * a.stride, cy = (i + 0.5f) * a.stride;
          int best = -1;
          float best_area = 0;
          for (std::size_t k = 0; k < gt[n].size(); ++k) {
            const data::Box& b = gt[n][k].box;
            if (!(b.x1 < cx && cx < b.x2 && b.y1 < cy && cy < b.y2)) continue;
            const float m = std::max({cx - b.x1, cy - b.y1, b.x2 - cx, b.y2 - cy});
            if (!(m > ranges[s].lo && m <= ranges[s].hi)) continue;
            if (best < 0 || b.area() < best_area) {
              best = static_cast<int>(k);
              best_area = b.area();
            }
          }
          a.cell_object[n * cells + i * a.width + j] = best;
          if (best >= 0) used[best] = 1;
        }
      }
      for (std::size_t k = 0; k < used.size(); ++k)
        if (used[k]) a.objects.emplace_back(static_cast<int>(n), static_cast<int>(k));
    }
  }
  return out;
}

namespace {

template <typename T>
T bce_with_logits(T x, T y) {
  return std::max(x, T(0)) - x * y + std::log1p(std::exp(-std::abs(x)));
}

template <typename T>
T sigmoid(T x) {
  return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

}  // namespace

template <typename T>
BasicTensor<T> detection_loss(const std::vector<BasicTensor<T>>& cls, const std::vector<BasicTensor<T>>& box,
                              const std::vector<int>& strides, const std::vector<GroundTruth>& gt,
                              const DetectionLossConfig& cfg) {
  if (gt.empty()) throw std::invalid_argument("detection_loss: empty batch");
  if (cls.size() != strides.size() || box.size() != strides.size())
    throw std::invalid_argument("detection_loss: per-scale inputs do not match the stride list");
  const int n = cls[0].dim(0);
  const int g = cls[0].dim(1);
  if (n != static_cast<int>(gt.size())) throw std::invalid_argument("detection_loss: batch size mismatch");
  const int img_h = cls[0].dim(2) * strides[0], img_w = cls[0].dim(3) * strides[0];
  auto assign = assign_targets(strides, img_h, img_w, gt, cfg.assignment);

  // Box targets (stride units) per scale, aligned with [N,4,H,W].
  struct ScaleTargets {
    std::vector<T> box_target;
    std::vector<char> positive;
  };
  std::vector<ScaleTargets> targets(strides.size());
  double element_count = 0;
  double positives = 0;
  for (std::size_t s = 0; s < strides.size(); ++s) {
    const ScaleAssignment& a = assign[s];
    if (cls[s].shape() != Shape{n, g, a.height, a.width} || box[s].shape() != Shape{n, 4, a.height, a.width})
      throw std::invalid_argument("detection_loss: head output shape mismatch at scale " + std::to_string(s));
    const std::size_t cells = static_cast<std::size_t>(a.height) * a.width;
    element_count += static_cast<double>(n) * g * cells;
    auto& t = targets[s];
    t.box_target.assign(static_cast<std::size_t>(n) * 4 * cells, T(0));
    t.positive.assign(static_cast<std::size_t>(n) * cells, 0);
    for (int b = 0; b < n; ++b) {
      for (std::size_t c = 0; c < cells; ++c) {
        const int k = a.cell_object[b * cells + c];
        if (k < 0) continue;
        const data::Box& bx = gt[b][k].box;
        const T cx = (static_cast<T>(c % a.width) + T(0.5)) * a.stride;
        const T cy = (static_cast<T>(c / a.width) + T(0.5)) * a.stride;
        const T d[4] = {cx - bx.x1, cy - bx.y1, bx.x2 - cx, bx.y2 - cy};
        for (int q = 0; q < 4; ++q) t.box_target[(b * 4 + q) * cells + c] = d[q] / static_cast<T>(a.stride);
        t.positive[b * cells + c] = 1;
        positives += 1;
      }
    }
  }

  double cls_sum = 0, box_sum = 0;
  for (std::size_t s = 0; s < strides.size(); ++s) {
    const ScaleAssignment& a = assign[s];
    const std::size_t cells = static_cast<std::size_t>(a.height) * a.width;
    const auto logits = cls[s].data();
    const auto reg = box[s].data();
    for (int b = 0; b < n; ++b) {
      for (int k = 0; k < g; ++k) {
        for (std::size_t c = 0; c < cells; ++c) {
          const int obj = a.cell_object[b * cells + c];
          const T y = (obj >= 0 && gt[b][obj].class_id == k) ? T(1) : T(0);
          cls_sum += bce_with_logits(logits[(static_cast<std::size_t>(b) * g + k) * cells + c], y);
        }
      }
      for (std::size_t c = 0; c < cells; ++c) {
        if (!targets[s].positive[b * cells + c]) continue;
        for (int q = 0; q < 4; ++q) {
          const std::size_t idx = (static_cast<std::size_t>(b) * 4 + q) * cells + c;
          const double d = static_cast<double>(reg[idx]) - targets[s].box_target[idx];
          box_sum += std::abs(d) < 1.0 ? 0.5 * d * d : std::abs(d) - 0.5;
        }
      }
    }
  }
  const double box_den = positives > 0 ? 4.0 * positives : 1.0;
  const double cls_den = cfg.cls_norm == ClsNormalization::kMean ? element_count : std::max(positives, 1.0);
  const double loss = cls_sum / cls_den + (positives > 0 ? cfg.box_weight * box_sum / box_den : 0.0);

  std::vector<BasicTensor<T>> inputs;
  for (std::size_t s = 0; s < strides.size(); ++s) {
    inputs.push_back(cls[s]);
    inputs.push_back(box[s]);
  }
  auto shared_targets = std::make_shared<std::vector<ScaleTargets>>(std::move(targets));
  auto shared_assign = std::make_shared<std::vector<ScaleAssignment>>(std::move(assign));
  auto backward = [=](std::span<const T> gout, std::span<std::span<T>> gin) {
    const T cls_scale = static_cast<T>(gout[0] / cls_den);
    const T box_scale = static_cast<T>(positives > 0 ? gout[0] * cfg.box_weight / box_den : 0.0);
    for (std::size_t s = 0; s < strides.size(); ++s) {
      const ScaleAssignment& a = (*shared_assign)[s];
      const auto& t = (*shared_targets)[s];
      const std::size_t cells = static_cast<std::size_t>(a.height) * a.width;
      std::span<T> gc = gin[2 * s];
      std::span<T> gb = gin[2 * s + 1];
      const auto logits = inputs[2 * s].data();
      const auto reg = inputs[2 * s + 1].data();
      for (int b = 0; b < n; ++b) {
        if (!gc.empty()) {
          for (int k = 0; k < g; ++k) {
            for (std::size_t c = 0; c < cells; ++c) {
              const int obj = a.cell_object[b * cells + c];
              const T y = (obj >= 0 && gt[b][obj].class_id == k) ? T(1) : T(0);
              const std::size_t idx = (static_cast<std::size_t>(b) * g + k) * cells + c;
              gc[idx] += cls_scale * (sigmoid(logits[idx]) - y);
            }
          }
        }
        if (!gb.empty()) {
          for (std::size_t c = 0; c < cells; ++c) {
            if (!t.positive[b * cells + c]) continue;
            for (int q = 0; q < 4; ++q) {
              const std::size_t idx = (static_cast<std::size_t>(b) * 4 + q) * cells + c;
              const T d = reg[idx] - t.box_target[idx];
              gb[idx] += box_scale * (std::abs(d) < T(1) ? d : (d > T(0) ? T(1) : T(-1)));
            }
          }
        }
      }
    }
  };
  return make_result<T>(inputs, {}, {static_cast<T>(loss)}, backward);
}

template Tensor detection_loss<float>(const std::vector<Tensor>&, const std::vector<Tensor>&, const std::vector<int>&,
                                      const std::vector<GroundTruth>&, const DetectionLossConfig&);
template TensorD detection_loss<double>(const std::vector<TensorD>&, const std::vector<TensorD>&,
                                        const std::vector<int>&, const std::vector<GroundTruth>&,
                                        const DetectionLossConfig&);

std::vector<Detection> nms(const std::vector<Detection>& sorted, float iou_thresh) {
  std::vector<Detection> kept;
  for (const Detection& d : sorted) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return k.class_id == d.class_id && data::iou(k.box, d.box) > iou_thresh;
    });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

std::vector<std::vector<Detection>> decode_detections(const std::vector<Tensor>& cls, const std::vector<Tensor>& box,
                                                      const std::vector<int>& strides, const DecodeConfig& cfg) {
  if (cls.empty() || cls.size() != box.size() || cls.size() != strides.size())
    throw std::invalid_argument("decode_detections: per-scale inputs are inconsistent");
  const int n = cls[0].dim(0);
  const int g = cls[0].dim(1);
  std::vector<std::vector<Detection>> out(n);
  for (int b = 0; b < n; ++b) {
    std::vector<std::pair<Detection, std::size_t>> cands;
    std::size_t linear = 0;
    for (std::size_t s = 0; s < strides.size(); ++s) {
      const int h = cls[s].dim(2), w = cls[s].dim(3);
      const std::size_t cells = static_cast<std::size_t>(h) * w;
      const auto logits = cls[s].data();
      const auto reg = box[s].data();
      const float stride = static_cast<float>(strides[s]);
      for (std::size_t c = 0; c < cells; ++c) {
        for (int k = 0; k < g; ++k, ++linear) {
          const float score = sigmoid(logits[(static_cast<std::size_t>(b) * g + k) * cells + c]);
          if (!(score > cfg.score_thresh)) continue;
          const float cx = (static_cast<float>(c % w) + 0.5f) * stride;
          const float cy = (static_cast<float>(c / w) + 0.5f) * stride;
          auto r = [&](int q) { return reg[(static_cast<std::size_t>(b) * 4 + q) * cells + c] * stride; };
          Detection d{data::Box{cx - r(0), cy - r(1), cx + r(2), cy + r(3)}, k, score};
          cands.emplace_back(d, linear);
        }
      }
    }
    std::sort(cands.begin(), cands.end(), [](const auto& x, const auto& y) {
      if (x.first.score != y.first.score) return x.first.score > y.first.score;
      return x.second < y.second;
    });
    if (cands.size() > 1000) cands.resize(1000);
    std::vector<Detection> sorted;
    sorted.reserve(cands.size());
    for (auto& c : cands) sorted.push_back(c.first);
    auto kept = nms(sorted, cfg.nms_iou);
    if (static_cast<int>(kept.size()) > cfg.max_detections) kept.resize(cfg.max_detections);
    out[b] = std::move(kept);
  }
  return out;
}

MapResult evaluate_map(const std::vector<std::vector<Detection>>& predictions, const std::vector<GroundTruth>& gt,
                       int num_classes, double iou_thresh) {
  if (predictions.size() != gt.size())
    throw std::invalid_argument("evaluate_map: prediction and ground-truth image counts differ");
  MapResult res;
  res.ap.assign(num_classes, std::nan(""));
  res.gt_count.assign(num_classes, 0);
  for (const auto& objs : gt)
    for (const auto& o : objs) {
      if (o.class_id < 0 || o.class_id >= num_classes)
        throw std::invalid_argument("evaluate_map: ground-truth class outside the class universe");
      ++res.gt_count[o.class_id];
    }
  const int total_gt = std::accumulate(res.gt_count.begin(), res.gt_count.end(), 0);
  if (total_gt == 0) throw std::invalid_argument("evaluate_map: no ground truth");

  double ap_sum = 0;
  int present = 0;
  for (int k = 0; k < num_classes; ++k) {
    if (res.gt_count[k] == 0) continue;
    struct Entry {
      float score;
      std::size_t image, order;
      const data::Box* box;
    };
    std::vector<Entry> dets;
    for (std::size_t i = 0; i < predictions.size(); ++i)
      for (std::size_t j = 0; j < predictions[i].size(); ++j)
        if (predictions[i][j].class_id == k) dets.push_back({predictions[i][j].score, i, j, &predictions[i][j].box});
    std::sort(dets.begin(), dets.end(), [](const Entry& a, const Entry& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.image != b.image) return a.image < b.image;
      return a.order < b.order;
    });
    std::vector<std::vector<char>> matched(gt.size());
    for (std::size_t i = 0; i < gt.size(); ++i) matched[i].assign(gt[i].size(), 0);
    std::vector<double> precision, recall;
    int tp = 0, fp = 0;
    for (const Entry& d : dets) {
      int best = -1;
      double best_iou = iou_thresh;
      for (std::size_t j = 0; j < gt[d.image].size(); ++j) {
        const auto& o = gt[d.image][j];
        if (o.class_id != k || matched[d.image][j]) continue;
        const double v = data::iou(*d.box, o.box);
        if (v >= best_iou) {
          if (best < 0 || v > best_iou) {
            best = static_cast<int>(j);
            best_iou = v;
          }
        }
      }
      if (best >= 0) {
        matched[d.image][best] = 1;
        ++tp;
      } else {
        ++fp;
      }
      precision.push_back(static_cast<double>(tp) / (tp + fp));
      recall.push_back(static_cast<double>(tp) / res.gt_count[k]);
    }
    // Precision envelope from the right.
    for (int i = static_cast<int>(precision.size()) - 2; i >= 0; --i)
      precision[i] = std::max(precision[i], precision[i + 1]);
    double ap = 0;
    std::size_t idx = 0;
    for (int r = 0; r <= 100; ++r) {
      const double level = r / 100.0;
      while (idx < recall.size() && recall[idx] < level - 1e-12) ++idx;
      if (idx < recall.size()) ap += precision[idx];
    }
    res.ap[k] = ap / 101.0;
    ap_sum += res.ap[k];
    ++present;
  }
  res.map = ap_sum / present;
  return res;
}

}  // namespace dprune::det
