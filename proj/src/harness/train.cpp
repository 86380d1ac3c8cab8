#include "dprune/train.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <random>
#include <stdexcept>

#include "dprune/ops.hpp"

namespace dprune::harness {

void OptimizerConfig::validate() const {
  if (!(lr > 0)) throw std::invalid_argument("optimizer.lr must be > 0");
  if (momentum < 0 || momentum >= 1) throw std::invalid_argument("optimizer.momentum must be in [0, 1)");
  if (weight_decay < 0) throw std::invalid_argument("optimizer.weight_decay must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("optimizer.batch_size must be >= 1");
  if (epochs < 0) throw std::invalid_argument("optimizer.epochs must be >= 0");
  if (grad_clip < 0) throw std::invalid_argument("optimizer.grad_clip must be >= 0");
}

OptimizerState fresh_optimizer(const det::Parameters<float>& params) {
  OptimizerState s;
  for (const auto& w : params.weights) s.momentum.emplace_back(w.numel(), 0.0f);
  for (const auto& b : params.biases) s.momentum.emplace_back(b.numel(), 0.0f);
  return s;
}

double cosine_lr(double base_lr, long step, long total_steps) {
  if (total_steps <= 0) return base_lr;
  const double t = std::clamp(static_cast<double>(step) / static_cast<double>(total_steps), 0.0, 1.0);
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * t));
}

namespace {

void sgd_update(Tensor& param, std::span<const float> grad, double grad_scale, std::vector<float>& mom, double lr,
                double momentum, double weight_decay) {
  std::vector<float> w = param.vec();
  if (mom.size() != w.size()) throw std::logic_error("sgd: momentum buffer does not match parameter");
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double g = (grad.empty() ? 0.0 : grad_scale * grad[i]) + weight_decay * w[i];
    mom[i] = static_cast<float>(momentum * mom[i] + g);
    w[i] = static_cast<float>(w[i] - lr * mom[i]);
  }
  param = Tensor(param.shape(), std::move(w));
}

int dominant_class(const data::DetectionSample& s) {
  std::map<int, int> count;
  for (const auto& o : s.objects) ++count[o.class_id];
  int best = -1, best_n = 0;
  for (auto [c, n] : count)
    if (n > best_n) best = c, best_n = n;
  return best;
}

}  // namespace

StepLosses sgd_step(const det::ModelGraph& graph, det::Parameters<float>& params, OptimizerState& opt,
                    const Tensor& images, const std::vector<det::GroundTruth>& gt,
                    const det::DetectionLossConfig& det_cfg, const ldt::LdtConfig& ldt_cfg,
                    const OptimizerConfig& opt_cfg, double lr) {
  Tape<float> tape;
  const det::Parameters<float> p = det::watch(tape, params);
  const auto fwd = det::forward(graph, p, images);
  const auto strides = det::scale_strides(graph);
  const auto parts = ldt::ldt_objective(fwd.neck, fwd.cls, fwd.box, strides, gt, det_cfg, ldt_cfg);
  StepLosses out;
  out.det = parts.det.item();
  out.ld = parts.ld.item();
  out.cov = parts.cov.item();
  out.total = parts.total.item();
  out.k = parts.k;
  if (!std::isfinite(out.total)) throw std::runtime_error("training diverged: non-finite loss");
  const auto grads = tape.backward(parts.total);
  double norm2 = 0;
  for (const auto* group : {&p.weights, &p.biases})
    for (const auto& t : *group)
      for (float g : grads.raw(t)) norm2 += static_cast<double>(g) * g;
  out.grad_norm = std::sqrt(norm2);
  if (!std::isfinite(out.grad_norm)) throw std::runtime_error("training diverged: non-finite gradient");
  const double gs = opt_cfg.grad_clip > 0 && out.grad_norm > opt_cfg.grad_clip ? opt_cfg.grad_clip / out.grad_norm : 1.0;
  const std::size_t nw = params.weights.size();
  for (std::size_t i = 0; i < nw; ++i)
    sgd_update(params.weights[i], grads.raw(p.weights[i]), gs, opt.momentum[i], lr, opt_cfg.momentum,
               opt_cfg.weight_decay);
  for (std::size_t i = 0; i < params.biases.size(); ++i)
    sgd_update(params.biases[i], grads.raw(p.biases[i]), gs, opt.momentum[nw + i], lr, opt_cfg.momentum, 0.0);
  return out;
}

std::vector<int> epoch_order(const std::vector<data::DetectionSample>& samples, std::uint64_t seed, int epoch,
                             bool class_balanced) {
  std::vector<int> idx(samples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(epoch) + 1);
  std::shuffle(idx.begin(), idx.end(), rng);
  if (!class_balanced) return idx;
  std::map<int, std::vector<int>> by_class;
  for (int i : idx) by_class[dominant_class(samples[i])].push_back(i);
  std::vector<int> out;
  out.reserve(idx.size());
  for (std::size_t r = 0; out.size() < idx.size(); ++r)
    for (auto& [c, list] : by_class)
      if (r < list.size()) out.push_back(list[r]);
  return out;
}

Tensor gather_images(const std::vector<data::DetectionSample>& samples, const std::vector<int>& idx,
                     std::size_t first, std::size_t count) {
  if (count == 0) throw std::invalid_argument("gather_images: empty batch");
  const Shape& s = samples[idx[first]].image.shape();
  std::vector<float> buf;
  buf.reserve(count * samples[idx[first]].image.numel());
  for (std::size_t i = first; i < first + count; ++i) {
    const auto& img = samples[idx[i]].image;
    if (img.shape() != s) throw std::invalid_argument("gather_images: images differ in shape");
    buf.insert(buf.end(), img.data().begin(), img.data().end());
  }
  return Tensor({static_cast<int>(count), s[0], s[1], s[2]}, std::move(buf));
}

std::vector<det::GroundTruth> gather_truth(const std::vector<data::DetectionSample>& samples,
                                           const std::vector<int>& idx, std::size_t first, std::size_t count) {
  std::vector<det::GroundTruth> gt;
  for (std::size_t i = first; i < first + count; ++i) gt.push_back(samples[idx[i]].objects);
  return gt;
}

namespace {

std::vector<int> identity(std::size_t n) {
  std::vector<int> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = static_cast<int>(i);
  return idx;
}

}  // namespace

EvalResult evaluate(const det::Model& model, const std::vector<data::DetectionSample>& samples,
                    const det::DecodeConfig& decode, int batch_size) {
  const auto idx = identity(samples.size());
  const auto strides = det::scale_strides(model.graph);
  std::vector<std::vector<det::Detection>> preds;
  std::vector<det::GroundTruth> gt;
  for (std::size_t first = 0; first < samples.size(); first += batch_size) {
    const std::size_t count = std::min<std::size_t>(batch_size, samples.size() - first);
    const auto fwd = det::forward(model.graph, model.params, gather_images(samples, idx, first, count));
    auto d = det::decode_detections(fwd.cls, fwd.box, strides, decode);
    for (auto& v : d) preds.push_back(std::move(v));
    for (auto& g : gather_truth(samples, idx, first, count)) gt.push_back(std::move(g));
  }
  EvalResult r;
  r.map = det::evaluate_map(preds, gt, model.graph.num_classes);
  r.params = model.graph.parameter_count();
  const int side = samples.empty() ? 0 : samples[0].image.dim(1);
  r.macs = model.graph.macs(side, side);
  return r;
}

std::vector<ldt::ScaleDiagnostics> diagnose(const det::Model& model, const std::vector<data::DetectionSample>& samples,
                                            const det::DetectionLossConfig& det_cfg, const ldt::LdtConfig& ldt_cfg,
                                            int batch_size) {
  const auto idx = identity(samples.size());
  const auto strides = det::scale_strides(model.graph);
  const std::size_t scales = strides.size();
  std::vector<std::vector<double>> rows(scales);
  std::vector<std::vector<int>> labels(scales);
  std::vector<int> channels(scales, 0);
  for (std::size_t first = 0; first < samples.size(); first += batch_size) {
    const std::size_t count = std::min<std::size_t>(batch_size, samples.size() - first);
    const Tensor images = gather_images(samples, idx, first, count);
    const auto gt = gather_truth(samples, idx, first, count);
    const auto fwd = det::forward(model.graph, model.params, images);
    const auto objects =
        ldt::lda_objects(strides, images.dim(2), images.dim(3), gt, det_cfg.assignment, ldt_cfg.assignment);
    for (std::size_t s = 0; s < scales; ++s) {
      const auto m = ldt::object_feature_matrix(fwd.neck[s], gt, objects[s], strides[s], static_cast<int>(s));
      channels[s] = fwd.neck[s].dim(1);
      for (float v : m.x.data()) rows[s].push_back(v);
      labels[s].insert(labels[s].end(), m.labels.begin(), m.labels.end());
    }
  }
  std::vector<ldt::ScaleDiagnostics> out;
  for (std::size_t s = 0; s < scales; ++s) {
    const int n = static_cast<int>(labels[s].size());
    ldt::ObjectFeatureMatrix<double> m{TensorD({n, channels[s]}, rows[s]), labels[s], static_cast<int>(s)};
    out.push_back(ldt::diagnose_scale(m, ldt_cfg, model.graph.num_classes));
  }
  return out;
}

std::vector<EpochRecord> train(det::Model& model, OptimizerState& opt, const std::vector<data::DetectionSample>& train,
                               const std::vector<data::DetectionSample>& val, const TrainOptions& options,
                               const EpochCallback& on_epoch) {
  const auto& oc = options.optimizer;
  oc.validate();
  if (train.empty()) throw std::invalid_argument("train: empty training split");
  if (opt.momentum.size() != model.params.weights.size() + model.params.biases.size())
    throw std::invalid_argument("train: optimizer state does not match the model");
  const long steps_per_epoch = static_cast<long>(train.size() / oc.batch_size);
  if (steps_per_epoch == 0) throw std::invalid_argument("train: fewer training images than one batch");
  const long total_steps = steps_per_epoch * oc.epochs;
  const std::vector<data::DetectionSample> diag_set(
      val.begin(), val.begin() + std::min<std::size_t>(val.size(), options.diag_samples));

  std::vector<EpochRecord> records;
  for (int epoch = options.first_epoch; epoch < oc.epochs; ++epoch) {
    const auto order = epoch_order(train, options.seed, epoch, oc.class_balanced);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = cosine_lr(oc.lr, epoch * steps_per_epoch, total_steps);
    for (long b = 0; b < steps_per_epoch; ++b) {
      const double lr = cosine_lr(oc.lr, epoch * steps_per_epoch + b, total_steps);
      const std::size_t first = static_cast<std::size_t>(b) * oc.batch_size;
      const auto losses =
          sgd_step(model.graph, model.params, opt, gather_images(train, order, first, oc.batch_size),
                   gather_truth(train, order, first, oc.batch_size), options.detection, options.ldt, oc, lr);
      rec.det += losses.det;
      rec.ld += losses.ld;
      rec.cov += losses.cov;
      rec.total += losses.total;
    }
    rec.det /= steps_per_epoch;
    rec.ld /= steps_per_epoch;
    rec.cov /= steps_per_epoch;
    rec.total /= steps_per_epoch;
    if (options.eval_each_epoch && !val.empty()) rec.val_map = evaluate(model, val).map.map;
    if (!diag_set.empty()) rec.scales = diagnose(model, diag_set, options.detection, options.ldt);
    if (on_epoch) on_epoch(rec);
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace dprune::harness
