#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "dprune/detector.hpp"
#include "dprune/ops.hpp"

using namespace dprune;
using namespace dprune::det;

namespace {

data::DetectionObject object(float x1, float y1, float x2, float y2, int cls) {
  data::DetectionObject o;
  o.box = {x1, y1, x2, y2};
  o.class_id = cls;
  return o;
}

template <typename T>
BasicTensor<T> random_tensor(Shape shape, std::mt19937& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(u(rng));
  return BasicTensor<T>(std::move(shape), std::move(v));
}

// Inclusive interval of affected rows (or cols) pushed through one layer.
struct Span {
  int lo, hi;
};

Span through_conv(Span s, int k, int stride, int size_out) {
  const int pad = k / 2;
  const int lo = static_cast<int>(std::ceil(static_cast<double>(s.lo - (k - 1) + pad) / stride));
  const int hi = static_cast<int>(std::floor(static_cast<double>(s.hi + pad) / stride));
  return {std::max(lo, 0), std::min(hi, size_out - 1)};
}

// Analytic footprint of one input pixel on every layer output (square images).
std::vector<Span> footprint(const ModelGraph& g, const std::vector<int>& sizes, int pixel) {
  std::vector<Span> fp(g.layers.size());
  fp[0] = {pixel, pixel};
  for (std::size_t l = 1; l < g.layers.size(); ++l) {
    const Layer& L = g.layers[l];
    const Span in = fp[L.inputs[0]];
    switch (L.kind) {
      case LayerKind::kConv: {
        const ConvSpec& c = g.convs[L.conv];
        fp[l] = through_conv(in, c.kernel, c.stride, sizes[l]);
        break;
      }
      case LayerKind::kRelu: fp[l] = in; break;
      case LayerKind::kPool: fp[l] = {in.lo / 2, std::min(in.hi / 2, sizes[l] - 1)}; break;
      case LayerKind::kUpsample: fp[l] = {2 * in.lo, 2 * in.hi + 1}; break;
      case LayerKind::kAdd: {
        const Span other = fp[L.inputs[1]];
        fp[l] = {std::min(in.lo, other.lo), std::max(in.hi, other.hi)};
        break;
      }
      case LayerKind::kInput: break;
    }
  }
  return fp;
}

double bce(double x, double y) { return std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x))); }

// Exhaustive greedy-NMS oracle: keep i unless an earlier kept same-class box overlaps above the threshold.
std::vector<Detection> nms_oracle(const std::vector<Detection>& sorted, float thresh) {
  std::vector<char> kept(sorted.size(), 0);
  std::vector<Detection> out;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    bool suppressed = false;
    for (std::size_t j = 0; j < i; ++j)
      suppressed |= kept[j] && sorted[j].class_id == sorted[i].class_id &&
                    data::iou(sorted[i].box, sorted[j].box) > thresh;
    kept[i] = !suppressed;
    if (kept[i]) out.push_back(sorted[i]);
  }
  return out;
}

// 101-point AP straight from a PR curve: max precision at recall >= r.
double ap_oracle(const std::vector<double>& precision, const std::vector<double>& recall) {
  double sum = 0;
  for (int r = 0; r <= 100; ++r) {
    double best = 0;
    for (std::size_t i = 0; i < precision.size(); ++i)
      if (recall[i] >= r / 100.0 - 1e-12) best = std::max(best, precision[i]);
    sum += best;
  }
  return sum / 101;
}

// Perfect head outputs for a batch of ground truth on the given strides.
std::pair<std::vector<TensorD>, std::vector<TensorD>> perfect_outputs(const std::vector<int>& strides, int size,
                                                                      const std::vector<GroundTruth>& gt,
                                                                      int classes, const AssignmentConfig& acfg) {
  const auto assign = assign_targets(strides, size, size, gt, acfg);
  std::vector<TensorD> cls, box;
  const int n = static_cast<int>(gt.size());
  for (const auto& a : assign) {
    const int cells = a.height * a.width;
    std::vector<double> c(static_cast<std::size_t>(n) * classes * cells, -20.0);
    std::vector<double> b(static_cast<std::size_t>(n) * 4 * cells, 0.0);
    for (int img = 0; img < n; ++img)
      for (int cell = 0; cell < cells; ++cell) {
        const int obj = a.cell_object[img * cells + cell];
        if (obj < 0) continue;
        const auto& o = gt[img][obj];
        c[(static_cast<std::size_t>(img) * classes + o.class_id) * cells + cell] = 20.0;
        const double cx = (cell % a.width + 0.5) * a.stride, cy = (cell / a.width + 0.5) * a.stride;
        const double d[4] = {cx - o.box.x1, cy - o.box.y1, o.box.x2 - cx, o.box.y2 - cy};
        for (int q = 0; q < 4; ++q) b[(static_cast<std::size_t>(img) * 4 + q) * cells + cell] = d[q] / a.stride;
      }
    cls.emplace_back(Shape{n, classes, a.height, a.width}, c);
    box.emplace_back(Shape{n, 4, a.height, a.width}, b);
  }
  return {cls, box};
}

std::vector<Tensor> to_float(const std::vector<TensorD>& v) {
  std::vector<Tensor> out;
  for (const auto& t : v) out.push_back(t.cast<float>());
  return out;
}

}  // namespace

TEST_CASE("default parameter count matches a hand count") {
  const auto g = build_graph(ArchConfig{});
  // backbone 3x3: 3->16, 16->32, 32->64
  const std::size_t backbone = 16 * (3 * 9 + 1) + 32 * (16 * 9 + 1) + 64 * (32 * 9 + 1);
  // 1x1 laterals into 32 channels
  const std::size_t laterals = 32 * (64 + 1) + 32 * (32 + 1) + 32 * (16 + 1);
  const std::size_t smooth = 3 * 32 * (32 * 9 + 1);
  const std::size_t head = 2 * 32 * (32 * 9 + 1) + 2 * 4 * (32 + 1);
  CHECK(backbone + laterals + smooth + head == 73768);
  CHECK(g.parameter_count() == 73768);
  std::size_t closed = 0;
  for (const auto& c : g.convs)
    closed += static_cast<std::size_t>(c.out_channels) * (c.in_channels * c.kernel * c.kernel + 1);
  CHECK(g.parameter_count() == closed);
  g.validate();
}

TEST_CASE("initialization is reproducible per seed") {
  ArchConfig a;
  const auto m1 = build_model(a);
  const auto m2 = build_model(a);
  for (std::size_t i = 0; i < m1.params.weights.size(); ++i) {
    CHECK(m1.params.weights[i].vec() == m2.params.weights[i].vec());
    CHECK(m1.params.biases[i].vec() == m2.params.biases[i].vec());
  }
  a.seed = 2;
  CHECK(build_model(a).params.weights[0].vec() != m1.params.weights[0].vec());
}

TEST_CASE("invalid architecture is rejected") {
  ArchConfig a;
  a.backbone_widths = {16, 0, 64};
  CHECK_THROWS_AS(build_graph(a), std::invalid_argument);
  a = {};
  a.neck_channels = -1;
  CHECK_THROWS_AS(build_graph(a), std::invalid_argument);
  a = {};
  a.num_scales = 4;
  CHECK_THROWS_AS(build_graph(a), std::invalid_argument);
}

TEST_CASE("one-scale config has no top-down path") {
  ArchConfig a;
  a.num_scales = 1;
  const auto g = build_graph(a);
  REQUIRE(g.scales.size() == 1);
  for (const auto& l : g.layers) {
    CHECK(l.kind != LayerKind::kUpsample);
    CHECK(l.kind != LayerKind::kAdd);
  }
  // The single scale reads the deepest backbone stage.
  CHECK(g.scales[0].stride == 16);
}

TEST_CASE("neck features have image dims divided by the scale strides") {
  const auto m = build_model(ArchConfig{});
  std::mt19937 rng(1);
  const auto x = random_tensor<float>({2, 3, 64, 64}, rng, 0, 1);
  const auto out = forward(m.graph, m.params, x);
  REQUIRE(out.neck.size() == 3);
  const int strides[3] = {4, 8, 16};
  for (int s = 0; s < 3; ++s) {
    CHECK(m.graph.scales[s].stride == strides[s]);
    CHECK(out.neck[s].shape() == Shape{2, 32, 64 / strides[s], 64 / strides[s]});
    CHECK(out.cls[s].shape() == Shape{2, 4, 64 / strides[s], 64 / strides[s]});
    CHECK(out.box[s].shape() == Shape{2, 4, 64 / strides[s], 64 / strides[s]});
  }
  CHECK_THROWS_AS(forward(m.graph, m.params, random_tensor<float>({1, 1, 64, 64}, rng)), std::invalid_argument);
}

TEST_CASE("zero input with zeroed final convs gives zero logits") {
  auto m = build_model(ArchConfig{});
  for (const char* name : {"head.cls", "head.box"}) {
    const int c = m.graph.find_conv(name);
    m.params.weights[c] = Tensor::zeros(m.params.weights[c].shape());
    m.params.biases[c] = Tensor::zeros(m.params.biases[c].shape());
  }
  const auto out = forward(m.graph, m.params, Tensor::zeros({1, 3, 64, 64}));
  for (std::size_t s = 0; s < out.cls.size(); ++s) {
    for (float v : out.cls[s].vec()) REQUIRE(v == 0.0f);
    for (float v : out.box[s].vec()) REQUIRE(v == 0.0f);
  }
}

TEST_CASE("a single pixel change stays inside the analytic receptive field") {
  ArchConfig a;
  a.backbone_widths = {4, 6, 8};
  a.neck_channels = 4;
  a.head_convs = 1;
  auto m = build_model(a);
  // Positive biases keep most ReLUs active so the footprint is actually reached.
  for (auto& b : m.params.biases) b = Tensor::full(b.shape(), 0.3f);
  const auto m64 = m.params.cast<double>();
  std::mt19937 rng(3);
  const auto x = random_tensor<double>({1, 3, 64, 64}, rng, 0, 1);
  const auto base = forward(m.graph, m64, x);
  std::vector<int> sizes;
  for (const auto& t : base.layers) sizes.push_back(t.dim(2));
  int reached = 0;
  const int pixels[] = {0, 9, 21, 33, 40, 52, 63};
  for (int pixel : pixels) {
    auto v = x.vec();
    for (int c = 0; c < 3; ++c) v[(c * 64 + pixel) * 64 + pixel] *= 2;
    const auto moved = forward(m.graph, m64, TensorD(x.shape(), v));
    const auto fp = footprint(m.graph, sizes, pixel);
    std::vector<char> changed(base.layers.size(), 0);
    for (std::size_t l = 0; l < base.layers.size(); ++l) {
      const auto& b = base.layers[l];
      const auto& mv = moved.layers[l];
      const int ch = b.dim(1), h = b.dim(2), w = b.dim(3);
      for (int c = 0; c < ch; ++c)
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < w; ++j) {
            const std::size_t idx = (static_cast<std::size_t>(c) * h + i) * w + j;
            if (b[idx] == mv[idx]) continue;
            const bool in = i >= fp[l].lo && i <= fp[l].hi && j >= fp[l].lo && j <= fp[l].hi;
            REQUIRE_MESSAGE(in, "layer " << m.graph.layers[l].name << " cell " << i << "," << j);
            changed[l] = 1;
          }
    }
    reached += changed[m.graph.scales[0].cls_layer];
  }
  // Max pooling may absorb a perturbation; most probes must still reach the logits.
  CHECK(reached * 2 > static_cast<int>(std::size(pixels)));
}

TEST_CASE("detection loss with no objects is the all-negative BCE") {
  std::mt19937 rng(4);
  const std::vector<int> strides{4, 8};
  std::vector<TensorD> cls{random_tensor<double>({2, 3, 4, 4}, rng, -3, 3),
                           random_tensor<double>({2, 3, 2, 2}, rng, -3, 3)};
  std::vector<TensorD> box{random_tensor<double>({2, 4, 4, 4}, rng), random_tensor<double>({2, 4, 2, 2}, rng)};
  double sum = 0, count = 0;
  for (const auto& c : cls)
    for (double x : c.vec()) sum += bce(x, 0), count += 1;
  DetectionLossConfig cfg;
  cfg.cls_norm = ClsNormalization::kMean;
  CHECK(detection_loss(cls, box, strides, {{}, {}}, cfg).item() == doctest::Approx(sum / count).epsilon(1e-12));
  cfg.cls_norm = ClsNormalization::kPositives;
  CHECK(detection_loss(cls, box, strides, {{}, {}}, cfg).item() == doctest::Approx(sum).epsilon(1e-12));
}

TEST_CASE("saturated correct prediction has near-zero loss") {
  std::vector<GroundTruth> gt{{object(4, 6, 20, 22, 1), object(30, 28, 60, 62, 0)}, {object(10, 10, 50, 40, 2)}};
  const std::vector<int> strides{4, 8, 16};
  AssignmentConfig acfg;
  auto [cls, box] = perfect_outputs(strides, 64, gt, 3, acfg);
  for (auto norm : {ClsNormalization::kMean, ClsNormalization::kPositives}) {
    DetectionLossConfig cfg;
    cfg.cls_norm = norm;
    CHECK(detection_loss(cls, box, strides, gt, cfg).item() <= 1e-6);
  }
}

TEST_CASE("single object on one cell matches a hand computation") {
  // 16x16 image, stride 4: only cell (1,1) with center (6,6) lies inside the box.
  const std::vector<GroundTruth> gt{{object(5, 5, 9, 9, 1)}};
  std::vector<double> logits(2 * 16, 0.0);
  logits[1 * 16 + 5] = 2.0;
  const std::vector<TensorD> cls{TensorD({1, 2, 4, 4}, logits)};
  const std::vector<TensorD> box{TensorD::zeros({1, 4, 4, 4})};
  // targets (1,1,3,3)/4, predictions 0: smooth-L1 = 0.5*(2*0.0625 + 2*0.5625)
  const double expected = 31 * std::log(2.0) + std::log1p(std::exp(-2.0)) + 0.625 / 4;
  CHECK(detection_loss(cls, box, {4}, gt).item() == doctest::Approx(expected).epsilon(1e-12));
  DetectionLossConfig mean_cfg;
  mean_cfg.cls_norm = ClsNormalization::kMean;
  mean_cfg.box_weight = 2.0;
  const double expected_mean = (31 * std::log(2.0) + std::log1p(std::exp(-2.0))) / 32 + 2.0 * 0.625 / 4;
  CHECK(detection_loss(cls, box, {4}, gt, mean_cfg).item() == doctest::Approx(expected_mean).epsilon(1e-12));
}

TEST_CASE("detection loss gradient matches finite differences on a 16x16 instance") {
  std::mt19937 rng(5);
  const std::vector<GroundTruth> gt{{object(3, 2, 13, 11, 1)}};
  const std::vector<int> strides{4, 8};
  std::vector<TensorD> cls{random_tensor<double>({1, 3, 4, 4}, rng, -2, 2),
                           random_tensor<double>({1, 3, 2, 2}, rng, -2, 2)};
  std::vector<TensorD> box{random_tensor<double>({1, 4, 4, 4}, rng, 0, 3), random_tensor<double>({1, 4, 2, 2}, rng, 0, 3)};
  Tape<double> tape;
  std::vector<TensorD> wc, wb;
  for (auto& t : cls) wc.push_back(tape.watch(t));
  for (auto& t : box) wb.push_back(tape.watch(t));
  const auto grads = tape.backward(detection_loss(wc, wb, strides, gt));
  const double eps = 1e-5;
  double worst = 0;
  auto check_all = [&](std::vector<TensorD>& group, const std::vector<TensorD>& watched) {
    for (std::size_t s = 0; s < group.size(); ++s) {
      const auto g = grads.of(watched[s]);
      for (std::size_t i = 0; i < group[s].numel(); ++i) {
        const TensorD orig = group[s];
        auto v = orig.vec();
        v[i] += eps;
        group[s] = TensorD(orig.shape(), v);
        const double up = detection_loss(cls, box, strides, gt).item();
        v[i] -= 2 * eps;
        group[s] = TensorD(orig.shape(), v);
        const double down = detection_loss(cls, box, strides, gt).item();
        group[s] = orig;
        const double fd = (up - down) / (2 * eps);
        worst = std::max(worst, std::abs(fd - g[i]) / std::max(1e-3, std::abs(fd)));
      }
    }
  };
  check_all(cls, wc);
  check_all(box, wb);
  CHECK(worst < 1e-3);
}

TEST_CASE("detection loss is invariant to batch and object order") {
  std::mt19937 rng(6);
  std::vector<GroundTruth> gt{{object(4, 6, 20, 22, 1), object(30, 28, 60, 62, 0)}, {object(10, 10, 50, 40, 2)}};
  const std::vector<int> strides{4, 8, 16};
  std::vector<TensorD> cls, box;
  for (int s : strides) {
    cls.push_back(random_tensor<double>({2, 3, 64 / s, 64 / s}, rng));
    box.push_back(random_tensor<double>({2, 4, 64 / s, 64 / s}, rng, 0, 4));
  }
  const double base = detection_loss(cls, box, strides, gt).item();
  auto reordered = gt;
  std::swap(reordered[0][0], reordered[0][1]);
  CHECK(detection_loss(cls, box, strides, reordered).item() == doctest::Approx(base).epsilon(1e-12));

  auto swap_batch = [](const TensorD& t) {
    const std::size_t half = t.numel() / 2;
    std::vector<double> v(t.vec().begin() + static_cast<long>(half), t.vec().end());
    v.insert(v.end(), t.vec().begin(), t.vec().begin() + static_cast<long>(half));
    return TensorD(t.shape(), v);
  };
  std::vector<TensorD> cls2, box2;
  for (auto& t : cls) cls2.push_back(swap_batch(t));
  for (auto& t : box) box2.push_back(swap_batch(t));
  CHECK(detection_loss(cls2, box2, strides, {gt[1], gt[0]}).item() == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("decode: all negative gives nothing, one hot cell gives one box") {
  const std::vector<int> strides{4};
  std::vector<float> logits(2 * 16, -20.0f);
  CHECK(decode_detections({Tensor({1, 2, 4, 4}, logits)}, {Tensor::zeros({1, 4, 4, 4})}, strides)[0].empty());
  logits[1 * 16 + 6] = 3.0f;  // class 1, cell (1,2), center (10,6)
  std::vector<float> reg(4 * 16, 0.0f);
  const float d[4] = {1.0f, 0.5f, 0.25f, 0.75f};
  for (int q = 0; q < 4; ++q) reg[q * 16 + 6] = d[q];
  const auto dets = decode_detections({Tensor({1, 2, 4, 4}, logits)}, {Tensor({1, 4, 4, 4}, reg)}, strides);
  REQUIRE(dets[0].size() == 1);
  CHECK(dets[0][0].class_id == 1);
  CHECK(dets[0][0].box == data::Box{6, 4, 11, 9});
  CHECK(dets[0][0].score == doctest::Approx(1 / (1 + std::exp(-3.0))));
}

TEST_CASE("decode of perfect head targets recovers every box") {
  const std::vector<GroundTruth> gt{{object(4, 6, 20, 22, 1), object(30, 28, 60, 62, 0)}, {object(10, 10, 50, 40, 2)}};
  const std::vector<int> strides{4, 8, 16};
  const auto [cls, box] = perfect_outputs(strides, 64, gt, 3, AssignmentConfig{});
  const auto dets = decode_detections(to_float(cls), to_float(box), strides);
  for (std::size_t n = 0; n < gt.size(); ++n) {
    CHECK(dets[n].size() == gt[n].size());
    for (const auto& o : gt[n]) {
      bool found = false;
      for (const auto& d : dets[n])
        found |= d.class_id == o.class_id && std::abs(d.box.x1 - o.box.x1) <= 0.5f &&
                 std::abs(d.box.y1 - o.box.y1) <= 0.5f && std::abs(d.box.x2 - o.box.x2) <= 0.5f &&
                 std::abs(d.box.y2 - o.box.y2) <= 0.5f;
      CHECK(found);
    }
  }
  CHECK(evaluate_map(dets, gt, 3).map == doctest::Approx(1.0));
}

TEST_CASE("nms matches an exhaustive-pair oracle") {
  Detection a{{0, 0, 10, 10}, 0, 0.9f};
  Detection b{{0, 0, 10, 8}, 0, 0.8f};  // IoU 0.8 with a
  Detection c{{0, 0, 10, 8}, 1, 0.7f};
  CHECK(data::iou(a.box, b.box) == doctest::Approx(0.8));
  const auto kept = nms({a, b, c}, 0.5f);
  REQUIRE(kept.size() == 2);
  CHECK(kept[0].score == 0.9f);
  CHECK(kept[1].class_id == 1);

  std::mt19937 rng(7);
  std::uniform_real_distribution<float> u(0, 40), sz(4, 20);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Detection> cands;
    for (int i = 0; i < 30; ++i) {
      const float x = u(rng), y = u(rng);
      cands.push_back({{x, y, x + sz(rng), y + sz(rng)}, static_cast<int>(rng() % 2), 1.0f - i / 40.0f});
    }
    const auto got = nms(cands, 0.5f);
    const auto want = nms_oracle(cands, 0.5f);
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i].box == want[i].box);
  }
}

TEST_CASE("mAP: perfect, empty and hand PR curve") {
  const std::vector<GroundTruth> gt{{object(0, 0, 10, 10, 0), object(20, 20, 30, 30, 1)}};
  std::vector<std::vector<Detection>> perfect{{{gt[0][0].box, 0, 1.0f}, {gt[0][1].box, 1, 1.0f}}};
  CHECK(evaluate_map(perfect, gt, 2).map == 1.0);
  CHECK(evaluate_map({{}}, gt, 2).map == 0.0);
  CHECK_THROWS_AS(evaluate_map({{}}, {{}}, 2), std::invalid_argument);

  // Two GT of class 0, one correct detection and one false positive ranked below.
  const std::vector<GroundTruth> two{{object(0, 0, 10, 10, 0), object(20, 20, 30, 30, 0)}};
  std::vector<std::vector<Detection>> preds{{{{0, 0, 10, 10}, 0, 0.9f}, {{40, 40, 50, 50}, 0, 0.5f}}};
  const auto r = evaluate_map(preds, two, 2);
  CHECK(r.ap[0] == doctest::Approx(ap_oracle({1.0, 0.5}, {0.5, 0.5})));
  CHECK(r.ap[0] == doctest::Approx(51.0 / 101.0));
  CHECK(std::isnan(r.ap[1]));
  CHECK(r.map == r.ap[0]);
}

TEST_CASE("mAP is invariant under strictly monotone score transforms") {
  std::mt19937 rng(8);
  std::uniform_real_distribution<float> u(0, 50), sz(5, 14), s01(0.01f, 1.0f);
  std::vector<GroundTruth> gt(6);
  std::vector<std::vector<Detection>> preds(6);
  for (int n = 0; n < 6; ++n) {
    for (int k = 0; k < 3; ++k) {
      const float x = u(rng), y = u(rng);
      gt[n].push_back(object(x, y, x + sz(rng), y + sz(rng), static_cast<int>(rng() % 3)));
    }
    for (const auto& o : gt[n]) {
      preds[n].push_back({{o.box.x1 + 1, o.box.y1, o.box.x2 + 1, o.box.y2}, o.class_id, s01(rng)});
      preds[n].push_back({{o.box.x1 + 6, o.box.y1 + 6, o.box.x2 + 6, o.box.y2 + 6}, o.class_id, s01(rng)});
      preds[n].push_back({{u(rng), u(rng), 60, 60}, static_cast<int>(rng() % 3), s01(rng)});
    }
  }
  const double base = evaluate_map(preds, gt, 3).map;
  CHECK(base > 0.0);
  CHECK(base < 1.0);
  auto transformed = preds;
  for (auto& img : transformed)
    for (auto& d : img) d.score = std::ldexp(d.score, -3);
  CHECK(evaluate_map(transformed, gt, 3).map == base);
  // Rank transform: scores replaced by their rank among all predictions.
  std::vector<float> all;
  for (const auto& img : preds)
    for (const auto& d : img) all.push_back(d.score);
  std::sort(all.begin(), all.end());
  for (auto& img : transformed)
    for (auto& d : img) d.score = 0;
  for (std::size_t n = 0; n < preds.size(); ++n)
    for (std::size_t j = 0; j < preds[n].size(); ++j)
      transformed[n][j].score = static_cast<float>(std::lower_bound(all.begin(), all.end(), preds[n][j].score) -
                                                   all.begin() + 1);
  CHECK(evaluate_map(transformed, gt, 3).map == base);
}

TEST_CASE("assignment: scale ranges and smallest box wins") {
  const auto r = scale_ranges({4, 8, 16}, AssignmentConfig{3.0f});
  CHECK(r[0].lo == 0);
  CHECK(r[0].hi == 12);
  CHECK(r[1].lo == 12);
  CHECK(r[1].hi == 24);
  CHECK(std::isinf(r[2].hi));
  // Nested boxes at one scale: the inner one owns the shared cells.
  const std::vector<GroundTruth> gt{{object(0, 0, 16, 16, 0), object(4, 4, 12, 12, 1)}};
  const auto a = assign_targets({4}, 16, 16, gt, AssignmentConfig{100.0f});
  CHECK(a[0].cell_object[1 * 4 + 1] == 1);
  CHECK(a[0].cell_object[0] == 0);
  CHECK(a[0].objects.size() == 2);
}
