#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "doctest.h"
#include "dprune/ops.hpp"
#include "dprune/pruner.hpp"

using namespace dprune;
using namespace dprune::prune;
using det::LayerKind;

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

det::ArchConfig tiny_arch() {
  det::ArchConfig a;
  a.backbone_widths = {4, 6, 8};
  a.neck_channels = 5;
  a.head_convs = 1;
  a.num_classes = 3;
  return a;
}

// Small positive biases keep ReLUs mostly active so perturbations propagate.
det::Model lively_model(const det::ArchConfig& arch, std::uint64_t seed) {
  auto a = arch;
  a.seed = seed;
  auto m = det::build_model(a);
  std::mt19937 rng(static_cast<unsigned>(seed));
  for (auto& b : m.params.biases) b = random_tensor<float>(b.shape(), rng, 0.05, 0.3);
  return m;
}

NeckDiscriminants all_channels(const det::ModelGraph& g, std::mt19937& rng) {
  NeckDiscriminants nd;
  std::uniform_real_distribution<double> u(0.1, 2.0);
  for (const auto& s : g.scales) {
    const int c = g.layers[s.neck_layer].channels;
    VectorD p(c);
    std::vector<int> r;
    for (int i = 0; i < c; ++i) p(i) = u(rng), r.push_back(i);
    nd.power.push_back(p);
    nd.retained.push_back(r);
  }
  return nd;
}

template <typename T>
BasicTensor<T> add_to_channel(const BasicTensor<T>& t, int channel, T delta) {
  std::vector<T> v = t.vec();
  const int n = t.dim(0), c = t.dim(1), hw = t.dim(2) * t.dim(3);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < hw; ++k) v[(static_cast<std::size_t>(i) * c + channel) * hw + k] += delta;
  return BasicTensor<T>(t.shape(), v);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

std::vector<std::vector<double>> random_scores(const CouplingGroups& g, std::mt19937& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<std::vector<double>> s;
  for (int c : g.space_channels) {
    s.emplace_back(c);
    for (auto& v : s.back()) v = u(rng);
  }
  return s;
}

double realized_rate(const det::ModelGraph& g, const CouplingGroups& groups, const PruneMask& m) {
  return 1.0 - static_cast<double>(masked_parameter_count(g, groups, m)) / g.parameter_count();
}

det::ModelGraph chain_graph() {
  det::ModelGraph g;
  g.num_classes = 2;
  g.convs = {{"a", 3, 4, 3, 1}, {"b", 4, 5, 3, 1}, {"c", 5, 2, 1, 1}};
  g.layers = {{"input", LayerKind::kInput, {}, -1, 3, 1},
              {"a", LayerKind::kConv, {0}, 0, 4, 1},
              {"a.relu", LayerKind::kRelu, {1}, -1, 4, 1},
              {"b", LayerKind::kConv, {2}, 1, 5, 1},
              {"b.relu", LayerKind::kRelu, {3}, -1, 5, 1},
              {"c", LayerKind::kConv, {4}, 2, 2, 1}};
  return g;
}

}  // namespace

TEST_CASE("discriminant power: axis-aligned, non-positive and brute force") {
  EigenSolution axis{VectorD(3), MatrixD::Identity(3, 3)};
  axis.values << 3, 0.5, -1;
  const VectorD p = neck_discriminant_power(axis);
  CHECK(p(0) == 3.0);
  CHECK(p(1) == 0.5);
  CHECK(p(2) == 0.0);

  EigenSolution neg{VectorD::Constant(3, -0.2), MatrixD::Identity(3, 3)};
  neg.values(0) = 0;
  CHECK(neck_discriminant_power(neg).isZero());
  CHECK(retained_channels(neck_discriminant_power(neg), 5e-3).empty());

  std::mt19937 rng(1);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 20; ++trial) {
    EigenSolution s{VectorD(6), MatrixD(6, 6)};
    for (int i = 0; i < 6; ++i) {
      s.values(i) = g(rng);
      for (int j = 0; j < 6; ++j) s.vectors(i, j) = g(rng);
    }
    const VectorD got = neck_discriminant_power(s);
    for (int c = 0; c < 6; ++c) {
      double want = 0;
      for (int k = 0; k < 6; ++k) {
        double n2 = 0;
        for (int r = 0; r < 6; ++r) n2 += s.vectors(r, k) * s.vectors(r, k);
        want += std::max(s.values(k), 0.0) * s.vectors(c, k) * s.vectors(c, k) / n2;
      }
      CHECK(got(c) == doctest::Approx(want).epsilon(1e-12));
    }
  }
}

TEST_CASE("retained channels follow the phi * max rule") {
  VectorD p(4);
  p << 10, 0.04, 0.05, 3;
  CHECK(retained_channels(p, 5e-3) == std::vector<int>{0, 2, 3});
  CHECK(retained_channels(p, 0.5) == std::vector<int>{0});
}

TEST_CASE("attention mask point values") {
  const double a = 1.2, b = 0.062;
  // Inside a stride-projected box: exactly 1.
  const auto inside = attention_mask({object(8, 8, 24, 24, 0)}, 8, 8, 8, a, b);
  CHECK(inside[1 * 8 + 1] == 1.0f);
  CHECK(inside[2 * 8 + 2] == 1.0f);
  // Just outside a tiny box whose center is 0.32 cell^2 away: clamped to d = 1.
  const auto clamp = attention_mask({object(3.0f, 3.0f, 3.2f, 3.2f, 0)}, 8, 8, 1, a, b);
  CHECK(clamp[3 * 8 + 3] == doctest::Approx(1.2).epsilon(1e-6));
  // Squared distance 4 from the center of a tiny box.
  const auto d4 = attention_mask({object(3.4f, 3.4f, 3.6f, 3.6f, 0)}, 8, 8, 1, a, b);
  CHECK(std::abs(d4[3 * 8 + 5] - 1.1012) <= 1e-4);
  CHECK(d4[3 * 8 + 5] == doctest::Approx(1.2 * std::pow(4.0, -0.062)).epsilon(1e-6));
  // No objects: all zero.
  const auto none = attention_mask({}, 4, 4, 8, a, b);
  for (float v : none.vec()) CHECK(v == 0.0f);
}

TEST_CASE("attention mask takes the per-object maximum") {
  const double a = 1.2, b = 0.5;
  const det::GroundTruth gt{object(0.4f, 0.4f, 0.6f, 0.6f, 0), object(6.4f, 0.4f, 6.6f, 0.6f, 1)};
  const auto m = attention_mask(gt, 1, 8, 1, a, b);
  for (int j = 0; j < 8; ++j) {
    const double cx = j + 0.5;
    const double v0 = a * std::pow(std::max((cx - 0.5) * (cx - 0.5), 1.0), -b);
    const double v1 = a * std::pow(std::max((cx - 6.5) * (cx - 6.5), 1.0), -b);
    if (j == 0 || j == 6) continue;  // those centers are inside a box
    CHECK(m[j] == doctest::Approx(std::max(v0, v1)).epsilon(1e-6));
  }
  CHECK(m[0] == 1.0f);
  CHECK(m[6] == 1.0f);
}

TEST_CASE("traced layers skip protected convs and prefer a sole relu") {
  const auto g = det::build_graph(det::ArchConfig{});
  const auto prot = default_protected(g);
  CHECK(std::count_if(prot.begin(), prot.end(), [&](int k) { return g.convs[k].name.rfind("head.", 0) == 0; }) == 4);
  CHECK(std::find(prot.begin(), prot.end(), 0) != prot.end());
  const auto traced = traced_layers(g, prot);
  CHECK(traced.size() == g.convs.size() - prot.size());
  for (const auto& t : traced) {
    const auto& layer = g.layers[t.layer];
    const auto& conv = g.convs[t.conv];
    if (conv.name.find("lateral") != std::string::npos) {
      CHECK(layer.kind == LayerKind::kConv);
    } else {
      CHECK(layer.kind == LayerKind::kRelu);
    }
    CHECK(t.channels == conv.out_channels);
    CHECK(t.stride == layer.stride);
  }
}

TEST_CASE("utility matches a finite difference of T under a constant channel shift") {
  const auto m = lively_model(tiny_arch(), 3);
  const auto params = m.params.cast<double>();
  std::mt19937 rng(4);
  const auto images = random_tensor<double>({2, 3, 32, 32}, rng, 0, 1);
  const auto nd = all_channels(m.graph, rng);
  const auto traced = traced_layers(m.graph, default_protected(m.graph));
  const auto u = channel_utility(m.graph, params, images, {{}, {}}, traced, nd, UtilityConfig{});
  REQUIRE(u.size() == traced.size());
  const double eps = 1e-6;
  double worst = 0;
  for (std::size_t l = 0; l < traced.size(); ++l) {
    for (int c = 0; c < traced[l].channels; ++c) {
      auto objective = [&](double delta) {
        const det::LayerHook<double> hook = [&](int layer, const TensorD& out) {
          return layer == traced[l].layer ? add_to_channel(out, c, delta) : out;
        };
        return neck_objective(det::forward(m.graph, params, images, hook).neck, nd).item();
      };
      const auto probe = det::forward(m.graph, params, images).layers[traced[l].layer];
      const double cells = static_cast<double>(probe.dim(0)) * probe.dim(2) * probe.dim(3);
      const double fd = (objective(eps) - objective(-eps)) / (2 * eps) / cells;
      worst = std::max(worst, std::abs(fd - u[l][c]) / std::max(1e-6, std::abs(fd)));
    }
  }
  CHECK(worst <= 1e-3);
}

TEST_CASE("utility: disconnected channel is zero, duplicated channels are equal") {
  auto m = lively_model(tiny_arch(), 5);
  const int b1 = m.graph.find_conv("backbone.1.conv");
  const auto groups = build_coupling_groups(m.graph, default_protected(m.graph));
  // Channel 0 of backbone.1 loses every outgoing weight; channel 2 duplicates channel 1.
  auto w1 = m.params.weights[b1].vec();
  auto bias1 = m.params.biases[b1].vec();
  const int row = m.graph.convs[b1].in_channels * 9;
  for (int i = 0; i < row; ++i) w1[2 * row + i] = w1[row + i];
  bias1[2] = bias1[1];
  m.params.weights[b1] = Tensor(m.params.weights[b1].shape(), w1);
  m.params.biases[b1] = Tensor(m.params.biases[b1].shape(), bias1);
  for (std::size_t k = 0; k < m.graph.convs.size(); ++k) {
    if (groups.in_space[k] != groups.out_space[b1]) continue;
    const auto& spec = m.graph.convs[k];
    const int kk = spec.kernel * spec.kernel;
    auto w = m.params.weights[k].vec();
    for (int o = 0; o < spec.out_channels; ++o)
      for (int q = 0; q < kk; ++q) {
        w[(o * spec.in_channels + 0) * kk + q] = 0;
        w[(o * spec.in_channels + 2) * kk + q] = w[(o * spec.in_channels + 1) * kk + q];
      }
    m.params.weights[k] = Tensor(m.params.weights[k].shape(), w);
  }

  std::mt19937 rng(6);
  const auto images = random_tensor<float>({2, 3, 32, 32}, rng, 0, 1);
  const auto nd = all_channels(m.graph, rng);
  const auto traced = traced_layers(m.graph, default_protected(m.graph));
  const auto u = channel_utility(m.graph, m.params, images, {{}, {}}, traced, nd, UtilityConfig{});
  const auto at = std::find_if(traced.begin(), traced.end(), [&](const TracedLayer& t) { return t.conv == b1; });
  REQUIRE(at != traced.end());
  const auto& ub = u[at - traced.begin()];
  CHECK(ub[0] == 0.0);
  CHECK(ub[1] != 0.0);
  CHECK(ub[2] == doctest::Approx(ub[1]).epsilon(1e-6));
}

TEST_CASE("utility from the detection loss and an empty discriminant set") {
  const auto m = lively_model(tiny_arch(), 7);
  std::mt19937 rng(8);
  const auto images = random_tensor<float>({1, 3, 32, 32}, rng, 0, 1);
  const auto traced = traced_layers(m.graph, default_protected(m.graph));
  UtilityConfig det_cfg;
  det_cfg.source = UtilitySource::kDet;
  const auto u = channel_utility(m.graph, m.params, images, {{object(4, 4, 20, 20, 1)}}, traced, {}, det_cfg);
  CHECK(u.size() == traced.size());
  NeckDiscriminants empty;
  for (const auto& s : m.graph.scales) {
    empty.power.push_back(VectorD::Zero(m.graph.layers[s.neck_layer].channels));
    empty.retained.emplace_back();
  }
  CHECK_THROWS_WITH_AS(channel_utility(m.graph, m.params, images, {{}}, traced, empty, UtilityConfig{}),
                       "channel_utility: no retained discriminant channels at any scale", std::runtime_error);
}

TEST_CASE("importance: zero utility, empty masks and a direct 2x2 loop") {
  const std::vector<TracedLayer> traced{{0, 1, 8, 2}};
  const TensorD f({1, 2, 2, 2}, {0.5, -1.0, 2.0, 0.25, 1.5, 0.0, -0.5, 3.0});
  const det::GroundTruth box{object(0, 0, 8, 8, 0)};
  ImportanceConfig cfg;

  const auto zero = signed_importance<double>({f}, {box}, traced, {{0.0, 0.0}}, cfg);
  CHECK(zero[0] == std::vector<double>{0.0, 0.0});
  const auto nobox = signed_importance<double>({f}, {{}}, traced, {{1.0, -2.0}}, cfg);
  CHECK(nobox[0] == std::vector<double>{0.0, 0.0});

  const std::vector<double> u{0.7, -1.3};
  const auto got = signed_importance<double>({f}, {box}, traced, {u}, cfg);
  // Box projects to [0,1]x[0,1]; center (0.5,0.5) lies inside; others use a*max(d,1)^-b.
  const double centers[4][2] = {{0.5, 0.5}, {1.5, 0.5}, {0.5, 1.5}, {1.5, 1.5}};
  for (int c = 0; c < 2; ++c) {
    double want = 0;
    for (int k = 0; k < 4; ++k) {
      const double cx = centers[k][0], cy = centers[k][1];
      const bool in = cx >= 0 && cx <= 1 && cy >= 0 && cy <= 1;
      const double d = std::max((cx - 0.5) * (cx - 0.5) + (cy - 0.5) * (cy - 0.5), 1.0);
      const double mask = in ? 1.0 : static_cast<double>(static_cast<float>(cfg.a * std::pow(d, -cfg.b)));
      want += mask * u[c] * f[c * 4 + k];
    }
    CHECK(got[0][c] == doctest::Approx(want).epsilon(1e-12));
  }
  cfg.location = false;
  const auto flat = signed_importance<double>({f}, {box}, traced, {u}, cfg);
  CHECK(flat[0][0] == doctest::Approx(0.7 * (0.5 - 1.0 + 2.0 + 0.25)));
}

TEST_CASE("coupling: plain chain gives one space per conv output") {
  const auto g = chain_graph();
  const auto groups = build_coupling_groups(g, {});
  CHECK(groups.spaces() == 4);
  CHECK(groups.out_space[0] != groups.out_space[1]);
  CHECK(groups.in_space[1] == groups.out_space[0]);
  CHECK(groups.space_of_layer[2] == groups.out_space[0]);
  CHECK(groups.space_fixed[groups.space_of_layer[0]]);
}

TEST_CASE("coupling: an add merges its producers and rejects mismatched channels") {
  auto g = chain_graph();
  g.convs.push_back({"skip", 3, 5, 1, 1});
  g.layers.push_back({"skip", LayerKind::kConv, {0}, 3, 5, 1});
  g.layers.push_back({"merge", LayerKind::kAdd, {4, 6}, -1, 5, 1});
  const auto groups = build_coupling_groups(g, {});
  CHECK(groups.out_space[1] == groups.out_space[3]);
  CHECK(groups.space_of_layer[7] == groups.out_space[1]);
  CHECK(groups.space_convs[groups.out_space[1]] == std::vector<int>{1, 3});

  g.convs[3].out_channels = 4;
  g.layers[6].channels = 4;
  CHECK_THROWS_AS(build_coupling_groups(g, {}), std::invalid_argument);
}

TEST_CASE("coupling: zeroing a group perturbs exactly its analytic downstream set") {
  const auto m = lively_model(tiny_arch(), 9);
  const auto& g = m.graph;
  const auto groups = build_coupling_groups(g, default_protected(g));
  const auto params = m.params.cast<double>();
  std::mt19937 rng(10);
  const auto x = random_tensor<double>({1, 3, 32, 32}, rng, 0, 1);
  const auto base = det::forward(g, params, x);
  int checked = 0, reached = 0;
  for (int s = 0; s < groups.spaces(); ++s) {
    if (groups.space_fixed[s] || groups.space_convs[s].empty()) continue;
    std::vector<char> reach(g.layers.size(), 0);
    for (std::size_t l = 0; l < g.layers.size(); ++l) {
      if (groups.space_of_layer[l] == s) reach[l] = 1;
      for (int in : g.layers[l].inputs) reach[l] |= reach[in];
    }
    for (int c = 0; c < groups.space_channels[s]; ++c) {
      PruneMask mask = full_mask(groups);
      mask.keep[s][c] = 0;
      const auto out = det::forward(g, params, x, zero_mask_hook<double>(g, groups, mask));
      for (std::size_t l = 0; l < g.layers.size(); ++l) {
        const auto& a = base.layers[l];
        const auto& b = out.layers[l];
        const int ch = a.dim(1), hw = a.dim(2) * a.dim(3);
        std::vector<char> moved(ch, 0);
        for (std::size_t i = 0; i < a.numel(); ++i)
          if (a[i] != b[i]) moved[(i / hw) % ch] = 1;
        const bool any = std::count(moved.begin(), moved.end(), 1) > 0;
        if (!reach[l]) {
          REQUIRE_MESSAGE(!any, g.layers[l].name);
        } else if (groups.space_of_layer[l] == s) {
          for (int k = 0; k < ch; ++k)
            if (k != c) REQUIRE_MESSAGE(!moved[k], g.layers[l].name << " channel " << k);
        }
      }
      // Every producer of the group ends up all-zero on channel c.
      for (int conv : groups.space_convs[s])
        for (std::size_t l = 0; l < g.layers.size(); ++l) {
          if (g.layers[l].conv != conv || g.layers[l].kind != LayerKind::kConv) continue;
          const auto& t = out.layers[l];
          const int hw = t.dim(2) * t.dim(3);
          for (int k = 0; k < hw; ++k) REQUIRE(t[static_cast<std::size_t>(c) * hw + k] == 0.0);
        }
      // The logits see the change.
      bool logits_moved = false;
      for (std::size_t sc = 0; sc < out.cls.size(); ++sc)
        logits_moved |= out.cls[sc].vec() != base.cls[sc].vec();
      reached += logits_moved;
      ++checked;
    }
  }
  CHECK(checked > 10);
  // A channel whose ReLU is dead on this input cannot move anything.
  CHECK(reached * 10 >= checked * 8);
}

TEST_CASE("coupling on the default model: laterals and top-down path share one space") {
  const auto g = det::build_graph(det::ArchConfig{});
  const auto groups = build_coupling_groups(g, default_protected(g));
  const int lateral = groups.out_space[g.find_conv("neck.0.lateral")];
  CHECK(groups.out_space[g.find_conv("neck.1.lateral")] == lateral);
  CHECK(groups.out_space[g.find_conv("neck.2.lateral")] == lateral);
  // The shared head reads every smoothed output, so they couple too.
  const int smooth = groups.out_space[g.find_conv("neck.0.smooth")];
  CHECK(groups.out_space[g.find_conv("neck.2.smooth")] == smooth);
  CHECK(smooth != lateral);
  CHECK(groups.space_fixed[groups.out_space[0]]);
  CHECK(groups.space_fixed[groups.out_space[g.find_conv("head.conv0")]]);
}

TEST_CASE("selection: rate 0, the single lowest group, and tie order") {
  const auto g = det::build_graph(det::ArchConfig{});
  const auto groups = build_coupling_groups(g, default_protected(g));
  std::mt19937 rng(11);
  const auto scores = random_scores(groups, rng);
  CHECK(select_prune_mask(g, groups, scores, 0.0) == full_mask(groups));

  const auto one = select_prune_mask(g, groups, scores, 1e-9);
  int dropped = 0, ds = -1, dc = -1;
  for (int s = 0; s < groups.spaces(); ++s)
    for (int c = 0; c < groups.space_channels[s]; ++c)
      if (!one.keep[s][c]) ++dropped, ds = s, dc = c;
  REQUIRE(dropped == 1);
  for (int s = 0; s < groups.spaces(); ++s) {
    if (groups.space_fixed[s] || groups.space_convs[s].empty()) continue;
    for (double v : scores[s]) CHECK(scores[ds][dc] <= v);
  }

  std::vector<std::vector<double>> flat;
  for (int c : groups.space_channels) flat.emplace_back(c, 0.0);
  const auto tie = select_prune_mask(g, groups, flat, 1e-9);
  int first = -1;
  for (int s = 0; s < groups.spaces(); ++s)
    if (!groups.space_fixed[s] && !groups.space_convs[s].empty() &&
        (first < 0 || groups.space_first_conv[s] < groups.space_first_conv[first]))
      first = s;
  CHECK(tie.keep[first][0] == 0);
}

TEST_CASE("selection: rate 0.5 lands within 2% and keeps every space alive") {
  const auto g = det::build_graph(det::ArchConfig{});
  const auto groups = build_coupling_groups(g, default_protected(g));
  std::mt19937 rng(12);
  for (int trial = 0; trial < 5; ++trial) {
    const auto mask = select_prune_mask(g, groups, random_scores(groups, rng), 0.5);
    CHECK(std::abs(realized_rate(g, groups, mask) - 0.5) <= 0.02);
    for (int s = 0; s < groups.spaces(); ++s) {
      CHECK(std::count(mask.keep[s].begin(), mask.keep[s].end(), 1) >= 1);
      if (groups.space_fixed[s])
        CHECK(std::count(mask.keep[s].begin(), mask.keep[s].end(), 1) == groups.space_channels[s]);
    }
  }
}

TEST_CASE("selection is monotone in the rate and reports the max feasible rate") {
  const auto g = det::build_graph(det::ArchConfig{});
  const auto groups = build_coupling_groups(g, default_protected(g));
  std::mt19937 rng(13);
  const auto scores = random_scores(groups, rng);
  PruneMask prev = full_mask(groups);
  for (double rate : {0.05, 0.1, 0.2, 0.35, 0.5, 0.6}) {
    const auto mask = select_prune_mask(g, groups, scores, rate);
    for (int s = 0; s < groups.spaces(); ++s)
      for (int c = 0; c < groups.space_channels[s]; ++c)
        if (!prev.keep[s][c]) CHECK(!mask.keep[s][c]);
    prev = mask;
  }
  try {
    select_prune_mask(g, groups, scores, 0.99);
    FAIL("expected InfeasibleRate");
  } catch (const InfeasibleRate& e) {
    CHECK(e.max_rate() > 0.5);
    CHECK(e.max_rate() < 0.99);
    CHECK(std::string(e.what()).find("max achievable rate") != std::string::npos);
  }
}

TEST_CASE("apply_prune: all-keep is bit identical and counts match") {
  const auto m = det::build_model(det::ArchConfig{});
  const auto groups = build_coupling_groups(m.graph, default_protected(m.graph));
  const auto same = apply_prune(m, groups, full_mask(groups));
  std::mt19937 rng(14);
  const auto x = random_tensor<float>({2, 3, 64, 64}, rng, 0, 1);
  const auto a = det::forward(m.graph, m.params, x);
  const auto b = det::forward(same.graph, same.params, x);
  for (std::size_t s = 0; s < a.cls.size(); ++s) {
    CHECK(a.cls[s].vec() == b.cls[s].vec());
    CHECK(a.box[s].vec() == b.box[s].vec());
  }

  const auto mask = select_prune_mask(m.graph, groups, random_scores(groups, rng), 0.4);
  const auto pruned = apply_prune(m, groups, mask);
  std::size_t tensor_params = 0;
  for (std::size_t k = 0; k < pruned.params.weights.size(); ++k)
    tensor_params += pruned.params.weights[k].numel() + pruned.params.biases[k].numel();
  CHECK(pruned.graph.parameter_count() == masked_parameter_count(m.graph, groups, mask));
  CHECK(tensor_params == pruned.graph.parameter_count());
  CHECK(pruned.graph.macs(64, 64) < m.graph.macs(64, 64));
}

TEST_CASE("apply_prune equals zero-masked forward on random masks and inputs") {
  std::mt19937 rng(15);
  for (int trial = 0; trial < 4; ++trial) {
    auto arch = det::ArchConfig{};
    arch.seed = 100 + trial;
    const auto m = lively_model(arch, 100 + trial);
    const auto groups = build_coupling_groups(m.graph, default_protected(m.graph));
    PruneMask mask = full_mask(groups);
    for (int s = 0; s < groups.spaces(); ++s) {
      if (groups.space_fixed[s]) continue;
      for (auto& k : mask.keep[s]) k = rng() % 2;
      mask.keep[s][rng() % mask.keep[s].size()] = 1;
    }
    const auto pruned = apply_prune(m, groups, mask);
    const auto hook = zero_mask_hook<float>(m.graph, groups, mask);
    const auto x = random_tensor<float>({2, 3, 64, 64}, rng, 0, 1);
    const auto masked = det::forward(m.graph, m.params, x, hook);
    const auto small = det::forward(pruned.graph, pruned.params, x);
    for (std::size_t s = 0; s < masked.cls.size(); ++s) {
      CHECK(max_abs_diff(masked.cls[s], small.cls[s]) <= 1e-6);
      CHECK(max_abs_diff(masked.box[s], small.box[s]) <= 1e-6);
    }
  }
}

TEST_CASE("apply_prune rejects masks that do not fit") {
  const auto m = det::build_model(det::ArchConfig{});
  const auto groups = build_coupling_groups(m.graph, default_protected(m.graph));
  PruneMask bad = full_mask(groups);
  bad.keep.pop_back();
  CHECK_THROWS_AS(apply_prune(m, groups, bad), std::invalid_argument);
  PruneMask fixed = full_mask(groups);
  fixed.keep[groups.out_space[0]][0] = 0;
  CHECK_THROWS_AS(apply_prune(m, groups, fixed), std::invalid_argument);
  PruneMask empty = full_mask(groups);
  const int s = groups.out_space[m.graph.find_conv("backbone.1.conv")];
  std::fill(empty.keep[s].begin(), empty.keep[s].end(), 0);
  CHECK_THROWS_AS(apply_prune(m, groups, empty), std::invalid_argument);
}

TEST_CASE("two rounds of 25% compose to 43.75%") {
  CHECK(cumulative_rate(0.4375, 1, 2) == doctest::Approx(0.25));
  CHECK(cumulative_rate(0.4375, 2, 2) == doctest::Approx(0.4375));
  CHECK(cumulative_rate(0.3, 0, 3) == 0.0);

  auto m = det::build_model(det::ArchConfig{});
  const std::size_t p0 = m.graph.parameter_count();
  std::mt19937 rng(16);
  for (int round = 0; round < 2; ++round) {
    const auto groups = build_coupling_groups(m.graph, default_protected(m.graph));
    m = apply_prune(m, groups, select_prune_mask(m.graph, groups, random_scores(groups, rng), 0.25));
  }
  const double total = 1.0 - static_cast<double>(m.graph.parameter_count()) / p0;
  CHECK(std::abs(total - 0.4375) <= 0.02);
}

TEST_CASE("channel_importance on a model: finite, one entry per prunable channel, batch tables") {
  auto arch = tiny_arch();
  arch.num_classes = 4;
  const auto m = lively_model(arch, 17);
  data::DatasetConfig dc;
  dc.image_size = 32;
  dc.min_object_size = 8;
  dc.max_object_size = 16;
  dc.n_train = 12;
  const auto samples = data::generate_split(dc, data::Split::kTrain);
  TraceConfig cfg;
  cfg.batch_size = 5;
  cfg.ldt.shrink = 0.0;
  cfg.utility.source = UtilitySource::kDet;
  const auto table = channel_importance(m, samples, cfg);
  const auto traced = traced_layers(m.graph, default_protected(m.graph));
  REQUIRE(table.layers.size() == traced.size());
  CHECK(table.images == 12);
  CHECK(table.batch_importance.size() == 3);
  for (std::size_t l = 0; l < traced.size(); ++l) {
    CHECK(static_cast<int>(table.importance[l].size()) == traced[l].channels);
    for (std::size_t c = 0; c < table.importance[l].size(); ++c) {
      CHECK(std::isfinite(table.importance[l][c]));
      CHECK(table.importance[l][c] == std::abs(table.signed_sum[l][c]));
    }
  }
  const auto groups = build_coupling_groups(m.graph, default_protected(m.graph));
  const auto scores = group_scores(groups, table);
  double total = 0, table_total = 0;
  for (const auto& s : scores)
    for (double v : s) total += v;
  for (const auto& l : table.importance)
    for (double v : l) table_total += v;
  CHECK(total == doctest::Approx(table_total));
}
