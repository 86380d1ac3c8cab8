#include "dprune/pruner.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "dprune/ops.hpp"

namespace dprune::prune {

VectorD neck_discriminant_power(const EigenSolution& sol) {
  const Eigen::Index c = sol.vectors.rows();
  VectorD power = VectorD::Zero(c);
  for (Eigen::Index k = 0; k < sol.values.size(); ++k) {
    const double lam = std::max(sol.values(k), 0.0);
    if (lam == 0) continue;
    const double n2 = sol.vectors.col(k).squaredNorm();
    if (n2 == 0) continue;
    power += lam * sol.vectors.col(k).array().square().matrix() / n2;
  }
  return power;
}

std::vector<int> retained_channels(const VectorD& power, double phi) {
  std::vector<int> out;
  const double mx = power.size() ? power.maxCoeff() : 0.0;
  if (!(mx > 0)) return out;
  for (Eigen::Index c = 0; c < power.size(); ++c)
    if (power(c) >= phi * mx) out.push_back(static_cast<int>(c));
  return out;
}

BasicTensor<float> attention_mask(const GroundTruth& gt, int height, int width, int stride, double a, double b) {
  std::vector<float> m(static_cast<std::size_t>(height) * width, 0.0f);
  if (gt.empty()) return BasicTensor<float>({height, width}, std::move(m));
  const double s = stride;
  for (int i = 0; i < height; ++i) {
    const double cy = i + 0.5;
    for (int j = 0; j < width; ++j) {
      const double cx = j + 0.5;
      double best = 0;
      bool inside = false;
      for (const auto& o : gt) {
        const double x1 = o.box.x1 / s, x2 = o.box.x2 / s, y1 = o.box.y1 / s, y2 = o.box.y2 / s;
        if (cx >= x1 && cx <= x2 && cy >= y1 && cy <= y2) {
          inside = true;
          break;
        }
        const double dx = cx - 0.5 * (x1 + x2), dy = cy - 0.5 * (y1 + y2);
        const double d = std::max(dx * dx + dy * dy, 1.0);
        best = std::max(best, a * std::pow(d, -b));
      }
      m[static_cast<std::size_t>(i) * width + j] = inside ? 1.0f : static_cast<float>(best);
    }
  }
  return BasicTensor<float>({height, width}, std::move(m));
}

namespace {

std::vector<std::vector<int>> consumers(const det::ModelGraph& g) {
  std::vector<std::vector<int>> out(g.layers.size());
  for (std::size_t l = 0; l < g.layers.size(); ++l)
    for (int in : g.layers[l].inputs) out[in].push_back(static_cast<int>(l));
  return out;
}

bool contains(const std::vector<int>& v, int x) { return std::find(v.begin(), v.end(), x) != v.end(); }

}  // namespace

std::vector<int> default_protected(const det::ModelGraph& graph) {
  std::vector<int> out;
  for (std::size_t k = 0; k < graph.convs.size(); ++k)
    if (k == 0 || graph.convs[k].name.rfind("head.", 0) == 0) out.push_back(static_cast<int>(k));
  return out;
}

std::vector<TracedLayer> traced_layers(const det::ModelGraph& graph, const std::vector<int>& protect) {
  const auto cons = consumers(graph);
  std::vector<TracedLayer> out;
  for (std::size_t l = 0; l < graph.layers.size(); ++l) {
    const auto& layer = graph.layers[l];
    if (layer.kind != det::LayerKind::kConv || contains(protect, layer.conv)) continue;
    int at = static_cast<int>(l);
    if (cons[l].size() == 1 && graph.layers[cons[l][0]].kind == det::LayerKind::kRelu) at = cons[l][0];
    out.push_back({layer.conv, at, graph.layers[at].stride, graph.layers[at].channels});
  }
  return out;
}

NeckDiscriminants neck_discriminants(const det::Model& model, const std::vector<data::DetectionSample>& samples,
                                     const det::DetectionLossConfig& det_cfg, const ldt::LdtConfig& ldt_cfg,
                                     int batch_size) {
  const auto strides = det::scale_strides(model.graph);
  const std::size_t scales = strides.size();
  std::vector<std::vector<double>> rows(scales);
  std::vector<std::vector<int>> labels(scales);
  std::vector<int> channels(scales, 0);
  for (std::size_t first = 0; first < samples.size(); first += batch_size) {
    const std::size_t count = std::min<std::size_t>(batch_size, samples.size() - first);
    std::vector<GroundTruth> gt;
    for (std::size_t i = first; i < first + count; ++i) gt.push_back(samples[i].objects);
    const Tensor images = data::stack_images(samples, first, count);
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
  NeckDiscriminants nd;
  for (std::size_t s = 0; s < scales; ++s) {
    const int n = static_cast<int>(labels[s].size()), c = channels[s];
    VectorD power = VectorD::Zero(c);
    if (n >= 2) {
      TensorD x({n, c}, rows[s]);
      VectorD unscale = VectorD::Ones(c);
      if (ldt_cfg.standardize) {
        const MatrixD xm = to_matrix(x);
        const VectorD mu = xm.colwise().mean();
        for (int j = 0; j < c; ++j)
          unscale(j) = 1.0 / std::sqrt((xm.col(j).array() - mu(j)).square().sum() / (n - 1) + 1e-5);
        x = ldt::standardize_columns(x);
      }
      const auto ss = ldt::scatter_matrices(ldt::ObjectFeatureMatrix<double>{x, labels[s], static_cast<int>(s)},
                                            ldt_cfg.within_norm);
      if (ss.discriminable()) {
        auto d = ldt::solve_discriminants(ss, ldt_cfg.eps_reg, ldt_cfg.shrink);
        // Directions back in raw feature coordinates.
        d.solution.vectors = unscale.asDiagonal() * d.solution.vectors;
        power = neck_discriminant_power(d.solution);
      }
    }
    nd.retained.push_back(retained_channels(power, ldt_cfg.phi));
    nd.power.push_back(std::move(power));
  }
  return nd;
}

template <typename T>
BasicTensor<T> neck_objective(const std::vector<BasicTensor<T>>& neck, const NeckDiscriminants& nd) {
  if (neck.size() != nd.power.size()) throw std::invalid_argument("neck_objective: scale count mismatch");
  bool any = false;
  for (const auto& r : nd.retained) any = any || !r.empty();
  if (!any) throw std::runtime_error("channel_utility: no retained discriminant channels at any scale");
  double total = 0;
  std::vector<std::vector<T>> weight(neck.size());
  for (std::size_t s = 0; s < neck.size(); ++s) {
    const auto& f = neck[s];
    const int n = f.dim(0), c = f.dim(1), hw = f.dim(2) * f.dim(3);
    if (nd.power[s].size() != c) throw std::invalid_argument("neck_objective: channel count mismatch");
    weight[s].assign(c, T(0));
    for (int ch : nd.retained[s]) weight[s][ch] = static_cast<T>(nd.power[s](ch));
    for (int i = 0; i < n; ++i)
      for (int ch = 0; ch < c; ++ch) {
        if (weight[s][ch] == T(0)) continue;
        const T* p = f.data().data() + (static_cast<std::size_t>(i) * c + ch) * hw;
        double acc = 0;
        for (int k = 0; k < hw; ++k) acc += p[k];
        total += weight[s][ch] * acc;
      }
  }
  std::vector<BasicTensor<T>> inputs(neck.begin(), neck.end());
  std::vector<Shape> shapes;
  for (const auto& f : neck) shapes.push_back(f.shape());
  return make_result<T>(inputs, {}, {static_cast<T>(total)},
                        [weight, shapes](std::span<const T> g, std::span<std::span<T>> gin) {
                          for (std::size_t s = 0; s < gin.size(); ++s) {
                            if (gin[s].empty()) continue;
                            const int n = shapes[s][0], c = shapes[s][1], hw = shapes[s][2] * shapes[s][3];
                            for (int i = 0; i < n; ++i)
                              for (int ch = 0; ch < c; ++ch) {
                                const T w = g[0] * weight[s][ch];
                                T* p = gin[s].data() + (static_cast<std::size_t>(i) * c + ch) * hw;
                                for (int k = 0; k < hw; ++k) p[k] += w;
                              }
                          }
                        });
}

namespace {

// Per-channel mean over images and cells.
template <typename T>
std::vector<double> channel_mean(const BasicTensor<T>& t) {
  const int n = t.dim(0), c = t.dim(1), hw = t.dim(2) * t.dim(3);
  std::vector<double> out(c, 0.0);
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const T* p = t.data().data() + (static_cast<std::size_t>(i) * c + ch) * hw;
      double acc = 0;
      for (int k = 0; k < hw; ++k) acc += p[k];
      out[ch] += acc;
    }
  for (auto& v : out) v /= static_cast<double>(n) * hw;
  return out;
}

}  // namespace

template <typename T>
std::vector<std::vector<double>> channel_utility(const det::ModelGraph& graph, const det::Parameters<T>& params,
                                                 const BasicTensor<T>& images, const std::vector<GroundTruth>& gt,
                                                 const std::vector<TracedLayer>& traced, const NeckDiscriminants& nd,
                                                 const UtilityConfig& cfg) {
  Tape<T> tape;
  const BasicTensor<T> x = tape.watch(images);
  const auto fwd = det::forward(graph, params, x);
  BasicTensor<T> objective;
  if (cfg.source == UtilitySource::kNeck) {
    objective = neck_objective(fwd.neck, nd);
  } else {
    objective = det::detection_loss(fwd.cls, fwd.box, det::scale_strides(graph), gt, cfg.detection);
  }
  const auto grads = tape.backward(objective);
  std::vector<std::vector<double>> out;
  for (const auto& t : traced) out.push_back(channel_mean(grads.of(fwd.layers[t.layer])));
  return out;
}

template <typename T>
std::vector<std::vector<double>> signed_importance(const std::vector<BasicTensor<T>>& activations,
                                                   const std::vector<GroundTruth>& gt,
                                                   const std::vector<TracedLayer>& traced,
                                                   const std::vector<std::vector<double>>& utility,
                                                   const ImportanceConfig& cfg) {
  if (activations.size() != traced.size() || utility.size() != traced.size())
    throw std::invalid_argument("signed_importance: traced layer count mismatch");
  std::vector<std::vector<double>> out;
  for (std::size_t l = 0; l < traced.size(); ++l) {
    const auto& f = activations[l];
    const int n = f.dim(0), c = f.dim(1), h = f.dim(2), w = f.dim(3), hw = h * w;
    if (static_cast<int>(gt.size()) != n) throw std::invalid_argument("signed_importance: image count mismatch");
    if (static_cast<int>(utility[l].size()) != c) throw std::invalid_argument("signed_importance: channel mismatch");
    std::vector<double> acc(c, 0.0);
    for (int i = 0; i < n; ++i) {
      const BasicTensor<float> mask = cfg.location ? attention_mask(gt[i], h, w, traced[l].stride, cfg.a, cfg.b)
                                                   : BasicTensor<float>::full({h, w}, 1.0f);
      for (int ch = 0; ch < c; ++ch) {
        const T* p = f.data().data() + (static_cast<std::size_t>(i) * c + ch) * hw;
        double s = 0;
        for (int k = 0; k < hw; ++k) s += static_cast<double>(mask[k]) * p[k];
        acc[ch] += s;
      }
    }
    for (int ch = 0; ch < c; ++ch) acc[ch] *= utility[l][ch] / n;
    out.push_back(std::move(acc));
  }
  return out;
}

ImportanceTable channel_importance(const det::Model& model, const std::vector<data::DetectionSample>& samples,
                                   const TraceConfig& cfg) {
  if (samples.empty()) throw std::invalid_argument("channel_importance: no images");
  ImportanceTable table;
  table.layers = traced_layers(model.graph, default_protected(model.graph));
  NeckDiscriminants nd;
  if (cfg.utility.source == UtilitySource::kNeck)
    nd = neck_discriminants(model, samples, cfg.utility.detection, cfg.ldt, cfg.batch_size);
  const std::size_t nl = table.layers.size();
  // Per batch: utility and the per-channel masked activation sums.
  std::vector<std::vector<std::vector<double>>> batch_u, batch_a;
  std::vector<int> batch_n;
  for (std::size_t first = 0; first < samples.size(); first += cfg.batch_size) {
    const std::size_t count = std::min<std::size_t>(cfg.batch_size, samples.size() - first);
    std::vector<GroundTruth> gt;
    for (std::size_t i = first; i < first + count; ++i) gt.push_back(samples[i].objects);
    const Tensor images = data::stack_images(samples, first, count);
    Tape<float> tape;
    const Tensor x = tape.watch(images);
    const auto fwd = det::forward(model.graph, model.params, x);
    const Tensor objective =
        cfg.utility.source == UtilitySource::kNeck
            ? neck_objective(fwd.neck, nd)
            : det::detection_loss(fwd.cls, fwd.box, det::scale_strides(model.graph), gt, cfg.utility.detection);
    const auto grads = tape.backward(objective);
    std::vector<std::vector<double>> u;
    std::vector<Tensor> acts;
    for (const auto& t : table.layers) {
      u.push_back(channel_mean(grads.of(fwd.layers[t.layer])));
      acts.push_back(fwd.layers[t.layer].detached());
    }
    std::vector<std::vector<double>> ones;
    for (const auto& v : u) ones.emplace_back(v.size(), 1.0);
    batch_a.push_back(signed_importance(acts, gt, table.layers, ones, cfg.importance));
    batch_u.push_back(std::move(u));
    batch_n.push_back(static_cast<int>(count));
  }
  const double total = static_cast<double>(samples.size());
  table.images = static_cast<int>(samples.size());
  table.utility.resize(nl);
  table.signed_sum.resize(nl);
  table.importance.resize(nl);
  for (std::size_t l = 0; l < nl; ++l) {
    const std::size_t c = table.layers[l].channels;
    std::vector<double> u(c, 0.0), a(c, 0.0);
    for (std::size_t b = 0; b < batch_n.size(); ++b)
      for (std::size_t ch = 0; ch < c; ++ch) {
        u[ch] += batch_u[b][l][ch] * batch_n[b] / total;
        a[ch] += batch_a[b][l][ch] * batch_n[b] / total;
      }
    table.signed_sum[l].resize(c);
    table.importance[l].resize(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
      table.signed_sum[l][ch] = u[ch] * a[ch];
      table.importance[l][ch] = std::abs(table.signed_sum[l][ch]);
    }
    table.utility[l] = std::move(u);
  }
  for (std::size_t b = 0; b < batch_n.size(); ++b) {
    std::vector<std::vector<double>> imp(nl);
    for (std::size_t l = 0; l < nl; ++l)
      for (std::size_t ch = 0; ch < batch_u[b][l].size(); ++ch)
        imp[l].push_back(std::abs(batch_u[b][l][ch] * batch_a[b][l][ch]));
    table.batch_importance.push_back(std::move(imp));
  }
  return table;
}

// ---------------------------------------------------------------- coupling

namespace {

struct UnionFind {
  std::vector<int> parent;
  explicit UnionFind(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  void unite(int a, int b) {
    a = find(a), b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};

}  // namespace

CouplingGroups build_coupling_groups(const det::ModelGraph& graph, const std::vector<int>& protect) {
  const std::size_t nl = graph.layers.size();
  // Each layer starts as its own channel set; pass-through layers and adds
  // are merged with their inputs, shared convs with their other applications.
  UnionFind uf(nl);
  std::vector<int> first_app(graph.convs.size(), -1), first_input(graph.convs.size(), -1);
  for (std::size_t l = 0; l < nl; ++l) {
    const auto& layer = graph.layers[l];
    const int li = static_cast<int>(l);
    switch (layer.kind) {
      case det::LayerKind::kInput: break;
      case det::LayerKind::kRelu:
      case det::LayerKind::kPool:
      case det::LayerKind::kUpsample: uf.unite(li, layer.inputs.at(0)); break;
      case det::LayerKind::kAdd:
        for (int in : layer.inputs) {
          if (graph.layers[in].channels != layer.channels) {
            std::ostringstream msg;
            msg << "build_coupling_groups: channel mismatch at add '" << layer.name << "' (" << graph.layers[in].channels
                << " vs " << layer.channels << ")";
            throw std::invalid_argument(msg.str());
          }
          uf.unite(li, in);
        }
        break;
      case det::LayerKind::kConv: {
        const int k = layer.conv;
        if (first_app[k] < 0) {
          first_app[k] = li;
          first_input[k] = layer.inputs.at(0);
        } else {
          uf.unite(first_app[k], li);
          uf.unite(first_input[k], layer.inputs.at(0));
        }
        break;
      }
    }
  }
  CouplingGroups g;
  std::vector<int> root_space(nl, -1);
  g.space_of_layer.resize(nl);
  for (std::size_t l = 0; l < nl; ++l) {
    const int r = uf.find(static_cast<int>(l));
    if (root_space[r] < 0) {
      root_space[r] = g.spaces();
      g.space_channels.push_back(graph.layers[l].channels);
      g.space_convs.emplace_back();
      g.space_fixed.push_back(0);
      g.space_first_conv.push_back(std::numeric_limits<int>::max());
    }
    const int s = root_space[r];
    g.space_of_layer[l] = s;
    if (graph.layers[l].channels != g.space_channels[s])
      throw std::invalid_argument("build_coupling_groups: channel mismatch in coupled layer '" + graph.layers[l].name +
                                  "'");
    if (graph.layers[l].kind == det::LayerKind::kInput) g.space_fixed[s] = 1;
  }
  g.out_space.assign(graph.convs.size(), -1);
  g.in_space.assign(graph.convs.size(), -1);
  for (std::size_t k = 0; k < graph.convs.size(); ++k) {
    if (first_app[k] < 0) continue;
    const int s = g.space_of_layer[first_app[k]];
    g.out_space[k] = s;
    g.in_space[k] = g.space_of_layer[first_input[k]];
    g.space_convs[s].push_back(static_cast<int>(k));
    g.space_first_conv[s] = std::min(g.space_first_conv[s], static_cast<int>(k));
    if (contains(protect, static_cast<int>(k))) g.space_fixed[s] = 1;
  }
  return g;
}

PruneMask full_mask(const CouplingGroups& groups) {
  PruneMask m;
  for (int c : groups.space_channels) m.keep.emplace_back(c, 1);
  return m;
}

namespace {

void check_mask(const CouplingGroups& groups, const PruneMask& mask) {
  if (mask.keep.size() != groups.space_channels.size()) throw std::invalid_argument("prune mask: space count mismatch");
  for (int s = 0; s < groups.spaces(); ++s) {
    if (static_cast<int>(mask.keep[s].size()) != groups.space_channels[s])
      throw std::invalid_argument("prune mask: channel count mismatch in space " + std::to_string(s));
    const auto kept = std::count(mask.keep[s].begin(), mask.keep[s].end(), 1);
    if (kept == 0) throw std::invalid_argument("prune mask: space " + std::to_string(s) + " keeps no channel");
    if (groups.space_fixed[s] && kept != groups.space_channels[s])
      throw std::invalid_argument("prune mask: drops channels of protected space " + std::to_string(s));
  }
}

std::size_t count_params(const det::ModelGraph& graph, const CouplingGroups& groups, const std::vector<int>& kept) {
  std::size_t n = 0;
  for (std::size_t k = 0; k < graph.convs.size(); ++k) {
    const auto& c = graph.convs[k];
    const std::size_t out = groups.out_space[k] < 0 ? c.out_channels : kept[groups.out_space[k]];
    const std::size_t in = groups.in_space[k] < 0 ? c.in_channels : kept[groups.in_space[k]];
    n += out * (in * c.kernel * c.kernel + 1);
  }
  return n;
}

std::vector<int> kept_counts(const PruneMask& mask) {
  std::vector<int> kept;
  for (const auto& k : mask.keep) kept.push_back(static_cast<int>(std::count(k.begin(), k.end(), 1)));
  return kept;
}

}  // namespace

std::size_t masked_parameter_count(const det::ModelGraph& graph, const CouplingGroups& groups, const PruneMask& mask) {
  check_mask(groups, mask);
  return count_params(graph, groups, kept_counts(mask));
}

std::vector<std::vector<double>> group_scores(const CouplingGroups& groups, const ImportanceTable& table,
                                              bool use_signed) {
  std::vector<std::vector<double>> scores;
  for (int c : groups.space_channels) scores.emplace_back(c, 0.0);
  for (std::size_t l = 0; l < table.layers.size(); ++l) {
    const int s = groups.out_space.at(table.layers[l].conv);
    const auto& v = use_signed ? table.signed_sum[l] : table.importance[l];
    for (std::size_t ch = 0; ch < v.size(); ++ch) scores[s].at(ch) += v[ch];
  }
  return scores;
}

namespace {

std::string rate_message(double requested, double max_rate) {
  std::ostringstream msg;
  msg << "prune rate " << requested << " is infeasible; max achievable rate is " << max_rate;
  return msg.str();
}

}  // namespace

InfeasibleRate::InfeasibleRate(double requested, double max_rate)
    : std::runtime_error(rate_message(requested, max_rate)), max_rate_(max_rate) {}

PruneMask select_prune_mask(const det::ModelGraph& graph, const CouplingGroups& groups,
                            const std::vector<std::vector<double>>& scores, double rate) {
  if (!(rate >= 0 && rate < 1)) throw std::invalid_argument("select_prune_mask: rate must be in [0, 1)");
  if (scores.size() != groups.space_channels.size())
    throw std::invalid_argument("select_prune_mask: score table does not match the coupling groups");
  PruneMask mask = full_mask(groups);
  if (rate == 0) return mask;
  struct Candidate {
    double score;
    int first_conv, channel, space;
  };
  std::vector<Candidate> order;
  for (int s = 0; s < groups.spaces(); ++s) {
    if (groups.space_fixed[s] || groups.space_convs[s].empty()) continue;
    if (static_cast<int>(scores[s].size()) != groups.space_channels[s])
      throw std::invalid_argument("select_prune_mask: score count mismatch in space " + std::to_string(s));
    for (int c = 0; c < groups.space_channels[s]; ++c) order.push_back({scores[s][c], groups.space_first_conv[s], c, s});
  }
  std::sort(order.begin(), order.end(), [](const Candidate& x, const Candidate& y) {
    if (x.score != y.score) return x.score < y.score;
    if (x.first_conv != y.first_conv) return x.first_conv < y.first_conv;
    return x.channel < y.channel;
  });
  std::vector<int> kept = groups.space_channels;
  const double total = static_cast<double>(count_params(graph, groups, kept));
  double removed = 0;
  for (const auto& cand : order) {
    if (kept[cand.space] == 1) continue;
    mask.keep[cand.space][cand.channel] = 0;
    --kept[cand.space];
    removed = 1.0 - static_cast<double>(count_params(graph, groups, kept)) / total;
    if (removed >= rate) return mask;
  }
  throw InfeasibleRate(rate, removed);
}

det::Model apply_prune(const det::Model& model, const CouplingGroups& groups, const PruneMask& mask) {
  check_mask(groups, mask);
  const auto& g = model.graph;
  if (groups.space_of_layer.size() != g.layers.size() || groups.out_space.size() != g.convs.size())
    throw std::invalid_argument("apply_prune: coupling groups do not match the model");
  det::check_parameters(g, model.params);
  const auto kept = kept_counts(mask);
  auto indices = [&](int space) {
    std::vector<int> idx;
    for (int c = 0; c < groups.space_channels[space]; ++c)
      if (mask.keep[space][c]) idx.push_back(c);
    return idx;
  };
  det::Model out;
  out.graph = g;
  for (std::size_t l = 0; l < g.layers.size(); ++l) out.graph.layers[l].channels = kept[groups.space_of_layer[l]];
  for (std::size_t k = 0; k < g.convs.size(); ++k) {
    auto& spec = out.graph.convs[k];
    const auto& w = model.params.weights[k];
    const auto& b = model.params.biases[k];
    if (groups.out_space[k] < 0) {
      out.params.weights.push_back(w);
      out.params.biases.push_back(b);
      continue;
    }
    const auto rows = indices(groups.out_space[k]);
    const auto cols = indices(groups.in_space[k]);
    const int kk = spec.kernel * spec.kernel, cin = spec.in_channels;
    std::vector<float> wd, bd;
    wd.reserve(rows.size() * cols.size() * kk);
    for (int r : rows) {
      bd.push_back(b[r]);
      for (int c : cols) {
        const std::size_t base = (static_cast<std::size_t>(r) * cin + c) * kk;
        wd.insert(wd.end(), w.data().begin() + base, w.data().begin() + base + kk);
      }
    }
    spec.out_channels = static_cast<int>(rows.size());
    spec.in_channels = static_cast<int>(cols.size());
    out.params.weights.push_back(
        Tensor({spec.out_channels, spec.in_channels, spec.kernel, spec.kernel}, std::move(wd)));
    out.params.biases.push_back(Tensor({spec.out_channels}, std::move(bd)));
  }
  out.graph.validate();
  return out;
}

template <typename T>
det::LayerHook<T> zero_mask_hook(const det::ModelGraph& graph, const CouplingGroups& groups, const PruneMask& mask) {
  check_mask(groups, mask);
  std::vector<std::vector<char>> drop(graph.layers.size());
  for (std::size_t l = 0; l < graph.layers.size(); ++l) {
    if (graph.layers[l].kind != det::LayerKind::kConv) continue;
    const auto& keep = mask.keep[groups.space_of_layer[l]];
    if (std::count(keep.begin(), keep.end(), 0) == 0) continue;
    for (char k : keep) drop[l].push_back(!k);
  }
  return [drop](int layer, const BasicTensor<T>& out) {
    const auto& d = drop[layer];
    if (d.empty()) return out;
    const int n = out.dim(0), c = out.dim(1), hw = out.dim(2) * out.dim(3);
    std::vector<T> v = out.vec();
    for (int i = 0; i < n; ++i)
      for (int ch = 0; ch < c; ++ch)
        if (d[ch]) std::fill_n(v.begin() + (static_cast<std::size_t>(i) * c + ch) * hw, hw, T(0));
    const std::vector<char> dc = d;
    return make_result<T>({out}, out.shape(), std::move(v),
                          [dc, c, hw](std::span<const T> g, std::span<std::span<T>> gin) {
                            for (std::size_t i = 0; i < g.size(); ++i)
                              if (!dc[(i / hw) % c]) gin[0][i] += g[i];
                          });
  };
}

double cumulative_rate(double target, int round, int rounds) {
  if (rounds < 1 || round < 0 || round > rounds) throw std::invalid_argument("cumulative_rate: bad round index");
  if (!(target >= 0 && target < 1)) throw std::invalid_argument("cumulative_rate: target must be in [0, 1)");
  return 1.0 - std::pow(1.0 - target, static_cast<double>(round) / rounds);
}

#define DPRUNE_INSTANTIATE_PRUNE(T)                                                                                  \
  template BasicTensor<T> neck_objective(const std::vector<BasicTensor<T>>&, const NeckDiscriminants&);              \
  template std::vector<std::vector<double>> channel_utility(                                                         \
      const det::ModelGraph&, const det::Parameters<T>&, const BasicTensor<T>&, const std::vector<GroundTruth>&,     \
      const std::vector<TracedLayer>&, const NeckDiscriminants&, const UtilityConfig&);                              \
  template std::vector<std::vector<double>> signed_importance(                                                       \
      const std::vector<BasicTensor<T>>&, const std::vector<GroundTruth>&, const std::vector<TracedLayer>&,          \
      const std::vector<std::vector<double>>&, const ImportanceConfig&);                                             \
  template det::LayerHook<T> zero_mask_hook(const det::ModelGraph&, const CouplingGroups&, const PruneMask&);

DPRUNE_INSTANTIATE_PRUNE(float)
DPRUNE_INSTANTIATE_PRUNE(double)

}  // namespace dprune::prune
