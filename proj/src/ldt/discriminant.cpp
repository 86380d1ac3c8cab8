#include "dprune/discriminant.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <stdexcept>

#include "dprune/ops.hpp"

namespace dprune::ldt {

CellRect project_box(const data::Box& box, int stride, int height, int width) {
  const double s = stride;
  CellRect r;
  r.j0 = std::clamp(static_cast<int>(std::floor(box.x1 / s)), 0, width - 1);
  r.i0 = std::clamp(static_cast<int>(std::floor(box.y1 / s)), 0, height - 1);
  r.j1 = std::clamp(static_cast<int>(std::ceil(box.x2 / s)) - 1, r.j0, width - 1);
  r.i1 = std::clamp(static_cast<int>(std::ceil(box.y2 / s)) - 1, r.i0, height - 1);
  return r;
}

template <typename T>
ObjectFeatureMatrix<T> object_feature_matrix(const BasicTensor<T>& neck, const std::vector<GroundTruth>& gt,
                                             const std::vector<std::pair<int, int>>& objects, int stride,
                                             int scale) {
  if (neck.rank() != 4) throw std::invalid_argument("object_feature_matrix: neck must be [N,C,H,W]");
  const int c = neck.dim(1), h = neck.dim(2), w = neck.dim(3);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const int rows = static_cast<int>(objects.size());
  std::vector<T> values(static_cast<std::size_t>(rows) * c);
  auto argmax = std::make_shared<std::vector<std::size_t>>(values.size());
  std::vector<int> argmax_cell(c);
  ObjectFeatureMatrix<T> out;
  out.scale = scale;
  for (int r = 0; r < rows; ++r) {
    const auto [n, k] = objects[r];
    if (n < 0 || n >= neck.dim(0) || k < 0 || k >= static_cast<int>(gt[n].size()))
      throw std::out_of_range("object_feature_matrix: object reference out of range");
    const CellRect rect = project_box(gt[n][k].box, stride, h, w);
    std::vector<int> cells;
    for (int i = rect.i0; i <= rect.i1; ++i)
      for (int j = rect.j0; j <= rect.j1; ++j) cells.push_back(i * w + j);
    const T* base = neck.data().data() + static_cast<std::size_t>(n) * c * plane;
    masked_max_kernel(base, c, h, w, cells, values.data() + static_cast<std::size_t>(r) * c, argmax_cell.data());
    for (int ch = 0; ch < c; ++ch)
      (*argmax)[static_cast<std::size_t>(r) * c + ch] = (static_cast<std::size_t>(n) * c + ch) * plane + argmax_cell[ch];
    out.labels.push_back(gt[n][k].class_id);
  }
  out.x = make_result<T>({neck}, {rows, c}, std::move(values),
                         [argmax](std::span<const T> g, std::span<std::span<T>> gin) {
                           for (std::size_t i = 0; i < g.size(); ++i) gin[0][(*argmax)[i]] += g[i];
                         });
  return out;
}

template <typename T>
BasicTensor<T> standardize_columns(const BasicTensor<T>& x, double eps) {
  if (x.rank() != 2 || x.dim(0) < 2) throw std::invalid_argument("standardize_columns: need a [N>=2, C] matrix");
  const int n = x.dim(0), c = x.dim(1);
  const auto v = x.data();
  auto mean = std::make_shared<std::vector<double>>(c, 0.0);
  auto inv = std::make_shared<std::vector<double>>(c, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) (*mean)[j] += v[i * c + j];
  for (int j = 0; j < c; ++j) (*mean)[j] /= n;
  std::vector<double> var(c, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) {
      const double d = v[i * c + j] - (*mean)[j];
      var[j] += d * d;
    }
  for (int j = 0; j < c; ++j) (*inv)[j] = 1.0 / std::sqrt(var[j] / (n - 1) + eps);
  std::vector<T> out(v.size());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) out[i * c + j] = static_cast<T>(v[i * c + j] * (*inv)[j]);
  return make_result<T>({x}, {n, c}, std::move(out), [x, mean, inv, n, c](std::span<const T> g, std::span<std::span<T>> gin) {
    // y = x / s, s = sqrt(var + eps): dx_j = g_j / s - (x_j - mean) / ((n-1) s^3) * sum_i g_i x_i
    const auto v = x.data();
    for (int j = 0; j < c; ++j) {
      double gx = 0;
      for (int i = 0; i < n; ++i) gx += static_cast<double>(g[i * c + j]) * v[i * c + j];
      const double s_inv = (*inv)[j];
      const double k = gx * s_inv * s_inv * s_inv / (n - 1);
      for (int i = 0; i < n; ++i)
        gin[0][i * c + j] += static_cast<T>(g[i * c + j] * s_inv - (v[i * c + j] - (*mean)[j]) * k);
    }
  });
}

std::vector<std::vector<std::pair<int, int>>> lda_objects(const std::vector<int>& strides, int image_height,
                                                          int image_width, const std::vector<GroundTruth>& gt,
                                                          const det::AssignmentConfig& assignment,
                                                          AssignmentMode mode) {
  std::vector<std::vector<std::pair<int, int>>> out(strides.size());
  if (mode == AssignmentMode::kAllScales) {
    for (auto& per_scale : out)
      for (std::size_t n = 0; n < gt.size(); ++n)
        for (std::size_t k = 0; k < gt[n].size(); ++k) per_scale.emplace_back(static_cast<int>(n), static_cast<int>(k));
    return out;
  }
  auto assign = det::assign_targets(strides, image_height, image_width, gt, assignment);
  for (std::size_t s = 0; s < strides.size(); ++s) out[s] = std::move(assign[s].objects);
  return out;
}

namespace {

// Shifted by the first row before taking the mean, so equal rows center to exact zeros.
MatrixD centered(const MatrixD& x) {
  MatrixD xc = x;
  if (x.rows() == 0) return xc;
  xc.rowwise() -= VectorD(x.row(0)).transpose();
  xc.rowwise() -= VectorD(xc.colwise().mean()).transpose();
  return xc;
}

template <typename T>
MatrixD rows_to_matrix(const BasicTensor<T>& x) {
  return to_matrix(x);
}

template <typename T>
std::vector<T> matrix_values(const MatrixD& m) {
  std::vector<T> v(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) v[i * m.cols() + j] = static_cast<T>(m(i, j));
  return v;
}

template <typename T>
MatrixD grad_matrix(std::span<const T> g, int rows, int cols) {
  MatrixD m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = static_cast<double>(g[i * cols + j]);
  return m;
}

template <typename T>
void add_matrix(std::span<T> dst, const MatrixD& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) dst[i * m.cols() + j] += static_cast<T>(m(i, j));
}

template <typename T>
BasicTensor<T> total_scatter(const BasicTensor<T>& x) {
  const int n = x.dim(0), c = x.dim(1);
  auto xc = std::make_shared<MatrixD>(centered(rows_to_matrix(x)));
  const double inv = 1.0 / (n - 1);
  const MatrixD st = (xc->transpose() * *xc) * inv;
  return make_result<T>({x}, {c, c}, matrix_values<T>(st), [xc, inv, c](std::span<const T> g, std::span<std::span<T>> gin) {
    const MatrixD gm = grad_matrix(g, c, c);
    add_matrix(gin[0], MatrixD(*xc * (gm + gm.transpose()) * inv));
  });
}

struct ClassBlock {
  std::vector<int> rows;
  double weight = 0;
};

template <typename T>
BasicTensor<T> within_scatter(const BasicTensor<T>& x, const std::vector<int>& labels, WithinNormalization norm,
                              int* classes_out) {
  const int c = x.dim(1);
  const MatrixD xm = rows_to_matrix(x);
  std::map<int, ClassBlock> blocks;
  for (std::size_t r = 0; r < labels.size(); ++r) blocks[labels[r]].rows.push_back(static_cast<int>(r));
  const int classes = static_cast<int>(blocks.size());
  *classes_out = classes;
  auto centered_rows = std::make_shared<MatrixD>(MatrixD::Zero(xm.rows(), c));
  auto row_weight = std::make_shared<VectorD>(VectorD::Zero(xm.rows()));
  MatrixD sw = MatrixD::Zero(c, c);
  for (auto& [label, blk] : blocks) {
    const int ng = static_cast<int>(blk.rows.size());
    if (norm == WithinNormalization::kPerClass) {
      blk.weight = ng >= 2 ? 1.0 / (ng - 1) : 0.0;
    } else {
      blk.weight = 1.0;
    }
    blk.weight /= classes;
    MatrixD xg(ng, c);
    for (int i = 0; i < ng; ++i) xg.row(i) = xm.row(blk.rows[i]);
    const MatrixD xgc = centered(xg);
    sw += blk.weight * (xgc.transpose() * xgc);
    for (int i = 0; i < ng; ++i) {
      centered_rows->row(blk.rows[i]) = xgc.row(i);
      (*row_weight)(blk.rows[i]) = blk.weight;
    }
  }
  return make_result<T>({x}, {c, c}, matrix_values<T>(sw),
                        [centered_rows, row_weight, c](std::span<const T> g, std::span<std::span<T>> gin) {
                          const MatrixD gm = grad_matrix(g, c, c);
                          const MatrixD d = row_weight->asDiagonal() * (*centered_rows * (gm + gm.transpose()));
                          add_matrix(gin[0], d);
                        });
}

}  // namespace

template <typename T>
ScatterSet<T> scatter_matrices(const ObjectFeatureMatrix<T>& features, WithinNormalization norm) {
  ScatterSet<T> ss;
  ss.samples = features.rows();
  std::vector<int> distinct = features.labels;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  ss.classes = static_cast<int>(distinct.size());
  if (ss.samples < 2) {
    ss.status = ScatterStatus::kInsufficientSamples;
    return ss;
  }
  ss.total = total_scatter(features.x);
  int classes = 0;
  ss.within = within_scatter(features.x, features.labels, norm, &classes);
  ss.between = sub(ss.total, ss.within);
  ss.status = ss.classes >= 2 ? ScatterStatus::kOk : ScatterStatus::kInsufficientDiversity;
  return ss;
}

Discriminants solve_discriminants(const MatrixD& between, const MatrixD& within, double eps_reg, double shrink) {
  const Eigen::Index c = within.rows();
  if (within.cols() != c || between.rows() != c || between.cols() != c)
    throw std::invalid_argument("solve_discriminants: scatter matrices must be square and equal-sized");
  constexpr double kEps0 = 1e-12;
  Discriminants d;
  const double ridge = eps_reg * (within.trace() / static_cast<double>(c) + kEps0) +
                       shrink * (between.trace() + within.trace()) / static_cast<double>(c);
  d.within_reg = 0.5 * (within + within.transpose());
  d.within_reg.diagonal().array() += ridge;
  MatrixD l;
  try {
    l = cholesky_lower(d.within_reg);
  } catch (const NotPositiveDefinite& e) {
    throw std::runtime_error(std::string("solve_discriminants: regularized S_w is not positive definite; eps_reg too small (") +
                             e.what() + ")");
  }
  const MatrixD sb = 0.5 * (between + between.transpose());
  MatrixD m = solve_lower(l, solve_lower(l, sb).transpose());
  m = 0.5 * (m + m.transpose());
  EigenSolution inner = sym_eigh(m);
  d.solution.values = inner.values;
  d.solution.vectors = solve_lower_transpose(l, inner.vectors);
  return d;
}

int retained_count(const VectorD& eigenvalues, double phi) {
  if (eigenvalues.size() == 0) return 0;
  const double top = eigenvalues.maxCoeff();
  if (!(top > 0.0)) return 0;
  int k = 0;
  for (Eigen::Index i = 0; i < eigenvalues.size(); ++i)
    if (eigenvalues(i) >= phi * top) ++k;
  return k;
}

EigenGradients backward_eigen(const Discriminants& d, const VectorD& d_lambda, double eps_reg, double shrink) {
  const auto& v = d.solution.vectors;
  const auto& lam = d.solution.values;
  const Eigen::Index c = v.rows();
  EigenGradients g{MatrixD::Zero(c, c), MatrixD::Zero(c, c)};
  for (Eigen::Index k = 0; k < d_lambda.size(); ++k) {
    if (d_lambda(k) == 0.0) continue;
    const MatrixD outer = v.col(k) * v.col(k).transpose();
    g.d_between += d_lambda(k) * outer;
    g.d_within -= d_lambda(k) * lam(k) * outer;
  }
  // S_w_reg = S_w + (eps * (tr(S_w) / C + eps0) + shrink * tr(S_b + S_w) / C) * I
  const double tr = g.d_within.trace() / static_cast<double>(c);
  g.d_within.diagonal().array() += tr * (eps_reg + shrink);
  g.d_between.diagonal().array() += tr * shrink;
  return g;
}

namespace {

bool retained_separated(const VectorD& lam, int k) {
  if (k < 2) return true;
  const double scale = lam.head(k).cwiseAbs().maxCoeff();
  for (int i = 0; i + 1 < k; ++i)
    if (lam(i) - lam(i + 1) < 1e-6 * scale) return false;
  return true;
}

}  // namespace

template <typename T>
LdLoss<T> ld_loss(const std::vector<ScatterSet<T>>& scatters, double phi, double eps_reg, KNormalization norm,
                  double shrink) {
  LdLoss<T> res;
  res.k.assign(scatters.size(), 0);
  res.spectra.resize(scatters.size());
  res.degenerate.assign(scatters.size(), 0);

  struct Active {
    std::size_t scale;
    Discriminants d;
    int k;
  };
  auto active = std::make_shared<std::vector<Active>>();
  std::vector<BasicTensor<T>> inputs;
  for (std::size_t s = 0; s < scatters.size(); ++s) {
    if (!scatters[s].discriminable()) continue;
    Discriminants d = solve_discriminants(scatters[s], eps_reg, shrink);
    res.spectra[s] = d.solution.values;
    const int k = retained_count(d.solution.values, phi);
    if (k == 0) continue;
    res.k[s] = k;
    res.degenerate[s] = retained_separated(d.solution.values, k) ? 0 : 1;
    active->push_back(Active{s, std::move(d), k});
    inputs.push_back(scatters[s].between);
    inputs.push_back(scatters[s].within);
  }

  int k_total = 0;
  for (const auto& a : *active) k_total += a.k;
  double value = 0;
  auto weights = std::make_shared<std::vector<double>>();
  for (const auto& a : *active) {
    const double w = norm == KNormalization::kPerScale ? 1.0 / a.k : 1.0 / k_total;
    weights->push_back(w);
    value -= w * a.d.solution.values.head(a.k).sum();
  }
  if (active->empty()) {
    res.loss = BasicTensor<T>::scalar(T(0));
    return res;
  }
  std::vector<char> degenerate = res.degenerate;
  res.loss = make_result<T>(inputs, {}, {static_cast<T>(value)},
                            [active, weights, degenerate, eps_reg, shrink](std::span<const T> g, std::span<std::span<T>> gin) {
                              for (std::size_t a = 0; a < active->size(); ++a) {
                                const Active& act = (*active)[a];
                                if (degenerate[act.scale]) continue;
                                VectorD dl = VectorD::Zero(act.d.solution.values.size());
                                dl.head(act.k).setConstant(-(*weights)[a] * static_cast<double>(g[0]));
                                const EigenGradients eg = backward_eigen(act.d, dl, eps_reg, shrink);
                                if (!gin[2 * a].empty()) add_matrix(gin[2 * a], eg.d_between);
                                if (!gin[2 * a + 1].empty()) add_matrix(gin[2 * a + 1], eg.d_within);
                              }
                            });
  return res;
}

template <typename T>
BasicTensor<T> cov_penalty(const std::vector<ScatterSet<T>>& scatters, CovReduction reduction) {
  BasicTensor<T> total = BasicTensor<T>::scalar(T(0));
  for (const auto& ss : scatters) {
    if (ss.status == ScatterStatus::kInsufficientSamples) continue;
    const auto st = ss.total.data();
    const int c = ss.total.dim(0);
    if (c < 2) continue;
    const double unit = reduction == CovReduction::kMean ? 1.0 / (static_cast<double>(c) * (c - 1)) : 1.0;
    double acc = 0;
    for (int i = 0; i < c; ++i)
      for (int j = 0; j < c; ++j)
        if (i != j) acc += std::abs(static_cast<double>(st[i * c + j]));
    BasicTensor<T> term = make_result<T>({ss.total}, {}, {static_cast<T>(acc * unit)},
                                         [t = ss.total, c, unit](std::span<const T> g0, std::span<std::span<T>> gin) {
                                           const T gu = static_cast<T>(g0[0] * unit);
                                           const auto st = t.data();
                                           for (int i = 0; i < c; ++i)
                                             for (int j = 0; j < c; ++j) {
                                               if (i == j) continue;
                                               const T v = st[i * c + j];
                                               gin[0][i * c + j] += v > T(0) ? gu : (v < T(0) ? -gu : T(0));
                                             }
                                         });
    total = add(total, term);
  }
  return total;
}

template <typename T>
LdtLossParts<T> ldt_total_loss(const BasicTensor<T>& det_loss, const BasicTensor<T>& ld, const BasicTensor<T>& cov,
                               double alpha, double beta) {
  if (alpha < 0 || beta < 0) throw std::invalid_argument("ldt_total_loss: alpha and beta must be >= 0");
  LdtLossParts<T> parts;
  parts.det = det_loss;
  parts.ld = ld;
  parts.cov = cov;
  parts.total = add(add(det_loss, scale(ld, static_cast<T>(alpha))), scale(cov, static_cast<T>(beta)));
  return parts;
}

template <typename T>
LdtLossParts<T> ldt_objective(const std::vector<BasicTensor<T>>& neck, const std::vector<BasicTensor<T>>& cls,
                              const std::vector<BasicTensor<T>>& box, const std::vector<int>& strides,
                              const std::vector<GroundTruth>& gt, const det::DetectionLossConfig& det_cfg,
                              const LdtConfig& cfg) {
  BasicTensor<T> det_loss = det::detection_loss(cls, box, strides, gt, det_cfg);
  if (cfg.alpha == 0.0 && cfg.beta == 0.0) {
    auto zero = BasicTensor<T>::scalar(T(0));
    return ldt_total_loss(det_loss, zero, zero, 0.0, 0.0);
  }
  const int img_h = neck[0].dim(2) * strides[0], img_w = neck[0].dim(3) * strides[0];
  const auto objects = lda_objects(strides, img_h, img_w, gt, det_cfg.assignment, cfg.assignment);
  std::vector<ScatterSet<T>> scatters;
  for (std::size_t s = 0; s < neck.size(); ++s) {
    auto x = object_feature_matrix(neck[s], gt, objects[s], strides[s], static_cast<int>(s));
    if (cfg.standardize && x.rows() >= 2) x.x = standardize_columns(x.x);
    scatters.push_back(scatter_matrices(x, cfg.within_norm));
  }
  LdLoss<T> ld = ld_loss(scatters, cfg.phi, cfg.eps_reg, cfg.k_norm, cfg.shrink);
  BasicTensor<T> cov = cov_penalty(scatters, cfg.cov_reduction);
  LdtLossParts<T> parts = ldt_total_loss(det_loss, ld.loss, cov, cfg.alpha, cfg.beta);
  parts.k = std::move(ld.k);
  parts.spectra = std::move(ld.spectra);
  return parts;
}

ScaleDiagnostics diagnose_scale(const ObjectFeatureMatrix<double>& features, const LdtConfig& cfg, int num_classes) {
  ScaleDiagnostics diag;
  const ObjectFeatureMatrix<double> fixed{features.x.defined() ? features.x.detached() : features.x, features.labels,
                                          features.scale};
  const ScatterSet<double> ss = scatter_matrices(fixed, cfg.within_norm);
  diag.samples = ss.samples;
  diag.classes = ss.classes;
  if (!ss.discriminable()) return diag;
  const MatrixD st = to_matrix(ss.total);
  const double fro2 = st.squaredNorm();
  diag.offdiag_energy = fro2 - st.diagonal().squaredNorm();
  diag.offdiag_ratio = fro2 > 0 ? diag.offdiag_energy / fro2 : 0.0;
  const Discriminants d = solve_discriminants(ss, cfg.eps_reg, cfg.shrink);
  diag.spectrum = d.solution.values;
  diag.k = retained_count(d.solution.values, cfg.phi);
  double pos = 0, top = 0;
  const int top_n = std::max(1, num_classes - 1);
  for (Eigen::Index i = 0; i < diag.spectrum.size(); ++i) {
    const double v = std::max(diag.spectrum(i), 0.0);
    pos += v;
    if (i < top_n) top += v;
  }
  diag.top_mass = pos > 0 ? top / pos : 0.0;
  double align = 0;
  for (int k = 0; k < diag.k; ++k) {
    const VectorD u = d.solution.vectors.col(k).normalized();
    align += u.cwiseAbs().maxCoeff();
  }
  diag.alignment = diag.k > 0 ? align / diag.k : 0.0;
  diag.valid = true;
  return diag;
}

#define DPRUNE_INSTANTIATE_LDT(T)                                                                                  \
  template ObjectFeatureMatrix<T> object_feature_matrix<T>(const BasicTensor<T>&, const std::vector<GroundTruth>&, \
                                                           const std::vector<std::pair<int, int>>&, int, int);     \
  template BasicTensor<T> standardize_columns<T>(const BasicTensor<T>&, double);                                   \
  template ScatterSet<T> scatter_matrices<T>(const ObjectFeatureMatrix<T>&, WithinNormalization);                  \
  template LdLoss<T> ld_loss<T>(const std::vector<ScatterSet<T>>&, double, double, KNormalization, double);                \
  template BasicTensor<T> cov_penalty<T>(const std::vector<ScatterSet<T>>&, CovReduction);                                     \
  template LdtLossParts<T> ldt_total_loss<T>(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,  \
                                             double, double);                                                      \
  template LdtLossParts<T> ldt_objective<T>(const std::vector<BasicTensor<T>>&, const std::vector<BasicTensor<T>>&, \
                                            const std::vector<BasicTensor<T>>&, const std::vector<int>&,           \
                                            const std::vector<GroundTruth>&, const det::DetectionLossConfig&,      \
                                            const LdtConfig&);

DPRUNE_INSTANTIATE_LDT(float)
DPRUNE_INSTANTIATE_LDT(double)

}  // namespace dprune::ldt
