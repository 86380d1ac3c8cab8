#pragma once

#include <string>
#include <vector>

#include "dprune/detector.hpp"
#include "dprune/linalg.hpp"
#include "dprune/tensor.hpp"

namespace dprune::ldt {

using det::GroundTruth;

// Which objects enter the per-scale discriminant analysis.
enum class AssignmentMode { kDetector, kAllScales };
// How the LD loss normalizes retained eigenvalues.
enum class KNormalization { kPerScale, kGlobal };
// Within-class scatter weighting: per class by 1/(N_g - 1), or unweighted.
enum class WithinNormalization { kPerClass, kUnweighted };
// Reduction of |off-diagonal S_t| entries in the covariance penalty.
enum class CovReduction { kSum, kMean };

struct LdtConfig {
  double alpha = 5e-4;
  double beta = 7.5;
  double phi = 5e-3;
  double eps_reg = 1e-3;
  double shrink = 1.0;  // ridge on S_w in units of the mean diagonal of S_t
  bool standardize = false;  // scale object features to unit variance per channel
  CovReduction cov_reduction = CovReduction::kMean;
  AssignmentMode assignment = AssignmentMode::kDetector;
  KNormalization k_norm = KNormalization::kPerScale;
  WithinNormalization within_norm = WithinNormalization::kPerClass;
  bool operator==(const LdtConfig&) const = default;
};

// One row per object: per-channel max of the neck features over the
// object's box projected onto the scale's grid.
template <typename T>
struct ObjectFeatureMatrix {
  BasicTensor<T> x;  // [N_s, C]
  std::vector<int> labels;
  int scale = 0;
  int rows() const { return x.defined() && x.rank() == 2 ? x.dim(0) : 0; }
};

// Inclusive cell rectangle of a pixel box on a grid of the given stride,
// rounded outward and clamped so that at least one cell is covered.
struct CellRect {
  int i0, i1, j0, j1;
};
CellRect project_box(const data::Box& box, int stride, int height, int width);

template <typename T>
ObjectFeatureMatrix<T> object_feature_matrix(const BasicTensor<T>& neck, const std::vector<GroundTruth>& gt,
                                             const std::vector<std::pair<int, int>>& objects, int stride, int scale);

// Divides each column by sqrt(var + eps), var being the unbiased column
// variance. Differentiable; needs at least two rows.
template <typename T>
BasicTensor<T> standardize_columns(const BasicTensor<T>& x, double eps = 1e-5);

// Objects per scale under the configured assignment mode.
std::vector<std::vector<std::pair<int, int>>> lda_objects(const std::vector<int>& strides, int image_height,
                                                          int image_width, const std::vector<GroundTruth>& gt,
                                                          const det::AssignmentConfig& assignment,
                                                          AssignmentMode mode);

enum class ScatterStatus { kOk, kInsufficientDiversity, kInsufficientSamples };

template <typename T>
struct ScatterSet {
  BasicTensor<T> within;   // S_w
  BasicTensor<T> between;  // S_b = S_t - S_w
  BasicTensor<T> total;    // S_t
  int classes = 0;
  int samples = 0;
  ScatterStatus status = ScatterStatus::kInsufficientSamples;
  bool discriminable() const { return status == ScatterStatus::kOk; }
};

// S_t = Xc^T Xc / (N-1); S_w = (1/G) sum_g w_g Xc_g^T Xc_g; S_b = S_t - S_w.
// With N < 2 nothing is computed; with G < 2 the matrices are valid but the
// set is flagged as not discriminable.
template <typename T>
ScatterSet<T> scatter_matrices(const ObjectFeatureMatrix<T>& features,
                               WithinNormalization norm = WithinNormalization::kPerClass);

struct Discriminants {
  EigenSolution solution;  // eigenvectors S_w_reg-orthonormal
  MatrixD within_reg;
};

// Generalized problem S_b v = lambda S_w_reg v via Cholesky reduction, with
// S_w_reg = S_w + (eps_reg * tr(S_w)/C + shrink * tr(S_t)/C) * I.
Discriminants solve_discriminants(const MatrixD& between, const MatrixD& within, double eps_reg,
                                  double shrink = 0.0);

template <typename T>
Discriminants solve_discriminants(const ScatterSet<T>& ss, double eps_reg, double shrink = 0.0) {
  return solve_discriminants(to_matrix(ss.between), to_matrix(ss.within), eps_reg, shrink);
}

// Number of eigenvalues >= phi * max; zero when max <= 0.
int retained_count(const VectorD& eigenvalues, double phi);

// First-order eigenvalue perturbation: returns (dS_b, dS_w) for upstream
// eigenvalue gradients, including the path through the S_w regularizer.
struct EigenGradients {
  MatrixD d_between;
  MatrixD d_within;
};
EigenGradients backward_eigen(const Discriminants& d, const VectorD& d_lambda, double eps_reg, double shrink = 0.0);

template <typename T>
struct LdLoss {
  BasicTensor<T> loss;  // scalar
  std::vector<int> k;   // retained count per scale (0 = skipped)
  std::vector<VectorD> spectra;
  std::vector<char> degenerate;  // retained eigenvalues too close; no gradient
};

template <typename T>
LdLoss<T> ld_loss(const std::vector<ScatterSet<T>>& scatters, double phi, double eps_reg,
                  KNormalization norm = KNormalization::kPerScale, double shrink = 0.0);

// Sum over scales of the absolute off-diagonal entries of S_t (or of their
// per-scale mean).
template <typename T>
BasicTensor<T> cov_penalty(const std::vector<ScatterSet<T>>& scatters, CovReduction reduction = CovReduction::kSum);

template <typename T>
struct LdtLossParts {
  BasicTensor<T> det;
  BasicTensor<T> ld;
  BasicTensor<T> cov;
  BasicTensor<T> total;  // det + alpha * ld + beta * cov
  std::vector<int> k;
  std::vector<VectorD> spectra;
};

template <typename T>
LdtLossParts<T> ldt_total_loss(const BasicTensor<T>& det_loss, const BasicTensor<T>& ld, const BasicTensor<T>& cov,
                               double alpha, double beta);

// Full training objective for one batch of forward outputs.
template <typename T>
LdtLossParts<T> ldt_objective(const std::vector<BasicTensor<T>>& neck, const std::vector<BasicTensor<T>>& cls,
                              const std::vector<BasicTensor<T>>& box, const std::vector<int>& strides,
                              const std::vector<GroundTruth>& gt, const det::DetectionLossConfig& det_cfg,
                              const LdtConfig& cfg);

// Non-differentiable per-scale statistics over a (large) feature matrix.
struct ScaleDiagnostics {
  int samples = 0;
  int classes = 0;
  VectorD spectrum;
  int k = 0;
  double offdiag_energy = 0;  // sum of squared off-diagonal entries of S_t
  double offdiag_ratio = 0;   // offdiag_energy / ||S_t||_F^2
  double top_mass = 0;        // positive eigenvalue mass in the top (classes-1) entries
  double alignment = 0;       // mean max |cos| of retained eigenvectors with the standard basis
  bool valid = false;
};

ScaleDiagnostics diagnose_scale(const ObjectFeatureMatrix<double>& features, const LdtConfig& cfg,
                                int num_classes);

}  // namespace dprune::ldt
