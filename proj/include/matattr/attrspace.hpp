#pragma once

#include "matattr/core.hpp"
#include "matattr/perception.hpp"

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

namespace matattr::attrspace {

/// Kernel density / Beta target settings shared by every KL-of-KDE term.
struct KdeConfig {
  double bandwidth = 0.05;
  std::vector<double> points = default_points();
  double beta_a = 0.5;
  double beta_b = 0.5;

  /// 0.01, 0.02, ..., 0.99.
  static std::vector<double> default_points();
  void validate() const;
  /// Target density evaluated at each sample point.
  Vector target() const;
};

struct AttrSpaceConfig {
  double weight = 0.01;  // w_A
  int num_attributes = 30;
  int restarts = 4;  // independent seeded starts; the lowest objective wins
  int max_iterations = 3000;
  double tolerance = 1e-10;
  std::uint64_t seed = 0;
};

/// K x M category-attribute probabilities with category names.
struct CategoryAttributeMatrix {
  std::vector<std::string> names;
  Matrix a;

  Index categories() const { return a.rows(); }
  Index attributes() const { return a.cols(); }
};

inline double beta_density(double p, double a, double b) {
  const double log_beta = std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
  return std::exp((a - 1.0) * std::log(p) + (b - 1.0) * std::log1p(-p) - log_beta);
}

/// Sum over ordered category pairs of (||a_k - a_k'|| - D_kk')^2.
template <typename DerivedA, typename DerivedD>
typename DerivedA::Scalar stress(const Eigen::MatrixBase<DerivedA>& A, const Eigen::MatrixBase<DerivedD>& D) {
  using Scalar = typename DerivedA::Scalar;
  require_dims(D.rows(), A.rows(), "distance matrix rows");
  require_dims(D.cols(), A.rows(), "distance matrix cols");
  Scalar total(0);
  for (Index k = 0; k < A.rows(); ++k)
    for (Index j = 0; j < A.rows(); ++j) {
      const Scalar r = (A.row(k) - A.row(j)).norm() - Scalar(D(k, j));
      total += r * r;
    }
  return total;
}

/// Gradient of `stress` w.r.t. A. Coincident rows contribute a zero subgradient.
template <typename DerivedA, typename DerivedD>
Eigen::Matrix<typename DerivedA::Scalar, Eigen::Dynamic, Eigen::Dynamic> stress_gradient(
    const Eigen::MatrixBase<DerivedA>& A, const Eigen::MatrixBase<DerivedD>& D) {
  using Scalar = typename DerivedA::Scalar;
  require_dims(D.rows(), A.rows(), "distance matrix rows");
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> g =
      Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>::Zero(A.rows(), A.cols());
  for (Index k = 0; k < A.rows(); ++k)
    for (Index j = 0; j < A.rows(); ++j) {
      if (j == k) continue;
      const auto diff = (A.row(k) - A.row(j)).eval();
      const Scalar r = diff.norm();
      if (r <= Scalar(0)) continue;
      // (k,j) and (j,k) both depend on a_k.
      const Scalar coef = Scalar(2) * (r - Scalar(0.5) * Scalar(D(k, j) + D(j, k))) / r * Scalar(2);
      g.row(k) += coef * diff;
    }
  return g;
}

/// Gaussian kernel density estimate of `values` (all entries) at p.
template <typename Derived>
typename Derived::Scalar kde(double p, const Eigen::DenseBase<Derived>& values, double h) {
  using Scalar = typename Derived::Scalar;
  using std::exp;
  require(values.size() > 0, ErrorKind::InvalidInput, "kde of an empty value set");
  require(h > 0.0, ErrorKind::InvalidInput, "kde bandwidth must be positive");
  const Scalar norm = Scalar(1.0 / std::sqrt(2.0 * 3.14159265358979323846 * h * h));
  Scalar total(0);
  for (Index i = 0; i < values.size(); ++i) {
    const Scalar d = values.derived().reshaped()(i) - Scalar(p);
    total += norm * exp(-d * d / Scalar(2.0 * h * h));
  }
  return total / Scalar(values.size());
}

/// KL divergence from the Beta target to the KDE of `values`, discretized as
/// a plain sum over the sample points.
template <typename Derived>
typename Derived::Scalar beta_kl(const Eigen::DenseBase<Derived>& values, const KdeConfig& cfg) {
  using Scalar = typename Derived::Scalar;
  using std::log;
  const Vector target = cfg.target();
  Scalar total(0);
  for (std::size_t i = 0; i < cfg.points.size(); ++i) {
    const double b = target(static_cast<Index>(i));
    total += Scalar(b) * (Scalar(std::log(b)) - log(kde(cfg.points[i], values, cfg.bandwidth)));
  }
  return total;
}

/// Gradient of `beta_kl` with respect to each entry of `values` (same shape).
Matrix beta_kl_gradient(const Eigen::Ref<const Matrix>& values, const KdeConfig& cfg);

/// Derivative of kde(p, values, h) w.r.t. each value.
Matrix kde_gradient(double p, const Eigen::Ref<const Matrix>& values, double h);

struct Objective {
  double stress = 0.0;
  double kl = 0.0;
  double total = 0.0;
};

Objective objective(const Matrix& A, const Matrix& D, const AttrSpaceConfig& cfg, const KdeConfig& kde_cfg);

struct OptimizeTrace {
  std::vector<double> objective;  // per accepted iteration, starting with the initial value
  Objective initial;
  Objective final;
  int iterations = 0;
  bool converged = false;
};

struct OptimizeResult {
  CategoryAttributeMatrix A;
  OptimizeTrace trace;
};

/// Box-constrained minimization of stress + w_A * beta_kl by projected
/// gradient descent with Armijo backtracking and Barzilai-Borwein step guesses.
OptimizeResult optimize_A(const perception::DistanceMatrix& D, const AttrSpaceConfig& cfg,
                          const KdeConfig& kde_cfg = {});

/// Same, from an explicit starting point.
OptimizeResult optimize_A(const perception::DistanceMatrix& D, Matrix start, const AttrSpaceConfig& cfg,
                          const KdeConfig& kde_cfg = {});

Matrix random_feasible(Index rows, Index cols, Rng& rng, double lo = 0.0, double hi = 1.0);

// A matrix files: K x M CSV plus a JSON sidecar.
std::string a_csv(const CategoryAttributeMatrix& A);
std::string a_sidecar(const CategoryAttributeMatrix& A, const AttrSpaceConfig& cfg, const KdeConfig& kde_cfg);
void save_A(const std::filesystem::path& csv_path, const CategoryAttributeMatrix& A, const AttrSpaceConfig& cfg,
            const KdeConfig& kde_cfg);
/// Loads the CSV; names come from the sidecar `<csv>.json` when present.
CategoryAttributeMatrix load_A(const std::filesystem::path& csv_path);
std::filesystem::path sidecar_path(const std::filesystem::path& csv_path);

}  // namespace matattr::attrspace
