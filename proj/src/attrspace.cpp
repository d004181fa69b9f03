#include "matattr/attrspace.hpp"

#include <json.hpp>

#include <algorithm>
#include <optional>
#include <sstream>

namespace matattr::attrspace {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {
constexpr double kPi = 3.14159265358979323846;
}

std::vector<double> KdeConfig::default_points() {
  std::vector<double> p;
  for (int i = 1; i <= 99; ++i) p.push_back(i / 100.0);
  return p;
}

void KdeConfig::validate() const {
  require(bandwidth > 0.0, ErrorKind::InvalidInput, "kde bandwidth must be positive");
  require(!points.empty(), ErrorKind::InvalidInput, "kde needs at least one sample point");
  for (double p : points)
    require(p > 0.0 && p < 1.0, ErrorKind::InvalidInput, "kde sample points must lie strictly inside (0,1)");
  require(beta_a > 0.0 && beta_b > 0.0, ErrorKind::InvalidInput, "beta parameters must be positive");
}

Vector KdeConfig::target() const {
  Vector t(static_cast<Index>(points.size()));
  for (std::size_t i = 0; i < points.size(); ++i) t(static_cast<Index>(i)) = beta_density(points[i], beta_a, beta_b);
  return t;
}

Matrix kde_gradient(double p, const Eigen::Ref<const Matrix>& values, double h) {
  require(values.size() > 0, ErrorKind::InvalidInput, "kde of an empty value set");
  const double norm = 1.0 / std::sqrt(2.0 * kPi * h * h) / static_cast<double>(values.size());
  const Eigen::ArrayXXd d = values.array() - p;
  return (-norm * (-d.square() / (2.0 * h * h)).exp() * d / (h * h)).matrix();
}

Matrix beta_kl_gradient(const Eigen::Ref<const Matrix>& values, const KdeConfig& cfg) {
  const Vector target = cfg.target();
  const double h = cfg.bandwidth;
  const double norm = 1.0 / std::sqrt(2.0 * kPi * h * h) / static_cast<double>(values.size());
  Eigen::ArrayXXd grad = Eigen::ArrayXXd::Zero(values.rows(), values.cols());
  for (std::size_t i = 0; i < cfg.points.size(); ++i) {
    const Eigen::ArrayXXd d = values.array() - cfg.points[i];
    const Eigen::ArrayXXd kern = norm * (-d.square() / (2.0 * h * h)).exp();
    const double q = kern.sum();
    // d/dv [-b ln q] = -(b/q) dq/dv, dq/dv = -kern * d / h^2
    grad += (target(static_cast<Index>(i)) / q) * kern * d / (h * h);
  }
  return grad.matrix();
}

Objective objective(const Matrix& A, const Matrix& D, const AttrSpaceConfig& cfg, const KdeConfig& kde_cfg) {
  Objective o;
  o.stress = stress(A, D);
  o.kl = cfg.weight != 0.0 ? beta_kl(A, kde_cfg) : 0.0;
  o.total = o.stress + cfg.weight * o.kl;
  return o;
}

Matrix random_feasible(Index rows, Index cols, Rng& rng, double lo, double hi) {
  Matrix m(rows, cols);
  for (Index c = 0; c < cols; ++c)
    for (Index r = 0; r < rows; ++r) m(r, c) = uniform(rng, lo, hi);
  return m;
}

OptimizeResult optimize_A(const perception::DistanceMatrix& D, const AttrSpaceConfig& cfg, const KdeConfig& kde_cfg) {
  require(cfg.num_attributes >= 1, ErrorKind::InvalidInput, "need at least one attribute");
  std::optional<OptimizeResult> best;
  for (int r = 0; r < std::max(1, cfg.restarts); ++r) {
    Rng rng(derive_seed(cfg.seed, 0xA77 + static_cast<std::uint64_t>(r)));
    OptimizeResult res = optimize_A(D, random_feasible(D.size(), cfg.num_attributes, rng, 0.25, 0.75), cfg, kde_cfg);
    if (!best || res.trace.final.total < best->trace.final.total) best = std::move(res);
  }
  return std::move(*best);
}

OptimizeResult optimize_A(const perception::DistanceMatrix& D, Matrix A, const AttrSpaceConfig& cfg,
                          const KdeConfig& kde_cfg) {
  kde_cfg.validate();
  require(D.d.rows() == D.d.cols(), ErrorKind::Dimension, "distance matrix must be square");
  require_dims(A.rows(), D.size(), "start matrix rows");
  require(cfg.weight >= 0.0, ErrorKind::InvalidInput, "w_A must be non-negative");
  A = A.cwiseMax(0.0).cwiseMin(1.0);

  auto value = [&](const Matrix& X) { return objective(X, D.d, cfg, kde_cfg); };
  auto gradient = [&](const Matrix& X) {
    Matrix g = stress_gradient(X, D.d);
    if (cfg.weight != 0.0) g += cfg.weight * beta_kl_gradient(X, kde_cfg);
    return g;
  };
  auto project = [](const Matrix& X) -> Matrix { return X.cwiseMax(0.0).cwiseMin(1.0); };

  OptimizeResult result;
  Objective f = value(A);
  if (!std::isfinite(f.total)) fail(ErrorKind::Numerical, "non-finite objective at iteration 0");
  result.trace.initial = f;
  result.trace.objective.push_back(f.total);

  Matrix g = gradient(A);
  double step = 1.0 / std::max(1.0, g.cwiseAbs().maxCoeff());
  constexpr double armijo = 1e-4;
  int it = 0;
  for (; it < cfg.max_iterations; ++it) {
    Matrix candidate;
    Objective fc;
    bool accepted = false;
    for (int bt = 0; bt < 60; ++bt) {
      candidate = project(A - step * g);
      fc = value(candidate);
      if (!std::isfinite(fc.total))
        fail(ErrorKind::Numerical, "non-finite objective at iteration " + std::to_string(it + 1));
      if (fc.total <= f.total + armijo * (g.array() * (candidate - A).array()).sum()) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      result.trace.converged = true;
      break;
    }
    const Matrix s = candidate - A;
    const Matrix g_new = gradient(candidate);
    const double improvement = f.total - fc.total;
    A = std::move(candidate);
    f = fc;
    result.trace.objective.push_back(f.total);
    const Matrix y = g_new - g;
    g = g_new;
    const double sy = (s.array() * y.array()).sum();
    const double ss = s.squaredNorm();
    // Barzilai-Borwein guess for the next trial step; Armijo keeps descent monotone.
    step = (sy > 0.0) ? std::clamp(ss / sy, 1e-8, 1e4) : std::min(step * 4.0, 1e4);
    if (s.cwiseAbs().maxCoeff() < cfg.tolerance || improvement <= cfg.tolerance * std::max(1.0, std::abs(f.total))) {
      // Confirm stationarity with the projected-gradient norm before stopping.
      const Matrix pg = project(A - g) - A;
      if (pg.cwiseAbs().maxCoeff() < 1e-7 || improvement <= 0.0) {
        result.trace.converged = true;
        ++it;
        break;
      }
    }
  }
  result.trace.iterations = it;
  result.trace.final = f;
  result.A.a = std::move(A);
  result.A.names = D.names;
  return result;
}

std::string a_csv(const CategoryAttributeMatrix& A) {
  std::string out;
  for (Index r = 0; r < A.a.rows(); ++r) {
    for (Index c = 0; c < A.a.cols(); ++c) out += (c ? "," : "") + format_double(A.a(r, c));
    out += "\n";
  }
  return out;
}

std::string a_sidecar(const CategoryAttributeMatrix& A, const AttrSpaceConfig& cfg, const KdeConfig& kde_cfg) {
  json j = {{"K", A.a.rows()},
            {"M", A.a.cols()},
            {"categories", A.names},
            {"config",
             {{"w_A", cfg.weight},
              {"max_iterations", cfg.max_iterations},
              {"tolerance", cfg.tolerance},
              {"seed", cfg.seed},
              {"restarts", cfg.restarts},
              {"bandwidth", kde_cfg.bandwidth},
              {"points", kde_cfg.points},
              {"beta_a", kde_cfg.beta_a},
              {"beta_b", kde_cfg.beta_b}}}};
  return j.dump(2) + "\n";
}

fs::path sidecar_path(const fs::path& csv_path) { return fs::path(csv_path.string() + ".json"); }

void save_A(const fs::path& csv_path, const CategoryAttributeMatrix& A, const AttrSpaceConfig& cfg,
            const KdeConfig& kde_cfg) {
  write_file_atomic(csv_path, a_csv(A));
  write_file_atomic(sidecar_path(csv_path), a_sidecar(A, cfg, kde_cfg));
}

CategoryAttributeMatrix load_A(const fs::path& csv_path) {
  std::istringstream in(read_file(csv_path));
  std::vector<std::vector<double>> rows;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (trim(line).empty()) continue;
    std::vector<double> row;
    for (const std::string& cell : split(trim(line), ',')) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        fail(ErrorKind::Parse, csv_path.string() + ":" + std::to_string(lineno) + ": bad number '" + cell + "'");
      }
    }
    if (!rows.empty() && row.size() != rows.front().size())
      fail(ErrorKind::Dimension, csv_path.string() + ":" + std::to_string(lineno) + ": ragged row");
    rows.push_back(std::move(row));
  }
  CategoryAttributeMatrix A;
  A.a.resize(static_cast<Index>(rows.size()), rows.empty() ? 0 : static_cast<Index>(rows.front().size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      const double v = rows[r][c];
      if (!(v >= 0.0 && v <= 1.0))
        fail(ErrorKind::InvalidInput, csv_path.string() + ": entry outside [0,1] at row " + std::to_string(r + 1));
      A.a(static_cast<Index>(r), static_cast<Index>(c)) = v;
    }
  const fs::path side = sidecar_path(csv_path);
  if (fs::exists(side)) {
    const json j = json::parse(read_file(side));
    A.names = j.at("categories").get<std::vector<std::string>>();
    require_dims(j.at("K").get<Index>(), A.a.rows(), "A rows vs sidecar K");
    require_dims(j.at("M").get<Index>(), A.a.cols(), "A cols vs sidecar M");
    require_dims(static_cast<Index>(A.names.size()), A.a.rows(), "sidecar category names");
  } else {
    for (Index k = 0; k < A.a.rows(); ++k) A.names.push_back("c" + std::to_string(k));
  }
  return A;
}

}  // namespace matattr::attrspace
