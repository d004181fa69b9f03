#include "matattr/attrmodel.hpp"
#include "matattr/attrspace.hpp"
#include "matattr/logicreg.hpp"
#include "matattr/macheads.hpp"
#include "matattr/matclass.hpp"
#include "matattr/patchlab.hpp"
#include "matattr/perception.hpp"

#include "support/gradcheck.hpp"

#include <chrono>
#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>

using namespace matattr;
using matattr::testing::numeric_gradient;
using matattr::testing::random_categories;
using matattr::testing::random_matrix;
using matattr::testing::relative_error;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  std::string name;
  double budget_s;
  std::function<Outcome()> run;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const Eigen::Map<const Vector> X(x.data(), static_cast<Index>(x.size())), Y(y.data(), static_cast<Index>(y.size()));
  const Vector xc = X.array() - X.mean(), yc = Y.array() - Y.mean();
  return xc.dot(yc) / (xc.norm() * yc.norm());
}

double binomial_tail(int n, int k, double p) {
  double total = 0.0;
  for (int i = k; i <= n; ++i)
    total += std::exp(std::lgamma(n + 1.0) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0)) * std::pow(p, i) *
             std::pow(1.0 - p, n - i);
  return total;
}

perception::DistanceMatrix simulated_distances(const Matrix& pi, int n_tasks, std::uint64_t seed) {
  const auto sim = perception::simulate_annotations(pi, n_tasks, 10, seed);
  return perception::distance_matrix(
      perception::category_prototypes(perception::aggregate_all(sim.tasks, sim.records), static_cast<int>(pi.rows())));
}

// Gradient suite -------------------------------------------------------------

struct GradTally {
  int instances = 0;
  double worst = 0.0;
  void add(double err) {
    ++instances;
    worst = std::max(worst, err);
  }
};

attrmodel::TwoLayerModel interior_model(Index D, Index H, Index M, Rng& rng) {
  attrmodel::TwoLayerModel m;
  m.W1 = random_matrix(H, D, rng, -0.1, 0.1);
  m.b1 = random_matrix(H, 1, rng, 0.4, 0.6);
  m.W2 = random_matrix(M, H, rng, -0.1, 0.1);
  m.b2 = random_matrix(M, 1, rng, 0.3, 0.5);
  return m;
}

Matrix flatten(const attrmodel::TwoLayerModel& m) {
  Matrix v(m.W1.size() + m.b1.size() + m.W2.size() + m.b2.size(), 1);
  v << m.W1.reshaped(), m.b1, m.W2.reshaped(), m.b2;
  return v;
}

Matrix flatten(const attrmodel::Gradients& g) {
  Matrix v(g.W1.size() + g.b1.size() + g.W2.size() + g.b2.size(), 1);
  v << g.W1.reshaped(), g.b1, g.W2.reshaped(), g.b2;
  return v;
}

attrmodel::TwoLayerModel unflatten(const Matrix& v, const attrmodel::TwoLayerModel& shape) {
  attrmodel::TwoLayerModel m = shape;
  Index at = 0;
  auto take = [&](auto& dst) {
    dst.reshaped() = v.col(0).segment(at, dst.size());
    at += dst.size();
  };
  take(m.W1);
  take(m.b1);
  take(m.W2);
  take(m.b2);
  return m;
}

Matrix random_distances(Index K, Rng& rng) {
  const Matrix pts = random_matrix(K, 3, rng);
  return perception::pairwise_distances(pts);
}

// Category means of P, used to keep L1 residuals away from the kink.
bool near_kink(const Matrix& P, const std::vector<int>& c, const Matrix& A) {
  return ((A - attrmodel::category_means(P, c, A.rows())).array().abs() < 1e-3).any();
}

Outcome gradient_suite() {
  Rng rng(101);
  const attrspace::KdeConfig kcfg;
  std::map<std::string, GradTally> tally;
  const auto check = [&](const std::string& name, const Matrix& analytic, const Matrix& numeric) {
    tally[name].add(relative_error(analytic, numeric));
  };
  for (int trial = 0; trial < 25; ++trial) {
    const int K = 2 + static_cast<int>(uniform_index(rng, 4));
    const Index M = 1 + static_cast<Index>(uniform_index(rng, 4));
    const Index N = K + static_cast<Index>(uniform_index(rng, 20 - K + 1));
    const Matrix A = random_matrix(K, M, rng, 0.05, 0.95);
    const Matrix D = random_distances(K, rng);
    const Matrix P = random_matrix(N, M, rng, 0.05, 0.95);
    const auto c = random_categories(N, K, rng);

    check("stress", attrspace::stress_gradient(A, D),
          numeric_gradient([&](const Matrix& x) { return attrspace::stress(x, D); }, A));
    const double p = uniform(rng, 0.05, 0.95);
    check("kde", attrspace::kde_gradient(p, A, kcfg.bandwidth),
          numeric_gradient([&](const Matrix& x) { return attrspace::kde(p, x, kcfg.bandwidth); }, A));
    check("beta_kl", attrspace::beta_kl_gradient(A, kcfg),
          numeric_gradient([&](const Matrix& x) { return attrspace::beta_kl(x, kcfg); }, A));

    check("unary", attrmodel::loss_unary_gradient(P, c, A),
          numeric_gradient([&](const Matrix& x) { return attrmodel::loss_unary(x, c, A); }, P));
    check("distribution", attrmodel::loss_distribution_gradient(P, kcfg),
          numeric_gradient([&](const Matrix& x) { return attrmodel::loss_distribution(x, kcfg); }, P));
    check("separation", attrmodel::loss_separation_gradient(P, c, A),
          numeric_gradient([&](const Matrix& x) { return attrmodel::loss_separation(x, c, A); }, P));

    attrmodel::TrainConfig cfg;
    cfg.w1 = 0.3;
    cfg.w2 = 0.2;
    const Index Dim = 2 + static_cast<Index>(uniform_index(rng, 4));
    const attrmodel::TwoLayerModel model = interior_model(Dim, 4, M, rng);
    const Matrix X = random_matrix(N, Dim, rng);
    check("objective(params)", flatten(attrmodel::objective_gradient(model, X, c, A, cfg)),
          numeric_gradient([&](const Matrix& v) { return attrmodel::evaluate(unflatten(v, model), X, c, A, cfg).total; },
                           flatten(model)));

    if (!near_kink(P, c, A))
      check("mac_u", macheads::aux_loss_u_gradient(P, c, A),
            numeric_gradient([&](const Matrix& x) { return macheads::aux_loss_u(x, c, A); }, P));
    check("mac_d", macheads::aux_loss_d_gradient(P, kcfg),
          numeric_gradient([&](const Matrix& x) { return macheads::aux_loss_d(x, kcfg); }, P));
  }
  Outcome o{true, ""};
  for (const auto& [name, t] : tally) {
    o.pass = o.pass && t.instances >= 20 && t.worst < 1e-4;
    o.detail += fmt("%s%s n=%d max=%.1e", o.detail.empty() ? "" : ", ", name.c_str(), t.instances, t.worst);
  }
  return o;
}

// Perception -----------------------------------------------------------------

Matrix texture_similarity(int K, std::uint64_t seed) {
  return patchlab::similarity_from_latent(patchlab::default_synthetic_spec(K, 8, seed).latent);
}

Outcome distance_recovery() {
  const int K = 8;
  const Matrix pi = texture_similarity(K, 5);
  const auto D = simulated_distances(pi, 10000, 17);
  Matrix expected(K, K);
  for (int k = 0; k < K; ++k)
    for (int j = 0; j < K; ++j) expected(k, j) = binomial_tail(10, 5, pi(k, j));
  const Matrix oracle = perception::pairwise_distances(expected);
  std::vector<double> a, b;
  for (int k = 0; k < K; ++k)
    for (int j = k + 1; j < K; ++j) {
      a.push_back(D.d(k, j));
      b.push_back(oracle(k, j));
    }
  const double r = pearson(a, b);
  return {r >= 0.95, fmt("K=%d, off-diagonal Pearson r=%.4f", K, r)};
}

Outcome convergence() {
  const int K = 8;
  const auto sim = perception::simulate_annotations(texture_similarity(K, 5), 10000, 10, 23);
  const auto records = perception::aggregate_all(sim.tasks, sim.records);
  const auto curve = perception::convergence_curve(records, K, {100, 500, 1000, 5000, 10000});
  bool monotone = true;
  std::string detail;
  double at500 = 1.0;
  for (std::size_t i = 0; i < curve.size(); ++i) {
    detail += fmt("%s%d:%.4f", i ? " " : "", curve[i].first, curve[i].second);
    if (curve[i].first == 500) at500 = curve[i].second;
    if (i > 0 && curve[i].first <= 5000 && curve[i].second > curve[i - 1].second + 0.02) monotone = false;
  }
  return {at500 < 0.1 && monotone, detail};
}

// Embedding ------------------------------------------------------------------

Outcome embedding_quality() {
  const auto spec = patchlab::default_synthetic_spec(5, 4, 9);
  const auto D = simulated_distances(patchlab::similarity_from_latent(spec.latent), 2000, 9);
  attrspace::AttrSpaceConfig cfg;
  cfg.num_attributes = 3;
  cfg.seed = 1;
  const auto r = attrspace::optimize_A(D, cfg);
  Rng rng(31);
  double mean = 0.0;
  for (int i = 0; i < 20; ++i) mean += attrspace::stress(attrspace::random_feasible(5, 3, rng), D.d) / 20.0;
  const double s = attrspace::stress(r.A.a, D.d);
  const bool box = (r.A.a.array() >= 0.0).all() && (r.A.a.array() <= 1.0).all();
  const bool kl = r.trace.final.kl < r.trace.initial.kl;
  return {s <= 0.1 * mean && box && kl,
          fmt("stress %.4f vs random mean %.4f (ratio %.3f), box %s, KL %.3f -> %.3f", s, mean, s / mean,
              box ? "ok" : "violated", r.trace.initial.kl, r.trace.final.kl)};
}

// Mean matching --------------------------------------------------------------

Matrix descriptors(const patchlab::SyntheticSet& set, std::vector<int>& cats) {
  std::vector<patchlab::FeatureVector> f;
  for (const auto& p : set.patches) {
    f.push_back(patchlab::extract_features(p));
    cats.push_back(p.category);
  }
  return patchlab::stack(f);
}

Outcome mean_matching() {
  const auto spec = patchlab::default_synthetic_spec(3, 4, 11);
  const auto D = simulated_distances(patchlab::similarity_from_latent(spec.latent), 3000, 2);
  attrspace::AttrSpaceConfig acfg;
  acfg.num_attributes = 4;
  const Matrix A = attrspace::optimize_A(D, acfg).A.a;
  auto test_spec = spec;
  test_spec.seed += 99;
  std::vector<int> c, ct;
  const Matrix X = descriptors(patchlab::generate_synthetic(spec, 300, 32), c);
  const Matrix Xt = descriptors(patchlab::generate_synthetic(test_spec, 100, 32), ct);
  attrmodel::TrainConfig cfg;
  cfg.seed = 1;
  const auto model = attrmodel::train(X, c, A, cfg).model;
  const Matrix means = attrmodel::category_means(attrmodel::forward(model, Xt), ct, 3);
  const double linf = (means - A).cwiseAbs().maxCoeff();
  return {linf <= 0.05, fmt("held-out L-inf %.4f over 3x4 entries", linf)};
}

// Classification benchmark ---------------------------------------------------

struct Benchmark {
  double baseline = 0.0;
  std::map<int, double> hik;
  std::map<int, double> seconds;
};

Matrix region_rows(const Matrix& F, const std::vector<int>& cats, const std::vector<std::string>& regions,
                   std::vector<int>& labels, bool histogram) {
  std::map<std::string, std::vector<Index>> groups;
  for (std::size_t i = 0; i < regions.size(); ++i) groups[regions[i]].push_back(static_cast<Index>(i));
  std::vector<Vector> rows;
  labels.clear();
  for (const auto& [name, idx] : groups) {
    Matrix P(static_cast<Index>(idx.size()), F.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) P.row(static_cast<Index>(i)) = F.row(idx[i]);
    rows.push_back(histogram ? Vector(matclass::region_histogram(P, 10, name).values)
                             : Vector(P.colwise().mean().transpose()));
    labels.push_back(cats[static_cast<std::size_t>(idx[0])]);
  }
  Matrix H(static_cast<Index>(rows.size()), rows[0].size());
  for (std::size_t i = 0; i < rows.size(); ++i) H.row(static_cast<Index>(i)) = rows[i].transpose();
  return H;
}

class TextureBenchmark {
 public:
  const Benchmark& run(int M) {
    if (!prepared_) prepare();
    if (!result_.hik.count(M)) {
      const auto t0 = std::chrono::steady_clock::now();
      attrspace::AttrSpaceConfig acfg;
      acfg.num_attributes = M;
      acfg.seed = seed_;
      const Matrix A = attrspace::optimize_A(D_, acfg).A.a;
      attrmodel::TrainConfig cfg;
      cfg.seed = seed_;
      const auto model = attrmodel::train(X_, c_, A, cfg).model;
      std::vector<int> ltr, lte;
      const Matrix Htr = region_rows(attrmodel::forward(model, X_), c_, r_, ltr, true);
      const Matrix Hte = region_rows(attrmodel::forward(model, Xt_), ct_, rt_, lte, true);
      result_.hik[M] = matclass::fit_predict_material(Htr, ltr, Hte, lte).accuracy;
      result_.seconds[M] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    return result_;
  }

 private:
  void prepare() {
    auto spec = patchlab::default_synthetic_spec(8, 8, seed_);
    spec.nuisance = 0.3;
    D_ = simulated_distances(patchlab::similarity_from_latent(spec.latent), 5000, seed_);
    auto test_spec = spec;
    test_spec.seed += 1000;
    const auto tr = patchlab::generate_regions(spec, 10, 50, 32);
    const auto te = patchlab::generate_regions(test_spec, 20, 50, 32);
    X_ = descriptors(tr, c_);
    Xt_ = descriptors(te, ct_);
    for (const auto& p : tr.patches) r_.push_back(p.region);
    for (const auto& p : te.patches) rt_.push_back(p.region);
    std::vector<int> ltr, lte;
    const Matrix Rtr = region_rows(X_, c_, r_, ltr, false), Rte = region_rows(Xt_, ct_, rt_, lte, false);
    result_.baseline = matclass::score(matclass::nearest_centroid(Rtr, ltr, Rte), lte).accuracy;
    prepared_ = true;
  }

  std::uint64_t seed_ = 5;
  bool prepared_ = false;
  perception::DistanceMatrix D_;
  Matrix X_, Xt_;
  std::vector<int> c_, ct_;
  std::vector<std::string> r_, rt_;
  Benchmark result_;
};

TextureBenchmark benchmark;

Outcome classification() {
  const Benchmark& b = benchmark.run(30);
  const double gain = b.hik.at(30) - b.baseline;
  return {gain >= 0.10, fmt("HIK(M=30) %.3f vs nearest-centroid %.3f, gain %.1f points", b.hik.at(30), b.baseline,
                            100.0 * gain)};
}

Outcome plateau() {
  const Benchmark& b = benchmark.run(60);
  const double a30 = benchmark.run(30).hik.at(30), a60 = b.hik.at(60);
  const double gain = a60 - a30;
  return {gain < 0.01, fmt("M=30 %.3f, M=60 %.3f, gain %.1f points", a30, a60, 100.0 * gain)};
}

// Logic regression -----------------------------------------------------------

Outcome logic_oracle() {
  logicreg::BinarizedAttributes X;
  for (int r = 0; r < 16; ++r) {
    std::vector<std::uint8_t> row(4);
    for (int m = 0; m < 4; ++m) row[static_cast<std::size_t>(m)] = (r >> m) & 1;
    X.rows.push_back(row);
  }
  Rng rng(2024);
  int exact = 0, oracle_exact = 0;
  for (int trial = 0; trial < 50; ++trial) {
    using logicreg::Node;
    Node f = Node::leaf(static_cast<int>(uniform_index(rng, 4)));
    if (uniform(rng) < 0.5) f = Node::negate(f);
    const int literals = 1 + static_cast<int>(uniform_index(rng, 3));
    for (int l = 1; l < literals; ++l) {
      Node lit = Node::leaf(static_cast<int>(uniform_index(rng, 4)));
      if (uniform(rng) < 0.5) lit = Node::negate(lit);
      f = uniform(rng) < 0.5 ? Node::conj(f, lit) : Node::disj(f, lit);
    }
    std::vector<int> y;
    for (const auto& row : X.rows) y.push_back(f.eval(row));
    logicreg::SearchConfig cfg;
    cfg.seed = static_cast<std::uint64_t>(trial);
    const auto annealed = logicreg::fit_tree(X, y, cfg);
    cfg.allow_exhaustive = true;
    const auto oracle = logicreg::fit_tree(X, y, cfg);
    bool match = true;
    for (const auto& row : X.rows) match = match && annealed.tree.root.eval(row) == oracle.tree.root.eval(row);
    oracle_exact += (oracle.exhaustive || oracle.tree.degenerate) && oracle.accuracy == 1.0;
    exact += match && annealed.accuracy == 1.0;
  }
  return {exact >= 48 && oracle_exact == 50,
          fmt("annealing exact on %d/50, exhaustive oracle exact on %d/50", exact, oracle_exact)};
}

// MAC heads ------------------------------------------------------------------

Outcome mac_heads() {
  const auto spec = patchlab::default_synthetic_spec(4, 6, 21);
  const auto D = simulated_distances(patchlab::similarity_from_latent(spec.latent), 3000, 2);
  attrspace::AttrSpaceConfig acfg;
  acfg.num_attributes = 6;
  const Matrix A = attrspace::optimize_A(D, acfg).A.a;
  auto test_spec = spec;
  test_spec.seed += 77;
  std::vector<patchlab::Image> X, Xt;
  std::vector<int> c, ct;
  for (const auto& p : patchlab::generate_synthetic(spec, 100, 48).patches) {
    X.push_back(p.pixels);
    c.push_back(p.category);
  }
  for (const auto& p : patchlab::generate_synthetic(test_spec, 100, 48).patches) {
    Xt.push_back(p.pixels);
    ct.push_back(p.category);
  }
  macheads::MacConfig cfg;
  cfg.seed = 1;
  const auto with = macheads::train_mac(X, c, A, cfg).model;
  cfg.use_heads = false;
  const auto without = macheads::train_mac(X, c, A, cfg).model;
  const double mae = macheads::attribute_mae(with, Xt, ct, A);
  const double acc_with = macheads::category_accuracy(with, Xt, ct);
  const double acc_without = macheads::category_accuracy(without, Xt, ct);
  const double change = std::abs(acc_with - acc_without);
  return {mae <= 0.1 && change <= 0.02,
          fmt("final-layer MAE %.4f, accuracy %.3f with heads vs %.3f without (%.1f points)", mae, acc_with,
              acc_without, 100.0 * change)};
}

// One-shot -------------------------------------------------------------------

Outcome one_shot() {
  const std::uint64_t seed = 3;
  const int K = 5, held = K - 1;
  const auto spec = patchlab::default_synthetic_spec(K, 6, seed);
  const auto D = simulated_distances(patchlab::similarity_from_latent(spec.latent), 5000, seed);
  attrspace::AttrSpaceConfig acfg;
  acfg.num_attributes = 6;
  acfg.seed = seed;
  const Matrix A = attrspace::optimize_A(D, acfg).A.a.topRows(K - 1);
  std::vector<patchlab::Image> X;
  std::vector<int> c;
  for (const auto& p : patchlab::generate_synthetic(spec, 100, 48).patches)
    if (p.category != held) {
      X.push_back(p.pixels);
      c.push_back(p.category);
    }
  macheads::MacConfig cfg;
  cfg.seed = seed;
  const auto model = macheads::train_mac(X, c, A, cfg).model;
  const auto features = [&](std::uint64_t offset, int n) {
    auto s = spec;
    s.seed += offset;
    std::vector<patchlab::Image> images;
    std::vector<int> target;
    for (const auto& p : patchlab::generate_synthetic(s, n, 48).patches) {
      images.push_back(p.pixels);
      target.push_back(p.category == held);
    }
    return matclass::one_shot_features(model, images, target);
  };
  const auto curve = matclass::one_shot_eval(features(500, 60), features(900, 100), {1, 2, 5, 10, 20, 50}, 20, seed);
  double at10 = 0.0, at50 = 0.0;
  bool dominates = true;
  std::string detail;
  for (std::size_t i = 0; i < curve.shots.size(); ++i) {
    if (curve.shots[i] == 10) at10 = curve.both[i];
    if (curve.shots[i] == 50) at50 = curve.both[i];
    dominates = dominates && curve.both[i] >= curve.materials[i];
    detail += fmt("%s%d:%.3f/%.3f", i ? " " : "", curve.shots[i], curve.both[i], curve.materials[i]);
  }
  return {std::abs(at50 - at10) <= 0.05 && dominates,
          fmt("both/materials by shots %s; |acc50-acc10| %.1f points", detail.c_str(), 100.0 * std::abs(at50 - at10))};
}

// Kernel validity ------------------------------------------------------------

Outcome kernel_validity() {
  Rng rng(404);
  double worst = 1.0;
  for (int set = 0; set < 50; ++set) {
    const Index n = 5 + static_cast<Index>(uniform_index(rng, 56));
    const int M = 1 + static_cast<int>(uniform_index(rng, 8));
    const int B = 2 + static_cast<int>(uniform_index(rng, 19));
    Matrix H(n, M * B);
    for (Index i = 0; i < n; ++i) {
      const Index patches = 1 + static_cast<Index>(uniform_index(rng, 40));
      H.row(i) = matclass::region_histogram(random_matrix(patches, M, rng), B).values.transpose();
    }
    const Matrix G = matclass::hik_gram(H, H);
    worst = std::min(worst, Eigen::SelfAdjointEigenSolver<Matrix>(G).eigenvalues().minCoeff());
  }
  return {worst >= -1e-9, fmt("smallest eigenvalue over 50 Gram matrices %.3e", worst)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria{
      {1, "gradient suite", 30, gradient_suite},
      {2, "distance recovery", 60, distance_recovery},
      {3, "convergence", 60, convergence},
      {4, "embedding quality", 30, embedding_quality},
      {5, "mean matching", 120, mean_matching},
      {6, "classification analog", 300, classification},
      {7, "plateau analog", 600, plateau},
      {8, "logic regression oracle", 60, logic_oracle},
      {9, "MAC heads analog", 900, mac_heads},
      {10, "one-shot analog", 600, one_shot},
      {11, "kernel validity", 60, kernel_validity},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::stoi(argv[i]));

  int failures = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_budget = seconds < c.budget_s;
    const bool pass = o.pass && in_budget;
    failures += !pass;
    std::printf("%s %2d %s: %s [%.1f s, budget %.0f s%s]\n", pass ? "PASS" : "FAIL", c.id, c.name.c_str(),
                o.detail.c_str(), seconds, c.budget_s, in_budget ? "" : ", exceeded");
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
