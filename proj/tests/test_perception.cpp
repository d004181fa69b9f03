#include "matattr/perception.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>

using namespace matattr;
using namespace matattr::perception;

namespace {

std::vector<AnnotationRecord> votes_for(int K, int marked_slot, int marks, int total) {
  std::vector<AnnotationRecord> out;
  for (int a = 0; a < total; ++a) {
    AnnotationRecord r;
    r.task_id = "t";
    r.annotator_id = "a" + std::to_string(a);
    r.decisions.assign(K, 0);
    for (int k = 0; k < K; ++k) r.order.push_back(k);
    if (a < marks) r.decisions[marked_slot] = 1;
    out.push_back(r);
  }
  return out;
}

AggregatedRecord agg(int category, std::vector<double> s) {
  AggregatedRecord r;
  r.category = category;
  r.s = Eigen::Map<Vector>(s.data(), static_cast<Index>(s.size()));
  return r;
}

double pearson(const Matrix& a, const Matrix& b) {
  std::vector<double> x, y;
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = i + 1; j < a.cols(); ++j) {
      x.push_back(a(i, j));
      y.push_back(b(i, j));
    }
  const Eigen::Map<Vector> X(x.data(), static_cast<Index>(x.size())), Y(y.data(), static_cast<Index>(y.size()));
  const Vector xc = X.array() - X.mean(), yc = Y.array() - Y.mean();
  return xc.dot(yc) / (xc.norm() * yc.norm());
}

double binomial_tail(int n, int k, double p) {
  double total = 0.0;
  for (int i = k; i <= n; ++i) total += std::exp(std::lgamma(n + 1.0) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0)) *
                                       std::pow(p, i) * std::pow(1.0 - p, n - i);
  return total;
}

}  // namespace

TEST_CASE("vote threshold") {
  CHECK(aggregate_votes(votes_for(3, 1, 5, 10))(1) == 1.0);
  CHECK(aggregate_votes(votes_for(3, 1, 0, 10))(1) == 0.0);
  CHECK(aggregate_votes(votes_for(3, 1, 4, 10))(1) == 0.0);
  CHECK(aggregate_votes(votes_for(3, 1, 10, 10)).sum() == 1.0);
}

TEST_CASE("too few votes raise insufficient-votes") {
  try {
    aggregate_votes(votes_for(3, 0, 5, 9));
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::InsufficientVotes);
    CHECK(std::string(e.what()).find('t') != std::string::npos);
  }
}

TEST_CASE("votes are mapped back through the display order") {
  auto records = votes_for(3, 0, 6, 10);
  for (auto& r : records) r.order = {2, 0, 1};
  const Vector s = aggregate_votes(records);
  CHECK(s(2) == 1.0);
  CHECK(s(0) == 0.0);
  CHECK(s(1) == 0.0);
}

TEST_CASE("vote aggregation is invariant to display and record order") {
  Rng rng(4);
  const int K = 6;
  std::vector<AnnotationRecord> base;
  for (int a = 0; a < 10; ++a) {
    AnnotationRecord r;
    r.task_id = "t";
    r.annotator_id = std::to_string(a);
    for (int k = 0; k < K; ++k) r.order.push_back(k);
    for (int k = 0; k < K; ++k) r.decisions.push_back(uniform(rng) < 0.5);
    base.push_back(r);
  }
  const Vector expected = aggregate_votes(base);
  for (int trial = 0; trial < 20; ++trial) {
    auto perm = base;
    for (auto& r : perm) {
      std::vector<int> slots(K);
      for (int i = 0; i < K; ++i) slots[i] = i;
      shuffle(slots, rng);
      AnnotationRecord p = r;
      for (int i = 0; i < K; ++i) {
        p.order[i] = r.order[slots[i]];
        p.decisions[i] = r.decisions[slots[i]];
      }
      r = p;
    }
    shuffle(perm, rng);
    CHECK(aggregate_votes(perm) == expected);
  }
}

TEST_CASE("prototypes are arithmetic means") {
  const auto protos =
      category_prototypes({agg(0, {1, 0, 1}), agg(0, {1, 0, 0}), agg(1, {0, 0, 0}), agg(2, {0, 1, 1})}, 3);
  REQUIRE(protos.size() == 3);
  CHECK(protos[0].p.isApprox(Vector::Map(std::vector<double>{1, 0, 0.5}.data(), 3)));
  CHECK(protos[0].support == 2);
  CHECK(protos[1].p.isZero(0.0));
  CHECK(protos[2].support == 1);
}

TEST_CASE("missing category is reported") {
  try {
    category_prototypes({agg(0, {1, 0, 1})}, 3);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::MissingCategory);
  }
}

TEST_CASE("prototypes converge to Bernoulli rates") {
  Rng rng(21);
  const int K = 4;
  Matrix pi(K, K);
  for (Index i = 0; i < pi.size(); ++i) pi(i) = uniform(rng);
  std::vector<AggregatedRecord> records;
  for (int k = 0; k < K; ++k)
    for (int n = 0; n < 1000; ++n) {
      Vector s(K);
      for (int j = 0; j < K; ++j) s(j) = uniform(rng) < pi(k, j);
      records.push_back({"", k, s});
    }
  const auto protos = category_prototypes(records, K);
  for (int k = 0; k < K; ++k) CHECK((protos[k].p - pi.row(k).transpose()).cwiseAbs().maxCoeff() < 0.06);
}

TEST_CASE("prototypes are invariant to record order") {
  Rng rng(8);
  std::vector<AggregatedRecord> records;
  for (int n = 0; n < 60; ++n) {
    Vector s(3);
    for (int j = 0; j < 3; ++j) s(j) = uniform(rng) < 0.5;
    records.push_back({"", n % 3, s});
  }
  const auto a = category_prototypes(records, 3);
  const auto b = category_prototypes(shuffled(records, 99), 3);
  for (int k = 0; k < 3; ++k) CHECK(a[k].p == b[k].p);
}

TEST_CASE("orthonormal prototypes are sqrt(2) apart") {
  const auto protos = category_prototypes({agg(0, {1, 0, 0}), agg(1, {0, 1, 0}), agg(2, {0, 1, 0})}, 3);
  const DistanceMatrix D = distance_matrix(protos);
  CHECK(D.d(0, 1) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-15));
  CHECK(D.d(1, 2) == 0.0);
  CHECK(D.names == std::vector<std::string>{"c0", "c1", "c2"});
}

TEST_CASE("distance matrix matches a scalar-loop oracle") {
  Rng rng(31);
  const int K = 4;
  std::vector<CategoryPrototype> protos;
  for (int k = 0; k < K; ++k) {
    Vector p(K);
    for (int j = 0; j < K; ++j) p(j) = uniform(rng);
    protos.push_back({k, p, 1});
  }
  const DistanceMatrix D = distance_matrix(protos);
  for (int i = 0; i < K; ++i)
    for (int j = 0; j < K; ++j) {
      double acc = 0.0;
      for (int m = 0; m < K; ++m) acc += (protos[i].p(m) - protos[j].p(m)) * (protos[i].p(m) - protos[j].p(m));
      CHECK(std::abs(D.d(i, j) - std::sqrt(acc)) < 1e-12);
    }
  for (int i = 0; i < K; ++i) {
    CHECK(D.d(i, i) == 0.0);
    for (int j = 0; j < K; ++j) {
      CHECK(D.d(i, j) == D.d(j, i));
      CHECK(D.d(i, j) <= std::sqrt(double(K)));
      for (int l = 0; l < K; ++l) CHECK(D.d(i, l) <= D.d(i, j) + D.d(j, l) + 1e-12);
    }
  }
}

TEST_CASE("convergence curve") {
  const Matrix pi = Matrix::Constant(3, 3, 0.3) + 0.6 * Matrix::Identity(3, 3);
  const auto sim = simulate_annotations(pi, 600, 10, 5);
  const auto records = aggregate_all(sim.tasks, sim.records);
  const auto curve = convergence_curve(records, 3, {100, 600});
  REQUIRE(curve.size() == 2);
  CHECK(curve[1].second == 0.0);
  CHECK(curve[0].second > 0.0);
  CHECK_THROWS_AS(convergence_curve(records, 3, {601}), Error);
}

TEST_CASE("simulator limits") {
  SUBCASE("identity similarity") {
    const auto sim = simulate_annotations(Matrix::Identity(4, 4), 200, 10, 1);
    const auto records = aggregate_all(sim.tasks, sim.records);
    for (const auto& r : records) CHECK(r.s == Vector::Unit(4, r.category));
    const DistanceMatrix D = distance_matrix(category_prototypes(records, 4));
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) CHECK(D.d(i, j) == doctest::Approx(i == j ? 0.0 : std::sqrt(2.0)));
  }
  SUBCASE("all-ones similarity") {
    const auto sim = simulate_annotations(Matrix::Ones(4, 4), 200, 10, 1);
    const auto records = aggregate_all(sim.tasks, sim.records);
    const DistanceMatrix D = distance_matrix(category_prototypes(records, 4));
    CHECK(D.d.isZero(0.0));
  }
}

TEST_CASE("simulated tasks are well-formed and reproducible") {
  const Matrix pi = Matrix::Constant(5, 5, 0.4);
  const auto a = simulate_annotations(pi, 50, 10, 3), b = simulate_annotations(pi, 50, 10, 3);
  REQUIRE(a.records.size() == 500);
  CHECK(to_jsonl(a.records) == to_jsonl(b.records));
  for (const auto& t : a.tasks) {
    t.validate();
    auto cats = t.shown_categories;
    std::sort(cats.begin(), cats.end());
    for (int k = 0; k < 5; ++k) CHECK(cats[k] == k);
  }
}

TEST_CASE("reconstructed distances track the analytic expectation") {
  Rng rng(77);
  const int K = 6;
  Matrix pi(K, K);
  for (Index i = 0; i < pi.size(); ++i) pi(i) = uniform(rng);
  const auto sim = simulate_annotations(pi, 3000, 10, 12);
  const DistanceMatrix D = distance_matrix(category_prototypes(aggregate_all(sim.tasks, sim.records), K));
  Matrix expected_p(K, K);
  for (int k = 0; k < K; ++k)
    for (int j = 0; j < K; ++j) expected_p(k, j) = binomial_tail(10, 5, pi(k, j));
  CHECK(pearson(D.d, pairwise_distances(expected_p)) >= 0.95);
}

TEST_CASE("annotation log round-trip, last write wins") {
  AnnotationRecord r{"t1", "ann", {1, 0, 1}, {2, 0, 1}};
  AnnotationRecord r2 = r;
  r2.decisions = {0, 0, 0};
  const std::string text = annotation_to_json(r) + "\n" + annotation_to_json(r2) + "\n";
  const auto back = parse_annotations(text);
  REQUIRE(back.size() == 1);
  CHECK(back[0].decisions == r2.decisions);
  CHECK(back[0].order == r.order);
  CHECK_THROWS_AS(parse_annotations("{\"task\": 1}\n"), Error);
  AnnotationRecord other{"t2", "ann", {1, 0}, {0, 1}};
  try {
    parse_annotations(annotation_to_json(r) + "\n" + annotation_to_json(other) + "\n", "log");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("log:2") != std::string::npos);
  }
}

TEST_CASE("distance CSV round-trip") {
  DistanceMatrix D;
  D.names = {"a", "b"};
  D.d = Matrix::Zero(2, 2);
  D.d(0, 1) = D.d(1, 0) = 0.1 + 0.2;
  const std::string csv = distance_csv(D);
  CHECK(csv == "a,b\n0,0.30000000000000004\n0.30000000000000004,0\n");
  const DistanceMatrix back = parse_distance_csv(csv);
  CHECK(back.names == D.names);
  CHECK(back.d == D.d);
}
