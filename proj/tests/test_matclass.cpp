#include "matattr/matclass.hpp"

#include "support/gradcheck.hpp"

#include <doctest.h>

#include <filesystem>

using namespace matattr;
using namespace matattr::matclass;
using matattr::testing::random_matrix;
namespace fs = std::filesystem;

namespace {

Matrix random_histograms(Index n, int M, int B, Rng& rng) {
  Matrix H(n, M * B);
  for (Index i = 0; i < n; ++i)
    H.row(i) = region_histogram(random_matrix(1 + static_cast<Index>(uniform_index(rng, 30)), M, rng), B).values.transpose();
  return H;
}

patchlab::Image filled(int w, int h, double v) {
  patchlab::Image img(w, h);
  for (auto& c : img.ch) c.setConstant(v);
  return img;
}

Vector mean_rgb(const patchlab::Image& img) {
  Vector v(3);
  for (int c = 0; c < 3; ++c) v(c) = img.ch[c].mean();
  return v;
}

}  // namespace

TEST_CASE("region histogram examples") {
  const AttributeHistogram h = region_histogram(Matrix::Constant(7, 1, 0.5), 10);
  CHECK(h.values.size() == 10);
  CHECK(h.values(5) == 1.0);
  CHECK(h.values.sum() == 1.0);
  CHECK(h.patch_count == 7);

  Matrix two(2, 1);
  two << 0.0, 1.0;
  const AttributeHistogram e = region_histogram(two, 10);
  CHECK(e.values(0) == 0.5);
  CHECK(e.values(9) == 0.5);

  CHECK_THROWS_AS(region_histogram(Matrix(0, 3), 10), Error);
}

TEST_CASE("region histogram matches a counting oracle and ignores order") {
  Rng rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    const int B = 2 + static_cast<int>(uniform_index(rng, 10));
    const Matrix P = random_matrix(40, 3, rng);
    const AttributeHistogram h = region_histogram(P, B);
    for (Index m = 0; m < 3; ++m) {
      std::vector<int> counts(static_cast<std::size_t>(B), 0);
      for (Index i = 0; i < P.rows(); ++i) ++counts[static_cast<std::size_t>(std::min(B - 1, static_cast<int>(P(i, m) * B)))];
      for (int b = 0; b < B; ++b) CHECK(h.values(m * B + b) == doctest::Approx(counts[static_cast<std::size_t>(b)] / 40.0));
    }
    const Matrix reversed = P.colwise().reverse();
    CHECK(region_histogram(reversed, B).values == h.values);
  }
}

TEST_CASE("histogram intersection") {
  Vector a(2), b(2);
  a << 0.2, 0.8;
  b << 0.5, 0.5;
  CHECK(hik(a, b) == doctest::Approx(0.7));
  CHECK(hik(a, a) == doctest::Approx(1.0));
  Vector c(4), d(4);
  c << 0.5, 0.5, 0, 0;
  d << 0, 0, 0.3, 0.7;
  CHECK(hik(c, d) == 0.0);
  CHECK(hik(a, b) == hik(b, a));
  CHECK_THROWS_AS(hik(a, c), Error);
  Vector neg(2);
  neg << -0.1, 1.1;
  CHECK_THROWS_AS(hik(a, neg), Error);

  Rng rng(2);
  const Matrix H = random_histograms(5, 3, 10, rng);
  for (Index i = 0; i < 5; ++i) CHECK(hik(H.row(i), H.row(i)) == doctest::Approx(3.0));
}

TEST_CASE("HIK Gram matrices are symmetric positive semidefinite") {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix H = random_histograms(25, 4, 10, rng);
    const Matrix G = hik_gram(H, H);
    CHECK(G == G.transpose());
    CHECK(Eigen::SelfAdjointEigenSolver<Matrix>(G).eigenvalues().minCoeff() >= -1e-9);
  }
}

TEST_CASE("SVM recovers training exemplars") {
  Rng rng(4);
  const int K = 4, M = 2, B = 10;
  Matrix X(K * 5, M * B);
  std::vector<int> labels;
  for (int k = 0; k < K; ++k)
    for (int i = 0; i < 5; ++i) {
      // Each class concentrates near its own value.
      const Matrix P = (Matrix::Constant(20, M, 0.1 + 0.25 * k) + random_matrix(20, M, rng, -0.04, 0.04)).cwiseMax(0.0).cwiseMin(1.0);
      X.row(k * 5 + i) = region_histogram(P, B).values.transpose();
      labels.push_back(k);
    }
  const KernelClassifier clf = fit_hik_svm(X, labels);
  CHECK(clf.predict(X) == labels);

  const ClassificationReport r = fit_predict_material(X, labels, X, labels);
  CHECK(r.accuracy == 1.0);
  CHECK(r.per_class_accuracy == std::vector<double>(K, 1.0));

  SUBCASE("label permutation permutes predictions") {
    const std::vector<int> perm{2, 0, 3, 1};
    std::vector<int> permuted;
    for (int l : labels) permuted.push_back(perm[static_cast<std::size_t>(l)]);
    const Matrix T = random_histograms(15, M, B, rng);
    const auto base = fit_hik_svm(X, labels).predict(T);
    const auto moved = fit_hik_svm(X, permuted).predict(T);
    for (std::size_t i = 0; i < base.size(); ++i) CHECK(moved[i] == perm[static_cast<std::size_t>(base[i])]);
  }
  SUBCASE("single class is rejected") {
    CHECK_THROWS_AS(fit_hik_svm(X.topRows(5), std::vector<int>(5, 0)), Error);
  }
}

TEST_CASE("nearest centroid and scoring") {
  Matrix train(4, 1), test(2, 1);
  train << 0, 0.2, 1, 1.2;
  test << 0.05, 0.9;
  CHECK(nearest_centroid(train, {0, 0, 1, 1}, test) == std::vector<int>{0, 1});
  const ClassificationReport r = score({0, 1, 1, 1}, {0, 0, 1, 1});
  CHECK(r.accuracy == 0.75);
  CHECK(r.per_class_accuracy == std::vector<double>{0.5, 1.0});
  CHECK(balanced_accuracy({1, 1, 1, -1}, {1, -1, -1, -1}) == doctest::Approx(0.5 * (1.0 + 1.0 / 3.0)));
}

TEST_CASE("window origins stay inside and mirror") {
  for (int length : {32, 33, 50, 61, 64, 77, 97})
    for (int stride : {1, 5, 8, 40}) {
      const auto o = window_origins(length, 32, stride);
      CHECK(o.front() == 0);
      CHECK(o.back() == length - 32);
      for (std::size_t i = 0; i < o.size(); ++i) {
        CHECK(o[i] + o[o.size() - 1 - i] == length - 32);
        if (i > 0) CHECK(o[i] - o[i - 1] <= std::min(stride, 32));
      }
    }
  CHECK_THROWS_AS(window_origins(20, 32, 8), Error);
}

TEST_CASE("sliding window maps") {
  const WindowPredictor rgb = mean_rgb;

  SUBCASE("constant image gives constant planes") {
    const AttributeMap map = sliding_window_maps(filled(70, 50, 0.3), rgb, 8, 32);
    REQUIRE(map.planes.size() == 3);
    CHECK(map.planes[0].rows() == 50);
    CHECK(map.planes[0].cols() == 70);
    for (const auto& p : map.planes) CHECK((p - p.mean()).square().mean() < 1e-6);
  }
  SUBCASE("single window") {
    Rng rng(5);
    patchlab::Image img(32, 32);
    for (auto& c : img.ch)
      for (Index i = 0; i < c.size(); ++i) c(i) = uniform(rng);
    const AttributeMap map = sliding_window_maps(img, rgb, 32, 32);
    const Vector expected = mean_rgb(img);
    for (int c = 0; c < 3; ++c) CHECK((map.planes[c] - static_cast<float>(expected(c))).abs().maxCoeff() < 1e-6);
  }
  SUBCASE("flips commute with mapping") {
    Rng rng(6);
    patchlab::Image img(61, 45);
    for (auto& c : img.ch)
      for (Index i = 0; i < c.size(); ++i) c(i) = uniform(rng);
    const AttributeMap a = sliding_window_maps(img.flipped_horizontal(), rgb, 8, 32);
    const AttributeMap b = sliding_window_maps(img, rgb, 8, 32);
    for (int c = 0; c < 3; ++c) CHECK((a.planes[c] - b.planes[c].rowwise().reverse()).abs().maxCoeff() < 1e-6);
  }
  SUBCASE("two-texture composite") {
    patchlab::Image img = filled(96, 48, 0.2);
    for (auto& c : img.ch) c.rightCols(48).setConstant(0.8);
    const AttributeMap map = sliding_window_maps(img, rgb, 8, 32);
    const Eigen::ArrayXXf left = map.planes[0].leftCols(48), right = map.planes[0].rightCols(48);
    const double within = 0.5 * ((left - left.mean()).square().mean() + (right - right.mean()).square().mean());
    CHECK(within < std::abs(right.mean() - left.mean()));
  }
  SUBCASE("too small") { CHECK_THROWS_AS(sliding_window_maps(filled(20, 40, 0.5), rgb, 8, 32), Error); }
}

TEST_CASE("map files round-trip") {
  const fs::path dir = fs::temp_directory_path() / "matattr_matclass_map";
  fs::create_directories(dir);
  Rng rng(7);
  AttributeMap map;
  map.image_id = "img";
  map.model_id = "m";
  map.width = 5;
  map.height = 3;
  map.stride = 8;
  map.patch_side = 32;
  for (int p = 0; p < 2; ++p) map.planes.push_back(random_matrix(3, 5, rng).cast<float>().array());
  save_map(dir / "m.f32", map);
  const AttributeMap back = load_map(dir / "m.f32");
  CHECK(back.width == 5);
  CHECK(back.height == 3);
  CHECK(back.image_id == "img");
  REQUIRE(back.planes.size() == 2);
  for (int p = 0; p < 2; ++p) CHECK((back.planes[p] == map.planes[p]).all());
  save_plane_png(dir / "p.png", map, 1);
  CHECK(patchlab::load_image(dir / "p.png").width() == 5);
  fs::remove_all(dir);
}

TEST_CASE("linear classifier separates separable data") {
  Rng rng(8);
  Matrix X(40, 2);
  std::vector<int> y;
  for (Index i = 0; i < 40; ++i) {
    const int label = i < 20 ? 1 : -1;
    X(i, 0) = label * 1.0 + 0.3 * normal(rng);
    X(i, 1) = normal(rng);
    y.push_back(label);
  }
  const LinearClassifier clf = fit_linear(X, y);
  int correct = 0;
  for (Index i = 0; i < 40; ++i) correct += (clf.decision(X.row(i).transpose()) > 0 ? 1 : -1) == y[static_cast<std::size_t>(i)];
  CHECK(correct >= 38);
}

TEST_CASE("constant features give chance-level one-shot detection") {
  OneShotFeatures pool, test;
  pool.attributes = Matrix::Constant(40, 3, 0.5);
  pool.materials = Matrix::Constant(40, 2, 0.25);
  test.attributes = Matrix::Constant(30, 3, 0.5);
  test.materials = Matrix::Constant(30, 2, 0.25);
  for (int i = 0; i < 40; ++i) pool.target.push_back(i % 2);
  for (int i = 0; i < 30; ++i) test.target.push_back(i % 2);
  const OneShotCurve curve = one_shot_eval(pool, test, {1, 5, 10}, 5, 3);
  for (std::size_t i = 0; i < curve.shots.size(); ++i) {
    CHECK(curve.attributes[i] == doctest::Approx(0.5));
    CHECK(curve.materials[i] == doctest::Approx(0.5));
    CHECK(curve.both[i] == doctest::Approx(0.5));
  }
  CHECK_THROWS_AS(one_shot_eval(pool, test, {30}, 1, 3), Error);
}
