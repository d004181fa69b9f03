#include "matattr/macheads.hpp"

#include "support/gradcheck.hpp"

#include <doctest.h>

using namespace matattr;
using namespace matattr::macheads;
using matattr::testing::numeric_gradient;
using matattr::testing::random_categories;
using matattr::testing::random_matrix;
using matattr::testing::relative_error;

namespace {

double clampd(double x) { return x < 0 ? 0 : (x > 1 ? 1 : x); }

HeadOutput head_oracle(const HeadStack& s, const FeaturePyramid& p) {
  HeadOutput out;
  std::vector<double> concat;
  for (Index l = 0; l < s.levels(); ++l) {
    Vector v(s.attributes());
    for (Index m = 0; m < s.attributes(); ++m) {
      double acc = s.b[l](m);
      for (Index d = 0; d < s.W[l].cols(); ++d) acc += s.W[l](m, d) * p.levels[l](d);
      v(m) = clampd(acc);
      concat.push_back(v(m));
    }
    out.level.push_back(v);
  }
  out.final.resize(s.attributes());
  for (Index m = 0; m < s.attributes(); ++m) {
    double acc = s.bc(m);
    for (std::size_t j = 0; j < concat.size(); ++j) acc += s.Wc(m, static_cast<Index>(j)) * concat[j];
    out.final(m) = clampd(acc);
  }
  return out;
}

double u_oracle(const Matrix& P, const std::vector<int>& c, const Matrix& A) {
  double total = 0.0;
  for (Index k = 0; k < A.rows(); ++k)
    for (Index m = 0; m < A.cols(); ++m) {
      double sum = 0.0;
      int n = 0;
      for (Index i = 0; i < P.rows(); ++i)
        if (c[static_cast<std::size_t>(i)] == k) {
          sum += P(i, m);
          ++n;
        }
      total += std::abs(A(k, m) - sum / n);
    }
  return total / static_cast<double>(A.rows());
}

FeaturePyramid random_pyramid(const std::vector<Index>& dims, Rng& rng) {
  FeaturePyramid p;
  for (Index d : dims) p.levels.push_back(random_matrix(d, 1, rng));
  return p;
}

patchlab::Image noise_image(int side, Rng& rng) {
  patchlab::Image img(side, side);
  for (auto& c : img.ch)
    for (Index i = 0; i < c.size(); ++i) c(i) = uniform(rng);
  return img;
}

}  // namespace

TEST_CASE("zero heads give zero output") {
  Rng rng(1);
  const std::vector<Index> dims{3, 4, 5};
  HeadStack s = HeadStack::initialize(dims, 2, rng);
  for (auto& W : s.W) W.setZero();
  for (auto& b : s.b) b.setZero();
  s.Wc.setZero();
  s.bc.setZero();
  const HeadOutput out = head_forward(s, random_pyramid(dims, rng));
  for (const auto& v : out.level) CHECK(v.isZero(0.0));
  CHECK(out.final.isZero(0.0));
}

TEST_CASE("combiner copying the last level") {
  Rng rng(2);
  const std::vector<Index> dims{3, 4, 5};
  const Index M = 3;
  HeadStack s = HeadStack::initialize(dims, M, rng);
  s.Wc.setZero();
  s.Wc.rightCols(M) = Matrix::Identity(M, M);
  s.bc.setZero();
  const HeadOutput out = head_forward(s, random_pyramid(dims, rng));
  CHECK(out.final == out.level.back());
}

TEST_CASE("head forward matches the oracle") {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const std::vector<Index> dims{2, 3, 4};
    HeadStack s = HeadStack::initialize(dims, 3, rng);
    for (auto& W : s.W) W = random_matrix(W.rows(), W.cols(), rng, -1, 1);
    s.Wc = random_matrix(s.Wc.rows(), s.Wc.cols(), rng, -1, 1);
    const FeaturePyramid p = random_pyramid(dims, rng);
    const HeadOutput a = head_forward(s, p), b = head_oracle(s, p);
    for (std::size_t l = 0; l < a.level.size(); ++l) CHECK((a.level[l] - b.level[l]).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((a.final - b.final).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((a.final.array() >= 0).all());
    CHECK((a.final.array() <= 1).all());
  }
  HeadStack s = HeadStack::initialize({2, 3}, 2, rng);
  CHECK_THROWS_AS(head_forward(s, random_pyramid({2, 4}, rng)), Error);
}

TEST_CASE("aux u examples") {
  Matrix A(1, 2);
  A << 0.6, 0.2;
  Matrix P(1, 2);
  P << 0.5, 0.2;
  CHECK(aux_loss_u(P, {0}, A) == doctest::Approx(0.1).epsilon(1e-12));
  Matrix exact(2, 2);
  exact << 0.5, 0.1, 0.7, 0.3;
  CHECK(aux_loss_u(exact, {0, 0}, A) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK_THROWS_AS(aux_loss_u(P, {0}, Matrix::Constant(2, 2, 0.5)), Error);

  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix A3 = random_matrix(3, 4, rng);
    const Matrix P3 = random_matrix(15, 4, rng);
    const auto c = random_categories(15, 3, rng);
    CHECK(std::abs(aux_loss_u(P3, c, A3) - u_oracle(P3, c, A3)) < 1e-12);
  }
}

TEST_CASE("aux u is invariant to patch order within a category") {
  Rng rng(5);
  const Matrix A = random_matrix(3, 2, rng);
  const Matrix P = random_matrix(12, 2, rng);
  const auto c = random_categories(12, 3, rng);
  std::vector<Index> perm(12);
  for (Index i = 0; i < 12; ++i) perm[static_cast<std::size_t>(i)] = i;
  shuffle(perm, rng);
  Matrix Pp(12, 2);
  std::vector<int> cp(12);
  for (std::size_t i = 0; i < 12; ++i) {
    Pp.row(static_cast<Index>(i)) = P.row(perm[i]);
    cp[i] = c[static_cast<std::size_t>(perm[i])];
  }
  CHECK(aux_loss_u(Pp, cp, A) == doctest::Approx(aux_loss_u(P, c, A)).epsilon(1e-14));
}

TEST_CASE("aux d is the shared KL-of-KDE") {
  Rng rng(6);
  const attrspace::KdeConfig cfg;
  const Matrix P = random_matrix(9, 3, rng);
  CHECK(aux_loss_d(P, cfg) == attrspace::beta_kl(P, cfg));
}

TEST_CASE("aux loss gradients") {
  Rng rng(7);
  const attrspace::KdeConfig cfg;
  for (int trial = 0; trial < 20; ++trial) {
    const int K = 1 + static_cast<int>(uniform_index(rng, 5));
    const Index M = 1 + static_cast<Index>(uniform_index(rng, 4));
    const Index N = K + static_cast<Index>(uniform_index(rng, 20 - K));
    const Matrix A = random_matrix(K, M, rng);
    const auto c = random_categories(N, K, rng);
    Matrix P = random_matrix(N, M, rng, 0.05, 0.95);
    // Keep every residual away from the L1 kink.
    const Matrix means = [&] {
      Matrix mu = Matrix::Zero(K, M);
      std::vector<int> n(static_cast<std::size_t>(K), 0);
      for (Index i = 0; i < N; ++i) {
        mu.row(c[static_cast<std::size_t>(i)]) += P.row(i);
        ++n[static_cast<std::size_t>(c[static_cast<std::size_t>(i)])];
      }
      for (int k = 0; k < K; ++k) mu.row(k) /= n[static_cast<std::size_t>(k)];
      return mu;
    }();
    if (((A - means).array().abs() < 1e-3).any()) continue;
    CHECK(relative_error(aux_loss_u_gradient(P, c, A),
                         numeric_gradient([&](const Matrix& x) { return aux_loss_u(x, c, A); }, P)) < 1e-4);
    CHECK(relative_error(aux_loss_d_gradient(P, cfg),
                         numeric_gradient([&](const Matrix& x) { return aux_loss_d(x, cfg); }, P)) < 1e-4);
  }
}

TEST_CASE("extractor pyramid shapes") {
  Rng rng(8);
  const ToyExtractor ex = ToyExtractor::initialize({4, 6, 8}, 3, rng);
  CHECK(ex.level_dims() == std::vector<Index>{4, 6, 8});
  const FeaturePyramid p = extract_pyramid(ex, noise_image(16, rng));
  REQUIRE(p.levels.size() == 3);
  CHECK(p.dims() == ex.level_dims());
  const Vector prob = category_probabilities(ex, p);
  CHECK(prob.size() == 3);
  CHECK(prob.sum() == doctest::Approx(1.0));
  CHECK((prob.array() > 0).all());
}

TEST_CASE("train_mac edge cases") {
  Rng rng(9);
  std::vector<patchlab::Image> images;
  std::vector<int> cats;
  for (int i = 0; i < 12; ++i) {
    images.push_back(noise_image(16, rng));
    cats.push_back(i % 2);
  }
  Matrix A(2, 2);
  A << 0.9, 0.1, 0.1, 0.9;
  MacConfig cfg;
  cfg.channels = {3, 4, 5};
  cfg.batch_size = 4;

  SUBCASE("zero epochs") {
    cfg.epochs = 0;
    const MacResult r = train_mac(images, cats, A, cfg);
    CHECK(r.trace.empty());
    CHECK(r.model.extractor.levels() == 3);
    CHECK(r.model.heads.attributes() == 2);
    CHECK(r.model.has_heads);
  }
  SUBCASE("reproducible and bounded") {
    cfg.epochs = 2;
    const MacResult a = train_mac(images, cats, A, cfg), b = train_mac(images, cats, A, cfg);
    REQUIRE(a.trace.size() == 2);
    CHECK(a.model.heads.Wc == b.model.heads.Wc);
    CHECK(a.model.extractor.conv[0].W == b.model.extractor.conv[0].W);
    const MacPrediction p = predict(a.model, images[0]);
    CHECK((p.attributes.final.array() >= 0).all());
    CHECK((p.attributes.final.array() <= 1).all());
    CHECK(p.probabilities.sum() == doctest::Approx(1.0));
    const MacModel back = model_from_json(model_to_json(a.model, cfg));
    CHECK(back.heads.Wc == a.model.heads.Wc);
    CHECK(back.extractor.Wcls == a.model.extractor.Wcls);
    CHECK(predict(back, images[1]).probabilities == predict(a.model, images[1]).probabilities);
  }
  SUBCASE("without heads") {
    cfg.epochs = 1;
    cfg.use_heads = false;
    const MacResult r = train_mac(images, cats, A, cfg);
    CHECK_FALSE(r.model.has_heads);
    CHECK(predict(r.model, images[0]).attributes.final.size() == 0);
  }
}
