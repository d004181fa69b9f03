#include "matattr/patchlab.hpp"

#include <doctest.h>

#include <cstring>
#include <filesystem>

using namespace matattr;
using namespace matattr::patchlab;
namespace fs = std::filesystem;

namespace {

Image constant_image(int side, double r, double g, double b) {
  Image img(side, side);
  img.ch[0].setConstant(r);
  img.ch[1].setConstant(g);
  img.ch[2].setConstant(b);
  return img;
}

Image noise_image(int side, std::uint64_t seed) {
  Rng rng(seed);
  Image img(side, side);
  for (auto& c : img.ch)
    for (Index i = 0; i < c.size(); ++i) c(i) = uniform(rng);
  return img;
}

Vector centroid(const Matrix& X) { return X.colwise().mean().transpose(); }

Matrix features_of(const std::vector<Patch>& patches, int category) {
  std::vector<FeatureVector> fv;
  for (const auto& p : patches)
    if (p.category == category) fv.push_back(extract_features(p));
  return stack(fv);
}

}  // namespace

TEST_CASE("constant gray patch") {
  const Image img = constant_image(32, 0.5, 0.5, 0.5);
  const Vector color = color_histogram(img);
  CHECK((color.array() > 0).count() == 1);
  CHECK(color.sum() == doctest::Approx(1.0));
  CHECK(gradient_histogram(img).isZero(0.0));

  const BlockLayout L;
  const Vector f = extract_features(img);
  CHECK(f.size() == L.end);
  CHECK(f.segment(L.gradient, kGradientBins).isZero(0.0));
}

TEST_CASE("rotation leaves the rotation-invariant blocks unchanged") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const Image img = noise_image(32, seed);
    const Image rot = img.rotated90();
    CHECK((color_histogram(img) - color_histogram(rot)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((gradient_histogram(img) - gradient_histogram(rot)).cwiseAbs().maxCoeff() < 1e-12);
    // Filter-bank means and variances permute across orientations; the totals per scale are invariant.
    const Vector a = filter_energy(img), b = filter_energy(rot);
    CHECK(std::abs(a.sum() - b.sum()) < 1e-9 * std::max(1.0, a.sum()));
  }
}

TEST_CASE("extraction is deterministic") {
  Patch p;
  p.id = "n";
  p.pixels = noise_image(32, 11);
  const FeatureVector a = extract_features(p), b = extract_features(p);
  REQUIRE(a.values.size() == b.values.size());
  CHECK(std::memcmp(a.values.data(), b.values.data(), sizeof(double) * a.values.size()) == 0);
  CHECK(a.descriptor_id == b.descriptor_id);
  CHECK(a.values.allFinite());
}

TEST_CASE("patch below the minimum side is rejected") {
  Patch p;
  p.pixels = noise_image(15, 1);
  try {
    extract_features(p);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::InvalidInput);
  }
}

TEST_CASE("recipe dimension follows the enabled blocks") {
  DescriptorRecipe r;
  CHECK(r.dimension() == 150);
  r.lbp = false;
  CHECK(r.dimension() == 91);
  CHECK(extract_features(noise_image(16, 2), r).size() == 91);
}

TEST_CASE("seeded generation is reproducible") {
  const SyntheticSpec spec = default_synthetic_spec(3, 4, 7);
  const SyntheticSet a = generate_synthetic(spec, 10), b = generate_synthetic(spec, 10);
  REQUIRE(a.patches.size() == 30);
  REQUIRE(b.patches.size() == 30);
  for (std::size_t i = 0; i < a.patches.size(); ++i) {
    CHECK(a.patches[i].id == b.patches[i].id);
    CHECK(a.patches[i].category == b.patches[i].category);
    for (int c = 0; c < 3; ++c) CHECK((a.patches[i].pixels.ch[c] == b.patches[i].pixels.ch[c]).all());
  }
  CHECK(a.exhibited == b.exhibited);
  CHECK(a.exhibited.rows() == 30);
  CHECK(a.exhibited.cols() == 4);
}

TEST_CASE("categories with equal parameters are closer than different ones") {
  SyntheticSpec spec = default_synthetic_spec(3, 4, 13);
  spec.latent.row(1) = spec.latent.row(0);
  spec.textures[1] = spec.textures[0];
  const SyntheticSet set = generate_synthetic(spec, 60);
  const Vector c0 = centroid(features_of(set.patches, 0));
  const Vector c1 = centroid(features_of(set.patches, 1));
  const Vector c2 = centroid(features_of(set.patches, 2));
  CHECK((c0 - c1).norm() < (c0 - c2).norm());
}

TEST_CASE("smooth textures have lower gradient energy") {
  SyntheticSpec spec = default_synthetic_spec(2, 3, 5);
  spec.latent.row(1) = spec.latent.row(0);
  spec.textures[1] = spec.textures[0];
  spec.textures[0].smoothness = 1.0;
  spec.textures[1].smoothness = 0.0;
  const SyntheticSet set = generate_synthetic(spec, 100);
  double smooth = 0.0, rough = 0.0;
  for (const auto& p : set.patches) (p.category == 0 ? smooth : rough) += mean_gradient_energy(p.pixels);
  CHECK(smooth < rough);
}

TEST_CASE("equal latent rows give statistically indistinguishable features") {
  SyntheticSpec spec = default_synthetic_spec(2, 4, 17);
  spec.latent.row(1) = spec.latent.row(0);
  spec.textures[1] = spec.textures[0];
  const SyntheticSet set = generate_synthetic(spec, 200);
  const Matrix a = features_of(set.patches, 0), b = features_of(set.patches, 1);
  const double n = 200.0;
  std::vector<double> pvalues;
  for (Index d = 0; d < a.cols(); ++d) {
    const double ma = a.col(d).mean(), mb = b.col(d).mean();
    const double va = (a.col(d).array() - ma).square().sum() / (n - 1.0);
    const double vb = (b.col(d).array() - mb).square().sum() / (n - 1.0);
    if (va + vb <= 1e-20) continue;
    // Welch statistic; with ~400 degrees of freedom the normal tail is exact to 3 digits.
    const double t = (ma - mb) / std::sqrt(va / n + vb / n);
    pvalues.push_back(std::erfc(std::abs(t) / std::sqrt(2.0)));
  }
  REQUIRE(!pvalues.empty());
  // Family-wise alpha 0.01 across dimensions (Bonferroni).
  const double alpha = 0.01 / static_cast<double>(pvalues.size());
  int rejected = 0;
  for (double p : pvalues) rejected += p < alpha;
  CHECK(rejected == 0);
}

TEST_CASE("load_dataset") {
  const fs::path dir = fs::temp_directory_path() / "matattr_patchlab_load";
  fs::remove_all(dir);
  fs::create_directories(dir);
  save_png(dir / "img.png", noise_image(64, 3));

  SUBCASE("empty index") {
    write_file_atomic(dir / "index.jsonl", "");
    const Dataset ds = load_dataset(dir / "index.jsonl");
    CHECK(ds.patches.empty());
    CHECK(ds.categories.empty());
  }
  SUBCASE("three records") {
    write_file_atomic(dir / "index.jsonl",
                      R"({"id": "a", "image": "img.png", "bbox": [0, 0, 32, 32], "category": "wood"}
{"id": "b", "image": "img.png", "bbox": [32, 0, 32, 32], "category": "metal"}
{"id": "c", "image": "img.png", "bbox": [16, 16, 32, 32], "category": "wood"}
)");
    const Dataset ds = load_dataset(dir / "index.jsonl");
    REQUIRE(ds.patches.size() == 3);
    CHECK(ds.patches[0].id == "a");
    CHECK(ds.patches[1].id == "b");
    CHECK(ds.patches[2].id == "c");
    CHECK(ds.categories == std::vector<std::string>{"metal", "wood"});
    CHECK(ds.patches[0].category == 1);
    CHECK(ds.patches[1].category == 0);
    CHECK(ds.patches[2].pixels.width() == 32);
  }
  SUBCASE("bbox out of range") {
    write_file_atomic(dir / "index.jsonl",
                      R"({"id": "a", "image": "img.png", "bbox": [40, 40, 32, 32], "category": "wood"})"
                      "\n");
    try {
      load_dataset(dir / "index.jsonl");
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::OutOfRange);
      CHECK(std::string(e.what()).find("patch a") != std::string::npos);
    }
  }
  SUBCASE("malformed line names the line") {
    write_file_atomic(dir / "index.jsonl",
                      R"({"id": "a", "image": "img.png", "bbox": [0, 0, 32, 32], "category": "wood"})"
                      "\n{not json\n");
    try {
      load_dataset(dir / "index.jsonl");
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Parse);
      CHECK(std::string(e.what()).find(":2:") != std::string::npos);
    }
  }
  SUBCASE("missing image names the patch") {
    write_file_atomic(dir / "index.jsonl",
                      R"({"id": "z", "image": "nope.png", "bbox": [0, 0, 32, 32], "category": "wood"})"
                      "\n");
    try {
      load_dataset(dir / "index.jsonl");
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find("patch z") != std::string::npos);
    }
  }
  fs::remove_all(dir);
}

TEST_CASE("dataset and feature files round-trip") {
  const fs::path dir = fs::temp_directory_path() / "matattr_patchlab_roundtrip";
  fs::remove_all(dir);
  const SyntheticSpec spec = default_synthetic_spec(3, 3, 2);
  const SyntheticSet set = generate_synthetic(spec, 4);
  save_dataset(dir, {spec.names, set.patches});
  const Dataset ds = load_dataset(dir / "index.jsonl");
  REQUIRE(ds.patches.size() == set.patches.size());
  std::vector<FeatureVector> fv;
  for (std::size_t i = 0; i < ds.patches.size(); ++i) {
    CHECK(ds.patches[i].id == set.patches[i].id);
    CHECK(ds.patches[i].category == set.patches[i].category);
    // PNG stores 8 bits per channel.
    CHECK((ds.patches[i].pixels.ch[0] - set.patches[i].pixels.ch[0]).abs().maxCoeff() <= 0.5 / 255.0 + 1e-12);
    fv.push_back(extract_features(ds.patches[i]));
  }
  write_features(dir / "f.bin", fv);
  const auto back = read_features(dir / "f.bin");
  REQUIRE(back.size() == fv.size());
  for (std::size_t i = 0; i < fv.size(); ++i) {
    CHECK(back[i].patch_id == fv[i].patch_id);
    CHECK((back[i].values - fv[i].values.cast<float>().cast<double>()).isZero(0.0));
  }
  fs::remove_all(dir);
}
