#pragma once

#include "matattr/core.hpp"

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace matattr::patchlab {

/// RGB image, one Eigen array per channel indexed (row, col) = (y, x), values in [0,1].
struct Image {
  using Plane = Eigen::ArrayXXd;

  Image() = default;
  Image(int width, int height);

  int width() const { return static_cast<int>(ch[0].cols()); }
  int height() const { return static_cast<int>(ch[0].rows()); }

  /// Luminance (Rec. 601 weights).
  Plane luminance() const;
  Image crop(int x, int y, int w, int h) const;
  Image rotated90() const;
  Image flipped_horizontal() const;

  std::array<Plane, 3> ch;
};

struct BBox {
  int x = 0, y = 0, w = 0, h = 0;
};

struct Patch {
  std::string id;
  std::string source_image;
  BBox bbox;
  int category = 0;    // 0-based index into the dataset's category names
  std::string region;  // optional grouping key (material region / image)
  std::string split;   // optional "train" / "test"
  Image pixels;
};

struct FeatureVector {
  std::string patch_id;
  Vector values;
  std::string descriptor_id;
};

/// Which blocks of the local descriptor to compute. Every block is
/// L2-normalized independently and the blocks are concatenated in this order:
/// color histogram (27), oriented filter energy (48), gradient-magnitude
/// histogram (16), uniform LBP histogram (59).
struct DescriptorRecipe {
  bool color = true;
  bool filters = true;
  bool gradient = true;
  bool lbp = true;
  int min_side = 16;

  int dimension() const;
  std::string id() const;
};

inline constexpr int kColorBins = 27;
inline constexpr int kFilterDims = 48;
inline constexpr int kGradientBins = 16;
inline constexpr int kLbpBins = 59;

/// Offsets of each block inside a full-recipe feature vector.
struct BlockLayout {
  int color = 0, filters = 27, gradient = 75, lbp = 91, end = 150;
};

FeatureVector extract_features(const Patch& patch, const DescriptorRecipe& recipe = {});
Vector extract_features(const Image& image, const DescriptorRecipe& recipe = {});

/// Mean squared central-difference gradient of the luminance.
double mean_gradient_energy(const Image& image);

// Individual blocks, unnormalized, exposed for tests.
Vector color_histogram(const Image& image);
Vector filter_energy(const Image& image);
Vector gradient_histogram(const Image& image);
Vector lbp_histogram(const Image& image);

/// Stacks feature vectors row-wise into an N x D matrix.
Matrix stack(const std::vector<FeatureVector>& features);

// ---------------------------------------------------------------------------
// Synthetic textures

/// Appearance parameters of one synthetic material category.
struct CategoryTexture {
  Eigen::Vector3d base_color{0.5, 0.5, 0.5};
  double color_jitter = 0.03;  // per-patch color std
  double orientation = 0.0;    // radians, direction of anisotropic base noise
  double frequency = 0.12;     // cycles/pixel of the category's striping effect
  double anisotropy = 0.0;     // 0 isotropic .. 1 strongly oriented base noise
  double specular_rate = 3.0;  // expected highlight count per 32x32 area when glossy
  double smoothness = 0.5;     // 0 rough .. 1 smooth base surface
};

struct SyntheticSpec {
  int num_categories = 0;
  std::vector<std::string> names;
  std::vector<CategoryTexture> textures;
  /// K x M* probabilities that a patch of category k exhibits latent attribute m.
  Matrix latent;
  double nuisance = 0.0;  // strength of per-region illumination / color cast
  std::uint64_t seed = 0;

  int num_latent() const { return static_cast<int>(latent.cols()); }
  void validate() const;
};

/// Builds a spec whose texture parameters are a deterministic function of each
/// category's latent row, so categories with equal rows look alike.
SyntheticSpec default_synthetic_spec(int num_categories, int num_latent, std::uint64_t seed);

/// Texture parameters implied by one latent row.
CategoryTexture texture_from_latent(const Eigen::Ref<const Vector>& latent_row);

struct SyntheticSet {
  std::vector<Patch> patches;
  /// N x M* binary matrix of latent attributes each patch exhibits.
  Matrix exhibited;
};

SyntheticSet generate_synthetic(const SyntheticSpec& spec, int n_per_category, int side = 32);

/// Grouped variant: every region shares one nuisance draw; patches inside a
/// region are independent draws from the category.
SyntheticSet generate_regions(const SyntheticSpec& spec, int regions_per_category,
                              int patches_per_region, int side = 32);

/// Renders one texture image of a category with an explicit latent draw.
Image render_texture(const SyntheticSpec& spec, int category, const Eigen::Ref<const Vector>& exhibited,
                     int width, int height, Rng& rng, const Eigen::Vector3d& cast = Eigen::Vector3d::Ones());

/// Probability that annotators judge categories k and k' similar under a
/// "similar iff at least one shared attribute" model: 1 - prod_m (1 - L_km L_k'm).
Matrix similarity_from_latent(const Matrix& latent);

// ---------------------------------------------------------------------------
// Datasets on disk

struct Dataset {
  std::vector<std::string> categories;
  std::vector<Patch> patches;
};

/// Reads a JSON-lines patch index; image paths are relative to the index file.
Dataset load_dataset(const std::filesystem::path& index_path);

/// Writes images and an index for a synthetic set under `dir`.
void save_dataset(const std::filesystem::path& dir, const Dataset& dataset);

Image load_image(const std::filesystem::path& path);
void save_ppm(const std::filesystem::path& path, const Image& image);
void save_png(const std::filesystem::path& path, const Image& image);
std::string encode_png(const Image& image);
void save_png_gray(const std::filesystem::path& path, const Eigen::ArrayXXd& plane);

/// PATFEAT1 binary feature file.
void write_features(const std::filesystem::path& path, const std::vector<FeatureVector>& features);
std::vector<FeatureVector> read_features(const std::filesystem::path& path,
                                         const std::string& descriptor_id = {});
std::string features_to_csv(const std::vector<FeatureVector>& features);

}  // namespace matattr::patchlab
