#pragma once

#include "matattr/attrmodel.hpp"
#include "matattr/core.hpp"
#include "matattr/macheads.hpp"
#include "matattr/patchlab.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace matattr::matclass {

struct AttributeHistogram {
  std::string region;
  Vector values;  // M blocks of B bins, each block sums to 1
  int bins = 10;
  int patch_count = 0;
};

/// Per-attribute B-bin histograms of N x M predictions in [0,1]. A value v
/// falls in bin min(floor(v * B), B - 1).
AttributeHistogram region_histogram(const Eigen::Ref<const Matrix>& predictions, int bins = 10,
                                    const std::string& region = {});

/// Histogram intersection: sum_i min(h1_i, h2_i).
template <typename D1, typename D2>
double hik(const Eigen::MatrixBase<D1>& h1, const Eigen::MatrixBase<D2>& h2) {
  require_dims(h1.size(), h2.size(), "histogram length");
  require(h1.minCoeff() >= 0.0 && h2.minCoeff() >= 0.0, ErrorKind::InvalidInput, "histograms must be non-negative");
  return h1.cwiseMin(h2).sum();
}

/// Gram matrix of HIK between the rows of X and the rows of Y.
Matrix hik_gram(const Eigen::Ref<const Matrix>& X, const Eigen::Ref<const Matrix>& Y);

struct SvmConfig {
  double C = 10.0;
  double tolerance = 1e-4;
  int max_iterations = 100000;
};

/// One-vs-rest kernel SVM with a precomputed-kernel interface.
struct KernelClassifier {
  Matrix train;                // N x dim training histograms
  std::vector<int> labels;     // class index per training row
  std::vector<int> classes;    // sorted distinct labels
  Matrix alpha_y;              // N x classes, alpha_i * y_i per binary problem
  Vector bias;                 // per binary problem

  /// Decision values, rows = samples, cols = classes.
  Matrix decision(const Eigen::Ref<const Matrix>& X) const;
  std::vector<int> predict(const Eigen::Ref<const Matrix>& X) const;
};

/// Binary soft-margin SVM dual solved with SMO (maximal-violating-pair
/// selection). y in {-1, +1}. Returns alpha and the bias.
struct BinarySvm {
  Vector alpha;
  double bias = 0.0;
  int iterations = 0;
};
BinarySvm smo(const Eigen::Ref<const Matrix>& gram, const std::vector<int>& y, const SvmConfig& cfg);

KernelClassifier fit_hik_svm(const Eigen::Ref<const Matrix>& X, const std::vector<int>& labels,
                             const SvmConfig& cfg = {});

struct ClassificationReport {
  std::vector<int> predicted;
  double accuracy = 0.0;
  std::vector<int> classes;
  std::vector<double> per_class_accuracy;
};

ClassificationReport fit_predict_material(const Eigen::Ref<const Matrix>& train, const std::vector<int>& train_labels,
                                          const Eigen::Ref<const Matrix>& test, const std::vector<int>& test_labels,
                                          const SvmConfig& cfg = {});

/// Nearest class centroid in Euclidean distance.
std::vector<int> nearest_centroid(const Eigen::Ref<const Matrix>& train, const std::vector<int>& train_labels,
                                  const Eigen::Ref<const Matrix>& test);

ClassificationReport score(const std::vector<int>& predicted, const std::vector<int>& truth);

// ---------------------------------------------------------------------------
// Per-pixel maps

struct AttributeMap {
  std::string image_id;
  std::string model_id;
  int width = 0, height = 0, stride = 0, patch_side = 0;
  std::vector<Eigen::ArrayXXf> planes;  // each height x width
};

/// Predicts one vector in [0,1]^M for a square window.
using WindowPredictor = std::function<Vector(const patchlab::Image&)>;

/// Window origins along one axis: evenly spread from 0 to length - side with
/// spacing at most `stride`, mirror-symmetric under reversal of the axis.
std::vector<int> window_origins(int length, int side, int stride);

/// Slides square windows that stay inside the image and averages the
/// predictions of every window covering a pixel. Output planes match the image.
AttributeMap sliding_window_maps(const patchlab::Image& image, const WindowPredictor& predictor, int stride = 8,
                                 int patch_side = 32);

WindowPredictor attrmodel_predictor(const attrmodel::TwoLayerModel& model,
                                    const patchlab::DescriptorRecipe& recipe = {});
/// Final attribute outputs followed by material probabilities.
WindowPredictor mac_predictor(const macheads::MacModel& model);

/// Raw little-endian f32 planes plus `<path>.json`.
void save_map(const std::filesystem::path& path, const AttributeMap& map);
AttributeMap load_map(const std::filesystem::path& path);
/// 8-bit grayscale PNG of one plane.
void save_plane_png(const std::filesystem::path& path, const AttributeMap& map, int plane);

// ---------------------------------------------------------------------------
// One-shot detection of a held-out category

struct LinearConfig {
  double lambda = 1e-3;
  int max_epochs = 1000;
  double tolerance = 1e-6;
};

/// L2-regularized hinge-loss linear classifier trained by dual coordinate
/// descent; the bias is an extra constant feature. y in {-1, +1}.
struct LinearClassifier {
  Vector w;
  double bias = 0.0;

  double decision(const Eigen::Ref<const Vector>& x) const { return w.dot(x) + bias; }
};
LinearClassifier fit_linear(const Eigen::Ref<const Matrix>& X, const std::vector<int>& y, const LinearConfig& cfg = {},
                            std::uint64_t seed = 0);

/// Per-image features for the one-shot protocol.
struct OneShotFeatures {
  Matrix attributes;  // N x M
  Matrix materials;   // N x (K - 1)
  std::vector<int> target;  // 1 when the image shows the held-out category

  Matrix both() const;
};

OneShotFeatures one_shot_features(const macheads::MacModel& model, const std::vector<patchlab::Image>& images,
                                  const std::vector<int>& target);

struct OneShotCurve {
  std::vector<int> shots;
  std::vector<double> attributes, materials, both;
};

/// For every shot count n, draws n positive and n negative examples from the
/// pool, fits one linear classifier per feature set, and measures balanced
/// accuracy on the test set. Averaged over `repetitions` paired draws.
OneShotCurve one_shot_eval(const OneShotFeatures& pool, const OneShotFeatures& test, const std::vector<int>& shots,
                           int repetitions, std::uint64_t seed, const LinearConfig& cfg = {});

double balanced_accuracy(const std::vector<int>& predicted, const std::vector<int>& truth);

}  // namespace matattr::matclass
