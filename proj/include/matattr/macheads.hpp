#pragma once

#include "matattr/attrspace.hpp"
#include "matattr/core.hpp"
#include "matattr/patchlab.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace matattr::macheads {

/// Per-level pooled activations h_i of one image.
struct FeaturePyramid {
  std::vector<Vector> levels;

  std::vector<Index> dims() const;
};

/// 3x3 "same" convolution, weights laid out Cout x (Cin * 9) (channel-major, then ky, kx).
struct ConvLayer {
  Matrix W;
  Vector b;

  Index in_channels() const { return W.cols() / 9; }
  Index out_channels() const { return W.rows(); }
};

/// Small conv hierarchy: each level is conv3x3 -> ReLU -> 2x average pool,
/// global-average-pooled into h_i. The category head is affine + softmax on
/// the last level.
struct ToyExtractor {
  std::vector<ConvLayer> conv;
  Matrix Wcls;  // K x C_L
  Vector bcls;

  Index levels() const { return static_cast<Index>(conv.size()); }
  Index num_categories() const { return Wcls.rows(); }
  std::vector<Index> level_dims() const;
  void validate() const;

  static ToyExtractor initialize(const std::vector<int>& channels, Index num_categories, Rng& rng);
};

/// Per-level affine + clamp heads and an affine + clamp combiner over the
/// concatenated level outputs.
struct HeadStack {
  std::vector<Matrix> W;  // M x dim_i
  std::vector<Vector> b;
  Matrix Wc;  // M x (L * M)
  Vector bc;

  Index levels() const { return static_cast<Index>(W.size()); }
  Index attributes() const { return Wc.rows(); }
  void validate() const;

  static HeadStack initialize(const std::vector<Index>& level_dims, Index num_attributes, Rng& rng);
};

struct HeadOutput {
  std::vector<Vector> level;
  Vector final;
};

HeadOutput head_forward(const HeadStack& stack, const FeaturePyramid& pyramid);

/// Image (any size >= 2^L) to the feature pyramid.
FeaturePyramid extract_pyramid(const ToyExtractor& ex, const patchlab::Image& image);
/// Category probabilities from the last pyramid level.
Vector category_probabilities(const ToyExtractor& ex, const FeaturePyramid& pyramid);

/// u = (1/K) sum_k ||a_k - mean_{j: c_j = k} out_j||_1 for one level's N x M outputs.
double aux_loss_u(const Eigen::Ref<const Matrix>& outputs, const std::vector<int>& categories,
                  const Eigen::Ref<const Matrix>& A);
Matrix aux_loss_u_gradient(const Eigen::Ref<const Matrix>& outputs, const std::vector<int>& categories,
                           const Eigen::Ref<const Matrix>& A);

/// KL-of-KDE of the final-layer outputs against the Beta target.
double aux_loss_d(const Eigen::Ref<const Matrix>& final_outputs, const attrspace::KdeConfig& cfg);
Matrix aux_loss_d_gradient(const Eigen::Ref<const Matrix>& final_outputs, const attrspace::KdeConfig& cfg);

struct MacConfig {
  std::vector<int> channels{8, 16, 32};
  bool use_heads = true;
  double w_u = 1.0;   // weight on each u_i
  double w_d = 1e-4;  // weight on d
  double step_size = 0.01;
  double momentum = 0.9;
  double decay = 0.1;  // step multiplier when the validation error rate increases
  double min_step = 1e-8;
  int batch_size = 32;
  int epochs = 30;
  double validation_fraction = 0.1;
  std::uint64_t seed = 0;
  attrspace::KdeConfig kde;
};

struct MacModel {
  ToyExtractor extractor;
  HeadStack heads;
  bool has_heads = true;
};

struct MacEpoch {
  double cross_entropy = 0.0;
  std::vector<double> u;  // levels 1..L, then the final layer
  double d = 0.0;
  double validation_loss = 0.0;
  double validation_accuracy = 0.0;
  double step_size = 0.0;
};

struct MacResult {
  MacModel model;
  std::vector<MacEpoch> trace;
};

/// Joint SGD with momentum on cross-entropy + w_u * sum_i u_i + w_d * d.
/// u is applied to every level and to the combined final layer; d to the
/// final layer only. Training stops once the step falls below min_step.
MacResult train_mac(const std::vector<patchlab::Image>& images, const std::vector<int>& categories,
                    const Eigen::Ref<const Matrix>& A, const MacConfig& cfg);

struct MacPrediction {
  Vector probabilities;
  HeadOutput attributes;  // empty when the model has no heads
};

MacPrediction predict(const MacModel& model, const patchlab::Image& image);

double category_accuracy(const MacModel& model, const std::vector<patchlab::Image>& images,
                         const std::vector<int>& categories);
/// Mean absolute error between per-category means of the final attribute
/// output and the rows of A.
double attribute_mae(const MacModel& model, const std::vector<patchlab::Image>& images,
                     const std::vector<int>& categories, const Eigen::Ref<const Matrix>& A);

std::string model_to_json(const MacModel& model, const MacConfig& cfg);
MacModel model_from_json(const std::string& text);
void save_model(const std::filesystem::path& path, const MacModel& model, const MacConfig& cfg);
MacModel load_model(const std::filesystem::path& path);

}  // namespace matattr::macheads
