#pragma once

#include "matattr/attrspace.hpp"
#include "matattr/core.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace matattr::attrmodel {

/// f(x) = h(W2 h(W1 x + b1) + b2) with h the clamp to [0,1].
struct TwoLayerModel {
  Matrix W1;  // H x D
  Vector b1;
  Matrix W2;  // M x H
  Vector b2;

  Index input_dim() const { return W1.cols(); }
  Index hidden_dim() const { return W1.rows(); }
  Index output_dim() const { return W2.rows(); }
  void validate() const;

  static TwoLayerModel initialize(Index input_dim, Index hidden_dim, Index output_dim, Rng& rng);
};

/// Per-weight keep mask (1 keep, 0 drop) and the scale applied to kept weights.
struct WeightMask {
  Matrix keep1;  // H x D
  Matrix keep2;  // M x H
  double scale = 1.0;

  static WeightMask sample(const TwoLayerModel& model, double drop_fraction, Rng& rng);
  static WeightMask all_ones(const TwoLayerModel& model);
};

enum class SeparationForm {
  Signed,   // sum_m w_m d_m^2: pairs with w<0 attract, w>0 repel
  Squared,  // literal p_ij^T p_ij = sum_m w_m^2 d_m^2
};

struct TrainConfig {
  Index hidden = 64;
  double w1 = 1e-4;  // distribution term
  double w2 = 1e-5;  // separation term
  double mask_fraction = 0.5;
  int batch_size = 256;
  double step_size = 0.01;
  double momentum = 0.5;
  double decay = 0.5;  // step multiplier when validation stops improving
  int patience = 3;    // epochs without a new best validation loss before decaying
  double min_step = 1e-6;
  double validation_fraction = 0.1;
  int epochs = 80;
  int unmasked_epochs = 20;  // trailing epochs trained without the mask
  std::uint64_t seed = 0;
  SeparationForm separation = SeparationForm::Signed;
  attrspace::KdeConfig kde;
};

/// Batch forward pass; X is N x D, the result N x M.
Matrix forward(const TwoLayerModel& model, const Eigen::Ref<const Matrix>& X, const WeightMask* mask = nullptr);
Vector forward_one(const TwoLayerModel& model, const Eigen::Ref<const Vector>& x, const WeightMask* mask = nullptr);

/// Per-category mean of prediction rows; every category in [0, K) must occur.
Matrix category_means(const Eigen::Ref<const Matrix>& predictions, const std::vector<int>& categories, Index K);

/// sum_k ||a_k - mean_{i: c_i = k} f(x_i)||^2
double loss_unary(const Eigen::Ref<const Matrix>& predictions, const std::vector<int>& categories,
                  const Eigen::Ref<const Matrix>& A);
Matrix loss_unary_gradient(const Eigen::Ref<const Matrix>& predictions, const std::vector<int>& categories,
                           const Eigen::Ref<const Matrix>& A);

/// KL-of-KDE of every prediction value against the Beta target.
double loss_distribution(const Eigen::Ref<const Matrix>& predictions, const attrspace::KdeConfig& cfg);
Matrix loss_distribution_gradient(const Eigen::Ref<const Matrix>& predictions, const attrspace::KdeConfig& cfg);

/// Weighted separation over ordered cross-category pairs, with per-component
/// weights w_m = 2|a_{c_i,m} - a_{c_j,m}| - 1. Enters the objective with a minus sign.
double loss_separation(const Eigen::Ref<const Matrix>& predictions, const std::vector<int>& categories,
                       const Eigen::Ref<const Matrix>& A, SeparationForm form = SeparationForm::Signed);
Matrix loss_separation_gradient(const Eigen::Ref<const Matrix>& predictions, const std::vector<int>& categories,
                                const Eigen::Ref<const Matrix>& A, SeparationForm form = SeparationForm::Signed);

struct LossTerms {
  double unary = 0.0;
  double distribution = 0.0;
  double separation = 0.0;
  double total = 0.0;  // unary + w1 * distribution - w2 * separation
};

LossTerms evaluate(const TwoLayerModel& model, const Eigen::Ref<const Matrix>& X, const std::vector<int>& categories,
                   const Eigen::Ref<const Matrix>& A, const TrainConfig& cfg, const WeightMask* mask = nullptr);

struct Gradients {
  Matrix W1, W2;
  Vector b1, b2;
};

/// Gradient of the full objective w.r.t. every parameter (through the mask).
Gradients objective_gradient(const TwoLayerModel& model, const Eigen::Ref<const Matrix>& X,
                             const std::vector<int>& categories, const Eigen::Ref<const Matrix>& A,
                             const TrainConfig& cfg, const WeightMask* mask = nullptr);

/// Backpropagates dLoss/dPredictions through the network.
Gradients backprop(const TwoLayerModel& model, const Eigen::Ref<const Matrix>& X,
                   const Eigen::Ref<const Matrix>& dpredictions, const WeightMask* mask = nullptr);

struct EpochRecord {
  double train_total = 0.0;  // mean masked mini-batch objective
  LossTerms train;           // unmasked, full training split
  double validation_total = 0.0;
  double step_size = 0.0;
};

struct TrainResult {
  TwoLayerModel model;
  std::vector<EpochRecord> trace;
};

/// Mini-batch SGD on r + w1*kappa - w2*pi. Batches are stratified so every
/// category appears in each; a fresh weight mask is drawn per batch.
TrainResult train(const Eigen::Ref<const Matrix>& X, const std::vector<int>& categories,
                  const Eigen::Ref<const Matrix>& A, const TrainConfig& cfg);

std::string model_to_json(const TwoLayerModel& model, const TrainConfig& cfg);
TwoLayerModel model_from_json(const std::string& text);
void save_model(const std::filesystem::path& path, const TwoLayerModel& model, const TrainConfig& cfg);
TwoLayerModel load_model(const std::filesystem::path& path);

/// Stratified batches: each category's shuffled members are dealt round-robin.
std::vector<std::vector<Index>> stratified_batches(const std::vector<int>& categories, Index K, int batch_size,
                                                   Rng& rng);

}  // namespace matattr::attrmodel
