#include "matattr/attrmodel.hpp"

#include "json_matrix.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace matattr::attrmodel {

using nlohmann::json;

namespace {

Eigen::ArrayXXd clamp_grad(const Matrix& z) {
  return ((z.array() >= 0.0) && (z.array() <= 1.0)).cast<double>();
}

Matrix clamp(const Matrix& z) { return z.cwiseMax(0.0).cwiseMin(1.0); }

std::vector<Index> counts_per_category(const std::vector<int>& categories, Index K) {
  std::vector<Index> n(static_cast<std::size_t>(K), 0);
  for (int c : categories) {
    require(c >= 0 && c < K, ErrorKind::InvalidInput, "category index " + std::to_string(c) + " out of range");
    ++n[static_cast<std::size_t>(c)];
  }
  return n;
}

Matrix separation_weights(const Eigen::Ref<const Matrix>& A, Index k, Index l, SeparationForm form) {
  Matrix w = (2.0 * (A.row(k) - A.row(l)).cwiseAbs().array() - 1.0).matrix();
  if (form == SeparationForm::Squared) w = w.cwiseProduct(w);
  return w;
}

}  // namespace

void TwoLayerModel::validate() const {
  require(b1.size() == W1.rows() && W2.cols() == W1.rows() && b2.size() == W2.rows(), ErrorKind::Dimension,
          "two-layer model shapes are inconsistent");
  require(W1.allFinite() && W2.allFinite() && b1.allFinite() && b2.allFinite(), ErrorKind::Numerical,
          "two-layer model has non-finite parameters");
}

TwoLayerModel TwoLayerModel::initialize(Index input_dim, Index hidden_dim, Index output_dim, Rng& rng) {
  TwoLayerModel m;
  m.W1.resize(hidden_dim, input_dim);
  m.W2.resize(output_dim, hidden_dim);
  const double s1 = 1.0 / std::sqrt(static_cast<double>(input_dim));
  const double s2 = 0.1 / std::sqrt(static_cast<double>(hidden_dim));
  for (Index i = 0; i < m.W1.size(); ++i) m.W1(i) = s1 * normal(rng);
  for (Index i = 0; i < m.W2.size(); ++i) m.W2(i) = s2 * normal(rng);
  // Start every unit inside the linear part of the clamp.
  m.b1 = Vector::Constant(hidden_dim, 0.5);
  m.b2 = Vector::Constant(output_dim, 0.5);
  return m;
}

WeightMask WeightMask::sample(const TwoLayerModel& model, double drop_fraction, Rng& rng) {
  require(drop_fraction >= 0.0 && drop_fraction < 1.0, ErrorKind::InvalidInput, "mask fraction must be in [0,1)");
  WeightMask mask;
  mask.keep1.resize(model.W1.rows(), model.W1.cols());
  mask.keep2.resize(model.W2.rows(), model.W2.cols());
  for (Index i = 0; i < mask.keep1.size(); ++i) mask.keep1(i) = uniform(rng) < drop_fraction ? 0.0 : 1.0;
  for (Index i = 0; i < mask.keep2.size(); ++i) mask.keep2(i) = uniform(rng) < drop_fraction ? 0.0 : 1.0;
  mask.scale = 1.0 / (1.0 - drop_fraction);
  return mask;
}

WeightMask WeightMask::all_ones(const TwoLayerModel& model) {
  return {Matrix::Ones(model.W1.rows(), model.W1.cols()), Matrix::Ones(model.W2.rows(), model.W2.cols()), 1.0};
}

namespace {

struct Activations {
  Matrix W1, W2;  // effective (masked) weights
  Matrix z1, h1, z2, out;
};

Activations run(const TwoLayerModel& model, const Eigen::Ref<const Matrix>& X, const WeightMask* mask) {
  require_dims(X.cols(), model.input_dim(), "feature dimension");
  Activations a;
  if (mask) {
    a.W1 = mask->scale * model.W1.cwiseProduct(mask->keep1);
    a.W2 = mask->scale * model.W2.cwiseProduct(mask->keep2);
  } else {
    a.W1 = model.W1;
    a.W2 = model.W2;
  }
  a.z1 = (X * a.W1.transpose()).rowwise() + model.b1.transpose();
  a.h1 = clamp(a.z1);
  a.z2 = (a.h1 * a.W2.transpose()).rowwise() + model.b2.transpose();
  a.out = clamp(a.z2);
  return a;
}

Gradients backprop_from(const Activations& a, const Eigen::Ref<const Matrix>& X, const Eigen::Ref<const Matrix>& dout,
                        const WeightMask* mask) {
  Gradients g;
  const Matrix dz2 = (dout.array() * clamp_grad(a.z2)).matrix();
  g.W2 = dz2.transpose() * a.h1;
  g.b2 = dz2.colwise().sum().transpose();
  const Matrix dz1 = ((dz2 * a.W2).array() * clamp_grad(a.z1)).matrix();
  g.W1 = dz1.transpose() * X;
  g.b1 = dz1.colwise().sum().transpose();
  if (mask) {
    g.W1 = mask->scale * g.W1.cwiseProduct(mask->keep1);
    g.W2 = mask->scale * g.W2.cwiseProduct(mask->keep2);
  }
  return g;
}

}  // namespace

Matrix forward(const TwoLayerModel& model, const Eigen::Ref<const Matrix>& X, const WeightMask* mask) {
  return run(model, X, mask).out;
}

Vector forward_one(const TwoLayerModel& model, const Eigen::Ref<const Vector>& x, const WeightMask* mask) {
  const Matrix X = x.transpose();
  return run(model, X, mask).out.row(0).transpose();
}

Matrix category_means(const Eigen::Ref<const Matrix>& predictions, const std::vector<int>& categories, Index K) {
  require_dims(static_cast<Index>(categories.size()), predictions.rows(), "category labels");
  const auto n = counts_per_category(categories, K);
  Matrix means = Matrix::Zero(K, predictions.cols());
  for (std::size_t i = 0; i < categories.size(); ++i) means.row(categories[i]) += predictions.row(static_cast<Index>(i));
  for (Index k = 0; k < K; ++k) {
    if (n[static_cast<std::size_t>(k)] == 0)
      fail(ErrorKind::MissingCategory, "category " + std::to_string(k) + " has no predictions in the group");
    means.row(k) /= static_cast<double>(n[static_cast<std::size_t>(k)]);
  }
  return means;
}

double loss_unary(const Eigen::Ref<const Matrix>& predictions, const std::vector<int>& categories,
                  const Eigen::Ref<const Matrix>& A) {
  require_dims(predictions.cols(), A.cols(), "attribute count");
  return (A - category_means(predictions, categories, A.rows())).squaredNorm();
}

Matrix loss_unary_gradient(const Eigen::Ref<const Matrix>& predictions, const std::vector<int>& categories,
                           const Eigen::Ref<const Matrix>& A) {
  const Matrix means = category_means(predictions, categories, A.rows());
  const auto n = counts_per_category(categories, A.rows());
  Matrix g(predictions.rows(), predictions.cols());
  for (std::size_t i = 0; i < categories.size(); ++i) {
    const int k = categories[i];
    g.row(static_cast<Index>(i)) = -2.0 * (A.row(k) - means.row(k)) / static_cast<double>(n[static_cast<std::size_t>(k)]);
  }
  return g;
}

double loss_distribution(const Eigen::Ref<const Matrix>& predictions, const attrspace::KdeConfig& cfg) {
  return attrspace::beta_kl(predictions, cfg);
}

Matrix loss_distribution_gradient(const Eigen::Ref<const Matrix>& predictions, const attrspace::KdeConfig& cfg) {
  return attrspace::beta_kl_gradient(predictions, cfg);
}

double loss_separation(const Eigen::Ref<const Matrix>& predictions, const std::vector<int>& categories,
                       const Eigen::Ref<const Matrix>& A, SeparationForm form) {
  require_dims(static_cast<Index>(categories.size()), predictions.rows(), "category labels");
  require_dims(predictions.cols(), A.cols(), "attribute count");
  const Index K = A.rows(), M = A.cols();
  const auto n = counts_per_category(categories, K);
  // Per-category sums of f and f^2 reduce the pair sum to O(K^2 M).
  Matrix S = Matrix::Zero(K, M), Q = Matrix::Zero(K, M);
  for (std::size_t i = 0; i < categories.size(); ++i) {
    S.row(categories[i]) += predictions.row(static_cast<Index>(i));
    Q.row(categories[i]) += predictions.row(static_cast<Index>(i)).cwiseAbs2();
  }
  double total = 0.0;
  for (Index k = 0; k < K; ++k)
    for (Index l = 0; l < K; ++l) {
      if (k == l || n[static_cast<std::size_t>(k)] == 0 || n[static_cast<std::size_t>(l)] == 0) continue;
      const Matrix w = separation_weights(A, k, l, form);
      const double nk = static_cast<double>(n[static_cast<std::size_t>(k)]);
      const double nl = static_cast<double>(n[static_cast<std::size_t>(l)]);
      const Matrix pair = nl * Q.row(k) + nk * Q.row(l) - 2.0 * S.row(k).cwiseProduct(S.row(l));
      total += w.cwiseProduct(pair).sum();
    }
  return total;
}

Matrix loss_separation_gradient(const Eigen::Ref<const Matrix>& predictions, const std::vector<int>& categories,
                                const Eigen::Ref<const Matrix>& A, SeparationForm form) {
  const Index K = A.rows(), M = A.cols();
  const auto n = counts_per_category(categories, K);
  Matrix S = Matrix::Zero(K, M);
  for (std::size_t i = 0; i < categories.size(); ++i) S.row(categories[i]) += predictions.row(static_cast<Index>(i));
  // For i in k: 4 sum_{l != k} w_kl (n_l f_i - S_l).
  std::vector<Matrix> wsum(static_cast<std::size_t>(K), Matrix::Zero(1, M));
  std::vector<Matrix> wS(static_cast<std::size_t>(K), Matrix::Zero(1, M));
  for (Index k = 0; k < K; ++k)
    for (Index l = 0; l < K; ++l) {
      if (k == l || n[static_cast<std::size_t>(l)] == 0) continue;
      const Matrix w = separation_weights(A, k, l, form);
      wsum[static_cast<std::size_t>(k)] += static_cast<double>(n[static_cast<std::size_t>(l)]) * w;
      wS[static_cast<std::size_t>(k)] += w.cwiseProduct(S.row(l));
    }
  Matrix g(predictions.rows(), M);
  for (std::size_t i = 0; i < categories.size(); ++i) {
    const auto k = static_cast<std::size_t>(categories[i]);
    g.row(static_cast<Index>(i)) =
        4.0 * (wsum[k].cwiseProduct(predictions.row(static_cast<Index>(i))) - wS[k]);
  }
  return g;
}

LossTerms evaluate(const TwoLayerModel& model, const Eigen::Ref<const Matrix>& X, const std::vector<int>& categories,
                   const Eigen::Ref<const Matrix>& A, const TrainConfig& cfg, const WeightMask* mask) {
  const Matrix F = forward(model, X, mask);
  LossTerms t;
  t.unary = loss_unary(F, categories, A);
  t.distribution = cfg.w1 != 0.0 ? loss_distribution(F, cfg.kde) : 0.0;
  t.separation = cfg.w2 != 0.0 ? loss_separation(F, categories, A, cfg.separation) : 0.0;
  t.total = t.unary + cfg.w1 * t.distribution - cfg.w2 * t.separation;
  return t;
}

Gradients backprop(const TwoLayerModel& model, const Eigen::Ref<const Matrix>& X,
                   const Eigen::Ref<const Matrix>& dpredictions, const WeightMask* mask) {
  return backprop_from(run(model, X, mask), X, dpredictions, mask);
}

Gradients objective_gradient(const TwoLayerModel& model, const Eigen::Ref<const Matrix>& X,
                             const std::vector<int>& categories, const Eigen::Ref<const Matrix>& A,
                             const TrainConfig& cfg, const WeightMask* mask) {
  const Activations act = run(model, X, mask);
  Matrix dF = loss_unary_gradient(act.out, categories, A);
  if (cfg.w1 != 0.0) dF += cfg.w1 * loss_distribution_gradient(act.out, cfg.kde);
  if (cfg.w2 != 0.0) dF -= cfg.w2 * loss_separation_gradient(act.out, categories, A, cfg.separation);
  return backprop_from(act, X, dF, mask);
}

std::vector<std::vector<Index>> stratified_batches(const std::vector<int>& categories, Index K, int batch_size,
                                                   Rng& rng) {
  const auto n = counts_per_category(categories, K);
  const Index smallest = *std::min_element(n.begin(), n.end());
  require(smallest >= 1, ErrorKind::MissingCategory, "every category needs at least one training example");
  const Index N = static_cast<Index>(categories.size());
  const Index wanted = (N + batch_size - 1) / std::max(1, batch_size);
  const Index count = std::max<Index>(1, std::min(wanted, smallest));
  std::vector<std::vector<Index>> members(static_cast<std::size_t>(K));
  for (Index i = 0; i < N; ++i) members[static_cast<std::size_t>(categories[static_cast<std::size_t>(i)])].push_back(i);
  std::vector<std::vector<Index>> batches(static_cast<std::size_t>(count));
  std::size_t cursor = 0;
  for (auto& group : members) {
    shuffle(group, rng);
    for (Index idx : group) batches[cursor++ % batches.size()].push_back(idx);
  }
  return batches;
}

TrainResult train(const Eigen::Ref<const Matrix>& X, const std::vector<int>& categories,
                  const Eigen::Ref<const Matrix>& A, const TrainConfig& cfg) {
  require_dims(static_cast<Index>(categories.size()), X.rows(), "category labels");
  require(cfg.batch_size >= 1 && cfg.epochs >= 0 && cfg.unmasked_epochs >= 0, ErrorKind::InvalidInput,
          "bad training schedule");
  const Index K = A.rows();
  Rng rng(derive_seed(cfg.seed, 0x7A1));

  // Stratified validation split for the step-decay rule.
  std::vector<Index> train_idx, val_idx;
  {
    std::vector<std::vector<Index>> members(static_cast<std::size_t>(K));
    for (std::size_t i = 0; i < categories.size(); ++i)
      members[static_cast<std::size_t>(categories[i])].push_back(static_cast<Index>(i));
    for (auto& group : members) {
      require(!group.empty(), ErrorKind::MissingCategory, "training data does not cover every category");
      shuffle(group, rng);
      const auto nval = group.size() >= 4 ? static_cast<std::size_t>(cfg.validation_fraction * group.size()) : 0;
      val_idx.insert(val_idx.end(), group.begin(), group.begin() + static_cast<std::ptrdiff_t>(nval));
      train_idx.insert(train_idx.end(), group.begin() + static_cast<std::ptrdiff_t>(nval), group.end());
    }
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(val_idx.begin(), val_idx.end());
  }
  auto gather = [&](const std::vector<Index>& idx, Matrix& Xs, std::vector<int>& cs) {
    Xs.resize(static_cast<Index>(idx.size()), X.cols());
    cs.resize(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      Xs.row(static_cast<Index>(i)) = X.row(idx[i]);
      cs[i] = categories[static_cast<std::size_t>(idx[i])];
    }
  };
  Matrix Xt, Xv;
  std::vector<int> ct, cv;
  gather(train_idx, Xt, ct);
  gather(val_idx, Xv, cv);

  TrainResult result;
  result.model = TwoLayerModel::initialize(X.cols(), cfg.hidden, A.cols(), rng);
  TwoLayerModel& model = result.model;
  Gradients velocity{Matrix::Zero(model.W1.rows(), model.W1.cols()), Matrix::Zero(model.W2.rows(), model.W2.cols()),
                     Vector::Zero(model.b1.size()), Vector::Zero(model.b2.size())};
  double step = cfg.step_size;
  double best_val = std::numeric_limits<double>::infinity();
  int stale = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const bool masked_phase = cfg.mask_fraction > 0.0 && epoch < cfg.epochs - cfg.unmasked_epochs;
    if (cfg.mask_fraction > 0.0 && epoch == cfg.epochs - cfg.unmasked_epochs) {
      // The unmasked phase restarts the step schedule.
      step = cfg.step_size;
      best_val = std::numeric_limits<double>::infinity();
      stale = 0;
    }
    const auto batches = stratified_batches(ct, K, cfg.batch_size, rng);
    KahanSum epoch_loss;
    for (const auto& batch : batches) {
      Matrix Xb(static_cast<Index>(batch.size()), X.cols());
      std::vector<int> cb(batch.size());
      for (std::size_t i = 0; i < batch.size(); ++i) {
        Xb.row(static_cast<Index>(i)) = Xt.row(batch[i]);
        cb[i] = ct[static_cast<std::size_t>(batch[i])];
      }
      std::optional<WeightMask> mask;
      if (masked_phase) mask = WeightMask::sample(model, cfg.mask_fraction, rng);
      const WeightMask* mp = mask ? &*mask : nullptr;
      const LossTerms terms = evaluate(model, Xb, cb, A, cfg, mp);
      if (!std::isfinite(terms.total))
        fail(ErrorKind::Numerical, "training diverged at epoch " + std::to_string(epoch));
      epoch_loss.add(terms.total);
      const Gradients g = objective_gradient(model, Xb, cb, A, cfg, mp);
      velocity.W1 = cfg.momentum * velocity.W1 - step * g.W1;
      velocity.W2 = cfg.momentum * velocity.W2 - step * g.W2;
      velocity.b1 = cfg.momentum * velocity.b1 - step * g.b1;
      velocity.b2 = cfg.momentum * velocity.b2 - step * g.b2;
      model.W1 += velocity.W1;
      model.W2 += velocity.W2;
      model.b1 += velocity.b1;
      model.b2 += velocity.b2;
    }
    EpochRecord rec;
    rec.train_total = epoch_loss.value() / static_cast<double>(batches.size());
    rec.train = evaluate(model, Xt, ct, A, cfg);
    rec.step_size = step;
    if (!std::isfinite(rec.train.total) || !model.W1.allFinite() || !model.W2.allFinite())
      fail(ErrorKind::Numerical, "training diverged at epoch " + std::to_string(epoch));
    if (!val_idx.empty()) {
      // Validation uses the unary and distribution terms; every category is present.
      rec.validation_total = evaluate(model, Xv, cv, A, cfg).total;
      if (rec.validation_total < best_val) {
        best_val = rec.validation_total;
        stale = 0;
      } else if (++stale >= cfg.patience) {
        step = std::max(cfg.min_step, step * cfg.decay);
        stale = 0;
      }
    }
    result.trace.push_back(rec);
  }
  return result;
}

std::string model_to_json(const TwoLayerModel& model, const TrainConfig& cfg) {
  json j = {{"D", model.input_dim()},
            {"H", model.hidden_dim()},
            {"M", model.output_dim()},
            {"W1", detail::matrix_to_json(model.W1)},
            {"b1", detail::vector_to_json(model.b1)},
            {"W2", detail::matrix_to_json(model.W2)},
            {"b2", detail::vector_to_json(model.b2)},
            {"config",
             {{"w1", cfg.w1},
              {"w2", cfg.w2},
              {"mask_fraction", cfg.mask_fraction},
              {"batch_size", cfg.batch_size},
              {"step_size", cfg.step_size},
              {"momentum", cfg.momentum},
              {"decay", cfg.decay},
              {"patience", cfg.patience},
              {"epochs", cfg.epochs},
              {"unmasked_epochs", cfg.unmasked_epochs},
              {"separation", cfg.separation == SeparationForm::Signed ? "signed" : "squared"},
              {"bandwidth", cfg.kde.bandwidth}}},
            {"seed", cfg.seed}};
  return j.dump() + "\n";
}

TwoLayerModel model_from_json(const std::string& text) {
  return detail::parse_json(text, "model file", [](const json& j) {
    const Index D = j.at("D").get<Index>(), H = j.at("H").get<Index>(), M = j.at("M").get<Index>();
    TwoLayerModel m;
    m.W1 = detail::matrix_from_json(j.at("W1"), H, D, "W1");
    m.W2 = detail::matrix_from_json(j.at("W2"), M, H, "W2");
    m.b1 = detail::vector_from_json(j.at("b1"), H, "b1");
    m.b2 = detail::vector_from_json(j.at("b2"), M, "b2");
    m.validate();
    return m;
  });
}

void save_model(const std::filesystem::path& path, const TwoLayerModel& model, const TrainConfig& cfg) {
  write_file_atomic(path, model_to_json(model, cfg));
}

TwoLayerModel load_model(const std::filesystem::path& path) { return model_from_json(read_file(path)); }

}  // namespace matattr::attrmodel
