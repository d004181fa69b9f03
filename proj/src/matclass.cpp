#include "matattr/matclass.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <set>

namespace matattr::matclass {

using nlohmann::json;
namespace fs = std::filesystem;

AttributeHistogram region_histogram(const Eigen::Ref<const Matrix>& predictions, int bins, const std::string& region) {
  require(predictions.rows() >= 1, ErrorKind::InvalidInput, "region '" + region + "' has no patches");
  require(bins >= 1, ErrorKind::InvalidInput, "histogram needs at least one bin");
  const Index N = predictions.rows(), M = predictions.cols();
  AttributeHistogram h;
  h.region = region;
  h.bins = bins;
  h.patch_count = static_cast<int>(N);
  h.values = Vector::Zero(M * bins);
  for (Index i = 0; i < N; ++i)
    for (Index m = 0; m < M; ++m) {
      const double v = predictions(i, m);
      require(v >= 0.0 && v <= 1.0, ErrorKind::OutOfRange, "prediction outside [0,1]");
      const int b = std::min(static_cast<int>(std::floor(v * bins)), bins - 1);
      h.values(m * bins + b) += 1.0;
    }
  h.values /= static_cast<double>(N);
  return h;
}

Matrix hik_gram(const Eigen::Ref<const Matrix>& X, const Eigen::Ref<const Matrix>& Y) {
  require_dims(X.cols(), Y.cols(), "histogram length");
  require(X.size() == 0 || X.minCoeff() >= 0.0, ErrorKind::InvalidInput, "histograms must be non-negative");
  require(Y.size() == 0 || Y.minCoeff() >= 0.0, ErrorKind::InvalidInput, "histograms must be non-negative");
  Matrix G(X.rows(), Y.rows());
  for (Index i = 0; i < X.rows(); ++i)
    for (Index j = 0; j < Y.rows(); ++j) G(i, j) = X.row(i).cwiseMin(Y.row(j)).sum();
  return G;
}

BinarySvm smo(const Eigen::Ref<const Matrix>& gram, const std::vector<int>& y, const SvmConfig& cfg) {
  const Index n = gram.rows();
  require_dims(gram.cols(), n, "gram matrix");
  require_dims(static_cast<Index>(y.size()), n, "labels");
  const double C = cfg.C;
  constexpr double tau = 1e-12;
  auto Q = [&](Index i, Index j) { return y[static_cast<std::size_t>(i)] * y[static_cast<std::size_t>(j)] * gram(i, j); };
  auto yi = [&](Index i) { return static_cast<double>(y[static_cast<std::size_t>(i)]); };

  BinarySvm out;
  Vector& alpha = out.alpha;
  alpha = Vector::Zero(n);
  Vector G = Vector::Constant(n, -1.0);
  auto up = [&](Index t) { return (yi(t) > 0 && alpha(t) < C) || (yi(t) < 0 && alpha(t) > 0); };
  auto low = [&](Index t) { return (yi(t) > 0 && alpha(t) > 0) || (yi(t) < 0 && alpha(t) < C); };

  for (; out.iterations < cfg.max_iterations; ++out.iterations) {
    Index i = -1, j = -1;
    double gmax = -std::numeric_limits<double>::infinity(), gmin = std::numeric_limits<double>::infinity();
    for (Index t = 0; t < n; ++t) {
      const double v = -yi(t) * G(t);
      if (up(t) && v > gmax) {
        gmax = v;
        i = t;
      }
      if (low(t) && v < gmin) {
        gmin = v;
        j = t;
      }
    }
    if (i < 0 || j < 0 || gmax - gmin < cfg.tolerance) break;

    const double ai = alpha(i), aj = alpha(j);
    if (y[static_cast<std::size_t>(i)] != y[static_cast<std::size_t>(j)]) {
      double quad = Q(i, i) + Q(j, j) + 2.0 * Q(i, j);
      if (quad <= 0) quad = tau;
      const double delta = (-G(i) - G(j)) / quad;
      const double diff = ai - aj;
      alpha(i) += delta;
      alpha(j) += delta;
      if (diff > 0) {
        if (alpha(j) < 0) {
          alpha(j) = 0;
          alpha(i) = diff;
        }
      } else if (alpha(i) < 0) {
        alpha(i) = 0;
        alpha(j) = -diff;
      }
      if (diff > 0) {
        if (alpha(i) > C) {
          alpha(i) = C;
          alpha(j) = C - diff;
        }
      } else if (alpha(j) > C) {
        alpha(j) = C;
        alpha(i) = C + diff;
      }
    } else {
      double quad = Q(i, i) + Q(j, j) - 2.0 * Q(i, j);
      if (quad <= 0) quad = tau;
      const double delta = (G(i) - G(j)) / quad;
      const double sum = ai + aj;
      alpha(i) -= delta;
      alpha(j) += delta;
      if (sum > C) {
        if (alpha(i) > C) {
          alpha(i) = C;
          alpha(j) = sum - C;
        }
      } else if (alpha(j) < 0) {
        alpha(j) = 0;
        alpha(i) = sum;
      }
      if (sum > C) {
        if (alpha(j) > C) {
          alpha(j) = C;
          alpha(i) = sum - C;
        }
      } else if (alpha(i) < 0) {
        alpha(i) = 0;
        alpha(j) = sum;
      }
    }
    const double di = alpha(i) - ai, dj = alpha(j) - aj;
    for (Index t = 0; t < n; ++t) G(t) += Q(t, i) * di + Q(t, j) * dj;
  }

  // rho from free vectors, else the midpoint of the feasible interval.
  double ub = std::numeric_limits<double>::infinity(), lb = -std::numeric_limits<double>::infinity(), sum = 0.0;
  int free = 0;
  for (Index t = 0; t < n; ++t) {
    const double yg = yi(t) * G(t);
    if (alpha(t) >= C) {
      if (yi(t) < 0) ub = std::min(ub, yg);
      else lb = std::max(lb, yg);
    } else if (alpha(t) <= 0) {
      if (yi(t) > 0) ub = std::min(ub, yg);
      else lb = std::max(lb, yg);
    } else {
      sum += yg;
      ++free;
    }
  }
  const double rho = free > 0 ? sum / free : 0.5 * (ub + lb);
  out.bias = -rho;
  return out;
}

Matrix KernelClassifier::decision(const Eigen::Ref<const Matrix>& X) const {
  const Matrix K = hik_gram(X, train);
  return (K * alpha_y).rowwise() + bias.transpose();
}

std::vector<int> KernelClassifier::predict(const Eigen::Ref<const Matrix>& X) const {
  const Matrix d = decision(X);
  std::vector<int> out(static_cast<std::size_t>(X.rows()));
  for (Index i = 0; i < d.rows(); ++i) {
    Index arg;
    d.row(i).maxCoeff(&arg);
    out[static_cast<std::size_t>(i)] = classes[static_cast<std::size_t>(arg)];
  }
  return out;
}

KernelClassifier fit_hik_svm(const Eigen::Ref<const Matrix>& X, const std::vector<int>& labels, const SvmConfig& cfg) {
  require_dims(static_cast<Index>(labels.size()), X.rows(), "training labels");
  KernelClassifier clf;
  clf.train = X;
  clf.labels = labels;
  const std::set<int> distinct(labels.begin(), labels.end());
  clf.classes.assign(distinct.begin(), distinct.end());
  require(clf.classes.size() >= 2, ErrorKind::InvalidInput, "training set needs at least two classes");
  const Matrix gram = hik_gram(X, X);
  const Index n = X.rows(), C = static_cast<Index>(clf.classes.size());
  clf.alpha_y.resize(n, C);
  clf.bias.resize(C);
  for (Index c = 0; c < C; ++c) {
    std::vector<int> y(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) y[i] = labels[i] == clf.classes[static_cast<std::size_t>(c)] ? 1 : -1;
    const BinarySvm svm = smo(gram, y, cfg);
    for (Index i = 0; i < n; ++i) clf.alpha_y(i, c) = svm.alpha(i) * y[static_cast<std::size_t>(i)];
    clf.bias(c) = svm.bias;
  }
  return clf;
}

ClassificationReport score(const std::vector<int>& predicted, const std::vector<int>& truth) {
  require_dims(static_cast<Index>(predicted.size()), static_cast<Index>(truth.size()), "prediction count");
  require(!truth.empty(), ErrorKind::InvalidInput, "cannot score an empty test set");
  ClassificationReport r;
  r.predicted = predicted;
  std::map<int, std::pair<int, int>> per;  // class -> (correct, total)
  int correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const bool ok = predicted[i] == truth[i];
    correct += ok;
    auto& p = per[truth[i]];
    p.first += ok;
    ++p.second;
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(truth.size());
  for (const auto& [c, p] : per) {
    r.classes.push_back(c);
    r.per_class_accuracy.push_back(static_cast<double>(p.first) / p.second);
  }
  return r;
}

ClassificationReport fit_predict_material(const Eigen::Ref<const Matrix>& train, const std::vector<int>& train_labels,
                                          const Eigen::Ref<const Matrix>& test, const std::vector<int>& test_labels,
                                          const SvmConfig& cfg) {
  const KernelClassifier clf = fit_hik_svm(train, train_labels, cfg);
  return score(clf.predict(test), test_labels);
}

std::vector<int> nearest_centroid(const Eigen::Ref<const Matrix>& train, const std::vector<int>& train_labels,
                                  const Eigen::Ref<const Matrix>& test) {
  require_dims(static_cast<Index>(train_labels.size()), train.rows(), "training labels");
  require_dims(test.cols(), train.cols(), "feature dimension");
  std::map<int, std::pair<Vector, int>> sums;
  for (std::size_t i = 0; i < train_labels.size(); ++i) {
    auto& s = sums[train_labels[i]];
    if (s.second == 0) s.first = Vector::Zero(train.cols());
    s.first += train.row(static_cast<Index>(i)).transpose();
    ++s.second;
  }
  std::vector<int> out;
  for (Index i = 0; i < test.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    int label = 0;
    for (const auto& [c, s] : sums) {
      const double d = (test.row(i).transpose() - s.first / s.second).squaredNorm();
      if (d < best) {
        best = d;
        label = c;
      }
    }
    out.push_back(label);
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<int> window_origins(int length, int side, int stride) {
  require(side >= 1 && stride >= 1, ErrorKind::InvalidInput, "window side and stride must be positive");
  require(length >= side, ErrorKind::InvalidInput,
          "image side " + std::to_string(length) + " is smaller than the window side " + std::to_string(side));
  const int span = length - side;
  const int step = std::min(stride, side);
  int n = span == 0 ? 1 : (span + step - 1) / step + 1;
  if (span % 2 == 1 && n % 2 == 1) ++n;  // an odd span has no integer centre window
  std::vector<int> o(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    if (n == 1) break;
    // Round the left half and mirror it, so reversing the axis maps the grid onto itself.
    if (2 * i < n)
      o[static_cast<std::size_t>(i)] = static_cast<int>((2L * i * span + (n - 1)) / (2L * (n - 1)));
    else o[static_cast<std::size_t>(i)] = span - o[static_cast<std::size_t>(n - 1 - i)];
  }
  return o;
}

AttributeMap sliding_window_maps(const patchlab::Image& image, const WindowPredictor& predictor, int stride,
                                 int patch_side) {
  const int W = image.width(), H = image.height();
  const auto xs = window_origins(W, patch_side, stride);
  const auto ys = window_origins(H, patch_side, stride);
  std::vector<Eigen::ArrayXXd> acc;
  Eigen::ArrayXXd count = Eigen::ArrayXXd::Zero(H, W);
  for (int y0 : ys)
    for (int x0 : xs) {
      const Vector p = predictor(image.crop(x0, y0, patch_side, patch_side));
      if (acc.empty()) acc.assign(static_cast<std::size_t>(p.size()), Eigen::ArrayXXd::Zero(H, W));
      require_dims(p.size(), static_cast<Index>(acc.size()), "predictor output size");
      for (Index m = 0; m < p.size(); ++m)
        acc[static_cast<std::size_t>(m)].block(y0, x0, patch_side, patch_side) += std::clamp(p(m), 0.0, 1.0);
      count.block(y0, x0, patch_side, patch_side) += 1.0;
    }
  AttributeMap map;
  map.width = W;
  map.height = H;
  map.stride = stride;
  map.patch_side = patch_side;
  for (auto& a : acc) map.planes.push_back((a / count).cast<float>());
  return map;
}

WindowPredictor attrmodel_predictor(const attrmodel::TwoLayerModel& model, const patchlab::DescriptorRecipe& recipe) {
  return [model, recipe](const patchlab::Image& window) {
    return attrmodel::forward_one(model, patchlab::extract_features(window, recipe));
  };
}

WindowPredictor mac_predictor(const macheads::MacModel& model) {
  require(model.has_heads, ErrorKind::InvalidInput, "MAC model has no attribute heads");
  return [model](const patchlab::Image& window) {
    const macheads::MacPrediction p = macheads::predict(model, window);
    Vector out(p.attributes.final.size() + p.probabilities.size());
    out << p.attributes.final, p.probabilities;
    return out;
  };
}

void save_map(const fs::path& path, const AttributeMap& map) {
  std::string raw;
  raw.reserve(map.planes.size() * static_cast<std::size_t>(map.width * map.height) * 4);
  for (const auto& plane : map.planes)
    for (int y = 0; y < map.height; ++y)
      for (int x = 0; x < map.width; ++x) {
        const float v = plane(y, x);
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        for (int b = 0; b < 4; ++b) raw.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
      }
  write_file_atomic(path, raw);
  const json side = {{"width", map.width},       {"height", map.height},     {"M", map.planes.size()},
                     {"stride", map.stride},     {"patch_side", map.patch_side}, {"model_id", map.model_id},
                     {"image_id", map.image_id}, {"format", "f32le"}};
  write_file_atomic(fs::path(path.string() + ".json"), side.dump(2) + "\n");
}

AttributeMap load_map(const fs::path& path) {
  json side;
  try {
    side = json::parse(read_file(fs::path(path.string() + ".json")));
  } catch (const json::exception& e) {
    fail(ErrorKind::Parse, path.string() + ".json: " + e.what());
  }
  AttributeMap map;
  map.width = side.at("width").get<int>();
  map.height = side.at("height").get<int>();
  map.stride = side.value("stride", 0);
  map.patch_side = side.value("patch_side", 0);
  map.model_id = side.value("model_id", "");
  map.image_id = side.value("image_id", "");
  const auto M = side.at("M").get<std::size_t>();
  const std::string raw = read_file(path);
  const std::size_t plane_size = static_cast<std::size_t>(map.width) * static_cast<std::size_t>(map.height);
  require(raw.size() == M * plane_size * 4, ErrorKind::Dimension,
          path.string() + ": size does not match the sidecar (" + std::to_string(raw.size()) + " bytes)");
  std::size_t pos = 0;
  for (std::size_t m = 0; m < M; ++m) {
    Eigen::ArrayXXf plane(map.height, map.width);
    for (int y = 0; y < map.height; ++y)
      for (int x = 0; x < map.width; ++x) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(raw[pos++])) << (8 * b);
        float v;
        std::memcpy(&v, &bits, 4);
        plane(y, x) = v;
      }
    map.planes.push_back(std::move(plane));
  }
  return map;
}

void save_plane_png(const fs::path& path, const AttributeMap& map, int plane) {
  require(plane >= 0 && plane < static_cast<int>(map.planes.size()), ErrorKind::OutOfRange, "plane index out of range");
  patchlab::save_png_gray(path, map.planes[static_cast<std::size_t>(plane)].cast<double>());
}

// ---------------------------------------------------------------------------

LinearClassifier fit_linear(const Eigen::Ref<const Matrix>& X, const std::vector<int>& y, const LinearConfig& cfg,
                            std::uint64_t seed) {
  const Index n = X.rows(), d = X.cols();
  require_dims(static_cast<Index>(y.size()), n, "labels");
  require(n >= 1 && cfg.lambda > 0.0, ErrorKind::InvalidInput, "linear classifier needs data and lambda > 0");
  const double C = 1.0 / (cfg.lambda * static_cast<double>(n));
  Vector w = Vector::Zero(d + 1);  // last entry multiplies the constant feature
  Vector alpha = Vector::Zero(n);
  Vector qd(n);
  for (Index i = 0; i < n; ++i) qd(i) = X.row(i).squaredNorm() + 1.0;
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  Rng rng(derive_seed(seed, 0x11E));
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    shuffle(order, rng);
    double pg_max = -std::numeric_limits<double>::infinity(), pg_min = std::numeric_limits<double>::infinity();
    for (Index i : order) {
      const double yi = y[static_cast<std::size_t>(i)];
      const double g = yi * (X.row(i).dot(w.head(d)) + w(d)) - 1.0;
      double pg = g;
      if (alpha(i) <= 0.0) pg = std::min(g, 0.0);
      else if (alpha(i) >= C) pg = std::max(g, 0.0);
      pg_max = std::max(pg_max, pg);
      pg_min = std::min(pg_min, pg);
      if (std::abs(pg) > 1e-12) {
        const double old = alpha(i);
        alpha(i) = std::clamp(old - g / qd(i), 0.0, C);
        const double delta = (alpha(i) - old) * yi;
        w.head(d) += delta * X.row(i).transpose();
        w(d) += delta;
      }
    }
    if (pg_max - pg_min < cfg.tolerance) break;
  }
  return {w.head(d), w(d)};
}

double balanced_accuracy(const std::vector<int>& predicted, const std::vector<int>& truth) {
  require_dims(static_cast<Index>(predicted.size()), static_cast<Index>(truth.size()), "prediction count");
  std::map<int, std::pair<int, int>> per;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    auto& p = per[truth[i]];
    p.first += predicted[i] == truth[i];
    ++p.second;
  }
  require(!per.empty(), ErrorKind::InvalidInput, "cannot score an empty test set");
  double total = 0.0;
  for (const auto& [c, p] : per) total += static_cast<double>(p.first) / p.second;
  return total / static_cast<double>(per.size());
}

Matrix OneShotFeatures::both() const {
  Matrix out(attributes.rows(), attributes.cols() + materials.cols());
  out << attributes, materials;
  return out;
}

OneShotFeatures one_shot_features(const macheads::MacModel& model, const std::vector<patchlab::Image>& images,
                                  const std::vector<int>& target) {
  require_dims(static_cast<Index>(target.size()), static_cast<Index>(images.size()), "target flags");
  require(model.has_heads, ErrorKind::InvalidInput, "one-shot features need attribute heads");
  OneShotFeatures f;
  f.target = target;
  const auto n = static_cast<Index>(images.size());
  f.attributes.resize(n, model.heads.attributes());
  f.materials.resize(n, model.extractor.num_categories());
  for (Index i = 0; i < n; ++i) {
    const macheads::MacPrediction p = macheads::predict(model, images[static_cast<std::size_t>(i)]);
    f.attributes.row(i) = p.attributes.final.transpose();
    f.materials.row(i) = p.probabilities.transpose();
  }
  return f;
}

OneShotCurve one_shot_eval(const OneShotFeatures& pool, const OneShotFeatures& test, const std::vector<int>& shots,
                           int repetitions, std::uint64_t seed, const LinearConfig& cfg) {
  std::vector<Index> pos, neg;
  for (std::size_t i = 0; i < pool.target.size(); ++i) (pool.target[i] ? pos : neg).push_back(static_cast<Index>(i));
  std::vector<int> truth;
  int test_pos = 0;
  for (int t : test.target) {
    truth.push_back(t ? 1 : -1);
    test_pos += t ? 1 : 0;
  }
  require(test_pos >= 1 && test_pos < static_cast<int>(truth.size()), ErrorKind::InvalidInput,
          "one-shot test set needs both target and non-target images");
  require(repetitions >= 1, ErrorKind::InvalidInput, "need at least one repetition");
  const Matrix pool_both = pool.both(), test_both = test.both();

  OneShotCurve curve;
  curve.shots = shots;
  for (int n : shots) {
    require(n >= 1, ErrorKind::InvalidInput, "shot counts must be positive");
    require(n <= static_cast<int>(pos.size()) && n <= static_cast<int>(neg.size()), ErrorKind::InvalidInput,
            "pool too small for " + std::to_string(n) + " shots");
    double acc[3] = {0, 0, 0};
    for (int r = 0; r < repetitions; ++r) {
      Rng rng(derive_seed(seed, static_cast<std::uint64_t>(n) * 1000003u + static_cast<std::uint64_t>(r)));
      std::vector<Index> p = pos, q = neg;
      shuffle(p, rng);
      shuffle(q, rng);
      std::vector<Index> rows(p.begin(), p.begin() + n);
      rows.insert(rows.end(), q.begin(), q.begin() + n);
      std::vector<int> y(static_cast<std::size_t>(2 * n), -1);
      std::fill(y.begin(), y.begin() + n, 1);
      const Matrix* sets[3][2] = {{&pool.attributes, &test.attributes},
                                  {&pool.materials, &test.materials},
                                  {&pool_both, &test_both}};
      for (int s = 0; s < 3; ++s) {
        const Matrix& src = *sets[s][0];
        Matrix X(2 * n, src.cols());
        for (std::size_t i = 0; i < rows.size(); ++i) X.row(static_cast<Index>(i)) = src.row(rows[i]);
        const LinearClassifier clf = fit_linear(X, y, cfg, seed + static_cast<std::uint64_t>(r));
        const Matrix& tx = *sets[s][1];
        std::vector<int> pred(truth.size());
        for (Index i = 0; i < tx.rows(); ++i) pred[static_cast<std::size_t>(i)] = clf.decision(tx.row(i).transpose()) > 0.0 ? 1 : -1;
        acc[s] += balanced_accuracy(pred, truth) / repetitions;
      }
    }
    curve.attributes.push_back(acc[0]);
    curve.materials.push_back(acc[1]);
    curve.both.push_back(acc[2]);
  }
  return curve;
}

}  // namespace matattr::matclass
