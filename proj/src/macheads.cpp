#include "matattr/macheads.hpp"

#include "json_matrix.hpp"
#include "matattr/attrmodel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace matattr::macheads {

using nlohmann::json;

namespace {

Matrix clamp(const Matrix& z) { return z.cwiseMax(0.0).cwiseMin(1.0); }

Matrix clamp_mask(const Matrix& z) { return ((z.array() >= 0.0) && (z.array() <= 1.0)).cast<double>().matrix(); }

// Feature maps are C x (H*W), column index y*W + x.
Matrix image_map(const patchlab::Image& image) {
  const Index H = image.height(), W = image.width();
  Matrix m(3, H * W);
  for (int c = 0; c < 3; ++c)
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x) m(c, y * W + x) = image.ch[static_cast<std::size_t>(c)](y, x) - 0.5;
  return m;
}

Matrix im2col(const Matrix& in, Index H, Index W) {
  const Index C = in.rows();
  Matrix cols = Matrix::Zero(C * 9, H * W);
  for (Index c = 0; c < C; ++c)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        const Index row = c * 9 + ky * 3 + kx;
        for (Index y = 0; y < H; ++y) {
          const Index sy = y + ky - 1;
          if (sy < 0 || sy >= H) continue;
          for (Index x = 0; x < W; ++x) {
            const Index sx = x + kx - 1;
            if (sx < 0 || sx >= W) continue;
            cols(row, y * W + x) = in(c, sy * W + sx);
          }
        }
      }
  return cols;
}

Matrix col2im(const Matrix& cols, Index C, Index H, Index W) {
  Matrix out = Matrix::Zero(C, H * W);
  for (Index c = 0; c < C; ++c)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        const Index row = c * 9 + ky * 3 + kx;
        for (Index y = 0; y < H; ++y) {
          const Index sy = y + ky - 1;
          if (sy < 0 || sy >= H) continue;
          for (Index x = 0; x < W; ++x) {
            const Index sx = x + kx - 1;
            if (sx < 0 || sx >= W) continue;
            out(c, sy * W + sx) += cols(row, y * W + x);
          }
        }
      }
  return out;
}

Matrix avg_pool(const Matrix& in, Index H, Index W) {
  const Index H2 = H / 2, W2 = W / 2;
  Matrix out(in.rows(), H2 * W2);
  for (Index y = 0; y < H2; ++y)
    for (Index x = 0; x < W2; ++x)
      out.col(y * W2 + x) = 0.25 * (in.col(2 * y * W + 2 * x) + in.col(2 * y * W + 2 * x + 1) +
                                    in.col((2 * y + 1) * W + 2 * x) + in.col((2 * y + 1) * W + 2 * x + 1));
  return out;
}

Matrix avg_unpool(const Matrix& d, Index H, Index W) {
  const Index H2 = H / 2, W2 = W / 2;
  Matrix out = Matrix::Zero(d.rows(), H * W);
  for (Index y = 0; y < H2; ++y)
    for (Index x = 0; x < W2; ++x) {
      const auto g = 0.25 * d.col(y * W2 + x);
      out.col(2 * y * W + 2 * x) = g;
      out.col(2 * y * W + 2 * x + 1) = g;
      out.col((2 * y + 1) * W + 2 * x) = g;
      out.col((2 * y + 1) * W + 2 * x + 1) = g;
    }
  return out;
}

struct LevelCache {
  Matrix cols, z, pooled;
  Index H = 0, W = 0;  // input size of this level
};

struct ImageCache {
  std::vector<LevelCache> levels;
  FeaturePyramid pyramid;
};

ImageCache run_extractor(const ToyExtractor& ex, const patchlab::Image& image) {
  const Index need = Index{1} << ex.levels();
  require(image.width() >= need && image.height() >= need, ErrorKind::InvalidInput,
          "image smaller than the extractor's " + std::to_string(need) + "px minimum");
  ImageCache cache;
  Matrix in = image_map(image);
  Index H = image.height(), W = image.width();
  for (const ConvLayer& layer : ex.conv) {
    require_dims(in.rows(), layer.in_channels(), "conv input channels");
    LevelCache lc;
    lc.H = H;
    lc.W = W;
    lc.cols = im2col(in, H, W);
    lc.z = (layer.W * lc.cols).colwise() + layer.b;
    lc.pooled = avg_pool(lc.z.cwiseMax(0.0), H, W);
    cache.pyramid.levels.push_back(lc.pooled.rowwise().mean());
    in = lc.pooled;
    H /= 2;
    W /= 2;
    cache.levels.push_back(std::move(lc));
  }
  return cache;
}

// Accumulates parameter gradients given dLoss/dh_i for every level.
void backprop_extractor(const ToyExtractor& ex, const ImageCache& cache, const std::vector<Vector>& dh,
                        ToyExtractor& grad) {
  Matrix dpooled;
  for (Index l = ex.levels() - 1; l >= 0; --l) {
    const auto li = static_cast<std::size_t>(l);
    const LevelCache& lc = cache.levels[li];
    const Index n = lc.pooled.cols();
    Matrix dp = dh[li].replicate(1, n) / static_cast<double>(n);
    if (dpooled.size() > 0) dp += dpooled;
    Matrix dz = avg_unpool(dp, lc.H, lc.W).cwiseProduct((lc.z.array() > 0.0).cast<double>().matrix());
    grad.conv[li].W.noalias() += dz * lc.cols.transpose();
    grad.conv[li].b += dz.rowwise().sum();
    if (l > 0) dpooled = col2im(ex.conv[li].W.transpose() * dz, ex.conv[li].in_channels(), lc.H, lc.W);
  }
}

Vector softmax(const Vector& logits) {
  const Vector e = (logits.array() - logits.maxCoeff()).exp().matrix();
  return e / e.sum();
}

template <typename F>
void for_each_param(MacModel& a, F&& f) {
  for (auto& c : a.extractor.conv) {
    f(c.W);
    f(c.b);
  }
  f(a.extractor.Wcls);
  f(a.extractor.bcls);
  if (!a.has_heads) return;
  for (auto& w : a.heads.W) f(w);
  for (auto& b : a.heads.b) f(b);
  f(a.heads.Wc);
  f(a.heads.bc);
}

template <typename F>
void for_each_param_pair(MacModel& a, MacModel& b, F&& f) {
  std::vector<Eigen::Map<Matrix>> pa, pb;
  for_each_param(a, [&](auto& m) { pa.emplace_back(m.data(), m.rows(), m.cols()); });
  for_each_param(b, [&](auto& m) { pb.emplace_back(m.data(), m.rows(), m.cols()); });
  for (std::size_t i = 0; i < pa.size(); ++i) f(pa[i], pb[i]);
}

MacModel zeros_like(const MacModel& m) {
  MacModel z = m;
  for_each_param(z, [](auto& p) { p.setZero(); });
  return z;
}

struct BatchLoss {
  double cross_entropy = 0.0;
  std::vector<double> u;
  double d = 0.0;
  double total = 0.0;
  int correct = 0;
};

// Loss over a group of images; accumulates gradients into `grad` when non-null.
BatchLoss batch_loss(const MacModel& model, const std::vector<const patchlab::Image*>& images,
                     const std::vector<int>& cats, const Eigen::Ref<const Matrix>& A, const MacConfig& cfg,
                     MacModel* grad) {
  const Index N = static_cast<Index>(images.size());
  const Index L = model.extractor.levels();
  std::vector<ImageCache> caches;
  caches.reserve(images.size());
  for (const auto* img : images) caches.push_back(run_extractor(model.extractor, *img));

  std::vector<Matrix> Hs(static_cast<std::size_t>(L));
  for (Index l = 0; l < L; ++l) {
    Hs[static_cast<std::size_t>(l)].resize(N, model.extractor.conv[static_cast<std::size_t>(l)].out_channels());
    for (Index j = 0; j < N; ++j)
      Hs[static_cast<std::size_t>(l)].row(j) = caches[static_cast<std::size_t>(j)].pyramid.levels[static_cast<std::size_t>(l)].transpose();
  }
  std::vector<Matrix> dH(static_cast<std::size_t>(L));
  for (Index l = 0; l < L; ++l) dH[static_cast<std::size_t>(l)] = Matrix::Zero(N, Hs[static_cast<std::size_t>(l)].cols());

  BatchLoss out;
  const ToyExtractor& ex = model.extractor;
  const Matrix& HL = Hs.back();
  Matrix logits = (HL * ex.Wcls.transpose()).rowwise() + ex.bcls.transpose();
  Matrix dlogits(N, ex.num_categories());
  for (Index j = 0; j < N; ++j) {
    const Vector p = softmax(logits.row(j).transpose());
    const int c = cats[static_cast<std::size_t>(j)];
    out.cross_entropy -= std::log(std::max(p(c), 1e-300)) / static_cast<double>(N);
    Index arg;
    p.maxCoeff(&arg);
    out.correct += arg == c ? 1 : 0;
    dlogits.row(j) = p.transpose() / static_cast<double>(N);
    dlogits(j, c) -= 1.0 / static_cast<double>(N);
  }
  out.total = out.cross_entropy;
  if (grad) {
    grad->extractor.Wcls += dlogits.transpose() * HL;
    grad->extractor.bcls += dlogits.colwise().sum().transpose();
    dH.back() += dlogits * ex.Wcls;
  }

  if (model.has_heads) {
    const HeadStack& hs = model.heads;
    const Index M = hs.attributes();
    std::vector<Matrix> z(static_cast<std::size_t>(L)), o(static_cast<std::size_t>(L));
    Matrix concat(N, L * M);
    for (Index l = 0; l < L; ++l) {
      const auto li = static_cast<std::size_t>(l);
      z[li] = (Hs[li] * hs.W[li].transpose()).rowwise() + hs.b[li].transpose();
      o[li] = clamp(z[li]);
      concat.middleCols(l * M, M) = o[li];
    }
    const Matrix zc = (concat * hs.Wc.transpose()).rowwise() + hs.bc.transpose();
    const Matrix fin = clamp(zc);
    for (Index l = 0; l < L; ++l) out.u.push_back(aux_loss_u(o[static_cast<std::size_t>(l)], cats, A));
    out.u.push_back(aux_loss_u(fin, cats, A));
    out.d = cfg.w_d != 0.0 ? aux_loss_d(fin, cfg.kde) : 0.0;
    for (double u : out.u) out.total += cfg.w_u * u;
    out.total += cfg.w_d * out.d;
    if (grad) {
      Matrix dfin = cfg.w_u * aux_loss_u_gradient(fin, cats, A);
      if (cfg.w_d != 0.0) dfin += cfg.w_d * aux_loss_d_gradient(fin, cfg.kde);
      const Matrix dzc = dfin.cwiseProduct(clamp_mask(zc));
      grad->heads.Wc += dzc.transpose() * concat;
      grad->heads.bc += dzc.colwise().sum().transpose();
      const Matrix dconcat = dzc * hs.Wc;
      for (Index l = 0; l < L; ++l) {
        const auto li = static_cast<std::size_t>(l);
        Matrix dz = dconcat.middleCols(l * M, M) + cfg.w_u * aux_loss_u_gradient(o[li], cats, A);
        dz = dz.cwiseProduct(clamp_mask(z[li]));
        grad->heads.W[li] += dz.transpose() * Hs[li];
        grad->heads.b[li] += dz.colwise().sum().transpose();
        dH[li] += dz * hs.W[li];
      }
    }
  }

  if (grad) {
    std::vector<Vector> dh(static_cast<std::size_t>(L));
    for (Index j = 0; j < N; ++j) {
      for (Index l = 0; l < L; ++l) dh[static_cast<std::size_t>(l)] = dH[static_cast<std::size_t>(l)].row(j).transpose();
      backprop_extractor(ex, caches[static_cast<std::size_t>(j)], dh, grad->extractor);
    }
  }
  return out;
}

}  // namespace

std::vector<Index> FeaturePyramid::dims() const {
  std::vector<Index> d;
  for (const auto& l : levels) d.push_back(l.size());
  return d;
}

std::vector<Index> ToyExtractor::level_dims() const {
  std::vector<Index> d;
  for (const auto& c : conv) d.push_back(c.out_channels());
  return d;
}

void ToyExtractor::validate() const {
  require(conv.size() >= 2, ErrorKind::InvalidInput, "extractor needs at least two levels");
  Index in = 3;
  for (const auto& c : conv) {
    require(c.W.cols() == in * 9 && c.b.size() == c.W.rows(), ErrorKind::Dimension, "conv layer shapes");
    in = c.W.rows();
  }
  require(Wcls.cols() == in && bcls.size() == Wcls.rows(), ErrorKind::Dimension, "category head shapes");
}

ToyExtractor ToyExtractor::initialize(const std::vector<int>& channels, Index num_categories, Rng& rng) {
  require(channels.size() >= 2, ErrorKind::InvalidInput, "extractor needs at least two levels");
  ToyExtractor ex;
  Index in = 3;
  for (int c : channels) {
    require(c >= 1, ErrorKind::InvalidInput, "channel counts must be positive");
    ConvLayer layer;
    layer.W.resize(c, in * 9);
    const double s = std::sqrt(2.0 / static_cast<double>(in * 9));
    for (Index i = 0; i < layer.W.size(); ++i) layer.W(i) = s * normal(rng);
    layer.b = Vector::Zero(c);
    ex.conv.push_back(std::move(layer));
    in = c;
  }
  ex.Wcls.resize(num_categories, in);
  const double s = 1.0 / std::sqrt(static_cast<double>(in));
  for (Index i = 0; i < ex.Wcls.size(); ++i) ex.Wcls(i) = s * normal(rng);
  ex.bcls = Vector::Zero(num_categories);
  return ex;
}

void HeadStack::validate() const {
  require(W.size() == b.size() && !W.empty(), ErrorKind::Dimension, "head stack level count");
  const Index M = Wc.rows();
  for (std::size_t i = 0; i < W.size(); ++i)
    require(W[i].rows() == M && b[i].size() == M, ErrorKind::Dimension, "head " + std::to_string(i) + " shapes");
  require(Wc.cols() == M * levels() && bc.size() == M, ErrorKind::Dimension, "combiner shapes");
}

HeadStack HeadStack::initialize(const std::vector<Index>& level_dims, Index num_attributes, Rng& rng) {
  HeadStack hs;
  const Index L = static_cast<Index>(level_dims.size());
  for (Index dim : level_dims) {
    Matrix w(num_attributes, dim);
    const double s = 0.1 / std::sqrt(static_cast<double>(dim));
    for (Index i = 0; i < w.size(); ++i) w(i) = s * normal(rng);
    hs.W.push_back(std::move(w));
    hs.b.push_back(Vector::Constant(num_attributes, 0.5));
  }
  // Start the combiner as the average of the level outputs.
  hs.Wc = Matrix::Zero(num_attributes, L * num_attributes);
  for (Index l = 0; l < L; ++l)
    hs.Wc.middleCols(l * num_attributes, num_attributes) =
        Matrix::Identity(num_attributes, num_attributes) / static_cast<double>(L);
  hs.bc = Vector::Zero(num_attributes);
  return hs;
}

HeadOutput head_forward(const HeadStack& stack, const FeaturePyramid& pyramid) {
  require_dims(static_cast<Index>(pyramid.levels.size()), stack.levels(), "pyramid levels");
  const Index M = stack.attributes();
  HeadOutput out;
  Vector concat(stack.levels() * M);
  for (Index l = 0; l < stack.levels(); ++l) {
    const auto li = static_cast<std::size_t>(l);
    require_dims(pyramid.levels[li].size(), stack.W[li].cols(), "pyramid level " + std::to_string(l) + " dimension");
    out.level.push_back(clamp(stack.W[li] * pyramid.levels[li] + stack.b[li]));
    concat.segment(l * M, M) = out.level.back();
  }
  out.final = clamp(stack.Wc * concat + stack.bc);
  return out;
}

FeaturePyramid extract_pyramid(const ToyExtractor& ex, const patchlab::Image& image) {
  return run_extractor(ex, image).pyramid;
}

Vector category_probabilities(const ToyExtractor& ex, const FeaturePyramid& pyramid) {
  require_dims(static_cast<Index>(pyramid.levels.size()), ex.levels(), "pyramid levels");
  return softmax(ex.Wcls * pyramid.levels.back() + ex.bcls);
}

double aux_loss_u(const Eigen::Ref<const Matrix>& outputs, const std::vector<int>& categories,
                  const Eigen::Ref<const Matrix>& A) {
  require_dims(outputs.cols(), A.cols(), "attribute count");
  const Matrix means = attrmodel::category_means(outputs, categories, A.rows());
  return (A - means).cwiseAbs().sum() / static_cast<double>(A.rows());
}

Matrix aux_loss_u_gradient(const Eigen::Ref<const Matrix>& outputs, const std::vector<int>& categories,
                           const Eigen::Ref<const Matrix>& A) {
  const Index K = A.rows();
  const Matrix means = attrmodel::category_means(outputs, categories, K);
  std::vector<double> n(static_cast<std::size_t>(K), 0.0);
  for (int c : categories) n[static_cast<std::size_t>(c)] += 1.0;
  // d|a - mean|/d mean = -sign(a - mean); zero at the kink.
  const Matrix sign = (A - means).unaryExpr([](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
  Matrix g(outputs.rows(), outputs.cols());
  for (std::size_t i = 0; i < categories.size(); ++i) {
    const int k = categories[i];
    g.row(static_cast<Index>(i)) = -sign.row(k) / (static_cast<double>(K) * n[static_cast<std::size_t>(k)]);
  }
  return g;
}

double aux_loss_d(const Eigen::Ref<const Matrix>& final_outputs, const attrspace::KdeConfig& cfg) {
  return attrspace::beta_kl(final_outputs, cfg);
}

Matrix aux_loss_d_gradient(const Eigen::Ref<const Matrix>& final_outputs, const attrspace::KdeConfig& cfg) {
  return attrspace::beta_kl_gradient(final_outputs, cfg);
}

MacResult train_mac(const std::vector<patchlab::Image>& images, const std::vector<int>& categories,
                    const Eigen::Ref<const Matrix>& A, const MacConfig& cfg) {
  require_dims(static_cast<Index>(categories.size()), static_cast<Index>(images.size()), "category labels");
  require(cfg.batch_size >= 1 && cfg.epochs >= 0, ErrorKind::InvalidInput, "bad training schedule");
  const Index K = A.rows();
  Rng rng(derive_seed(cfg.seed, 0x3AC));

  MacResult result;
  MacModel& model = result.model;
  model.extractor = ToyExtractor::initialize(cfg.channels, K, rng);
  model.has_heads = cfg.use_heads;
  // Heads are always drawn so runs with and without them share extractor initialization and batches.
  HeadStack heads = HeadStack::initialize(model.extractor.level_dims(), A.cols(), rng);
  if (cfg.use_heads) model.heads = std::move(heads);

  std::vector<Index> train_idx, val_idx;
  {
    std::vector<std::vector<Index>> members(static_cast<std::size_t>(K));
    for (std::size_t i = 0; i < categories.size(); ++i) {
      require(categories[i] >= 0 && categories[i] < K, ErrorKind::InvalidInput, "category index out of range");
      members[static_cast<std::size_t>(categories[i])].push_back(static_cast<Index>(i));
    }
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
  std::vector<int> train_cats;
  for (Index i : train_idx) train_cats.push_back(categories[static_cast<std::size_t>(i)]);
  std::vector<const patchlab::Image*> val_images;
  std::vector<int> val_cats;
  for (Index i : val_idx) {
    val_images.push_back(&images[static_cast<std::size_t>(i)]);
    val_cats.push_back(categories[static_cast<std::size_t>(i)]);
  }

  MacModel velocity = zeros_like(model);
  double step = cfg.step_size;
  double last_error = 1.0;
  for (int epoch = 0; epoch < cfg.epochs && step >= cfg.min_step; ++epoch) {
    const auto batches = attrmodel::stratified_batches(train_cats, K, cfg.batch_size, rng);
    MacEpoch rec;
    rec.step_size = step;
    rec.u.assign(cfg.use_heads ? static_cast<std::size_t>(model.extractor.levels() + 1) : 0, 0.0);
    for (const auto& batch : batches) {
      std::vector<const patchlab::Image*> imgs;
      std::vector<int> cats;
      for (Index b : batch) {
        imgs.push_back(&images[static_cast<std::size_t>(train_idx[static_cast<std::size_t>(b)])]);
        cats.push_back(train_cats[static_cast<std::size_t>(b)]);
      }
      MacModel grad = zeros_like(model);
      const BatchLoss loss = batch_loss(model, imgs, cats, A, cfg, &grad);
      if (!std::isfinite(loss.total))
        fail(ErrorKind::Numerical, "MAC training diverged at epoch " + std::to_string(epoch));
      const double w = 1.0 / static_cast<double>(batches.size());
      rec.cross_entropy += w * loss.cross_entropy;
      for (std::size_t i = 0; i < loss.u.size(); ++i) rec.u[i] += w * loss.u[i];
      rec.d += w * loss.d;
      for_each_param_pair(velocity, grad, [&](auto& v, auto& g) { v = cfg.momentum * v - step * g; });
      for_each_param_pair(model, velocity, [](auto& p, auto& v) { p += v; });
    }
    if (!val_images.empty()) {
      const BatchLoss v = batch_loss(model, val_images, val_cats, A, cfg, nullptr);
      rec.validation_loss = v.total;
      rec.validation_accuracy = static_cast<double>(v.correct) / static_cast<double>(val_images.size());
      if (!std::isfinite(v.total)) fail(ErrorKind::Numerical, "MAC training diverged at epoch " + std::to_string(epoch));
      const double error = 1.0 - rec.validation_accuracy;
      if (error > last_error) step *= cfg.decay;
      last_error = error;
    }
    result.trace.push_back(std::move(rec));
  }
  return result;
}

MacPrediction predict(const MacModel& model, const patchlab::Image& image) {
  const FeaturePyramid p = extract_pyramid(model.extractor, image);
  MacPrediction out;
  out.probabilities = category_probabilities(model.extractor, p);
  if (model.has_heads) out.attributes = head_forward(model.heads, p);
  return out;
}

double category_accuracy(const MacModel& model, const std::vector<patchlab::Image>& images,
                         const std::vector<int>& categories) {
  require_dims(static_cast<Index>(categories.size()), static_cast<Index>(images.size()), "category labels");
  require(!images.empty(), ErrorKind::InvalidInput, "accuracy of an empty set");
  int correct = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    Index arg;
    predict(model, images[i]).probabilities.maxCoeff(&arg);
    correct += arg == categories[i] ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(images.size());
}

double attribute_mae(const MacModel& model, const std::vector<patchlab::Image>& images,
                     const std::vector<int>& categories, const Eigen::Ref<const Matrix>& A) {
  require(model.has_heads, ErrorKind::InvalidInput, "model has no attribute heads");
  Matrix F(static_cast<Index>(images.size()), A.cols());
  for (std::size_t i = 0; i < images.size(); ++i) F.row(static_cast<Index>(i)) = predict(model, images[i]).attributes.final.transpose();
  return (attrmodel::category_means(F, categories, A.rows()) - A).cwiseAbs().mean();
}

std::string model_to_json(const MacModel& model, const MacConfig& cfg) {
  json conv = json::array();
  for (const auto& c : model.extractor.conv)
    conv.push_back({{"W", detail::matrix_to_json(c.W)}, {"b", detail::vector_to_json(c.b)}});
  json j = {{"extractor",
             {{"conv", conv},
              {"Wcls", detail::matrix_to_json(model.extractor.Wcls)},
              {"bcls", detail::vector_to_json(model.extractor.bcls)}}},
            {"config",
             {{"channels", cfg.channels},
              {"use_heads", cfg.use_heads},
              {"w_u", cfg.w_u},
              {"w_d", cfg.w_d},
              {"step_size", cfg.step_size},
              {"momentum", cfg.momentum},
              {"decay", cfg.decay},
              {"min_step", cfg.min_step},
              {"batch_size", cfg.batch_size},
              {"epochs", cfg.epochs},
              {"bandwidth", cfg.kde.bandwidth}}},
            {"seed", cfg.seed}};
  if (model.has_heads) {
    json heads = json::array();
    for (std::size_t i = 0; i < model.heads.W.size(); ++i)
      heads.push_back({{"W", detail::matrix_to_json(model.heads.W[i])}, {"b", detail::vector_to_json(model.heads.b[i])}});
    j["heads"] = heads;
    j["combiner"] = {{"W", detail::matrix_to_json(model.heads.Wc)}, {"b", detail::vector_to_json(model.heads.bc)}};
  }
  return j.dump() + "\n";
}

MacModel model_from_json(const std::string& text) {
  return detail::parse_json(text, "MAC model file", [](const json& j) {
    MacModel m;
    const json& ex = j.at("extractor");
    for (const json& c : ex.at("conv")) {
      ConvLayer layer;
      layer.W = detail::matrix_from_json(c.at("W"), "conv W");
      layer.b = detail::vector_from_json(c.at("b"), layer.W.rows(), "conv b");
      m.extractor.conv.push_back(std::move(layer));
    }
    m.extractor.Wcls = detail::matrix_from_json(ex.at("Wcls"), "Wcls");
    m.extractor.bcls = detail::vector_from_json(ex.at("bcls"), m.extractor.Wcls.rows(), "bcls");
    m.extractor.validate();
    m.has_heads = j.contains("heads");
    if (m.has_heads) {
      for (const json& h : j.at("heads")) {
        m.heads.W.push_back(detail::matrix_from_json(h.at("W"), "head W"));
        m.heads.b.push_back(detail::vector_from_json(h.at("b"), m.heads.W.back().rows(), "head b"));
      }
      m.heads.Wc = detail::matrix_from_json(j.at("combiner").at("W"), "combiner W");
      m.heads.bc = detail::vector_from_json(j.at("combiner").at("b"), m.heads.Wc.rows(), "combiner b");
      m.heads.validate();
      require_dims(m.heads.levels(), m.extractor.levels(), "head count vs extractor levels");
    }
    return m;
  });
}

void save_model(const std::filesystem::path& path, const MacModel& model, const MacConfig& cfg) {
  write_file_atomic(path, model_to_json(model, cfg));
}

MacModel load_model(const std::filesystem::path& path) { return model_from_json(read_file(path)); }

}  // namespace matattr::macheads
