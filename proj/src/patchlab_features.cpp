#include "matattr/patchlab.hpp"

#include <array>
#include <cmath>

namespace matattr::patchlab {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Symmetric mirror: -1 -> 0, n -> n-1.
inline int reflect(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i - 1;
    if (i >= n) i = 2 * n - i - 1;
  }
  return i;
}

inline int clampi(int i, int n) { return i < 0 ? 0 : (i >= n ? n - 1 : i); }

double srgb_to_linear(double c) {
  return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
}

double lab_f(double t) {
  constexpr double d = 6.0 / 29.0;
  return t > d * d * d ? std::cbrt(t) : t / (3.0 * d * d) + 4.0 / 29.0;
}

Eigen::Vector3d rgb_to_lab(double r, double g, double b) {
  const double R = srgb_to_linear(r), G = srgb_to_linear(g), B = srgb_to_linear(b);
  const double X = (0.4124564 * R + 0.3575761 * G + 0.1804375 * B) / 0.95047;
  const double Y = 0.2126729 * R + 0.7151522 * G + 0.0721750 * B;
  const double Z = (0.0193339 * R + 0.1191920 * G + 0.9503041 * B) / 1.08883;
  const double fx = lab_f(X), fy = lab_f(Y), fz = lab_f(Z);
  return {116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

int lightness_bin(double L) { return L < 100.0 / 3.0 ? 0 : (L < 200.0 / 3.0 ? 1 : 2); }
int chroma_bin(double a) { return a < -12.0 ? 0 : (a < 12.0 ? 1 : 2); }

// Sample positions with stride 3 forming a set that is closed under i -> n-1-i,
// so the filter statistics are exactly invariant to 90-degree rotations and flips.
std::vector<int> symmetric_grid(int n) {
  int offset = 0;
  while ((2 * offset - (n - 1)) % 3 != 0) ++offset;
  std::vector<int> out;
  for (int i = offset; i < n; i += 3) out.push_back(i);
  if (out.empty()) out.push_back((n - 1) / 2);
  return out;
}

struct Gabor {
  int radius = 0;
  Eigen::ArrayXXd even, odd;
};

const std::vector<Gabor>& filter_bank() {
  static const std::vector<Gabor> bank = [] {
    std::vector<Gabor> out;
    constexpr std::array<double, 3> sigmas{1.0, 1.6, 2.5};
    for (double sigma : sigmas) {
      const int r = static_cast<int>(std::ceil(2.0 * sigma));
      const double lambda = 3.5 * sigma;
      for (int o = 0; o < 8; ++o) {
        const double theta = o * kPi / 8.0;
        const double c = std::cos(theta), s = std::sin(theta);
        Gabor g;
        g.radius = r;
        g.even.resize(2 * r + 1, 2 * r + 1);
        g.odd.resize(2 * r + 1, 2 * r + 1);
        for (int dy = -r; dy <= r; ++dy)
          for (int dx = -r; dx <= r; ++dx) {
            const double xp = dx * c + dy * s;
            const double yp = -dx * s + dy * c;
            const double env = std::exp(-(xp * xp + 0.25 * yp * yp) / (2.0 * sigma * sigma));
            g.even(dy + r, dx + r) = env * std::cos(2.0 * kPi * xp / lambda);
            g.odd(dy + r, dx + r) = env * std::sin(2.0 * kPi * xp / lambda);
          }
        g.even -= g.even.mean();
        const double norm = std::sqrt(g.even.square().sum() + g.odd.square().sum());
        g.even /= norm;
        g.odd /= norm;
        out.push_back(std::move(g));
      }
    }
    return out;
  }();
  return bank;
}

struct Gradients {
  Eigen::ArrayXXd gx, gy;
};

Gradients central_gradients(const Eigen::ArrayXXd& lum) {
  const int h = static_cast<int>(lum.rows()), w = static_cast<int>(lum.cols());
  Gradients g{Eigen::ArrayXXd(h, w), Eigen::ArrayXXd(h, w)};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      g.gx(y, x) = 0.5 * (lum(y, clampi(x + 1, w)) - lum(y, clampi(x - 1, w)));
      g.gy(y, x) = 0.5 * (lum(clampi(y + 1, h), x) - lum(clampi(y - 1, h), x));
    }
  return g;
}

const std::array<int, 256>& uniform_lbp_table() {
  static const std::array<int, 256> table = [] {
    std::array<int, 256> t{};
    int next = 0;
    for (int code = 0; code < 256; ++code) {
      int transitions = 0;
      for (int b = 0; b < 8; ++b) {
        const int cur = (code >> b) & 1, nxt = (code >> ((b + 1) % 8)) & 1;
        transitions += cur != nxt;
      }
      t[code] = transitions <= 2 ? next++ : -1;
    }
    for (int& v : t)
      if (v < 0) v = 58;
    return t;
  }();
  return table;
}

void l2_normalize(Eigen::Ref<Vector> block) {
  const double n = block.norm();
  if (n > 0.0) block /= n;
}

}  // namespace

Image::Image(int width, int height) {
  for (auto& c : ch) c = Plane::Zero(height, width);
}

Image::Plane Image::luminance() const { return 0.299 * ch[0] + 0.587 * ch[1] + 0.114 * ch[2]; }

Image Image::crop(int x, int y, int w, int h) const {
  Image out;
  for (int c = 0; c < 3; ++c) out.ch[c] = ch[c].block(y, x, h, w);
  return out;
}

Image Image::rotated90() const {
  // Counter-clockwise: new(y', x') = old(x', W-1-y').
  Image out(height(), width());
  const int W = width();
  for (int c = 0; c < 3; ++c)
    for (int yn = 0; yn < out.height(); ++yn)
      for (int xn = 0; xn < out.width(); ++xn) out.ch[c](yn, xn) = ch[c](xn, W - 1 - yn);
  return out;
}

Image Image::flipped_horizontal() const {
  Image out;
  for (int c = 0; c < 3; ++c) out.ch[c] = ch[c].rowwise().reverse();
  return out;
}

int DescriptorRecipe::dimension() const {
  return (color ? kColorBins : 0) + (filters ? kFilterDims : 0) + (gradient ? kGradientBins : 0) +
         (lbp ? kLbpBins : 0);
}

std::string DescriptorRecipe::id() const {
  std::string s = "local-v1:";
  s += color ? "C" : "-";
  s += filters ? "F" : "-";
  s += gradient ? "G" : "-";
  s += lbp ? "L" : "-";
  return s;
}

Vector color_histogram(const Image& image) {
  Vector hist = Vector::Zero(kColorBins);
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < image.width(); ++x) {
      const Eigen::Vector3d lab = rgb_to_lab(image.ch[0](y, x), image.ch[1](y, x), image.ch[2](y, x));
      hist(9 * lightness_bin(lab(0)) + 3 * chroma_bin(lab(1)) + chroma_bin(lab(2))) += 1.0;
    }
  return hist / static_cast<double>(image.width() * image.height());
}

Vector filter_energy(const Image& image) {
  Eigen::ArrayXXd lum = image.luminance();
  lum -= lum.mean();
  const int h = static_cast<int>(lum.rows()), w = static_cast<int>(lum.cols());
  const std::vector<int> ys = symmetric_grid(h), xs = symmetric_grid(w);
  const auto& bank = filter_bank();
  Vector out(kFilterDims);
  std::vector<double> mags;
  mags.reserve(ys.size() * xs.size());
  for (std::size_t f = 0; f < bank.size(); ++f) {
    const Gabor& g = bank[f];
    const int r = g.radius;
    mags.clear();
    for (int y : ys)
      for (int x : xs) {
        double e = 0.0, o = 0.0;
        for (int dy = -r; dy <= r; ++dy) {
          const int yy = reflect(y + dy, h);
          for (int dx = -r; dx <= r; ++dx) {
            const double v = lum(yy, reflect(x + dx, w));
            e += g.even(dy + r, dx + r) * v;
            o += g.odd(dy + r, dx + r) * v;
          }
        }
        mags.push_back(std::sqrt(e * e + o * o));
      }
    double mean = 0.0;
    for (double m : mags) mean += m;
    mean /= static_cast<double>(mags.size());
    double var = 0.0;
    for (double m : mags) var += (m - mean) * (m - mean);
    var /= static_cast<double>(mags.size());
    out(2 * f) = mean;
    out(2 * f + 1) = var;
  }
  return out;
}

Vector gradient_histogram(const Image& image) {
  const Gradients g = central_gradients(image.luminance());
  constexpr double bin_width = 0.02;
  Vector hist = Vector::Zero(kGradientBins);
  for (Index i = 0; i < g.gx.size(); ++i) {
    const double m = std::sqrt(g.gx(i) * g.gx(i) + g.gy(i) * g.gy(i));
    if (m <= 0.0) continue;
    const int bin = std::min(kGradientBins - 1, static_cast<int>(m / bin_width));
    hist(bin) += m;
  }
  return hist / static_cast<double>(g.gx.size());
}

Vector lbp_histogram(const Image& image) {
  const Eigen::ArrayXXd lum = image.luminance();
  const int h = static_cast<int>(lum.rows()), w = static_cast<int>(lum.cols());
  static constexpr std::array<int, 8> dx{1, 1, 0, -1, -1, -1, 0, 1};
  static constexpr std::array<int, 8> dy{0, -1, -1, -1, 0, 1, 1, 1};
  const auto& table = uniform_lbp_table();
  Vector hist = Vector::Zero(kLbpBins);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double c = lum(y, x);
      int code = 0;
      for (int b = 0; b < 8; ++b)
        if (lum(clampi(y + dy[b], h), clampi(x + dx[b], w)) >= c) code |= 1 << b;
      hist(table[code]) += 1.0;
    }
  return hist / static_cast<double>(h * w);
}

double mean_gradient_energy(const Image& image) {
  const Gradients g = central_gradients(image.luminance());
  return (g.gx.square() + g.gy.square()).mean();
}

Vector extract_features(const Image& image, const DescriptorRecipe& recipe) {
  if (image.width() < recipe.min_side || image.height() < recipe.min_side)
    fail(ErrorKind::InvalidInput, "patch side " + std::to_string(std::min(image.width(), image.height())) +
                                      " below minimum " + std::to_string(recipe.min_side));
  Vector out(recipe.dimension());
  Index at = 0;
  auto put = [&](Vector block) {
    l2_normalize(block);
    out.segment(at, block.size()) = block;
    at += block.size();
  };
  if (recipe.color) put(color_histogram(image));
  if (recipe.filters) put(filter_energy(image));
  if (recipe.gradient) put(gradient_histogram(image));
  if (recipe.lbp) put(lbp_histogram(image));
  return out;
}

FeatureVector extract_features(const Patch& patch, const DescriptorRecipe& recipe) {
  return {patch.id, extract_features(patch.pixels, recipe), recipe.id()};
}

Matrix stack(const std::vector<FeatureVector>& features) {
  if (features.empty()) return Matrix(0, 0);
  const Index d = features.front().values.size();
  Matrix out(static_cast<Index>(features.size()), d);
  for (std::size_t i = 0; i < features.size(); ++i) {
    require_dims(features[i].values.size(), d, "feature dimension of " + features[i].patch_id);
    out.row(static_cast<Index>(i)) = features[i].values.transpose();
  }
  return out;
}

}  // namespace matattr::patchlab
