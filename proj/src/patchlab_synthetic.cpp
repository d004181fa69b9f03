#include "matattr/patchlab.hpp"

#include <cmath>

namespace matattr::patchlab {

namespace {

constexpr double kPi = 3.14159265358979323846;

double frac(double v) { return v - std::floor(v); }

int poisson(Rng& rng, double mean) {
  const double limit = std::exp(-mean);
  int k = 0;
  double p = uniform(rng);
  while (p > limit) {
    ++k;
    p *= uniform(rng);
  }
  return k;
}

Eigen::ArrayXXd white_noise(int w, int h, Rng& rng) {
  Eigen::ArrayXXd out(h, w);
  for (Index i = 0; i < out.size(); ++i) out(i) = normal(rng);
  return out;
}

// Oriented Gaussian blur with wrap-free clamped borders, rescaled to unit std.
Eigen::ArrayXXd smooth_noise(const Eigen::ArrayXXd& in, double sigma_along, double sigma_across,
                             double angle) {
  const int h = static_cast<int>(in.rows()), w = static_cast<int>(in.cols());
  const int r = static_cast<int>(std::ceil(2.5 * std::max(sigma_along, sigma_across)));
  const double c = std::cos(angle), s = std::sin(angle);
  Eigen::ArrayXXd kernel(2 * r + 1, 2 * r + 1);
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx) {
      const double u = dx * c + dy * s, v = -dx * s + dy * c;
      kernel(dy + r, dx + r) =
          std::exp(-0.5 * (u * u / (sigma_along * sigma_along) + v * v / (sigma_across * sigma_across)));
    }
  kernel /= kernel.sum();
  Eigen::ArrayXXd out = Eigen::ArrayXXd::Zero(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int dy = -r; dy <= r; ++dy) {
        const int yy = std::clamp(y + dy, 0, h - 1);
        for (int dx = -r; dx <= r; ++dx) acc += kernel(dy + r, dx + r) * in(yy, std::clamp(x + dx, 0, w - 1));
      }
      out(y, x) = acc;
    }
  const double mean = out.mean();
  const double sd = std::sqrt((out - mean).square().mean());
  return sd > 0.0 ? ((out - mean) / sd).eval() : (out - mean).eval();
}

void add_blobs(Eigen::ArrayXXd& plane, int count, double amplitude, double sigma_lo, double sigma_hi,
               Rng& rng) {
  const int h = static_cast<int>(plane.rows()), w = static_cast<int>(plane.cols());
  for (int i = 0; i < count; ++i) {
    const double cx = uniform(rng, 0, w), cy = uniform(rng, 0, h);
    const double sigma = uniform(rng, sigma_lo, sigma_hi);
    const int r = static_cast<int>(std::ceil(3 * sigma));
    for (int y = std::max(0, int(cy) - r); y <= std::min(h - 1, int(cy) + r); ++y)
      for (int x = std::max(0, int(cx) - r); x <= std::min(w - 1, int(cx) + r); ++x) {
        const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        plane(y, x) += amplitude * std::exp(-d2 / (2 * sigma * sigma));
      }
  }
}

Eigen::Vector3d hsv_to_rgb(double hue, double sat, double val) {
  const double hh = frac(hue) * 6.0;
  const int i = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = val * (1 - sat), q = val * (1 - sat * f), t = val * (1 - sat * (1 - f));
  switch (i) {
    case 0: return {val, t, p};
    case 1: return {q, val, p};
    case 2: return {p, val, t};
    case 3: return {p, q, val};
    case 4: return {t, p, val};
    default: return {val, p, q};
  }
}

}  // namespace

void SyntheticSpec::validate() const {
  require(num_categories >= 2, ErrorKind::InvalidInput, "synthetic spec needs at least 2 categories");
  require_dims(static_cast<Index>(textures.size()), num_categories, "synthetic textures");
  require_dims(static_cast<Index>(names.size()), num_categories, "synthetic category names");
  require_dims(latent.rows(), num_categories, "latent attribute rows");
  require(latent.cols() >= 1, ErrorKind::InvalidInput, "latent attribute matrix has no columns");
  require((latent.array() >= 0.0).all() && (latent.array() <= 1.0).all(), ErrorKind::InvalidInput,
          "latent attribute probabilities must lie in [0,1]");
  require(nuisance >= 0.0, ErrorKind::InvalidInput, "nuisance must be non-negative");
}

CategoryTexture texture_from_latent(const Eigen::Ref<const Vector>& row) {
  double h1 = 0.0, h2 = 0.0, h3 = 0.0, h4 = 0.0;
  for (Index m = 0; m < row.size(); ++m) {
    h1 += row(m) * 0.371 * static_cast<double>(m + 1);
    h2 += row(m) * 0.233 * static_cast<double>(m + 2);
    h3 += row(m) * 0.517 * static_cast<double>(m + 3);
    h4 += row(m) * 0.129 * static_cast<double>(2 * m + 1);
  }
  CategoryTexture t;
  t.base_color = hsv_to_rgb(frac(h1), 0.25 + 0.25 * frac(h4), 0.45 + 0.2 * frac(h2 + h3));
  t.orientation = kPi * frac(h2);
  t.frequency = 0.09 + 0.1 * frac(h3);
  t.anisotropy = 0.6 * frac(h4 + h1);
  t.smoothness = 0.2 + 0.6 * frac(h1 + h3);
  return t;
}

namespace {
// P(at least 5 of 10 annotators agree) when each does so with probability p.
double majority_rate(double p) {
  double total = 0.0, binom = 1.0;
  for (int i = 0; i <= 10; ++i) {
    if (i > 0) binom = binom * (10 - i + 1) / i;
    if (i >= 5) total += binom * std::pow(p, i) * std::pow(1.0 - p, 10 - i);
  }
  return total;
}
}  // namespace

SyntheticSpec default_synthetic_spec(int num_categories, int num_latent, std::uint64_t seed) {
  require(num_categories >= 2, ErrorKind::InvalidInput, "synthetic spec needs at least 2 categories");
  require(num_latent >= 1, ErrorKind::InvalidInput, "synthetic spec needs at least 1 latent attribute");
  SyntheticSpec spec;
  spec.num_categories = num_categories;
  spec.seed = seed;
  Rng rng(derive_seed(seed, 0xA11));
  const int K = num_categories, M = num_latent;
  for (int attempt = 0;; ++attempt) {
    spec.latent.resize(K, M);
    for (int k = 0; k < K; ++k)
      for (int m = 0; m < M; ++m) {
        const double u = uniform(rng);
        spec.latent(k, m) = u < 0.4 ? 0.9 : (u < 0.85 ? 0.08 : 0.5);
      }
    bool ok = true;
    bool shared = false;
    for (int k = 0; k < K && ok; ++k) {
      ok = (spec.latent.row(k).array() >= 0.5).any();
      for (int j = k + 1; j < K && ok; ++j) {
        const double l1 = (spec.latent.row(k) - spec.latent.row(j)).lpNorm<1>();
        ok = l1 >= std::min(0.8, 0.4 * M);
        shared = shared || ((spec.latent.row(k).array() >= 0.5) && (spec.latent.row(j).array() >= 0.5)).any();
      }
    }
    if (ok && shared) {
      // Categories must stay tellable apart through majority votes, or their
      // perceptual distance collapses to zero.
      const Matrix vote = similarity_from_latent(spec.latent).unaryExpr([](double p) { return majority_rate(p); });
      for (int k = 0; k < K && ok; ++k)
        for (int j = k + 1; j < K && ok; ++j) ok = (vote.row(k) - vote.row(j)).lpNorm<1>() >= 0.5;
    }
    if ((ok && shared) || attempt > 10000) break;
  }
  for (int k = 0; k < K; ++k) {
    const std::string digits = std::to_string(k);
    spec.names.push_back("material" + std::string(digits.size() < 2 ? 2 - digits.size() : 0, '0') + digits);
    spec.textures.push_back(texture_from_latent(spec.latent.row(k).transpose()));
  }
  return spec;
}

Image render_texture(const SyntheticSpec& spec, int category, const Eigen::Ref<const Vector>& exhibited,
                     int width, int height, Rng& rng, const Eigen::Vector3d& cast) {
  const CategoryTexture& tex = spec.textures.at(static_cast<std::size_t>(category));
  const double area = static_cast<double>(width * height) / 1024.0;

  Eigen::Vector3d color = tex.base_color;
  for (int c = 0; c < 3; ++c) color(c) += tex.color_jitter * normal(rng);

  // Base surface: smoother surfaces have wider correlation and lower contrast.
  const double sigma = 0.6 + 2.5 * tex.smoothness;
  Eigen::ArrayXXd lum = smooth_noise(white_noise(width, height, rng), sigma * (1.0 + 3.0 * tex.anisotropy),
                                     sigma, tex.orientation) *
                        (0.18 * (1.0 - 0.85 * tex.smoothness));
  Eigen::ArrayXXd highlight = Eigen::ArrayXXd::Zero(height, width);

  for (Index m = 0; m < exhibited.size(); ++m) {
    if (exhibited(m) < 0.5) continue;
    const double variant = static_cast<double>(m / 6);
    switch (m % 6) {
      case 0: {  // striped
        const double angle = tex.orientation + 0.7 * static_cast<double>(m) + 0.4 * variant;
        const double f = tex.frequency * (1.0 + 0.5 * variant);
        const double phase = uniform(rng, 0, 2 * kPi);
        const double c = std::cos(angle), s = std::sin(angle);
        for (int y = 0; y < height; ++y)
          for (int x = 0; x < width; ++x) lum(y, x) += 0.22 * std::sin(2 * kPi * f * (x * c + y * s) + phase);
        break;
      }
      case 1:  // glossy
        add_blobs(highlight, poisson(rng, tex.specular_rate * (1.0 + variant) * area), 0.6, 1.0, 2.5, rng);
        break;
      case 2: {  // grainy
        const double amp = 0.15 / (1.0 + variant);
        for (Index i = 0; i < lum.size(); ++i) lum(i) += amp * normal(rng);
        break;
      }
      case 3:  // mottled
        lum += 0.25 * smooth_noise(white_noise(width, height, rng), 4.0 + variant, 4.0 + variant, 0.0);
        break;
      case 4: {  // woven
        const double f = 0.25 / (1.0 + 0.5 * variant);
        const double c = std::cos(tex.orientation), s = std::sin(tex.orientation);
        const double px = uniform(rng, 0, 2 * kPi), py = uniform(rng, 0, 2 * kPi);
        for (int y = 0; y < height; ++y)
          for (int x = 0; x < width; ++x) {
            const double u = x * c + y * s, v = -x * s + y * c;
            lum(y, x) += 0.14 * std::sin(2 * kPi * f * u + px) * std::sin(2 * kPi * f * v + py);
          }
        break;
      }
      default:  // speckled
        add_blobs(lum, poisson(rng, 12.0 * (1.0 + variant) * area), -0.45, 0.5, 0.9, rng);
        break;
    }
  }

  Image img(width, height);
  for (int c = 0; c < 3; ++c)
    img.ch[c] = (color(c) * cast(c) * (1.0 + lum) + highlight).cwiseMax(0.0).cwiseMin(1.0);
  return img;
}

namespace {

Vector draw_latent(const SyntheticSpec& spec, int category, Rng& rng) {
  Vector z(spec.num_latent());
  for (int m = 0; m < spec.num_latent(); ++m) z(m) = uniform(rng) < spec.latent(category, m) ? 1.0 : 0.0;
  return z;
}

Eigen::Vector3d draw_cast(double nuisance, Rng& rng) {
  Eigen::Vector3d cast;
  const double gain = std::exp(0.5 * nuisance * normal(rng));
  for (int c = 0; c < 3; ++c) cast(c) = gain * std::exp(nuisance * normal(rng));
  return cast;
}

}  // namespace

SyntheticSet generate_synthetic(const SyntheticSpec& spec, int n_per_category, int side) {
  spec.validate();
  require(n_per_category >= 1, ErrorKind::InvalidInput, "n_per_category must be >= 1");
  SyntheticSet out;
  out.exhibited.resize(static_cast<Index>(spec.num_categories) * n_per_category, spec.num_latent());
  Index row = 0;
  for (int k = 0; k < spec.num_categories; ++k)
    for (int i = 0; i < n_per_category; ++i, ++row) {
      Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(k) * 1000003u + static_cast<std::uint64_t>(i)));
      const Vector z = draw_latent(spec, k, rng);
      const Eigen::Vector3d cast =
          spec.nuisance > 0.0 ? draw_cast(spec.nuisance, rng) : Eigen::Vector3d::Ones().eval();
      Patch p;
      p.id = "syn-" + std::to_string(k) + "-" + std::to_string(i);
      p.source_image = "synthetic";
      p.bbox = {0, 0, side, side};
      p.category = k;
      p.region = p.id;
      p.pixels = render_texture(spec, k, z, side, side, rng, cast);
      out.exhibited.row(row) = z.transpose();
      out.patches.push_back(std::move(p));
    }
  return out;
}

SyntheticSet generate_regions(const SyntheticSpec& spec, int regions_per_category, int patches_per_region,
                              int side) {
  spec.validate();
  require(regions_per_category >= 1 && patches_per_region >= 1, ErrorKind::InvalidInput,
          "region and patch counts must be >= 1");
  SyntheticSet out;
  out.exhibited.resize(static_cast<Index>(spec.num_categories) * regions_per_category * patches_per_region,
                       spec.num_latent());
  Index row = 0;
  for (int k = 0; k < spec.num_categories; ++k)
    for (int r = 0; r < regions_per_category; ++r) {
      const std::uint64_t region_seed =
          derive_seed(spec.seed ^ 0x5EEDu, static_cast<std::uint64_t>(k) * 1000003u + static_cast<std::uint64_t>(r));
      Rng region_rng(region_seed);
      const Eigen::Vector3d cast = draw_cast(spec.nuisance, region_rng);
      const std::string region = "reg-" + std::to_string(k) + "-" + std::to_string(r);
      for (int i = 0; i < patches_per_region; ++i, ++row) {
        Rng rng(derive_seed(region_seed, static_cast<std::uint64_t>(i)));
        const Vector z = draw_latent(spec, k, rng);
        Patch p;
        p.id = region + "-" + std::to_string(i);
        p.source_image = "synthetic";
        p.bbox = {0, 0, side, side};
        p.category = k;
        p.region = region;
        p.pixels = render_texture(spec, k, z, side, side, rng, cast);
        out.exhibited.row(row) = z.transpose();
        out.patches.push_back(std::move(p));
      }
    }
  return out;
}

Matrix similarity_from_latent(const Matrix& latent) {
  const Index K = latent.rows();
  Matrix pi(K, K);
  for (Index k = 0; k < K; ++k)
    for (Index j = 0; j < K; ++j) {
      double none = 1.0;
      for (Index m = 0; m < latent.cols(); ++m) none *= 1.0 - latent(k, m) * latent(j, m);
      pi(k, j) = 1.0 - none;
    }
  return pi;
}

}  // namespace matattr::patchlab
