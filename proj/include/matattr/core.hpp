#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace matattr {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Index = Eigen::Index;

using Rng = std::mt19937_64;

/// Error classes. The CLI maps them onto exit codes:
/// Parse/InvalidInput -> 1, Dimension -> 2, Numerical -> 3.
enum class ErrorKind {
  InvalidInput,
  Parse,
  Dimension,
  Numerical,
  MissingCategory,
  InsufficientVotes,
  OutOfRange,
  Io,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) { throw Error(kind, msg); }

inline void require(bool ok, ErrorKind kind, const std::string& msg) {
  if (!ok) fail(kind, msg);
}

inline void require_dims(Index a, Index b, std::string_view what) {
  if (a != b)
    fail(ErrorKind::Dimension, std::string(what) + ": expected " + std::to_string(b) + ", got " +
                                   std::to_string(a));
}

/// Clamp nonlinearity h(x) = min(max(x, 0), 1).
template <typename Scalar>
constexpr Scalar clamp01(Scalar x) {
  return x < Scalar(0) ? Scalar(0) : (x > Scalar(1) ? Scalar(1) : x);
}

/// Subgradient of the clamp: 1 on [0,1], 0 outside. At exactly 0 or 1 the
/// one-sided inside value is used.
template <typename Scalar>
constexpr Scalar clamp01_grad(Scalar x) {
  return (x < Scalar(0) || x > Scalar(1)) ? Scalar(0) : Scalar(1);
}

/// Derives an independent stream seed from a base seed and a stream index
/// (splitmix64 finalizer).
constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

/// Uniform real in [lo, hi). Implemented directly on the engine output so the
/// sequence is identical across standard library implementations.
inline double uniform(Rng& rng, double lo = 0.0, double hi = 1.0) {
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

inline double normal(Rng& rng) {
  // Box-Muller; one sample per call keeps the stream position predictable.
  double u1 = uniform(rng);
  while (u1 <= 0.0) u1 = uniform(rng);
  const double u2 = uniform(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return static_cast<std::size_t>(uniform(rng) * static_cast<double>(n)) % n;
}

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_index(rng, i)]);
}

/// Neumaier-compensated accumulator; makes long reductions insensitive to
/// evaluation order at the precision the tests check.
class KahanSum {
 public:
  void add(double x) {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x))
      comp_ += (sum_ - t) + x;
    else
      comp_ += (x - t) + sum_;
    sum_ = t;
  }
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

/// Writes `bytes` to `path` via a temporary file in the same directory and a rename.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

/// Hex SHA-256 of a byte string / file.
std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

/// Shortest round-trip decimal representation of a double.
std::string format_double(double v);
std::string format_float(float v);

std::vector<std::string> split(std::string_view s, char sep);
std::string trim(std::string_view s);

}  // namespace matattr
