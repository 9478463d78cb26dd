#include "contrastlab/core_math.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "contrastlab/error.hpp"

namespace clab {

namespace {

constexpr std::uint64_t kGoldenGamma = 0x9E3779B97F4A7C15ull;
constexpr std::uint64_t kStreamSalt = 0xD1B54A32D192ED03ull;

constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace

std::uint64_t hash_label(std::string_view label) noexcept {
  // FNV-1a, then a finalizer so short labels spread over all bits.
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : label) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return mix64(h);
}

Rng::Rng(std::uint64_t seed, std::uint64_t stream)
    : seed_(seed),
      stream_(stream),
      key_(mix64(seed + kGoldenGamma) ^ std::rotl(mix64(stream ^ kStreamSalt), 17)) {}

Rng Rng::child(std::string_view label) const {
  return Rng(seed_, mix64(stream_ * kGoldenGamma ^ hash_label(label)));
}

Rng Rng::child(std::uint64_t index) const {
  return child("#" + std::to_string(index));
}

std::uint64_t Rng::next_u64() {
  return mix64(key_ + (counter_++) * kGoldenGamma);
}

double Rng::uniform() {
  return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

double Rng::normal() {
  if (spare_) {
    double value = *spare_;
    spare_.reset();
    return value;
  }
  const double u1 = uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  return radius * std::cos(angle);
}

std::uint64_t Rng::below(std::uint64_t bound) {
  if (bound == 0) throw InvalidArgument("Rng::below: bound must be positive");
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % bound;
}

Matrix gaussian_matrix(Rng& rng, Index rows, Index cols, double variance) {
  if (rows < 1 || cols < 1) {
    throw ShapeError("gaussian_matrix: shape " + std::to_string(rows) + "x" +
                     std::to_string(cols) + " has an empty dimension");
  }
  if (!(variance >= 0.0) || !std::isfinite(variance)) {
    throw InvalidArgument("gaussian_matrix: variance must be finite and >= 0");
  }
  const double stddev = std::sqrt(variance);
  Matrix out(rows, cols);
  double* data = out.data();
  for (Index i = 0; i < rows * cols; ++i) data[i] = stddev * rng.normal();
  return out;
}

Vector gaussian_vector(Rng& rng, Index size, double variance) {
  Matrix column = gaussian_matrix(rng, size, 1, variance);
  return Eigen::Map<const Vector>(column.data(), size);
}

std::vector<double> spectral_norms(const GramOperator& gram, Index dim,
                                   Index columns, SpectralOptions options) {
  if (dim < 1 || columns < 1) throw ShapeError("spectral_norms: empty operator");
  if (!(options.tol > 0.0)) throw InvalidArgument("spectral_norms: tol must be > 0");

  Rng start(0x5EC7A1ull, hash_label("spectral-start"));
  Eigen::MatrixXd x(dim, columns);
  for (Index c = 0; c < columns; ++c) {
    for (Index r = 0; r < dim; ++r) x(r, c) = start.normal();
    x.col(c).normalize();
  }

  std::vector<double> sigma(static_cast<std::size_t>(columns), 0.0);
  std::vector<double> previous(sigma.size(), -1.0);
  for (int step = 1; step <= options.max_steps; ++step) {
    Matrix y = gram(Matrix(x));
    if (y.rows() != dim || y.cols() != columns) {
      throw ShapeError("spectral_norms: Gram operator changed the block shape");
    }
    bool converged = step > 1;
    for (Index c = 0; c < columns; ++c) {
      const auto uc = static_cast<std::size_t>(c);
      const double rayleigh = x.col(c).dot(y.col(c));
      sigma[uc] = std::sqrt(std::max(0.0, rayleigh));
      const double norm = y.col(c).norm();
      if (norm == 0.0) {
        sigma[uc] = 0.0;
      } else {
        x.col(c) = y.col(c) / norm;
      }
      if (std::abs(sigma[uc] - previous[uc]) > options.tol * sigma[uc]) converged = false;
      previous[uc] = sigma[uc];
    }
    if (converged) return sigma;
  }
  throw ConvergenceError("spectral_norms: no convergence within " +
                             std::to_string(options.max_steps) + " steps",
                         sigma, options.max_steps);
}

double spectral_norm(const Matrix& A, SpectralOptions options) {
  if (A.size() == 0) throw ShapeError("spectral_norm: empty matrix");
  auto gram = [&A](const Matrix& x) -> Matrix { return A.transpose() * (A * x); };
  return spectral_norms(gram, A.cols(), 1, options).front();
}

double frobenius_norm(const Matrix& A) { return A.norm(); }

double logsumexp(std::span<const double> values) {
  if (values.empty()) throw ShapeError("logsumexp: empty input");
  const double top = *std::max_element(values.begin(), values.end());
  if (std::isinf(top)) return top;
  double sum = 0.0;
  for (double v : values) sum += std::exp(v - top);
  return top + std::log(sum);
}

std::uint64_t binomial(std::uint64_t n, std::uint64_t k) noexcept {
  if (k > n) return 0;
  k = std::min(k, n - k);
  std::uint64_t result = 1;
  for (std::uint64_t i = 1; i <= k; ++i) {
    // result * (n - k + i) / i stays integral at every step.
    const std::uint64_t factor = n - k + i;
    if (result > std::numeric_limits<std::uint64_t>::max() / factor) {
      return std::numeric_limits<std::uint64_t>::max();
    }
    result = result * factor / i;
  }
  return result;
}

const char* error_code_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::shape: return "shape";
    case ErrorCode::index: return "index";
    case ErrorCode::convergence: return "convergence";
    case ErrorCode::generation: return "generation";
    case ErrorCode::enumeration: return "enumeration";
    case ErrorCode::evaluation: return "evaluation";
    case ErrorCode::divergence: return "divergence";
    case ErrorCode::parse: return "parse";
    case ErrorCode::io: return "io";
    case ErrorCode::probe: return "probe";
    case ErrorCode::invalid_argument: return "invalid_argument";
  }
  return "unknown";
}

}  // namespace clab
