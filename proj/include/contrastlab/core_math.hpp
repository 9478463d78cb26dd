#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string_view>

#include <Eigen/Dense>

namespace clab {

// Dense row-major storage; the layout is part of the serialization contract.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// Counter-based splittable generator.
///
/// Every draw is a pure function of (seed, stream, counter): the key
/// K = mix(seed) ^ rotl(mix(stream ^ c), 17) is fixed at construction and the
/// i-th output is splitmix64_finalize(K + i * golden_gamma). Child streams are
/// derived by hashing a text label into the stream id, so independent
/// consumers (query init, key init, data, Monte Carlo) never share draws.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  Rng child(std::string_view label) const;
  Rng child(std::uint64_t index) const;

  std::uint64_t next_u64();
  /// Uniform on the open interval (0, 1), 53-bit resolution.
  double uniform();
  /// Standard normal via Box-Muller on two uniform draws; the second variate
  /// of each pair is cached and returned by the following call.
  double normal();
  /// Uniform integer in [0, bound) by rejection (no modulo bias).
  std::uint64_t below(std::uint64_t bound);

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }
  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  std::optional<double> spare_;
};

std::uint64_t hash_label(std::string_view label) noexcept;

/// i.i.d. N(0, variance) entries filled in row-major order.
Matrix gaussian_matrix(Rng& rng, Index rows, Index cols, double variance);
Vector gaussian_vector(Rng& rng, Index size, double variance);

struct SpectralOptions {
  double tol = 1e-8;
  int max_steps = 10000;
};

/// Largest singular value by power iteration on A^T A.
///
/// Stops once the relative change of the estimate falls below tol. The start
/// vector is drawn from a fixed-seed stream so results are reproducible.
/// Throws ConvergenceError when max_steps is reached.
double spectral_norm(const Matrix& A, SpectralOptions options = {});

/// Applies the Gram operator G_c = A_c^T A_c of column c to column c of the
/// block. Each column is an independent power iteration.
using GramOperator = std::function<Matrix(const Matrix&)>;

/// Batched, matrix-free power iteration; returns one estimate per column.
std::vector<double> spectral_norms(const GramOperator& gram, Index dim,
                                   Index columns, SpectralOptions options = {});

double frobenius_norm(const Matrix& A);

/// log(sum(exp(values))) with the maximum factored out.
double logsumexp(std::span<const double> values);

/// Binomial coefficient, saturating at UINT64_MAX.
std::uint64_t binomial(std::uint64_t n, std::uint64_t k) noexcept;

}  // namespace clab
