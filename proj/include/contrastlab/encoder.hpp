#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "contrastlab/core_math.hpp"

namespace clab {

/// Architecture shared by the query and key encoders: L+1 weight matrices,
/// hidden width m, output dimension d, input dimension b.
struct Shape {
  std::size_t L = 1;
  std::size_t m = 1;
  std::size_t d = 1;
  std::size_t b = 1;

  void validate() const;
  Index rows(std::size_t layer) const;
  Index cols(std::size_t layer) const;
  std::size_t parameter_count() const;

  friend bool operator==(const Shape&, const Shape&) = default;
};

struct Provenance {
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
  std::string label;

  friend bool operator==(const Provenance&, const Provenance&) = default;
};

/// Weight stack W_0 (m x b), W_1..W_{L-1} (m x m), W_L (d x m). The same type
/// holds gradients and perturbation directions.
struct Params {
  Shape shape;
  std::vector<Matrix> layers;
  Provenance provenance;

  static Params zeros(const Shape& shape);

  void check_consistent() const;
  double frobenius_norm() const;
  bool all_finite() const;
};

void require_same_shape(const Params& a, const Params& b, const char* where);
double inner(const Params& a, const Params& b);
/// a + scale * b
Params axpy(const Params& a, const Params& b, double scale);
Params scaled(const Params& a, double scale);

/// He initialization: hidden layers N(0, 2/m), output layer N(0, 1/d).
Params init_params(Rng& rng, const Shape& shape);

/// Fixed-size bit set for ReLU activation patterns.
class BitMask {
 public:
  BitMask() = default;
  explicit BitMask(std::size_t size);

  std::size_t size() const noexcept { return size_; }
  bool test(std::size_t i) const noexcept { return (words_[i >> 6] >> (i & 63)) & 1u; }
  void set(std::size_t i) noexcept { words_[i >> 6] |= (std::uint64_t{1} << (i & 63)); }
  std::size_t count() const noexcept;
  /// Number of positions where the two masks differ.
  std::size_t count_differences(const BitMask& other) const;

  friend bool operator==(const BitMask&, const BitMask&) = default;

 private:
  std::vector<std::uint64_t> words_;
  std::size_t size_ = 0;
};

/// Hidden states and activation patterns of one forward pass.
/// hidden[l] = D_l (W_l hidden[l-1]) with hidden[-1] = input; a unit is active
/// when its pre-activation is >= 0, so sigma'(0) = 1.
struct ForwardTrace {
  Vector input;
  std::vector<Vector> hidden;
  std::vector<BitMask> masks;
  Vector output;
};

ForwardTrace forward_trace(const Params& p, const Vector& x);
Vector forward(const Params& p, const Vector& x);

/// Input of layer l in the trace (the data point for l = 0).
const Vector& layer_input(const ForwardTrace& trace, std::size_t l);

/// b_l = W_L D_{L-1} W_{L-1} ... D_l W_l; b_L = W_L.
Matrix backprop_matrix(const Params& p, const ForwardTrace& trace, std::size_t l);

struct Perturbed {
  Params params;
  std::vector<double> layer_spectral_norms;  // of scale * q, per layer
  double frobenius_norm = 0.0;                // of scale * q
};

Perturbed apply_perturbation(const Params& p, const Params& q, double scale,
                             SpectralOptions options = {.tol = 1e-6, .max_steps = 10000});

/// Diagonal D'' such that relu(a) - relu(b) = (D + D'')(a - b) with
/// D_kk = 1{a_k >= 0}. Zero wherever the activation indicators agree.
Vector sign_correction(const Vector& a, const Vector& b);

/// Binary container: header (magic, version, shape, provenance) followed by
/// little-endian float64 weights per layer in row-major order.
void save_params(const Params& p, const std::string& path);
Params load_params(const std::string& path);
std::string params_to_bytes(const Params& p);
Params params_from_bytes(const std::string& bytes);

}  // namespace clab
