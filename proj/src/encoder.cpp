#include "contrastlab/encoder.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "contrastlab/error.hpp"

namespace clab {

void Shape::validate() const {
  if (L < 1 || m < 1 || d < 1 || b < 1) {
    throw ShapeError("shape: L, m, d, b must all be >= 1 (got L=" + std::to_string(L) +
                     " m=" + std::to_string(m) + " d=" + std::to_string(d) +
                     " b=" + std::to_string(b) + ")");
  }
}

Index Shape::rows(std::size_t layer) const {
  return static_cast<Index>(layer == L ? d : m);
}

Index Shape::cols(std::size_t layer) const {
  return static_cast<Index>(layer == 0 ? b : m);
}

std::size_t Shape::parameter_count() const {
  return m * b + (L - 1) * m * m + d * m;
}

Params Params::zeros(const Shape& shape) {
  shape.validate();
  Params p;
  p.shape = shape;
  for (std::size_t l = 0; l <= shape.L; ++l) {
    p.layers.push_back(Matrix::Zero(shape.rows(l), shape.cols(l)));
  }
  return p;
}

void Params::check_consistent() const {
  shape.validate();
  if (layers.size() != shape.L + 1) {
    throw ShapeError("params: expected " + std::to_string(shape.L + 1) + " layers, have " +
                     std::to_string(layers.size()));
  }
  for (std::size_t l = 0; l <= shape.L; ++l) {
    if (layers[l].rows() != shape.rows(l) || layers[l].cols() != shape.cols(l)) {
      throw ShapeError("params: layer " + std::to_string(l) + " is " +
                       std::to_string(layers[l].rows()) + "x" + std::to_string(layers[l].cols()) +
                       ", expected " + std::to_string(shape.rows(l)) + "x" +
                       std::to_string(shape.cols(l)));
    }
  }
}

double Params::frobenius_norm() const {
  double sum = 0.0;
  for (const Matrix& w : layers) sum += w.squaredNorm();
  return std::sqrt(sum);
}

bool Params::all_finite() const {
  for (const Matrix& w : layers) {
    if (!w.allFinite()) return false;
  }
  return true;
}

void require_same_shape(const Params& a, const Params& b, const char* where) {
  a.check_consistent();
  b.check_consistent();
  if (!(a.shape == b.shape)) throw ShapeError(std::string(where) + ": parameter shapes differ");
}

double inner(const Params& a, const Params& b) {
  require_same_shape(a, b, "inner");
  double sum = 0.0;
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    sum += a.layers[l].cwiseProduct(b.layers[l]).sum();
  }
  return sum;
}

Params axpy(const Params& a, const Params& b, double scale) {
  require_same_shape(a, b, "axpy");
  Params out = a;
  for (std::size_t l = 0; l < a.layers.size(); ++l) out.layers[l] += scale * b.layers[l];
  return out;
}

Params scaled(const Params& a, double scale) {
  Params out = a;
  for (Matrix& w : out.layers) w *= scale;
  return out;
}

Params init_params(Rng& rng, const Shape& shape) {
  shape.validate();
  Params p;
  p.shape = shape;
  p.provenance.seed = rng.seed();
  p.provenance.stream = rng.stream();
  const double hidden_variance = 2.0 / static_cast<double>(shape.m);
  const double output_variance = 1.0 / static_cast<double>(shape.d);
  for (std::size_t l = 0; l <= shape.L; ++l) {
    p.layers.push_back(gaussian_matrix(rng, shape.rows(l), shape.cols(l),
                                       l == shape.L ? output_variance : hidden_variance));
  }
  return p;
}

BitMask::BitMask(std::size_t size) : words_((size + 63) / 64, 0), size_(size) {}

std::size_t BitMask::count() const noexcept {
  std::size_t total = 0;
  for (std::uint64_t w : words_) total += static_cast<std::size_t>(std::popcount(w));
  return total;
}

std::size_t BitMask::count_differences(const BitMask& other) const {
  if (other.size_ != size_) throw ShapeError("BitMask: size mismatch");
  std::size_t total = 0;
  for (std::size_t i = 0; i < words_.size(); ++i) {
    total += static_cast<std::size_t>(std::popcount(words_[i] ^ other.words_[i]));
  }
  return total;
}

ForwardTrace forward_trace(const Params& p, const Vector& x) {
  if (x.size() != static_cast<Index>(p.shape.b)) {
    throw ShapeError("forward_trace: input has dimension " + std::to_string(x.size()) +
                     ", network expects " + std::to_string(p.shape.b));
  }
  ForwardTrace trace;
  trace.input = x;
  trace.hidden.reserve(p.shape.L);
  trace.masks.reserve(p.shape.L);
  const Vector* previous = &trace.input;
  for (std::size_t l = 0; l < p.shape.L; ++l) {
    Vector pre = p.layers[l] * (*previous);
    BitMask mask(static_cast<std::size_t>(pre.size()));
    for (Index r = 0; r < pre.size(); ++r) {
      if (pre(r) >= 0.0) {
        mask.set(static_cast<std::size_t>(r));
      } else {
        pre(r) = 0.0;
      }
    }
    trace.hidden.push_back(std::move(pre));
    trace.masks.push_back(std::move(mask));
    previous = &trace.hidden.back();
  }
  trace.output = p.layers[p.shape.L] * (*previous);
  return trace;
}

Vector forward(const Params& p, const Vector& x) { return forward_trace(p, x).output; }

const Vector& layer_input(const ForwardTrace& trace, std::size_t l) {
  return l == 0 ? trace.input : trace.hidden[l - 1];
}

Matrix backprop_matrix(const Params& p, const ForwardTrace& trace, std::size_t l) {
  const std::size_t L = p.shape.L;
  if (l > L) throw IndexError("backprop_matrix: layer " + std::to_string(l) + " > L");
  if (trace.masks.size() != L || trace.hidden.size() != L ||
      (L > 0 && trace.masks.front().size() != p.shape.m)) {
    throw ShapeError("backprop_matrix: trace was not produced by these parameters");
  }
  Matrix product = p.layers[L];
  for (std::size_t j = L; j-- > l;) {
    const BitMask& mask = trace.masks[j];
    for (Index c = 0; c < product.cols(); ++c) {
      if (!mask.test(static_cast<std::size_t>(c))) product.col(c).setZero();
    }
    product = product * p.layers[j];
  }
  return product;
}

Perturbed apply_perturbation(const Params& p, const Params& q, double scale,
                             SpectralOptions options) {
  require_same_shape(p, q, "apply_perturbation");
  Perturbed out;
  out.params = axpy(p, q, scale);
  out.params.provenance = p.provenance;
  double sum = 0.0;
  for (const Matrix& w : q.layers) {
    Matrix step = scale * w;
    sum += step.squaredNorm();
    out.layer_spectral_norms.push_back(step.isZero(0.0) ? 0.0 : spectral_norm(step, options));
  }
  out.frobenius_norm = std::sqrt(sum);
  return out;
}

Vector sign_correction(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) throw ShapeError("sign_correction: length mismatch");
  Vector correction = Vector::Zero(a.size());
  for (Index k = 0; k < a.size(); ++k) {
    const bool active_a = a(k) >= 0.0;
    const bool active_b = b(k) >= 0.0;
    if (active_a == active_b || a(k) == b(k)) continue;
    const double relu_diff = std::max(a(k), 0.0) - std::max(b(k), 0.0);
    correction(k) = relu_diff / (a(k) - b(k)) - (active_a ? 1.0 : 0.0);
  }
  return correction;
}

// -- binary container -------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'C', 'L', 'A', 'B', 'P', 'R', 'M', '1'};
constexpr std::uint32_t kFormatVersion = 1;

template <typename T>
void put_le(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    if (offset_ + sizeof(T) > bytes_.size()) throw ParseError("params: truncated container");
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, bytes_.data() + offset_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    offset_ += sizeof(T);
    T value;
    std::memcpy(&value, raw, sizeof(T));
    return value;
  }

  std::string take(std::size_t count) {
    if (offset_ + count > bytes_.size()) throw ParseError("params: truncated container");
    std::string s = bytes_.substr(offset_, count);
    offset_ += count;
    return s;
  }

  bool done() const noexcept { return offset_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t offset_ = 0;
};

}  // namespace

std::string params_to_bytes(const Params& p) {
  p.check_consistent();
  std::string out(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(out, kFormatVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.provenance.label.size()));
  for (std::uint64_t v : {p.shape.L, p.shape.m, p.shape.d, p.shape.b}) put_le<std::uint64_t>(out, v);
  put_le<std::uint64_t>(out, p.provenance.seed);
  put_le<std::uint64_t>(out, p.provenance.stream);
  out += p.provenance.label;
  put_le<std::uint64_t>(out, p.layers.size());
  for (const Matrix& w : p.layers) {
    put_le<std::uint64_t>(out, static_cast<std::uint64_t>(w.rows()));
    put_le<std::uint64_t>(out, static_cast<std::uint64_t>(w.cols()));
    const double* data = w.data();
    for (Index i = 0; i < w.size(); ++i) put_le<double>(out, data[i]);
  }
  return out;
}

Params params_from_bytes(const std::string& bytes) {
  Reader in(bytes);
  if (in.take(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) {
    throw ParseError("params: bad magic");
  }
  if (in.get<std::uint32_t>() != kFormatVersion) throw ParseError("params: unsupported version");
  const auto label_size = in.get<std::uint32_t>();
  Params p;
  p.shape.L = in.get<std::uint64_t>();
  p.shape.m = in.get<std::uint64_t>();
  p.shape.d = in.get<std::uint64_t>();
  p.shape.b = in.get<std::uint64_t>();
  p.provenance.seed = in.get<std::uint64_t>();
  p.provenance.stream = in.get<std::uint64_t>();
  p.provenance.label = in.take(label_size);
  const auto layer_count = in.get<std::uint64_t>();
  if (layer_count != p.shape.L + 1) throw ParseError("params: layer count disagrees with shape");
  for (std::uint64_t l = 0; l < layer_count; ++l) {
    const auto rows = static_cast<Index>(in.get<std::uint64_t>());
    const auto cols = static_cast<Index>(in.get<std::uint64_t>());
    if (rows != p.shape.rows(l) || cols != p.shape.cols(l)) {
      throw ParseError("params: layer " + std::to_string(l) + " dimensions disagree with shape");
    }
    Matrix w(rows, cols);
    double* data = w.data();
    for (Index i = 0; i < w.size(); ++i) data[i] = in.get<double>();
    p.layers.push_back(std::move(w));
  }
  if (!in.done()) throw ParseError("params: trailing bytes");
  return p;
}

void save_params(const Params& p, const std::string& path) {
  const std::string bytes = params_to_bytes(p);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path);
}

Params load_params(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return params_from_bytes(buffer.str());
}

}  // namespace clab
