#include "contrastlab/monitors.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include "contrastlab/error.hpp"

namespace clab {

namespace {

using json = nlohmann::ordered_json;

json finite_or_null(double value) {
  if (std::isfinite(value)) return value;
  return nullptr;
}

double median(std::vector<double> values) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const std::size_t mid = values.size() / 2;
  return values.size() % 2 ? values[mid] : 0.5 * (values[mid - 1] + values[mid]);
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

std::vector<double> log_spaced(double lo, double hi, std::size_t count) {
  std::vector<double> out;
  for (std::size_t i = 0; i < count; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(count - 1);
    out.push_back(std::exp(std::log(lo) + t * (std::log(hi) - std::log(lo))));
  }
  return out;
}

void require_ascending(const std::vector<double>& values, const char* what) {
  if (values.empty()) throw InvalidArgument(std::string(what) + ": sweep is empty");
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!(values[i] >= 0.0) || !std::isfinite(values[i])) {
      throw InvalidArgument(std::string(what) + ": sweep values must be finite and >= 0");
    }
    if (i > 0 && !(values[i] > values[i - 1])) {
      throw InvalidArgument(std::string(what) + ": sweep must be strictly ascending");
    }
  }
}

json fit_json(const LinearFit& fit) {
  json out;
  out["slope"] = finite_or_null(fit.slope);
  out["intercept"] = finite_or_null(fit.intercept);
  out["r2"] = finite_or_null(fit.r2);
  out["residual_rms"] = finite_or_null(fit.residual_rms);
  out["points"] = fit.x.size();
  json x = json::array();
  json y = json::array();
  for (double v : fit.x) x.push_back(finite_or_null(v));
  for (double v : fit.y) y.push_back(finite_or_null(v));
  out["x"] = std::move(x);
  out["y"] = std::move(y);
  return out;
}

json shape_json(const Shape& s) {
  return json{{"L", s.L}, {"m", s.m}, {"d", s.d}, {"b", s.b}};
}

Vector mask_vector(const BitMask& mask) {
  Vector out(static_cast<Index>(mask.size()));
  for (std::size_t k = 0; k < mask.size(); ++k) out(static_cast<Index>(k)) = mask.test(k) ? 1.0 : 0.0;
  return out;
}

}  // namespace

const char* to_string(ProbeStatus status) noexcept {
  switch (status) {
    case ProbeStatus::pass: return "pass";
    case ProbeStatus::fail: return "fail";
    case ProbeStatus::inconclusive: return "inconclusive";
  }
  return "fail";
}

// -------------------------------------------------------------------- fitting

LinearFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ShapeError("fit_line: x and y differ in length");
  if (x.size() < 2) throw ShapeError("fit_line: need at least two points");
  const double count = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / count;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / count;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0) throw InvalidArgument("fit_line: all x values coincide");
  LinearFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  double ss_res = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double r = y[i] - (fit.intercept + fit.slope * x[i]);
    ss_res += r * r;
  }
  // A flat line through flat data is a perfect fit.
  fit.r2 = syy > 0.0 ? 1.0 - ss_res / syy : (ss_res == 0.0 ? 1.0 : 0.0);
  fit.residual_rms = std::sqrt(ss_res / count);
  fit.x = x;
  fit.y = y;
  return fit;
}

LinearFit fit_loglog(const std::vector<double>& x, const std::vector<double>& y) {
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < x.size() && i < y.size(); ++i) {
    if (!(x[i] > 0.0) || !(y[i] > 0.0)) {
      throw InvalidArgument("fit_loglog: values must be positive (point " + std::to_string(i) + ")");
    }
    lx.push_back(std::log(x[i]));
    ly.push_back(std::log(y[i]));
  }
  if (x.size() != y.size()) throw ShapeError("fit_loglog: x and y differ in length");
  return fit_line(lx, ly);
}

// -------------------------------------------------------------------- reports

void ProbeReport::add_scalar(const std::string& key, double value) {
  scalars.emplace_back(key, value);
  if (!std::isfinite(value)) notes.push_back("scalar '" + key + "' is not finite");
}

const LinearFit& ProbeReport::add_fit(const std::string& key, LinearFit fit) {
  fits.push_back({key, std::move(fit)});
  return fits.back().fit;
}

const ProbeCheck& ProbeReport::check(const std::string& key, double value, std::optional<double> min,
                                     std::optional<double> max, const std::string& gate_fit,
                                     double gate_r2) {
  ProbeCheck c;
  c.name = key;
  c.value = value;
  c.min = min;
  c.max = max;
  c.gate_fit = gate_fit;
  c.gate_r2 = gate_r2;
  const bool inside = std::isfinite(value) && (!min || value >= *min) && (!max || value <= *max);
  c.status = inside ? ProbeStatus::pass : ProbeStatus::fail;
  if (!gate_fit.empty()) {
    const LinearFit& f = fit(gate_fit);
    if (!(f.r2 >= gate_r2)) c.status = ProbeStatus::inconclusive;
  }
  checks.push_back(std::move(c));
  return checks.back();
}

double ProbeReport::scalar(const std::string& key) const {
  for (const auto& [k, v] : scalars) {
    if (k == key) return v;
  }
  throw InvalidArgument("probe '" + name + "' has no scalar '" + key + "'");
}

const LinearFit& ProbeReport::fit(const std::string& key) const {
  for (const auto& f : fits) {
    if (f.name == key) return f.fit;
  }
  throw InvalidArgument("probe '" + name + "' has no fit '" + key + "'");
}

const ProbeCheck& ProbeReport::find_check(const std::string& key) const {
  for (const auto& c : checks) {
    if (c.name == key) return c;
  }
  throw InvalidArgument("probe '" + name + "' has no check '" + key + "'");
}

ProbeStatus ProbeReport::status() const {
  bool inconclusive = false;
  for (const auto& c : checks) {
    if (c.status == ProbeStatus::fail) return ProbeStatus::fail;
    if (c.status == ProbeStatus::inconclusive) inconclusive = true;
  }
  return inconclusive ? ProbeStatus::inconclusive : ProbeStatus::pass;
}

nlohmann::ordered_json ProbeReport::to_json() const {
  json out;
  out["probe"] = name;
  out["status"] = to_string(status());
  out["citation"] = citation;
  out["config"] = config;
  json s = json::object();
  for (const auto& [k, v] : scalars) s[k] = finite_or_null(v);
  out["scalars"] = std::move(s);
  json f = json::object();
  for (const auto& nf : fits) f[nf.name] = fit_json(nf.fit);
  out["fits"] = std::move(f);
  json c = json::array();
  for (const auto& chk : checks) {
    json entry;
    entry["name"] = chk.name;
    entry["value"] = finite_or_null(chk.value);
    entry["min"] = chk.min ? json(*chk.min) : json(nullptr);
    entry["max"] = chk.max ? json(*chk.max) : json(nullptr);
    entry["gate_fit"] = chk.gate_fit.empty() ? json(nullptr) : json(chk.gate_fit);
    entry["gate_r2"] = chk.gate_r2;
    entry["status"] = to_string(chk.status);
    c.push_back(std::move(entry));
  }
  out["checks"] = std::move(c);
  out["notes"] = notes;
  return out;
}

std::string ProbeReport::to_json_text() const { return to_json().dump(2) + "\n"; }

std::string ProbeReport::to_table() const {
  std::ostringstream os;
  os << name << "  [" << to_string(status()) << "]\n";
  std::size_t width = 8;
  for (const auto& c : checks) width = std::max(width, c.name.size());
  for (const auto& [k, v] : scalars) width = std::max(width, k.size());
  os << std::setprecision(6);
  for (const auto& c : checks) {
    os << "  " << std::left << std::setw(static_cast<int>(width)) << c.name << "  "
       << std::right << std::setw(14) << c.value << "  ";
    std::ostringstream range;
    range << std::setprecision(4) << "[";
    if (c.min) range << *c.min; else range << "-inf";
    range << ", ";
    if (c.max) range << *c.max; else range << "inf";
    range << "]";
    os << std::left << std::setw(26) << range.str() << " " << to_string(c.status) << "\n";
  }
  for (const auto& nf : fits) {
    os << "  fit " << nf.name << ": slope " << nf.fit.slope << ", R^2 " << nf.fit.r2 << "\n";
  }
  for (const auto& note : notes) os << "  note: " << note << "\n";
  return os.str();
}

// ----------------------------------------------------------------- init probe

double max_masked_product_norm(const Params& p, const std::vector<ForwardTrace>& traces,
                               SpectralOptions options, bool* converged) {
  if (converged) *converged = true;
  const std::size_t L = p.shape.L;
  if (L < 2 || traces.empty()) return 0.0;
  const auto m = static_cast<Index>(p.shape.m);

  struct Column {
    std::size_t a, b, sample;
  };
  std::vector<Column> columns;
  for (std::size_t a = 1; a <= L - 1; ++a) {
    for (std::size_t b = a; b <= L - 1; ++b) {
      for (std::size_t i = 0; i < traces.size(); ++i) columns.push_back({a, b, i});
    }
  }
  // masks[i][l] as 0/1 vectors
  std::vector<std::vector<Vector>> masks(traces.size());
  for (std::size_t i = 0; i < traces.size(); ++i) {
    for (const BitMask& mk : traces[i].masks) masks[i].push_back(mask_vector(mk));
  }

  // Columns are processed layer by layer so that each weight matrix is applied
  // once per step to every chain that passes through it.
  auto gram = [&](const Matrix& v) -> Matrix {
    Eigen::MatrixXd y(m, static_cast<Index>(columns.size()));
    for (std::size_t l = 1; l <= L - 1; ++l) {
      std::vector<Index> active;
      for (std::size_t c = 0; c < columns.size(); ++c) {
        if (columns[c].a <= l && l <= columns[c].b) active.push_back(static_cast<Index>(c));
      }
      Eigen::MatrixXd x(m, static_cast<Index>(active.size()));
      for (std::size_t j = 0; j < active.size(); ++j) {
        const Column& col = columns[static_cast<std::size_t>(active[j])];
        if (col.a == l) {
          x.col(static_cast<Index>(j)) = v.col(active[j]);
        } else {
          x.col(static_cast<Index>(j)) = y.col(active[j]).cwiseProduct(masks[col.sample][l - 1]);
        }
      }
      const Eigen::MatrixXd out = p.layers[l] * x;
      for (std::size_t j = 0; j < active.size(); ++j) y.col(active[j]) = out.col(static_cast<Index>(j));
    }
    Eigen::MatrixXd z(m, static_cast<Index>(columns.size()));
    for (std::size_t l = L - 1; l >= 1; --l) {
      std::vector<Index> active;
      for (std::size_t c = 0; c < columns.size(); ++c) {
        if (columns[c].a <= l && l <= columns[c].b) active.push_back(static_cast<Index>(c));
      }
      Eigen::MatrixXd x(m, static_cast<Index>(active.size()));
      for (std::size_t j = 0; j < active.size(); ++j) {
        const Column& col = columns[static_cast<std::size_t>(active[j])];
        if (col.b == l) {
          x.col(static_cast<Index>(j)) = y.col(active[j]);
        } else {
          x.col(static_cast<Index>(j)) = z.col(active[j]).cwiseProduct(masks[col.sample][l]);
        }
      }
      const Eigen::MatrixXd out = p.layers[l].transpose() * x;
      for (std::size_t j = 0; j < active.size(); ++j) z.col(active[j]) = out.col(static_cast<Index>(j));
    }
    return z;
  };

  std::vector<double> sigma;
  try {
    sigma = spectral_norms(gram, m, static_cast<Index>(columns.size()), options);
  } catch (const ConvergenceError& e) {
    sigma = e.last_estimates();
    if (converged) *converged = false;
  }
  return *std::max_element(sigma.begin(), sigma.end());
}

namespace {

struct EncoderInitStats {
  double hidden_norm_max_deviation = 0.0;
  double hidden_norm_min = std::numeric_limits<double>::infinity();
  double hidden_norm_max = 0.0;
  double product_norm_max = 0.0;
  bool product_converged = true;
  double backward_ratio_max = 0.0;
  double output_norm_max = 0.0;
  double separation_min = std::numeric_limits<double>::infinity();
  bool degenerate = false;
};

EncoderInitStats encoder_init_stats(const Params& p, const Dataset& data, double delta,
                                    const InitProbeOptions& options, Rng rng) {
  EncoderInitStats s;
  std::vector<ForwardTrace> traces;
  for (const Vector& x : data.points) traces.push_back(forward_trace(p, x));
  const std::size_t L = p.shape.L;

  for (const ForwardTrace& tr : traces) {
    for (const Vector& h : tr.hidden) {
      const double norm = h.norm();
      s.hidden_norm_min = std::min(s.hidden_norm_min, norm);
      s.hidden_norm_max = std::max(s.hidden_norm_max, norm);
      s.hidden_norm_max_deviation = std::max(s.hidden_norm_max_deviation, std::abs(norm - 1.0));
      if (norm == 0.0) s.degenerate = true;
    }
    s.output_norm_max = std::max(s.output_norm_max, tr.output.norm());
  }

  s.product_norm_max = max_masked_product_norm(p, traces, options.spectral, &s.product_converged);

  const double scale = std::sqrt(static_cast<double>(p.shape.m) / static_cast<double>(p.shape.d));
  for (std::size_t i = 0; i < traces.size(); ++i) {
    for (std::size_t r = 0; r < options.backward_probes; ++r) {
      const Vector u = gaussian_vector(rng, static_cast<Index>(p.shape.d), 1.0);
      const double unorm = u.norm();
      Vector z = p.layers[L].transpose() * u;
      s.backward_ratio_max = std::max(s.backward_ratio_max, z.norm() / (scale * unorm));
      for (std::size_t l = L - 1; l >= 1; --l) {
        z = p.layers[l].transpose() * z.cwiseProduct(mask_vector(traces[i].masks[l]));
        s.backward_ratio_max = std::max(s.backward_ratio_max, z.norm() / (scale * unorm));
      }
    }
  }

  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t i = 0; i < traces.size(); ++i) {
      for (std::size_t j = i + 1; j < traces.size(); ++j) {
        const double dist = (traces[i].hidden[l] - traces[j].hidden[l]).norm();
        s.separation_min = std::min(s.separation_min, dist / delta);
      }
    }
  }
  if (traces.size() < 2) s.separation_min = 0.0;
  return s;
}

double params_distance(const Params& a, const Params& b) {
  require_same_shape(a, b, "params_distance");
  double sum = 0.0;
  for (std::size_t l = 0; l < a.layers.size(); ++l) sum += (a.layers[l] - b.layers[l]).squaredNorm();
  return std::sqrt(sum);
}

}  // namespace

ProbeReport init_probe(const Params& query, const Params& key, const Dataset& data,
                       const InitProbeOptions& options) {
  require_same_shape(query, key, "init_probe");
  if (data.n() == 0) throw ShapeError("init_probe: empty dataset");
  if (data.b() != query.shape.b) throw ShapeError("init_probe: data dimension differs from b");
  const double delta = options.delta.value_or(data.delta);
  if (!(delta > 0.0)) throw InvalidArgument("init_probe: delta must be positive");

  ProbeReport report;
  report.name = "init";
  report.citation =
      "initialization: hidden-norm concentration, masked-product spectral bound O(sqrt L), "
      "backward operator bound O(sqrt(m/d)), bounded outputs, separation kept at delta/2";
  report.config = json{{"shape", shape_json(query.shape)},
                       {"n", data.n()},
                       {"delta", delta},
                       {"epsilon", options.epsilon},
                       {"product_ratio_max", options.product_ratio_max},
                       {"output_norm_max", options.output_norm_max},
                       {"separation_ratio_min", options.separation_ratio_min},
                       {"backward_probes", options.backward_probes},
                       {"spectral_tol", options.spectral.tol},
                       {"seed", options.seed}};

  const Rng base = Rng(options.seed, hash_label("init-probe"));
  const double sqrt_l = std::sqrt(static_cast<double>(query.shape.L));
  bool any_degenerate = false;
  for (int which = 0; which < 2; ++which) {
    const std::string prefix = which == 0 ? "query." : "key.";
    const Params& p = which == 0 ? query : key;
    const EncoderInitStats s = encoder_init_stats(p, data, delta, options,
                                                  base.child(which == 0 ? "query" : "key"));
    report.add_scalar(prefix + "hidden_norm_min", s.hidden_norm_min);
    report.add_scalar(prefix + "hidden_norm_max", s.hidden_norm_max);
    report.add_scalar(prefix + "hidden_norm_max_deviation", s.hidden_norm_max_deviation);
    report.add_scalar(prefix + "product_norm_max", s.product_norm_max);
    report.add_scalar(prefix + "product_ratio", s.product_norm_max / sqrt_l);
    report.add_scalar(prefix + "backward_ratio_max", s.backward_ratio_max);
    report.add_scalar(prefix + "output_norm_max", s.output_norm_max);
    report.add_scalar(prefix + "separation_ratio_min", s.separation_min);
    report.add_scalar(prefix + "degenerate", s.degenerate ? 1.0 : 0.0);
    any_degenerate = any_degenerate || s.degenerate;
    if (!s.product_converged) {
      report.notes.push_back(prefix + "product power iteration hit its step limit; last estimate kept");
    }

    report.check(prefix + "hidden_norm_max_deviation", s.hidden_norm_max_deviation, std::nullopt,
                 options.epsilon);
    if (query.shape.L >= 2) {
      report.check(prefix + "product_ratio", s.product_norm_max / sqrt_l, std::nullopt,
                   options.product_ratio_max);
    }
    report.check(prefix + "output_norm_max", s.output_norm_max, std::nullopt, options.output_norm_max);
    report.check(prefix + "separation_ratio_min", s.separation_min, options.separation_ratio_min,
                 std::nullopt);
  }
  if (query.shape.L < 2) {
    report.notes.push_back("L < 2: no intermediate layers, masked-product bound skipped");
  }
  if (any_degenerate) report.notes.push_back("degenerate network: some hidden state is exactly zero");
  if (options.query_init) report.add_scalar("query.distance_from_init", params_distance(query, *options.query_init));
  if (options.key_init) report.add_scalar("key.distance_from_init", params_distance(key, *options.key_init));
  return report;
}

// ------------------------------------------------------- gradient bound probe

Dataset gradient_bound_dataset(const GradientBoundSetup& setup) {
  Rng rng = Rng(setup.seed, hash_label("gradient-bound")).child("data");
  return generate_separated(rng, setup.n, setup.b, setup.delta_min);
}

std::vector<GradientBoundSample> gradient_bound_samples(const GradientBoundSetup& setup,
                                                        std::size_t m) {
  if (setup.replicates < 1) throw InvalidArgument("gradient_bound: replicates must be >= 1");
  const Dataset data = gradient_bound_dataset(setup);
  const Shape shape{setup.L, m, setup.d, setup.b};
  shape.validate();
  HyperParams hp;
  hp.k = setup.k;
  hp.validate(setup.n);
  const Rng base = Rng(setup.seed, hash_label("gradient-bound")).child(static_cast<std::uint64_t>(m));
  std::vector<GradientBoundSample> out;
  for (std::size_t r = 0; r < setup.replicates; ++r) {
    const Rng rep = base.child(static_cast<std::uint64_t>(r));
    Rng qrng = rep.child("query");
    Rng krng = rep.child("key");
    const Params query = init_params(qrng, shape);
    const Params key = init_params(krng, shape);
    Rng mc = rep.child("monte-carlo");
    const GradientResult g = grad_params(query, key, data, hp, &mc);
    GradientBoundSample s;
    s.m = m;
    s.replicate = r;
    s.grad_w_sq = std::pow(g.grad_query.frobenius_norm(), 2);
    s.grad_theta_sq = std::pow(g.grad_key.frobenius_norm(), 2);
    s.losstilde_sq = std::pow(g.loss_vectors.losstilde_norm(), 2);
    s.losshat_sq = std::pow(g.loss_vectors.losshat_norm(), 2);
    if (s.losstilde_sq == 0.0 || s.losshat_sq == 0.0) {
      throw ProbeError("gradient_bound: loss-vectors vanish at m=" + std::to_string(m) +
                       "; the data or encoders are symmetric, use distinct points");
    }
    out.push_back(s);
  }
  return out;
}

ProbeReport gradient_bound_report(const GradientBoundSetup& setup,
                                  const std::vector<GradientBoundSample>& samples) {
  std::vector<std::size_t> widths;
  for (const auto& s : samples) {
    if (std::find(widths.begin(), widths.end(), s.m) == widths.end()) widths.push_back(s.m);
  }
  std::sort(widths.begin(), widths.end());
  if (widths.size() < 3) throw InvalidArgument("gradient_bound: need at least three widths");
  for (std::size_t m : widths) {
    if (m == 0 || (m & (m - 1)) != 0) {
      throw InvalidArgument("gradient_bound: widths must be powers of two (got " + std::to_string(m) + ")");
    }
  }

  ProbeReport report;
  report.name = "gradient_bound";
  report.citation =
      "gradient norms: ||grad||_F^2 lies between Omega(m delta/(n^3 d)) and O(L m/(n d)) times "
      "the squared loss-vector norm, for both encoders";
  json grid = json::array();
  for (std::size_t m : widths) grid.push_back(m);
  report.config = json{{"n", setup.n}, {"k", setup.k}, {"L", setup.L}, {"d", setup.d},
                       {"b", setup.b}, {"delta_min", setup.delta_min}, {"seed", setup.seed},
                       {"replicates", setup.replicates}, {"m_grid", grid}};

  const double nd = static_cast<double>(setup.n * setup.d);
  std::vector<double> xs, gw, gt, rw, rt;
  double r_min_w = std::numeric_limits<double>::infinity(), r_max_w = 0.0;
  double r_min_t = std::numeric_limits<double>::infinity(), r_max_t = 0.0;
  for (std::size_t m : widths) {
    double sw = 0.0, st = 0.0, lw = 0.0, lt = 0.0;
    std::size_t count = 0;
    for (const auto& s : samples) {
      if (s.m != m) continue;
      ++count;
      sw += s.grad_w_sq;
      st += s.grad_theta_sq;
      lw += s.losstilde_sq;
      lt += s.losshat_sq;
      const double md = static_cast<double>(m);
      const double rw_s = s.grad_w_sq * nd / (md * s.losstilde_sq);
      const double rt_s = s.grad_theta_sq * nd / (md * s.losshat_sq);
      r_min_w = std::min(r_min_w, rw_s);
      r_max_w = std::max(r_max_w, rw_s);
      r_min_t = std::min(r_min_t, rt_s);
      r_max_t = std::max(r_max_t, rt_s);
    }
    const double c = static_cast<double>(count);
    const double md = static_cast<double>(m);
    xs.push_back(md);
    gw.push_back(sw / c);
    gt.push_back(st / c);
    rw.push_back((sw / c) * nd / (md * (lw / c)));
    rt.push_back((st / c) * nd / (md * (lt / c)));
    const std::string tag = "m" + std::to_string(m) + ".";
    report.add_scalar(tag + "grad_w_sq", sw / c);
    report.add_scalar(tag + "grad_theta_sq", st / c);
    report.add_scalar(tag + "losstilde_sq", lw / c);
    report.add_scalar(tag + "losshat_sq", lt / c);
    report.add_scalar(tag + "r_w", rw.back());
    report.add_scalar(tag + "r_theta", rt.back());
  }
  const LinearFit& fw = report.add_fit("grad_w_sq_vs_m", fit_loglog(xs, gw));
  const LinearFit& ft = report.add_fit("grad_theta_sq_vs_m", fit_loglog(xs, gt));
  const LinearFit& frw = report.add_fit("r_w_vs_m", fit_loglog(xs, rw));
  const LinearFit& frt = report.add_fit("r_theta_vs_m", fit_loglog(xs, rt));
  report.add_scalar("slope_w", fw.slope);
  report.add_scalar("slope_theta", ft.slope);
  report.add_scalar("r2_w", fw.r2);
  report.add_scalar("r2_theta", ft.r2);
  report.add_scalar("r_slope_w", frw.slope);
  report.add_scalar("r_slope_theta", frt.slope);
  report.add_scalar("r_w_min", r_min_w);
  report.add_scalar("r_w_max", r_max_w);
  report.add_scalar("r_theta_min", r_min_t);
  report.add_scalar("r_theta_max", r_max_t);
  // Symmetric bounds: the two bands should overlap. Measured as the ratio of
  // the band centres (geometric means).
  const double band_ratio = std::sqrt(r_min_t * r_max_t) / std::sqrt(r_min_w * r_max_w);
  report.add_scalar("band_ratio_theta_over_w", band_ratio);

  report.check("slope_w", fw.slope, 0.85, 1.15, "grad_w_sq_vs_m", 0.9);
  report.check("r2_w", fw.r2, 0.95, std::nullopt);
  report.check("slope_theta", ft.slope, 0.85, 1.15, "grad_theta_sq_vs_m", 0.9);
  report.check("r2_theta", ft.r2, 0.95, std::nullopt);
  report.check("r_min", std::min(r_min_w, r_min_t), std::numeric_limits<double>::min(), std::nullopt);
  report.check("band_ratio_theta_over_w", band_ratio, 0.25, 4.0);
  return report;
}

ProbeReport gradient_bound_probe(const GradientBoundSetup& setup,
                                 const std::vector<std::size_t>& m_grid) {
  std::vector<GradientBoundSample> all;
  for (std::size_t m : m_grid) {
    auto rows = gradient_bound_samples(setup, m);
    all.insert(all.end(), rows.begin(), rows.end());
  }
  return gradient_bound_report(setup, all);
}

// ------------------------------------------------------------ smoothness probe

namespace {

double loss_at(const Params& query, const Params& key, const Dataset& data, const HyperParams& hp) {
  const EncodedBatch batch = encode(query, key, data);
  if (resolve_mode(data.n(), hp) == ExpectationMode::exact) {
    return total_loss_exact(batch, hp.k, hp.enumeration_cap);
  }
  // Common random numbers: the same subsets for every evaluation.
  Rng rng(0, hash_label("smoothness-monte-carlo"));
  return expectation_monte_carlo(batch, hp.k, rng, hp.mc_samples).loss;
}

Params gaussian_like(const Params& shape_of, Rng& rng) {
  Params out = Params::zeros(shape_of.shape);
  for (Matrix& w : out.layers) w = gaussian_matrix(rng, w.rows(), w.cols(), 1.0);
  return out;
}

}  // namespace

double taylor_residual(const Params& query, const Params& key, const Dataset& data,
                       const HyperParams& hp, const GradientResult& at, const Params& u,
                       const Params& v, double rho) {
  const double moved = loss_at(axpy(query, u, rho), axpy(key, v, rho), data, hp);
  const double linear = rho * (inner(at.grad_query, u) + inner(at.grad_key, v));
  return moved - at.loss - linear;
}

ProbeReport smoothness_probe(const Params& query, const Params& key, const Dataset& data,
                             const HyperParams& hp, const SmoothnessOptions& options) {
  require_same_shape(query, key, "smoothness_probe");
  const std::vector<double> rhos = options.rhos.empty() ? log_spaced(1e-4, 1e-2, 9) : options.rhos;
  require_ascending(rhos, "smoothness_probe");

  const Shape& s = query.shape;
  const std::size_t n = data.n();
  double omega = options.omega;
  double tau = options.tau;
  if (omega == 0.0 || tau == 0.0) {
    const TheoryHyperParams theory =
        theoretical_hyperparams(n, hp.k, s.L, s.m, s.d, data.delta, hp.epsilon);
    if (omega == 0.0) omega = theory.omega;
    if (tau == 0.0) tau = theory.tau;
  }

  Rng rng = Rng(options.seed, hash_label("smoothness-probe"));
  Rng urng = rng.child("query-direction");
  Rng vrng = rng.child("key-direction");
  Params u = gaussian_like(query, urng);
  Params v = gaussian_like(key, vrng);
  const double joint = std::hypot(u.frobenius_norm(), v.frobenius_norm());
  u = scaled(u, 1.0 / joint);
  v = scaled(v, 1.0 / joint);

  GradientResult at;
  {
    Rng mc(0, hash_label("smoothness-monte-carlo"));
    at = grad_params(query, key, data, hp, &mc);
    at.loss = loss_at(query, key, data, hp);
  }

  ProbeReport report;
  report.name = "smoothness";
  report.citation =
      "semi-smoothness: first-order Taylor error bounded by an omega^(1/3)-scaled linear term "
      "plus a quadratic term in the perturbation";
  json rho_json = json::array();
  for (double r : rhos) rho_json.push_back(r);
  report.config = json{{"shape", shape_json(s)}, {"n", n}, {"k", hp.k},
                       {"mode", to_string(resolve_mode(n, hp))}, {"rhos", rho_json},
                       {"omega", omega}, {"tau", tau}, {"exponent_min", options.exponent_min},
                       {"seed", options.seed}};

  const double L = static_cast<double>(s.L);
  const double m = static_cast<double>(s.m);
  const double d = static_cast<double>(s.d);
  const double nn = static_cast<double>(n);
  const double unorm = u.frobenius_norm();
  const double vnorm = v.frobenius_norm();
  const double lt = at.loss_vectors.losstilde_norm();
  const double lh = at.loss_vectors.losshat_norm();
  const double first = L * L * std::sqrt(m * std::log(m)) / std::sqrt(nn * d);
  const double second = static_cast<double>(hp.k) * L * L * m * m / (d * d);

  std::vector<double> xs, ys;
  double bound_ratio_max = 0.0;
  std::size_t zero_residuals = 0;
  for (double rho : rhos) {
    const double r = taylor_residual(query, key, data, hp, at, u, v, rho);
    const double reference =
        first * (std::cbrt(omega) * lt * rho * unorm + std::cbrt(tau) * lh * rho * vnorm) +
        second * (tau * tau * rho * rho * unorm * unorm + omega * omega * rho * rho * vnorm * vnorm);
    if (!std::isfinite(r)) throw EvaluationError("smoothness_probe: non-finite perturbed loss at rho=" + std::to_string(rho));
    const std::string tag = "rho_" + std::to_string(xs.size() + zero_residuals);
    report.add_scalar(tag + ".rho", rho);
    report.add_scalar(tag + ".residual", r);
    if (reference > 0.0) bound_ratio_max = std::max(bound_ratio_max, std::abs(r) / reference);
    if (r == 0.0) {
      ++zero_residuals;
      continue;
    }
    xs.push_back(rho);
    ys.push_back(std::abs(r));
  }
  report.add_scalar("bound_ratio_max", bound_ratio_max);
  report.add_scalar("zero_residuals", static_cast<double>(zero_residuals));
  if (xs.size() >= 3) {
    const LinearFit& f = report.add_fit("residual_vs_rho", fit_loglog(xs, ys));
    report.add_scalar("exponent", f.slope);
    report.add_scalar("r2", f.r2);
    report.check("exponent", f.slope, options.exponent_min, std::nullopt, "residual_vs_rho", 0.9);
  } else {
    report.notes.push_back("fewer than three nonzero residuals; exponent not fitted");
    report.check("exponent", std::numeric_limits<double>::quiet_NaN(), options.exponent_min, std::nullopt);
  }
  report.notes.push_back("both encoders move together; the residual is not split across terms");
  return report;
}

// ---------------------------------------------------------- trace-based checks

ProbeReport descent_check(const TrainTrace& trace, const DescentScale& scale,
                          const DescentOptions& options) {
  if (trace.records.size() < 2) throw InvalidArgument("descent_check: trace needs at least two records");
  ProbeReport report;
  report.name = "descent";
  report.citation =
      "per-step descent: L(t+1) - L(t) <= -Omega(min(eta, gamma) delta m/(n^3 d)) ||l(t)||^2";
  report.config = json{{"n", scale.n}, {"d", scale.d}, {"m", scale.m}, {"delta", scale.delta},
                       {"eta", trace.hp.eta}, {"gamma", trace.hp.gamma},
                       {"steps", trace.records.size() - 1}};

  const double step = std::min(trace.hp.eta, trace.hp.gamma);
  const bool frozen = !(step > 0.0);
  const double factor = std::pow(static_cast<double>(scale.n), 3) * static_cast<double>(scale.d) /
                        (scale.delta * static_cast<double>(scale.m));
  std::vector<double> c;
  std::size_t skipped = 0, positive = 0, decreased = 0;
  const std::size_t steps = trace.records.size() - 1;
  for (std::size_t t = 0; t < steps; ++t) {
    const StepRecord& now = trace.records[t];
    const StepRecord& next = trace.records[t + 1];
    if (next.loss < now.loss) ++decreased;
    const double lv2 = now.loss_vec_norm * now.loss_vec_norm;
    if (lv2 == 0.0) {
      ++skipped;
      continue;
    }
    const double ct = frozen ? 0.0 : (now.loss - next.loss) * factor / (step * lv2);
    c.push_back(ct);
    if (ct > 0.0) ++positive;
  }
  const double used = static_cast<double>(c.size());
  const double positive_fraction = c.empty() ? 0.0 : static_cast<double>(positive) / used;
  const double decrease_fraction = static_cast<double>(decreased) / static_cast<double>(steps);
  const double med = median(c);
  report.add_scalar("c_min", c.empty() ? 0.0 : *std::min_element(c.begin(), c.end()));
  report.add_scalar("c_median", med);
  report.add_scalar("c_max", c.empty() ? 0.0 : *std::max_element(c.begin(), c.end()));
  report.add_scalar("c_dispersion", med != 0.0 ? (quantile(c, 0.75) - quantile(c, 0.25)) / std::abs(med) : 0.0);
  report.add_scalar("c_positive_fraction", positive_fraction);
  report.add_scalar("skipped_steps", static_cast<double>(skipped));
  report.add_scalar("loss_decrease_fraction", decrease_fraction);
  report.add_scalar("loss_increase_rate", 1.0 - decrease_fraction);

  const std::vector<double> running = running_loss_vec_average(trace);
  const double initial = trace.records.front().loss_vec_norm;
  const double final_avg = running.back();
  const double ratio = initial > 0.0 ? final_avg / initial : 0.0;
  report.add_scalar("running_average_initial", initial);
  report.add_scalar("running_average_final", final_avg);
  report.add_scalar("running_average_ratio", ratio);
  report.add_scalar("epsilon", trace.hp.epsilon);
  report.add_scalar("degenerate", frozen ? 1.0 : 0.0);
  if (frozen) report.notes.push_back("degenerate: zero step size, parameters never move");
  if (skipped > 0) report.notes.push_back(std::to_string(skipped) + " steps skipped with zero loss-vector");

  report.check("c_positive_fraction", positive_fraction, options.positive_fraction_min, std::nullopt);
  report.check("loss_decrease_fraction", decrease_fraction, options.decrease_fraction_min, std::nullopt);
  report.check("running_average_ratio", ratio, std::nullopt, options.running_average_ratio_max);
  return report;
}

ProbeReport trajectory_check(const TrainTrace& trace, double omega, double tau) {
  if (trace.records.empty()) throw InvalidArgument("trajectory_check: empty trace");
  if (!(omega > 0.0) || !(tau > 0.0)) throw InvalidArgument("trajectory_check: radii must be positive");
  ProbeReport report;
  report.name = "trajectory";
  report.citation = "trajectory: iterates stay in the balls B(W0, omega) and B(theta0, tau)";
  report.config = json{{"omega", omega}, {"tau", tau}, {"eta", trace.hp.eta},
                       {"gamma", trace.hp.gamma}, {"records", trace.records.size()}};

  double max_w = 0.0, max_t = 0.0;
  double sum_w = 0.0, sum_t = 0.0;
  double slack_w = 0.0, slack_t = 0.0;  // max_t distance / telescoped bound
  for (std::size_t t = 0; t < trace.records.size(); ++t) {
    const StepRecord& r = trace.records[t];
    max_w = std::max(max_w, r.traj_w_fro);
    max_t = std::max(max_t, r.traj_theta_fro);
    if (t > 0) {
      slack_w = std::max(slack_w, sum_w > 0.0 ? r.traj_w_fro / sum_w : (r.traj_w_fro > 0.0 ? INFINITY : 0.0));
      slack_t = std::max(slack_t, sum_t > 0.0 ? r.traj_theta_fro / sum_t : (r.traj_theta_fro > 0.0 ? INFINITY : 0.0));
    }
    sum_w += trace.hp.eta * r.grad_w_fro;
    sum_t += trace.hp.gamma * r.grad_theta_fro;
  }
  const std::size_t last = trace.records.size() - 1;
  report.add_scalar("ratio_w", max_w / omega);
  report.add_scalar("ratio_theta", max_t / tau);
  report.add_scalar("final_w_distance", trace.records[last].traj_w_fro);
  report.add_scalar("final_theta_distance", trace.records[last].traj_theta_fro);
  // The last record carries no update, so its gradient is outside the sum.
  const double bound_w = sum_w - trace.hp.eta * trace.records[last].grad_w_fro;
  const double bound_t = sum_t - trace.hp.gamma * trace.records[last].grad_theta_fro;
  report.add_scalar("triangle_bound_w", bound_w);
  report.add_scalar("triangle_bound_theta", bound_t);
  report.add_scalar("triangle_slack_w", slack_w);
  report.add_scalar("triangle_slack_theta", slack_t);

  report.check("ratio_w", max_w / omega, std::nullopt, 1.0);
  report.check("ratio_theta", max_t / tau, std::nullopt, 1.0);
  report.check("triangle_slack_w", slack_w, std::nullopt, 1.0 + 1e-12);
  report.check("triangle_slack_theta", slack_t, std::nullopt, 1.0 + 1e-12);
  return report;
}

// ---------------------------------------------------------- perturbation probe

namespace {

struct SweepAccumulator {
  std::size_t flips = 0;
  double hidden_drift = 0.0;
  double output_drift = 0.0;
};

// Rank-one perturbation omega * u v^T with v = input / |input| that flips as
// many units as a unit vector u allows: the s smallest |pre-activations| are
// all pushed across zero when each receives omega |input| / sqrt(s).
Vector targeted_shift(const Vector& pre, double reach) {
  const Index m = pre.size();
  std::vector<Index> order(static_cast<std::size_t>(m));
  std::iota(order.begin(), order.end(), Index{0});
  std::sort(order.begin(), order.end(), [&](Index a, Index b) {
    const double fa = std::abs(pre(a)), fb = std::abs(pre(b));
    return fa != fb ? fa < fb : a < b;
  });
  std::size_t s = 0;
  for (std::size_t c = 1; c <= order.size(); ++c) {
    if (std::abs(pre(order[c - 1])) < reach / std::sqrt(static_cast<double>(c))) s = c;
  }
  Vector shift = Vector::Zero(m);
  if (s == 0) {
    const Index k = order.front();
    shift(k) = pre(k) >= 0.0 ? -reach : reach;
    return shift;
  }
  const double each = reach / std::sqrt(static_cast<double>(s));
  for (std::size_t c = 0; c < s; ++c) {
    const Index k = order[c];
    shift(k) = pre(k) >= 0.0 ? -each : each;
  }
  return shift;
}

}  // namespace

std::vector<PerturbationPoint> perturbation_sweep(const Params& p, const Dataset& data,
                                                  const std::vector<double>& omegas,
                                                  PerturbationDirection direction,
                                                  std::uint64_t seed) {
  require_ascending(omegas, "perturbation_probe");
  if (data.n() == 0) throw ShapeError("perturbation_probe: empty dataset");
  const std::size_t L = p.shape.L;
  const std::size_t n = data.n();
  const auto m = static_cast<Index>(p.shape.m);

  std::vector<ForwardTrace> base;
  for (const Vector& x : data.points) base.push_back(forward_trace(p, x));

  // Gaussian directions, each normalized to unit spectral norm. The baseline
  // goes through the same batched products so that omega = 0 is exact.
  std::vector<Matrix> directions;
  Eigen::MatrixXd batch_inputs(static_cast<Index>(data.b()), static_cast<Index>(n));
  std::vector<Eigen::MatrixXd> batch_pre;
  Eigen::MatrixXd batch_output;
  if (direction == PerturbationDirection::gaussian) {
    for (std::size_t i = 0; i < n; ++i) batch_inputs.col(static_cast<Index>(i)) = data.points[i];
    Eigen::MatrixXd h = batch_inputs;
    for (std::size_t l = 0; l < L; ++l) {
      batch_pre.push_back(p.layers[l] * h);
      h = batch_pre.back().cwiseMax(0.0);
    }
    batch_output = p.layers[L] * h;
    Rng rng = Rng(seed, hash_label("perturbation-probe"));
    for (std::size_t l = 0; l <= L; ++l) {
      Rng lr = rng.child(static_cast<std::uint64_t>(l));
      Matrix g = gaussian_matrix(lr, p.layers[l].rows(), p.layers[l].cols(), 1.0);
      g /= spectral_norm(g, {.tol = 1e-3, .max_steps = 2000});
      directions.push_back(std::move(g));
    }
  }

  std::vector<PerturbationPoint> out;
  for (double omega : omegas) {
    SweepAccumulator acc;
    if (direction == PerturbationDirection::gaussian) {
      Eigen::MatrixXd h = batch_inputs;
      for (std::size_t l = 0; l < L; ++l) {
        Eigen::MatrixXd pre = p.layers[l] * h + omega * (directions[l] * h);
        h = pre.cwiseMax(0.0);
        for (Index col = 0; col < h.cols(); ++col) {
          for (Index k = 0; k < m; ++k) {
            if ((pre(k, col) >= 0.0) != (batch_pre[l](k, col) >= 0.0)) ++acc.flips;
          }
          acc.hidden_drift = std::max(acc.hidden_drift, (h.col(col) - batch_pre[l].col(col).cwiseMax(0.0)).norm());
        }
      }
      const Eigen::MatrixXd f = p.layers[L] * h + omega * (directions[L] * h);
      for (Index col = 0; col < f.cols(); ++col) {
        acc.output_drift = std::max(acc.output_drift, (f.col(col) - batch_output.col(col)).norm());
      }
    } else {
      for (std::size_t i = 0; i < n; ++i) {
        Vector h = data.points[i];
        for (std::size_t l = 0; l < L; ++l) {
          Vector pre = p.layers[l] * h;
          pre += targeted_shift(pre, omega * h.norm());
          for (Index k = 0; k < m; ++k) {
            if ((pre(k) >= 0.0) != base[i].masks[l].test(static_cast<std::size_t>(k))) ++acc.flips;
          }
          h = pre.cwiseMax(0.0);
          acc.hidden_drift = std::max(acc.hidden_drift, (h - base[i].hidden[l]).norm());
        }
        Vector f = p.layers[L] * h;
        const double fn = f.norm();
        // Output layer: rank-one along the unperturbed output direction.
        if (fn > 0.0) f += omega * h.norm() * (f / fn);
        acc.output_drift = std::max(acc.output_drift, (f - base[i].output).norm());
      }
    }
    PerturbationPoint point;
    point.omega = omega;
    point.flips = acc.flips;
    point.flip_fraction = static_cast<double>(acc.flips) / static_cast<double>(n * L * p.shape.m);
    point.hidden_drift = acc.hidden_drift;
    point.output_drift = acc.output_drift;
    out.push_back(point);
  }
  return out;
}

ProbeReport perturbation_probe(const Params& p, const Dataset& data,
                               const PerturbationOptions& options) {
  const std::vector<double> omegas = options.omegas.empty() ? log_spaced(1e-4, 1e-1, 7) : options.omegas;
  require_ascending(omegas, "perturbation_probe");

  ProbeReport report;
  report.name = "perturbation";
  report.citation =
      "perturbation: mask flips O(m omega^(2/3) L) per layer, hidden drift O(omega L^(5/2) sqrt(log m)), "
      "output drift O(L sqrt(m/d)) ||W'||_2";
  json om = json::array();
  for (double w : omegas) om.push_back(w);
  report.config = json{{"shape", shape_json(p.shape)}, {"n", data.n()}, {"omegas", om},
                       {"flip_exponent", options.flip_exponent}, {"flip_tolerance", options.flip_tolerance},
                       {"drift_exponent", options.drift_exponent}, {"drift_tolerance", options.drift_tolerance},
                       {"drift_ratio_band", options.drift_ratio_band}, {"seed", options.seed}};

  const std::pair<PerturbationDirection, const char*> modes[] = {
      {PerturbationDirection::targeted, "targeted"}, {PerturbationDirection::gaussian, "gaussian"}};
  for (const auto& [mode, label] : modes) {
    const std::string prefix = std::string(label) + ".";
    const auto points = perturbation_sweep(p, data, omegas, mode, options.seed);
    std::vector<double> fx, fy, dx, dy;
    double ratio_lo = std::numeric_limits<double>::infinity(), ratio_hi = 0.0;
    for (std::size_t j = 0; j < points.size(); ++j) {
      const auto& pt = points[j];
      const std::string tag = prefix + "omega_" + std::to_string(j) + ".";
      report.add_scalar(tag + "omega", pt.omega);
      report.add_scalar(tag + "flip_fraction", pt.flip_fraction);
      report.add_scalar(tag + "hidden_drift", pt.hidden_drift);
      report.add_scalar(tag + "output_drift", pt.output_drift);
      if (pt.omega == 0.0) continue;
      if (pt.flips > 0) {
        fx.push_back(pt.omega);
        fy.push_back(pt.flip_fraction);
      }
      if (pt.output_drift > 0.0) {
        dx.push_back(pt.omega);
        dy.push_back(pt.output_drift);
        ratio_lo = std::min(ratio_lo, pt.output_drift / pt.omega);
        ratio_hi = std::max(ratio_hi, pt.output_drift / pt.omega);
      }
    }
    const bool asserted_flips = mode == PerturbationDirection::targeted;
    const bool asserted_drift = mode == PerturbationDirection::gaussian;
    if (fx.size() >= 3) {
      const LinearFit& f = report.add_fit(prefix + "flip_fraction_vs_omega", fit_loglog(fx, fy));
      report.add_scalar(prefix + "flip_exponent", f.slope);
      report.add_scalar(prefix + "flip_r2", f.r2);
      if (asserted_flips) {
        report.check(prefix + "flip_exponent", f.slope, options.flip_exponent - options.flip_tolerance,
                     options.flip_exponent + options.flip_tolerance, prefix + "flip_fraction_vs_omega", 0.9);
      }
    } else {
      report.notes.push_back(prefix + "fewer than three sweep points with flips; flip exponent not fitted");
      if (asserted_flips) {
        report.check(prefix + "flip_exponent", std::numeric_limits<double>::quiet_NaN(),
                     options.flip_exponent - options.flip_tolerance,
                     options.flip_exponent + options.flip_tolerance);
      }
    }
    if (dx.size() >= 3) {
      const LinearFit& f = report.add_fit(prefix + "output_drift_vs_omega", fit_loglog(dx, dy));
      report.add_scalar(prefix + "drift_exponent", f.slope);
      report.add_scalar(prefix + "drift_r2", f.r2);
      report.add_scalar(prefix + "drift_ratio_band", ratio_hi / ratio_lo);
      if (asserted_drift) {
        report.check(prefix + "drift_exponent", f.slope, options.drift_exponent - options.drift_tolerance,
                     options.drift_exponent + options.drift_tolerance, prefix + "output_drift_vs_omega", 0.9);
        report.check(prefix + "drift_ratio_band", ratio_hi / ratio_lo, std::nullopt, options.drift_ratio_band);
      }
    } else if (asserted_drift) {
      report.notes.push_back(prefix + "fewer than three sweep points with drift; drift exponent not fitted");
      report.check(prefix + "drift_exponent", std::numeric_limits<double>::quiet_NaN(),
                   options.drift_exponent - options.drift_tolerance,
                   options.drift_exponent + options.drift_tolerance);
    }
  }
  report.notes.push_back(
      "flip law asserted on targeted rank-one perturbations; random Gaussian directions flip "
      "units at a rate linear in omega and are reported only");
  return report;
}

// ------------------------------------------------------ cross-entropy smoothness

double ce_value(const Vector& y) {
  double top = 0.0;
  for (Index j = 0; j < y.size(); ++j) top = std::max(top, y(j));
  double sum = std::exp(-top);
  for (Index j = 0; j < y.size(); ++j) sum += std::exp(y(j) - top);
  return top + std::log(sum);
}

Vector ce_gradient(const Vector& y) {
  const double g = ce_value(y);
  return (y.array() - g).exp().matrix();
}

double ce_smoothness_gap(const Vector& y, const Vector& y_step) {
  if (y.size() != y_step.size()) throw ShapeError("ce_smoothness_gap: length mismatch");
  return ce_value(y + y_step) - ce_value(y) - ce_gradient(y).dot(y_step) - 0.5 * y_step.squaredNorm();
}

ProbeReport ce_smoothness_check(const CeSmoothnessOptions& options) {
  if (options.trials < 1) throw InvalidArgument("ce_smoothness_check: trials must be >= 1");
  if (options.k < 1) throw InvalidArgument("ce_smoothness_check: k must be >= 1");
  ProbeReport report;
  report.name = "ce_smoothness";
  report.citation = "cross-entropy is 1-smooth: g(y + y') <= g(y) + grad g(y).y' + |y'|^2 / 2";
  report.config = json{{"trials", options.trials}, {"k", options.k}, {"max_scale", options.max_scale},
                       {"tolerance", options.tolerance}, {"seed", options.seed}};

  Rng rng = Rng(options.seed, hash_label("ce-smoothness"));
  double worst = -std::numeric_limits<double>::infinity();
  std::size_t violations = 0;
  for (std::size_t t = 0; t < options.trials; ++t) {
    const auto dim = static_cast<Index>(1 + rng.below(options.k));
    const double sy = options.max_scale * rng.uniform();
    const double sp = options.max_scale * rng.uniform();
    const Vector y = gaussian_vector(rng, dim, 1.0) * sy;
    const Vector step = gaussian_vector(rng, dim, 1.0) * sp;
    const double gap = ce_smoothness_gap(y, step);
    worst = std::max(worst, gap);
    if (gap > options.tolerance) ++violations;
  }

  // Steepest ascent: y' along grad g(y) at several lengths.
  double worst_ascent = -std::numeric_limits<double>::infinity();
  std::size_t ascent_violations = 0;
  const std::size_t ascent_trials = std::max<std::size_t>(1, options.trials / 100);
  for (std::size_t t = 0; t < ascent_trials; ++t) {
    const auto dim = static_cast<Index>(1 + rng.below(options.k));
    const Vector y = gaussian_vector(rng, dim, 1.0) * (options.max_scale * rng.uniform());
    const Vector g = ce_gradient(y);
    for (double len : {1e-3, 1e-1, 1.0, 3.0, 10.0}) {
      const double gn = g.norm();
      if (gn == 0.0) continue;
      const double gap = ce_smoothness_gap(y, g * (len / gn));
      worst_ascent = std::max(worst_ascent, gap);
      if (gap > options.tolerance) ++ascent_violations;
    }
  }

  const Vector zero_y = Vector::Zero(static_cast<Index>(options.k));
  report.add_scalar("max_gap", worst);
  report.add_scalar("violations", static_cast<double>(violations));
  report.add_scalar("ascent_max_gap", worst_ascent);
  report.add_scalar("ascent_violations", static_cast<double>(ascent_violations));
  report.add_scalar("zero_step_gap", ce_smoothness_gap(zero_y, zero_y));
  report.check("violations", static_cast<double>(violations), std::nullopt, 0.0);
  report.check("ascent_violations", static_cast<double>(ascent_violations), std::nullopt, 0.0);
  return report;
}

}  // namespace clab
