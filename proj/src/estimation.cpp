#include "wgqed/estimation.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include <Eigen/Eigenvalues>

namespace wgqed {
namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using Eigen::VectorXcd;
using cd = std::complex<double>;

constexpr double kInf = std::numeric_limits<double>::infinity();

// ---------------------------------------------------------------------------
// Levenberg-Marquardt core

class Problem {
 public:
  Problem(const RealModel& model, const VectorXd& data, const std::vector<ParameterSpec>& specs)
      : model_(model), data_(data), specs_(specs) {}

  bool residual(const VectorXd& p, VectorXd& r) const {
    try {
      VectorXd y = model_(p);
      if (y.size() != data_.size()) throw DomainError("model returned the wrong number of samples");
      r = y - data_;
      return r.allFinite();
    } catch (const DomainError&) {
      return false;
    }
  }

  double step(Eigen::Index i) const { return 1e-6 * specs_[i].scale; }

  /// Central differences; falls back to one-sided where the model is undefined.
  MatrixXd jacobian(const VectorXd& p, const VectorXd& r0) const {
    MatrixXd j(data_.size(), p.size());
    VectorXd rp, rm;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      const double h = step(i);
      VectorXd pp = p, pm = p;
      pp(i) += h;
      pm(i) -= h;
      const bool okp = residual(pp, rp);
      const bool okm = residual(pm, rm);
      if (okp && okm)
        j.col(i) = (rp - rm) / (2.0 * h);
      else if (okp)
        j.col(i) = (rp - r0) / h;
      else if (okm)
        j.col(i) = (r0 - rm) / h;
      else
        throw ConditioningError("model undefined around parameter '" + specs_[i].name + "'");
    }
    return j;
  }

 private:
  const RealModel& model_;
  const VectorXd& data_;
  const std::vector<ParameterSpec>& specs_;
};

void fill_covariance(FitResult& out, const MatrixXd& jac, const VectorXd& r, const FitOptions& opts) {
  const auto n = jac.cols();
  const auto m = jac.rows();
  const MatrixXd a = jac.transpose() * jac;
  VectorXd d = a.diagonal().cwiseSqrt();
  for (Eigen::Index i = 0; i < n; ++i)
    if (!(d(i) > 0.0)) d(i) = 1.0;
  const VectorXd dinv = d.cwiseInverse();
  const MatrixXd scaled = dinv.asDiagonal() * a * dinv.asDiagonal();
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(scaled);
  const VectorXd ev = es.eigenvalues();
  const double top = ev.maxCoeff();
  const double rcond = top > 0.0 ? ev.minCoeff() / top : 0.0;
  const double variance = m > n ? r.squaredNorm() / static_cast<double>(m - n) : r.squaredNorm();

  MatrixXd pinv = MatrixXd::Zero(n, n);
  std::vector<bool> unresolved(static_cast<std::size_t>(n), false);
  for (Eigen::Index k = 0; k < n; ++k) {
    const auto v = es.eigenvectors().col(k);
    if (ev(k) > opts.degeneracy_rcond * top) {
      pinv += v * v.transpose() / ev(k);
    } else {
      for (Eigen::Index i = 0; i < n; ++i)
        if (std::abs(v(i)) > 0.1) unresolved[static_cast<std::size_t>(i)] = true;
    }
  }
  out.degenerate = rcond <= opts.degeneracy_rcond;
  if (out.degenerate && !opts.allow_degenerate) {
    std::ostringstream os;
    os << "normal matrix is singular (reciprocal condition " << rcond << "); unresolved:";
    for (Eigen::Index i = 0; i < n; ++i)
      if (unresolved[static_cast<std::size_t>(i)]) os << ' ' << out.specs[static_cast<std::size_t>(i)].name;
    throw ConditioningError(os.str());
  }
  out.covariance = variance * (dinv.asDiagonal() * pinv * dinv.asDiagonal());
  out.uncertainties = out.covariance.diagonal().cwiseMax(0.0).cwiseSqrt();
  for (Eigen::Index i = 0; i < n; ++i)
    if (unresolved[static_cast<std::size_t>(i)]) out.uncertainties(i) = kInf;
}

double scaled_norm(const VectorXd& p, const std::vector<ParameterSpec>& specs) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double x = p(i) / specs[static_cast<std::size_t>(i)].scale;
    s += x * x;
  }
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// Signal helpers

std::vector<double> unwrap(std::vector<double> phase) {
  for (std::size_t i = 1; i < phase.size(); ++i) {
    double d = phase[i] - phase[i - 1];
    d -= kTwoPi * std::round(d / kTwoPi);
    phase[i] = phase[i - 1] + d;
  }
  return phase;
}

double wrap_angle(double a) { return std::remainder(a, kTwoPi); }

/// Indices of the outer `fraction` of a trace on each side.
std::vector<std::size_t> wing_indices(std::size_t n, double fraction = 0.1) {
  const std::size_t k = std::max<std::size_t>(3, static_cast<std::size_t>(fraction * static_cast<double>(n)));
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < std::min(k, n); ++i) idx.push_back(i);
  for (std::size_t i = n > k ? n - k : 0; i < n; ++i)
    if (idx.empty() || i > idx.back()) idx.push_back(i);
  return idx;
}

/// Ordinary least-squares line y = a + b x.
std::pair<double, double> fit_line(std::span<const double> x, std::span<const double> y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  const double b = sxx > 0.0 ? sxy / sxx : 0.0;
  return {my - b * mx, b};
}

std::vector<double> moving_average(std::span<const double> y, std::size_t window) {
  std::vector<double> out(y.size());
  const auto half = static_cast<std::ptrdiff_t>(window / 2);
  const auto n = static_cast<std::ptrdiff_t>(y.size());
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto lo = std::max<std::ptrdiff_t>(0, i - half);
    const auto hi = std::min<std::ptrdiff_t>(n - 1, i + half);
    double s = 0.0;
    for (auto j = lo; j <= hi; ++j) s += y[static_cast<std::size_t>(j)];
    out[static_cast<std::size_t>(i)] = s / static_cast<double>(hi - lo + 1);
  }
  return out;
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  return *mid;
}

/// Removes a linear phase fitted on the wings; returns the delay (s).
double estimate_delay(const ComplexTrace& trace) {
  const auto phase = unwrap(trace.phase());
  std::vector<double> x, y;
  for (auto i : wing_indices(trace.size())) {
    x.push_back(trace.axis()[i]);
    y.push_back(phase[i]);
  }
  return -fit_line(x, y).second / kTwoPi;
}

std::vector<cd> remove_delay(const ComplexTrace& trace, double delay) {
  std::vector<cd> out(trace.size());
  for (std::size_t i = 0; i < trace.size(); ++i)
    out[i] = trace.values()[i] * std::polar(1.0, kTwoPi * trace.axis()[i] * delay);
  return out;
}

cd wing_mean(std::span<const cd> z) {
  cd s = 0.0;
  const auto idx = wing_indices(z.size());
  for (auto i : idx) s += z[i];
  return s / static_cast<double>(idx.size());
}

struct DipEstimate {
  std::size_t index = 0;
  double depth = 0.0;     // of Re(1 - z), smoothed
  double half_width = 0;  // Hz, half width at half depth of Re(1 - z)
};

/// Locates a dip in normalized data (off-resonant level 1) and rejects it when
/// it is not resolved above the noise floor.
DipEstimate find_dip(std::span<const double> f, std::span<const cd> normalized) {
  const std::size_t n = normalized.size();
  std::vector<double> excess(n), magnitude_excess(n);
  for (std::size_t i = 0; i < n; ++i) {
    excess[i] = 1.0 - normalized[i].real();
    magnitude_excess[i] = std::abs(1.0 - normalized[i]);
  }
  const std::size_t window = std::max<std::size_t>(3, (n / 200) | 1U);
  const auto smooth = moving_average(magnitude_excess, window);
  const auto peak = static_cast<std::size_t>(std::distance(smooth.begin(), std::ranges::max_element(smooth)));
  const double noise = noise_floor(normalized);
  if (!(smooth[peak] > 3.0 * noise) || !(smooth[peak] > 1e-9))
    throw SignalError("no resolvable dip: depth " + std::to_string(smooth[peak]) + " vs noise floor " +
                      std::to_string(noise));
  const auto re_smooth = moving_average(excess, window);
  DipEstimate d;
  d.index = peak;
  d.depth = re_smooth[peak];
  std::size_t lo = peak, hi = peak;
  while (lo > 0 && re_smooth[lo] > 0.5 * d.depth) --lo;
  while (hi + 1 < n && re_smooth[hi] > 0.5 * d.depth) ++hi;
  d.half_width = std::max(0.5 * (f[hi] - f[lo]), 2.0 * (f[1] - f[0]));
  return d;
}

}  // namespace

// ---------------------------------------------------------------------------

std::optional<Eigen::Index> FitResult::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < specs.size(); ++i)
    if (specs[i].name == name) return static_cast<Eigen::Index>(i);
  return std::nullopt;
}

double FitResult::value(std::string_view name) const {
  if (auto i = index_of(name)) return parameters(*i);
  if (auto it = derived.find(std::string(name)); it != derived.end()) return it->second;
  throw StructuralError("fit result has no entry '" + std::string(name) + "'");
}

double FitResult::sigma(std::string_view name) const {
  if (auto i = index_of(name)) return uncertainties(*i);
  throw StructuralError("fit result has no fitted parameter '" + std::string(name) + "'");
}

double noise_floor(std::span<const cd> values) {
  if (values.size() < 3) return 0.0;
  std::vector<double> diffs;
  diffs.reserve(2 * values.size());
  for (std::size_t i = 1; i < values.size(); ++i) {
    diffs.push_back(std::abs(values[i].real() - values[i - 1].real()));
    diffs.push_back(std::abs(values[i].imag() - values[i - 1].imag()));
  }
  return median(std::move(diffs)) / (0.6744897501960817 * std::sqrt(2.0));
}

ComplexTrace normalize_off_resonant(const ComplexTrace& trace) {
  auto z = remove_delay(trace, estimate_delay(trace));
  const cd off = wing_mean(z);
  if (!(std::abs(off) > 0.0)) throw SignalError("off-resonant level is zero");
  for (auto& v : z) v /= off;
  return ComplexTrace(trace.kind(), trace.axis(), std::move(z));
}

FitResult fit_damped_least_squares(const RealModel& model, const VectorXd& data, const VectorXd& init,
                                   const std::vector<ParameterSpec>& specs, const FitOptions& opts) {
  const auto n = init.size();
  const auto m = data.size();
  if (static_cast<std::size_t>(n) != specs.size()) throw DomainError("parameter specs do not match the initial vector");
  if (n == 0) throw DomainError("nothing to fit");
  if (m < n) throw DomainError("fewer data points than parameters");
  if (!init.allFinite()) throw DomainError("initial parameters must be finite");

  Problem problem(model, data, specs);
  FitResult out;
  out.specs = specs;
  VectorXd p = init;
  VectorXd r;
  if (!problem.residual(p, r)) throw DomainError("model is undefined at the initial parameters");
  double cost = r.squaredNorm();
  out.cost_history.push_back(cost);

  MatrixXd jac = problem.jacobian(p, r);
  for (Eigen::Index i = 0; i < n && !opts.allow_degenerate; ++i)
    if (!(jac.col(i).squaredNorm() > 0.0))
      throw ConditioningError("parameter '" + specs[static_cast<std::size_t>(i)].name + "' does not affect the model");

  double lambda = opts.initial_damping;
  bool converged = false;
  int it = 0;
  auto gradient_cosine = [&](const MatrixXd& j, const VectorXd& res) {
    const double rn = res.norm();
    if (rn == 0.0) return 0.0;
    double worst = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double cn = j.col(i).norm();
      if (cn > 0.0) worst = std::max(worst, std::abs(j.col(i).dot(res)) / (cn * rn));
    }
    return worst;
  };

  for (; it < opts.max_iterations; ++it) {
    if (r.norm() <= 1e-14 * data.norm() || gradient_cosine(jac, r) < opts.gradient_tol) {
      converged = true;
      break;
    }
    // Normal equations in column-equilibrated variables.
    VectorXd col = jac.colwise().norm().transpose();
    for (Eigen::Index i = 0; i < n; ++i)
      if (!(col(i) > 0.0)) col(i) = 1.0;
    const MatrixXd js = jac * col.cwiseInverse().asDiagonal();
    const MatrixXd a = js.transpose() * js;
    const VectorXd g = js.transpose() * r;

    bool accepted = false;
    while (!accepted) {
      MatrixXd damped = a;
      damped.diagonal().array() += lambda;
      const VectorXd delta = damped.ldlt().solve(-g).cwiseQuotient(col);
      VectorXd trial = p + delta;
      VectorXd r_trial;
      if (delta.allFinite() && problem.residual(trial, r_trial) && r_trial.squaredNorm() < cost) {
        double rel = 0.0;
        for (Eigen::Index i = 0; i < n; ++i)
          rel = std::max(rel, std::abs(delta(i)) / (std::abs(p(i)) + specs[static_cast<std::size_t>(i)].scale));
        p = std::move(trial);
        r = std::move(r_trial);
        cost = r.squaredNorm();
        out.cost_history.push_back(cost);
        lambda = std::max(lambda / 10.0, 1e-15);
        accepted = true;
        jac = problem.jacobian(p, r);
        if (rel < opts.step_tol) converged = true;
      } else {
        lambda *= 10.0;
        if (lambda > 1e16) break;
      }
    }
    if (converged) {
      ++it;
      break;
    }
    if (!accepted) {
      // No descent direction left: a stationary point up to round-off.
      converged = gradient_cosine(jac, r) < 1e-6 || r.norm() <= 1e-12 * data.norm();
      break;
    }
  }

  out.parameters = p;
  out.iterations = it;
  out.converged = converged;
  out.residual_norm = std::sqrt(cost / static_cast<double>(m));
  fill_covariance(out, jac, r, opts);
  if (!converged) out.notes.push_back("iteration cap reached before convergence");
  return out;
}

FitResult fit_damped_least_squares(const ComplexModel& model, const VectorXcd& data, const VectorXd& init,
                                   const std::vector<ParameterSpec>& specs, const FitOptions& opts) {
  const auto m = data.size();
  VectorXd stacked(2 * m);
  stacked << data.real(), data.imag();
  RealModel real_model = [&](const VectorXd& p) {
    const VectorXcd z = model(p);
    VectorXd out(2 * z.size());
    out << z.real(), z.imag();
    return out;
  };
  return fit_damped_least_squares(real_model, stacked, init, specs, opts);
}

FitResult fit_multistart(const ComplexModel& model, const VectorXcd& data, const VectorXd& init,
                         const std::vector<ParameterSpec>& specs, const FitOptions& opts, int extra_starts,
                         double spread, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::optional<FitResult> best;
  std::exception_ptr first_error;
  for (int s = 0; s <= extra_starts; ++s) {
    VectorXd start = init;
    if (s > 0)
      for (Eigen::Index i = 0; i < start.size(); ++i) {
        const double scale = specs[static_cast<std::size_t>(i)].scale;
        start(i) += spread * u(rng) * (std::abs(start(i)) > 0.0 ? std::min(std::abs(start(i)), 10.0 * scale) : scale);
      }
    try {
      FitResult candidate = fit_damped_least_squares(model, data, start, specs, opts);
      if (!best) {
        best = std::move(candidate);
        continue;
      }
      const double tie = 1e-9 * std::max(best->residual_norm, 1e-300);
      if (candidate.residual_norm < best->residual_norm - tie ||
          (std::abs(candidate.residual_norm - best->residual_norm) <= tie &&
           scaled_norm(candidate.parameters, specs) < scaled_norm(best->parameters, specs)))
        best = std::move(candidate);
    } catch (const Error&) {
      if (!first_error) first_error = std::current_exception();
    }
  }
  if (!best) std::rethrow_exception(first_error);
  return *best;
}

Circle fit_circle(std::span<const cd> points) {
  if (points.size() < 3) throw DomainError("circle fit needs three points");
  cd mean = 0.0;
  for (auto z : points) mean += z;
  mean /= static_cast<double>(points.size());
  MatrixXd a(points.size(), 3);
  VectorXd b(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    const cd z = points[i] - mean;
    a(static_cast<Eigen::Index>(i), 0) = z.real();
    a(static_cast<Eigen::Index>(i), 1) = z.imag();
    a(static_cast<Eigen::Index>(i), 2) = 1.0;
    b(static_cast<Eigen::Index>(i)) = -std::norm(z);
  }
  Eigen::ColPivHouseholderQR<MatrixXd> qr(a);
  if (qr.rank() < 3) throw ConditioningError("points are collinear");
  const Eigen::Vector3d c = qr.solve(b);
  Circle out;
  out.center = mean + cd(-0.5 * c(0), -0.5 * c(1));
  out.radius = std::sqrt(std::max(0.0, 0.25 * (c(0) * c(0) + c(1) * c(1)) - c(2)));
  double ss = 0.0;
  for (auto z : points) {
    const double e = std::abs(z - out.center) - out.radius;
    ss += e * e;
  }
  out.rms_residual = std::sqrt(ss / static_cast<double>(points.size()));
  return out;
}

// ---------------------------------------------------------------------------
// Resonator (circle) fit

FitResult fit_resonator(const ComplexTrace& trace, const FitOptions& opts) {
  if (trace.kind() != AxisKind::frequency) throw DomainError("resonator fit needs a frequency trace");
  const auto& f = trace.axis();
  const std::size_t n = trace.size();
  if (n < 10) throw DomainError("resonator fit needs at least ten points");
  const double f_ref = 0.5 * (f.front() + f.back());
  const double span = f.back() - f.front();

  const double delay0 = estimate_delay(trace);
  const auto corrected = remove_delay(trace, delay0);
  const cd off0 = wing_mean(corrected);
  std::vector<cd> normalized(n);
  for (std::size_t i = 0; i < n; ++i) normalized[i] = corrected[i] / off0;
  const auto dip = find_dip(f, normalized);

  // Circle and phase-angle fits for f_res and q_l.
  const Circle circle = fit_circle(corrected);
  std::vector<double> theta(n);
  for (std::size_t i = 0; i < n; ++i) theta[i] = std::arg(corrected[i] - circle.center);
  theta = unwrap(std::move(theta));
  std::size_t res_idx = 0;
  double far = -1.0;
  for (std::size_t i = 0; i < n; ++i)
    if (std::abs(corrected[i] - off0) > far) {
      far = std::abs(corrected[i] - off0);
      res_idx = i;
    }
  const double fr0 = f[res_idx];
  const double ql0 = fr0 / (2.0 * dip.half_width);
  if (span < 3.0 * fr0 / ql0) throw DomainError("trace spans fewer than three linewidths");

  VectorXd theta_data = Eigen::Map<const VectorXd>(theta.data(), static_cast<Eigen::Index>(n));
  RealModel angle_model = [&](const VectorXd& p) {
    VectorXd out(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i)
      out(static_cast<Eigen::Index>(i)) = p(0) + 2.0 * std::atan(2.0 * p(1) * (1.0 - f[i] / p(2)));
    return out;
  };
  FitOptions angle_opts;
  angle_opts.allow_degenerate = true;
  angle_opts.max_iterations = 100;
  const auto angle = fit_damped_least_squares(angle_model, theta_data, Eigen::Vector3d(theta[res_idx], ql0, fr0),
                                              {{"theta0", "rad", 1.0}, {"q_l", "", ql0}, {"f_res", "Hz", fr0 / ql0}},
                                              angle_opts);
  const double theta0 = angle.parameters(0);
  const double ql1 = std::abs(angle.parameters(1));
  const double fr1 = angle.parameters(2);

  const cd off = circle.center - circle.radius * std::polar(1.0, theta0);
  const cd k = 2.0 * (1.0 - circle.center / off);
  const double qc1 = ql1 / std::abs(k);

  // Full refinement of the circle model on raw data.
  VectorXcd data = Eigen::Map<const VectorXcd>(trace.values().data(), static_cast<Eigen::Index>(n));
  ComplexModel model = [&](const VectorXd& p) {
    const ResonatorParams res{p(0), p(1), p(2), p(3)};
    VectorXcd out(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
      const cd env = std::polar(p(4), p(5) - kTwoPi * (f[i] - f_ref) * p(6));
      out(static_cast<Eigen::Index>(i)) = env * eval_notch(res, EnvironmentParams{1.0, 0.0, 0.0}, f[i]);
    }
    return out;
  };
  VectorXd init(7);
  init << fr1, ql1, qc1, std::arg(k), std::abs(off), wrap_angle(std::arg(off) - kTwoPi * f_ref * delay0), delay0;
  const std::vector<ParameterSpec> specs{{"f_res", "Hz", fr1 / ql1},
                                         {"q_l", "", ql1},
                                         {"q_c", "", qc1},
                                         {"phi", "rad", 1.0},
                                         {"amplitude", "", std::abs(off)},
                                         {"phase_offset", "rad", 1.0},
                                         {"electrical_delay", "s", 1.0 / (kTwoPi * span)}};
  FitResult fit = fit_multistart(model, data, init, specs, opts, 4, 0.05, 17);

  // Report the phase at zero frequency, as in E(f).
  auto pi = *fit.index_of("phase_offset");
  fit.parameters(pi) = wrap_angle(fit.parameters(pi) + kTwoPi * f_ref * fit.parameters(6));
  if (fit.parameters(1) < 0.0 || fit.parameters(2) < 0.0) fit.notes.push_back("negative quality factor");
  const double w = angular(fit.parameters(0));
  fit.derived["gamma10"] = w / fit.parameters(2);
  fit.derived["decoherence10"] = w / (2.0 * fit.parameters(1));
  const double inv_qi = 1.0 / fit.parameters(1) - 1.0 / fit.parameters(2);
  fit.derived["internal_loss"] = w * inv_qi;  // Gamma_l + 2 Gamma_phi
  fit.derived["circle_rms"] = circle.rms_residual;
  return fit;
}

ResonatorParams resonator_params(const FitResult& fit) {
  return {fit.value("f_res"), fit.value("q_l"), fit.value("q_c"), fit.value("phi")};
}

EnvironmentParams environment_params(const FitResult& fit) {
  return {fit.value("amplitude"), fit.value("phase_offset"), fit.value("electrical_delay")};
}

// ---------------------------------------------------------------------------
// Qubit lineshape fit

FitResult fit_qubit_model(std::span<const QubitTrace> traces, const QubitFitOptions& opts) {
  if (traces.empty()) throw DomainError("qubit fit needs at least one trace");
  struct Prepared {
    const std::vector<double>* f;
    std::vector<cd> z;
    double f_ref;
    double span;
    bool float_rabi;
    double rabi;
  };
  std::vector<Prepared> prepared;
  std::optional<FitResult> first_circle;
  for (const auto& t : traces) {
    if (t.trace.kind() != AxisKind::frequency) throw DomainError("qubit fit needs frequency traces");
    if (t.trace.size() < 10) throw DomainError("qubit fit needs at least ten points per trace");
    const auto& f = t.trace.axis();
    // Environment from a notch-model pre-fit when it succeeds, else from the wings.
    std::optional<FitResult> circle;
    try {
      circle = fit_resonator(t.trace);
    } catch (const Error&) {
    }
    std::vector<cd> z;
    if (circle && circle->parameters.allFinite()) {
      const auto env = environment_params(*circle);
      z.resize(f.size());
      for (std::size_t i = 0; i < f.size(); ++i) z[i] = t.trace.values()[i] / environment_response(env, f[i]);
    } else {
      circle.reset();
      z = normalize_off_resonant(t.trace).values();
    }
    if (prepared.empty()) first_circle = circle;
    prepared.push_back({&f, std::move(z), 0.5 * (f.front() + f.back()), f.back() - f.front(),
                        opts.fit_rabi || !t.applied_rabi.has_value(), t.applied_rabi.value_or(0.0)});
  }

  const auto& p0 = prepared.front();
  const auto dip = find_dip(*p0.f, p0.z);
  if (p0.span < 3.0 * dip.half_width) throw DomainError("trace spans fewer than three linewidths");
  double f01_0 = (*p0.f)[dip.index];
  double gamma0 = angular(dip.half_width);
  double g10_0 = std::clamp(2.0 * gamma0 * dip.depth, 1e-3 * gamma0, 2.0 * gamma0);
  if (first_circle) {
    const auto r = resonator_params(*first_circle);
    if (r.q_l > 0.0 && r.q_c > 0.0 && std::abs(r.f_res - f01_0) < 5.0 * dip.half_width) {
      f01_0 = r.f_res;
      gamma0 = angular(r.f_res) / (2.0 * r.q_l);
      g10_0 = std::min(angular(r.f_res) / r.q_c, 2.0 * gamma0);
    }
  }
  const double g1_0 = std::min(1.1 * g10_0, 2.0 * gamma0);

  // Internal parameters: f01, Gamma10, gamma10, Gamma1.
  std::vector<ParameterSpec> specs{{"f01", "Hz", to_hz(gamma0)},
                                   {"gamma10", "rad/s", gamma0},
                                   {"decoherence10", "rad/s", gamma0},
                                   {"gamma1", "rad/s", gamma0}};
  std::vector<double> init{f01_0, g10_0, gamma0, g1_0};
  std::vector<Eigen::Index> rabi_index(prepared.size(), -1), env_index(prepared.size(), -1);
  for (std::size_t k = 0; k < prepared.size(); ++k) {
    if (prepared[k].float_rabi) {
      rabi_index[k] = static_cast<Eigen::Index>(init.size());
      specs.push_back({k == 0 ? "rabi" : "rabi_" + std::to_string(k), "rad/s", gamma0});
      init.push_back(prepared[k].rabi > 0.0 ? prepared[k].rabi : 0.5 * gamma0);
    }
    if (opts.fit_environment) {
      env_index[k] = static_cast<Eigen::Index>(init.size());
      const std::string suffix = k == 0 ? "" : "_" + std::to_string(k);
      specs.push_back({"amplitude" + suffix, "", 1.0});
      specs.push_back({"phase_offset" + suffix, "rad", 1.0});
      specs.push_back({"electrical_delay" + suffix, "s", 1.0 / (kTwoPi * prepared[k].span)});
      init.insert(init.end(), {1.0, 0.0, 0.0});
    }
  }

  Eigen::Index total = 0;
  for (const auto& p : prepared) total += static_cast<Eigen::Index>(p.z.size());
  VectorXcd data(total);
  {
    Eigen::Index o = 0;
    for (const auto& p : prepared)
      for (auto v : p.z) data(o++) = v;
  }
  ComplexModel model = [&](const VectorXd& p) {
    const QubitParams q{p(0), p(0) - 1.0, p(1), p(3) - p(1), p(2) - 0.5 * p(3)};
    VectorXcd out(total);
    Eigen::Index o = 0;
    for (std::size_t k = 0; k < prepared.size(); ++k) {
      const auto& pr = prepared[k];
      const double rabi = rabi_index[k] >= 0 ? p(rabi_index[k]) : pr.rabi;
      for (std::size_t i = 0; i < pr.z.size(); ++i) {
        const double fi = (*pr.f)[i];
        cd env = 1.0;
        if (env_index[k] >= 0) {
          const auto e = env_index[k];
          env = std::polar(p(e), p(e + 1) - kTwoPi * (fi - pr.f_ref) * p(e + 2));
        }
        out(o++) = env * eval_qubit_s21(q, DriveSpec{rabi, fi});
      }
    }
    return out;
  };

  FitOptions lsq = opts.lsq;
  lsq.allow_degenerate = true;
  lsq.degeneracy_rcond = std::max(lsq.degeneracy_rcond, 1e-10);
  FitResult fit = fit_multistart(model, data, Eigen::Map<VectorXd>(init.data(), static_cast<Eigen::Index>(init.size())),
                                 specs, lsq, 5, 0.2, 29);

  for (std::size_t k = 0; k < prepared.size(); ++k)
    if (rabi_index[k] >= 0) fit.parameters(rabi_index[k]) = std::abs(fit.parameters(rabi_index[k]));

  // Back to (f01, Gamma10, Gamma_l, Gamma_phi).
  {
    const auto np = fit.parameters.size();
    MatrixXd t = MatrixXd::Identity(np, np);
    t.block(0, 0, 4, 4) << 1, 0, 0, 0,  //
        0, 1, 0, 0,                      //
        0, -1, 0, 1,                     //
        0, 0, 1, -0.5;
    const VectorXd internal_sigma = fit.uncertainties;
    fit.parameters = t * fit.parameters;
    fit.covariance = t * fit.covariance * t.transpose();
    fit.uncertainties = fit.covariance.diagonal().cwiseMax(0.0).cwiseSqrt();
    for (Eigen::Index i = 0; i < np; ++i)
      for (Eigen::Index j = 0; j < np; ++j)
        if (t(i, j) != 0.0 && std::isinf(internal_sigma(j))) fit.uncertainties(i) = kInf;
    fit.specs[2] = {"gamma_l", "rad/s", gamma0};
    fit.specs[3] = {"gamma_phi", "rad/s", gamma0};
  }
  const QubitParams q{fit.parameters(0), fit.parameters(0) - 1.0, fit.parameters(1), fit.parameters(2), fit.parameters(3)};
  fit.derived["decoherence10"] = decoherence_rate(q);
  fit.derived["gamma1"] = q.gamma1();
  fit.derived["rabi_decay"] = rabi_decay_rate(q);
  const double rabi_first = rabi_index[0] >= 0 ? fit.parameters(rabi_index[0]) : prepared[0].rabi;
  if (traces[0].applied_rabi) fit.derived["rabi_used"] = *traces[0].applied_rabi;
  if (rabi_index[0] >= 0) fit.derived["rabi_fit"] = rabi_first;
  if (q.gamma1() > 0.0 && decoherence_rate(q) > 0.0)
    fit.derived["saturation"] = saturation_parameter(q, DriveSpec{rabi_first, q.f01});
  if (fit.degenerate)
    fit.notes.push_back("gamma_l / gamma_phi split is not identifiable from these traces (weak-drive limit)");
  fit.notes.push_back(prepared[0].float_rabi ? "drive strength fitted" : "drive strength fixed to applied value");
  return fit;
}

FitResult fit_qubit_model(const ComplexTrace& trace, std::optional<double> applied_rabi, const QubitFitOptions& opts) {
  const QubitTrace one{trace, applied_rabi};
  return fit_qubit_model(std::span<const QubitTrace>(&one, 1), opts);
}

// ---------------------------------------------------------------------------
// Time-domain fits

namespace {

void check_series(std::span<const double> t, std::span<const double> y, std::size_t min_points) {
  if (t.size() != y.size()) throw DomainError("time and value arrays differ in length");
  if (t.size() < min_points) throw DomainError("too few samples");
  for (std::size_t i = 1; i < t.size(); ++i)
    if (!(t[i] > t[i - 1])) throw DomainError("time axis must be strictly increasing");
  for (double v : y)
    if (!std::isfinite(v)) throw DomainError("non-finite sample");
}

/// Converts a fitted decay rate into a lifetime with a propagated sigma.
void rate_to_lifetime(FitResult& fit, Eigen::Index i, const std::string& name) {
  const double k = fit.parameters(i);
  const double sk = fit.uncertainties(i);
  fit.derived["decay_rate"] = k;
  fit.derived["decay_rate_sigma"] = sk;
  fit.specs[static_cast<std::size_t>(i)] = {name, "s", fit.specs[static_cast<std::size_t>(i)].scale};
  if (k > 0.0) {
    fit.parameters(i) = 1.0 / k;
    fit.uncertainties(i) = sk / (k * k);
  } else {
    fit.parameters(i) = kInf;
    fit.uncertainties(i) = kInf;
  }
}

}  // namespace

FitResult fit_damped_cosine(std::span<const double> t, std::span<const double> y, const FitOptions& opts) {
  check_series(t, y, 8);
  const std::size_t n = t.size();
  const double span = t.back() - t.front();
  const double mean = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
  std::vector<double> dts(n - 1);
  for (std::size_t i = 1; i < n; ++i) dts[i - 1] = t[i] - t[i - 1];
  const double nyquist = 0.5 / median(dts);

  // Discrete spectrum on an 8x oversampled grid.
  const std::size_t grid = 8 * n;
  const double f_lo = 0.5 / span;
  std::vector<double> power(grid);
  double best_power = -1.0;
  std::size_t best = 0;
  for (std::size_t g = 0; g < grid; ++g) {
    const double fg = f_lo + (nyquist - f_lo) * static_cast<double>(g) / static_cast<double>(grid - 1);
    cd s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += (y[i] - mean) * std::polar(1.0, -kTwoPi * fg * (t[i] - t.front()));
    power[g] = std::norm(s);
    if (power[g] > best_power) {
      best_power = power[g];
      best = g;
    }
  }
  const double fstep = (nyquist - f_lo) / static_cast<double>(grid - 1);
  double f0 = f_lo + fstep * static_cast<double>(best);
  if (best > 0 && best + 1 < grid) {
    const double a = power[best - 1], b = power[best], c = power[best + 1];
    const double denom = a - 2.0 * b + c;
    if (denom < 0.0) f0 += 0.5 * fstep * (a - c) / denom;
  }
  const double floor = median(power);
  if (!(best_power > 25.0 * floor) || !(best_power > 0.0)) throw SignalError("no spectral peak above the noise");
  if (f0 * span < 2.0) throw SignalError("fewer than two oscillation periods in the trace");

  // Envelope from the extrema of |y - mean|.
  std::vector<double> et, ey;
  for (std::size_t i = 1; i + 1 < n; ++i) {
    const double a = std::abs(y[i] - mean);
    if (a >= std::abs(y[i - 1] - mean) && a >= std::abs(y[i + 1] - mean) && a > 0.0) {
      et.push_back(t[i]);
      ey.push_back(std::log(a));
    }
  }
  double k0 = 0.0;
  if (et.size() >= 3) k0 = std::max(0.0, -fit_line(et, ey).second);

  // Linear coefficients at fixed (f0, k0).
  MatrixXd basis(static_cast<Eigen::Index>(n), 3);
  VectorXd yv = Eigen::Map<const VectorXd>(y.data(), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const double tt = t[i] - t.front();
    const double env = std::exp(-k0 * tt);
    basis(static_cast<Eigen::Index>(i), 0) = env * std::cos(kTwoPi * f0 * tt);
    basis(static_cast<Eigen::Index>(i), 1) = env * std::sin(kTwoPi * f0 * tt);
    basis(static_cast<Eigen::Index>(i), 2) = 1.0;
  }
  const Eigen::Vector3d lin = basis.colPivHouseholderQr().solve(yv);
  const double amp0 = std::hypot(lin(0), lin(1));
  const double ph0 = std::atan2(-lin(1), lin(0));
  const double t0 = t.front();

  RealModel model = [&](const VectorXd& p) {
    VectorXd out(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
      const double tt = t[i] - t0;
      out(static_cast<Eigen::Index>(i)) = p(0) * std::exp(-p(1) * tt) * std::cos(kTwoPi * p(2) * tt + p(3)) + p(4);
    }
    return out;
  };
  VectorXd init(5);
  init << amp0, k0, f0, ph0, lin(2);
  const double amp_scale = std::max(amp0, 1e-12);
  std::vector<ParameterSpec> specs{{"amplitude", "", amp_scale},
                                   {"decay_rate", "1/s", 1.0 / span},
                                   {"f_osc", "Hz", 1.0 / span},
                                   {"phase", "rad", 1.0},
                                   {"offset", "", amp_scale}};
  FitOptions o = opts;
  o.allow_degenerate = true;
  FitResult fit = fit_damped_least_squares(model, yv, init, specs, o);

  // Express the phase at t = 0 and keep the amplitude positive.
  if (fit.parameters(0) < 0.0) {
    fit.parameters(0) = -fit.parameters(0);
    fit.parameters(3) += std::numbers::pi;
  }
  fit.parameters(3) = wrap_angle(fit.parameters(3) - kTwoPi * fit.parameters(2) * t0);
  rate_to_lifetime(fit, 1, "T_decay");
  return fit;
}

FitResult fit_exponential(std::span<const double> t, std::span<const double> y, const FitOptions& opts) {
  check_series(t, y, 4);
  const std::size_t n = t.size();
  const double t0 = t.front();
  const double span = t.back() - t0;
  double dt_min = span;
  for (std::size_t i = 1; i < n; ++i) dt_min = std::min(dt_min, t[i] - t[i - 1]);
  VectorXd yv = Eigen::Map<const VectorXd>(y.data(), static_cast<Eigen::Index>(n));

  // Variable projection over a logarithmic grid of decay rates.
  const double ssr_const = (yv.array() - yv.mean()).square().sum();
  const double k_lo = 0.5 / span, k_hi = 0.5 / dt_min;
  const int candidates = 120;
  double k0 = 0.0, best_ssr = INFINITY;
  Eigen::Vector2d lin = Eigen::Vector2d::Zero();
  MatrixXd basis(static_cast<Eigen::Index>(n), 2);
  for (int c = 0; c < candidates; ++c) {
    const double k = k_lo * std::pow(k_hi / k_lo, c / double(candidates - 1));
    for (std::size_t i = 0; i < n; ++i) {
      basis(static_cast<Eigen::Index>(i), 0) = std::exp(-k * (t[i] - t0));
      basis(static_cast<Eigen::Index>(i), 1) = 1.0;
    }
    const Eigen::Vector2d coef = basis.colPivHouseholderQr().solve(yv);
    const double ssr = (basis * coef - yv).squaredNorm();
    if (ssr < best_ssr) {
      best_ssr = ssr;
      k0 = k;
      lin = coef;
    }
  }
  if (!(ssr_const - best_ssr > 25.0 * best_ssr / static_cast<double>(n)) || !(std::abs(lin(0)) > 0.0))
    throw SignalError("trace does not decay");

  RealModel model = [&](const VectorXd& p) {
    VectorXd out(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) out(static_cast<Eigen::Index>(i)) = p(0) * std::exp(-p(1) * (t[i] - t0)) + p(2);
    return out;
  };
  VectorXd init(3);
  init << lin(0), k0, lin(1);
  const double amp_scale = std::abs(lin(0));
  FitResult fit = fit_damped_least_squares(model, yv, init, {{"amplitude", "", amp_scale}, {"decay_rate", "1/s", k0}, {"offset", "", amp_scale}}, opts);
  if (!(fit.parameters(1) > 0.0)) throw SignalError("fitted decay rate is not positive");
  // Amplitude referred to t = 0.
  fit.parameters(0) *= std::exp(fit.parameters(1) * t0);
  fit.uncertainties(0) *= std::exp(fit.parameters(1) * t0);
  rate_to_lifetime(fit, 1, "T1");
  if (t.back() - t0 < 2.0 * fit.parameters(1)) throw DomainError("trace spans less than two decay times");
  return fit;
}

QuadraticFit fit_quadratic(std::span<const FluxPoint> points, bool symmetric) {
  std::vector<double> biases;
  for (const auto& p : points) biases.push_back(p.bias_ua);
  std::ranges::sort(biases);
  const auto distinct = std::distance(biases.begin(), std::unique(biases.begin(), biases.end()));
  if (distinct < 3) throw ConditioningError("quadratic fit needs at least three distinct bias points");

  double bscale = 0.0, fmean = 0.0;
  for (const auto& p : points) {
    bscale = std::max(bscale, std::abs(p.bias_ua));
    fmean += p.frequency;
  }
  fmean /= static_cast<double>(points.size());
  const int cols = symmetric ? 2 : 3;
  MatrixXd a(static_cast<Eigen::Index>(points.size()), cols);
  VectorXd b(static_cast<Eigen::Index>(points.size()));
  for (std::size_t i = 0; i < points.size(); ++i) {
    const double x = points[i].bias_ua / bscale;
    const auto r = static_cast<Eigen::Index>(i);
    a(r, 0) = x * x;
    if (symmetric) {
      a(r, 1) = 1.0;
    } else {
      a(r, 1) = x;
      a(r, 2) = 1.0;
    }
    b(r) = points[i].frequency - fmean;
  }
  Eigen::ColPivHouseholderQR<MatrixXd> qr(a);
  if (qr.rank() < cols) throw ConditioningError("quadratic design matrix is rank deficient");
  const VectorXd c = qr.solve(b);
  const VectorXd res = a * c - b;
  const auto dof = static_cast<double>(std::max<Eigen::Index>(1, a.rows() - cols));
  const MatrixXd cov = (res.squaredNorm() / dof) * (a.transpose() * a).inverse();

  QuadraticFit out;
  out.map.quad_coeff = c(0) / (bscale * bscale);
  out.uncertainties(0) = std::sqrt(cov(0, 0)) / (bscale * bscale);
  if (symmetric) {
    out.map.intercept = c(1) + fmean;
    out.uncertainties(2) = std::sqrt(cov(1, 1));
  } else {
    out.linear_coeff = c(1) / bscale;
    out.uncertainties(1) = std::sqrt(cov(1, 1)) / bscale;
    out.map.intercept = c(2) + fmean;
    out.uncertainties(2) = std::sqrt(cov(2, 2));
  }
  out.rms_residual = std::sqrt(res.squaredNorm() / static_cast<double>(a.rows()));
  return out;
}

// ---------------------------------------------------------------------------
// Comparison table

double rabi_envelope_rate(const QubitParams& q, RabiEnvelopeModel model) {
  return model == RabiEnvelopeModel::two_rate ? rabi_decay_rate(q) : 0.75 * q.gamma1() + 0.5 * q.gamma_phi;
}

namespace {

double dephasing_from_envelope(double rabi_rate, double gamma1, RabiEnvelopeModel model) {
  return model == RabiEnvelopeModel::two_rate ? dephasing_from_rabi(rabi_rate, gamma1) : 2.0 * rabi_rate - 1.5 * gamma1;
}

std::optional<double> derived_or_none(const FitResult& f, const std::string& key) {
  if (auto it = f.derived.find(key); it != f.derived.end()) return it->second;
  return std::nullopt;
}

}  // namespace

LossRateColumn time_domain_column(double t1, double t_rabi, double rabi_used, RabiEnvelopeModel model) {
  if (!(t1 > 0.0) || !std::isfinite(t1)) throw StructuralError("relaxation fit has no finite T1");
  if (!(t_rabi > 0.0) || !std::isfinite(t_rabi)) throw StructuralError("Rabi fit has no finite decay time");
  LossRateColumn td;
  td.gamma1 = 1.0 / t1;
  td.rabi_decay = 1.0 / t_rabi;
  td.gamma_phi = dephasing_from_envelope(*td.rabi_decay, *td.gamma1, model);
  td.decoherence = 0.5 * *td.gamma1 + *td.gamma_phi;
  td.rabi_used = rabi_used;
  return td;
}

LossRateColumn truth_column(const QubitParams& q, double rabi_used, RabiEnvelopeModel model) {
  LossRateColumn c;
  c.gamma10 = q.gamma10;
  c.gamma_l = q.gamma_l;
  c.gamma_phi = q.gamma_phi;
  c.gamma1 = q.gamma1();
  c.decoherence = decoherence_rate(q);
  c.rabi_decay = rabi_envelope_rate(q, model);
  c.rabi_used = rabi_used;
  return c;
}

CrossValidationTable cross_validation_table(const FitResult* resonator, const FitResult* qubit, const FitResult* rabi,
                                            const FitResult* t1, RabiEnvelopeModel model) {
  if (!resonator || !qubit || !rabi || !t1)
    throw StructuralError("comparison table needs resonator, qubit, Rabi and relaxation fits");
  CrossValidationTable table;
  table.rabi_model = model;

  table.resonator.gamma10 = resonator->value("gamma10");
  table.resonator.decoherence = resonator->value("decoherence10");
  table.resonator.rabi_used = derived_or_none(*resonator, "rabi_used");

  QubitParams q{1.0, 0.5, qubit->value("gamma10"), qubit->value("gamma_l"), qubit->value("gamma_phi")};
  table.qubit.gamma10 = q.gamma10;
  table.qubit.gamma_l = q.gamma_l;
  table.qubit.gamma_phi = q.gamma_phi;
  table.qubit.gamma1 = q.gamma1();
  table.qubit.decoherence = decoherence_rate(q);
  table.qubit.rabi_decay = rabi_envelope_rate(q, model);
  table.qubit.rabi_used = derived_or_none(*qubit, "rabi_used");
  table.qubit.rabi_fit = derived_or_none(*qubit, "rabi_fit");

  table.time_domain =
      time_domain_column(t1->value("T1"), rabi->value("T_decay"), angular(rabi->value("f_osc")), model);
  return table;
}

}  // namespace wgqed
