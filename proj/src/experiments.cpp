#include "wgqed/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <thread>

#include "wgqed/lineshape.hpp"

namespace wgqed {
namespace {

using cd = std::complex<double>;

/// Runs body(i) for i in [0, n) on up to `threads` workers. Each index writes
/// only its own slot, so results do not depend on scheduling.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& body) {
  unsigned workers = threads > 0 ? static_cast<unsigned>(threads) : std::max(1U, std::thread::hardware_concurrency());
  workers = static_cast<unsigned>(std::min<std::size_t>(workers, n));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) body(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

void add_noise(std::span<cd> values, double sigma, std::mt19937_64& rng) {
  if (sigma == 0.0) return;
  std::normal_distribution<double> noise(0.0, sigma);
  for (auto& v : values) {
    const double re = noise(rng);
    const double im = noise(rng);
    v += cd(re, im);
  }
}

void check_grid(const std::vector<double>& g, const std::string& name, double min_value = -INFINITY) {
  if (g.empty()) throw DomainError(name + " grid is empty");
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!std::isfinite(g[i])) throw DomainError(name + " grid has a non-finite entry");
    if (g[i] < min_value) throw DomainError(name + " grid has an entry below " + std::to_string(min_value));
    if (i > 0 && !(g[i] > g[i - 1])) throw DomainError(name + " grid must be strictly increasing");
  }
}

QubitParams shifted(const QubitParams& q, double df) {
  QubitParams out = q;
  out.f01 += df;
  out.f12 += df;
  return out;
}

double two_level_p1(const QubitParams& q, const PulseSegment& drive, const SimOptions& opts) {
  return population(evolve(ground_state(opts.levels), q, {drive}, opts).back().rho, 1);
}

std::vector<double> phases(const std::vector<cd>& values) {
  std::vector<double> out(values.size());
  std::ranges::transform(values, out.begin(), [](cd z) { return std::arg(z); });
  return out;
}

/// Stationary transmission, from the master equation or the closed form.
cd steady_transmission(const QubitParams& q, double rabi, double f, bool fast, const SimOptions& opts) {
  const DriveSpec d{rabi, f};
  if (fast || rabi == 0.0) return eval_qubit_s21(q, d);
  return transmitted_amplitude(steady_state(q, d, opts), q, d);
}

/// Analytic marker for the two-photon 0-2 resonance under strong drive.
cd two_photon_marker(const QubitParams& q, double rabi, double f) {
  const double gamma = decoherence_rate(q);
  const double g1 = q.gamma1();
  const double alpha = std::abs(q.anharmonicity());
  if (!(gamma > 0.0) || !(g1 > 0.0) || !(alpha > 0.0)) return 1.0;
  const double effective = std::sqrt(2.0) * rabi * rabi / alpha;
  const double s2 = effective * effective / (g1 * gamma);
  const double depth = q.gamma10 / (2.0 * gamma) * s2 / (1.0 + s2);
  const double half_width = 0.5 * to_hz(gamma) * std::sqrt(1.0 + s2);
  const double center = 0.5 * (q.f01 + q.f12);
  return 1.0 - depth / cd(1.0, (f - center) / half_width);
}

struct Dip {
  double center;
  double half_width;
  double amplitude;
};

/// Lorentzian-on-a-slope fit of -ln|z| around a peak.
std::optional<Dip> refine_dip(const std::vector<double>& f, const std::vector<double>& y, std::size_t peak,
                              double half_width) {
  const double lo_f = f[peak] - 3.0 * half_width;
  const double hi_f = f[peak] + 3.0 * half_width;
  std::vector<double> xs, ys;
  for (std::size_t i = 0; i < f.size(); ++i)
    if (f[i] >= lo_f && f[i] <= hi_f) {
      xs.push_back(f[i]);
      ys.push_back(y[i]);
    }
  if (xs.size() < 8) return std::nullopt;
  const double c0 = f[peak];
  RealModel model = [&](const Eigen::VectorXd& p) {
    Eigen::VectorXd out(static_cast<Eigen::Index>(xs.size()));
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const double u = (xs[i] - p(1)) / p(2);
      out(static_cast<Eigen::Index>(i)) = p(0) / (1.0 + u * u) + p(3) + p(4) * (xs[i] - c0) / half_width;
    }
    return out;
  };
  Eigen::VectorXd init(5);
  init << y[peak], c0, half_width, 0.0, 0.0;
  const double amp = std::max(std::abs(y[peak]), 1e-12);
  try {
    FitOptions o;
    o.allow_degenerate = true;
    const auto fit = fit_damped_least_squares(
        model, Eigen::Map<const Eigen::VectorXd>(ys.data(), static_cast<Eigen::Index>(ys.size())), init,
        {{"amplitude", "", amp}, {"center", "Hz", half_width}, {"width", "Hz", half_width}, {"offset", "", amp},
         {"slope", "", amp}},
        o);
    const double c = fit.parameters(1);
    if (!(fit.parameters(0) > 0.0) || c < xs.front() || c > xs.back()) return std::nullopt;
    return Dip{c, std::abs(fit.parameters(2)), fit.parameters(0)};
  } catch (const Error&) {
    return std::nullopt;
  }
}

/// Half width at half maximum of y around `peak`.
double half_width_at(const std::vector<double>& f, const std::vector<double>& y, std::size_t peak, double base) {
  const double half = base + 0.5 * (y[peak] - base);
  std::size_t lo = peak, hi = peak;
  while (lo > 0 && y[lo] > half) --lo;
  while (hi + 1 < y.size() && y[hi] > half) ++hi;
  return std::max(0.5 * (f[hi] - f[lo]), f[1] - f[0]);
}

std::vector<double> smooth(const std::vector<double>& y, int half) {
  std::vector<double> out(y.size());
  const auto n = static_cast<std::ptrdiff_t>(y.size());
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    double s = 0.0;
    int c = 0;
    for (std::ptrdiff_t j = std::max<std::ptrdiff_t>(0, i - half); j <= std::min(n - 1, i + half); ++j, ++c)
      s += y[static_cast<std::size_t>(j)];
    out[static_cast<std::size_t>(i)] = s / c;
  }
  return out;
}

/// Finds up to two dips in a normalized strong-drive spectrum. Each search
/// picks the smoothing scale with the best signal-to-noise ratio; found
/// Lorentzians are subtracted before the next search.
FluxDipPoint locate_flux_dips(double bias, const ComplexTrace& normalized) {
  FluxDipPoint point;
  point.bias_ua = bias;
  const auto& f = normalized.axis();
  std::vector<double> y(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) y[i] = -std::log(std::abs(normalized.values()[i]));
  const double noise = noise_floor(normalized.values());

  std::vector<Dip> dips;
  std::vector<bool> masked(f.size(), false);
  for (int k = 0; k < 2; ++k) {
    std::size_t peak = f.size();
    double best_snr = 0.0;
    std::vector<double> best_smooth;
    for (int half : {2, 8, 32}) {
      auto ys = smooth(y, half);
      const double level = noise / std::sqrt(2.0 * half + 1.0) + 1e-12;
      std::size_t p = f.size();
      for (std::size_t i = 0; i < f.size(); ++i)
        if (!masked[i] && (p == f.size() || ys[i] > ys[p])) p = i;
      if (p == f.size()) continue;
      const double snr = ys[p] / level;
      if (snr > best_snr) {
        best_snr = snr;
        peak = p;
        best_smooth = std::move(ys);
      }
    }
    if (peak == f.size() || best_snr < 6.0) break;
    const double hw = half_width_at(f, best_smooth, peak, 0.0);
    auto dip = refine_dip(f, y, peak, hw);
    if (!dip) dip = refine_dip(f, y, peak, 2.0 * hw);
    if (!dip) {
      for (std::size_t i = 0; i < f.size(); ++i)
        if (std::abs(f[i] - f[peak]) < 2.0 * hw) masked[i] = true;
      point.flags.push_back("dip refinement failed near " + std::to_string(f[peak]) + " Hz");
      continue;
    }
    for (std::size_t i = 0; i < f.size(); ++i) {
      const double u = (f[i] - dip->center) / dip->half_width;
      y[i] -= dip->amplitude / (1.0 + u * u);
      if (std::abs(u) < 1.0) masked[i] = true;
    }
    dips.push_back(*dip);
  }
  if (dips.size() == 2) {
    std::ranges::sort(dips, {}, &Dip::center);
    point.f02_half = dips[0].center;
    point.f01 = dips[1].center;
  } else {
    point.flags.push_back("found " + std::to_string(dips.size()) + " of 2 dips");
  }
  return point;
}

template <class F>
auto staged(const std::string& stage, F&& body) -> decltype(body()) {
  const auto tag = [&](const Error& e) { return stage + ": " + e.what(); };
  try {
    return body();
  } catch (const SignalError& e) {
    throw SignalError(tag(e));
  } catch (const ConditioningError& e) {
    throw ConditioningError(tag(e));
  } catch (const IntegrationError& e) {
    throw IntegrationError(tag(e));
  } catch (const ConvergenceError& e) {
    throw ConvergenceError(tag(e));
  } catch (const StructuralError& e) {
    throw StructuralError(tag(e));
  } catch (const IoError& e) {
    throw IoError(tag(e));
  } catch (const Error& e) {
    throw DomainError(tag(e));
  }
}

double resolved_pi_rate(const ExperimentConfig& cfg, ExperimentRecord& rec) {
  if (cfg.pi_rabi_rate) return *cfg.pi_rabi_rate;
  const auto cal = calibrate_pi_pulse(cfg.truth, cfg.drive, cfg.sim);
  rec.scalars["pi_max_population"] = cal.max_population;
  rec.flags.push_back("pi pulse calibrated from the first population maximum");
  return cal.rabi_rate;
}

}  // namespace

std::string_view to_string(Protocol p) {
  switch (p) {
    case Protocol::spectroscopy: return "spectroscopy";
    case Protocol::flux_sweep: return "fluxmap";
    case Protocol::chevron: return "chevron";
    case Protocol::rabi: return "rabi";
    case Protocol::t1: return "t1";
  }
  return "spectroscopy";
}

Protocol protocol_from_string(std::string_view s) {
  if (s == "spectroscopy") return Protocol::spectroscopy;
  if (s == "fluxmap" || s == "flux_sweep") return Protocol::flux_sweep;
  if (s == "chevron") return Protocol::chevron;
  if (s == "rabi") return Protocol::rabi;
  if (s == "t1") return Protocol::t1;
  throw DomainError("unknown protocol '" + std::string(s) + "'");
}

std::vector<double> linear_grid(double start, double stop, int points) {
  if (points < 1) throw DomainError("grid needs at least one point");
  if (points == 1) return {start};
  std::vector<double> g(static_cast<std::size_t>(points));
  for (int i = 0; i < points; ++i)
    g[static_cast<std::size_t>(i)] = start + (stop - start) * static_cast<double>(i) / (points - 1);
  return g;
}

void validate(const ExperimentConfig& cfg) {
  validate(cfg.truth);
  check_grid(cfg.probe_frequencies, "probe frequency", 0.0);
  check_grid(cfg.probe_rabi_rates, "probe drive", 0.0);
  check_grid(cfg.biases, "bias");
  check_grid(cfg.flux_frequencies, "flux frequency", 0.0);
  check_grid(cfg.chevron_rabi_rates, "chevron amplitude", 0.0);
  check_grid(cfg.chevron_detunings, "chevron detuning");
  check_grid(cfg.durations, "duration", 0.0);
  check_grid(cfg.delays, "delay", 0.0);
  if (!(cfg.noise_sigma >= 0.0) || !std::isfinite(cfg.noise_sigma)) throw DomainError("noise sigma must be >= 0");
  if (!(cfg.drive.duration > 0.0)) throw DomainError("drive duration must be positive");
  if (!(cfg.readout.duration >= 0.0)) throw DomainError("readout duration must be non-negative");
  if (!(cfg.rabi_drive_rate > 0.0)) throw DomainError("Rabi drive rate must be positive");
  if (!(cfg.flux_rabi_rate > 0.0)) throw DomainError("flux-sweep drive rate must be positive");
  if (cfg.pi_rabi_rate && !(*cfg.pi_rabi_rate > 0.0)) throw DomainError("pi-pulse drive rate must be positive");
  if (cfg.sim.levels < 2) throw DomainError("at least two levels are required");
}

ExperimentRecord run_spectroscopy(const ExperimentConfig& cfg) {
  validate(cfg);
  ExperimentRecord rec;
  rec.config = cfg;
  std::mt19937_64 rng(cfg.seed);
  const auto& f = cfg.probe_frequencies;
  for (std::size_t k = 0; k < cfg.probe_rabi_rates.size(); ++k) {
    const double rabi = cfg.probe_rabi_rates[k];
    std::vector<cd> values(f.size());
    parallel_for(f.size(), cfg.threads, [&](std::size_t i) {
      values[i] = steady_transmission(cfg.truth, rabi, f[i], cfg.fast_lineshape, cfg.sim) *
                  environment_response(cfg.environment, f[i]);
    });
    add_noise(values, cfg.noise_sigma, rng);
    const std::string name = "drive_" + std::to_string(k);
    ComplexTrace trace(AxisKind::frequency, f, std::move(values));
    if (f.size() >= 10) rec.traces.emplace(name + "_normalized", normalize_off_resonant(trace));
    rec.traces.emplace(name, std::move(trace));
    if (cfg.truth.gamma1() > 0.0 && decoherence_rate(cfg.truth) > 0.0)
      rec.scalars["saturation_" + std::to_string(k)] = saturation_parameter(cfg.truth, DriveSpec{rabi, cfg.truth.f01});
  }
  rec.flags.push_back(cfg.fast_lineshape ? "lineshape: closed form"
                                         : "lineshape: master-equation steady state, " +
                                               std::to_string(cfg.sim.levels) + " levels");
  return rec;
}

ExperimentRecord run_flux_sweep(const ExperimentConfig& cfg) {
  validate(cfg);
  ExperimentRecord rec;
  rec.config = cfg;
  std::mt19937_64 rng(cfg.seed);
  const auto& f = cfg.flux_frequencies;
  const auto& b = cfg.biases;
  SimOptions two_level = cfg.sim;
  two_level.levels = 2;

  ComplexMap map;
  map.row_kind = AxisKind::bias;
  map.column_kind = AxisKind::frequency;
  map.rows = b;
  map.columns = f;
  map.values.resize(static_cast<Eigen::Index>(b.size()), static_cast<Eigen::Index>(f.size()));
  parallel_for(b.size() * f.size(), cfg.threads, [&](std::size_t idx) {
    const std::size_t r = idx / f.size();
    const std::size_t c = idx % f.size();
    const QubitParams q = shifted(cfg.truth, cfg.flux.quad_coeff * b[r] * b[r]);
    map.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
        steady_transmission(q, cfg.flux_rabi_rate, f[c], cfg.fast_lineshape, two_level) *
        two_photon_marker(q, cfg.flux_rabi_rate, f[c]) * environment_response(cfg.environment, f[c]);
  });
  for (Eigen::Index r = 0; r < map.values.rows(); ++r) {
    std::vector<cd> row(map.values.row(r).begin(), map.values.row(r).end());
    add_noise(row, cfg.noise_sigma, rng);
    for (Eigen::Index c = 0; c < map.values.cols(); ++c) map.values(r, c) = row[static_cast<std::size_t>(c)];
  }

  ComplexMap contrast = map;
  std::vector<FluxPoint> branch01, branch02;
  for (std::size_t r = 0; r < b.size(); ++r) {
    const auto ri = static_cast<Eigen::Index>(r);
    std::vector<cd> row(map.values.row(ri).begin(), map.values.row(ri).end());
    const ComplexTrace normalized = normalize_off_resonant(ComplexTrace(AxisKind::frequency, f, std::move(row)));
    for (std::size_t c = 0; c < f.size(); ++c) contrast.values(ri, static_cast<Eigen::Index>(c)) = normalized.values()[c];
    auto point = locate_flux_dips(b[r], normalized);
    if (point.f01) branch01.push_back({b[r], *point.f01});
    if (point.f02_half) branch02.push_back({b[r], *point.f02_half});
    for (const auto& flag : point.flags) rec.flags.push_back("bias " + std::to_string(b[r]) + " uA: " + flag);
    rec.flux_dips.push_back(std::move(point));
  }
  const Eigen::RowVectorXcd mean = contrast.values.colwise().mean();
  contrast.values.rowwise() -= mean;
  rec.maps.emplace("transmission", std::move(map));
  rec.maps.emplace("contrast", std::move(contrast));

  try {
    rec.flux_fit_f01 = fit_quadratic(branch01);
  } catch (const Error& e) {
    rec.flags.push_back(std::string("f01 branch fit failed: ") + e.what());
  }
  try {
    rec.flux_fit_f02_half = fit_quadratic(branch02);
  } catch (const Error& e) {
    rec.flags.push_back(std::string("f02/2 branch fit failed: ") + e.what());
  }
  if (rec.flux_fit_f01 && rec.flux_fit_f02_half) {
    const auto two_tone = omega12_from_two_tone(rec.flux_fit_f01->map.intercept, rec.flux_fit_f02_half->map.intercept);
    rec.scalars["f12"] = two_tone.f12;
    rec.scalars["anharmonicity_hz"] = to_hz(two_tone.anharmonicity);
  }
  rec.flags.push_back("two-photon dip placed analytically at (f01 + f12)/2");
  rec.flags.push_back("one-photon response from the two-level model (no AC Stark shift)");
  return rec;
}

PiCalibration calibrate_pi_pulse(const QubitParams& q, const PulseSegment& drive, const SimOptions& opts) {
  if (!(drive.duration > 0.0)) throw DomainError("drive duration must be positive");
  const double nominal = std::numbers::pi / drive.duration;
  PulseSegment seg = drive;
  seg.carrier = q.f01;
  auto p1 = [&](double rate) {
    seg.rabi_rate = rate;
    return two_level_p1(q, seg, opts);
  };
  constexpr int kCoarse = 60;
  const double step = 3.0 * nominal / kCoarse;
  double prev2 = 0.0, prev1 = p1(step);
  int found = -1;
  for (int k = 2; k <= kCoarse; ++k) {
    const double cur = p1(k * step);
    if (prev1 >= cur && prev1 > prev2) {
      found = k - 1;
      break;
    }
    prev2 = prev1;
    prev1 = cur;
  }
  if (found < 0) throw SignalError("no population maximum below three nominal pi amplitudes");
  double a = (found - 1) * step, bnd = (found + 1) * step;
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = bnd - inv_phi * (bnd - a), d = a + inv_phi * (bnd - a);
  double pc = p1(c), pd = p1(d);
  while (bnd - a > 1e-9 * nominal) {
    if (pc > pd) {
      bnd = d;
      d = c;
      pd = pc;
      c = bnd - inv_phi * (bnd - a);
      pc = p1(c);
    } else {
      a = c;
      c = d;
      pc = pd;
      d = a + inv_phi * (bnd - a);
      pd = p1(d);
    }
  }
  const double best = 0.5 * (a + bnd);
  return {best, p1(best)};
}

ExperimentRecord run_chevron(const ExperimentConfig& cfg) {
  validate(cfg);
  ExperimentRecord rec;
  rec.config = cfg;
  const double pi_rate = resolved_pi_rate(cfg, rec);
  rec.scalars["pi_rabi_rate"] = pi_rate;

  const auto& amps = cfg.chevron_rabi_rates;
  const auto& dets = cfg.chevron_detunings;
  const WindowAverage window(cfg.truth, cfg.readout.duration, 1, cfg.sim);
  ComplexMap signal;
  signal.row_kind = AxisKind::amplitude;
  signal.column_kind = AxisKind::frequency;
  signal.rows = amps;
  signal.columns = dets;
  signal.values.resize(static_cast<Eigen::Index>(amps.size()), static_cast<Eigen::Index>(dets.size()));
  parallel_for(amps.size() * dets.size(), cfg.threads, [&](std::size_t idx) {
    const std::size_t r = idx / dets.size();
    const std::size_t c = idx % dets.size();
    PulseSegment seg = cfg.drive;
    seg.carrier = cfg.truth.f01 + dets[c];
    seg.rabi_rate = amps[r];
    signal.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
        run_two_pulse(cfg.truth, seg, 0.0, cfg.readout, cfg.sim, window).signal;
  });
  std::mt19937_64 rng(cfg.seed);
  for (Eigen::Index r = 0; r < signal.values.rows(); ++r)
    for (Eigen::Index c = 0; c < signal.values.cols(); ++c) {
      cd v = signal.values(r, c);
      add_noise(std::span<cd>(&v, 1), cfg.noise_sigma, rng);
      signal.values(r, c) = v;
    }
  ComplexMap phase = signal;
  phase.values = signal.values.unaryExpr([](cd z) { return cd(std::arg(z), 0.0); });
  rec.maps.emplace("signal", std::move(signal));
  rec.maps.emplace("phase", std::move(phase));
  return rec;
}

ExperimentRecord run_rabi(const ExperimentConfig& cfg) {
  validate(cfg);
  ExperimentRecord rec;
  rec.config = cfg;
  const auto& t = cfg.durations;
  const WindowAverage window(cfg.truth, cfg.readout.duration, 1, cfg.sim);
  const int dim = cfg.sim.levels;
  std::vector<cd> values(t.size());
  const DriveSpec readout{cfg.readout.rabi_rate, cfg.readout.carrier};
  const auto signal_of = [&](const DensityMatrix& rho) {
    return readout_signal(std::clamp(window(rho), 0.0, 1.0), cfg.truth, readout);
  };
  if (t.back() > 0.0) {
    const PulseSegment seg{cfg.truth.f01, cfg.rabi_drive_rate, t.back(), cfg.drive.phase};
    const auto traj = evolve(ground_state(dim), cfg.truth, {seg}, cfg.sim, t);
    std::size_t j = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      while (j < traj.size() && traj[j].time < t[i]) ++j;
      values[i] = signal_of(traj[std::min(j, traj.size() - 1)].rho);
    }
  } else {
    values[0] = signal_of(ground_state(dim));
  }
  std::mt19937_64 rng(cfg.seed);
  add_noise(values, cfg.noise_sigma, rng);
  const auto ph = phases(values);
  rec.traces.emplace("rabi", ComplexTrace(AxisKind::time, t, std::move(values)));
  rec.fits.emplace("rabi", fit_damped_cosine(t, ph));
  rec.scalars["rabi_drive_rate"] = cfg.rabi_drive_rate;
  return rec;
}

ExperimentRecord run_t1(const ExperimentConfig& cfg) {
  validate(cfg);
  ExperimentRecord rec;
  rec.config = cfg;
  const double pi_rate = resolved_pi_rate(cfg, rec);
  rec.scalars["pi_rabi_rate"] = pi_rate;
  const auto& d = cfg.delays;
  const WindowAverage window(cfg.truth, cfg.readout.duration, 1, cfg.sim);
  const DriveSpec readout{cfg.readout.rabi_rate, cfg.readout.carrier};
  PulseSegment pulse = cfg.drive;
  pulse.carrier = cfg.truth.f01;
  pulse.rabi_rate = pi_rate;
  PulseSequence seq{pulse};
  if (d.back() > 0.0) seq.push_back({pulse.carrier, 0.0, d.back(), 0.0});
  std::vector<double> samples(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) samples[i] = pulse.duration + d[i];
  const auto traj = evolve(ground_state(cfg.sim.levels), cfg.truth, seq, cfg.sim, samples);
  std::vector<cd> values(d.size());
  std::size_t j = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    while (j < traj.size() && traj[j].time < samples[i]) ++j;
    const auto& rho = traj[std::min(j, traj.size() - 1)].rho;
    values[i] = readout_signal(std::clamp(window(rho), 0.0, 1.0), cfg.truth, readout);
  }
  std::mt19937_64 rng(cfg.seed);
  add_noise(values, cfg.noise_sigma, rng);
  const auto ph = phases(values);
  rec.traces.emplace("t1", ComplexTrace(AxisKind::delay, d, std::move(values)));
  rec.fits.emplace("t1", fit_exponential(d, ph));
  return rec;
}

CharacterizationReport run_full_characterization(const ExperimentConfig& cfg) {
  validate(cfg);
  CharacterizationReport rep;
  const double weak = cfg.probe_rabi_rates.front();

  ExperimentConfig spec_cfg = cfg;
  spec_cfg.protocol = Protocol::spectroscopy;
  spec_cfg.probe_rabi_rates = {weak};
  rep.spectroscopy = staged("spectroscopy", [&] { return run_spectroscopy(spec_cfg); });
  const ComplexTrace& trace = rep.spectroscopy.traces.at("drive_0");
  auto res_fit = staged("resonator fit", [&] { return fit_resonator(trace); });
  res_fit.derived["rabi_used"] = weak;
  auto qubit_fit = staged("qubit fit", [&] { return fit_qubit_model(trace, weak); });
  rep.spectroscopy.fits.emplace("resonator", res_fit);
  rep.spectroscopy.fits.emplace("qubit", qubit_fit);
  rep.weak_drive_saturation = qubit_fit.value("saturation");

  ExperimentConfig flux_cfg = cfg;
  flux_cfg.protocol = Protocol::flux_sweep;
  flux_cfg.seed = cfg.seed + 4;
  rep.flux = staged("flux sweep", [&] { return run_flux_sweep(flux_cfg); });

  ExperimentConfig chev_cfg = cfg;
  chev_cfg.protocol = Protocol::chevron;
  chev_cfg.seed = cfg.seed + 1;
  rep.chevron = staged("chevron", [&] { return run_chevron(chev_cfg); });

  ExperimentConfig td_cfg = cfg;
  td_cfg.pi_rabi_rate = rep.chevron.scalars.at("pi_rabi_rate");
  td_cfg.protocol = Protocol::rabi;
  td_cfg.seed = cfg.seed + 2;
  rep.rabi = staged("rabi", [&] { return run_rabi(td_cfg); });
  td_cfg.protocol = Protocol::t1;
  td_cfg.seed = cfg.seed + 3;
  rep.t1 = staged("t1", [&] { return run_t1(td_cfg); });

  rep.table = staged("comparison", [&] {
    return cross_validation_table(&res_fit, &qubit_fit, &rep.rabi.fits.at("rabi"), &rep.t1.fits.at("t1"),
                                  cfg.rabi_model);
  });
  rep.table.truth = truth_column(cfg.truth, weak, cfg.rabi_model);

  const auto& truth = *rep.table.truth;
  const std::pair<std::string, const LossRateColumn*> columns[] = {
      {"resonator", &rep.table.resonator}, {"qubit", &rep.table.qubit}, {"time_domain", &rep.table.time_domain}};
  for (const auto& [name, col] : columns) {
    const std::pair<std::string, std::pair<std::optional<double>, std::optional<double>>> rows[] = {
        {"gamma10", {col->gamma10, truth.gamma10}},        {"gamma_l", {col->gamma_l, truth.gamma_l}},
        {"gamma_phi", {col->gamma_phi, truth.gamma_phi}},  {"gamma1", {col->gamma1, truth.gamma1}},
        {"decoherence", {col->decoherence, truth.decoherence}}, {"rabi_decay", {col->rabi_decay, truth.rabi_decay}}};
    for (const auto& [row, pair] : rows)
      if (pair.first && pair.second && *pair.second != 0.0)
        rep.relative_errors[name + "." + row] = (*pair.first - *pair.second) / *pair.second;
  }
  return rep;
}

std::map<std::string, ExperimentConfig> contrast_presets(const ExperimentConfig& base) {
  const std::pair<const char*, std::pair<double, double>> sets[] = {
      {"A", {24e-9, 240e-9}}, {"B", {16e-9, 240e-9}}, {"C", {24e-9, 32e-9}},
      {"D", {60e-9, 60e-9}},  {"E", {24e-9, 600e-9}}, {"F", {100e-9, 240e-9}}};
  std::map<std::string, ExperimentConfig> out;
  for (const auto& [name, durations] : sets) {
    ExperimentConfig c = base;
    c.protocol = Protocol::chevron;
    c.drive.duration = durations.first;
    c.readout.duration = durations.second;
    c.pi_rabi_rate.reset();
    out.emplace(name, std::move(c));
  }
  return out;
}

double chevron_contrast(const ExperimentRecord& chevron) {
  const auto& m = chevron.maps.at("phase");
  std::size_t best = 0;
  for (std::size_t c = 1; c < m.columns.size(); ++c)
    if (std::abs(m.columns[c]) < std::abs(m.columns[best])) best = c;
  const auto col = m.values.col(static_cast<Eigen::Index>(best)).real();
  return col.maxCoeff() - col.minCoeff();
}

}  // namespace wgqed
