#include "wgqed/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <Eigen/Eigenvalues>

namespace wgqed {
namespace {

using Eigen::MatrixXcd;
using Eigen::VectorXcd;
using cd = std::complex<double>;

MatrixXcd kron(const MatrixXcd& a, const MatrixXcd& b) {
  MatrixXcd out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

VectorXcd vec(const DensityMatrix& rho) {
  return Eigen::Map<const VectorXcd>(rho.data(), rho.size());
}

DensityMatrix unvec(const VectorXcd& v, Eigen::Index dim) {
  return Eigen::Map<const MatrixXcd>(v.data(), dim, dim);
}

/// Energy of level j in the frame rotating at `frame_hz`, rad/s.
double rotating_level_energy(const QubitParams& q, int j, double frame_hz) {
  return j * angular(q.f01 - frame_hz) + 0.5 * j * (j - 1) * q.anharmonicity();
}

/// One classical RK4 step of a linear autonomous system, as a matrix.
MatrixXcd rk4_step_matrix(const Liouvillian& l, double h) {
  const auto n = l.rows();
  const MatrixXcd a = l * h;
  const MatrixXcd id = MatrixXcd::Identity(n, n);
  return id + a * (id + a * (0.5 * id + a * (id / 6.0 + a / 24.0)));
}

// Dormand-Prince 5(4) tableau.
constexpr double kA[7][6] = {
    {},
    {1.0 / 5},
    {3.0 / 40, 9.0 / 40},
    {44.0 / 45, -56.0 / 15, 32.0 / 9},
    {19372.0 / 6561, -25360.0 / 2187, 64448.0 / 6561, -212.0 / 729},
    {9017.0 / 3168, -355.0 / 33, 46732.0 / 5247, 49.0 / 176, -5103.0 / 18656},
    {35.0 / 384, 0.0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84}};
constexpr double kB5[7] = {35.0 / 384, 0.0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84, 0.0};
constexpr double kB4[7] = {5179.0 / 57600,    0.0,           7571.0 / 16695, 393.0 / 640,
                           -92097.0 / 339200, 187.0 / 2100, 1.0 / 40};

class Stepper {
 public:
  Stepper(const Liouvillian& l, const SimOptions& opts) : l_(l), opts_(opts) {}

  void advance(VectorXcd& v, double span) {
    if (span <= 0.0) return;
    if (opts_.method == Integrator::rk4)
      advance_fixed(v, span);
    else
      advance_adaptive(v, span);
  }

 private:
  void advance_fixed(VectorXcd& v, double span) {
    const auto steps = static_cast<long>(std::ceil(span / opts_.dt - 1e-9));
    const double h = span / static_cast<double>(std::max(1L, steps));
    if (h != cached_h_) {
      step_ = rk4_step_matrix(l_, h);
      cached_h_ = h;
    }
    for (long k = 0; k < std::max(1L, steps); ++k) v = step_ * v;
  }

  void advance_adaptive(VectorXcd& v, double span) {
    double t = 0.0;
    double h = std::min(h_ > 0.0 ? h_ : opts_.dt, span);
    VectorXcd k[7];
    int guard = 0;
    while (t < span) {
      if (++guard > 50'000'000) throw IntegrationError("adaptive integrator exceeded its step budget");
      h = std::min(h, span - t);
      k[0] = l_ * v;
      for (int s = 1; s < 7; ++s) {
        VectorXcd y = v;
        for (int j = 0; j < s; ++j)
          if (kA[s][j] != 0.0) y += h * kA[s][j] * k[j];
        k[s] = l_ * y;
      }
      VectorXcd y5 = v, y4 = v;
      for (int s = 0; s < 7; ++s) {
        y5 += h * kB5[s] * k[s];
        y4 += h * kB4[s] * k[s];
      }
      const double scale = opts_.adaptive_tol * (1.0 + v.cwiseAbs().maxCoeff());
      const double err = (y5 - y4).cwiseAbs().maxCoeff() / scale;
      if (!std::isfinite(err)) throw IntegrationError("integration diverged");
      if (err <= 1.0) {
        t += h;
        v = y5;
      }
      const double factor = err > 0.0 ? 0.9 * std::pow(err, -0.2) : 5.0;
      h *= std::clamp(factor, 0.2, 5.0);
      if (t < span && h < 1e-24) throw IntegrationError("adaptive step size underflow");
    }
    h_ = h;
  }

  const Liouvillian& l_;
  const SimOptions& opts_;
  MatrixXcd step_;
  double cached_h_ = -1.0;
  double h_ = 0.0;
};

void check_options(const SimOptions& opts) {
  if (opts.levels < 2) throw DomainError("at least two levels are required");
  if (!(opts.dt > 0.0)) throw DomainError("integrator step must be positive");
  if (!(opts.steady_state_tol > 0.0) || !(opts.invariant_tol > 0.0) || !(opts.adaptive_tol > 0.0))
    throw DomainError("tolerances must be positive");
}

/// Largest frequency scale of a segment, used to bound the fixed step.
double fastest_scale(const Eigen::MatrixXcd& h) {
  double fastest = 0.0;
  for (Eigen::Index i = 0; i < h.rows(); ++i) {
    fastest = std::max(fastest, std::abs(h(i, i)));
    if (i + 1 < h.rows()) fastest = std::max(fastest, 2.0 * std::abs(h(i + 1, i)));
  }
  return fastest;
}

void require_physical(const DensityMatrix& rho, double t, double tol) {
  const auto p = physicality(rho);
  if (!p.within(tol)) {
    std::ostringstream os;
    os << "density matrix left the physical set at t = " << t << " s (trace error " << p.trace_error
       << ", hermiticity error " << p.hermiticity_error << ", min eigenvalue " << p.min_eigenvalue
       << "); reduce the step size";
    throw IntegrationError(os.str());
  }
}

}  // namespace

void validate(const PulseSequence& seq) {
  if (seq.empty()) throw DomainError("pulse sequence is empty");
  double total = 0.0;
  for (const auto& s : seq) {
    if (!(s.duration >= 0.0)) throw DomainError("segment duration must be non-negative");
    if (!(s.rabi_rate >= 0.0)) throw DomainError("segment Rabi rate must be non-negative");
    if (s.rabi_rate > 0.0 && !(s.carrier > 0.0)) throw DomainError("driven segment needs a positive carrier");
    total += s.duration;
  }
  if (!(total > 0.0)) throw DomainError("pulse sequence has zero total duration");
}

DensityMatrix basis_state(int dim, int level) {
  if (dim < 2) throw DomainError("at least two levels are required");
  if (level < 0 || level >= dim) throw DomainError("level outside the truncated space");
  DensityMatrix rho = DensityMatrix::Zero(dim, dim);
  rho(level, level) = 1.0;
  return rho;
}

double population(const DensityMatrix& rho, int level) {
  if (level < 0 || level >= rho.rows()) return 0.0;
  return rho(level, level).real();
}

Physicality physicality(const DensityMatrix& rho) {
  Physicality p;
  p.trace_error = std::abs(rho.trace() - cd(1.0, 0.0));
  p.hermiticity_error = (rho - rho.adjoint()).cwiseAbs().maxCoeff();
  const MatrixXcd herm = 0.5 * (rho + rho.adjoint());
  Eigen::SelfAdjointEigenSolver<MatrixXcd> es(herm, Eigen::EigenvaluesOnly);
  p.min_eigenvalue = es.eigenvalues().minCoeff();
  return p;
}

Eigen::MatrixXcd lowering_operator(int dim) {
  MatrixXcd b = MatrixXcd::Zero(dim, dim);
  for (int j = 1; j < dim; ++j) b(j - 1, j) = std::sqrt(static_cast<double>(j));
  return b;
}

Eigen::MatrixXcd number_operator(int dim) {
  MatrixXcd n = MatrixXcd::Zero(dim, dim);
  for (int j = 0; j < dim; ++j) n(j, j) = j;
  return n;
}

Eigen::MatrixXcd build_hamiltonian(const QubitParams& q, double carrier_hz, double rabi_rate,
                                   double phase, int dim) {
  if (dim < 2) throw DomainError("at least two levels are required");
  MatrixXcd h = MatrixXcd::Zero(dim, dim);
  for (int j = 0; j < dim; ++j) h(j, j) = rotating_level_energy(q, j, carrier_hz);
  const cd drive = 0.5 * rabi_rate * std::polar(1.0, -phase);
  for (int j = 0; j + 1 < dim; ++j) {
    h(j + 1, j) = std::sqrt(static_cast<double>(j + 1)) * drive;
    h(j, j + 1) = std::conj(h(j + 1, j));
  }
  return h;
}

DensityMatrix lindblad_rhs(const DensityMatrix& rho, const QubitParams& q, const Eigen::MatrixXcd& hamiltonian) {
  const auto dim = static_cast<int>(rho.rows());
  if (hamiltonian.rows() != dim || hamiltonian.cols() != dim || rho.cols() != dim)
    throw DomainError("density matrix and Hamiltonian dimensions differ");
  const cd i(0.0, 1.0);
  DensityMatrix out = -i * (hamiltonian * rho - rho * hamiltonian);
  auto dissipate = [&](const MatrixXcd& c) {
    const MatrixXcd cdc = c.adjoint() * c;
    out += c * rho * c.adjoint() - 0.5 * (cdc * rho + rho * cdc);
  };
  dissipate(std::sqrt(q.gamma1()) * lowering_operator(dim));
  dissipate(std::sqrt(2.0 * q.gamma_phi) * number_operator(dim));
  return out;
}

Liouvillian build_liouvillian(const QubitParams& q, const Eigen::MatrixXcd& hamiltonian) {
  const auto dim = hamiltonian.rows();
  const MatrixXcd id = MatrixXcd::Identity(dim, dim);
  const cd i(0.0, 1.0);
  Liouvillian l = -i * (kron(id, hamiltonian) - kron(hamiltonian.transpose(), id));
  auto dissipate = [&](const MatrixXcd& c) {
    const MatrixXcd cdc = c.adjoint() * c;
    l += kron(c.conjugate(), c) - 0.5 * kron(id, cdc) - 0.5 * kron(cdc.transpose(), id);
  };
  dissipate(std::sqrt(q.gamma1()) * lowering_operator(static_cast<int>(dim)));
  dissipate(std::sqrt(2.0 * q.gamma_phi) * number_operator(static_cast<int>(dim)));
  return l;
}

std::vector<TrajectoryPoint> evolve(const DensityMatrix& rho0, const QubitParams& q,
                                    const PulseSequence& seq, const SimOptions& opts,
                                    std::span<const double> sample_times) {
  check_options(opts);
  validate(seq);
  const auto dim = static_cast<int>(rho0.rows());
  if (dim < 2 || rho0.cols() != dim) throw DomainError("initial state must be a square matrix with >= 2 levels");
  if (!physicality(rho0).within(opts.invariant_tol)) throw DomainError("initial state is not a density matrix");

  std::vector<double> samples(sample_times.begin(), sample_times.end());
  std::ranges::sort(samples);

  // Frame: carrier of the first driven segment; zero-amplitude segments inherit it.
  double frame = q.f01;
  for (const auto& s : seq)
    if (s.rabi_rate > 0.0) {
      frame = s.carrier;
      break;
    }

  std::vector<TrajectoryPoint> out;
  out.push_back({0.0, rho0});
  VectorXcd v = vec(rho0);
  double t = 0.0;
  auto next_sample = samples.begin();
  while (next_sample != samples.end() && *next_sample <= 0.0) ++next_sample;

  for (const auto& seg : seq) {
    if (seg.rabi_rate > 0.0 && seg.carrier != frame) {
      // rho' = V rho V^dag with V = diag(exp(i j (w_new - w_old) t)).
      const double dw = angular(seg.carrier - frame);
      DensityMatrix rho = unvec(v, dim);
      for (int a = 0; a < dim; ++a)
        for (int b = 0; b < dim; ++b) rho(a, b) *= std::polar(1.0, (a - b) * dw * t);
      v = vec(rho);
      frame = seg.carrier;
    }
    const MatrixXcd h = build_hamiltonian(q, frame, seg.rabi_rate, seg.phase, dim);
    if (opts.method == Integrator::rk4 && opts.dt * 50.0 * fastest_scale(h) / kTwoPi > 1.0 + 1e-12) {
      std::ostringstream os;
      os << "fixed step " << opts.dt << " s exceeds 1/50 of the fastest period of a segment";
      throw DomainError(os.str());
    }
    const Liouvillian l = build_liouvillian(q, h);
    Stepper stepper(l, opts);
    const double t_end = t + seg.duration;
    while (next_sample != samples.end() && *next_sample < t_end) {
      stepper.advance(v, *next_sample - t);
      t = *next_sample;
      out.push_back({t, unvec(v, dim)});
      require_physical(out.back().rho, t, opts.invariant_tol);
      ++next_sample;
    }
    stepper.advance(v, t_end - t);
    t = t_end;
    while (next_sample != samples.end() && *next_sample <= t_end) ++next_sample;
    out.push_back({t, unvec(v, dim)});
    require_physical(out.back().rho, t, opts.invariant_tol);
  }
  return out;
}

DensityMatrix steady_state(const QubitParams& q, const DriveSpec& drive, const SimOptions& opts,
                           SteadyStateMethod method) {
  check_options(opts);
  if (!(q.gamma1() > 0.0) && !(q.gamma_phi > 0.0))
    throw DomainError("steady state needs at least one non-zero loss rate");
  if (!(q.gamma1() > 0.0) && drive.rabi_rate > 0.0)
    throw DomainError("steady state is not unique without energy relaxation");
  const int dim = opts.levels;
  const MatrixXcd h = build_hamiltonian(q, drive.frequency, drive.rabi_rate, 0.0, dim);
  const Liouvillian l = build_liouvillian(q, h);
  const double scale = l.cwiseAbs().maxCoeff();

  VectorXcd v;
  if (method == SteadyStateMethod::linear_solve) {
    MatrixXcd a = l;
    VectorXcd rhs = VectorXcd::Zero(dim * dim);
    a.row(0).setZero();
    for (int j = 0; j < dim; ++j) a(0, j + j * dim) = 1.0;
    rhs(0) = 1.0;
    Eigen::FullPivLU<MatrixXcd> lu(a);
    if (!lu.isInvertible()) throw ConvergenceError("stationary system is singular");
    v = lu.solve(rhs);
  } else {
    // Repeated squaring of the one-step propagator: t doubles every pass.
    double h_step = opts.dt;
    if (50.0 * h_step * fastest_scale(h) / kTwoPi > 1.0) h_step = kTwoPi / (50.0 * fastest_scale(h));
    MatrixXcd prop = rk4_step_matrix(l, h_step);
    v = vec(ground_state(dim));
    bool done = false;
    for (int pass = 0; pass < 80 && !done; ++pass) {
      v = prop * v;
      v /= (v(0) + [&] {
        cd tr = 0.0;
        for (int j = 1; j < dim; ++j) tr += v(j + j * dim);
        return tr;
      }());
      done = (l * v).cwiseAbs().maxCoeff() <= opts.steady_state_tol * scale;
      prop = prop * prop;
    }
    if (!done) throw ConvergenceError("long-time evolution did not reach a stationary state");
  }
  DensityMatrix rho = unvec(v, dim);
  rho = 0.5 * (rho + rho.adjoint()).eval();
  const double residual = (l * vec(rho)).cwiseAbs().maxCoeff();
  if (residual > opts.steady_state_tol * scale)
    throw ConvergenceError("steady state residual above tolerance");
  return rho;
}

std::complex<double> transmitted_amplitude(const DensityMatrix& rho_ss, const QubitParams& q,
                                           const DriveSpec& drive, double drive_phase) {
  if (!(drive.rabi_rate > 0.0))
    throw DomainError("transmission from a steady state needs a non-zero drive; use the weak-drive lineshape");
  const cd i(0.0, 1.0);
  return 1.0 + i * (q.gamma10 / drive.rabi_rate) * std::polar(1.0, -drive_phase) * rho_ss(0, 1);
}

ReadoutLine readout_line(const QubitParams& q) {
  const double g21 = 2.0 * q.gamma1();
  return {g21, 0.5 * g21 + 0.5 * q.gamma1() + q.gamma_phi};
}

std::complex<double> readout_signal(double p1, const QubitParams& q, const DriveSpec& readout) {
  if (!(p1 >= 0.0 && p1 <= 1.0)) throw DomainError("population must lie in [0, 1]");
  const auto line = readout_line(q);
  if (!(line.decoherence21 > 0.0)) return {1.0, 0.0};
  const cd denom(1.0, angular(readout.frequency - q.f12) / line.decoherence21);
  return 1.0 - p1 * (line.gamma21 / (2.0 * line.decoherence21)) / denom;
}

WindowAverage::WindowAverage(const QubitParams& q, double window, int level, const SimOptions& opts) {
  check_options(opts);
  if (!(window >= 0.0)) throw DomainError("readout window must be non-negative");
  const int dim = opts.levels;
  if (level < 0 || level >= dim) throw DomainError("level outside the truncated space");
  Eigen::RowVectorXcd row = Eigen::RowVectorXcd::Zero(dim * dim);
  row(level + level * dim) = 1.0;
  if (window == 0.0) {
    weights_ = row.transpose();
    return;
  }
  const Liouvillian l = build_liouvillian(q, build_hamiltonian(q, q.f01, 0.0, 0.0, dim));
  const auto steps = static_cast<long>(std::ceil(window / opts.dt - 1e-9));
  const double h = window / static_cast<double>(steps);
  const MatrixXcd step = rk4_step_matrix(l, h);
  // Trapezoidal time average of e_level^T P^k.
  Eigen::RowVectorXcd acc = 0.5 * row;
  for (long k = 1; k <= steps; ++k) {
    row = row * step;
    acc += (k == steps ? 0.5 : 1.0) * row;
  }
  weights_ = (acc / static_cast<double>(steps)).transpose();
}

double WindowAverage::operator()(const DensityMatrix& rho) const {
  if (rho.size() != weights_.size()) throw DomainError("density matrix dimension does not match the window");
  return (weights_.transpose() * vec(rho))(0).real();
}

TwoPulseOutcome run_two_pulse(const QubitParams& q, const PulseSegment& drive, double delay,
                              const PulseSegment& readout, const SimOptions& opts) {
  return run_two_pulse(q, drive, delay, readout, opts, WindowAverage(q, readout.duration, 1, opts));
}

TwoPulseOutcome run_two_pulse(const QubitParams& q, const PulseSegment& drive, double delay,
                              const PulseSegment& readout, const SimOptions& opts, const WindowAverage& window) {
  if (!(delay >= 0.0)) throw DomainError("delay must be non-negative");
  const int dim = opts.levels;
  TwoPulseOutcome out;
  DensityMatrix after_drive = ground_state(dim);
  DensityMatrix at_readout = after_drive;
  if (drive.duration > 0.0) {
    PulseSequence seq{drive};
    if (delay > 0.0) seq.push_back({drive.carrier, 0.0, delay, 0.0});
    const auto traj = evolve(ground_state(dim), q, seq, opts);
    after_drive = traj[1].rho;
    at_readout = traj.back().rho;
  } else if (delay > 0.0) {
    at_readout = evolve(ground_state(dim), q, {{q.f01, 0.0, delay, 0.0}}, opts).back().rho;
  }
  out.p1_after_drive = population(after_drive, 1);
  out.p2_after_drive = population(after_drive, 2);
  out.p1_at_readout = population(at_readout, 1);
  out.p1_readout_mean = std::clamp(window(at_readout), 0.0, 1.0);
  out.signal = readout_signal(out.p1_readout_mean, q, {readout.rabi_rate, readout.carrier});
  return out;
}

}  // namespace wgqed
