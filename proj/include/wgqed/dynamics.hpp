#pragma once

// Truncated multilevel Lindblad simulation of a driven transmon in the frame
// rotating at the drive carrier (rotating-wave approximation).
//
// Conventions
//  * Levels |0>, |1>, ..., |dim-1>; omega_{j0} = j omega01 + j (j-1)/2 alpha.
//  * H/hbar = sum_j (omega_{j0} - j omega_d) |j><j|
//           + (Omega/2) sum_j sqrt(j+1) (e^{-i phase} |j+1><j| + h.c.)
//  * Collapse operators sqrt(Gamma10 + Gamma_l) b and sqrt(2 Gamma_phi) n.
//  * Transmission uses the e^{+i omega t} phasor convention of the closed-form
//    lineshapes so that the two-level steady state reproduces them exactly.

#include <complex>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "wgqed/core.hpp"
#include "wgqed/lineshape.hpp"

namespace wgqed {

using DensityMatrix = Eigen::MatrixXcd;
using Liouvillian = Eigen::MatrixXcd;

struct PulseSegment {
  double carrier = 0.0;    // Hz
  double rabi_rate = 0.0;  // rad/s, rectangular envelope
  double duration = 0.0;   // s
  double phase = 0.0;      // rad
};

/// Gaps are zero-amplitude segments.
using PulseSequence = std::vector<PulseSegment>;

void validate(const PulseSequence& seq);

enum class Integrator { rk4, adaptive };

struct SimOptions {
  int levels = 3;
  double dt = 1e-11;                // s, fixed-step size / adaptive initial step
  Integrator method = Integrator::rk4;
  double adaptive_tol = 1e-10;      // local error tolerance of the adaptive scheme
  double steady_state_tol = 1e-9;   // ||d rho/dt|| relative to the fastest rate
  double invariant_tol = 1e-6;      // trace / hermiticity / positivity slack
};

DensityMatrix basis_state(int dim, int level);
inline DensityMatrix ground_state(int dim) { return basis_state(dim, 0); }

double population(const DensityMatrix& rho, int level);

struct Physicality {
  double trace_error = 0.0;
  double hermiticity_error = 0.0;
  double min_eigenvalue = 0.0;

  bool within(double tol) const {
    return trace_error <= tol && hermiticity_error <= tol && min_eigenvalue >= -tol;
  }
};

Physicality physicality(const DensityMatrix& rho);

/// Truncated annihilation operator, <j-1|b|j> = sqrt(j).
Eigen::MatrixXcd lowering_operator(int dim);
Eigen::MatrixXcd number_operator(int dim);

/// Rotating-frame Hamiltonian divided by hbar (rad/s).
Eigen::MatrixXcd build_hamiltonian(const QubitParams& q, double carrier_hz, double rabi_rate,
                                   double phase, int dim);

/// d rho / dt of the master equation.
DensityMatrix lindblad_rhs(const DensityMatrix& rho, const QubitParams& q,
                           const Eigen::MatrixXcd& hamiltonian);

/// Superoperator acting on column-major vec(rho).
Liouvillian build_liouvillian(const QubitParams& q, const Eigen::MatrixXcd& hamiltonian);

struct TrajectoryPoint {
  double time = 0.0;
  DensityMatrix rho;
};

/// Integrates the master equation through `seq` starting from `rho0`.
///
/// The returned trajectory contains t = 0, every segment boundary and every
/// entry of `sample_times` (absolute times, clipped to the sequence span).
/// Zero-amplitude segments keep the frame of the previous driven segment.
/// Throws IntegrationError when a sample leaves the physical set by more than
/// `opts.invariant_tol`.
std::vector<TrajectoryPoint> evolve(const DensityMatrix& rho0, const QubitParams& q,
                                    const PulseSequence& seq, const SimOptions& opts,
                                    std::span<const double> sample_times = {});

enum class SteadyStateMethod { linear_solve, long_time_evolution };

/// Stationary state of a continuous drive (frame at the drive carrier).
DensityMatrix steady_state(const QubitParams& q, const DriveSpec& drive, const SimOptions& opts,
                           SteadyStateMethod method = SteadyStateMethod::linear_solve);

/// Coherent transmission from the 0-1 coherence of a steady state:
///   S21 = 1 + i (Gamma10 / Omega_p) e^{-i phase} rho_01.
std::complex<double> transmitted_amplitude(const DensityMatrix& rho_ss, const QubitParams& q,
                                           const DriveSpec& drive, double drive_phase = 0.0);

/// Transmission of a readout tone on the 1-2 transition given the mean
/// first-excited population during the readout window.
std::complex<double> readout_signal(double p1, const QubitParams& q, const DriveSpec& readout);

/// Radiative and total linewidths assumed for the 1-2 readout transition.
struct ReadoutLine {
  double gamma21;  // Gamma21 = 2 (Gamma10 + Gamma_l)
  double decoherence21;  // Gamma21/2 + Gamma1/2 + Gamma_phi
};
ReadoutLine readout_line(const QubitParams& q);

/// Time-averaged population of `level` during free evolution of length
/// `window`, as a linear functional of the initial density matrix.
class WindowAverage {
 public:
  WindowAverage(const QubitParams& q, double window, int level, const SimOptions& opts);
  double operator()(const DensityMatrix& rho) const;

 private:
  Eigen::VectorXcd weights_;
};

struct TwoPulseOutcome {
  std::complex<double> signal;
  double p1_after_drive = 0.0;
  double p1_at_readout = 0.0;  // after the delay
  double p1_readout_mean = 0.0;
  double p2_after_drive = 0.0;
};

/// Drive pulse from the ground state, free decay for `delay`, then readout
/// of the 1-2 transition weighted by the window-averaged P1 (no back-action).
TwoPulseOutcome run_two_pulse(const QubitParams& q, const PulseSegment& drive, double delay,
                              const PulseSegment& readout, const SimOptions& opts);

/// Same, reusing a window average built for `readout.duration`.
TwoPulseOutcome run_two_pulse(const QubitParams& q, const PulseSegment& drive, double delay,
                              const PulseSegment& readout, const SimOptions& opts, const WindowAverage& window);

}  // namespace wgqed
