#pragma once

#include <complex>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "wgqed/core.hpp"
#include "wgqed/lineshape.hpp"

namespace wgqed {

struct ParameterSpec {
  std::string name;
  std::string unit;
  double scale = 1.0;  // typical magnitude: sets finite-difference steps and tie-break norms
};

/// Outcome of a least-squares fit. Uncertainties are one-sigma values from the
/// linearized covariance scaled by the residual variance; an infinite entry
/// marks a parameter the data cannot resolve.
struct FitResult {
  std::vector<ParameterSpec> specs;
  Eigen::VectorXd parameters;
  Eigen::VectorXd uncertainties;
  Eigen::MatrixXd covariance;
  double residual_norm = 0.0;
  int iterations = 0;
  bool converged = false;
  bool degenerate = false;
  std::vector<double> cost_history;
  std::map<std::string, double> derived;
  std::vector<std::string> notes;

  std::optional<Eigen::Index> index_of(std::string_view name) const;
  /// Throws StructuralError for unknown names.
  double value(std::string_view name) const;
  double sigma(std::string_view name) const;
  bool has(std::string_view name) const { return index_of(name).has_value() || derived.contains(std::string(name)); }
};

struct FitOptions {
  int max_iterations = 300;
  double gradient_tol = 1e-12;  // cosine between residual and Jacobian columns
  double step_tol = 1e-13;      // relative parameter change
  double initial_damping = 1e-3;
  bool allow_degenerate = false;
  double degeneracy_rcond = 1e-12;  // reciprocal condition of the scaled normal matrix
};

using RealModel = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;
using ComplexModel = std::function<Eigen::VectorXcd(const Eigen::VectorXd&)>;

/// Levenberg-Marquardt on real residuals `model(p) - data` with Marquardt
/// diagonal scaling and a central-difference Jacobian. Model evaluations that
/// throw or return non-finite values reject the trial step.
///
/// Throws ConditioningError when a Jacobian column vanishes, or when the final
/// normal matrix is singular and `allow_degenerate` is off. Hitting the
/// iteration cap returns the best point with `converged == false`.
FitResult fit_damped_least_squares(const RealModel& model, const Eigen::VectorXd& data,
                                   const Eigen::VectorXd& init, const std::vector<ParameterSpec>& specs,
                                   const FitOptions& opts = {});

/// Complex data: real and imaginary residuals are stacked.
FitResult fit_damped_least_squares(const ComplexModel& model, const Eigen::VectorXcd& data,
                                   const Eigen::VectorXd& init, const std::vector<ParameterSpec>& specs,
                                   const FitOptions& opts = {});

/// Runs the fit from `init` and from `extra_starts` deterministic perturbations
/// of it. Lowest residual wins; near-ties go to the smallest scaled parameter norm.
FitResult fit_multistart(const ComplexModel& model, const Eigen::VectorXcd& data, const Eigen::VectorXd& init,
                         const std::vector<ParameterSpec>& specs, const FitOptions& opts = {},
                         int extra_starts = 5, double spread = 0.2, std::uint64_t seed = 1);

struct Circle {
  std::complex<double> center;
  double radius = 0.0;
  double rms_residual = 0.0;
};

/// Algebraic (Kasa) circle fit.
Circle fit_circle(std::span<const std::complex<double>> points);

/// Notch-resonator fit: delay removal, circle fit, phase-angle fit, then
/// full refinement of the circle model. Parameters: f_res, q_l, q_c, phi,
/// amplitude, phase_offset, electrical_delay. Derived: gamma10 = omega/q_c and
/// decoherence10 = omega/(2 q_l), both rad/s.
FitResult fit_resonator(const ComplexTrace& trace, const FitOptions& opts = {});

ResonatorParams resonator_params(const FitResult& fit);
EnvironmentParams environment_params(const FitResult& fit);

/// One spectroscopy trace for the qubit-model fit.
struct QubitTrace {
  ComplexTrace trace;
  std::optional<double> applied_rabi;  // rad/s; nullopt: drive strength unknown and fitted
};

struct QubitFitOptions {
  bool fit_rabi = false;        // float the drive strength even when it is known
  bool fit_environment = true;  // refine per-trace amplitude, phase and delay
  FitOptions lsq{};
};

/// Direct fit of the saturable qubit lineshape after off-resonant
/// normalization. Several traces share the qubit parameters (f01, gamma10,
/// gamma_l, gamma_phi) and the drive strength if it is fitted.
/// Derived: decoherence10, gamma1, rabi_decay, saturation (first trace),
/// rabi_used (first trace, if known).
FitResult fit_qubit_model(std::span<const QubitTrace> traces, const QubitFitOptions& opts = {});
FitResult fit_qubit_model(const ComplexTrace& trace, std::optional<double> applied_rabi,
                          const QubitFitOptions& opts = {});

/// a exp(-t/T) cos(2 pi f t + phase) + offset. Parameters: amplitude,
/// T_decay, f_osc, phase, offset (T_decay may be +inf for an undamped signal).
FitResult fit_damped_cosine(std::span<const double> t, std::span<const double> y, const FitOptions& opts = {});

/// a exp(-t/T1) + offset. Parameters: amplitude, T1, offset.
FitResult fit_exponential(std::span<const double> t, std::span<const double> y, const FitOptions& opts = {});

struct FluxPoint {
  double bias_ua = 0.0;
  double frequency = 0.0;  // Hz
};

struct QuadraticFit {
  FluxMap map;
  double linear_coeff = 0.0;  // Hz/uA, zero when symmetry is enforced
  Eigen::Vector3d uncertainties = Eigen::Vector3d::Zero();  // quad, linear, intercept
  double rms_residual = 0.0;
};

/// Least-squares quadratic in bias; `symmetric` removes the linear term.
QuadraticFit fit_quadratic(std::span<const FluxPoint> points, bool symmetric = false);

/// How a Rabi damping rate maps onto relaxation and dephasing.
///  two_rate:     Gamma_Rabi = (Gamma1 + Gamma_phi)/2
///  driven_bloch: Gamma_Rabi = 3 Gamma1/4 + Gamma_phi/2 (strong resonant drive)
enum class RabiEnvelopeModel { two_rate, driven_bloch };

/// One column of the loss-rate comparison. Rates are angular; empty means "n.a.".
struct LossRateColumn {
  std::optional<double> gamma10, gamma_l, gamma_phi, gamma1, decoherence, rabi_decay;
  std::optional<double> rabi_used, rabi_fit;
};

struct CrossValidationTable {
  LossRateColumn resonator, qubit, time_domain;
  std::optional<LossRateColumn> truth;
  RabiEnvelopeModel rabi_model = RabiEnvelopeModel::two_rate;
};

/// Spectroscopic and pulsed estimates side by side. Every fit must be present
/// (StructuralError otherwise). The Rabi fit must carry T_decay and f_osc, the
/// relaxation fit T1.
CrossValidationTable cross_validation_table(const FitResult* resonator, const FitResult* qubit,
                                            const FitResult* rabi, const FitResult* t1,
                                            RabiEnvelopeModel model = RabiEnvelopeModel::two_rate);

/// Time-domain column from T1 and the Rabi envelope decay time (both s).
/// Throws StructuralError for non-finite or non-positive times.
LossRateColumn time_domain_column(double t1, double t_rabi, double rabi_used,
                                  RabiEnvelopeModel model = RabiEnvelopeModel::two_rate);

/// Truth column in the same layout, for synthetic runs.
LossRateColumn truth_column(const QubitParams& q, double rabi_used,
                            RabiEnvelopeModel model = RabiEnvelopeModel::two_rate);

double rabi_envelope_rate(const QubitParams& q, RabiEnvelopeModel model);

/// Removes the linear phase fitted on the outer tenth of each side and divides
/// by the mean of those points, so the off-resonant level becomes 1.
ComplexTrace normalize_off_resonant(const ComplexTrace& trace);

/// Robust per-component noise estimate from first differences (MAD).
double noise_floor(std::span<const std::complex<double>> values);

}  // namespace wgqed
