#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "wgqed/core.hpp"
#include "wgqed/dynamics.hpp"
#include "wgqed/estimation.hpp"

namespace wgqed {

inline constexpr std::string_view kEngineVersion = "wgqed 1.0.0";

enum class Protocol { spectroscopy, flux_sweep, chevron, rabi, t1 };

std::string_view to_string(Protocol p);
/// Accepts "spectroscopy", "fluxmap" (or "flux_sweep"), "chevron", "rabi", "t1".
Protocol protocol_from_string(std::string_view s);

/// Evenly spaced grid including both ends.
std::vector<double> linear_grid(double start, double stop, int points);

struct ExperimentConfig {
  QubitParams truth{4.49e9, 4.337e9, from_mhz(2.20), from_mhz(0.31), from_mhz(1.28)};
  Protocol protocol = Protocol::spectroscopy;

  // Spectroscopy: one trace per probe drive strength.
  std::vector<double> probe_frequencies = linear_grid(4.465e9, 4.515e9, 1601);  // Hz
  std::vector<double> probe_rabi_rates{from_mhz(1.06)};                          // rad/s
  EnvironmentParams environment{};
  bool fast_lineshape = false;  // closed form instead of the master-equation steady state

  // Flux sweep.
  std::vector<double> biases = linear_grid(-500.0, 500.0, 21);  // uA
  FluxMap flux{-960.0, 4.49e9};                                  // intercept is replaced by truth.f01
  double flux_rabi_rate = from_mhz(18.95);
  std::vector<double> flux_frequencies = linear_grid(4.05e9, 4.65e9, 2401);

  // Chevron: drive Rabi rate x detuning from f01.
  std::vector<double> chevron_rabi_rates = linear_grid(0.0, from_mhz(62.5), 41);
  std::vector<double> chevron_detunings = linear_grid(-40e6, 40e6, 41);

  // Time domain.
  std::vector<double> durations = linear_grid(0.0, 400e-9, 401);  // Rabi pulse lengths
  std::vector<double> delays = linear_grid(0.0, 400e-9, 201);     // relaxation delays
  double rabi_drive_rate = from_mhz(22.47);
  std::optional<double> pi_rabi_rate;  // rad/s at the drive duration; calibrated when absent

  PulseSegment drive{4.49e9, 0.0, 24e-9, 0.0};
  PulseSegment readout{4.352e9, 0.0, 240e-9, 0.0};  // carrier defaults to f12 + 15 MHz

  double noise_sigma = 0.0;  // per quadrature
  std::uint64_t seed = 1;
  SimOptions sim{};
  RabiEnvelopeModel rabi_model = RabiEnvelopeModel::two_rate;
  int threads = 0;  // 0: hardware concurrency
};

/// Throws DomainError (or ParseError-compatible messages) on empty or
/// unordered grids and invalid physical parameters.
void validate(const ExperimentConfig& cfg);

/// Complex samples on a row x column grid (chevron, flux map).
struct ComplexMap {
  AxisKind row_kind = AxisKind::amplitude;
  AxisKind column_kind = AxisKind::frequency;
  std::vector<double> rows;
  std::vector<double> columns;
  Eigen::MatrixXcd values;  // rows x columns

  friend bool operator==(const ComplexMap&, const ComplexMap&) = default;
};

struct FluxDipPoint {
  double bias_ua = 0.0;
  std::optional<double> f01;       // one-photon dip
  std::optional<double> f02_half;  // two-photon dip
  std::vector<std::string> flags;
};

struct ExperimentRecord {
  ExperimentConfig config;
  std::string engine_version{kEngineVersion};
  std::map<std::string, ComplexTrace> traces;
  std::map<std::string, ComplexMap> maps;
  std::map<std::string, FitResult> fits;
  std::map<std::string, double> scalars;
  std::vector<FluxDipPoint> flux_dips;
  std::optional<QuadraticFit> flux_fit_f01, flux_fit_f02_half;
  std::vector<std::string> flags;
};

/// Steady-state transmission on the probe grid, one trace per probe drive,
/// named "drive_<k>". Environment response and noise are applied, then a
/// normalized copy "drive_<k>_normalized" divides by the off-resonant wings.
ExperimentRecord run_spectroscopy(const ExperimentConfig& cfg);

/// Strong-drive spectroscopy over flux bias. The one-photon dip comes from
/// the two-level response (no AC Stark shift); the two-photon dip at
/// (f01 + f12)/2 is an analytic marker. Dip-finder failures are flagged per
/// bias. Map "transmission" holds bias x frequency, "contrast" the same with
/// the bias-averaged spectrum subtracted.
ExperimentRecord run_flux_sweep(const ExperimentConfig& cfg);

struct PiCalibration {
  double rabi_rate = 0.0;      // rad/s of the first P1 maximum at zero detuning
  double max_population = 0.0; // true P1 reached there
};

/// First maximum of end-of-pulse P1 over drive strength at zero detuning.
PiCalibration calibrate_pi_pulse(const QubitParams& q, const PulseSegment& drive, const SimOptions& opts);

/// Readout phase map over drive Rabi rate x detuning ("phase"); the complex
/// signal is in map "signal". Scalars: pi_rabi_rate, pi_max_population.
ExperimentRecord run_chevron(const ExperimentConfig& cfg);

/// Readout signal vs pulse duration at the resonant drive `rabi_drive_rate`,
/// immediately followed by readout. Fit "rabi" is a damped cosine on the phase.
ExperimentRecord run_rabi(const ExperimentConfig& cfg);

/// pi pulse, free decay for each delay, then readout. Fit "t1" is an
/// exponential on the phase.
ExperimentRecord run_t1(const ExperimentConfig& cfg);

struct CharacterizationReport {
  CrossValidationTable table;
  /// "<column>.<row>" -> (estimate - truth) / truth.
  std::map<std::string, double> relative_errors;
  double weak_drive_saturation = 0.0;
  ExperimentRecord spectroscopy, flux, chevron, rabi, t1;
};

/// Weak-drive spectroscopy with resonator and qubit fits, a flux sweep,
/// chevron calibration, Rabi and relaxation sweeps, then the comparison table with a
/// truth column. Failures are re-raised with the stage name prefixed.
CharacterizationReport run_full_characterization(const ExperimentConfig& cfg);

/// Configurations A-F for the drive/readout contrast study: drive duration
/// and readout duration pairs applied to the chevron protocol.
std::map<std::string, ExperimentConfig> contrast_presets(const ExperimentConfig& base);

/// Peak-to-peak phase contrast of the zero-detuning chevron column.
double chevron_contrast(const ExperimentRecord& chevron);

}  // namespace wgqed
