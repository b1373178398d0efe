#pragma once

#include <cmath>
#include <complex>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "wgqed/errors.hpp"

namespace wgqed {

inline constexpr double kTwoPi = 2.0 * std::numbers::pi;
inline constexpr double kHbar = 1.054571817e-34;  // J s

/// Angular rate (rad/s) from an ordinary frequency in Hz, and back.
template <typename Scalar>
constexpr Scalar angular(Scalar hz) {
  return Scalar(2) * std::numbers::pi_v<Scalar> * hz;
}
template <typename Scalar>
constexpr Scalar to_hz(Scalar rad_per_s) {
  return rad_per_s / (Scalar(2) * std::numbers::pi_v<Scalar>);
}
/// Angular rate -> MHz, the unit every report is normalized to.
inline double to_mhz(double rad_per_s) { return to_hz(rad_per_s) * 1e-6; }
inline double from_mhz(double mhz) { return angular(mhz * 1e6); }

/// Transmon parameters. Frequencies in Hz, loss rates angular (rad/s).
template <typename Scalar>
struct BasicQubitParams {
  Scalar f01{};
  Scalar f12{};
  Scalar gamma10{};    // radiative
  Scalar gamma_l{};    // non-radiative
  Scalar gamma_phi{};  // pure dephasing

  Scalar omega01() const { return angular(f01); }
  Scalar omega12() const { return angular(f12); }
  Scalar anharmonicity() const { return angular(f12 - f01); }
  Scalar gamma1() const { return gamma10 + gamma_l; }

  template <typename Other>
  BasicQubitParams<Other> cast() const {
    return {Other(f01), Other(f12), Other(gamma10), Other(gamma_l), Other(gamma_phi)};
  }
};
using QubitParams = BasicQubitParams<double>;

/// Throws DomainError if `q` is not a transmon with non-negative rates.
void validate(const QubitParams& q);

/// Notch-resonator parameters of the circle model.
template <typename Scalar>
struct BasicResonatorParams {
  Scalar f_res{};
  Scalar q_l{};
  Scalar q_c{};
  Scalar phi{};
};
using ResonatorParams = BasicResonatorParams<double>;

void validate(const ResonatorParams& r);

/// Setup response E(f) = amplitude * exp(i (phase_offset - 2 pi f electrical_delay)).
template <typename Scalar>
struct BasicEnvironmentParams {
  Scalar amplitude{1};
  Scalar phase_offset{0};
  Scalar electrical_delay{0};
};
using EnvironmentParams = BasicEnvironmentParams<double>;

/// Quadratic flux dependence of a transition frequency around the sweet spot.
struct FluxMap {
  double quad_coeff = 0.0;  // Hz / uA^2
  double intercept = 0.0;   // Hz
};

/// A quality factor that may be infinite (lossless channel).
class QualityFactor {
 public:
  static QualityFactor finite(double q) { return QualityFactor(q); }
  static QualityFactor unbounded() { return QualityFactor(std::nullopt); }

  bool is_unbounded() const { return !value_.has_value(); }
  /// Throws DomainError when unbounded.
  double value() const;
  /// 1/Q, zero for an unbounded factor.
  double inverse() const { return value_ ? 1.0 / *value_ : 0.0; }

 private:
  explicit QualityFactor(std::optional<double> q) : value_(q) {}
  std::optional<double> value_;
};

struct QualityFactors {
  QualityFactor q_c;
  QualityFactor q_i;
};

enum class AxisKind { frequency, time, delay, amplitude, bias };

std::string_view to_string(AxisKind kind);
AxisKind axis_kind_from_string(std::string_view s);
/// Unit recorded for each axis kind in trace files.
std::string_view axis_unit(AxisKind kind);

/// Samples of a complex signal over a strictly increasing real axis.
class ComplexTrace {
 public:
  ComplexTrace() = default;
  /// Throws DomainError unless the invariants hold (>= 2 points, equal
  /// lengths, strictly increasing axis).
  ComplexTrace(AxisKind kind, std::vector<double> axis, std::vector<std::complex<double>> values);

  AxisKind kind() const { return kind_; }
  const std::vector<double>& axis() const { return axis_; }
  const std::vector<std::complex<double>>& values() const { return values_; }
  std::size_t size() const { return axis_.size(); }

  std::vector<double> real() const;
  std::vector<double> phase() const;
  std::vector<double> magnitude() const;

  friend bool operator==(const ComplexTrace&, const ComplexTrace&) = default;

 private:
  AxisKind kind_ = AxisKind::frequency;
  std::vector<double> axis_;
  std::vector<std::complex<double>> values_;
};

double dbm_to_watts(double power_dbm);

/// Mean photon number of a rectangular pulse: energy over one quantum at the carrier.
double photon_number(double power_dbm, double duration_s, double carrier_hz);

/// gamma10 = Gamma10/2 + Gamma_l/2 + Gamma_phi.
template <typename Scalar>
Scalar decoherence_rate(const BasicQubitParams<Scalar>& q) {
  return q.gamma10 / Scalar(2) + q.gamma_l / Scalar(2) + q.gamma_phi;
}

/// Rabi damping rate in the two-rate convention (Gamma_phi + Gamma10 + Gamma_l)/2.
template <typename Scalar>
Scalar rabi_decay_rate(const BasicQubitParams<Scalar>& q) {
  return (q.gamma_phi + q.gamma10 + q.gamma_l) / Scalar(2);
}

/// Pure dephasing implied by a Rabi damping rate and an energy relaxation rate.
inline double dephasing_from_rabi(double rabi_rate, double gamma1) { return 2.0 * rabi_rate - gamma1; }

/// Q_c = omega01/Gamma10, Q_i = omega01/(Gamma_l + 2 Gamma_phi).
QualityFactors rates_to_quality_factors(const QubitParams& q);

double flux_to_frequency(const FluxMap& map, double bias_ua);

struct TwoToneResult {
  double f12 = 0.0;            // Hz
  double anharmonicity = 0.0;  // rad/s, omega12 - omega01
};

/// f12 = 2 f02/2 - f01 from the sweet-spot one- and two-photon lines.
TwoToneResult omega12_from_two_tone(double f01_sweet, double f02_half_sweet);

}  // namespace wgqed
