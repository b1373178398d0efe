#include "wgqed/core.hpp"

#include <algorithm>

namespace wgqed {

void validate(const QubitParams& q) {
  if (!(q.f01 > 0.0) || !std::isfinite(q.f01)) throw DomainError("f01 must be positive");
  if (!(q.f12 > 0.0) || !std::isfinite(q.f12)) throw DomainError("f12 must be positive");
  if (!(q.f12 < q.f01))
    throw DomainError("f12 must lie below f01 (transmon anharmonicity is negative)");
  if (!(q.gamma10 >= 0.0) || !(q.gamma_l >= 0.0) || !(q.gamma_phi >= 0.0))
    throw DomainError("loss rates must be non-negative");
}

void validate(const ResonatorParams& r) {
  if (!(r.f_res > 0.0)) throw DomainError("resonance frequency must be positive");
  if (!(r.q_c > 0.0) || !(r.q_l > 0.0)) throw DomainError("quality factors must be positive");
  if (1.0 / r.q_l < 1.0 / r.q_c) throw DomainError("loaded Q exceeds coupling Q (negative internal loss)");
  if (!(std::abs(r.phi) < std::numbers::pi)) throw DomainError("|phi| must be below pi");
}

double QualityFactor::value() const {
  if (!value_) throw DomainError("quality factor is unbounded");
  return *value_;
}

std::string_view to_string(AxisKind kind) {
  switch (kind) {
    case AxisKind::frequency: return "frequency";
    case AxisKind::time: return "time";
    case AxisKind::delay: return "delay";
    case AxisKind::amplitude: return "amplitude";
    case AxisKind::bias: return "bias";
  }
  return "frequency";
}

AxisKind axis_kind_from_string(std::string_view s) {
  if (s == "frequency") return AxisKind::frequency;
  if (s == "time") return AxisKind::time;
  if (s == "delay") return AxisKind::delay;
  if (s == "amplitude") return AxisKind::amplitude;
  if (s == "bias") return AxisKind::bias;
  throw DomainError("unknown axis kind '" + std::string(s) + "'");
}

std::string_view axis_unit(AxisKind kind) {
  switch (kind) {
    case AxisKind::frequency: return "Hz";
    case AxisKind::time:
    case AxisKind::delay: return "s";
    case AxisKind::amplitude: return "rad/s";
    case AxisKind::bias: return "uA";
  }
  return "Hz";
}

ComplexTrace::ComplexTrace(AxisKind kind, std::vector<double> axis,
                           std::vector<std::complex<double>> values)
    : kind_(kind), axis_(std::move(axis)), values_(std::move(values)) {
  if (axis_.size() != values_.size()) throw DomainError("trace axis and values differ in length");
  if (axis_.size() < 2) throw DomainError("trace needs at least two points");
  for (std::size_t i = 1; i < axis_.size(); ++i)
    if (!(axis_[i] > axis_[i - 1])) throw DomainError("trace axis must be strictly increasing");
}

std::vector<double> ComplexTrace::real() const {
  std::vector<double> out(values_.size());
  std::ranges::transform(values_, out.begin(), [](auto z) { return z.real(); });
  return out;
}

std::vector<double> ComplexTrace::phase() const {
  std::vector<double> out(values_.size());
  std::ranges::transform(values_, out.begin(), [](auto z) { return std::arg(z); });
  return out;
}

std::vector<double> ComplexTrace::magnitude() const {
  std::vector<double> out(values_.size());
  std::ranges::transform(values_, out.begin(), [](auto z) { return std::abs(z); });
  return out;
}

double dbm_to_watts(double power_dbm) { return std::pow(10.0, (power_dbm - 30.0) / 10.0); }

double photon_number(double power_dbm, double duration_s, double carrier_hz) {
  if (!(duration_s > 0.0)) throw DomainError("pulse duration must be positive");
  if (!(carrier_hz > 0.0)) throw DomainError("carrier frequency must be positive");
  return dbm_to_watts(power_dbm) * duration_s / (kHbar * angular(carrier_hz));
}

QualityFactors rates_to_quality_factors(const QubitParams& q) {
  if (!(q.f01 > 0.0)) throw DomainError("f01 must be positive");
  const double w = q.omega01();
  const double internal = q.gamma_l + 2.0 * q.gamma_phi;
  return {q.gamma10 > 0.0 ? QualityFactor::finite(w / q.gamma10) : QualityFactor::unbounded(),
          internal > 0.0 ? QualityFactor::finite(w / internal) : QualityFactor::unbounded()};
}

double flux_to_frequency(const FluxMap& map, double bias_ua) {
  return map.quad_coeff * bias_ua * bias_ua + map.intercept;
}

TwoToneResult omega12_from_two_tone(double f01_sweet, double f02_half_sweet) {
  if (f02_half_sweet > f01_sweet)
    throw DomainError("two-photon line above the one-photon line: not a transmon");
  const double f12 = 2.0 * f02_half_sweet - f01_sweet;
  return {f12, angular(f12 - f01_sweet)};
}

}  // namespace wgqed
