#pragma once

// Closed-form steady-state transmission of a notch resonator and of a transmon
// in an open waveguide. All models are templated on the real scalar so that
// extended-precision evaluation is available for cross-checks.

#include <complex>

#include "wgqed/core.hpp"

namespace wgqed {

template <typename Scalar>
struct BasicDriveSpec {
  Scalar rabi_rate{};  // rad/s
  Scalar frequency{};  // Hz
};
using DriveSpec = BasicDriveSpec<double>;

template <typename Scalar>
std::complex<Scalar> environment_response(const BasicEnvironmentParams<Scalar>& env, Scalar freq) {
  const Scalar phase = env.phase_offset - angular(freq) * env.electrical_delay;
  return std::polar(env.amplitude, phase);
}

/// Notch-type resonator transmission
///   E(f) * (1 - (Ql/Qc) e^{i phi} / (1 + 2 i Ql (f/f_res - 1))).
template <typename Scalar>
std::complex<Scalar> eval_notch(const BasicResonatorParams<Scalar>& res,
                                const BasicEnvironmentParams<Scalar>& env, Scalar freq) {
  if (!(freq > Scalar(0))) throw DomainError("probe frequency must be positive");
  using C = std::complex<Scalar>;
  const C i(0, 1);
  const C coupling = (res.q_l / res.q_c) * std::polar(Scalar(1), res.phi);
  const C denom = Scalar(1) + Scalar(2) * i * res.q_l * (freq / res.f_res - Scalar(1));
  return environment_response(env, freq) * (Scalar(1) - coupling / denom);
}

/// Omega_p^2 / ((Gamma10 + Gamma_l) gamma10).
template <typename Scalar>
Scalar saturation_parameter(const BasicQubitParams<Scalar>& q, const BasicDriveSpec<Scalar>& drive) {
  const Scalar denom = q.gamma1() * decoherence_rate(q);
  if (!(denom > Scalar(0))) throw DomainError("saturation parameter undefined: relaxation or decoherence rate is zero");
  return drive.rabi_rate * drive.rabi_rate / denom;
}

/// Elastic transmission past a driven two-level emitter, including power
/// broadening through the saturation term.
template <typename Scalar>
std::complex<Scalar> eval_qubit_s21(const BasicQubitParams<Scalar>& q, const BasicDriveSpec<Scalar>& drive) {
  if (!(drive.frequency > Scalar(0))) throw DomainError("drive frequency must be positive");
  const Scalar gamma = decoherence_rate(q);
  if (!(gamma > Scalar(0))) throw DomainError("all loss rates are zero: transmission is singular");
  const Scalar x = angular(drive.frequency - q.f01) / gamma;
  // A purely dephasing qubit (Gamma1 = 0) has a vanishing numerator too.
  const Scalar sat = q.gamma1() > Scalar(0) ? saturation_parameter(q, drive) : Scalar(0);
  const std::complex<Scalar> num(Scalar(1), -x);
  return Scalar(1) - (q.gamma10 / (Scalar(2) * gamma)) * num / (Scalar(1) + x * x + sat);
}

/// Unsaturated limit, written as a single Lorentzian pole.
template <typename Scalar>
std::complex<Scalar> eval_weak_drive(const BasicQubitParams<Scalar>& q, Scalar freq) {
  if (!(freq > Scalar(0))) throw DomainError("probe frequency must be positive");
  const Scalar gamma = decoherence_rate(q);
  if (!(gamma > Scalar(0))) throw DomainError("all loss rates are zero: transmission is singular");
  const std::complex<Scalar> denom(Scalar(1), angular(freq - q.f01) / gamma);
  return Scalar(1) - (q.gamma10 / (Scalar(2) * gamma)) / denom;
}

/// Resonator equivalent of the weak-drive qubit response (phi = 0).
template <typename Scalar>
BasicResonatorParams<Scalar> notch_params_from_qubit(const BasicQubitParams<Scalar>& q) {
  if (!(q.gamma10 > Scalar(0))) throw DomainError("radiative rate must be positive");
  const Scalar w = q.omega01();
  const Scalar inv_qc = q.gamma10 / w;
  const Scalar inv_qi = (q.gamma_l + Scalar(2) * q.gamma_phi) / w;
  return {q.f01, Scalar(1) / (inv_qc + inv_qi), Scalar(1) / inv_qc, Scalar(0)};
}

}  // namespace wgqed
