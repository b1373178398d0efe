#include <random>

#include "doctest.h"
#include "wgqed/core.hpp"

using namespace wgqed;
#include "approx.hpp"

namespace {

QubitParams reference_qubit() {
  return {4.49e9, 4.337e9, from_mhz(2.20), from_mhz(0.31), from_mhz(1.28)};
}

QubitParams random_qubit(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> f(3e9, 7e9), r(0.0, 5.0), a(50e6, 400e6);
  const double f01 = f(rng);
  return {f01, f01 - a(rng), from_mhz(r(rng)), from_mhz(r(rng)), from_mhz(r(rng))};
}

}  // namespace

TEST_CASE("dBm conversion") {
  CHECK(dbm_to_watts(0.0) == Approx(1e-3).epsilon(1e-15));
  CHECK(dbm_to_watts(-30.0) == Approx(1e-6).epsilon(1e-15));
  CHECK(dbm_to_watts(-145.0) == Approx(3.16227766016838e-18).epsilon(1e-12));
}

TEST_CASE("photon number of the spectroscopy and readout pulses") {
  CHECK(photon_number(-145.0, 2e-6, 4.49e9) == Approx(2.1).epsilon(0.1 / 2.1));
  const double readout = photon_number(-125.0, 240e-9, 4.49e9);
  CHECK(readout == Approx(25.5).epsilon(0.01));
  CHECK(photon_number(-10.0, 1e-30, 4.49e9) < 1e-9);
  CHECK_THROWS_AS(photon_number(-145.0, 0.0, 4.49e9), DomainError);
  CHECK_THROWS_AS(photon_number(-145.0, 1e-6, -1.0), DomainError);
}

TEST_CASE("photon number is linear in duration and linear power") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> p(-150, -100), d(1e-9, 1e-5);
  for (int i = 0; i < 100; ++i) {
    const double power = p(rng), dur = d(rng);
    CHECK(photon_number(power, 3.0 * dur, 5e9) == Approx(3.0 * photon_number(power, dur, 5e9)).epsilon(1e-13));
    // +10log10(2) dB doubles the power.
    CHECK(photon_number(power + 10.0 * std::log10(2.0), dur, 5e9) ==
          Approx(2.0 * photon_number(power, dur, 5e9)).epsilon(1e-12));
  }
}

TEST_CASE("decoherence and Rabi decay rates") {
  const auto q = reference_qubit();
  CHECK(to_mhz(decoherence_rate(q)) == Approx(2.535).epsilon(1e-12));
  CHECK(to_mhz(rabi_decay_rate(q)) == Approx(1.895).epsilon(1e-12));
  CHECK(decoherence_rate(QubitParams{5e9, 4.8e9, 0, 0, 0}) == 0.0);
  CHECK(rabi_decay_rate(QubitParams{5e9, 4.8e9, 0, 0, 0}) == 0.0);

  // Time-domain column: Gamma1 = 2.70 MHz split arbitrarily.
  const QubitParams td{4.49e9, 4.337e9, from_mhz(2.39), from_mhz(0.31), from_mhz(1.38)};
  CHECK(to_mhz(decoherence_rate(td)) == Approx(2.73).epsilon(1e-12));
  CHECK(to_mhz(dephasing_from_rabi(from_mhz(2.04), from_mhz(2.70))) == Approx(1.38).epsilon(1e-12));
}

TEST_CASE("rate identities hold on random parameters") {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 200; ++i) {
    const auto q = random_qubit(rng);
    CHECK(decoherence_rate(q) >= 0.5 * (q.gamma10 + q.gamma_l));
    CHECK(2.0 * rabi_decay_rate(q) - (q.gamma10 + q.gamma_l) == Approx(q.gamma_phi).epsilon(1e-12).scale(1e6));
    const auto qf = rates_to_quality_factors(q);
    REQUIRE_FALSE(qf.q_c.is_unbounded());
    CHECK(q.omega01() / qf.q_c.value() == Approx(q.gamma10).epsilon(1e-14));
  }
}

TEST_CASE("quality factors") {
  QubitParams q{4.49e9, 4.337e9, from_mhz(2.26), 0.0, 0.0};
  auto qf = rates_to_quality_factors(q);
  CHECK(qf.q_c.value() == Approx(4490.0 / 2.26).epsilon(1e-12));
  CHECK(qf.q_i.is_unbounded());
  CHECK(qf.q_i.inverse() == 0.0);
  CHECK_THROWS_AS(qf.q_i.value(), DomainError);

  q = reference_qubit();
  qf = rates_to_quality_factors(q);
  CHECK(qf.q_i.value() == Approx(4490.0 / 2.87).epsilon(1e-12));
  CHECK(qf.q_i.value() == Approx(1565).epsilon(1e-3));
  CHECK(rates_to_quality_factors(QubitParams{4.49e9, 4.3e9, 0.0, 1.0, 0.0}).q_c.is_unbounded());
}

TEST_CASE("flux map") {
  const FluxMap map{-960.0, 4.49e9};
  CHECK(flux_to_frequency(map, 0.0) == 4.49e9);
  CHECK(flux_to_frequency(map, 1000.0) == Approx(3.53e9).epsilon(1e-15));
  CHECK(flux_to_frequency({-960.0, 4.4135e9}, 0.0) == 4.4135e9);
  for (double b : {1.0, 17.5, 250.0, 999.0}) CHECK(flux_to_frequency(map, b) == flux_to_frequency(map, -b));
}

TEST_CASE("omega12 from the two-photon line") {
  const auto r = omega12_from_two_tone(4.49e9, 4.4135e9);
  CHECK(r.f12 == Approx(4.337e9).epsilon(1e-15));
  CHECK(to_mhz(r.anharmonicity) == Approx(-153.0).epsilon(1e-9));
  const auto harmonic = omega12_from_two_tone(5e9, 5e9);
  CHECK(harmonic.f12 == 5e9);
  CHECK(harmonic.anharmonicity == 0.0);
  CHECK_THROWS_AS(omega12_from_two_tone(4.4e9, 4.5e9), DomainError);
}

TEST_CASE("parameter validation") {
  CHECK_NOTHROW(validate(reference_qubit()));
  CHECK_THROWS_AS(validate(QubitParams{4.49e9, 4.6e9, 1, 1, 1}), DomainError);
  CHECK_THROWS_AS(validate(QubitParams{4.49e9, 4.3e9, -1, 1, 1}), DomainError);
  CHECK_THROWS_AS(validate(ResonatorParams{4.49e9, 900.0, 800.0, 0.0}), DomainError);
  CHECK_NOTHROW(validate(ResonatorParams{4.49e9, 800.0, 900.0, 0.3}));
}

TEST_CASE("complex trace invariants") {
  CHECK_NOTHROW(ComplexTrace(AxisKind::time, {0.0, 1.0}, {1.0, 2.0}));
  CHECK_THROWS_AS(ComplexTrace(AxisKind::time, {0.0}, {1.0}), DomainError);
  CHECK_THROWS_AS(ComplexTrace(AxisKind::time, {0.0, 0.0}, {1.0, 1.0}), DomainError);
  CHECK_THROWS_AS(ComplexTrace(AxisKind::time, {0.0, 1.0}, {1.0}), DomainError);
  CHECK(axis_kind_from_string(to_string(AxisKind::delay)) == AxisKind::delay);
  CHECK(axis_kind_from_string("bias") == AxisKind::bias);
  CHECK_THROWS_AS(axis_kind_from_string("flux"), DomainError);
}
