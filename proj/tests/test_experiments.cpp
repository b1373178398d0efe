#include <cmath>

#include "doctest.h"
#include "wgqed/experiments.hpp"

using namespace wgqed;
#include "approx.hpp"

namespace {

ExperimentConfig base() {
  ExperimentConfig c;
  c.threads = 1;
  return c;
}

double min_magnitude(const ComplexTrace& t) {
  double m = INFINITY;
  for (auto z : t.values()) m = std::min(m, std::abs(z));
  return m;
}

}  // namespace

TEST_CASE("protocol names and grids") {
  CHECK(to_string(Protocol::flux_sweep) == "fluxmap");
  CHECK(protocol_from_string("fluxmap") == Protocol::flux_sweep);
  CHECK(protocol_from_string("t1") == Protocol::t1);
  CHECK_THROWS_AS(protocol_from_string("ramsey"), DomainError);
  const auto g = linear_grid(0.0, 1.0, 5);
  CHECK(g == std::vector<double>{0.0, 0.25, 0.5, 0.75, 1.0});
  CHECK_THROWS_AS(linear_grid(0.0, 1.0, 0), DomainError);
}

TEST_CASE("config validation") {
  auto c = base();
  CHECK_NOTHROW(validate(c));
  c.probe_frequencies = {};
  CHECK_THROWS_AS(validate(c), DomainError);
  c = base();
  c.delays = {0.0, 2e-9, 1e-9};
  CHECK_THROWS_AS(validate(c), DomainError);
  c = base();
  c.truth.f12 = 4.6e9;
  CHECK_THROWS_AS(validate(c), DomainError);
  c = base();
  c.noise_sigma = -1.0;
  CHECK_THROWS_AS(validate(c), DomainError);
}

TEST_CASE("weak-drive spectroscopy dip") {
  auto c = base();
  c.fast_lineshape = true;
  const auto rec = run_spectroscopy(c);
  REQUIRE(rec.traces.contains("drive_0"));
  REQUIRE(rec.traces.contains("drive_0_normalized"));
  const auto& t = rec.traces.at("drive_0");
  CHECK(t.size() == 1601);
  CHECK(min_magnitude(t) == Approx(0.6312).epsilon(1e-3));
  CHECK(rec.scalars.at("saturation_0") == Approx(0.1766).epsilon(1e-3));
}

TEST_CASE("master-equation steady state matches the closed form at weak drive") {
  auto c = base();
  c.probe_frequencies = linear_grid(4.48e9, 4.50e9, 41);
  const auto slow = run_spectroscopy(c);
  c.fast_lineshape = true;
  const auto fast = run_spectroscopy(c);
  const auto& a = slow.traces.at("drive_0").values();
  const auto& b = fast.traces.at("drive_0").values();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) < 2e-3);
}

TEST_CASE("a qubit without radiative coupling leaves the line flat") {
  auto c = base();
  c.fast_lineshape = true;
  c.truth.gamma10 = 0.0;
  const auto rec = run_spectroscopy(c);
  for (auto z : rec.traces.at("drive_0").values()) CHECK(std::abs(z - 1.0) < 1e-15);
}

TEST_CASE("dip depth shrinks monotonically with probe drive") {
  auto c = base();
  c.fast_lineshape = true;
  c.probe_rabi_rates = {from_mhz(0.5), from_mhz(1.06), from_mhz(3.0), from_mhz(10.0), from_mhz(18.95)};
  const auto rec = run_spectroscopy(c);
  double previous = 0.0;
  for (std::size_t k = 0; k < c.probe_rabi_rates.size(); ++k) {
    const double m = min_magnitude(rec.traces.at("drive_" + std::to_string(k)));
    CHECK(m > previous);
    previous = m;
  }
}

TEST_CASE("noise is reproducible under a fixed seed") {
  auto c = base();
  c.fast_lineshape = true;
  c.noise_sigma = 0.005;
  const auto a = run_spectroscopy(c);
  const auto b = run_spectroscopy(c);
  CHECK(a.traces.at("drive_0") == b.traces.at("drive_0"));
  c.seed = 2;
  const auto d = run_spectroscopy(c);
  CHECK_FALSE(a.traces.at("drive_0") == d.traces.at("drive_0"));
}

TEST_CASE("flux sweep recovers the curvature and both sweet-spot lines") {
  const auto rec = run_flux_sweep(base());
  REQUIRE(rec.flux_fit_f01);
  REQUIRE(rec.flux_fit_f02_half);
  CHECK(rec.flux_fit_f01->map.quad_coeff == Approx(-960.0).epsilon(0.05));
  CHECK(rec.flux_fit_f02_half->map.quad_coeff == Approx(-960.0).epsilon(0.05));
  CHECK(std::abs(rec.flux_fit_f01->map.intercept - 4.49e9) < 100e3);
  CHECK(std::abs(rec.flux_fit_f02_half->map.intercept - 4.4135e9) < 100e3);
  CHECK(std::abs(rec.scalars.at("f12") - 4.337e9) < 300e3);
  CHECK(rec.scalars.at("anharmonicity_hz") == Approx(-153e6).epsilon(2e-3));
  CHECK(rec.flux_dips.size() == 21);
  const auto& m = rec.maps.at("transmission");
  CHECK(m.values.rows() == 21);
  CHECK(m.values.cols() == 2401);
}

TEST_CASE("pi-pulse calibration at 24 ns") {
  const auto c = base();
  const auto cal = calibrate_pi_pulse(c.truth, c.drive, c.sim);
  CHECK(to_mhz(cal.rabi_rate) == Approx(21.6).epsilon(0.02));
  CHECK(cal.max_population > 0.75);
  CHECK(cal.max_population < 0.9);
}

TEST_CASE("two-level chevron is symmetric in detuning") {
  auto c = base();
  c.sim.levels = 2;
  c.chevron_rabi_rates = linear_grid(0.0, from_mhz(40.0), 5);
  c.chevron_detunings = linear_grid(-20e6, 20e6, 9);
  c.pi_rabi_rate = from_mhz(20.0);
  const auto rec = run_chevron(c);
  const auto& m = rec.maps.at("phase");
  REQUIRE(m.values.rows() == 5);
  REQUIRE(m.values.cols() == 9);
  for (Eigen::Index r = 0; r < 5; ++r)
    for (Eigen::Index k = 0; k < 4; ++k) CHECK(std::abs(m.values(r, k) - m.values(r, 8 - k)) < 1e-9);
}

TEST_CASE("chevron contrast ordering across drive and readout durations") {
  auto b = base();
  b.chevron_rabi_rates = linear_grid(0.0, from_mhz(62.5), 26);
  b.chevron_detunings = {0.0};
  const auto presets = contrast_presets(b);
  REQUIRE(presets.size() == 6);
  CHECK(presets.at("D").drive.duration == Approx(60e-9));
  CHECK(presets.at("E").readout.duration == Approx(600e-9));
  const double a = chevron_contrast(run_chevron(presets.at("A")));
  const double cc = chevron_contrast(run_chevron(presets.at("C")));
  const double e = chevron_contrast(run_chevron(presets.at("E")));
  CHECK(e < a);
  CHECK(a < cc);
}

TEST_CASE("Rabi oscillation at 22.47 MHz") {
  const auto rec = run_rabi(base());
  const auto& fit = rec.fits.at("rabi");
  CHECK(fit.value("f_osc") == Approx(22.47e6).epsilon(0.02));
  // Regression value from the simulator's own envelope.
  CHECK(fit.value("T_decay") == Approx(62.48e-9).epsilon(5e-3));
  CHECK(rec.traces.at("rabi").kind() == AxisKind::time);
}

TEST_CASE("relaxation sweep returns T1 = 1/(Gamma10 + Gamma_l)") {
  auto c = base();
  const auto rec = run_t1(c);
  CHECK(rec.fits.at("t1").value("T1") == Approx(1.0 / c.truth.gamma1()).epsilon(0.02));
  c.truth.gamma10 = from_mhz(2.39);  // Gamma1 / 2 pi = 2.70 MHz
  const auto fast = run_t1(c);
  CHECK(fast.fits.at("t1").value("T1") == Approx(58.9e-9).epsilon(0.02));
  CHECK(fast.traces.at("t1").kind() == AxisKind::delay);
}

TEST_CASE("failures carry the stage name") {
  auto c = base();
  c.fast_lineshape = true;
  c.truth.gamma10 = 0.0;
  try {
    run_full_characterization(c);
    FAIL("expected a signal error");
  } catch (const SignalError& e) {
    CHECK(std::string(e.what()).rfind("resonator fit: ", 0) == 0);
  }
}
