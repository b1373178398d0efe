#include <cmath>
#include <numbers>

#include "doctest.h"
#include "wgqed/dynamics.hpp"

using namespace wgqed;
#include "approx.hpp"

namespace {

const QubitParams kQubitFit{4.49e9, 4.337e9, from_mhz(2.20), from_mhz(0.31), from_mhz(1.28)};

SimOptions two_level() {
  SimOptions o;
  o.levels = 2;
  return o;
}

/// Slope of log|y| against t by ordinary least squares.
double log_linear_rate(const std::vector<double>& t, const std::vector<double>& y) {
  double st = 0, sy = 0, stt = 0, sty = 0;
  const double n = static_cast<double>(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double ly = std::log(std::abs(y[i]));
    st += t[i];
    sy += ly;
    stt += t[i] * t[i];
    sty += t[i] * ly;
  }
  return -(n * sty - st * sy) / (n * stt - st * st);
}

}  // namespace

TEST_CASE("Hamiltonian structure") {
  const double rabi = from_mhz(10.0);
  const auto h2 = build_hamiltonian(kQubitFit, kQubitFit.f01, rabi, 0.0, 2);
  CHECK(std::abs(h2(0, 0)) == 0.0);
  CHECK(std::abs(h2(1, 1)) < 1e-6);
  CHECK(h2(0, 1).real() == Approx(rabi / 2));
  CHECK(h2(1, 0).real() == Approx(rabi / 2));

  const auto h3 = build_hamiltonian(kQubitFit, kQubitFit.f01, rabi, 0.3, 3);
  CHECK(to_mhz(h3(2, 2).real()) == Approx(-153.0).epsilon(1e-9));
  CHECK(std::abs(h3(2, 1)) == Approx(std::sqrt(2.0) * rabi / 2).epsilon(1e-14));
  CHECK(std::arg(h3(1, 0)) == Approx(-0.3));
  CHECK((h3 - h3.adjoint()).norm() == 0.0);
  CHECK_THROWS_AS(build_hamiltonian(kQubitFit, 4.49e9, rabi, 0.0, 1), DomainError);
}

TEST_CASE("master equation right-hand side") {
  const Eigen::MatrixXcd zero = Eigen::MatrixXcd::Zero(3, 3);
  const auto d1 = lindblad_rhs(basis_state(3, 1), kQubitFit, zero);
  CHECK(d1(1, 1).real() == Approx(-kQubitFit.gamma1()).epsilon(1e-14));
  CHECK(d1(0, 0).real() == Approx(kQubitFit.gamma1()).epsilon(1e-14));

  DensityMatrix plus = DensityMatrix::Constant(2, 2, 0.5);
  const auto dp = lindblad_rhs(plus, kQubitFit, Eigen::MatrixXcd::Zero(2, 2));
  CHECK((dp(0, 1) / plus(0, 1)).real() == Approx(-decoherence_rate(kQubitFit)).epsilon(1e-14));

  CHECK(lindblad_rhs(ground_state(3), kQubitFit, zero).norm() == 0.0);

  // Liouvillian and matrix form agree.
  const auto h = build_hamiltonian(kQubitFit, 4.48e9, from_mhz(7.0), 0.4, 3);
  DensityMatrix rho = DensityMatrix::Zero(3, 3);
  rho << 0.5, std::complex<double>(0.1, 0.2), 0.05, std::complex<double>(0.1, -0.2), 0.3, 0.0, 0.05, 0.0, 0.2;
  const Eigen::VectorXcd v = Eigen::Map<Eigen::VectorXcd>(rho.data(), 9);
  const Eigen::VectorXcd lv = build_liouvillian(kQubitFit, h) * v;
  const auto direct = lindblad_rhs(rho, kQubitFit, h);
  CHECK((Eigen::Map<const Eigen::MatrixXcd>(lv.data(), 3, 3) - direct).cwiseAbs().maxCoeff() <
        1e-12 * direct.cwiseAbs().maxCoeff());
}

TEST_CASE("lossless resonant pi pulse") {
  const double rabi = from_mhz(20.0);
  const QubitParams lossless{4.49e9, 4.337e9, 0, 0, 0};
  const PulseSequence seq{{lossless.f01, rabi, std::numbers::pi / rabi, 0.0}};
  const auto traj = evolve(ground_state(2), lossless, seq, two_level());
  CHECK(population(traj.back().rho, 1) == Approx(1.0).epsilon(1e-6));

  SimOptions adaptive = two_level();
  adaptive.method = Integrator::adaptive;
  const auto traj_a = evolve(ground_state(2), lossless, seq, adaptive);
  CHECK(population(traj_a.back().rho, 1) == Approx(1.0).epsilon(1e-6));
}

TEST_CASE("free decay is exponential at Gamma10 + Gamma_l") {
  std::vector<double> times;
  for (int k = 1; k <= 40; ++k) times.push_back(k * 5e-9);
  const auto traj = evolve(basis_state(3, 1), kQubitFit, {{kQubitFit.f01, 0.0, 200e-9, 0.0}}, SimOptions{}, times);
  REQUIRE(traj.size() == 41);  // the last sample coincides with the segment end
  CHECK(to_mhz(kQubitFit.gamma1()) == Approx(2.51));
  for (const auto& p : traj) {
    const double expected = std::exp(-kQubitFit.gamma1() * p.time);
    CHECK(std::abs(population(p.rho, 1) - expected) / expected < 1e-6);
  }
}

TEST_CASE("coherence decays at the decoherence rate") {
  DensityMatrix plus = DensityMatrix::Zero(3, 3);
  plus.topLeftCorner(2, 2).setConstant(0.5);
  std::vector<double> times, coh;
  for (int k = 1; k <= 50; ++k) times.push_back(k * 4e-9);
  const auto traj = evolve(plus, kQubitFit, {{kQubitFit.f01, 0.0, 200e-9, 0.0}}, SimOptions{}, times);
  std::vector<double> t, y;
  for (const auto& p : traj) {
    t.push_back(p.time);
    y.push_back(std::abs(p.rho(0, 1)));
  }
  CHECK(log_linear_rate(t, y) == Approx(decoherence_rate(kQubitFit)).epsilon(1e-4));
}

TEST_CASE("trajectories stay physical and converge in the step size") {
  const PulseSequence seq{{4.495e9, from_mhz(22.47), 120e-9, 0.0}, {4.495e9, 0.0, 50e-9, 0.0}};
  std::vector<double> times;
  for (int k = 1; k < 34; ++k) times.push_back(k * 5e-9);
  SimOptions fine;
  fine.dt = 5e-12;
  const auto coarse_traj = evolve(ground_state(3), kQubitFit, seq, SimOptions{}, times);
  const auto fine_traj = evolve(ground_state(3), kQubitFit, seq, fine, times);
  REQUIRE(coarse_traj.size() == fine_traj.size());
  for (std::size_t i = 0; i < coarse_traj.size(); ++i) {
    CHECK(physicality(coarse_traj[i].rho).within(1e-9));
    CHECK(std::abs(population(coarse_traj[i].rho, 1) - population(fine_traj[i].rho, 1)) < 1e-6);
  }
}

TEST_CASE("segment validation and integration failures") {
  CHECK_THROWS_AS(evolve(ground_state(2), kQubitFit, {}, two_level()), DomainError);
  CHECK_THROWS_AS(evolve(ground_state(2), kQubitFit, {{4.49e9, 1e7, 0.0, 0.0}}, two_level()), DomainError);
  DensityMatrix bad = DensityMatrix::Identity(2, 2);
  CHECK_THROWS_AS(evolve(bad, kQubitFit, {{4.49e9, 1e7, 1e-9, 0.0}}, two_level()), DomainError);
  SimOptions coarse = two_level();
  coarse.dt = 1e-9;
  CHECK_THROWS_AS(evolve(ground_state(2), kQubitFit, {{4.49e9, from_mhz(100), 1e-8, 0.0}}, coarse), DomainError);
  SimOptions sloppy = two_level();
  sloppy.method = Integrator::adaptive;
  sloppy.adaptive_tol = 10.0;
  sloppy.dt = 1e-8;
  CHECK_THROWS_AS(evolve(ground_state(2), kQubitFit, {{4.49e9, from_mhz(300), 2e-6, 0.0}}, sloppy),
                  IntegrationError);
}

TEST_CASE("steady states") {
  const auto g = steady_state(kQubitFit, DriveSpec{0.0, kQubitFit.f01}, SimOptions{});
  CHECK(population(g, 0) == Approx(1.0).epsilon(1e-12));

  // Two-level Bloch solution on resonance: P1 = s / (2 (1 + s)).
  for (double omega_mhz : {0.1, 1.06, 3.0}) {
    const DriveSpec d{from_mhz(omega_mhz), kQubitFit.f01};
    const double s = saturation_parameter(kQubitFit, d);
    const auto rho = steady_state(kQubitFit, d, two_level());
    CHECK(population(rho, 1) == Approx(s / (2.0 * (1.0 + s))).epsilon(1e-9));
  }
  const auto strong = steady_state(kQubitFit, DriveSpec{from_mhz(500.0), kQubitFit.f01}, two_level());
  CHECK(population(strong, 1) == Approx(0.5).epsilon(1e-3));

  for (int levels : {2, 3}) {
    SimOptions o;
    o.levels = levels;
    const DriveSpec d{from_mhz(5.0), kQubitFit.f01 + 2e6};
    const auto direct = steady_state(kQubitFit, d, o, SteadyStateMethod::linear_solve);
    const auto evolved = steady_state(kQubitFit, d, o, SteadyStateMethod::long_time_evolution);
    CHECK((direct - evolved).cwiseAbs().maxCoeff() < 1e-7);
  }
  CHECK_THROWS_AS(steady_state(QubitParams{4.49e9, 4.3e9, 0, 0, 0}, DriveSpec{1e6, 4.49e9}, SimOptions{}),
                  DomainError);
}

TEST_CASE("two-level steady-state transmission reproduces the closed-form lineshape") {
  const SimOptions o = two_level();
  double worst = 0.0;
  for (int k = 0; k < 50; ++k) {
    const double f = kQubitFit.f01 + (-25e6 + k * 1e6);
    for (double omega_mhz : {0.05, 0.5, 1.06, 5.0, 18.95}) {
      const DriveSpec d{from_mhz(omega_mhz), f};
      const auto simulated = transmitted_amplitude(steady_state(kQubitFit, d, o), kQubitFit, d);
      const auto closed = eval_qubit_s21(kQubitFit, d);
      worst = std::max(worst, std::abs(simulated - closed) / std::abs(closed));
    }
  }
  CHECK(worst < 1e-6);

  const DriveSpec weak{from_mhz(1e-3), kQubitFit.f01};
  const auto z = transmitted_amplitude(steady_state(kQubitFit, weak, o), kQubitFit, weak);
  CHECK(z.real() == Approx(0.566075).epsilon(1e-5));
  CHECK(std::abs(z.imag()) < 1e-6);

  const QubitParams dark{4.49e9, 4.337e9, 0.0, from_mhz(1.0), from_mhz(0.5)};
  const DriveSpec d{from_mhz(2.0), 4.491e9};
  CHECK(std::abs(transmitted_amplitude(steady_state(dark, d, o), dark, d) - 1.0) < 1e-15);
  CHECK_THROWS_AS(transmitted_amplitude(steady_state(kQubitFit, d, o), kQubitFit, DriveSpec{0.0, 4.49e9}),
                  DomainError);
}

TEST_CASE("readout map") {
  const DriveSpec at_f12{0.0, kQubitFit.f12};
  CHECK(readout_signal(0.0, kQubitFit, at_f12) == std::complex<double>(1.0, 0.0));
  const auto line = readout_line(kQubitFit);
  CHECK(readout_signal(1.0, kQubitFit, at_f12).real() == Approx(1.0 - line.gamma21 / (2 * line.decoherence21)));
  CHECK(readout_signal(1.0, kQubitFit, at_f12).imag() == 0.0);
  CHECK_THROWS_AS(readout_signal(1.2, kQubitFit, at_f12), DomainError);

  const DriveSpec detuned{0.0, kQubitFit.f12 + 15e6};
  double last = -1.0;
  for (int k = 0; k <= 100; ++k) {
    const double phase = std::arg(readout_signal(k / 100.0, kQubitFit, detuned));
    if (k > 0) CHECK(phase > last);
    last = phase;
  }
}

TEST_CASE("two-pulse protocol limits") {
  const QubitParams lossless{4.49e9, 4.337e9, 0, 0, 0};
  const double rabi = from_mhz(20.0);
  const PulseSegment pi{lossless.f01, rabi, std::numbers::pi / rabi, 0.0};
  const PulseSegment ro{lossless.f12 + 15e6, 0.0, 240e-9, 0.0};
  const auto lossless_out = run_two_pulse(lossless, pi, 0.0, ro, two_level());
  CHECK(lossless_out.p1_readout_mean == Approx(1.0).epsilon(1e-6));
  CHECK(lossless_out.signal == readout_signal(lossless_out.p1_readout_mean, lossless, {0.0, ro.carrier}));

  const PulseSegment off{kQubitFit.f01, 0.0, 24e-9, 0.0};
  for (double delay : {0.0, 10e-9, 100e-9}) {
    const auto out = run_two_pulse(kQubitFit, off, delay, ro, SimOptions{});
    CHECK(out.signal == readout_signal(0.0, kQubitFit, {0.0, ro.carrier}));
  }

  // Window average of a pure exponential.
  const WindowAverage window(kQubitFit, 240e-9, 1, SimOptions{});
  const double g1 = kQubitFit.gamma1();
  CHECK(window(basis_state(3, 1)) == Approx((1.0 - std::exp(-g1 * 240e-9)) / (g1 * 240e-9)).epsilon(1e-7));
}

TEST_CASE("leakage grows as a fixed-area pulse gets shorter") {
  const QubitParams lossless{4.49e9, 4.337e9, 0, 0, 0};
  SimOptions o;
  o.dt = 1e-12;
  double previous = -1.0;
  for (double duration : {10e-9, 6e-9, 4e-9, 2.5e-9, 1.5e-9, 1e-9}) {
    const double rabi = std::numbers::pi / duration;
    const auto traj = evolve(ground_state(3), lossless, {{lossless.f01, rabi, duration, 0.0}}, o);
    const double leak = population(traj.back().rho, 2);
    CHECK(leak > previous);
    previous = leak;
  }
}
