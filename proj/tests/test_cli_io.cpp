#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "wgqed/cli_io.hpp"

using namespace wgqed;
#include "approx.hpp"
namespace fs = std::filesystem;

namespace {

const fs::path kSource = WGQED_SOURCE_DIR;

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("wgqed_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

int run(std::vector<std::string> args) {
  args.insert(args.begin(), "wgqed");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli_dispatch(static_cast<int>(argv.size()), argv.data());
}

std::vector<std::vector<std::string>> cells(const std::string& table) {
  std::vector<std::vector<std::string>> out;
  std::istringstream in(table);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line.front() == '#') continue;
    std::vector<std::string> row;
    std::size_t start = 0;
    while (true) {
      const auto bar = line.find(" | ", start);
      auto cell = line.substr(start, bar == std::string::npos ? std::string::npos : bar - start);
      while (!cell.empty() && cell.back() == ' ') cell.pop_back();
      row.push_back(cell);
      if (bar == std::string::npos) break;
      start = bar + 3;
    }
    out.push_back(row);
  }
  return out;
}

ParseError parse_error_of(const std::string& text) {
  try {
    parse_run_config_text(text);
  } catch (const ParseError& e) {
    return e;
  }
  FAIL("expected a parse error");
  return ParseError("", "");
}

}  // namespace

TEST_CASE("minimal config applies defaults") {
  const auto rc = parse_run_config_text(R"({"qubit": {"f01": "5 GHz", "f12": "4.8 GHz", "gamma10": "1 MHz"}})");
  const auto& c = rc.experiment;
  CHECK(c.truth.f01 == 5e9);
  CHECK(c.truth.gamma10 == Approx(from_mhz(1.0)));
  CHECK(c.drive.duration == Approx(24e-9));
  CHECK(c.drive.carrier == 5e9);
  CHECK(c.readout.duration == Approx(240e-9));
  CHECK(c.readout.carrier == Approx(4.815e9));
  CHECK(c.probe_rabi_rates == std::vector<double>{from_mhz(1.06)});
  CHECK(c.protocol == Protocol::spectroscopy);
  CHECK(c.flux.intercept == 5e9);
  auto fast = c;
  fast.fast_lineshape = true;
  CHECK_NOTHROW(run_spectroscopy(fast));
}

TEST_CASE("transmon invariant is enforced") {
  const auto e = parse_error_of(R"({"qubit": {"f01": "4.3 GHz", "f12": "4.5 GHz"}})");
  CHECK(e.location == "qubit");
  CHECK(std::string(e.what()).find("f12 must lie below f01") != std::string::npos);
}

TEST_CASE("parse errors name the offending key") {
  CHECK(parse_error_of(R"({"spectroscopy": {"frequncies": [1, 2]}})").location == "spectroscopy.frequncies");
  CHECK(parse_error_of(R"({"colour": 1})").location == "colour");
  const auto unit = parse_error_of(R"({"qubit": {"f01": "4.49 ns"}})");
  CHECK(unit.location == "qubit.f01");
  CHECK(std::string(unit.what()).find("unit violation") != std::string::npos);
  CHECK(parse_error_of(R"({"chevron": {"detunings": ["1 MHz", "2 MHz", "2 MHz"]}})").location ==
        "chevron.detunings[2]");
  CHECK(parse_error_of(R"({"rabi": {"durations": {"start": "10 ns", "stop": "0 ns", "points": 5}}})").location ==
        "rabi.durations");
  CHECK(parse_error_of(R"({"drive": {"duration": "-3 ns"}})").location == "drive.duration");
  CHECK(parse_error_of(R"({"seed": 1.5})").location == "seed");
  CHECK(parse_error_of(R"({"format_version": 2})").location == "format_version");
  CHECK(parse_error_of(R"({"protocol": "ramsey"})").location == "protocol");
  CHECK(parse_error_of(R"({"qubit": {"f01": "4.49 GHz" )").location == "<config>");
  CHECK_THROWS_AS(parse_run_config(kSource / "configs" / "missing.cfg"), IoError);
}

TEST_CASE("units convert to SI and angular rates") {
  const auto c = parse_run_config_text(R"({
    "qubit": {"f01": 4.49e9, "f12": "4337 MHz", "gamma10": 2.2, "gamma_l": "310 kHz", "gamma_phi": "8042477.19 rad/s"},
    "drive": {"duration": "0.024 us", "phase": "90 deg"},
    "flux": {"biases": {"start": "-0.5 mA", "stop": "0.5 mA", "points": 3}, "curvature": -960}
  })").experiment;
  CHECK(c.truth.f12 == Approx(4.337e9));
  CHECK(c.truth.gamma10 == Approx(from_mhz(2.2)));
  CHECK(c.truth.gamma_l == Approx(from_mhz(0.31)));
  CHECK(c.truth.gamma_phi == Approx(from_mhz(1.28)).epsilon(1e-9));
  CHECK(c.drive.duration == Approx(24e-9));
  CHECK(c.drive.phase == Approx(std::numbers::pi / 2));
  CHECK(c.biases == std::vector<double>{-500.0, 0.0, 500.0});
  CHECK(c.flux.quad_coeff == -960.0);
}

TEST_CASE("shipped table config carries the ground truth") {
  const auto rc = parse_run_config(kSource / "configs" / "paper_table1.cfg");
  const auto& c = rc.experiment;
  CHECK(c.truth.f01 == Approx(4.49e9));
  CHECK(c.truth.f12 == Approx(4.337e9));
  CHECK(to_mhz(c.truth.gamma10) == Approx(2.20));
  CHECK(to_mhz(c.truth.gamma_l) == Approx(0.31));
  CHECK(to_mhz(c.truth.gamma_phi) == Approx(1.28));
  CHECK(c.noise_sigma == 0.005);
  CHECK(to_mhz(c.probe_rabi_rates.at(0)) == Approx(1.06));
  CHECK(to_mhz(c.rabi_drive_rate) == Approx(22.47));
  CHECK(c.drive.duration == Approx(24e-9));
  CHECK(c.readout.duration == Approx(240e-9));
  CHECK(c.threads == 1);
}

TEST_CASE("config rendering round trips") {
  auto c = parse_run_config(kSource / "configs" / "paper_table1.cfg").experiment;
  c.pi_rabi_rate = from_mhz(21.6);
  c.chevron_detunings = {-3e6, 0.5e6, 7e6};
  const auto text = config_to_json(c);
  const auto back = parse_run_config_text(text).experiment;
  CHECK(config_to_json(back) == text);
  CHECK(back.truth.gamma_phi == c.truth.gamma_phi);
  CHECK(back.probe_frequencies == c.probe_frequencies);
  CHECK(back.readout.carrier == c.readout.carrier);
}

TEST_CASE("trace files round trip exactly") {
  const ComplexTrace two(AxisKind::time, {0.0, 1e-9}, {{1.0, -0.5}, {0.25, 1e-300}});
  CHECK(parse_trace(format_trace(two)) == two);

  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int k = 0; k < 200; ++k) {
    const int n = 2 + static_cast<int>(rng() % 50);
    std::vector<double> axis;
    std::vector<std::complex<double>> v;
    double x = u(rng) * 1e9;
    for (int i = 0; i < n; ++i) {
      x += std::abs(u(rng)) * std::pow(10.0, static_cast<int>(rng() % 20) - 10) + 1e-3;
      axis.push_back(x);
      v.emplace_back(u(rng) * std::pow(10.0, static_cast<int>(rng() % 40) - 20), u(rng));
    }
    const ComplexTrace t(static_cast<AxisKind>(rng() % 5), axis, v);
    CHECK(parse_trace(format_trace(t)) == t);
  }
}

TEST_CASE("a 1601-point trace takes 1602 lines") {
  const auto dir = scratch("lines");
  std::vector<double> f;
  std::vector<std::complex<double>> v;
  for (int i = 0; i < 1601; ++i) {
    f.push_back(4.465e9 + i * 31250.0);
    v.emplace_back(1.0, 0.0);
  }
  write_trace(dir / "t.txt", ComplexTrace(AxisKind::frequency, f, v));
  const auto text = slurp(dir / "t.txt");
  CHECK(std::count(text.begin(), text.end(), '\n') == 1602);
  CHECK(text.rfind("# frequency Hz 1601", 0) == 0);
  CHECK(read_trace(dir / "t.txt").size() == 1601);
}

TEST_CASE("malformed trace rows report the line") {
  const std::string header = "# frequency Hz 3 format_version=1\n";
  auto expect_line = [](const std::string& text, const std::string& where) {
    try {
      parse_trace(text, "f");
      FAIL("expected a parse error");
    } catch (const ParseError& e) {
      CHECK(e.location == where);
    }
  };
  expect_line(header + "1 0 0\n2 0 x\n3 0 0\n", "f:3");
  expect_line(header + "1 0 0\n2 0 0 9\n3 0 0\n", "f:3");
  expect_line(header + "1 0 0\n1 0 0\n3 0 0\n", "f:3");
  expect_line(header + "1 0 0\n2 0 0\n", "f:3");
  expect_line("# frequency s 2\n1 0 0\n2 0 0\n", "f:1");
  expect_line("# colour Hz 2\n1 0 0\n2 0 0\n", "f:1");
  expect_line("", "f:1");
  CHECK_THROWS_AS(read_trace("/nonexistent/trace.txt"), IoError);
}

TEST_CASE("maps round trip through an index file") {
  const auto dir = scratch("map");
  ComplexMap m;
  m.row_kind = AxisKind::amplitude;
  m.column_kind = AxisKind::frequency;
  m.rows = {0.0, 1e7, 2e7};
  m.columns = {-1e6, 0.0, 1e6, 2e6};
  m.values = Eigen::MatrixXcd::Random(3, 4);
  write_map(dir / "m", m);
  CHECK(read_map(dir / "m") == m);
  CHECK(fs::exists(dir / "m" / "index.txt"));
}

TEST_CASE("comparison table reproduces the published grid") {
  const auto rc = parse_run_config(kSource / "configs" / "table1_parity.cfg");
  REQUIRE(rc.fitted);
  const auto grid = cells(format_table(table_from_fitted(*rc.fitted, rc.experiment.rabi_model)));
  const std::vector<std::vector<std::string>> expected{
      {"2.26", "2.20", "n.a."}, {"n.a.", "0.31", "n.a."}, {"n.a.", "1.28", "1.38"}, {"n.a.", "2.50", "2.70"},
      {"2.62", "2.54", "2.73"}, {"n.a.", "1.89", "2.04"}, {"1.06", "1.06 / 0.29", "22.47"}};
  REQUIRE(grid.size() == expected.size() + 1);
  CHECK(grid[0].size() == 4);
  for (std::size_t r = 0; r < expected.size(); ++r) {
    REQUIRE(grid[r + 1].size() == 4);
    for (std::size_t c = 0; c < 3; ++c) CHECK(grid[r + 1][c + 1] == expected[r][c]);
  }
}

TEST_CASE("spectroscopy-only values leave the time-domain column empty") {
  FittedValues v;
  v.resonator_gamma10 = from_mhz(2.26);
  v.qubit_gamma10 = from_mhz(2.2);
  v.qubit_gamma_l = from_mhz(0.31);
  v.qubit_gamma_phi = from_mhz(1.28);
  const auto grid = cells(format_table(table_from_fitted(v)));
  for (std::size_t r = 1; r < grid.size(); ++r) CHECK(grid[r][3] == "n.a.");
}

TEST_CASE("digests") {
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_CASE("simulate writes a manifest and identical reruns are byte-identical") {
  const auto a = scratch("sim_a"), b = scratch("sim_b");
  CHECK(run({"simulate", "spectroscopy", "--fast-lineshape", "--noise-sigma", "0.01", "--seed", "5", "--out",
             (a / "run").string()}) == 0);
  CHECK(run({"simulate", "spectroscopy", "--fast-lineshape", "--noise-sigma", "0.01", "--seed", "5", "--out",
             (b / "run").string()}) == 0);
  const auto manifest = slurp(a / "run" / "manifest.json");
  CHECK(manifest.find("\"seed\": 5") != std::string::npos);
  CHECK(manifest.find("\"exit_status\": 0") != std::string::npos);
  std::size_t files = 0;
  for (const auto& entry : fs::recursive_directory_iterator(a / "run")) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), a / "run");
    if (rel == "manifest.json") continue;
    ++files;
    CHECK(slurp(entry.path()) == slurp(b / "run" / rel));
    CHECK(manifest.find(file_digest(entry.path())) != std::string::npos);
  }
  CHECK(files >= 4);
  CHECK(fs::exists(a / "run" / "fig1a.dat"));
  CHECK(read_trace(a / "run" / "traces" / "drive_0.txt").size() == 1601);
}

TEST_CASE("chevron record is loadable as an amplitude by detuning matrix") {
  const auto dir = scratch("chev");
  const auto cfg = dir / "c.cfg";
  spit(cfg, R"({"chevron": {"rabi": {"start": "0 MHz", "stop": "40 MHz", "points": 5},
                            "detunings": {"start": "-10 MHz", "stop": "10 MHz", "points": 7}},
               "t1": {"pi_rabi": "21.6 MHz"}, "threads": 1})");
  CHECK(run({"simulate", "chevron", "--config", cfg.string(), "--out", (dir / "out").string()}) == 0);
  const auto m = read_map(dir / "out" / "maps" / "phase");
  CHECK(m.values.rows() == 5);
  CHECK(m.values.cols() == 7);
  CHECK(m.row_kind == AxisKind::amplitude);
  CHECK(fs::exists(dir / "out" / "fig2.dat"));
}

TEST_CASE("exit statuses") {
  const auto dir = scratch("status");
  CHECK(run({"bogus"}) == 1);
  CHECK(run({}) == 1);
  CHECK(run({"simulate", "ramsey", "--out", (dir / "x").string()}) == 1);

  CHECK(run({"characterize", "--config", (dir / "missing.cfg").string(), "--out", (dir / "io").string()}) == 3);
  CHECK(slurp(dir / "io" / "manifest.json").find("\"exit_status\": 3") != std::string::npos);

  spit(dir / "bad.cfg", R"({"qubit": {"f01": "4.3 GHz", "f12": "4.5 GHz"}})");
  CHECK(run({"characterize", "--config", (dir / "bad.cfg").string(), "--out", (dir / "bad").string()}) == 1);
  CHECK(slurp(dir / "bad" / "manifest.json").find("f12 must lie below f01") != std::string::npos);

  std::vector<double> f;
  std::vector<std::complex<double>> flat;
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 0.005);
  for (int i = 0; i < 401; ++i) {
    f.push_back(4.4e9 + i * 0.5e6);
    flat.emplace_back(0.9 + n(rng), n(rng));
  }
  write_trace(dir / "flat.txt", ComplexTrace(AxisKind::frequency, f, flat));
  spit(dir / "fit.cfg", R"({"fit": {"trace": "flat.txt", "applied_rabi": "1.06 MHz"}})");
  CHECK(run({"fit", "qubit", "--config", (dir / "fit.cfg").string(), "--out", (dir / "nodip").string()}) == 2);
  CHECK(fs::exists(dir / "nodip" / "manifest.json"));
  CHECK(run({"report", "--config", (dir / "fit.cfg").string(), "--out", (dir / "nofitted").string()}) == 1);
}

TEST_CASE("fit subcommands") {
  const auto dir = scratch("fit");
  const QubitParams q{4.49e9, 4.337e9, from_mhz(2.20), from_mhz(0.31), from_mhz(1.28)};
  std::vector<double> f;
  std::vector<std::complex<double>> z;
  for (int i = 0; i < 801; ++i) {
    f.push_back(4.465e9 + i * 62500.0);
    z.push_back(eval_qubit_s21(q, DriveSpec{from_mhz(1.06), f.back()}));
  }
  write_trace(dir / "s.txt", ComplexTrace(AxisKind::frequency, f, z));
  CHECK(run({"fit", "resonator", "--input", (dir / "s.txt").string(), "--out", (dir / "res").string()}) == 0);
  CHECK(slurp(dir / "res" / "fit.json").find("\"q_c\"") != std::string::npos);
  spit(dir / "q.cfg", R"({"fit": {"trace": "s.txt", "applied_rabi": "1.06 MHz"}})");
  CHECK(run({"fit", "qubit", "--config", (dir / "q.cfg").string(), "--out", (dir / "qub").string()}) == 0);
  CHECK(slurp(dir / "qub" / "fit.json").find("\"gamma_phi\"") != std::string::npos);

  std::string pts = "# bias_ua frequency_hz\n";
  for (int b = -500; b <= 500; b += 100) pts += std::to_string(b) + " " + std::to_string(4.49e9 - 960.0 * b * b) + "\n";
  spit(dir / "p.txt", pts);
  CHECK(run({"fit", "quadratic", "--input", (dir / "p.txt").string(), "--out", (dir / "quad").string()}) == 0);
  const auto quad = nlohmann::json::parse(slurp(dir / "quad" / "fit.json"));
  CHECK(quad["quad_coeff_hz_per_ua2"].get<double>() == Approx(-960.0).epsilon(1e-9));
  CHECK(quad["intercept_hz"].get<double>() == Approx(4.49e9).epsilon(1e-12));
  spit(dir / "bad.txt", "1 2\n3 four\n");
  CHECK(run({"fit", "quadratic", "--input", (dir / "bad.txt").string(), "--out", (dir / "badq").string()}) == 1);
}

TEST_CASE("report subcommand writes the table") {
  const auto dir = scratch("report");
  CHECK(run({"report", "--config", (kSource / "configs" / "table1_parity.cfg").string(), "--out",
             (dir / "r").string()}) == 0);
  const auto grid = cells(slurp(dir / "r" / "table1.txt"));
  CHECK(grid[1][1] == "2.26");
  CHECK(grid[7][2] == "1.06 / 0.29");
  CHECK(fs::exists(dir / "r" / "report.json"));
}
