#include "wgqed/cli_io.hpp"

#include <openssl/evp.h>

#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numbers>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

namespace wgqed {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

// ---------------------------------------------------------------------------
// Numbers

std::string num(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::scientific, 16);
  return std::string(buf, r.ptr);
}

std::string shortest(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::optional<double> to_double(std::string_view s) {
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

// ---------------------------------------------------------------------------
// Quantities with units

enum class Dim { frequency, time, rate, bias, angle, curvature };

struct Unit {
  std::string_view name;
  double factor;
};

std::string_view dim_name(Dim d) {
  switch (d) {
    case Dim::frequency: return "frequency";
    case Dim::time: return "time";
    case Dim::rate: return "rate";
    case Dim::bias: return "bias current";
    case Dim::angle: return "angle";
    case Dim::curvature: return "flux curvature";
  }
  return "";
}

std::vector<Unit> units(Dim d) {
  constexpr double w = kTwoPi;
  switch (d) {
    case Dim::frequency: return {{"Hz", 1.0}, {"kHz", 1e3}, {"MHz", 1e6}, {"GHz", 1e9}};
    case Dim::time: return {{"s", 1.0}, {"ms", 1e-3}, {"us", 1e-6}, {"ns", 1e-9}};
    // Rates are written as rate/2pi in frequency units, or directly in rad/s.
    case Dim::rate: return {{"MHz", w * 1e6}, {"kHz", w * 1e3}, {"Hz", w}, {"GHz", w * 1e9}, {"rad/s", 1.0}};
    case Dim::bias: return {{"uA", 1.0}, {"nA", 1e-3}, {"mA", 1e3}};
    case Dim::angle: return {{"rad", 1.0}, {"deg", std::numbers::pi / 180.0}};
    case Dim::curvature: return {{"Hz/uA^2", 1.0}, {"kHz/uA^2", 1e3}, {"MHz/mA^2", 1.0}};
  }
  return {};
}

std::string join(const std::string& path, std::string_view key) {
  return path.empty() ? std::string(key) : path + "." + std::string(key);
}

std::string index_path(const std::string& path, std::size_t i) { return path + "[" + std::to_string(i) + "]"; }

double quantity(const json& v, const std::string& path, Dim d) {
  if (v.is_number()) {
    const double x = v.get<double>();
    return x * units(d).front().factor;
  }
  if (!v.is_string()) throw ParseError(path, "expected a number or a \"<value> <unit>\" string");
  const auto s = v.get<std::string>();
  std::istringstream is(s);
  std::string value, unit, extra;
  is >> value >> unit >> extra;
  if (!extra.empty()) throw ParseError(path, "malformed quantity '" + s + "'");
  const auto x = to_double(value);
  if (!x) throw ParseError(path, "malformed number in '" + s + "'");
  if (unit.empty()) return *x * units(d).front().factor;
  std::string allowed;
  for (const auto& u : units(d)) {
    if (u.name == unit) return *x * u.factor;
    allowed += (allowed.empty() ? "" : ", ") + std::string(u.name);
  }
  throw ParseError(path, "unit violation: '" + unit + "' is not a " + std::string(dim_name(d)) + " unit (expected " +
                             allowed + ")");
}

void expect_object(const json& j, const std::string& path) {
  if (!j.is_object()) throw ParseError(path.empty() ? "<root>" : path, "expected a key-value table");
}

void check_keys(const json& obj, const std::string& path, std::initializer_list<std::string_view> allowed) {
  expect_object(obj, path);
  for (const auto& [key, value] : obj.items()) {
    bool ok = false;
    for (auto a : allowed) ok = ok || a == key;
    if (!ok) throw ParseError(join(path, key), "unknown key");
  }
}

const json* find(const json& obj, std::string_view key) {
  const auto it = obj.find(std::string(key));
  return it == obj.end() ? nullptr : &*it;
}

template <typename F>
void with(const json& obj, const std::string& path, std::string_view key, F&& f) {
  if (const json* v = find(obj, key)) f(*v, join(path, key));
}

void read_quantity(const json& obj, const std::string& path, std::string_view key, Dim d, double& out) {
  with(obj, path, key, [&](const json& v, const std::string& p) { out = quantity(v, p, d); });
}

void read_positive(const json& obj, const std::string& path, std::string_view key, Dim d, double& out) {
  with(obj, path, key, [&](const json& v, const std::string& p) {
    const double x = quantity(v, p, d);
    if (!(x > 0.0) || !std::isfinite(x)) throw ParseError(p, "unit violation: must be positive and finite");
    out = x;
  });
}

void read_nonneg(const json& obj, const std::string& path, std::string_view key, Dim d, double& out) {
  with(obj, path, key, [&](const json& v, const std::string& p) {
    const double x = quantity(v, p, d);
    if (!(x >= 0.0) || !std::isfinite(x)) throw ParseError(p, "unit violation: must be non-negative and finite");
    out = x;
  });
}

void read_optional(const json& obj, const std::string& path, std::string_view key, Dim d,
                   std::optional<double>& out) {
  with(obj, path, key, [&](const json& v, const std::string& p) {
    const double x = quantity(v, p, d);
    if (!std::isfinite(x)) throw ParseError(p, "must be finite");
    out = x;
  });
}

bool boolean(const json& v, const std::string& path) {
  if (!v.is_boolean()) throw ParseError(path, "expected true or false");
  return v.get<bool>();
}

std::int64_t integer(const json& v, const std::string& path) {
  if (!v.is_number_integer()) throw ParseError(path, "expected an integer");
  return v.get<std::int64_t>();
}

std::string text(const json& v, const std::string& path) {
  if (!v.is_string()) throw ParseError(path, "expected a string");
  return v.get<std::string>();
}

/// A grid is a list of quantities, a single quantity, or {start, stop, points}.
std::vector<double> grid(const json& v, const std::string& path, Dim d, double min_value = -INFINITY) {
  std::vector<double> g;
  if (v.is_array()) {
    for (std::size_t i = 0; i < v.size(); ++i) g.push_back(quantity(v[i], index_path(path, i), d));
  } else if (v.is_object()) {
    check_keys(v, path, {"start", "stop", "points"});
    for (auto k : {"start", "stop", "points"})
      if (!find(v, k)) throw ParseError(join(path, k), "missing grid key");
    const double start = quantity(v["start"], join(path, "start"), d);
    const double stop = quantity(v["stop"], join(path, "stop"), d);
    const auto points = integer(v["points"], join(path, "points"));
    if (points < 1 || points > 10'000'000) throw ParseError(join(path, "points"), "must be between 1 and 1e7");
    if (points > 1 && !(stop > start)) throw ParseError(path, "malformed grid: stop must exceed start");
    g = linear_grid(start, stop, static_cast<int>(points));
  } else {
    g.push_back(quantity(v, path, d));
  }
  if (g.empty()) throw ParseError(path, "malformed grid: no points");
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!std::isfinite(g[i])) throw ParseError(index_path(path, i), "malformed grid: non-finite value");
    if (g[i] < min_value) throw ParseError(index_path(path, i), "unit violation: must be non-negative");
    if (i > 0 && !(g[i] > g[i - 1])) throw ParseError(index_path(path, i), "malformed grid: not strictly increasing");
  }
  return g;
}

void read_grid(const json& obj, const std::string& path, std::string_view key, Dim d, std::vector<double>& out,
               double min_value = -INFINITY) {
  with(obj, path, key, [&](const json& v, const std::string& p) { out = grid(v, p, d, min_value); });
}

RabiEnvelopeModel envelope_from_string(const std::string& s, const std::string& path) {
  if (s == "two_rate") return RabiEnvelopeModel::two_rate;
  if (s == "driven_bloch") return RabiEnvelopeModel::driven_bloch;
  throw ParseError(path, "expected \"two_rate\" or \"driven_bloch\"");
}

std::string_view to_string(RabiEnvelopeModel m) {
  return m == RabiEnvelopeModel::two_rate ? "two_rate" : "driven_bloch";
}

fs::path resolve(const fs::path& p, const fs::path& origin) {
  if (p.is_absolute() || origin.empty()) return p;
  return origin.parent_path() / p;
}

FittedValues parse_fitted(const json& j, const std::string& path) {
  check_keys(j, path, {"resonator", "qubit", "time_domain"});
  FittedValues v;
  with(j, path, "resonator", [&](const json& r, const std::string& p) {
    check_keys(r, p, {"gamma10", "decoherence", "rabi_used"});
    read_optional(r, p, "gamma10", Dim::rate, v.resonator_gamma10);
    read_optional(r, p, "decoherence", Dim::rate, v.resonator_decoherence);
    read_optional(r, p, "rabi_used", Dim::rate, v.resonator_rabi_used);
  });
  with(j, path, "qubit", [&](const json& q, const std::string& p) {
    check_keys(q, p, {"gamma10", "gamma_l", "gamma_phi", "rabi_used", "rabi_fit"});
    read_optional(q, p, "gamma10", Dim::rate, v.qubit_gamma10);
    read_optional(q, p, "gamma_l", Dim::rate, v.qubit_gamma_l);
    read_optional(q, p, "gamma_phi", Dim::rate, v.qubit_gamma_phi);
    read_optional(q, p, "rabi_used", Dim::rate, v.qubit_rabi_used);
    read_optional(q, p, "rabi_fit", Dim::rate, v.qubit_rabi_fit);
  });
  with(j, path, "time_domain", [&](const json& t, const std::string& p) {
    check_keys(t, p, {"t1", "t_rabi", "rabi_used"});
    read_optional(t, p, "t1", Dim::time, v.t1);
    read_optional(t, p, "t_rabi", Dim::time, v.t_rabi);
    read_optional(t, p, "rabi_used", Dim::rate, v.time_domain_rabi);
  });
  return v;
}

RunConfig parse_document(const json& root, const fs::path& origin) {
  check_keys(root, "", {"format_version", "protocol", "seed", "noise_sigma", "fast_lineshape", "threads", "qubit",
                        "environment", "spectroscopy", "flux", "chevron", "rabi", "t1", "drive", "readout",
                        "simulation", "analysis", "fit", "fitted"});
  RunConfig rc;
  rc.source = origin;
  ExperimentConfig& c = rc.experiment;

  with(root, "", "format_version", [&](const json& v, const std::string& p) {
    if (integer(v, p) != kFormatVersion) throw ParseError(p, "unsupported format version");
  });
  with(root, "", "protocol", [&](const json& v, const std::string& p) {
    try {
      c.protocol = protocol_from_string(text(v, p));
    } catch (const DomainError& e) {
      throw ParseError(p, e.what());
    }
  });
  with(root, "", "seed", [&](const json& v, const std::string& p) {
    const auto s = integer(v, p);
    if (s < 0) throw ParseError(p, "must be non-negative");
    c.seed = static_cast<std::uint64_t>(s);
  });
  with(root, "", "noise_sigma", [&](const json& v, const std::string& p) {
    if (!v.is_number() || !(v.get<double>() >= 0.0)) throw ParseError(p, "expected a non-negative number");
    c.noise_sigma = v.get<double>();
  });
  with(root, "", "fast_lineshape", [&](const json& v, const std::string& p) { c.fast_lineshape = boolean(v, p); });
  with(root, "", "threads", [&](const json& v, const std::string& p) {
    const auto t = integer(v, p);
    if (t < 0 || t > 1024) throw ParseError(p, "must be between 0 and 1024");
    c.threads = static_cast<int>(t);
  });

  with(root, "", "qubit", [&](const json& q, const std::string& p) {
    check_keys(q, p, {"f01", "f12", "gamma10", "gamma_l", "gamma_phi"});
    read_positive(q, p, "f01", Dim::frequency, c.truth.f01);
    read_positive(q, p, "f12", Dim::frequency, c.truth.f12);
    read_nonneg(q, p, "gamma10", Dim::rate, c.truth.gamma10);
    read_nonneg(q, p, "gamma_l", Dim::rate, c.truth.gamma_l);
    read_nonneg(q, p, "gamma_phi", Dim::rate, c.truth.gamma_phi);
    try {
      validate(c.truth);
    } catch (const DomainError& e) {
      throw ParseError(p, e.what());
    }
  });
  with(root, "", "environment", [&](const json& e, const std::string& p) {
    check_keys(e, p, {"amplitude", "phase_offset", "electrical_delay"});
    with(e, p, "amplitude", [&](const json& v, const std::string& pp) {
      if (!v.is_number() || !(v.get<double>() > 0.0)) throw ParseError(pp, "expected a positive number");
      c.environment.amplitude = v.get<double>();
    });
    read_quantity(e, p, "phase_offset", Dim::angle, c.environment.phase_offset);
    read_quantity(e, p, "electrical_delay", Dim::time, c.environment.electrical_delay);
  });
  with(root, "", "spectroscopy", [&](const json& s, const std::string& p) {
    check_keys(s, p, {"frequencies", "rabi"});
    read_grid(s, p, "frequencies", Dim::frequency, c.probe_frequencies, 0.0);
    read_grid(s, p, "rabi", Dim::rate, c.probe_rabi_rates, 0.0);
  });
  c.flux.intercept = c.truth.f01;
  with(root, "", "flux", [&](const json& f, const std::string& p) {
    check_keys(f, p, {"biases", "frequencies", "curvature", "rabi"});
    read_grid(f, p, "biases", Dim::bias, c.biases);
    read_grid(f, p, "frequencies", Dim::frequency, c.flux_frequencies, 0.0);
    read_quantity(f, p, "curvature", Dim::curvature, c.flux.quad_coeff);
    read_positive(f, p, "rabi", Dim::rate, c.flux_rabi_rate);
  });
  with(root, "", "chevron", [&](const json& s, const std::string& p) {
    check_keys(s, p, {"rabi", "detunings"});
    read_grid(s, p, "rabi", Dim::rate, c.chevron_rabi_rates, 0.0);
    read_grid(s, p, "detunings", Dim::frequency, c.chevron_detunings);
  });
  with(root, "", "rabi", [&](const json& s, const std::string& p) {
    check_keys(s, p, {"durations", "rabi"});
    read_grid(s, p, "durations", Dim::time, c.durations, 0.0);
    read_positive(s, p, "rabi", Dim::rate, c.rabi_drive_rate);
  });
  with(root, "", "t1", [&](const json& s, const std::string& p) {
    check_keys(s, p, {"delays", "pi_rabi"});
    read_grid(s, p, "delays", Dim::time, c.delays, 0.0);
    with(s, p, "pi_rabi", [&](const json& v, const std::string& pp) {
      const double x = quantity(v, pp, Dim::rate);
      if (!(x > 0.0) || !std::isfinite(x)) throw ParseError(pp, "unit violation: must be positive and finite");
      c.pi_rabi_rate = x;
    });
  });
  c.drive.carrier = c.truth.f01;
  with(root, "", "drive", [&](const json& s, const std::string& p) {
    check_keys(s, p, {"duration", "phase"});
    read_positive(s, p, "duration", Dim::time, c.drive.duration);
    read_quantity(s, p, "phase", Dim::angle, c.drive.phase);
  });
  double readout_offset = 15e6;
  std::optional<double> readout_frequency;
  with(root, "", "readout", [&](const json& s, const std::string& p) {
    check_keys(s, p, {"duration", "phase", "offset", "frequency", "rabi"});
    if (find(s, "offset") && find(s, "frequency")) throw ParseError(p, "give either offset or frequency, not both");
    read_nonneg(s, p, "duration", Dim::time, c.readout.duration);
    read_quantity(s, p, "phase", Dim::angle, c.readout.phase);
    read_quantity(s, p, "offset", Dim::frequency, readout_offset);
    read_optional(s, p, "frequency", Dim::frequency, readout_frequency);
    read_nonneg(s, p, "rabi", Dim::rate, c.readout.rabi_rate);
  });
  c.readout.carrier = readout_frequency ? *readout_frequency : c.truth.f12 + readout_offset;
  if (!(c.readout.carrier > 0.0)) throw ParseError("readout", "readout carrier must be positive");

  with(root, "", "simulation", [&](const json& s, const std::string& p) {
    check_keys(s, p, {"levels", "dt", "integrator", "adaptive_tol", "steady_state_tol", "invariant_tol"});
    with(s, p, "levels", [&](const json& v, const std::string& pp) {
      const auto n = integer(v, pp);
      if (n < 2 || n > 10) throw ParseError(pp, "must be between 2 and 10");
      c.sim.levels = static_cast<int>(n);
    });
    read_positive(s, p, "dt", Dim::time, c.sim.dt);
    with(s, p, "integrator", [&](const json& v, const std::string& pp) {
      const auto name = text(v, pp);
      if (name == "rk4") c.sim.method = Integrator::rk4;
      else if (name == "adaptive") c.sim.method = Integrator::adaptive;
      else throw ParseError(pp, "expected \"rk4\" or \"adaptive\"");
    });
    for (auto [key, target] : {std::pair{"adaptive_tol", &c.sim.adaptive_tol},
                               std::pair{"steady_state_tol", &c.sim.steady_state_tol},
                               std::pair{"invariant_tol", &c.sim.invariant_tol}})
      with(s, p, key, [&](const json& v, const std::string& pp) {
        if (!v.is_number() || !(v.get<double>() > 0.0)) throw ParseError(pp, "expected a positive number");
        *target = v.get<double>();
      });
  });
  with(root, "", "analysis", [&](const json& s, const std::string& p) {
    check_keys(s, p, {"rabi_envelope"});
    with(s, p, "rabi_envelope", [&](const json& v, const std::string& pp) {
      c.rabi_model = envelope_from_string(text(v, pp), pp);
    });
  });
  with(root, "", "fit", [&](const json& s, const std::string& p) {
    check_keys(s, p, {"trace", "points", "applied_rabi", "fit_rabi", "symmetric"});
    FitInput in;
    with(s, p, "trace", [&](const json& v, const std::string& pp) { in.trace = resolve(text(v, pp), origin); });
    with(s, p, "points", [&](const json& v, const std::string& pp) { in.points = resolve(text(v, pp), origin); });
    read_optional(s, p, "applied_rabi", Dim::rate, in.applied_rabi);
    if (in.applied_rabi && *in.applied_rabi < 0.0) throw ParseError(join(p, "applied_rabi"), "must be non-negative");
    with(s, p, "fit_rabi", [&](const json& v, const std::string& pp) { in.fit_rabi = boolean(v, pp); });
    with(s, p, "symmetric", [&](const json& v, const std::string& pp) { in.symmetric = boolean(v, pp); });
    rc.fit = in;
  });
  with(root, "", "fitted", [&](const json& v, const std::string& p) { rc.fitted = parse_fitted(v, p); });

  try {
    validate(c);
  } catch (const DomainError& e) {
    throw ParseError(origin.empty() ? "<config>" : origin.string(), e.what());
  }
  return rc;
}

// ---------------------------------------------------------------------------
// Config rendering

std::string rate_str(double v) { return shortest(v) + " rad/s"; }

json grid_json(const std::vector<double>& g) {
  if (g.size() >= 3 && linear_grid(g.front(), g.back(), static_cast<int>(g.size())) == g)
    return json{{"start", g.front()}, {"stop", g.back()}, {"points", g.size()}};
  return json(g);
}

json rate_grid_json(const std::vector<double>& g) {
  json out = json::array();
  for (double v : g) out.push_back(rate_str(v));
  return out;
}

json fitted_json(const FittedValues& v) {
  const auto mhz = [](const std::optional<double>& x) { return x ? json(shortest(to_mhz(*x)) + " MHz") : json(); };
  const auto ns = [](const std::optional<double>& x) { return x ? json(shortest(*x * 1e9) + " ns") : json(); };
  json out = json::object();
  const auto put = [](json& obj, const char* key, json value) {
    if (!value.is_null()) obj[key] = std::move(value);
  };
  json r = json::object(), q = json::object(), t = json::object();
  put(r, "gamma10", mhz(v.resonator_gamma10));
  put(r, "decoherence", mhz(v.resonator_decoherence));
  put(r, "rabi_used", mhz(v.resonator_rabi_used));
  put(q, "gamma10", mhz(v.qubit_gamma10));
  put(q, "gamma_l", mhz(v.qubit_gamma_l));
  put(q, "gamma_phi", mhz(v.qubit_gamma_phi));
  put(q, "rabi_used", mhz(v.qubit_rabi_used));
  put(q, "rabi_fit", mhz(v.qubit_rabi_fit));
  put(t, "t1", ns(v.t1));
  put(t, "t_rabi", ns(v.t_rabi));
  put(t, "rabi_used", mhz(v.time_domain_rabi));
  out["resonator"] = r;
  out["qubit"] = q;
  out["time_domain"] = t;
  return out;
}

json config_json(const ExperimentConfig& c) {
  json j;
  j["format_version"] = kFormatVersion;
  j["protocol"] = std::string(to_string(c.protocol));
  j["seed"] = c.seed;
  j["noise_sigma"] = c.noise_sigma;
  j["fast_lineshape"] = c.fast_lineshape;
  j["threads"] = c.threads;
  j["qubit"] = {{"f01", c.truth.f01},
                {"f12", c.truth.f12},
                {"gamma10", rate_str(c.truth.gamma10)},
                {"gamma_l", rate_str(c.truth.gamma_l)},
                {"gamma_phi", rate_str(c.truth.gamma_phi)}};
  j["environment"] = {{"amplitude", c.environment.amplitude},
                      {"phase_offset", c.environment.phase_offset},
                      {"electrical_delay", c.environment.electrical_delay}};
  j["spectroscopy"] = {{"frequencies", grid_json(c.probe_frequencies)}, {"rabi", rate_grid_json(c.probe_rabi_rates)}};
  j["flux"] = {{"biases", grid_json(c.biases)},
               {"frequencies", grid_json(c.flux_frequencies)},
               {"curvature", c.flux.quad_coeff},
               {"rabi", rate_str(c.flux_rabi_rate)}};
  j["chevron"] = {{"rabi", rate_grid_json(c.chevron_rabi_rates)}, {"detunings", grid_json(c.chevron_detunings)}};
  j["rabi"] = {{"durations", grid_json(c.durations)}, {"rabi", rate_str(c.rabi_drive_rate)}};
  j["t1"] = {{"delays", grid_json(c.delays)}};
  if (c.pi_rabi_rate) j["t1"]["pi_rabi"] = rate_str(*c.pi_rabi_rate);
  j["drive"] = {{"duration", c.drive.duration}, {"phase", c.drive.phase}};
  j["readout"] = {{"duration", c.readout.duration},
                  {"phase", c.readout.phase},
                  {"frequency", c.readout.carrier},
                  {"rabi", rate_str(c.readout.rabi_rate)}};
  j["simulation"] = {{"levels", c.sim.levels},
                     {"dt", c.sim.dt},
                     {"integrator", c.sim.method == Integrator::rk4 ? "rk4" : "adaptive"},
                     {"adaptive_tol", c.sim.adaptive_tol},
                     {"steady_state_tol", c.sim.steady_state_tol},
                     {"invariant_tol", c.sim.invariant_tol}};
  j["analysis"] = {{"rabi_envelope", std::string(to_string(c.rabi_model))}};
  return j;
}

// ---------------------------------------------------------------------------
// Files

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("cannot read " + path.string());
  return ss.str();
}

void atomic_write(const fs::path& path, const std::string& content) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) throw IoError("cannot write " + tmp.string());
  }
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::string columns_file(const std::vector<std::string>& names, const std::vector<std::vector<double>>& cols) {
  std::string s = "# format_version=" + std::to_string(kFormatVersion) + "\n# columns:";
  for (const auto& n : names) s += " " + n;
  s += "\n";
  const std::size_t rows = cols.empty() ? 0 : cols.front().size();
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t k = 0; k < cols.size(); ++k) s += (k ? " " : "") + num(cols[k][i]);
    s += "\n";
  }
  return s;
}

std::vector<double> unwrapped(std::vector<double> ph) {
  for (std::size_t i = 1; i < ph.size(); ++i) {
    while (ph[i] - ph[i - 1] > std::numbers::pi) ph[i] -= kTwoPi;
    while (ph[i] - ph[i - 1] < -std::numbers::pi) ph[i] += kTwoPi;
  }
  return ph;
}

// ---------------------------------------------------------------------------
// Figure files

std::string fig_spectroscopy(const ExperimentRecord& rec) {
  const auto& raw = rec.traces.at("drive_0");
  const auto it = rec.traces.find("drive_0_normalized");
  const auto& norm = it != rec.traces.end() ? it->second : raw;
  std::vector<std::vector<double>> cols{raw.axis(), raw.real(), {}, raw.magnitude(), norm.magnitude()};
  for (auto z : raw.values()) cols[2].push_back(z.imag());
  std::vector<std::string> names{"frequency_hz", "re", "im", "magnitude", "normalized_magnitude"};
  if (const auto q = rec.fits.find("qubit"); q != rec.fits.end()) {
    const auto& f = q->second;
    const QubitParams p{f.value("f01"), f.value("f01") - 150e6, f.value("gamma10"), f.value("gamma_l"),
                        f.value("gamma_phi")};
    double rabi = 0.0;
    if (auto d = f.derived.find("rabi_used"); d != f.derived.end()) rabi = d->second;
    if (auto d = f.derived.find("rabi_fit"); d != f.derived.end()) rabi = d->second;
    std::vector<double> model;
    for (double x : raw.axis()) model.push_back(std::abs(eval_qubit_s21(p, DriveSpec{rabi, x})));
    cols.push_back(std::move(model));
    names.push_back("qubit_model_magnitude");
  }
  return columns_file(names, cols);
}

std::string fig_flux(const ExperimentRecord& rec) {
  const auto& m = rec.maps.at("contrast");
  std::vector<std::vector<double>> cols(3);
  for (std::size_t r = 0; r < m.rows.size(); ++r)
    for (std::size_t c = 0; c < m.columns.size(); ++c) {
      cols[0].push_back(m.rows[r]);
      cols[1].push_back(m.columns[c]);
      cols[2].push_back(m.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)).real());
    }
  std::string s = columns_file({"bias_ua", "frequency_hz", "contrast"}, cols);
  s += "# dips: bias_ua f01_hz f02_half_hz (nan if not found)\n";
  for (const auto& d : rec.flux_dips)
    s += "#dip " + num(d.bias_ua) + " " + num(d.f01.value_or(NAN)) + " " + num(d.f02_half.value_or(NAN)) + "\n";
  return s;
}

std::string fig_chevron(const ExperimentRecord& rec) {
  const auto& m = rec.maps.at("phase");
  std::vector<std::vector<double>> cols(3);
  for (std::size_t r = 0; r < m.rows.size(); ++r)
    for (std::size_t c = 0; c < m.columns.size(); ++c) {
      cols[0].push_back(m.rows[r]);
      cols[1].push_back(m.columns[c]);
      cols[2].push_back(m.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)).real());
    }
  return columns_file({"rabi_rad_per_s", "detuning_hz", "phase_rad"}, cols);
}

std::string fig_time(const ComplexTrace& trace, const FitResult* fit, bool oscillating) {
  const auto& t = trace.axis();
  std::vector<std::vector<double>> cols{t, trace.phase()};
  std::vector<std::string> names{trace.kind() == AxisKind::time ? "duration_s" : "delay_s", "phase_rad"};
  if (fit) {
    std::vector<double> model;
    for (double x : t) {
      if (oscillating) {
        const double decay = std::isfinite(fit->value("T_decay")) ? std::exp(-x / fit->value("T_decay")) : 1.0;
        model.push_back(fit->value("amplitude") * decay *
                            std::cos(kTwoPi * fit->value("f_osc") * x + fit->value("phase")) +
                        fit->value("offset"));
      } else {
        model.push_back(fit->value("amplitude") * std::exp(-x / fit->value("T1")) + fit->value("offset"));
      }
    }
    cols.push_back(std::move(model));
    names.push_back("fit_phase_rad");
  }
  return columns_file(names, cols);
}

const FitResult* fit_or_null(const ExperimentRecord& rec, const std::string& name) {
  const auto it = rec.fits.find(name);
  return it == rec.fits.end() ? nullptr : &it->second;
}

json fit_json(const FitResult& fit) {
  json j;
  j["converged"] = fit.converged;
  j["degenerate"] = fit.degenerate;
  j["iterations"] = fit.iterations;
  j["residual_norm"] = finite_or_null(fit.residual_norm);
  json params = json::object();
  for (std::size_t i = 0; i < fit.specs.size(); ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    params[fit.specs[i].name] = {{"value", finite_or_null(fit.parameters(k))},
                                 {"sigma", k < fit.uncertainties.size() ? finite_or_null(fit.uncertainties(k)) : json()},
                                 {"unit", fit.specs[i].unit}};
  }
  j["parameters"] = params;
  json derived = json::object();
  for (const auto& [k, v] : fit.derived) derived[k] = finite_or_null(v);
  j["derived"] = derived;
  j["notes"] = fit.notes;
  return j;
}

json quadratic_json(const QuadraticFit& q) {
  return {{"quad_coeff_hz_per_ua2", q.map.quad_coeff},
          {"linear_coeff_hz_per_ua", q.linear_coeff},
          {"intercept_hz", q.map.intercept},
          {"sigma", {q.uncertainties(0), q.uncertainties(1), q.uncertainties(2)}},
          {"rms_residual_hz", q.rms_residual}};
}

json record_json(const ExperimentRecord& rec) {
  json j;
  j["format_version"] = kFormatVersion;
  j["engine_version"] = rec.engine_version;
  j["protocol"] = std::string(to_string(rec.config.protocol));
  j["seed"] = rec.config.seed;
  j["noise_sigma"] = rec.config.noise_sigma;
  json scalars = json::object();
  for (const auto& [k, v] : rec.scalars) scalars[k] = finite_or_null(v);
  j["scalars"] = scalars;
  json fits = json::object();
  for (const auto& [k, f] : rec.fits) fits[k] = fit_json(f);
  j["fits"] = fits;
  if (!rec.flux_dips.empty()) {
    json dips = json::array();
    for (const auto& d : rec.flux_dips)
      dips.push_back({{"bias_ua", d.bias_ua},
                      {"f01_hz", d.f01 ? json(*d.f01) : json()},
                      {"f02_half_hz", d.f02_half ? json(*d.f02_half) : json()},
                      {"flags", d.flags}});
    j["flux_dips"] = dips;
  }
  if (rec.flux_fit_f01) j["flux_fit_f01"] = quadratic_json(*rec.flux_fit_f01);
  if (rec.flux_fit_f02_half) j["flux_fit_f02_half"] = quadratic_json(*rec.flux_fit_f02_half);
  j["flags"] = rec.flags;
  return j;
}

json column_json(const LossRateColumn& c) {
  const auto mhz = [](const std::optional<double>& x) { return x ? finite_or_null(to_mhz(*x)) : json(); };
  return {{"gamma10_mhz", mhz(c.gamma10)},     {"gamma_l_mhz", mhz(c.gamma_l)},
          {"gamma_phi_mhz", mhz(c.gamma_phi)}, {"gamma1_mhz", mhz(c.gamma1)},
          {"decoherence_mhz", mhz(c.decoherence)}, {"rabi_decay_mhz", mhz(c.rabi_decay)},
          {"rabi_used_mhz", mhz(c.rabi_used)}, {"rabi_fit_mhz", mhz(c.rabi_fit)}};
}

json table_json(const CrossValidationTable& t) {
  json j;
  j["rabi_envelope"] = std::string(to_string(t.rabi_model));
  j["resonator"] = column_json(t.resonator);
  j["qubit"] = column_json(t.qubit);
  j["time_domain"] = column_json(t.time_domain);
  if (t.truth) j["truth"] = column_json(*t.truth);
  return j;
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

}  // namespace

// ---------------------------------------------------------------------------
// Config

RunConfig parse_run_config_text(const std::string& text, const fs::path& origin) {
  json root;
  try {
    root = json::parse(text, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw ParseError(origin.empty() ? "<config>" : origin.string(), std::string("malformed document: ") + e.what());
  }
  return parse_document(root, origin);
}

RunConfig parse_run_config(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("config file not found: " + path.string());
  return parse_run_config_text(read_file(path), path);
}

ExperimentConfig parse_config(const fs::path& path) { return parse_run_config(path).experiment; }

std::string config_to_json(const ExperimentConfig& cfg) { return dump(config_json(cfg)); }

// ---------------------------------------------------------------------------
// Traces

std::string format_trace(const ComplexTrace& trace) {
  std::string s;
  s.reserve(64 * (trace.size() + 1));
  s += "# " + std::string(to_string(trace.kind())) + " " + std::string(axis_unit(trace.kind())) + " " +
       std::to_string(trace.size()) + " format_version=" + std::to_string(kFormatVersion) + "\n";
  for (std::size_t i = 0; i < trace.size(); ++i) {
    const auto z = trace.values()[i];
    s += num(trace.axis()[i]) + " " + num(z.real()) + " " + num(z.imag()) + "\n";
  }
  return s;
}

ComplexTrace parse_trace(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  const auto where = [&](std::size_t n) { return origin + ":" + std::to_string(n); };
  if (!std::getline(in, line)) throw ParseError(where(1), "empty trace file");
  std::istringstream header(line);
  std::string hash, kind_name, unit, count, version;
  header >> hash >> kind_name >> unit >> count >> version;
  if (hash != "#" || count.empty()) throw ParseError(where(1), "expected '# axis_kind unit n_points'");
  AxisKind kind;
  try {
    kind = axis_kind_from_string(kind_name);
  } catch (const Error&) {
    throw ParseError(where(1), "unknown axis kind '" + kind_name + "'");
  }
  if (unit != axis_unit(kind)) throw ParseError(where(1), "unit '" + unit + "' does not match axis kind");
  if (!version.empty() && version != "format_version=" + std::to_string(kFormatVersion))
    throw ParseError(where(1), "unsupported " + version);
  const auto n = to_double(count);
  if (!n || *n < 0 || *n != std::floor(*n)) throw ParseError(where(1), "malformed point count");
  const auto points = static_cast<std::size_t>(*n);

  std::vector<double> axis;
  std::vector<std::complex<double>> values;
  axis.reserve(points);
  values.reserve(points);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string a, re, im, extra;
    row >> a >> re >> im >> extra;
    const auto x = to_double(a), y = to_double(re), z = to_double(im);
    if (!x || !y || !z || !extra.empty()) throw ParseError(where(line_no), "malformed row, expected 'axis re im'");
    if (!axis.empty() && !(*x > axis.back())) throw ParseError(where(line_no), "axis not strictly increasing");
    axis.push_back(*x);
    values.emplace_back(*y, *z);
  }
  if (axis.size() != points)
    throw ParseError(where(line_no), "header declares " + std::to_string(points) + " points, found " +
                                         std::to_string(axis.size()));
  if (points < 2) throw ParseError(where(1), "a trace needs at least two points");
  return ComplexTrace(kind, std::move(axis), std::move(values));
}

void write_trace(const fs::path& path, const ComplexTrace& trace) { atomic_write(path, format_trace(trace)); }

ComplexTrace read_trace(const fs::path& path) { return parse_trace(read_file(path), path.string()); }

namespace {

std::string row_file(std::size_t r) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "row_%04zu.txt", r);
  return buf;
}

std::string map_index(const ComplexMap& map) {
  std::string s = "# " + std::string(to_string(map.row_kind)) + " " + std::string(axis_unit(map.row_kind)) + " " +
                  std::to_string(map.rows.size()) + " format_version=" + std::to_string(kFormatVersion) + "\n";
  for (std::size_t r = 0; r < map.rows.size(); ++r) s += num(map.rows[r]) + " " + row_file(r) + "\n";
  return s;
}

ComplexTrace map_row(const ComplexMap& map, std::size_t r) {
  std::vector<std::complex<double>> v(map.columns.size());
  for (std::size_t c = 0; c < v.size(); ++c)
    v[c] = map.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  return ComplexTrace(map.column_kind, map.columns, std::move(v));
}

}  // namespace

void write_map(const fs::path& dir, const ComplexMap& map) {
  for (std::size_t r = 0; r < map.rows.size(); ++r) write_trace(dir / row_file(r), map_row(map, r));
  atomic_write(dir / "index.txt", map_index(map));
}

ComplexMap read_map(const fs::path& dir) {
  const fs::path index = dir / "index.txt";
  const std::string text = read_file(index);
  std::istringstream in(text);
  std::string line;
  const auto where = [&](std::size_t n) { return index.string() + ":" + std::to_string(n); };
  std::getline(in, line);
  std::istringstream header(line);
  std::string hash, kind_name, unit, count;
  header >> hash >> kind_name >> unit >> count;
  if (hash != "#") throw ParseError(where(1), "expected '# axis_kind unit n_rows'");
  ComplexMap map;
  try {
    map.row_kind = axis_kind_from_string(kind_name);
  } catch (const Error&) {
    throw ParseError(where(1), "unknown axis kind '" + kind_name + "'");
  }
  std::vector<ComplexTrace> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string value, file, extra;
    row >> value >> file >> extra;
    const auto v = to_double(value);
    if (!v || file.empty() || !extra.empty()) throw ParseError(where(line_no), "malformed row, expected 'value file'");
    map.rows.push_back(*v);
    rows.push_back(read_trace(dir / file));
  }
  const auto declared = to_double(count);
  if (!declared || *declared != static_cast<double>(rows.size()))
    throw ParseError(where(1), "row count does not match the index");
  if (rows.empty()) throw ParseError(where(1), "map has no rows");
  map.column_kind = rows.front().kind();
  map.columns = rows.front().axis();
  map.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(map.columns.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].axis() != map.columns || rows[r].kind() != map.column_kind)
      throw ParseError(where(static_cast<std::size_t>(r) + 2), "row axis differs from the first row");
    for (std::size_t c = 0; c < map.columns.size(); ++c)
      map.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r].values()[c];
  }
  return map;
}

// ---------------------------------------------------------------------------
// Tables

std::string format_table(const CrossValidationTable& t) {
  const auto cell = [](const std::optional<double>& v) -> std::string {
    if (!v || !std::isfinite(*v)) return "n.a.";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", to_mhz(*v));
    return buf;
  };
  const auto drive_cell = [&](const LossRateColumn& c) {
    if (c.rabi_used && c.rabi_fit) return cell(c.rabi_used) + " / " + cell(c.rabi_fit);
    if (c.rabi_fit) return "n.a. / " + cell(c.rabi_fit);
    return cell(c.rabi_used);
  };
  std::vector<const LossRateColumn*> cols{&t.resonator, &t.qubit, &t.time_domain};
  std::vector<std::string> heads{"Resonator fit", "Qubit fit", "Time domain"};
  if (t.truth) {
    cols.push_back(&*t.truth);
    heads.push_back("Ground truth");
  }
  using Row = std::optional<double> LossRateColumn::*;
  const std::pair<const char*, Row> rows[] = {
      {"Radiative loss rate Gamma10", &LossRateColumn::gamma10},
      {"Non-radiative loss rate Gamma_l", &LossRateColumn::gamma_l},
      {"Pure dephasing rate Gamma_phi", &LossRateColumn::gamma_phi},
      {"Relaxation rate Gamma1", &LossRateColumn::gamma1},
      {"Decoherence rate gamma10", &LossRateColumn::decoherence},
      {"Rabi decay rate Gamma_Rabi", &LossRateColumn::rabi_decay},
  };
  std::vector<std::vector<std::string>> grid;
  grid.push_back({"Rate / 2pi [MHz]"});
  for (const auto& h : heads) grid.back().push_back(h);
  for (const auto& [label, member] : rows) {
    grid.push_back({label});
    for (const auto* c : cols) grid.back().push_back(cell(c->*member));
  }
  grid.push_back({"Rabi drive rate, used / fit"});
  for (const auto* c : cols) grid.back().push_back(drive_cell(*c));

  std::vector<std::size_t> width(grid.front().size(), 0);
  for (const auto& r : grid)
    for (std::size_t k = 0; k < r.size(); ++k) width[k] = std::max(width[k], r[k].size());
  std::string s = "# rabi envelope model: " + std::string(to_string(t.rabi_model)) + "\n";
  for (const auto& r : grid) {
    std::string line;
    for (std::size_t k = 0; k < r.size(); ++k) {
      line += r[k] + std::string(width[k] - r[k].size(), ' ');
      if (k + 1 < r.size()) line += " | ";
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    s += line + "\n";
  }
  return s;
}

CrossValidationTable table_from_fitted(const FittedValues& v, RabiEnvelopeModel model) {
  CrossValidationTable t;
  t.rabi_model = model;
  t.resonator.gamma10 = v.resonator_gamma10;
  t.resonator.decoherence = v.resonator_decoherence;
  t.resonator.rabi_used = v.resonator_rabi_used;
  if (v.qubit_gamma10 && v.qubit_gamma_l && v.qubit_gamma_phi) {
    const QubitParams q{1.0, 0.5, *v.qubit_gamma10, *v.qubit_gamma_l, *v.qubit_gamma_phi};
    t.qubit = truth_column(q, 0.0, model);
  } else {
    t.qubit.gamma10 = v.qubit_gamma10;
    t.qubit.gamma_l = v.qubit_gamma_l;
    t.qubit.gamma_phi = v.qubit_gamma_phi;
  }
  t.qubit.rabi_used = v.qubit_rabi_used;
  t.qubit.rabi_fit = v.qubit_rabi_fit;
  if (v.t1 && v.t_rabi) {
    t.time_domain = time_domain_column(*v.t1, *v.t_rabi, 0.0, model);
  } else if (v.t1) {
    if (!(*v.t1 > 0.0)) throw StructuralError("T1 must be positive");
    t.time_domain.gamma1 = 1.0 / *v.t1;
  }
  t.time_domain.rabi_used = v.time_domain_rabi;
  return t;
}

FittedValues fitted_from_report(const CharacterizationReport& rep) {
  FittedValues v;
  const auto& t = rep.table;
  v.resonator_gamma10 = t.resonator.gamma10;
  v.resonator_decoherence = t.resonator.decoherence;
  v.resonator_rabi_used = t.resonator.rabi_used;
  v.qubit_gamma10 = t.qubit.gamma10;
  v.qubit_gamma_l = t.qubit.gamma_l;
  v.qubit_gamma_phi = t.qubit.gamma_phi;
  v.qubit_rabi_used = t.qubit.rabi_used;
  v.qubit_rabi_fit = t.qubit.rabi_fit;
  if (const auto* f = fit_or_null(rep.t1, "t1")) v.t1 = f->value("T1");
  if (const auto* f = fit_or_null(rep.rabi, "rabi")) v.t_rabi = f->value("T_decay");
  v.time_domain_rabi = t.time_domain.rabi_used;
  return v;
}

// ---------------------------------------------------------------------------
// Output directory and manifest

OutputDir::OutputDir(fs::path root) : root_(std::move(root)) {
  std::error_code ec;
  fs::create_directories(root_, ec);
  if (ec || !fs::is_directory(root_)) throw IoError("cannot create output directory " + root_.string());
}

void OutputDir::write(const fs::path& relative, const std::string& content) {
  atomic_write(root_ / relative, content);
  const std::string key = relative.generic_string();
  const std::string digest = sha256_hex(content);
  for (auto& [name, d] : outputs_)
    if (name == key) {
      d = digest;
      return;
    }
  outputs_.emplace_back(key, digest);
}

void OutputDir::write_trace(const fs::path& relative, const ComplexTrace& trace) {
  write(relative, format_trace(trace));
}

void OutputDir::write_map(const fs::path& relative_dir, const ComplexMap& map) {
  for (std::size_t r = 0; r < map.rows.size(); ++r) write_trace(relative_dir / row_file(r), map_row(map, r));
  write(relative_dir / "index.txt", map_index(map));
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw IoError("SHA-256 digest failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

std::string file_digest(const fs::path& path) { return sha256_hex(read_file(path)); }

std::string manifest_to_json(const RunManifest& m) {
  json j;
  j["format_version"] = kFormatVersion;
  j["tool_version"] = m.tool_version;
  j["command"] = m.command;
  j["config_path"] = m.config_path;
  j["config_sha256"] = m.config_digest;
  j["output_dir"] = m.output_dir;
  j["seed"] = m.seed;
  j["noise_sigma"] = m.noise_sigma ? json(*m.noise_sigma) : json();
  j["fast_lineshape"] = m.fast_lineshape;
  j["exit_status"] = m.exit_status;
  j["error"] = m.error;
  json in = json::object(), out = json::object();
  for (const auto& [p, d] : m.inputs) in[p] = d;
  for (const auto& [p, d] : m.outputs) out[p] = d;
  j["inputs"] = in;
  j["outputs"] = out;
  return dump(j);
}

void write_manifest(const fs::path& dir, const RunManifest& m) { atomic_write(dir / "manifest.json", manifest_to_json(m)); }

// ---------------------------------------------------------------------------
// Reports

std::string fit_to_json(const FitResult& fit, std::string_view model) {
  json j;
  j["format_version"] = kFormatVersion;
  j["model"] = std::string(model);
  const json body = fit_json(fit);
  for (const auto& [k, v] : body.items()) j[k] = v;
  return dump(j);
}

void emit_record(OutputDir& out, const ExperimentRecord& rec, const fs::path& dir) {
  for (const auto& [name, trace] : rec.traces) out.write_trace(dir / "traces" / (name + ".txt"), trace);
  for (const auto& [name, map] : rec.maps) out.write_map(dir / "maps" / name, map);
  out.write(dir / "record.json", dump(record_json(rec)));
  switch (rec.config.protocol) {
    case Protocol::spectroscopy:
      if (rec.traces.contains("drive_0")) out.write(dir / "fig1a.dat", fig_spectroscopy(rec));
      break;
    case Protocol::flux_sweep:
      if (rec.maps.contains("contrast")) out.write(dir / "fig1b.dat", fig_flux(rec));
      break;
    case Protocol::chevron:
      if (rec.maps.contains("phase")) out.write(dir / "fig2.dat", fig_chevron(rec));
      break;
    case Protocol::rabi:
      if (rec.traces.contains("rabi"))
        out.write(dir / "fig3a.dat", fig_time(rec.traces.at("rabi"), fit_or_null(rec, "rabi"), true));
      break;
    case Protocol::t1:
      if (rec.traces.contains("t1"))
        out.write(dir / "fig3b.dat", fig_time(rec.traces.at("t1"), fit_or_null(rec, "t1"), false));
      break;
  }
}

void emit_report(OutputDir& out, const CharacterizationReport& rep) {
  emit_record(out, rep.spectroscopy, "spectroscopy");
  emit_record(out, rep.flux, "flux");
  emit_record(out, rep.chevron, "chevron");
  emit_record(out, rep.rabi, "rabi");
  emit_record(out, rep.t1, "t1");

  json j;
  j["format_version"] = kFormatVersion;
  j["engine_version"] = std::string(kEngineVersion);
  j["config"] = config_json(rep.spectroscopy.config);
  j["table"] = table_json(rep.table);
  json rel = json::object();
  for (const auto& [k, v] : rep.relative_errors) rel[k] = finite_or_null(v);
  j["relative_errors"] = rel;
  j["weak_drive_saturation"] = rep.weak_drive_saturation;
  j["figures"] = {{"fig1a", "spectroscopy/fig1a.dat"},
                  {"fig1b", "flux/fig1b.dat"},
                  {"fig2", "chevron/fig2.dat"},
                  {"fig3a", "rabi/fig3a.dat"},
                  {"fig3b", "t1/fig3b.dat"}};
  out.write("report.json", dump(j));
  out.write("table1.txt", format_table(rep.table));
  json fitted;
  fitted["format_version"] = kFormatVersion;
  fitted["analysis"] = {{"rabi_envelope", std::string(to_string(rep.table.rabi_model))}};
  fitted["fitted"] = fitted_json(fitted_from_report(rep));
  out.write("fitted_values.json", dump(fitted));
}

void emit_table_report(OutputDir& out, const FittedValues& values, RabiEnvelopeModel model) {
  const auto table = table_from_fitted(values, model);
  json j;
  j["format_version"] = kFormatVersion;
  j["engine_version"] = std::string(kEngineVersion);
  j["table"] = table_json(table);
  out.write("report.json", dump(j));
  out.write("table1.txt", format_table(table));
}

// ---------------------------------------------------------------------------
// Command line

int exit_status(const Error& e) {
  switch (e.category()) {
    case Error::Category::validation: return 1;
    case Error::Category::convergence: return 2;
    case Error::Category::io: return 3;
  }
  return 1;
}

namespace {

struct CliOptions {
  std::string config;
  std::string out;
  std::string input;
  std::uint64_t seed = 0;
  double noise_sigma = 0.0;
  bool fast = false;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* sigma_opt = nullptr;
};

std::vector<FluxPoint> read_points(const fs::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  std::vector<FluxPoint> pts;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty() || line.front() == '#') continue;
    std::istringstream row(line);
    std::string b, f, extra;
    row >> b >> f >> extra;
    const auto bias = to_double(b), freq = to_double(f);
    if (!bias || !freq || !extra.empty())
      throw ParseError(path.string() + ":" + std::to_string(n), "malformed row, expected 'bias_ua frequency_hz'");
    pts.push_back({*bias, *freq});
  }
  if (pts.size() < 3) throw ParseError(path.string(), "a quadratic fit needs at least three points");
  return pts;
}

int run_command(const std::string& command, const std::string& target, const CliOptions& o, RunManifest& m,
                OutputDir& out) {
  RunConfig rc;
  if (!o.config.empty()) {
    m.config_path = o.config;
    m.config_digest = fs::exists(o.config) ? file_digest(o.config) : "";
    rc = parse_run_config(o.config);
    m.inputs.emplace_back(o.config, m.config_digest);
  }
  ExperimentConfig& cfg = rc.experiment;
  if (o.seed_opt && *o.seed_opt) cfg.seed = o.seed;
  if (o.sigma_opt && *o.sigma_opt) {
    if (!(o.noise_sigma >= 0.0) || !std::isfinite(o.noise_sigma))
      throw ParseError("--noise-sigma", "must be a non-negative number");
    cfg.noise_sigma = o.noise_sigma;
  }
  if (o.fast) cfg.fast_lineshape = true;
  m.seed = cfg.seed;
  m.noise_sigma = cfg.noise_sigma;
  m.fast_lineshape = cfg.fast_lineshape;
  try {
    validate(cfg);
  } catch (const DomainError& e) {
    throw ParseError("<config>", e.what());
  }

  if (command == "simulate") {
    cfg.protocol = protocol_from_string(target);
    out.write("config.resolved.json", config_to_json(cfg));
    ExperimentRecord rec;
    switch (cfg.protocol) {
      case Protocol::spectroscopy: rec = run_spectroscopy(cfg); break;
      case Protocol::flux_sweep: rec = run_flux_sweep(cfg); break;
      case Protocol::chevron: rec = run_chevron(cfg); break;
      case Protocol::rabi: rec = run_rabi(cfg); break;
      case Protocol::t1: rec = run_t1(cfg); break;
    }
    emit_record(out, rec);
    std::cout << "simulated " << target << ": " << rec.traces.size() << " traces, " << rec.maps.size()
              << " maps written to " << out.root().string() << "\n";
    return 0;
  }

  if (command == "characterize") {
    out.write("config.resolved.json", config_to_json(cfg));
    const auto rep = run_full_characterization(cfg);
    emit_report(out, rep);
    std::cout << format_table(rep.table);
    return 0;
  }

  if (command == "report") {
    if (!rc.fitted) throw StructuralError("report needs a 'fitted' section in the config");
    emit_table_report(out, *rc.fitted, cfg.rabi_model);
    std::cout << format_table(table_from_fitted(*rc.fitted, cfg.rabi_model));
    return 0;
  }

  // fit
  FitInput in = rc.fit.value_or(FitInput{});
  if (!o.input.empty()) (target == "quadratic" ? in.points : in.trace) = o.input;
  if (target == "quadratic") {
    if (in.points.empty()) throw StructuralError("fit quadratic needs fit.points or --input");
    m.inputs.emplace_back(in.points.string(), file_digest(in.points));
    const auto q = fit_quadratic(read_points(in.points), in.symmetric);
    json j = quadratic_json(q);
    j["format_version"] = kFormatVersion;
    j["model"] = "quadratic";
    out.write("fit.json", dump(j));
    std::cout << "quad_coeff " << shortest(q.map.quad_coeff) << " Hz/uA^2, intercept " << shortest(q.map.intercept)
              << " Hz\n";
    return 0;
  }
  if (in.trace.empty()) throw StructuralError("fit " + target + " needs fit.trace or --input");
  m.inputs.emplace_back(in.trace.string(), file_digest(in.trace));
  const ComplexTrace trace = read_trace(in.trace);
  FitResult fit;
  if (target == "resonator") {
    fit = fit_resonator(trace);
  } else if (target == "qubit") {
    QubitFitOptions qo;
    qo.fit_rabi = in.fit_rabi;
    fit = fit_qubit_model(trace, in.applied_rabi, qo);
  } else if (target == "rabi") {
    fit = fit_damped_cosine(trace.axis(), unwrapped(trace.phase()));
  } else {
    fit = fit_exponential(trace.axis(), unwrapped(trace.phase()));
  }
  out.write("fit.json", fit_to_json(fit, target));
  for (std::size_t i = 0; i < fit.specs.size(); ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    std::cout << fit.specs[i].name << " = " << shortest(fit.parameters(k)) << " +- "
              << shortest(fit.uncertainties(k)) << " " << fit.specs[i].unit << "\n";
  }
  if (!fit.converged) throw ConvergenceError("fit " + target + " did not converge");
  return 0;
}

}  // namespace

int cli_dispatch(int argc, const char* const* argv) {
  CLI::App app{"Waveguide-QED transmon characterization: synthetic experiments, fits and loss-rate reports",
               "wgqed"};
  app.require_subcommand(1, 1);
  app.set_version_flag("--version", std::string(kEngineVersion));
  CliOptions o;
  std::string target;
  const auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "config document (JSON with units)");
    sub->add_option("--out", o.out, "output directory")->required();
    o.seed_opt = sub->add_option("--seed", o.seed, "override the noise seed");
    o.sigma_opt = sub->add_option("--noise-sigma", o.noise_sigma, "override the per-quadrature noise sigma");
    sub->add_flag("--fast-lineshape", o.fast, "closed-form steady state instead of the master equation");
  };
  auto* simulate = app.add_subcommand("simulate", "simulate one protocol and write its record");
  simulate->add_option("protocol", target, "spectroscopy | fluxmap | chevron | rabi | t1")
      ->required()
      ->check(CLI::IsMember({"spectroscopy", "fluxmap", "chevron", "rabi", "t1"}));
  common(simulate);
  auto* fit = app.add_subcommand("fit", "fit a trace or flux points");
  fit->add_option("model", target, "resonator | qubit | rabi | t1 | quadratic")
      ->required()
      ->check(CLI::IsMember({"resonator", "qubit", "rabi", "t1", "quadratic"}));
  fit->add_option("--input", o.input, "trace or points file (overrides fit.trace / fit.points)");
  common(fit);
  auto* characterize = app.add_subcommand("characterize", "full synthetic characterization and comparison table");
  common(characterize);
  auto* report = app.add_subcommand("report", "comparison table from the 'fitted' section of a config");
  common(report);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }
  CLI::App* active = app.get_subcommands().front();
  o.seed_opt = active->get_option("--seed");
  o.sigma_opt = active->get_option("--noise-sigma");
  const std::string command = active->get_name();

  RunManifest m;
  for (int i = 1; i < argc; ++i) m.command += (i > 1 ? " " : "") + std::string(argv[i]);
  m.output_dir = o.out;
  std::optional<OutputDir> out;
  try {
    out.emplace(o.out);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_status(e);
  }

  int status = 0;
  try {
    status = run_command(command, target, o, m, *out);
  } catch (const Error& e) {
    status = exit_status(e);
    m.error = e.what();
  } catch (const fs::filesystem_error& e) {
    status = 3;
    m.error = e.what();
  } catch (const std::exception& e) {
    status = 1;
    m.error = e.what();
  }
  if (!m.error.empty()) std::cerr << "error: " << m.error << "\n";
  m.exit_status = status;
  m.outputs = out->outputs();
  try {
    write_manifest(out->root(), m);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    if (status == 0) status = exit_status(e);
  }
  return status;
}

}  // namespace wgqed
