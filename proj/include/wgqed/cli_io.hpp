#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "wgqed/core.hpp"
#include "wgqed/experiments.hpp"

namespace wgqed {

inline constexpr int kFormatVersion = 1;

/// Input of the `fit` subcommands (section "fit" of a config document).
struct FitInput {
  std::filesystem::path trace;   // spectroscopy / time-domain trace file
  std::filesystem::path points;  // flux points: "bias_ua frequency_hz" per line
  std::optional<double> applied_rabi;  // rad/s
  bool fit_rabi = false;
  bool symmetric = false;
};

/// Fitted values for the comparison table (section "fitted" of a config
/// document). Rates in rad/s, times in s.
struct FittedValues {
  std::optional<double> resonator_gamma10, resonator_decoherence, resonator_rabi_used;
  std::optional<double> qubit_gamma10, qubit_gamma_l, qubit_gamma_phi, qubit_rabi_used, qubit_rabi_fit;
  std::optional<double> t1, t_rabi, time_domain_rabi;
};

struct RunConfig {
  ExperimentConfig experiment;
  std::optional<FitInput> fit;
  std::optional<FittedValues> fitted;
  std::filesystem::path source;  // file the document came from (empty for text input)
};

/// Parses a JSON config document. Unknown keys, wrong types, unit violations
/// and malformed grids raise ParseError naming the key path; physical
/// invariants (e.g. f12 < f01) raise ParseError as well.
RunConfig parse_run_config(const std::filesystem::path& path);
RunConfig parse_run_config_text(const std::string& text, const std::filesystem::path& origin = {});
ExperimentConfig parse_config(const std::filesystem::path& path);

/// Canonical JSON rendering of a config (all defaults explicit).
std::string config_to_json(const ExperimentConfig& cfg);

/// Trace file: `# <axis_kind> <unit> <n_points> format_version=1`, then one
/// `axis re im` row per sample with 17 significant digits.
void write_trace(const std::filesystem::path& path, const ComplexTrace& trace);
ComplexTrace read_trace(const std::filesystem::path& path);
std::string format_trace(const ComplexTrace& trace);
ComplexTrace parse_trace(const std::string& text, const std::string& origin = "trace");

/// One trace per map row in `dir`, plus `index.txt` listing row value and file.
void write_map(const std::filesystem::path& dir, const ComplexMap& map);
ComplexMap read_map(const std::filesystem::path& dir);

/// Loss-rate comparison grid, rates in MHz, "n.a." for empty cells.
std::string format_table(const CrossValidationTable& table);

/// Builds the comparison table from fitted values alone.
CrossValidationTable table_from_fitted(const FittedValues& v, RabiEnvelopeModel model = RabiEnvelopeModel::two_rate);
FittedValues fitted_from_report(const CharacterizationReport& rep);

/// Writes files atomically (temporary file, then rename) and records SHA-256
/// digests for the manifest.
class OutputDir {
 public:
  explicit OutputDir(std::filesystem::path root);
  const std::filesystem::path& root() const { return root_; }
  /// `relative` is taken relative to the root.
  void write(const std::filesystem::path& relative, const std::string& content);
  void write_trace(const std::filesystem::path& relative, const ComplexTrace& trace);
  void write_map(const std::filesystem::path& relative_dir, const ComplexMap& map);
  const std::vector<std::pair<std::string, std::string>>& outputs() const { return outputs_; }

 private:
  std::filesystem::path root_;
  std::vector<std::pair<std::string, std::string>> outputs_;  // relative path, digest
};

struct RunManifest {
  std::string command;
  std::string config_path;
  std::string config_digest;
  std::string output_dir;
  std::uint64_t seed = 0;
  std::optional<double> noise_sigma;
  bool fast_lineshape = false;
  std::string tool_version{kEngineVersion};
  int exit_status = 0;
  std::string error;
  std::vector<std::pair<std::string, std::string>> inputs;   // path, digest
  std::vector<std::pair<std::string, std::string>> outputs;  // path, digest
};

std::string manifest_to_json(const RunManifest& m);
void write_manifest(const std::filesystem::path& dir, const RunManifest& m);

std::string sha256_hex(const std::string& bytes);
std::string file_digest(const std::filesystem::path& path);

/// Record files under `dir`: traces, maps, record.json and the plot-ready
/// column file of the protocol (fig1a spectroscopy, fig1b flux sweep, fig2
/// chevron, fig3a Rabi, fig3b relaxation).
void emit_record(OutputDir& out, const ExperimentRecord& rec, const std::filesystem::path& dir = {});

/// Fit summary: parameters with one-sigma values, derived quantities, notes.
std::string fit_to_json(const FitResult& fit, std::string_view model);

/// report.json, table1.txt, fitted_values.json and plot files for a full run.
void emit_report(OutputDir& out, const CharacterizationReport& rep);

/// report.json and table1.txt from fitted values only.
void emit_table_report(OutputDir& out, const FittedValues& values, RabiEnvelopeModel model);

/// Exit status of the command line: 0 success, 1 validation, 2 convergence or
/// signal, 3 I/O.
int exit_status(const Error& e);

/// Entry point of the command line tool.
int cli_dispatch(int argc, const char* const* argv);

}  // namespace wgqed
