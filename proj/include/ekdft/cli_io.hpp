#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ekdft/model.hpp"
#include "ekdft/optimizer.hpp"
#include "ekdft/scf.hpp"

namespace ekdft {

struct AlgoSelection {
  bool is_scf = false;
  PcgVariant variant = PcgVariant::Pcg;
  StepStrategy strategy = StepStrategy::S3;
};

/// "scf", or "pcg" with optional dash-separated restart-variant and
/// strategy tokens: pcg[-r1|-r2][-s1|-s2|-s3] (any token order). Plain
/// variant and S3 are the defaults.
AlgoSelection parse_algo(const std::string& tag);
std::string algo_label(const AlgoSelection& algo);

struct RunConfig {
  ModelSpec model;
  SmearingSpec smearing;
  AlgoSelection algo;
  OptimizerConfig opt;
  ScfConfig scf;
  uint64_t seed = 1;
  std::string out_dir = "out";
};

/// Strict schema parse: unknown keys are errors, and every violation found
/// is listed in the single ConfigError that is thrown. Deeper structural
/// validation (Hermiticity, overlap coercivity) re-runs at model build.
RunConfig config_from_json(const nlohmann::json& j);
RunConfig parse_config(const std::string& path);

/// Built-in deterministic example systems: (name, one-line description).
std::vector<std::pair<std::string, std::string>> fixture_catalog();
/// The fixture's full config document (valid under config_from_json).
nlohmann::json fixture_json(const std::string& name);
RunConfig make_fixture(const std::string& name);

/// CSV writers with a fixed 17-significant-digit float format so identical
/// (config, seed) runs produce identical bytes.
void write_optimizer_csv(const std::string& path, const std::vector<IterationRecord>& log);
void write_scf_csv(const std::string& path, const std::vector<ScfIterationRecord>& log);

/// Python script shipped next to every run: energy error and both gradient
/// norms against the iteration count, one curve per CSV in the directory.
std::string plot_script_text();

struct RunArtifacts {
  bool converged = false;
  int iterations = 0;
  double error_metric = 0.0;
  double f_ha = 0.0;
  std::string csv_path;
  std::string summary_path;
};

/// Builds the model, executes the selected algorithm, and writes the
/// iteration CSV, summary JSON, and plot script into cfg.out_dir. A
/// non-empty suffix tags the CSV/summary file names (the compare driver
/// runs several algorithms into one directory).
RunArtifacts run_job(const RunConfig& cfg, const std::string& suffix = "");

} // namespace ekdft
