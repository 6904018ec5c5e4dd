// Command-line driver: run one algorithm, compare several, inspect the
// fixture catalog, or validate a config file.
//
// Exit codes: 0 success; 2 config/usage errors (bad flags, schema or model
// validation failures); 3 numerical failures (line search, eigensolver,
// occupation solver); 4 run completed but did not converge.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "ekdft/cli_io.hpp"

namespace {

using namespace ekdft;

struct CommonFlags {
  std::string config_path;
  std::string fixture_name;
  std::string algo_tag;
  std::optional<uint64_t> seed;
  std::string out_dir;
  std::optional<int> max_iter;
  std::optional<double> tol;
};

void add_common_flags(CLI::App* cmd, CommonFlags& f, bool with_algo) {
  auto* cfg = cmd->add_option("--config", f.config_path, "path to a JSON config file");
  auto* fix = cmd->add_option("--fixture", f.fixture_name,
                              "built-in fixture name (see `fixtures list`)");
  cfg->excludes(fix);
  fix->excludes(cfg);
  if (with_algo)
    cmd->add_option("--algo", f.algo_tag, "algorithm tag: scf | pcg[-r1|-r2][-s1|-s2|-s3]");
  cmd->add_option("--seed", f.seed, "random seed for the starting point");
  cmd->add_option("--out-dir", f.out_dir, "output directory for CSV/JSON/plot artifacts");
  cmd->add_option("--max-iter", f.max_iter, "iteration cap for the selected algorithm");
  cmd->add_option("--tol", f.tol,
                  "convergence tolerance (gradient metric for pcg, density residual for scf)");
}

RunConfig load_config(const CommonFlags& f) {
  if (f.config_path.empty() == f.fixture_name.empty())
    throw ConfigError("pass exactly one of --config PATH or --fixture NAME");
  RunConfig cfg =
      f.config_path.empty() ? make_fixture(f.fixture_name) : parse_config(f.config_path);
  if (!f.algo_tag.empty()) cfg.algo = parse_algo(f.algo_tag);
  if (f.seed) cfg.seed = *f.seed;
  if (!f.out_dir.empty()) cfg.out_dir = f.out_dir;
  if (f.max_iter) {
    if (*f.max_iter < 0) throw ConfigError("--max-iter: must be nonnegative");
    (cfg.algo.is_scf ? cfg.scf.max_iter : cfg.opt.max_iter) = *f.max_iter;
  }
  if (f.tol) {
    if (!(*f.tol > 0.0)) throw ConfigError("--tol: must be positive");
    (cfg.algo.is_scf ? cfg.scf.eps_density : cfg.opt.tol) = *f.tol;
  }
  return cfg;
}

void print_run_report(const RunConfig& cfg, const RunArtifacts& art) {
  std::printf("algorithm     %s\n", algo_label(cfg.algo).c_str());
  std::printf("seed          %llu\n", static_cast<unsigned long long>(cfg.seed));
  std::printf("converged     %s (%d iterations)\n", art.converged ? "yes" : "no",
              art.iterations);
  std::printf("error metric  %.6e\n", art.error_metric);
  std::printf("free energy   %.12f Ha   %.12f Ry\n", art.f_ha, art.f_ha * hartree_to_ry);
  std::printf("artifacts     %s\n              %s\n", art.csv_path.c_str(),
              art.summary_path.c_str());
}

std::vector<std::string> split_tags(const std::string& list) {
  std::vector<std::string> out;
  std::stringstream ss(list);
  std::string tok;
  while (std::getline(ss, tok, ','))
    if (!tok.empty()) out.push_back(tok);
  if (out.empty()) throw ConfigError("--algos: expected a comma-separated list of tags");
  for (size_t i = 0; i < out.size(); ++i)
    for (size_t k = i + 1; k < out.size(); ++k)
      if (out[i] == out[k]) throw ConfigError("--algos: duplicate tag '" + out[i] + "'");
  return out;
}

int cmd_run(const CommonFlags& flags) {
  const RunConfig cfg = load_config(flags);
  const RunArtifacts art = run_job(cfg);
  print_run_report(cfg, art);
  return art.converged ? 0 : 4;
}

int cmd_compare(const CommonFlags& flags, const std::string& algos) {
  const RunConfig base = load_config(flags);
  const std::vector<std::string> tags = split_tags(algos);

  nlohmann::json comparison;
  comparison["seed"] = base.seed;
  comparison["runs"] = nlohmann::json::object();
  std::printf("%-12s %-9s %8s %14s %20s\n", "algo", "converged", "iters", "error_metric",
              "f_ha");
  for (const std::string& tag : tags) {
    RunConfig cfg = base;
    cfg.algo = parse_algo(tag);
    if (flags.max_iter) (cfg.algo.is_scf ? cfg.scf.max_iter : cfg.opt.max_iter) = *flags.max_iter;
    if (flags.tol) (cfg.algo.is_scf ? cfg.scf.eps_density : cfg.opt.tol) = *flags.tol;
    const std::string label = algo_label(cfg.algo);
    const RunArtifacts art = run_job(cfg, label);
    comparison["runs"][label] = {{"converged", art.converged},
                                 {"iterations", art.iterations},
                                 {"error_metric", art.error_metric},
                                 {"f_ha", art.f_ha},
                                 {"f_ry", art.f_ha * hartree_to_ry},
                                 {"csv", art.csv_path},
                                 {"summary", art.summary_path}};
    std::printf("%-12s %-9s %8d %14.6e %20.12f\n", label.c_str(),
                art.converged ? "yes" : "no", art.iterations, art.error_metric, art.f_ha);
  }
  const std::string path =
      (std::filesystem::path(base.out_dir) / "compare.json").string();
  std::ofstream out(path, std::ios::binary);
  out << comparison.dump(2) << "\n";
  if (!out.good()) throw Error("write failed: " + path);
  std::printf("comparison    %s\n", path.c_str());
  return 0;
}

int cmd_fixtures(bool show, const std::string& name) {
  if (show) {
    std::cout << fixture_json(name).dump(2) << "\n";
    return 0;
  }
  for (const auto& [fixture, description] : fixture_catalog())
    std::printf("%-20s %s\n", fixture.c_str(), description.c_str());
  return 0;
}

int cmd_validate(const CommonFlags& flags) {
  const RunConfig cfg = load_config(flags);
  std::printf("config OK: algorithm %s, seed %llu, %d k-point(s), e_cut %g\n",
              algo_label(cfg.algo).c_str(), static_cast<unsigned long long>(cfg.seed),
              int(cfg.model.kpoints.points.size()), cfg.model.ecut);
  return 0;
}

int guarded(int (*body)(const CommonFlags&), const CommonFlags& flags) {
  return body(flags);
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"plane-wave ensemble free-energy minimiser"};
  app.require_subcommand(1);

  CommonFlags run_flags;
  CLI::App* run_cmd = app.add_subcommand("run", "execute one algorithm and write artifacts");
  add_common_flags(run_cmd, run_flags, true);

  CommonFlags cmp_flags;
  std::string algos = "pcg-s1,pcg-s2,pcg-s3";
  CLI::App* cmp_cmd =
      app.add_subcommand("compare", "run several algorithms on one model into one directory");
  add_common_flags(cmp_cmd, cmp_flags, false);
  cmp_cmd->add_option("--algos", algos, "comma-separated algorithm tags")
      ->capture_default_str();

  CLI::App* fix_cmd = app.add_subcommand("fixtures", "inspect the built-in fixture catalog");
  fix_cmd->require_subcommand(1);
  CLI::App* fix_list = fix_cmd->add_subcommand("list", "list fixture names and descriptions");
  std::string show_name;
  CLI::App* fix_show = fix_cmd->add_subcommand("show", "print a fixture's config as JSON");
  fix_show->add_option("name", show_name, "fixture name")->required();

  CommonFlags val_flags;
  CLI::App* val_cmd =
      app.add_subcommand("validate", "parse and validate a config without running");
  add_common_flags(val_cmd, val_flags, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2; // usage problems belong to the config family
  }

  try {
    if (*run_cmd) return guarded(cmd_run, run_flags);
    if (*cmp_cmd) return cmd_compare(cmp_flags, algos);
    if (*fix_list) return cmd_fixtures(false, "");
    if (*fix_show) return cmd_fixtures(true, show_name);
    if (*val_cmd) return guarded(cmd_validate, val_flags);
  } catch (const Error& e) {
    const bool config_family = dynamic_cast<const ConfigError*>(&e) ||
                               dynamic_cast<const InvalidCellError*>(&e) ||
                               dynamic_cast<const ShapeError*>(&e) ||
                               dynamic_cast<const EmptyBasisError*>(&e) ||
                               dynamic_cast<const InvalidMatrixError*>(&e) ||
                               dynamic_cast<const InfeasibleError*>(&e);
    std::cerr << "error: " << e.what() << "\n";
    return config_family ? 2 : 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 2;
}
