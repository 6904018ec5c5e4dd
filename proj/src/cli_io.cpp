#include "ekdft/cli_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ekdft/gradients.hpp"

namespace ekdft {

using nlohmann::json;

namespace {

std::string join_path(const std::string& where, const std::string& key) {
  return where.empty() ? key : where + "." + key;
}

using Violations = std::vector<std::string>;

void check_keys(const json& j, const std::string& where, const std::vector<std::string>& allowed,
                Violations& viol) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
      viol.push_back(join_path(where, it.key()) + ": unknown key");
}

bool require_object(const json& j, const std::string& where, Violations& viol) {
  if (j.is_object()) return true;
  viol.push_back(where + ": expected an object");
  return false;
}

double get_number(const json& j, const std::string& where, const char* key, double fallback,
                  Violations& viol, bool required = false) {
  if (!j.contains(key)) {
    if (required) viol.push_back(join_path(where, key) + ": required");
    return fallback;
  }
  const json& v = j.at(key);
  if (!v.is_number()) {
    viol.push_back(join_path(where, key) + ": expected a number");
    return fallback;
  }
  return v.get<double>();
}

int get_integer(const json& j, const std::string& where, const char* key, int fallback,
                Violations& viol, bool required = false) {
  if (!j.contains(key)) {
    if (required) viol.push_back(join_path(where, key) + ": required");
    return fallback;
  }
  const json& v = j.at(key);
  if (!v.is_number_integer()) {
    viol.push_back(join_path(where, key) + ": expected an integer");
    return fallback;
  }
  return v.get<int>();
}

bool get_boolean(const json& j, const std::string& where, const char* key, bool fallback,
                 Violations& viol) {
  if (!j.contains(key)) return fallback;
  const json& v = j.at(key);
  if (!v.is_boolean()) {
    viol.push_back(join_path(where, key) + ": expected true/false");
    return fallback;
  }
  return v.get<bool>();
}

std::string get_text(const json& j, const std::string& where, const char* key,
                     const std::string& fallback, Violations& viol, bool required = false) {
  if (!j.contains(key)) {
    if (required) viol.push_back(join_path(where, key) + ": required");
    return fallback;
  }
  const json& v = j.at(key);
  if (!v.is_string()) {
    viol.push_back(join_path(where, key) + ": expected a string");
    return fallback;
  }
  return v.get<std::string>();
}

Vec3 get_vec3(const json& v, const std::string& where, Violations& viol) {
  if (!v.is_array() || v.size() != 3 || !std::all_of(v.begin(), v.end(), [](const json& x) {
        return x.is_number();
      })) {
    viol.push_back(where + ": expected three numbers");
    return Vec3::Zero();
  }
  return Vec3(v[0].get<double>(), v[1].get<double>(), v[2].get<double>());
}

/// Matrix entry: a plain number or a [re, im] pair.
cdouble get_complex_entry(const json& v, const std::string& where, Violations& viol) {
  if (v.is_number()) return cdouble(v.get<double>(), 0.0);
  if (v.is_array() && v.size() == 2 && v[0].is_number() && v[1].is_number())
    return cdouble(v[0].get<double>(), v[1].get<double>());
  viol.push_back(where + ": expected a number or a [re, im] pair");
  return cdouble(0.0, 0.0);
}

Eigen::MatrixXcd get_complex_matrix(const json& j, const std::string& where, const char* key,
                                    Violations& viol) {
  if (!j.contains(key)) return Eigen::MatrixXcd();
  const json& rows = j.at(key);
  if (!rows.is_array() || rows.empty()) {
    viol.push_back(join_path(where, key) + ": expected an array of rows");
    return Eigen::MatrixXcd();
  }
  const size_t n = rows.size();
  Eigen::MatrixXcd out = Eigen::MatrixXcd::Zero(Eigen::Index(n), Eigen::Index(n));
  for (size_t r = 0; r < n; ++r) {
    const json& row = rows[r];
    if (!row.is_array() || row.size() != n) {
      viol.push_back(join_path(where, key) + ": expected a square matrix");
      return Eigen::MatrixXcd();
    }
    for (size_t c = 0; c < n; ++c) {
      std::ostringstream cell;
      cell << join_path(where, key) << "[" << r << "][" << c << "]";
      out(Eigen::Index(r), Eigen::Index(c)) = get_complex_entry(row[c], cell.str(), viol);
    }
  }
  return out;
}

std::vector<GaussianField> get_gaussian_fields(const json& j, const std::string& where,
                                               const char* key, Violations& viol) {
  std::vector<GaussianField> out;
  if (!j.contains(key)) return out;
  const json& arr = j.at(key);
  if (!arr.is_array()) {
    viol.push_back(join_path(where, key) + ": expected an array");
    return out;
  }
  for (size_t i = 0; i < arr.size(); ++i) {
    std::ostringstream here;
    here << join_path(where, key) << "[" << i << "]";
    const json& f = arr[i];
    if (!require_object(f, here.str(), viol)) continue;
    check_keys(f, here.str(), {"amplitude", "width", "centers"}, viol);
    GaussianField field;
    field.amplitude = get_number(f, here.str(), "amplitude", 0.0, viol, true);
    field.width = get_number(f, here.str(), "width", 1.0, viol, true);
    if (!(field.width > 0.0)) viol.push_back(here.str() + ".width: must be positive");
    if (f.contains("centers") && f.at("centers").is_array()) {
      for (size_t c = 0; c < f.at("centers").size(); ++c) {
        std::ostringstream cw;
        cw << here.str() << ".centers[" << c << "]";
        field.centers.push_back(get_vec3(f.at("centers")[c], cw.str(), viol));
      }
    } else {
      viol.push_back(here.str() + ".centers: required array of fractional positions");
    }
    out.push_back(std::move(field));
  }
  return out;
}

std::vector<ProjectorSpec> get_projectors(const json& j, const std::string& where,
                                          Violations& viol) {
  std::vector<ProjectorSpec> out;
  if (!j.contains("projectors")) return out;
  const json& arr = j.at("projectors");
  if (!arr.is_array()) {
    viol.push_back(join_path(where, "projectors") + ": expected an array");
    return out;
  }
  for (size_t i = 0; i < arr.size(); ++i) {
    std::ostringstream here;
    here << join_path(where, "projectors") << "[" << i << "]";
    const json& p = arr[i];
    if (!require_object(p, here.str(), viol)) continue;
    check_keys(p, here.str(), {"amplitude", "width", "center"}, viol);
    ProjectorSpec spec;
    spec.amplitude = get_number(p, here.str(), "amplitude", 1.0, viol, true);
    spec.width = get_number(p, here.str(), "width", 1.0, viol, true);
    if (!(spec.width > 0.0)) viol.push_back(here.str() + ".width: must be positive");
    if (p.contains("center"))
      spec.center = get_vec3(p.at("center"), here.str() + ".center", viol);
    else
      viol.push_back(here.str() + ".center: required");
    out.push_back(spec);
  }
  return out;
}

void hermitian_or_fail(const Eigen::MatrixXcd& m, const std::string& name, Violations& viol) {
  if (m.size() == 0) return;
  const double scale = std::max(1.0, m.norm());
  if ((m - m.adjoint()).norm() > 1e-12 * scale) viol.push_back(name + ": must be Hermitian");
}

SmearingSpec parse_smearing(const json& j, Violations& viol) {
  SmearingSpec spec;
  const std::string where = "smearing";
  if (!require_object(j, where, viol)) return spec;
  check_keys(j, where, {"kind", "sigma", "mp_order", "mv_a"}, viol);
  const std::string kind = get_text(j, where, "kind", "fermi_dirac", viol, true);
  const double sigma = get_number(j, where, "sigma", 0.01, viol, true);
  if (!(sigma > 0.0)) viol.push_back("smearing.sigma: must be positive");
  const int mp_order = get_integer(j, where, "mp_order", 1, viol);
  const double mv_a = get_number(j, where, "mv_a", -0.5634, viol);
  if (kind == "fermi_dirac") {
    spec = SmearingSpec::fermi_dirac(std::max(sigma, 1e-300));
  } else if (kind == "gaussian") {
    spec = SmearingSpec::gaussian(std::max(sigma, 1e-300));
  } else if (kind == "methfessel_paxton") {
    if (mp_order < 1) viol.push_back("smearing.mp_order: must be at least 1");
    spec = SmearingSpec::methfessel_paxton(std::max(sigma, 1e-300), std::max(mp_order, 1));
  } else if (kind == "marzari_vanderbilt") {
    spec = SmearingSpec::marzari_vanderbilt(std::max(sigma, 1e-300), mv_a);
  } else {
    viol.push_back("smearing.kind: unknown kind '" + kind +
                   "' (fermi_dirac, gaussian, methfessel_paxton, marzari_vanderbilt)");
  }
  return spec;
}

void parse_optimizer_table(const json& j, OptimizerConfig& opt, Violations& viol) {
  const std::string where = "algorithm.pcg";
  if (!require_object(j, where, viol)) return;
  check_keys(j, where,
             {"nu", "alpha", "gamma", "a", "t_min_psi", "t_min_eta", "t_trial_init",
              "theta_max", "ratio_bounds_enabled", "c_lower", "c_upper", "max_iter", "tol",
              "armijo_safeguard", "armijo_max_halvings"},
             viol);
  opt.nu = get_number(j, where, "nu", opt.nu, viol);
  opt.alpha = get_number(j, where, "alpha", opt.alpha, viol);
  opt.gamma = get_number(j, where, "gamma", opt.gamma, viol);
  opt.a = get_number(j, where, "a", opt.a, viol);
  opt.t_min_psi = get_number(j, where, "t_min_psi", opt.t_min_psi, viol);
  opt.t_min_eta = get_number(j, where, "t_min_eta", opt.t_min_eta, viol);
  opt.t_trial_init = get_number(j, where, "t_trial_init", opt.t_trial_init, viol);
  opt.theta_max = get_number(j, where, "theta_max", opt.theta_max, viol);
  opt.ratio_bounds_enabled =
      get_boolean(j, where, "ratio_bounds_enabled", opt.ratio_bounds_enabled, viol);
  opt.c_lower = get_number(j, where, "c_lower", opt.c_lower, viol);
  opt.c_upper = get_number(j, where, "c_upper", opt.c_upper, viol);
  opt.max_iter = get_integer(j, where, "max_iter", opt.max_iter, viol);
  opt.tol = get_number(j, where, "tol", opt.tol, viol);
  opt.armijo_safeguard = get_boolean(j, where, "armijo_safeguard", opt.armijo_safeguard, viol);
  opt.armijo_max_halvings =
      get_integer(j, where, "armijo_max_halvings", opt.armijo_max_halvings, viol);

  if (!(opt.nu > 0.0 && opt.nu <= 0.5)) viol.push_back(where + ".nu: must lie in (0, 1/2]");
  if (!(opt.alpha >= 0.0 && opt.alpha < 1.0))
    viol.push_back(where + ".alpha: must lie in [0, 1)");
  if (!(opt.gamma >= 0.0 && opt.gamma < 1.0))
    viol.push_back(where + ".gamma: must lie in [0, 1)");
  if (!(opt.a > 0.0)) viol.push_back(where + ".a: must be positive");
  if (!(opt.t_min_psi > 0.0)) viol.push_back(where + ".t_min_psi: must be positive");
  if (!(opt.t_min_eta > 0.0)) viol.push_back(where + ".t_min_eta: must be positive");
  if (!(opt.t_trial_init > 0.0)) viol.push_back(where + ".t_trial_init: must be positive");
  if (!(opt.theta_max > 0.0)) viol.push_back(where + ".theta_max: must be positive");
  if (opt.max_iter < 0) viol.push_back(where + ".max_iter: must be nonnegative");
  if (!(opt.tol > 0.0)) viol.push_back(where + ".tol: must be positive");
  if (opt.armijo_max_halvings < 1)
    viol.push_back(where + ".armijo_max_halvings: must be at least 1");
  if (opt.ratio_bounds_enabled && !(opt.c_lower > 0.0 && opt.c_upper >= opt.c_lower))
    viol.push_back(where + ": ratio bounds need 0 < c_lower <= c_upper");
}

void parse_scf_table(const json& j, ScfConfig& scf, Violations& viol) {
  const std::string where = "algorithm.scf";
  if (!require_object(j, where, viol)) return;
  check_keys(j, where, {"mixing", "eps_density", "max_iter", "eig_tol", "dense_threshold"},
             viol);
  if (j.contains("mixing")) {
    const json& m = j.at("mixing");
    const std::string mw = where + ".mixing";
    if (require_object(m, mw, viol)) {
      check_keys(m, mw, {"kind", "factor", "history"}, viol);
      const std::string kind = get_text(m, mw, "kind", "linear", viol);
      if (kind == "linear")
        scf.mixing.kind = MixingKind::Linear;
      else if (kind == "broyden")
        scf.mixing.kind = MixingKind::BroydenLite;
      else
        viol.push_back(mw + ".kind: unknown kind '" + kind + "' (linear, broyden)");
      scf.mixing.factor = get_number(m, mw, "factor", scf.mixing.factor, viol);
      scf.mixing.history = get_integer(m, mw, "history", scf.mixing.history, viol);
    }
  }
  scf.eps_density = get_number(j, where, "eps_density", scf.eps_density, viol);
  scf.max_iter = get_integer(j, where, "max_iter", scf.max_iter, viol);
  scf.eig_tol = get_number(j, where, "eig_tol", scf.eig_tol, viol);
  scf.dense_threshold = get_integer(j, where, "dense_threshold", scf.dense_threshold, viol);

  if (!(scf.mixing.factor > 0.0 && scf.mixing.factor <= 1.0))
    viol.push_back(where + ".mixing.factor: must lie in (0, 1]");
  if (scf.mixing.history < 1) viol.push_back(where + ".mixing.history: must be at least 1");
  if (!(scf.eps_density > 0.0)) viol.push_back(where + ".eps_density: must be positive");
  if (scf.max_iter < 1) viol.push_back(where + ".max_iter: must be at least 1");
  if (!(scf.eig_tol > 0.0)) viol.push_back(where + ".eig_tol: must be positive");
  if (scf.dense_threshold < 1) viol.push_back(where + ".dense_threshold: must be positive");
}

std::string format_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

json energy_json(const EnergyBreakdown& e, double unit) {
  json out;
  out["kinetic_nonlocal"] = e.kinetic_nonlocal * unit;
  out["local"] = e.local * unit;
  out["hartree"] = e.hartree * unit;
  out["xc"] = e.xc * unit;
  out["entropy"] = e.entropy * unit;
  out["total"] = e.total * unit;
  return out;
}

json vectors_json(const std::vector<Eigen::VectorXd>& per_k) {
  json out = json::array();
  for (const Eigen::VectorXd& v : per_k) {
    json row = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) row.push_back(v[i]);
    out.push_back(std::move(row));
  }
  return out;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write file: " + path);
  out << text;
  if (!out.good()) throw Error("write failed: " + path);
}

} // namespace

AlgoSelection parse_algo(const std::string& tag) {
  AlgoSelection out;
  if (tag == "scf") {
    out.is_scf = true;
    return out;
  }
  std::vector<std::string> tokens;
  std::stringstream ss(tag);
  std::string tok;
  while (std::getline(ss, tok, '-')) tokens.push_back(tok);
  const std::string grammar = "expected scf | pcg[-r1|-r2][-s1|-s2|-s3]";
  if (tokens.empty() || tokens.front() != "pcg")
    throw ConfigError("unknown algorithm '" + tag + "': " + grammar);
  bool saw_variant = false, saw_strategy = false;
  for (size_t i = 1; i < tokens.size(); ++i) {
    const std::string& t = tokens[i];
    if (t == "r1" || t == "r2") {
      if (saw_variant) throw ConfigError("algorithm '" + tag + "': duplicate variant token");
      out.variant = t == "r1" ? PcgVariant::PcgR1 : PcgVariant::PcgR2;
      saw_variant = true;
    } else if (t == "s1" || t == "s2" || t == "s3") {
      if (saw_strategy) throw ConfigError("algorithm '" + tag + "': duplicate strategy token");
      out.strategy = t == "s1"   ? StepStrategy::S1
                     : t == "s2" ? StepStrategy::S2
                                 : StepStrategy::S3;
      saw_strategy = true;
    } else {
      throw ConfigError("unknown algorithm token '" + t + "' in '" + tag + "': " + grammar);
    }
  }
  return out;
}

std::string algo_label(const AlgoSelection& algo) {
  if (algo.is_scf) return "scf";
  std::string out = "pcg";
  if (algo.variant == PcgVariant::PcgR1) out += "-r1";
  if (algo.variant == PcgVariant::PcgR2) out += "-r2";
  switch (algo.strategy) {
    case StepStrategy::S1: out += "-s1"; break;
    case StepStrategy::S2: out += "-s2"; break;
    case StepStrategy::S3: out += "-s3"; break;
  }
  return out;
}

RunConfig config_from_json(const json& j) {
  Violations viol;
  RunConfig cfg;

  if (!j.is_object()) throw ConfigError("config root must be a JSON object");
  check_keys(j, "",
             {"cell", "kpoints", "e_cut", "model", "smearing", "algorithm", "seed", "out_dir"},
             viol);

  // Cell and k-points.
  UnitCell cell;
  bool cell_ok = false;
  if (!j.contains("cell")) {
    viol.push_back("cell: required (three lattice vectors, bohr)");
  } else if (!j.at("cell").is_array() || j.at("cell").size() != 3) {
    viol.push_back("cell: expected three lattice vectors");
  } else {
    const Vec3 a1 = get_vec3(j.at("cell")[0], "cell[0]", viol);
    const Vec3 a2 = get_vec3(j.at("cell")[1], "cell[1]", viol);
    const Vec3 a3 = get_vec3(j.at("cell")[2], "cell[2]", viol);
    try {
      cell = UnitCell::from_vectors(a1, a2, a3);
      cell_ok = true;
    } catch (const Error& e) {
      viol.push_back(std::string("cell: ") + e.what());
    }
  }

  std::vector<Vec3> kfrac;
  std::vector<double> kweights;
  if (!j.contains("kpoints")) {
    viol.push_back("kpoints: required");
  } else if (!j.at("kpoints").is_array() || j.at("kpoints").empty()) {
    viol.push_back("kpoints: expected a nonempty array");
  } else {
    const json& arr = j.at("kpoints");
    for (size_t i = 0; i < arr.size(); ++i) {
      std::ostringstream here;
      here << "kpoints[" << i << "]";
      const json& kp = arr[i];
      if (!require_object(kp, here.str(), viol)) continue;
      check_keys(kp, here.str(), {"point", "weight"}, viol);
      if (kp.contains("point"))
        kfrac.push_back(get_vec3(kp.at("point"), here.str() + ".point", viol));
      else
        viol.push_back(here.str() + ".point: required (fractional reciprocal coordinates)");
      kweights.push_back(get_number(kp, here.str(), "weight", 0.0, viol, true));
    }
  }

  cfg.model.ecut = get_number(j, "", "e_cut", 1.0, viol, true);
  if (!(cfg.model.ecut > 0.0)) viol.push_back("e_cut: must be positive");

  // Model table.
  if (!j.contains("model")) {
    viol.push_back("model: required");
  } else if (require_object(j.at("model"), "model", viol)) {
    const json& m = j.at("model");
    check_keys(m, "model",
               {"n_electrons", "n_orbitals", "xc", "local_potential", "projectors", "d_matrix",
                "q_matrix", "aug_width", "aug_center", "init_charges"},
               viol);
    cfg.model.n_electrons = get_number(m, "model", "n_electrons", 2.0, viol, true);
    cfg.model.n_orbitals = get_integer(m, "model", "n_orbitals", 2, viol, true);
    const std::string xc = get_text(m, "model", "xc", "none", viol);
    if (xc == "none")
      cfg.model.xc = XcKind::None;
    else if (xc == "slater_x")
      cfg.model.xc = XcKind::SlaterX;
    else
      viol.push_back("model.xc: unknown kind '" + xc + "' (none, slater_x)");
    cfg.model.local_potential = get_gaussian_fields(m, "model", "local_potential", viol);
    cfg.model.projectors = get_projectors(m, "model", viol);
    cfg.model.d_matrix = get_complex_matrix(m, "model", "d_matrix", viol);
    cfg.model.q_matrix = get_complex_matrix(m, "model", "q_matrix", viol);
    cfg.model.aug_width = get_number(m, "model", "aug_width", 1.0, viol);
    if (m.contains("aug_center"))
      cfg.model.aug_center = get_vec3(m.at("aug_center"), "model.aug_center", viol);
    cfg.model.init_charges = get_gaussian_fields(m, "model", "init_charges", viol);

    if (!(cfg.model.n_electrons > 0.0)) viol.push_back("model.n_electrons: must be positive");
    if (cfg.model.n_orbitals < 1) viol.push_back("model.n_orbitals: must be at least 1");
    if (!(cfg.model.n_electrons < 2.0 * cfg.model.n_orbitals))
      viol.push_back("model: n_electrons must stay below 2*n_orbitals");
    if (double(cfg.model.n_orbitals) <= std::ceil(cfg.model.n_electrons / 2.0))
      viol.push_back("model: n_orbitals must exceed ceil(n_electrons/2) (room above the "
                     "occupied window)");
    if (!(cfg.model.aug_width > 0.0)) viol.push_back("model.aug_width: must be positive");
    const size_t nch = cfg.model.projectors.size();
    if (cfg.model.d_matrix.size() > 0 && size_t(cfg.model.d_matrix.rows()) != nch)
      viol.push_back("model.d_matrix: dimension must match the number of projectors");
    if (cfg.model.q_matrix.size() > 0 && size_t(cfg.model.q_matrix.rows()) != nch)
      viol.push_back("model.q_matrix: dimension must match the number of projectors");
    hermitian_or_fail(cfg.model.d_matrix, "model.d_matrix", viol);
    hermitian_or_fail(cfg.model.q_matrix, "model.q_matrix", viol);
  }

  // Smearing.
  if (!j.contains("smearing"))
    viol.push_back("smearing: required");
  else
    cfg.smearing = parse_smearing(j.at("smearing"), viol);

  // Algorithm section.
  if (j.contains("algorithm")) {
    const json& a = j.at("algorithm");
    if (require_object(a, "algorithm", viol)) {
      check_keys(a, "algorithm", {"method", "variant", "strategy", "pcg", "scf"}, viol);
      const std::string method = get_text(a, "algorithm", "method", "pcg", viol);
      if (method == "scf")
        cfg.algo.is_scf = true;
      else if (method != "pcg")
        viol.push_back("algorithm.method: unknown method '" + method + "' (pcg, scf)");
      const std::string variant = get_text(a, "algorithm", "variant", "plain", viol);
      if (variant == "plain")
        cfg.algo.variant = PcgVariant::Pcg;
      else if (variant == "r1")
        cfg.algo.variant = PcgVariant::PcgR1;
      else if (variant == "r2")
        cfg.algo.variant = PcgVariant::PcgR2;
      else
        viol.push_back("algorithm.variant: unknown variant '" + variant + "' (plain, r1, r2)");
      const std::string strategy = get_text(a, "algorithm", "strategy", "s3", viol);
      if (strategy == "s1")
        cfg.algo.strategy = StepStrategy::S1;
      else if (strategy == "s2")
        cfg.algo.strategy = StepStrategy::S2;
      else if (strategy == "s3")
        cfg.algo.strategy = StepStrategy::S3;
      else
        viol.push_back("algorithm.strategy: unknown strategy '" + strategy + "' (s1, s2, s3)");
      if (a.contains("pcg")) parse_optimizer_table(a.at("pcg"), cfg.opt, viol);
      if (a.contains("scf")) parse_scf_table(a.at("scf"), cfg.scf, viol);
    }
  }

  if (j.contains("seed")) {
    const json& s = j.at("seed");
    if (!s.is_number_unsigned() && !s.is_number_integer())
      viol.push_back("seed: expected a nonnegative integer");
    else if (s.is_number_integer() && s.get<long long>() < 0)
      viol.push_back("seed: expected a nonnegative integer");
    else
      cfg.seed = s.get<uint64_t>();
  }
  cfg.out_dir = get_text(j, "", "out_dir", cfg.out_dir, viol);

  // K-point assembly happens late so the weight-sum check lands in the same
  // violation list as everything else.
  if (cell_ok && !kfrac.empty() && kweights.size() == kfrac.size()) {
    const ReciprocalLattice recip = build_reciprocal(cell);
    std::vector<Vec3> kcart;
    kcart.reserve(kfrac.size());
    for (const Vec3& f : kfrac) kcart.push_back(recip.cartesian(f));
    try {
      cfg.model.kpoints = KpointSet::create(std::move(kcart), kweights);
      cfg.model.cell = cell;
    } catch (const Error& e) {
      viol.push_back(std::string("kpoints: ") + e.what());
    }
  }

  if (!viol.empty()) {
    std::ostringstream msg;
    msg << "invalid config (" << viol.size() << (viol.size() == 1 ? " violation" : " violations")
        << "):";
    for (const std::string& v : viol) msg << "\n  - " << v;
    throw ConfigError(msg.str());
  }
  return cfg;
}

RunConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("JSON syntax error in ") + path + ": " + e.what());
  }
  return config_from_json(j);
}

std::vector<std::pair<std::string, std::string>> fixture_catalog() {
  return {
      {"free-electron",
       "empty potential at one k-point: kinetic shells, uniform density, partially filled "
       "degenerate shell"},
      {"smooth-potential",
       "single Gaussian well with Slater exchange: insulator-like occupations, smooth density"},
      {"toy-metal",
       "anisotropic box at a generic k-point: exactly degenerate band pairs straddle the "
       "chemical potential under Fermi-Dirac smearing"},
      {"rank-nonlocal",
       "two nonlocal channels with a nonzero coupling matrix, standard overlap, two k-points"},
      {"generalized-overlap",
       "two channels with a nonzero augmentation matrix: generalized B-metric and augmented "
       "density"},
      {"scf-adversarial",
       "elongated metallic box: long-wavelength density modes make linear mixing at 0.9 "
       "diverge (charge sloshing) while direct minimisation converges"},
  };
}

json fixture_json(const std::string& name) {
  json j;
  const auto cube = [](double l) {
    return json::array({json::array({l, 0.0, 0.0}), json::array({0.0, l, 0.0}),
                        json::array({0.0, 0.0, l})});
  };
  const auto gamma_point = [] {
    return json::array({json{{"point", {0.0, 0.0, 0.0}}, {"weight", 2.0}}});
  };

  if (name == "free-electron") {
    j["cell"] = cube(6.2831853071795864769);
    j["kpoints"] = gamma_point();
    j["e_cut"] = 0.6;
    // Seven plane waves (the constant mode plus the full sixfold shell) so
    // the fractional shell occupation is representable inside the span.
    j["model"] = {{"n_electrons", 4.0}, {"n_orbitals", 7}, {"xc", "none"}};
    j["smearing"] = {{"kind", "fermi_dirac"}, {"sigma", 0.01}};
    j["seed"] = 11;
  } else if (name == "smooth-potential") {
    j["cell"] = cube(8.0);
    j["kpoints"] = gamma_point();
    j["e_cut"] = 2.0;
    j["model"] = {{"n_electrons", 2.0},
                  {"n_orbitals", 4},
                  {"xc", "slater_x"},
                  {"local_potential",
                   json::array({json{{"amplitude", -2.0},
                                     {"width", 1.2},
                                     {"centers", json::array({{0.5, 0.5, 0.5}})}}})},
                  {"init_charges",
                   json::array({json{{"amplitude", 2.0},
                                     {"width", 1.5},
                                     {"centers", json::array({{0.5, 0.5, 0.5}})}}})}};
    j["smearing"] = {{"kind", "fermi_dirac"}, {"sigma", 0.01}};
    j["seed"] = 3;
  } else if (name == "toy-metal") {
    // Box lengths and the off-axis k-point are chosen so that the first
    // excited levels come in exactly degenerate +/- pairs (two per axis)
    // while nothing else is accidentally degenerate.  Sixteen electrons in
    // a ten-orbital span put the chemical potential between the two
    // frontier pairs, and the eleventh plane wave keeps the span boundary
    // strictly inside the basis.
    j["cell"] = json::array({json::array({9.27, 0.0, 0.0}), json::array({0.0, 9.20, 0.0}),
                             json::array({0.0, 0.0, 9.45})});
    j["kpoints"] = json::array({json{{"point", {0.424, 0.0, 0.0}}, {"weight", 2.0}}});
    j["e_cut"] = 0.48;
    j["model"] = {{"n_electrons", 16.0},
                  {"n_orbitals", 10},
                  {"xc", "none"},
                  {"local_potential",
                   json::array({json{{"amplitude", -0.002},
                                     {"width", 2.5},
                                     {"centers", json::array({{0.41, 0.53, 0.62}})}}})},
                  {"init_charges",
                   json::array({json{{"amplitude", 16.0},
                                     {"width", 2.5},
                                     {"centers", json::array({{0.41, 0.53, 0.62}})}}})}};
    j["smearing"] = {{"kind", "fermi_dirac"}, {"sigma", 0.14}};
    j["seed"] = 1;
  } else if (name == "rank-nonlocal") {
    j["cell"] = cube(7.0);
    j["kpoints"] = json::array({json{{"point", {0.0, 0.0, 0.0}}, {"weight", 1.0}},
                                json{{"point", {0.25, 0.0, 0.0}}, {"weight", 1.0}}});
    j["e_cut"] = 1.1;
    j["model"] = {{"n_electrons", 2.0},
                  {"n_orbitals", 4},
                  {"xc", "none"},
                  {"local_potential",
                   json::array({json{{"amplitude", -0.8},
                                     {"width", 1.2},
                                     {"centers", json::array({{0.5, 0.5, 0.5}})}}})},
                  {"projectors",
                   json::array({json{{"amplitude", 1.0}, {"width", 1.0}, {"center", {0.5, 0.5, 0.5}}},
                                json{{"amplitude", 0.8}, {"width", 1.4}, {"center", {0.5, 0.5, 0.5}}}})},
                  {"d_matrix", json::array({{-0.5, 0.1}, {0.1, 0.3}})},
                  {"init_charges",
                   json::array({json{{"amplitude", 2.0},
                                     {"width", 1.4},
                                     {"centers", json::array({{0.5, 0.5, 0.5}})}}})}};
    j["smearing"] = {{"kind", "fermi_dirac"}, {"sigma", 0.02}};
    j["seed"] = 7;
  } else if (name == "generalized-overlap") {
    j["cell"] = cube(7.0);
    j["kpoints"] = json::array({json{{"point", {0.0, 0.0, 0.0}}, {"weight", 1.0}},
                                json{{"point", {0.2, 0.1, 0.0}}, {"weight", 1.0}}});
    j["e_cut"] = 1.1;
    j["model"] = {{"n_electrons", 2.0},
                  {"n_orbitals", 4},
                  {"xc", "none"},
                  {"local_potential",
                   json::array({json{{"amplitude", -0.8},
                                     {"width", 1.2},
                                     {"centers", json::array({{0.5, 0.5, 0.5}})}}})},
                  {"projectors",
                   json::array({json{{"amplitude", 1.0}, {"width", 1.0}, {"center", {0.5, 0.5, 0.5}}},
                                json{{"amplitude", 0.8}, {"width", 1.4}, {"center", {0.5, 0.5, 0.5}}}})},
                  {"d_matrix", json::array({{-0.4, 0.05}, {0.05, 0.25}})},
                  {"q_matrix", json::array({{0.25, 0.05}, {0.05, 0.15}})},
                  {"aug_width", 1.0},
                  {"aug_center", {0.5, 0.5, 0.5}},
                  {"init_charges",
                   json::array({json{{"amplitude", 2.0},
                                     {"width", 1.4},
                                     {"centers", json::array({{0.5, 0.5, 0.5}})}}})}};
    j["smearing"] = {{"kind", "fermi_dirac"}, {"sigma", 0.02}};
    j["seed"] = 9;
  } else if (name == "scf-adversarial") {
    // A 28-bohr axis pushes the shortest reciprocal vector low enough that
    // the Coulomb kernel amplifies long-wavelength density errors past the
    // stability bound of plain linear mixing at 0.9 (charge sloshing).
    // Broyden mixing and direct minimisation both remain stable.
    j["cell"] = json::array({json::array({28.0, 0.0, 0.0}), json::array({0.0, 9.20, 0.0}),
                             json::array({0.0, 0.0, 9.45})});
    j["kpoints"] = json::array({json{{"point", {0.424, 0.0, 0.0}}, {"weight", 2.0}}});
    j["e_cut"] = 0.30;
    j["model"] = {{"n_electrons", 14.0},
                  {"n_orbitals", 16},
                  {"xc", "none"},
                  {"local_potential",
                   json::array({json{{"amplitude", -0.002},
                                     {"width", 2.5},
                                     {"centers", json::array({{0.41, 0.53, 0.62}})}}})},
                  {"init_charges",
                   json::array({json{{"amplitude", 14.0},
                                     {"width", 2.5},
                                     {"centers", json::array({{0.25, 0.5, 0.5}})}}})}};
    j["smearing"] = {{"kind", "fermi_dirac"}, {"sigma", 0.05}};
    j["algorithm"] = {{"method", "scf"},
                      {"scf",
                       json{{"mixing", json{{"kind", "linear"}, {"factor", 0.9}}},
                            {"eps_density", 1e-9},
                            {"max_iter", 500}}}};
    j["seed"] = 13;
  } else {
    throw ConfigError("unknown fixture '" + name + "' (see `fixtures list`)");
  }
  return j;
}

RunConfig make_fixture(const std::string& name) { return config_from_json(fixture_json(name)); }

void write_optimizer_csv(const std::string& path, const std::vector<IterationRecord>& log) {
  std::ostringstream out;
  out << "n,f_ry,f_ha,grad_psi_half,grad_eta_sf,t_psi,t_eta,beta,zeta,restarted,mu\n";
  for (const IterationRecord& r : log) {
    out << r.n << ',' << format_g17(r.f * hartree_to_ry) << ',' << format_g17(r.f) << ','
        << format_g17(r.grad_psi_half) << ',' << format_g17(r.grad_eta_sf) << ','
        << format_g17(r.t_psi) << ',' << format_g17(r.t_eta) << ',' << format_g17(r.beta)
        << ',' << format_g17(r.zeta) << ',' << (r.restarted ? 1 : 0) << ','
        << format_g17(r.mu) << '\n';
  }
  write_text_file(path, out.str());
}

void write_scf_csv(const std::string& path, const std::vector<ScfIterationRecord>& log) {
  std::ostringstream out;
  out << "n,f_ry,f_ha,grad_psi_half,grad_eta_sf,density_residual,mu\n";
  for (const ScfIterationRecord& r : log) {
    out << r.n << ',' << format_g17(r.f * hartree_to_ry) << ',' << format_g17(r.f) << ','
        << format_g17(r.grad_psi_half) << ',' << format_g17(r.grad_eta_sf) << ','
        << format_g17(r.density_residual) << ',' << format_g17(r.mu) << '\n';
  }
  write_text_file(path, out.str());
}

std::string plot_script_text() {
  return R"PY(#!/usr/bin/env python3
"""Convergence plots from the iteration CSVs written next to this script.

Usage: plot_convergence.py [directory]   (default: the script's directory)
Writes convergence.png with three panels: |F - F_final|, the coefficient
gradient norm, and the pseudo-eigenvalue gradient norm per iteration.
"""
import csv
import glob
import os
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def load(path):
    with open(path, newline="") as handle:
        return list(csv.DictReader(handle))


def main():
    base = sys.argv[1] if len(sys.argv) > 1 else os.path.dirname(os.path.abspath(__file__))
    paths = sorted(glob.glob(os.path.join(base, "iterations*.csv")))
    if not paths:
        raise SystemExit("no iterations*.csv found in " + base)
    floor = 1e-18
    fig, axes = plt.subplots(1, 3, figsize=(15, 4.2))
    for path in paths:
        rows = load(path)
        if not rows:
            continue
        name = os.path.basename(path)
        label = name.removeprefix("iterations").removesuffix(".csv").strip("_") or "run"
        steps = [int(r["n"]) for r in rows]
        energy = [float(r["f_ha"]) for r in rows]
        reference = energy[-1]
        axes[0].semilogy(steps, [max(abs(e - reference), floor) for e in energy], label=label)
        axes[1].semilogy(steps, [max(float(r["grad_psi_half"]), floor) for r in rows], label=label)
        axes[2].semilogy(steps, [max(float(r["grad_eta_sf"]), floor) for r in rows], label=label)
    titles = ["|F - F_final| (hartree)", "coefficient gradient norm", "pseudo-eigenvalue gradient norm"]
    for ax, title in zip(axes, titles):
        ax.set_xlabel("iteration")
        ax.set_title(title)
        ax.grid(True, alpha=0.3)
        ax.legend()
    fig.tight_layout()
    out = os.path.join(base, "convergence.png")
    fig.savefig(out, dpi=150)
    print("wrote", out)


if __name__ == "__main__":
    main()
)PY";
}

RunArtifacts run_job(const RunConfig& cfg, const std::string& suffix) {
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);
  const std::string stem = suffix.empty() ? "" : "_" + suffix;
  const std::string csv_path = (fs::path(cfg.out_dir) / ("iterations" + stem + ".csv")).string();
  const std::string summary_path =
      (fs::path(cfg.out_dir) / ("summary" + stem + ".json")).string();

  const ModelContext ctx = build_model(cfg.model);

  RunArtifacts art;
  art.csv_path = csv_path;
  art.summary_path = summary_path;

  json summary;
  summary["algorithm"] = algo_label(cfg.algo);
  summary["seed"] = cfg.seed;

  if (cfg.algo.is_scf) {
    const ScfResult r = run_scf(ctx, cfg.smearing, cfg.scf);
    write_scf_csv(csv_path, r.log);
    summary["converged"] = r.converged;
    summary["iterations"] = r.iterations;
    summary["error_metric"] = r.error_metric;
    summary["mu_ha"] = r.mu;
    summary["mu_ry"] = r.mu * hartree_to_ry;
    summary["energy_ha"] = energy_json(r.energy, 1.0);
    summary["energy_ry"] = energy_json(r.energy, hartree_to_ry);
    summary["occupations"] = vectors_json(r.occupations);
    summary["eigenvalues_ha"] = vectors_json(r.eigenvalues);
    summary["diagnostics"] = {{"final_density_residual", r.final_residual},
                              {"max_mu_constraint_residual", r.max_mu_residual}};
    art.converged = r.converged;
    art.iterations = r.iterations;
    art.error_metric = r.error_metric;
    art.f_ha = r.energy.total;
  } else {
    OptimizerConfig opt = cfg.opt;
    opt.variant = cfg.algo.variant;
    opt.strategy = cfg.algo.strategy;
    const MinimizeResult r = minimize(ctx, cfg.smearing, opt, cfg.seed);
    write_optimizer_csv(csv_path, r.log);
    summary["converged"] = r.converged;
    summary["iterations"] = r.iterations;
    summary["error_metric"] = r.error_metric;
    summary["mu_ha"] = r.mu;
    summary["mu_ry"] = r.mu * hartree_to_ry;
    summary["energy_ha"] = energy_json(r.energy, 1.0);
    summary["energy_ry"] = energy_json(r.energy, hartree_to_ry);
    summary["occupations"] = vectors_json(r.occupations);
    summary["eigenvalues_ha"] = vectors_json(r.eigenvalues);
    summary["diagnostics"] = {{"restart_count", r.restart_count},
                              {"armijo_activations", r.armijo_activations},
                              {"max_borth_drift", r.max_borth_drift},
                              {"max_mu_constraint_residual", r.max_mu_residual}};
    art.converged = r.converged;
    art.iterations = r.iterations;
    art.error_metric = r.error_metric;
    art.f_ha = r.energy.total;
  }

  write_text_file(summary_path, summary.dump(2) + "\n");
  write_text_file((fs::path(cfg.out_dir) / "plot_convergence.py").string(), plot_script_text());
  return art;
}

} // namespace ekdft
