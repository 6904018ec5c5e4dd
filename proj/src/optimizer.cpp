#include "ekdft/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <utility>

namespace ekdft {

namespace {

constexpr double kCurvatureFloorRel = 1e-14;

void validate_config(const OptimizerConfig& cfg) {
  if (!(cfg.nu > 0.0 && cfg.nu <= 0.5)) throw ConfigError("nu must lie in (0, 1/2]");
  if (!(cfg.alpha >= 0.0 && cfg.alpha < 1.0)) throw ConfigError("alpha must lie in [0, 1)");
  if (!(cfg.gamma >= 0.0 && cfg.gamma < 1.0)) throw ConfigError("gamma must lie in [0, 1)");
  if (!(cfg.a > 0.0)) throw ConfigError("restart exponent a must be positive");
  if (!(cfg.t_min_psi > 0.0 && cfg.t_min_eta > 0.0))
    throw ConfigError("minimum step sizes must be positive");
  if (!(cfg.t_trial_init > 0.0)) throw ConfigError("initial trial step must be positive");
  if (!(cfg.theta_max > 0.0)) throw ConfigError("trust-radius cap must be positive");
  if (cfg.max_iter < 0) throw ConfigError("max_iter must be nonnegative");
  if (!(cfg.tol > 0.0)) throw ConfigError("tolerance must be positive");
  if (cfg.armijo_max_halvings < 1) throw ConfigError("halving budget must be at least 1");
  if (cfg.ratio_bounds_enabled && !(cfg.c_lower > 0.0 && cfg.c_upper >= cfg.c_lower))
    throw ConfigError("step-ratio bounds need 0 < c_lower <= c_upper");
}

/// Curvature from one sample at a shared trial step; S1 samples the value,
/// S2 the derivative. The single curvature is split between the variables
/// in proportion to their directional derivatives.
StrategyResult shared_step_strategy(const StrategyInput& in, const LineFunctions& fns,
                                    bool use_derivative) {
  StrategyResult out;
  const double dir_norm = std::hypot(in.d_psi_inf, in.d_eta_sf_inf);
  const double theta = std::min(in.theta_max, dir_norm);
  const double cap =
      dir_norm > 0.0 ? theta / dir_norm : std::numeric_limits<double>::infinity();
  // The shared trial resumes from the larger of the two previous steps.
  const double prev_t = std::max(in.prev_t_psi, in.prev_t_eta);
  const double t_floor = std::min(in.t_min_psi, in.t_min_eta);
  const double t_tr = std::min(std::max(t_floor, prev_t), cap);
  out.trial_t_psi = t_tr;
  out.trial_t_eta = t_tr;

  const double g0 = in.dfd_psi + in.dfd_eta;
  double c;
  if (use_derivative) {
    const auto [p1, p2] = fns.partials(t_tr, t_tr);
    c = ((p1 + p2) - g0) / t_tr;
  } else {
    const double f_tr = fns.value(t_tr, t_tr);
    c = 2.0 * (f_tr - in.f0 - t_tr * g0) / (t_tr * t_tr);
  }

  double t_chosen;
  if (c > 0.0) {
    const double t_model = -g0 / c;
    t_chosen = t_model > 0.0 ? std::min(t_model, cap) : t_tr;
  } else {
    t_chosen = t_tr;
    c = kCurvatureFloorRel * (in.d_psi_sq + in.d_eta_sf_sq);
  }

  double c1, c2;
  if (g0 != 0.0) {
    c1 = c * (in.dfd_psi / g0);
    c2 = c * (in.dfd_eta / g0);
  } else {
    c1 = 0.5 * c;
    c2 = 0.5 * c;
  }
  if (in.psi_grad_zero) c1 = 0.0;
  if (in.eta_grad_zero) c2 = 0.0;

  out.c1 = c1;
  out.c2 = c2;
  out.t_init_psi = t_chosen;
  out.t_init_eta = t_chosen;
  out.theta_psi = theta;
  out.theta_eta = theta;
  return out;
}

void scale_blocks(BlockMatrix& a, double s) {
  for (auto& blk : a) blk *= s;
}

void zero_blocks(BlockMatrix& a) {
  for (auto& blk : a) blk.setZero();
}

/// D <- -sign(Re<G,D>) D with the literal convention sign(0) = 0, which
/// zeroes the block; s is kept in sync.
void apply_sign_flip(BlockMatrix& d, double& s) {
  if (s > 0.0) {
    scale_blocks(d, -1.0);
    s = -s;
  } else if (s == 0.0) {
    zero_blocks(d);
  }
}

/// Fixed-order Box-Muller stream over mt19937_64; fully specified so a seed
/// produces the same coefficients on every platform and standard library.
class NormalStream {
 public:
  explicit NormalStream(uint64_t seed) : gen_(seed) {}

  double next() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = (double(gen_() >> 11) + 1.0) * 0x1.0p-53; // (0, 1]
    const double u2 = double(gen_() >> 11) * 0x1.0p-53;         // [0, 1)
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double phi = 2.0 * std::acos(-1.0) * u2;
    spare_ = r * std::sin(phi);
    have_spare_ = true;
    return r * std::cos(phi);
  }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

} // namespace

NonmonotoneRef nonmonotone_update(const NonmonotoneRef& ref, double f_new, double alpha) {
  NonmonotoneRef out;
  out.q_value = alpha * ref.q_value + 1.0;
  out.c_value = (alpha * ref.q_value * ref.c_value + f_new) / out.q_value;
  return out;
}

double estimator_zeta(double f0, double dfd_psi, double dfd_eta, double c1, double c2,
                      double t_psi, double t_eta, double c_ref) {
  const double slope_term = t_psi * dfd_psi + t_eta * dfd_eta;
  if (slope_term == 0.0)
    throw EstimatorUndefinedError(
        "step estimator undefined: both directional derivatives vanished");
  const double model = f0 + slope_term + 0.5 * c1 * t_psi * t_psi + 0.5 * c2 * t_eta * t_eta;
  return (model - c_ref) / slope_term;
}

StepState adaptive_double_step(const StepInputs& in) {
  const double inf = std::numeric_limits<double>::infinity();
  const double cap_psi = in.d_psi_inf > 0.0 ? in.theta_psi / in.d_psi_inf : inf;
  const double cap_eta = in.d_eta_sf_inf > 0.0 ? in.theta_eta / in.d_eta_sf_inf : inf;

  StepState st;
  st.c1 = in.c1;
  st.c2 = in.c2;
  st.t_psi = std::min(std::max(in.t_init_psi, in.t_min_psi), cap_psi);
  st.t_eta = std::min(std::max(in.t_init_eta, in.t_min_eta), cap_eta);
  st.zeta = estimator_zeta(in.f0, in.dfd_psi, in.dfd_eta, in.c1, in.c2, st.t_psi, st.t_eta,
                           in.c_ref);
  st.accepted = st.zeta >= in.nu;

  if (!st.accepted) {
    // Quadratic-model minimiser per variable; a variable with an exactly
    // zero gradient (c = 0) borrows the other variable's quotient.
    double q_psi, q_eta;
    if (in.c1 > 0.0)
      q_psi = -in.dfd_psi / in.c1;
    else if (in.c2 > 0.0)
      q_psi = -in.dfd_eta / in.c2;
    else
      throw EstimatorUndefinedError("step improvement undefined: both curvatures are zero");
    if (in.c2 > 0.0)
      q_eta = -in.dfd_eta / in.c2;
    else
      q_eta = q_psi;
    st.t_psi = std::min(q_psi, cap_psi);
    st.t_eta = std::min(q_eta, cap_eta);
  }

  if (in.ratio_bounds && st.t_psi > 0.0 && in.c_lower > 0.0) {
    const double ratio = st.t_eta / st.t_psi;
    if (ratio < in.c_lower)
      st.t_psi = st.t_eta / in.c_lower;
    else if (ratio > in.c_upper)
      st.t_eta = in.c_upper * st.t_psi;
  }
  return st;
}

StrategyResult strategy_s1(const StrategyInput& in, const LineFunctions& fns) {
  return shared_step_strategy(in, fns, /*use_derivative=*/false);
}

StrategyResult strategy_s2(const StrategyInput& in, const LineFunctions& fns) {
  return shared_step_strategy(in, fns, /*use_derivative=*/true);
}

StrategyResult strategy_s3(const StrategyInput& in, const LineFunctions& fns) {
  StrategyResult out;
  const double inf = std::numeric_limits<double>::infinity();
  const double theta_psi = std::min(in.theta_max, in.d_psi_inf);
  const double theta_eta = std::min(in.theta_max, in.d_eta_sf_inf);
  const double cap_psi = in.d_psi_inf > 0.0 ? theta_psi / in.d_psi_inf : inf;
  const double cap_eta = in.d_eta_sf_inf > 0.0 ? theta_eta / in.d_eta_sf_inf : inf;
  const double t_tr_psi = std::min(std::max(in.t_min_psi, in.prev_t_psi), cap_psi);
  const double t_tr_eta = std::min(std::max(in.t_min_eta, in.prev_t_eta), cap_eta);
  out.trial_t_psi = t_tr_psi;
  out.trial_t_eta = t_tr_eta;

  const auto [p1, p2] = fns.partials(t_tr_psi, t_tr_eta);
  double c1 = (p1 - in.dfd_psi) / t_tr_psi;
  double c2 = (p2 - in.dfd_eta) / t_tr_eta;

  // Model minimisers only count when both exist and are positive.
  const double t_model_psi = c1 > 0.0 ? -in.dfd_psi / c1 : -1.0;
  const double t_model_eta = c2 > 0.0 ? -in.dfd_eta / c2 : -1.0;
  if (t_model_psi > 0.0 && t_model_eta > 0.0) {
    out.t_init_psi = std::min(t_model_psi, cap_psi);
    out.t_init_eta = std::min(t_model_eta, cap_eta);
  } else {
    out.t_init_psi = t_tr_psi;
    out.t_init_eta = t_tr_eta;
  }

  const double floor_c = kCurvatureFloorRel * (in.d_psi_sq + in.d_eta_sf_sq);
  // !(c > 0) rather than c <= 0 so that NaN curvature samples also take the
  // floor instead of propagating into the step sizes.
  if (!(c1 > 0.0)) c1 = floor_c;
  if (!(c2 > 0.0)) c2 = floor_c;
  if (in.psi_grad_zero) c1 = 0.0;
  if (in.eta_grad_zero) c2 = 0.0;

  out.c1 = c1;
  out.c2 = c2;
  out.theta_psi = theta_psi;
  out.theta_eta = theta_eta;
  return out;
}

std::optional<double> dy_beta(const BlockMatrix& g_psi, const BlockMatrix& g_eta,
                              const BlockMatrix& pg_psi, const BlockMatrix& pg_eta,
                              const BlockMatrix& d_psi_prev, const BlockMatrix& d_eta_prev,
                              const BlockMatrix& g_psi_prev, const BlockMatrix& g_eta_prev) {
  if (block_norm(d_psi_prev) == 0.0 && block_norm(d_eta_prev) == 0.0) return 0.0;
  const double num = block_real_inner(pg_psi, g_psi) + block_real_inner(pg_eta, g_eta);
  if (num == 0.0) return 0.0;
  const double den = block_real_inner(d_psi_prev, g_psi) -
                     block_real_inner(d_psi_prev, g_psi_prev) +
                     block_real_inner(d_eta_prev, g_eta) -
                     block_real_inner(d_eta_prev, g_eta_prev);
  if (std::abs(den) < 1e-14 * std::abs(num)) return std::nullopt;
  return num / den;
}

double restart_ratio(const BlockMatrix& g_psi, const BlockMatrix& g_eta,
                     const BlockMatrix& d_psi, const BlockMatrix& d_eta,
                     const BlockMatrix& pg_psi, const BlockMatrix& pg_eta, double a) {
  const double num = -(block_real_inner(g_psi, d_psi) + block_real_inner(g_eta, d_eta));
  const double den = std::pow(std::abs(block_real_inner(g_psi, pg_psi)), a) +
                     std::pow(std::abs(block_real_inner(g_eta, pg_eta)), a);
  if (den == 0.0) return std::numeric_limits<double>::infinity();
  return num / den;
}

bool restart_condition(const BlockMatrix& g_psi, const BlockMatrix& g_eta,
                       const BlockMatrix& d_psi, const BlockMatrix& d_eta,
                       const BlockMatrix& pg_psi, const BlockMatrix& pg_eta, double gamma,
                       double a) {
  return restart_ratio(g_psi, g_eta, d_psi, d_eta, pg_psi, pg_eta, a) < gamma;
}

InitialState initial_state(const ModelContext& ctx, uint64_t seed) {
  const int nk = ctx.n_kpoints();
  const int n = ctx.spec.n_orbitals;
  NormalStream rng(seed);
  const OverlapFn overlap = overlap_fn(ctx);

  BlockMatrix x(nk);
  for (int k = 0; k < nk; ++k) {
    const Eigen::Index rows = ctx.bases[size_t(k)].size();
    Eigen::MatrixXcd blk(rows, n);
    for (int j = 0; j < n; ++j)
      for (Eigen::Index i = 0; i < rows; ++i) {
        const double re = rng.next();
        const double im = rng.next();
        blk(i, j) = cdouble(re, im);
      }
    Eigen::MatrixXcd s = blk.adjoint() * overlap(size_t(k), blk);
    s = 0.5 * (s + s.adjoint()).eval();
    Eigen::LLT<Eigen::MatrixXcd> llt(s);
    if (llt.info() != Eigen::Success) {
      s += 1e-12 * std::max(1.0, s.real().trace() / double(n)) *
           Eigen::MatrixXcd::Identity(n, n);
      llt.compute(s);
      if (llt.info() != Eigen::Success)
        throw Error("random initial block is numerically rank-deficient");
    }
    x[size_t(k)] = llt.matrixL().solve(blk.adjoint()).adjoint();
  }

  // eta0 = Diag(<Psi0* H Psi0> diagonal) at the superposition density. The
  // diagonal entries are Rayleigh quotients of random vectors, so they
  // cluster tightly; starting eta compressed keeps the occupations soft and
  // every gradient channel alive during the first iterations.
  const Eigen::VectorXd rho0 = initial_density(ctx);
  const Potentials pots = build_potentials(ctx, rho0);
  BlockMatrix eta0(nk);
  for (int k = 0; k < nk; ++k) {
    const Eigen::MatrixXcd hx = apply_hamiltonian(ctx, pots, size_t(k), x[size_t(k)]);
    const Eigen::MatrixXcd raw = x[size_t(k)].adjoint() * hx;
    eta0[size_t(k)] =
        (0.5 * (raw + raw.adjoint())).diagonal().real().asDiagonal().toDenseMatrix().cast<cdouble>();
  }
  return {std::move(x), std::move(eta0)};
}

MinimizeResult minimize_from(const ModelContext& ctx, const SmearingSpec& smear,
                             const OptimizerConfig& cfg, BlockMatrix psi, BlockMatrix eta) {
  validate_config(cfg);
  const size_t nk = size_t(ctx.n_kpoints());
  if (psi.size() != nk || eta.size() != nk)
    throw ShapeError("initial state has the wrong number of k-point blocks");
  const OverlapFn overlap = overlap_fn(ctx);
  const std::vector<double>& weights = ctx.spec.kpoints.weights;

  MinimizeResult out;
  Evaluation ev = evaluate(ctx, smear, psi, eta);
  NonmonotoneRef ref{ev.energy.total, 1.0};
  BlockMatrix d_psi_prev, d_eta_prev, g_psi_stored, g_eta_stored;
  bool have_prev = false;
  double prev_t_psi = cfg.t_trial_init;
  double prev_t_eta = cfg.t_trial_init;

  for (int n = 0;; ++n) {
    const GradientPair g = gradients(ctx, smear, psi, ev);
    const double grad_psi_half = 0.5 * block_norm(g.g_psi);
    const double grad_eta_sf = sf_norm(g.g_eta);
    const double err = std::hypot(grad_psi_half, grad_eta_sf);

    double drift_sq = 0.0;
    for (size_t k = 0; k < nk; ++k) {
      const Eigen::MatrixXcd gram_k = psi[k].adjoint() * overlap(k, psi[k]);
      drift_sq += (gram_k - Eigen::MatrixXcd::Identity(gram_k.rows(), gram_k.cols()))
                      .squaredNorm();
    }
    out.max_borth_drift = std::max(out.max_borth_drift, std::sqrt(drift_sq));
    out.max_mu_residual = std::max(out.max_mu_residual, std::abs(ev.occ.mu_residual));

    IterationRecord rec;
    rec.n = n;
    rec.f = ev.energy.total;
    rec.grad_psi_half = grad_psi_half;
    rec.grad_eta_sf = grad_eta_sf;
    rec.mu = ev.occ.mu;

    if (err < cfg.tol || n >= cfg.max_iter) {
      out.log.push_back(rec);
      out.converged = err < cfg.tol;
      out.iterations = n;
      out.error_metric = err;
      break;
    }

    // Preconditioned gradients. The coefficient preconditioner is a left
    // diagonal scaling, so applying it to the gradient blocks equals
    // rescaling the raw residual and reattaching the occupation factor.
    BlockMatrix pg_psi = precond_psi(g.g_psi, ctx.bases);
    BlockMatrix pg_eta = precond_eta(g.g_eta, ev.occ, weights, smear);

    double beta = 0.0;
    bool forced_restart = false;
    if (have_prev) {
      const std::optional<double> b =
          dy_beta(g.g_psi, g.g_eta, pg_psi, pg_eta, d_psi_prev, d_eta_prev, g_psi_stored,
                  g_eta_stored);
      if (b)
        beta = *b;
      else
        forced_restart = true;
    }
    if (cfg.beta_hook) {
      if (const std::optional<double> o = cfg.beta_hook(n, beta)) {
        beta = *o;
        forced_restart = false;
      }
    }
    rec.beta = beta;

    BlockMatrix d_psi(nk), d_eta(nk);
    for (size_t k = 0; k < nk; ++k) {
      d_psi[k] = -pg_psi[k];
      d_eta[k] = -pg_eta[k];
      if (have_prev && beta != 0.0) {
        d_psi[k] += beta * d_psi_prev[k];
        d_eta[k] += beta * d_eta_prev[k];
      }
    }
    d_psi = project_tangent_adjoint(psi, d_psi, 0.0, overlap);

    double s_psi = block_real_inner(g.g_psi, d_psi);
    double s_eta = block_real_inner(g.g_eta, d_eta);
    double ratio = std::numeric_limits<double>::quiet_NaN();
    bool restarted = false;

    const auto take_restart = [&] {
      BlockMatrix neg_pg(nk);
      for (size_t k = 0; k < nk; ++k) neg_pg[k] = -pg_psi[k];
      d_psi = project_tangent_adjoint(psi, neg_pg, 0.0, overlap);
      for (size_t k = 0; k < nk; ++k) d_eta[k] = -pg_eta[k];
      s_psi = block_real_inner(g.g_psi, d_psi);
      s_eta = block_real_inner(g.g_eta, d_eta);
      restarted = true;
    };

    switch (cfg.variant) {
      case PcgVariant::Pcg:
        if (forced_restart) {
          take_restart();
        } else {
          rec.sign_flips = (s_psi > 0.0 ? 1 : 0) + (s_eta > 0.0 ? 1 : 0);
          apply_sign_flip(d_psi, s_psi);
          apply_sign_flip(d_eta, s_eta);
        }
        break;
      case PcgVariant::PcgR1:
        if (forced_restart) {
          take_restart();
        } else {
          rec.sign_flips = (s_psi > 0.0 ? 1 : 0) + (s_eta > 0.0 ? 1 : 0);
          apply_sign_flip(d_psi, s_psi);
          apply_sign_flip(d_eta, s_eta);
          ratio = restart_ratio(g.g_psi, g.g_eta, d_psi, d_eta, pg_psi, pg_eta, cfg.a);
          if (ratio < cfg.gamma) take_restart();
        }
        break;
      case PcgVariant::PcgR2:
        if (forced_restart) {
          take_restart();
        } else {
          ratio = restart_ratio(g.g_psi, g.g_eta, d_psi, d_eta, pg_psi, pg_eta, cfg.a);
          if (s_psi >= 0.0 || s_eta >= 0.0 || ratio < cfg.gamma) take_restart();
        }
        break;
    }
    rec.restarted = restarted;
    rec.restart_ratio = ratio;
    if (restarted) ++out.restart_count;

    const double descent_slack = 1e-12 * (1.0 + std::abs(s_psi) + std::abs(s_eta));
    if (!(s_psi <= descent_slack) || !(s_eta <= descent_slack))
      throw Error("search direction failed the descent check");
    s_psi = std::min(s_psi, 0.0);
    s_eta = std::min(s_eta, 0.0);

    const double d_psi_inf = block_inf_norm(d_psi);
    const double d_eta_sf_inf = sf_inf_norm(d_eta);
    const double d_psi_norm = block_norm(d_psi);
    const double d_eta_sf = sf_norm(d_eta);
    if (!std::isfinite(d_psi_inf) || !std::isfinite(d_eta_sf_inf))
      throw Error(
          "search direction became non-finite; this typically means every "
          "occupation channel has saturated (smearing width too small for "
          "the spectrum)");

    LineFunctions fns;
    fns.value = [&](double tp, double te) {
      if (tp == 0.0 && te == 0.0) return ev.energy.total;
      const BlockMatrix x = ortho_qr(psi, d_psi, tp, overlap);
      BlockMatrix eta_t(nk);
      for (size_t k = 0; k < nk; ++k) eta_t[k] = eta[k] + te * d_eta[k];
      const Evaluation sample = evaluate(ctx, smear, x, eta_t, ev.occ.mu);
      out.max_mu_residual = std::max(out.max_mu_residual, std::abs(sample.occ.mu_residual));
      return sample.energy.total;
    };
    fns.partials = [&](double tp, double te) {
      const LinePartials lp =
          line_partials(ctx, smear, psi, eta, d_psi, d_eta, tp, te, ev.occ.mu);
      out.max_mu_residual = std::max(out.max_mu_residual, std::abs(lp.mu_residual));
      return std::make_pair(lp.dt_psi, lp.dt_eta);
    };

    StrategyInput si;
    si.f0 = ev.energy.total;
    si.dfd_psi = s_psi;
    si.dfd_eta = s_eta;
    si.d_psi_inf = d_psi_inf;
    si.d_eta_sf_inf = d_eta_sf_inf;
    si.d_psi_sq = d_psi_norm * d_psi_norm;
    si.d_eta_sf_sq = d_eta_sf * d_eta_sf;
    si.prev_t_psi = prev_t_psi;
    si.prev_t_eta = prev_t_eta;
    si.t_min_psi = cfg.t_min_psi;
    si.t_min_eta = cfg.t_min_eta;
    si.theta_max = cfg.theta_max;
    si.psi_grad_zero = block_norm(g.g_psi) == 0.0;
    si.eta_grad_zero = block_norm(g.g_eta) == 0.0;

    StrategyResult sr;
    switch (cfg.strategy) {
      case StepStrategy::S1: sr = strategy_s1(si, fns); break;
      case StepStrategy::S2: sr = strategy_s2(si, fns); break;
      case StepStrategy::S3: sr = strategy_s3(si, fns); break;
    }

    StepInputs sin;
    sin.f0 = ev.energy.total;
    sin.dfd_psi = s_psi;
    sin.dfd_eta = s_eta;
    sin.c1 = sr.c1;
    sin.c2 = sr.c2;
    sin.t_init_psi = sr.t_init_psi;
    sin.t_init_eta = sr.t_init_eta;
    sin.t_min_psi = cfg.t_min_psi;
    sin.t_min_eta = cfg.t_min_eta;
    sin.theta_psi = sr.theta_psi;
    sin.theta_eta = sr.theta_eta;
    sin.d_psi_inf = d_psi_inf;
    sin.d_eta_sf_inf = d_eta_sf_inf;
    sin.nu = cfg.nu;
    sin.c_ref = ref.c_value;
    sin.ratio_bounds = cfg.ratio_bounds_enabled;
    sin.c_lower = cfg.c_lower;
    sin.c_upper = cfg.c_upper;
    const StepState st = adaptive_double_step(sin);
    rec.zeta = st.zeta;

    // Candidate point, with the sufficient-decrease safeguard halving both
    // steps until the nonmonotone test holds (up to roundoff slack).
    double t_psi = st.t_psi;
    double t_eta = st.t_eta;
    int halvings = 0;
    DiagonalizedState dz;
    Evaluation ev_next;
    for (;;) {
      const BlockMatrix x = ortho_qr(psi, d_psi, t_psi, overlap);
      BlockMatrix eta_c(nk);
      for (size_t k = 0; k < nk; ++k) eta_c[k] = eta[k] + t_eta * d_eta[k];
      dz = diagonalize_and_rotate(eta_c, x, d_psi, d_eta);
      ev_next = evaluate(ctx, smear, dz.psi, dz.eta, ev.occ.mu);
      if (!std::isfinite(ev_next.energy.total))
        throw Error("free energy became non-finite at a candidate step");
      rec.armijo_lhs = ev_next.energy.total - ref.c_value;
      rec.armijo_rhs = cfg.nu * (t_psi * s_psi + t_eta * s_eta);
      if (!cfg.armijo_safeguard) break;
      const double slack = cfg.armijo_slack_rel * (1.0 + std::abs(ev_next.energy.total));
      if (rec.armijo_lhs <= rec.armijo_rhs + slack) break;
      if (++halvings > cfg.armijo_max_halvings)
        throw Error("sufficient decrease unattainable: step halving budget exhausted");
      t_psi *= 0.5;
      t_eta *= 0.5;
    }
    rec.halvings = halvings;
    if (halvings > 0) {
      out.armijo_activations += 1;
      rec.zeta = estimator_zeta(ev.energy.total, s_psi, s_eta, st.c1, st.c2, t_psi, t_eta,
                                ref.c_value);
    }
    rec.t_psi = t_psi;
    rec.t_eta = t_eta;
    out.log.push_back(rec);

    // Accept: move to the diagonal-eta frame and rotate the stored
    // gradients so the next conjugation step compares like with like.
    psi = std::move(dz.psi);
    eta = std::move(dz.eta);
    d_psi_prev = std::move(dz.d_psi);
    d_eta_prev = std::move(dz.d_eta);
    g_psi_stored.resize(nk);
    g_eta_stored.resize(nk);
    for (size_t k = 0; k < nk; ++k) {
      g_psi_stored[k] = g.g_psi[k] * dz.p[k];
      g_eta_stored[k] = dz.p[k].adjoint() * g.g_eta[k] * dz.p[k];
    }
    have_prev = true;
    ref = nonmonotone_update(ref, ev_next.energy.total, cfg.alpha);
    ev = std::move(ev_next);
    prev_t_psi = t_psi;
    prev_t_eta = t_eta;
  }

  out.psi = std::move(psi);
  out.eta = std::move(eta);
  out.energy = ev.energy;
  out.mu = ev.occ.mu;
  out.eigenvalues = ev.occ.eps;
  out.occupations = ev.occ.f;
  return out;
}

MinimizeResult minimize(const ModelContext& ctx, const SmearingSpec& smear,
                        const OptimizerConfig& cfg, uint64_t seed) {
  InitialState start = initial_state(ctx, seed);
  return minimize_from(ctx, smear, cfg, std::move(start.psi), std::move(start.eta));
}

} // namespace ekdft
