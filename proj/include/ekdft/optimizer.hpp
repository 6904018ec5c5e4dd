#pragma once

#include <cstdint>
#include <functional>
#include <limits>

#include "ekdft/gradients.hpp"

namespace ekdft {

/// Pcg: conjugate directions with a per-block sign flip on non-descent.
/// PcgR1: sign flip, then a full restart when the descent/gradient ratio
///        falls under gamma.
/// PcgR2: no sign flip; restarts whenever either block is non-descent or
///        the ratio test fires.
enum class PcgVariant { Pcg, PcgR1, PcgR2 };

/// S1: curvature from one energy sample at the trial step (shared t).
/// S2: curvature from the derivative at the trial step (shared t).
/// S3: per-variable curvatures from both partial derivatives at a trial
///     point with independent step sizes.
enum class StepStrategy { S1, S2, S3 };

struct OptimizerConfig {
  PcgVariant variant = PcgVariant::Pcg;
  StepStrategy strategy = StepStrategy::S3;
  double nu = 0.25;    // estimator acceptance level, in (0, 1/2]
  double alpha = 0.0;  // nonmonotone averaging weight, in [0, 1)
  double gamma = 0.5;  // restart threshold, in (0, 1)
  double a = 1.0;      // restart-ratio exponent, > 0
  double t_min_psi = 1e-3;
  double t_min_eta = 1e-3;
  double t_trial_init = 0.4; // stands in for t^(n-1) on the first iteration
  double theta_max = 0.8;    // cap inside the trust-radius rule
  bool ratio_bounds_enabled = false; // step-ratio clamp (off by default)
  double c_lower = 0.1;
  double c_upper = 10.0;
  int max_iter = 500;
  double tol = 1e-5; // on sqrt(||grad_psi/2||^2 + ||grad_eta||_sF^2)
  bool armijo_safeguard = true; // halve steps until sufficient decrease holds
  int armijo_max_halvings = 30;
  double armijo_slack_rel = 1e-10; // roundoff slack, scaled by 1 + |F|
  /// Test hook: called once per iteration with (n, beta); a returned value
  /// replaces the conjugation parameter. Never set by the config file.
  std::function<std::optional<double>(int, double)> beta_hook;
};

/// Running reference of the nonmonotone sufficient-decrease test.
struct NonmonotoneRef {
  double c_value = 0.0; // C_n; starts at F_0
  double q_value = 1.0; // Q_n; stays in [1, 1/(1-alpha)]
};

/// Q' = alpha Q + 1, C' = (alpha Q C + f_new) / Q'.
NonmonotoneRef nonmonotone_update(const NonmonotoneRef& ref, double f_new, double alpha);

/// zeta = (f0 + t.g + quadratic model - c_ref) / (t.g); accepting when
/// zeta >= nu is the quadratic-model version of the sufficient-decrease
/// test. Throws EstimatorUndefinedError when t_psi*dfd_psi + t_eta*dfd_eta
/// is exactly zero (both directional derivatives vanished).
double estimator_zeta(double f0, double dfd_psi, double dfd_eta, double c1, double c2,
                      double t_psi, double t_eta, double c_ref);

/// Everything the double-step rule consumes, as plain scalars so it can be
/// exercised against synthetic objectives.
struct StepInputs {
  double f0 = 0.0;
  double dfd_psi = 0.0; // dFbar/dt_psi at (0,0), <= 0
  double dfd_eta = 0.0; // dFbar/dt_eta at (0,0), <= 0
  double c1 = 0.0;      // curvature surrogates, >= 0; 0 only for a zero gradient
  double c2 = 0.0;
  double t_init_psi = 0.0;
  double t_init_eta = 0.0;
  double t_min_psi = 1e-3;
  double t_min_eta = 1e-3;
  double theta_psi = 0.8; // trust radii: t ||D|| stays below these
  double theta_eta = 0.8;
  double d_psi_inf = 0.0;    // ||D_psi||_inf
  double d_eta_sf_inf = 0.0; // ||D_eta||_{sF,inf}
  double nu = 0.25;
  double c_ref = 0.0; // nonmonotone reference C_n
  bool ratio_bounds = false;
  double c_lower = 0.1;
  double c_upper = 10.0;
};

struct StepState {
  double t_psi = 0.0;
  double t_eta = 0.0;
  double c1 = 0.0;
  double c2 = 0.0;
  bool accepted = false; // initial guess passed the estimator test
  double zeta = 0.0;     // estimator value at the initial guess
};

/// The adaptive double-step rule: clip the initial guess into the trust
/// region, accept if the estimator clears nu, otherwise jump to the
/// quadratic-model minimiser per variable (swapping in the other variable's
/// quotient when one gradient is exactly zero), then optionally clamp the
/// step ratio t_eta/t_psi into [c_lower, c_upper].
StepState adaptive_double_step(const StepInputs& in);

/// Scalar view of the line-search function for the step-size strategies.
struct LineFunctions {
  std::function<double(double, double)> value; // Fbar(t_psi, t_eta)
  std::function<std::pair<double, double>(double, double)> partials;
};

struct StrategyInput {
  double f0 = 0.0;
  double dfd_psi = 0.0; // partials at (0,0)
  double dfd_eta = 0.0;
  double d_psi_inf = 0.0;
  double d_eta_sf_inf = 0.0;
  double d_psi_sq = 0.0;    // ||D_psi||^2, scale of the curvature floor
  double d_eta_sf_sq = 0.0; // ||D_eta||_sF^2
  double prev_t_psi = 0.4;  // last accepted steps (trial-init at n = 0)
  double prev_t_eta = 0.4;
  double t_min_psi = 1e-3;
  double t_min_eta = 1e-3;
  double theta_max = 0.8;
  bool psi_grad_zero = false; // exact-zero gradient flags keep c = 0 exact
  bool eta_grad_zero = false;
};

struct StrategyResult {
  double c1 = 0.0;
  double c2 = 0.0;
  double t_init_psi = 0.0;
  double t_init_eta = 0.0;
  double theta_psi = 0.8; // trust radii handed to the double-step rule
  double theta_eta = 0.8;
  double trial_t_psi = 0.0; // where the curvature was sampled
  double trial_t_eta = 0.0;
};

/// One energy sample at a shared trial step; c = 2(F(t)-F(0)-tF'(0))/t^2.
StrategyResult strategy_s1(const StrategyInput& in, const LineFunctions& fns);
/// One derivative sample at a shared trial step; c = (F'(t)-F'(0))/t.
StrategyResult strategy_s2(const StrategyInput& in, const LineFunctions& fns);
/// Partial-derivative samples at an independent trial pair; per-variable c.
StrategyResult strategy_s3(const StrategyInput& in, const LineFunctions& fns);

/// Dai-Yuan conjugation parameter
///   beta = Re(<pg_psi, g_psi> + <pg_eta, g_eta>)
///          / Re(<d_prev, g - g_prev>_psi + <d_prev, g - g_prev>_eta).
/// Returns 0 for zero previous directions (first step) and nullopt when the
/// denominator is degenerate (|den| < 1e-14 |num|): forced restart.
std::optional<double> dy_beta(const BlockMatrix& g_psi, const BlockMatrix& g_eta,
                              const BlockMatrix& pg_psi, const BlockMatrix& pg_eta,
                              const BlockMatrix& d_psi_prev, const BlockMatrix& d_eta_prev,
                              const BlockMatrix& g_psi_prev, const BlockMatrix& g_eta_prev);

/// -Re(<G,D>) / (|<G_psi, pg_psi>|^a + |<G_eta, pg_eta>|^a); the share of
/// the preconditioned gradient magnitude that D descends. +inf when the
/// denominator is zero (both gradients vanished).
double restart_ratio(const BlockMatrix& g_psi, const BlockMatrix& g_eta,
                     const BlockMatrix& d_psi, const BlockMatrix& d_eta,
                     const BlockMatrix& pg_psi, const BlockMatrix& pg_eta, double a);

/// True when the ratio falls below gamma.
bool restart_condition(const BlockMatrix& g_psi, const BlockMatrix& g_eta,
                       const BlockMatrix& d_psi, const BlockMatrix& d_eta,
                       const BlockMatrix& pg_psi, const BlockMatrix& pg_eta, double gamma,
                       double a);

struct IterationRecord {
  int n = 0;
  double f = 0.0;             // hartree
  double grad_psi_half = 0.0; // ||grad_psi / 2||
  double grad_eta_sf = 0.0;   // ||grad_eta||_sF
  double t_psi = 0.0;
  double t_eta = 0.0;
  double beta = 0.0;
  double zeta = 0.0;
  bool restarted = false;
  double mu = 0.0;
  // diagnostics, not part of the CSV schema
  double restart_ratio = std::numeric_limits<double>::quiet_NaN();
  double armijo_lhs = 0.0; // Fbar(t) - C_n
  double armijo_rhs = 0.0; // nu (t_psi d_psi + t_eta d_eta)
  int halvings = 0;        // safeguard activations
  int sign_flips = 0;      // blocks negated by the non-descent sign flip
};

struct MinimizeResult {
  BlockMatrix psi;
  BlockMatrix eta;
  EnergyBreakdown energy;
  std::vector<IterationRecord> log;
  bool converged = false;
  int iterations = 0;
  double error_metric = 0.0;
  double mu = 0.0;
  std::vector<Eigen::VectorXd> eigenvalues;  // eta diagonal per k at the end
  std::vector<Eigen::VectorXd> occupations;  // f values per k at the end
  double max_borth_drift = 0.0;  // max over iterations of ||<psi* B psi> - I||_F
  double max_mu_residual = 0.0;  // worst occupation-constraint defect seen
  int restart_count = 0;
  int armijo_activations = 0;    // iterations that needed safeguard halvings
};

struct InitialState {
  BlockMatrix psi;
  BlockMatrix eta;
};

/// Seeded start: B-orthonormalised Gaussian coefficients rotated into the
/// eigenframe of <psi* H psi> for the superposition-density Hamiltonian,
/// with eta the corresponding diagonal Ritz values. The random stream is a
/// fixed-order Box-Muller over mt19937_64, so identical seeds give
/// identical states on every platform.
InitialState initial_state(const ModelContext& ctx, uint64_t seed);

/// Full minimisation from a given start (psi0 B-orthonormal, eta0 diagonal).
MinimizeResult minimize_from(const ModelContext& ctx, const SmearingSpec& smear,
                             const OptimizerConfig& cfg, BlockMatrix psi0, BlockMatrix eta0);

/// Seeded-start convenience wrapper.
MinimizeResult minimize(const ModelContext& ctx, const SmearingSpec& smear,
                        const OptimizerConfig& cfg, uint64_t seed);

} // namespace ekdft
