#pragma once

#include <optional>

#include "ekdft/model.hpp"

namespace ekdft {

enum class MixingKind { Linear, BroydenLite };

struct MixingSpec {
  MixingKind kind = MixingKind::Linear;
  double factor = 0.3; // in (0, 1]
  int history = 5;     // BroydenLite memory: stored (in, out) pairs, >= 1
};

struct ScfConfig {
  MixingSpec mixing;
  double eps_density = 1e-10; // on sqrt(dv) * ||rho_out - rho_in||_2
  int max_iter = 200;
  double eig_tol = 1e-10;     // per-pair eigenproblem residual bound
  int dense_threshold = 2000; // basis size above which the iterative solver runs
};

struct EigenpairResult {
  BlockMatrix orbitals;                     // B-orthonormal columns per k
  std::vector<Eigen::VectorXd> eigenvalues; // ascending per k
};

/// Lowest n_pairs eigenpairs of H(rho_in) phi = eps B phi at every k-point.
/// Small bases get a dense generalized Hermitian solve; larger ones a
/// block-Davidson iteration (warm-started from the previous orbitals when
/// given). Every returned pair is verified against eig_tol with the
/// implicit operator; failure to reach it raises an error carrying the
/// worst residual.
EigenpairResult solve_eigenpairs(const ModelContext& ctx, const Eigen::VectorXd& rho_in,
                                 int n_pairs, const ScfConfig& cfg,
                                 const BlockMatrix* warm_start = nullptr);

struct DensityPair {
  Eigen::VectorXd rho_in;
  Eigen::VectorXd rho_out;
};

/// Next input density from the mixing history (oldest first, newest last):
/// plain linear mixing, or — for BroydenLite with at least two pairs — a
/// limited-memory type-II secant update on the residual map rho_out -
/// rho_in, with linear mixing as its first step. The electron count of the
/// result is restored exactly by a multiplicative rescale.
Eigen::VectorXd mix_density(const ModelContext& ctx, const std::vector<DensityPair>& history,
                            const MixingSpec& mixing);

struct ScfIterationRecord {
  int n = 0;
  double f = 0.0; // hartree
  double grad_psi_half = 0.0;
  double grad_eta_sf = 0.0;
  double density_residual = 0.0;
  double mu = 0.0;
};

struct ScfResult {
  BlockMatrix psi;
  BlockMatrix eta; // Diag(eps) blocks
  EnergyBreakdown energy;
  std::vector<ScfIterationRecord> log;
  bool converged = false;
  int iterations = 0; // completed solve cycles
  double final_residual = 0.0;
  double error_metric = 0.0; // sqrt(||grad_psi/2||^2 + ||grad_eta||_sF^2) at the end
  double mu = 0.0;
  std::vector<Eigen::VectorXd> eigenvalues;
  std::vector<Eigen::VectorXd> occupations;
  double max_mu_residual = 0.0;
};

/// Density-mixing self-consistency loop: solve the eigenproblem at the
/// current input density, form occupations and the output density, stop
/// when the density residual falls under eps_density, otherwise mix and
/// repeat. Running out of iterations is an expected outcome on hard
/// metallic systems and is reported, not thrown.
ScfResult run_scf(const ModelContext& ctx, const SmearingSpec& smear, const ScfConfig& cfg,
                  std::optional<Eigen::VectorXd> init_density = std::nullopt);

} // namespace ekdft
