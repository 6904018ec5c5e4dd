#pragma once

#include "ekdft/model.hpp"

namespace ekdft {

/// Both gradients of F at one point, plus the by-products nearly every
/// consumer (preconditioners, step estimator, stationarity check) reuses.
struct GradientPair {
  BlockMatrix g_psi;    // 2 w_k (H psi_k - B psi_k Sigma_k) F_k
  BlockMatrix g_eta;    // Hermitian; weighted traces sum to zero
  BlockMatrix sigma;    // <psi* H psi>_k, symmetrised
  BlockMatrix residual; // H psi_k - B psi_k Sigma_k (unscaled defect)
  BlockMatrix h_psi;    // H psi_k
  double mu = 0.0;
  double d_mu = 0.0;       // sum_k w_k sum_i (Sigma_ii - eps_i) f'_i / sigma
  double fprime_sum = 0.0; // sum_k w_k sum_i f'_i
};

/// Computes both gradients at (psi, eta) from the evaluation at that point.
/// eta may be any Hermitian block (the eta-gradient is formed in the
/// occupation eigenframe and rotated back); the optimizer itself only ever
/// holds diagonal eta, but the line search shifts it off the diagonal.
/// Throws FlatOccupationError when every state sits far from mu
/// (sum w f' ~ 0): sigma too small or too few orbitals.
GradientPair gradients(const ModelContext& ctx, const SmearingSpec& smear,
                       const BlockMatrix& psi, const Evaluation& ev);

/// Kinetic-energy preconditioner multiplier 1/(1 + x + sqrt(1 + (x-1)^2))
/// at x = |k+G|^2/2; strictly inside (0, 1], ~1/(2x) for large x.
double kinetic_precond_multiplier(double x);

/// Applies the diagonal-in-G kinetic preconditioner to the raw residual
/// blocks H psi - B psi Sigma. Equivalent to the composite occupation-aware
/// preconditioner applied to the full gradient, but immune to tiny
/// occupations because no F^{-1} is ever formed.
BlockMatrix precond_psi(const BlockMatrix& residual, const std::vector<PlanewaveBasis>& bases);

/// Occupation-difference preconditioner for eta-space Hermitian blocks:
/// out_ij = a_ij (eps_i - eps_j) / (w_k (f_j - f_i)), with the coincident
/// limit -sigma/f' on (near-)equal eigenvalues. Denominators are floored at
/// 1e-12 (sign kept) and the ratio capped at 1e6*sigma; clamps are counted.
/// Applied to the eta-gradient this yields c I + eta_k - Sigma_k.
/// Requires diagonal eta (occ built from one).
BlockMatrix precond_eta(const BlockMatrix& a, const OccupationState& occ,
                        const std::vector<double>& weights, const SmearingSpec& smear);

/// Process-wide count of guarded-ratio clamps inside precond_eta.
long precond_eta_clamp_count();

/// One sample of the line-search function
///   Fbar(t_psi, t_eta) = F(ortho_qr(psi, d_psi, t_psi), eta + t_eta d_eta)
/// with its two partial derivatives. At (0,0) the partials equal
/// Re<grad_psi, d_psi> and Re<grad_eta, d_eta>; at trial points the psi
/// partial contracts the Wirtinger gradient with the third-order retraction
/// derivative and the eta partial re-solves mu at the shifted eta.
struct LinePartials {
  double value = 0.0;
  double dt_psi = 0.0;
  double dt_eta = 0.0;
  double mu = 0.0;
  double mu_residual = 0.0;
};

LinePartials line_partials(const ModelContext& ctx, const SmearingSpec& smear,
                           const BlockMatrix& psi, const BlockMatrix& eta,
                           const BlockMatrix& d_psi, const BlockMatrix& d_eta, double t_psi,
                           double t_eta, std::optional<double> warm_mu = std::nullopt);

/// max_k max_i || H psi_ki - (eps_ki + c) B psi_ki ||_2 with the constant
/// shift c = d_mu / ((1/sigma) sum w f'); zero exactly at first-order
/// points (the standard eigenvalue equations with shifted eigenvalues).
/// Requires diagonal eta.
double ks_stationarity_residual(const ModelContext& ctx, const SmearingSpec& smear,
                                const BlockMatrix& psi, const BlockMatrix& eta);

} // namespace ekdft
