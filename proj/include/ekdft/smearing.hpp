#pragma once

#include <optional>

#include "ekdft/types.hpp"

namespace ekdft {

enum class SmearingKind { FermiDirac, Gaussian, MethfesselPaxton, MarzariVanderbilt };

/// Occupation model: f is the occupation function, s the associated entropy
/// density, both of the reduced variable x = (eps - mu)/sigma and tied
/// together by s'(x) = x f'(x).
struct SmearingSpec {
  SmearingKind kind = SmearingKind::FermiDirac;
  double sigma = 0.01;  // hartree, > 0
  int mp_order = 1;     // Methfessel-Paxton only, >= 1
  double mv_a = -0.5634; // Marzari-Vanderbilt shape parameter

  static SmearingSpec fermi_dirac(double sigma);
  static SmearingSpec gaussian(double sigma);
  static SmearingSpec methfessel_paxton(double sigma, int order);
  static SmearingSpec marzari_vanderbilt(double sigma, double a = -0.5634);

  /// True when f is strictly decreasing (Fermi-Dirac, Gaussian): the
  /// occupation constraint then has a unique chemical potential.
  bool monotone() const {
    return kind == SmearingKind::FermiDirac || kind == SmearingKind::Gaussian;
  }
};

/// f(x); safe for |x| up to 700 (no overflow, graceful underflow).
double f_value(const SmearingSpec& spec, double x);
/// s(x), the smearing entropy density.
double s_value(const SmearingSpec& spec, double x);
/// f'(x).
double f_prime(const SmearingSpec& spec, double x);

/// (f((e1-mu)/sigma) - f((e2-mu)/sigma)) / (e1 - e2), switching to the
/// analytic limit (1/sigma) f'((e1-mu)/sigma) when |e1-e2| <= 1e-8*max(1,|e1|,|e2|).
double divided_difference_f(const SmearingSpec& spec, double mu, double e1, double e2);

struct MuResult {
  double mu = 0.0;
  double residual = 0.0; // |sum_k w_k tr F - n_e| at the returned mu
};

/// Chemical potential from sum_k w_k sum_i f((eps_ki - mu)/sigma) = n_e.
/// Monotone kinds: bisection on [min eps - 60 sigma, max eps + 60 sigma]
/// plus a short Newton polish. Non-monotone kinds (MP, MV) can have several
/// roots; a scan collects the sign-change brackets and the one nearest
/// `warm` (cold start: the ceil(n_e/2)-th smallest eigenvalue) is refined.
MuResult solve_mu(const std::vector<Eigen::VectorXd>& eigs, const std::vector<double>& weights,
                  const SmearingSpec& spec, double n_e, std::optional<double> warm = std::nullopt);

/// F = U f((diag - mu)/sigma) U* for Hermitian eta (diagonal fast path when
/// the off-diagonal part is exactly zero). Result is re-symmetrised.
Eigen::MatrixXcd occupation_matrix(const Eigen::MatrixXcd& eta, double mu,
                                   const SmearingSpec& spec);

/// -sigma * sum_k w_k tr S((eta_k - mu I)/sigma).
double entropy_term(const BlockMatrix& etas, const std::vector<double>& weights, double mu,
                    const SmearingSpec& spec);

/// Spectral data of one occupation evaluation, kept around because nearly
/// every downstream formula (density weights, eta-gradients, preconditioners)
/// reuses it.
struct OccupationState {
  double mu = 0.0;
  double mu_residual = 0.0;
  std::vector<Eigen::VectorXd> eps;    // eigenvalues of eta_k, ascending
  std::vector<Eigen::MatrixXcd> rot;   // eigenvectors; empty matrix = identity
  std::vector<Eigen::VectorXd> f;      // f((eps - mu)/sigma)
  std::vector<Eigen::VectorXd> fprime; // f'((eps - mu)/sigma)
  std::vector<Eigen::MatrixXcd> fmat;  // F_{eta_k} in the original frame
};

/// Eigendecomposes each eta_k, solves for mu and fills the occupation data.
OccupationState build_occupations(const BlockMatrix& etas, const std::vector<double>& weights,
                                  const SmearingSpec& spec, double n_e,
                                  std::optional<double> warm = std::nullopt);

/// sum_k w_k sum_i f'((eps_ki - mu)/sigma); the denominator of the
/// mu-coupling terms. Near zero means every state is far from mu.
double fprime_weighted_sum(const OccupationState& occ, const std::vector<double>& weights);

} // namespace ekdft
