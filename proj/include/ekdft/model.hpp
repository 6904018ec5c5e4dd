#pragma once

#include "ekdft/block_linalg.hpp"
#include "ekdft/lattice.hpp"
#include "ekdft/smearing.hpp"
#include "ekdft/types.hpp"

namespace ekdft {

/// Sum of reciprocal-space Gaussians: coefficient amp * exp(-|G|^2 width^2/2)
/// times the structure factor of the centers (fractional coordinates).
struct GaussianField {
  double amplitude = 0.0;
  double width = 1.0;
  std::vector<Vec3> centers; // fractional
};

/// One nonlocal projector channel: Gaussian radial envelope in G, centred at
/// a fractional position.
struct ProjectorSpec {
  double amplitude = 1.0;
  double width = 1.0;
  Vec3 center = Vec3::Zero();
};

enum class XcKind { None, SlaterX };

struct ModelSpec {
  UnitCell cell;
  KpointSet kpoints;
  double ecut = 1.0;
  double n_electrons = 2.0;
  int n_orbitals = 2;
  XcKind xc = XcKind::None;
  std::vector<GaussianField> local_potential;
  std::vector<ProjectorSpec> projectors;
  Eigen::MatrixXcd d_matrix; // K x K Hermitian channel couplings
  Eigen::MatrixXcd q_matrix; // K x K Hermitian overlap augmentation, may be zero
  double aug_width = 1.0;    // density-augmentation envelope
  Vec3 aug_center = Vec3::Zero();
  std::vector<GaussianField> init_charges; // superposition guess for rho
};

/// Everything derived from a ModelSpec that evaluations reuse: shared-grid
/// bases, the local potential and augmentation envelope on the dense grid,
/// per-k projector coefficient blocks, |G|^2 tables.
struct ModelContext {
  ModelSpec spec;
  ReciprocalLattice recip;
  std::vector<PlanewaveBasis> bases;
  std::array<int, 3> dims{};
  int np = 0;      // dense grid points
  double dv = 0.0; // quadrature weight |cell| / np
  Eigen::VectorXd g2;   // |G|^2 per dense-grid point
  Eigen::VectorXd vloc; // local potential on the grid (G=0 removed)
  std::vector<Eigen::MatrixXcd> proj; // per k: N_G x K coefficient block
  Eigen::VectorXd aug; // unit-integral augmentation envelope; size 0 if unused
  bool has_overlap = false;
  double overlap_coercivity = 1.0; // lower bound on eig(B) across k

  int n_kpoints() const { return int(bases.size()); }
  int n_channels() const { return int(spec.projectors.size()); }
};

/// Validates the spec (Hermitian D/Q, orbital count above the occupied
/// window, coercive overlap) and precomputes the context.
ModelContext build_model(const ModelSpec& spec);

/// Superposition initial density: configured Gaussian charges (clamped at 0)
/// normalised to n_electrons, or the uniform density when none are given.
Eigen::VectorXd initial_density(const ModelContext& ctx);

/// rho(r) = sum_k w_k tr[(Psi* Psi + <Psi*M> Qshape(r) <M*Psi>) F_k].
Eigen::VectorXd density(const ModelContext& ctx, const BlockMatrix& psi,
                        const OccupationState& occ);

/// B X = X + M Q <M* X> on coefficient block X of k-point k.
Eigen::MatrixXcd apply_overlap(const ModelContext& ctx, size_t k, const Eigen::MatrixXcd& x);

/// Overlap functor for the block-linalg operations.
OverlapFn overlap_fn(const ModelContext& ctx);

struct HartreeResult {
  Eigen::VectorXd v; // v_H on the grid; zero mean
  double energy = 0.0;
};

/// Periodic Coulomb solve: v_H(G) = 4 pi rho(G)/|G|^2 (G=0 dropped),
/// E_H = (1/2) int rho v_H >= 0.
HartreeResult hartree_potential(const ModelContext& ctx, const Eigen::VectorXd& rho);

struct XcResult {
  double energy = 0.0;
  Eigen::VectorXd v;
};

/// Slater exchange e_xc = -C_x int rho^{4/3}, v_xc = -(4/3) C_x rho^{1/3}
/// (rho clamped at 0 pointwise); the None kind returns zeros.
XcResult xc_energy_potential(const ModelContext& ctx, const Eigen::VectorXd& rho);

/// Density-dependent pieces of the Hamiltonian for one fixed rho.
struct Potentials {
  Eigen::VectorXd veff; // vloc + v_H + v_xc on the grid
  Eigen::VectorXd v_hartree;
  Eigen::VectorXd v_xc;
  double e_local = 0.0;
  double e_hartree = 0.0;
  double e_xc = 0.0;
  Eigen::MatrixXcd d_eff; // D + int veff Qshape; empty when K = 0
};

Potentials build_potentials(const ModelContext& ctx, const Eigen::VectorXd& rho);

/// H X = -(1/2)(ik+grad)^2 X + veff X + M D_eff <M* X> on k-point k.
Eigen::MatrixXcd apply_hamiltonian(const ModelContext& ctx, const Potentials& pots, size_t k,
                                   const Eigen::MatrixXcd& x);

struct EnergyBreakdown {
  double kinetic_nonlocal = 0.0;
  double local = 0.0;
  double hartree = 0.0;
  double xc = 0.0;
  double entropy = 0.0;
  double total = 0.0;
};

/// One full free-energy evaluation at (Psi, eta).
struct Evaluation {
  OccupationState occ;
  Eigen::VectorXd rho;
  Potentials pots;
  EnergyBreakdown energy;
};

Evaluation evaluate(const ModelContext& ctx, const SmearingSpec& smear, const BlockMatrix& psi,
                    const BlockMatrix& eta, std::optional<double> warm_mu = std::nullopt);

/// F(Psi, eta) with its named pieces; thin wrapper over evaluate().
EnergyBreakdown free_energy(const ModelContext& ctx, const SmearingSpec& smear,
                            const BlockMatrix& psi, const BlockMatrix& eta,
                            std::optional<double> warm_mu = std::nullopt);

} // namespace ekdft
