#pragma once

#include <functional>

#include "ekdft/types.hpp"

namespace ekdft {

/// Applies the overlap to one coefficient block (k index, block) -> block.
using OverlapFn = std::function<Eigen::MatrixXcd(size_t, const Eigen::MatrixXcd&)>;

/// Overlap of the plain L2 metric.
OverlapFn identity_overlap();

/// Gram blocks <Psi* Phi>_k = Psi_k^H Phi_k.
BlockMatrix gram(const BlockMatrix& psi, const BlockMatrix& phi);

/// sum_k tr(A_k^H B_k).
cdouble block_inner(const BlockMatrix& a, const BlockMatrix& b);
double block_real_inner(const BlockMatrix& a, const BlockMatrix& b);

/// sqrt(sum_k ||A_k||_F^2).
double block_norm(const BlockMatrix& a);

/// max_k ||A_k||_F (block sup norm for coefficient blocks).
double block_inf_norm(const BlockMatrix& a);

/// Mean diagonal value c_A = sum_k tr(A_k) / sum_k N_k of square blocks;
/// complex in general, real whenever the blocks are Hermitian. The shifted
/// norms below minimise over complex shifts, so they are genuine norms on
/// the quotient by the identity line.
cdouble shift_constant(const BlockMatrix& a);

/// Shift-invariant Frobenius norm sqrt(sum_k ||c_A I - A_k||_F^2): the
/// distance from the line of global identity shifts.
double sf_norm(const BlockMatrix& a);

/// min_k ||c_A I - A_k||_F with the global shift c_A.
double sf_inf_norm(const BlockMatrix& a);

/// P_{alpha,Psi}(Phi) = Phi - B Psi <Psi* Phi> + alpha B Psi (<Psi* Phi> - <Phi* Psi>).
/// A projection only for alpha in {0, 1/2}.
BlockMatrix project_tangent(const BlockMatrix& psi, const BlockMatrix& phi, double alpha,
                            const OverlapFn& overlap);

/// Real-inner-product adjoint:
/// P*_{alpha,Psi}(Phi) = Phi - Psi <Psi* B Phi> + alpha Psi (<Psi* B Phi> - <Phi* B Psi>).
/// For alpha = 0 the output satisfies <Psi* B out> = 0.
BlockMatrix project_tangent_adjoint(const BlockMatrix& psi, const BlockMatrix& phi, double alpha,
                                    const OverlapFn& overlap);

/// QR-style retraction (Psi + t D) L^{-*} with L L* = I + t^2 <D* B D>
/// (Cholesky; tiny scaled jitter is added on factorisation failure).
/// B-orthonormality of the result needs <D* B Psi> = 0.
BlockMatrix ortho_qr(const BlockMatrix& psi, const BlockMatrix& d, double t,
                     const OverlapFn& overlap);

/// Third-order approximation of the retraction's t-derivative:
/// X'(t) ~ D - 2t Psi Phi(S)* - 3t^2 D Phi(S)*, S = <D* B D>, where Phi(S) is
/// the lower-triangular matrix with halved diagonal (Phi + Phi* = S).
BlockMatrix retraction_taylor_derivative(const BlockMatrix& psi, const BlockMatrix& d, double t,
                                         const OverlapFn& overlap);

/// Result frame of an eta diagonalisation: ascending eigenvalues, rotated
/// states and directions, and the unitary P itself (columns phase-fixed so
/// the largest-magnitude component is real positive).
struct DiagonalizedState {
  std::vector<Eigen::VectorXd> eigs;
  BlockMatrix eta;   // Diag(eigs) as complex blocks
  BlockMatrix psi;   // Psi P
  BlockMatrix d_psi; // D_Psi P
  BlockMatrix d_eta; // P* D_eta P
  BlockMatrix p;
};

DiagonalizedState diagonalize_and_rotate(const BlockMatrix& eta, const BlockMatrix& psi,
                                         const BlockMatrix& d_psi, const BlockMatrix& d_eta);

} // namespace ekdft
