#include "ekdft/block_linalg.hpp"

#include <cmath>

namespace ekdft {

namespace {

void check_pair(const BlockMatrix& a, const BlockMatrix& b) {
  if (a.size() != b.size()) throw ShapeError("block counts differ");
  for (size_t k = 0; k < a.size(); ++k) {
    if (a[k].rows() != b[k].rows() || a[k].cols() != b[k].cols()) {
      throw ShapeError("block shapes differ at k=" + std::to_string(k));
    }
  }
}

// Lower-triangular Phi with halved diagonal so that Phi + Phi^H = S.
Eigen::MatrixXcd half_lower(const Eigen::MatrixXcd& s) {
  Eigen::MatrixXcd phi = s.triangularView<Eigen::StrictlyLower>();
  phi.diagonal() = 0.5 * s.diagonal();
  return phi;
}

Eigen::MatrixXcd cholesky_with_jitter(Eigen::MatrixXcd a) {
  const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
  double jitter = 1e-15 * scale;
  for (int attempt = 0; attempt < 4; ++attempt) {
    Eigen::LLT<Eigen::MatrixXcd> llt(a);
    if (llt.info() == Eigen::Success) return llt.matrixL();
    a += jitter * Eigen::MatrixXcd::Identity(a.rows(), a.cols());
    jitter *= 100.0;
  }
  throw InvalidMatrixError("Gram matrix not positive definite (Cholesky failed)");
}

} // namespace

OverlapFn identity_overlap() {
  return [](size_t, const Eigen::MatrixXcd& x) { return x; };
}

BlockMatrix gram(const BlockMatrix& psi, const BlockMatrix& phi) {
  if (psi.size() != phi.size()) throw ShapeError("block counts differ");
  BlockMatrix out(psi.size());
  for (size_t k = 0; k < psi.size(); ++k) {
    if (psi[k].rows() != phi[k].rows()) throw ShapeError("row counts differ in gram");
    out[k] = psi[k].adjoint() * phi[k];
  }
  return out;
}

cdouble block_inner(const BlockMatrix& a, const BlockMatrix& b) {
  check_pair(a, b);
  cdouble acc(0.0, 0.0);
  for (size_t k = 0; k < a.size(); ++k) acc += (a[k].adjoint() * b[k]).trace();
  return acc;
}

double block_real_inner(const BlockMatrix& a, const BlockMatrix& b) {
  return block_inner(a, b).real();
}

double block_norm(const BlockMatrix& a) {
  double acc = 0.0;
  for (const auto& blk : a) acc += blk.squaredNorm();
  return std::sqrt(acc);
}

double block_inf_norm(const BlockMatrix& a) {
  double best = 0.0;
  for (const auto& blk : a) best = std::max(best, blk.norm());
  return best;
}

cdouble shift_constant(const BlockMatrix& a) {
  if (a.empty()) throw ShapeError("empty block matrix");
  cdouble tr = 0.0;
  double dim = 0.0;
  for (const auto& blk : a) {
    if (blk.rows() != blk.cols()) throw ShapeError("shift constant needs square blocks");
    tr += blk.trace();
    dim += double(blk.rows());
  }
  return tr / dim;
}

double sf_norm(const BlockMatrix& a) {
  const cdouble c = shift_constant(a);
  double acc = 0.0;
  for (const auto& blk : a) {
    acc += (c * Eigen::MatrixXcd::Identity(blk.rows(), blk.cols()) - blk).squaredNorm();
  }
  return std::sqrt(acc);
}

double sf_inf_norm(const BlockMatrix& a) {
  const cdouble c = shift_constant(a);
  double best = -1.0;
  for (const auto& blk : a) {
    const double v = (c * Eigen::MatrixXcd::Identity(blk.rows(), blk.cols()) - blk).norm();
    if (best < 0.0 || v < best) best = v;
  }
  return best;
}

BlockMatrix project_tangent(const BlockMatrix& psi, const BlockMatrix& phi, double alpha,
                            const OverlapFn& overlap) {
  check_pair(psi, phi);
  BlockMatrix out(psi.size());
  for (size_t k = 0; k < psi.size(); ++k) {
    const Eigen::MatrixXcd bpsi = overlap(k, psi[k]);
    const Eigen::MatrixXcd g = psi[k].adjoint() * phi[k];
    out[k] = phi[k] - bpsi * g + alpha * (bpsi * (g - (phi[k].adjoint() * psi[k]).eval()));
  }
  return out;
}

BlockMatrix project_tangent_adjoint(const BlockMatrix& psi, const BlockMatrix& phi, double alpha,
                                    const OverlapFn& overlap) {
  check_pair(psi, phi);
  BlockMatrix out(psi.size());
  for (size_t k = 0; k < psi.size(); ++k) {
    const Eigen::MatrixXcd bphi = overlap(k, phi[k]);
    const Eigen::MatrixXcd g = psi[k].adjoint() * bphi;
    out[k] = phi[k] - psi[k] * g + alpha * (psi[k] * (g - g.adjoint().eval()));
  }
  return out;
}

BlockMatrix ortho_qr(const BlockMatrix& psi, const BlockMatrix& d, double t,
                     const OverlapFn& overlap) {
  check_pair(psi, d);
  BlockMatrix out(psi.size());
  for (size_t k = 0; k < psi.size(); ++k) {
    const Eigen::MatrixXcd s = d[k].adjoint() * overlap(k, d[k]);
    Eigen::MatrixXcd a =
        Eigen::MatrixXcd::Identity(s.rows(), s.cols()) + (t * t) * 0.5 * (s + s.adjoint().eval());
    const Eigen::MatrixXcd l = cholesky_with_jitter(std::move(a));
    const Eigen::MatrixXcd y = psi[k] + t * d[k];
    // X = Y (L*)^{-1}  via  X* = L^{-1} Y*
    out[k] = l.triangularView<Eigen::Lower>().solve(y.adjoint()).adjoint();
  }
  return out;
}

BlockMatrix retraction_taylor_derivative(const BlockMatrix& psi, const BlockMatrix& d, double t,
                                         const OverlapFn& overlap) {
  check_pair(psi, d);
  BlockMatrix out(psi.size());
  for (size_t k = 0; k < psi.size(); ++k) {
    const Eigen::MatrixXcd s = d[k].adjoint() * overlap(k, d[k]);
    const Eigen::MatrixXcd phi_adj = half_lower(0.5 * (s + s.adjoint().eval())).adjoint();
    out[k] = d[k] - (2.0 * t) * (psi[k] * phi_adj) - (3.0 * t * t) * (d[k] * phi_adj);
  }
  return out;
}

DiagonalizedState diagonalize_and_rotate(const BlockMatrix& eta, const BlockMatrix& psi,
                                         const BlockMatrix& d_psi, const BlockMatrix& d_eta) {
  if (eta.size() != psi.size() || eta.size() != d_psi.size() || eta.size() != d_eta.size()) {
    throw ShapeError("block counts differ");
  }
  DiagonalizedState out;
  const size_t nk = eta.size();
  out.eigs.resize(nk);
  out.eta.resize(nk);
  out.psi.resize(nk);
  out.d_psi.resize(nk);
  out.d_eta.resize(nk);
  out.p.resize(nk);
  for (size_t k = 0; k < nk; ++k) {
    const auto& blk = eta[k];
    if (blk.rows() != blk.cols()) throw InvalidMatrixError("eta block must be square");
    const double scale = std::max(1.0, blk.cwiseAbs().maxCoeff());
    if ((blk - blk.adjoint()).cwiseAbs().maxCoeff() > 1e-12 * scale) {
      throw InvalidMatrixError("eta block must be Hermitian");
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(blk);
    Eigen::MatrixXcd p = es.eigenvectors(); // ascending eigenvalues
    for (int j = 0; j < p.cols(); ++j) {
      int imax = 0;
      double best = -1.0;
      for (int i = 0; i < p.rows(); ++i) {
        const double mag = std::abs(p(i, j));
        if (mag > best) {
          best = mag;
          imax = i;
        }
      }
      const cdouble z = p(imax, j);
      if (std::abs(z) > 0.0) p.col(j) *= std::conj(z) / std::abs(z);
    }
    out.eigs[k] = es.eigenvalues();
    out.eta[k] = es.eigenvalues().cast<cdouble>().asDiagonal();
    out.psi[k] = psi[k] * p;
    out.d_psi[k] = d_psi[k] * p;
    out.d_eta[k] = p.adjoint() * d_eta[k] * p;
    out.p[k] = std::move(p);
  }
  return out;
}

} // namespace ekdft
