#include "ekdft/gradients.hpp"

#include <atomic>
#include <cmath>
#include <iostream>

#include "ekdft/block_linalg.hpp"

namespace ekdft {

namespace {

std::atomic<long> g_clamp_count{0};

void note_clamp() {
  if (g_clamp_count.fetch_add(1) == 0) {
    std::cerr << "warning: occupation-difference preconditioner zeroed a fully saturated "
                 "channel (exact-zero divided difference); further cases are counted "
                 "silently\n";
  }
}

Eigen::MatrixXcd to_frame(const Eigen::MatrixXcd& rot, const Eigen::MatrixXcd& m) {
  if (rot.size() == 0) return m;
  return rot.adjoint() * m * rot;
}

Eigen::MatrixXcd from_frame(const Eigen::MatrixXcd& rot, const Eigen::MatrixXcd& m) {
  if (rot.size() == 0) return m;
  return rot * m * rot.adjoint();
}

} // namespace

GradientPair gradients(const ModelContext& ctx, const SmearingSpec& smear,
                       const BlockMatrix& psi, const Evaluation& ev) {
  const size_t nk = psi.size();
  const auto& w = ctx.spec.kpoints.weights;
  const auto& occ = ev.occ;

  GradientPair out;
  out.mu = occ.mu;
  out.fprime_sum = fprime_weighted_sum(occ, w);
  if (std::abs(out.fprime_sum) < 1e-200) {
    throw FlatOccupationError("all states are far from mu (sum w f' = 0); "
                              "increase sigma or the orbital count");
  }
  out.g_psi.resize(nk);
  out.g_eta.resize(nk);
  out.sigma.resize(nk);
  out.residual.resize(nk);
  out.h_psi.resize(nk);

  // One pass builds H psi, Sigma, the psi-gradient and d_mu together.
  std::vector<Eigen::MatrixXcd> sig_frame(nk);
  for (size_t k = 0; k < nk; ++k) {
    out.h_psi[k] = apply_hamiltonian(ctx, ev.pots, k, psi[k]);
    Eigen::MatrixXcd s = psi[k].adjoint() * out.h_psi[k];
    s = 0.5 * (s + s.adjoint()).eval();
    out.residual[k] = out.h_psi[k] - apply_overlap(ctx, k, psi[k]) * s;
    out.g_psi[k] = (2.0 * w[k]) * (out.residual[k] * occ.fmat[k]);
    sig_frame[k] = to_frame(occ.rot[k], s);
    for (int i = 0; i < sig_frame[k].rows(); ++i) {
      out.d_mu += w[k] * (sig_frame[k](i, i).real() - occ.eps[k][i]) * occ.fprime[k][i] /
                  smear.sigma;
    }
    out.sigma[k] = std::move(s);
  }
  const double mu_shift = out.d_mu / out.fprime_sum;

  for (size_t k = 0; k < nk; ++k) {
    const int n = int(sig_frame[k].rows());
    Eigen::MatrixXcd g(n, n);
    for (int i = 0; i < n; ++i) {
      g(i, i) = w[k] * ((sig_frame[k](i, i).real() - occ.eps[k][i]) * occ.fprime[k][i] /
                            smear.sigma -
                        occ.fprime[k][i] * mu_shift);
      for (int j = i + 1; j < n; ++j) {
        const double dd = divided_difference_f(smear, occ.mu, occ.eps[k][i], occ.eps[k][j]);
        g(i, j) = w[k] * sig_frame[k](i, j) * dd;
        g(j, i) = std::conj(g(i, j));
      }
    }
    out.g_eta[k] = from_frame(occ.rot[k], g);
    if (occ.rot[k].size() != 0) {
      out.g_eta[k] = 0.5 * (out.g_eta[k] + out.g_eta[k].adjoint()).eval();
    }
  }
  return out;
}

double kinetic_precond_multiplier(double x) {
  return 1.0 / (1.0 + x + std::sqrt(1.0 + (x - 1.0) * (x - 1.0)));
}

BlockMatrix precond_psi(const BlockMatrix& residual, const std::vector<PlanewaveBasis>& bases) {
  if (residual.size() != bases.size()) throw ShapeError("residual block count mismatch");
  BlockMatrix out(residual.size());
  for (size_t k = 0; k < residual.size(); ++k) {
    const auto& kin = bases[k].kinetic;
    if (residual[k].rows() != kin.size()) throw ShapeError("residual rows do not match basis");
    Eigen::VectorXd m(kin.size());
    for (int g = 0; g < kin.size(); ++g) m[g] = kinetic_precond_multiplier(kin[g]);
    out[k] = m.asDiagonal() * residual[k];
  }
  return out;
}

BlockMatrix precond_eta(const BlockMatrix& a, const OccupationState& occ,
                        const std::vector<double>& weights, const SmearingSpec& smear) {
  BlockMatrix out(a.size());
  for (size_t k = 0; k < a.size(); ++k) {
    if (occ.rot[k].size() != 0) {
      throw InvalidMatrixError("eta preconditioner needs a diagonal eta");
    }
    const auto& eps = occ.eps[k];
    const int n = int(eps.size());
    if (a[k].rows() != n || a[k].cols() != n) throw ShapeError("eta block size mismatch");
    // Invert exactly the divided difference the gradient was built from: the
    // near-vanishing occupation factors cancel between the two, so far-from-mu
    // channels keep their full Newton-like update instead of freezing. A
    // divided difference that is exactly zero means the matching gradient
    // entry is exactly zero as well -- that channel carries no information
    // and its output is zero.
    Eigen::MatrixXd ratio(n, n);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j <= i; ++j) {
        const double dd = divided_difference_f(smear, occ.mu, eps[i], eps[j]);
        double r = 0.0;
        if (dd == 0.0)
          note_clamp();
        else
          r = -1.0 / dd;
        ratio(i, j) = r;
        ratio(j, i) = r;
      }
    }
    out[k] = (a[k].array() * ratio.array().cast<cdouble>() / weights[k]).matrix();
  }
  return out;
}

long precond_eta_clamp_count() { return g_clamp_count.load(); }

LinePartials line_partials(const ModelContext& ctx, const SmearingSpec& smear,
                           const BlockMatrix& psi, const BlockMatrix& eta,
                           const BlockMatrix& d_psi, const BlockMatrix& d_eta, double t_psi,
                           double t_eta, std::optional<double> warm_mu) {
  const OverlapFn overlap = overlap_fn(ctx);
  const BlockMatrix x = (t_psi == 0.0) ? psi : ortho_qr(psi, d_psi, t_psi, overlap);
  BlockMatrix eta_t(eta.size());
  for (size_t k = 0; k < eta.size(); ++k) {
    eta_t[k] = (t_eta == 0.0) ? eta[k] : (eta[k] + t_eta * d_eta[k]).eval();
  }
  const Evaluation ev = evaluate(ctx, smear, x, eta_t, warm_mu);
  const GradientPair g = gradients(ctx, smear, x, ev);
  const BlockMatrix xdot = retraction_taylor_derivative(psi, d_psi, t_psi, overlap);

  LinePartials out;
  out.value = ev.energy.total;
  out.mu = ev.occ.mu;
  out.mu_residual = ev.occ.mu_residual;
  for (size_t k = 0; k < psi.size(); ++k) {
    const double w = ctx.spec.kpoints.weights[k];
    // d/dt F(X(t), .) = 2 Re<w H X F, X'(t)>
    out.dt_psi +=
        2.0 * w * (g.h_psi[k] * ev.occ.fmat[k]).cwiseProduct(xdot[k].conjugate()).sum().real();
    out.dt_eta += (g.g_eta[k].adjoint() * d_eta[k]).trace().real();
  }
  return out;
}

double ks_stationarity_residual(const ModelContext& ctx, const SmearingSpec& smear,
                                const BlockMatrix& psi, const BlockMatrix& eta) {
  const Evaluation ev = evaluate(ctx, smear, psi, eta);
  for (const auto& rot : ev.occ.rot) {
    if (rot.size() != 0) throw InvalidMatrixError("stationarity check needs a diagonal eta");
  }
  const GradientPair g = gradients(ctx, smear, psi, ev);
  const double c = smear.sigma * g.d_mu / g.fprime_sum;
  double worst = 0.0;
  for (size_t k = 0; k < psi.size(); ++k) {
    const Eigen::MatrixXcd bpsi = apply_overlap(ctx, k, psi[k]);
    for (int i = 0; i < psi[k].cols(); ++i) {
      const double r = (g.h_psi[k].col(i) - (ev.occ.eps[k][i] + c) * bpsi.col(i)).norm();
      worst = std::max(worst, r);
    }
  }
  return worst;
}

} // namespace ekdft
