#include "ekdft/scf.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "ekdft/gradients.hpp"

namespace ekdft {

namespace {

void validate_scf_config(const ScfConfig& cfg) {
  if (!(cfg.mixing.factor > 0.0 && cfg.mixing.factor <= 1.0))
    throw ConfigError("mixing factor must lie in (0, 1]");
  if (cfg.mixing.history < 1) throw ConfigError("mixing history must be at least 1");
  if (!(cfg.eps_density > 0.0)) throw ConfigError("density tolerance must be positive");
  if (cfg.max_iter < 1) throw ConfigError("max_iter must be at least 1");
  if (!(cfg.eig_tol > 0.0)) throw ConfigError("eigenpair tolerance must be positive");
  if (cfg.dense_threshold < 1) throw ConfigError("dense-solver threshold must be positive");
}

int wrap_flat(const std::array<int, 3>& dims, const IVec3& m) {
  const int tx = ((m[0] % dims[0]) + dims[0]) % dims[0];
  const int ty = ((m[1] % dims[1]) + dims[1]) % dims[1];
  const int tz = ((m[2] % dims[2]) + dims[2]) % dims[2];
  return (tx * dims[1] + ty) * dims[2] + tz;
}

/// Grid Fourier coefficients of the effective potential, so that the matrix
/// element between plane waves a and b is veff_hat[G_a - G_b].
Eigen::VectorXcd potential_coefficients(const ModelContext& ctx, const Eigen::VectorXd& veff) {
  const Eigen::VectorXcd dense = veff.cast<cdouble>();
  Eigen::VectorXcd out(ctx.np);
  ctx.bases.front().grid->forward(dense.data(), out.data());
  out /= double(ctx.np);
  return out;
}

/// H and B assembled as explicit matrices for one k-point.
struct DenseOperators {
  Eigen::MatrixXcd h;
  Eigen::MatrixXcd b;
};

DenseOperators assemble_dense(const ModelContext& ctx, const Potentials& pots,
                              const Eigen::VectorXcd& veff_hat, size_t k) {
  const PlanewaveBasis& basis = ctx.bases[k];
  const Eigen::Index ng = basis.size();
  DenseOperators ops;
  ops.h.resize(ng, ng);
  for (Eigen::Index a = 0; a < ng; ++a)
    for (Eigen::Index b = 0; b < ng; ++b)
      ops.h(a, b) = veff_hat[wrap_flat(ctx.dims, IVec3(basis.mvecs[size_t(a)] -
                                                       basis.mvecs[size_t(b)]))];
  ops.h.diagonal() += basis.kinetic.cast<cdouble>();
  if (ctx.n_channels() > 0 && pots.d_eff.size() > 0)
    ops.h += ctx.proj[k] * pots.d_eff * ctx.proj[k].adjoint();
  ops.h = 0.5 * (ops.h + ops.h.adjoint()).eval();

  ops.b = Eigen::MatrixXcd::Identity(ng, ng);
  if (ctx.has_overlap)
    ops.b += ctx.proj[k] * ctx.spec.q_matrix * ctx.proj[k].adjoint();
  ops.b = 0.5 * (ops.b + ops.b.adjoint()).eval();
  return ops;
}

/// In-place block Gram-Schmidt in the B metric: orthonormalises the columns
/// of t against v (twice, for stability) and against earlier t columns,
/// dropping columns whose remainder collapses. Returns the surviving count.
Eigen::Index b_orthonormalise(const ModelContext& ctx, size_t k, const Eigen::MatrixXcd& v,
                              Eigen::MatrixXcd& t) {
  const double drop_tol = 1e-10;
  Eigen::Index kept = 0;
  for (Eigen::Index j = 0; j < t.cols(); ++j) {
    Eigen::VectorXcd col = t.col(j);
    for (int pass = 0; pass < 2; ++pass) {
      const Eigen::VectorXcd bcol = apply_overlap(ctx, k, col);
      if (v.cols() > 0) col -= v * (v.adjoint() * bcol);
      if (kept > 0) {
        const auto prior = t.leftCols(kept);
        col -= prior * (prior.adjoint() * bcol);
      }
    }
    const Eigen::VectorXcd bcol = apply_overlap(ctx, k, col);
    const double norm = std::sqrt(std::abs(col.dot(bcol).real()));
    if (norm > drop_tol) {
      t.col(kept) = col / norm;
      ++kept;
    }
  }
  return kept;
}

struct KpointPairs {
  Eigen::MatrixXcd orbitals;
  Eigen::VectorXd eigenvalues;
};

KpointPairs davidson_lowest(const ModelContext& ctx, const Potentials& pots,
                            const Eigen::VectorXcd& veff_hat, size_t k, int n_pairs,
                            double eig_tol, const Eigen::MatrixXcd* warm) {
  const PlanewaveBasis& basis = ctx.bases[k];
  const Eigen::Index ng = basis.size();
  const Eigen::Index n = n_pairs;

  // Diagonal of H for the correction preconditioner.
  Eigen::VectorXd diag_h = basis.kinetic;
  diag_h.array() += veff_hat[0].real();
  if (ctx.n_channels() > 0 && pots.d_eff.size() > 0)
    diag_h += (ctx.proj[k] * pots.d_eff).cwiseProduct(ctx.proj[k].conjugate())
                  .rowwise()
                  .sum()
                  .real();

  // Seed block: warm-start columns, padded with the lowest-kinetic plane
  // waves; everything B-orthonormalised with rank-deficient columns dropped.
  std::vector<Eigen::Index> order(static_cast<size_t>(ng));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index a, Eigen::Index b) { return diag_h[a] < diag_h[b]; });

  const Eigen::Index block0 = std::min<Eigen::Index>(ng, std::max<Eigen::Index>(2 * n, n + 4));
  Eigen::MatrixXcd seed(ng, block0);
  Eigen::Index filled = 0;
  if (warm != nullptr && warm->rows() == ng)
    for (Eigen::Index j = 0; j < warm->cols() && filled < block0; ++j)
      seed.col(filled++) = warm->col(j);
  for (Eigen::Index j = 0; j < ng && filled < block0; ++j) {
    Eigen::VectorXcd unit = Eigen::VectorXcd::Zero(ng);
    unit[order[size_t(j)]] = 1.0;
    seed.col(filled++) = unit;
  }
  Eigen::MatrixXcd v(ng, 0);
  {
    const Eigen::Index kept = b_orthonormalise(ctx, k, v, seed);
    if (kept < n) throw Error("iterative eigensolver could not seed a full subspace");
    v = seed.leftCols(kept);
  }

  const Eigen::Index cap = std::min<Eigen::Index>(ng, std::max<Eigen::Index>(4 * n, block0 + 2 * n));
  const int max_rounds = 500;
  double worst = 0.0;
  for (int round = 0; round < max_rounds; ++round) {
    Eigen::MatrixXcd w = apply_hamiltonian(ctx, pots, k, v);
    Eigen::MatrixXcd rayleigh = v.adjoint() * w;
    rayleigh = 0.5 * (rayleigh + rayleigh.adjoint()).eval();
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(rayleigh);
    if (es.info() != Eigen::Success) throw Error("subspace eigensolve failed");

    const Eigen::MatrixXcd y = es.eigenvectors().leftCols(n);
    const Eigen::VectorXd theta = es.eigenvalues().head(n);
    const Eigen::MatrixXcd x = v * y;
    Eigen::MatrixXcd resid = w * y;
    for (Eigen::Index i = 0; i < n; ++i)
      resid.col(i) -= theta[i] * apply_overlap(ctx, k, x.col(i));

    worst = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) worst = std::max(worst, resid.col(i).norm());
    if (worst <= eig_tol) return {x, theta};

    // Diagonal correction, then subspace expansion (collapse at the cap).
    Eigen::MatrixXcd t(ng, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::VectorXcd corr = resid.col(i);
      for (Eigen::Index j = 0; j < ng; ++j) {
        double den = diag_h[j] - theta[i];
        if (std::abs(den) < 1e-2) den = den >= 0.0 ? 1e-2 : -1e-2;
        corr[j] /= den;
      }
      t.col(i) = corr;
    }
    if (v.cols() + n > cap) v = x; // collapse onto the current Ritz block
    const Eigen::Index kept = b_orthonormalise(ctx, k, v, t);
    if (kept == 0) {
      // Corrections degenerate: restart from the Ritz block alone.
      if (v.cols() == n) break;
      v = x;
      continue;
    }
    Eigen::MatrixXcd grown(ng, v.cols() + kept);
    grown << v, t.leftCols(kept);
    v = std::move(grown);
  }
  std::ostringstream msg;
  msg << "iterative eigensolver stalled: worst residual " << worst << " above tolerance "
      << eig_tol;
  throw Error(msg.str());
}

} // namespace

EigenpairResult solve_eigenpairs(const ModelContext& ctx, const Eigen::VectorXd& rho_in,
                                 int n_pairs, const ScfConfig& cfg,
                                 const BlockMatrix* warm_start) {
  const size_t nk = size_t(ctx.n_kpoints());
  const Potentials pots = build_potentials(ctx, rho_in);
  const Eigen::VectorXcd veff_hat = potential_coefficients(ctx, pots.veff);

  EigenpairResult out;
  out.orbitals.resize(nk);
  out.eigenvalues.resize(nk);
  for (size_t k = 0; k < nk; ++k) {
    const Eigen::Index ng = ctx.bases[k].size();
    if (n_pairs > ng)
      throw ShapeError("more eigenpairs requested than basis functions available");

    if (ng <= cfg.dense_threshold) {
      const DenseOperators ops = assemble_dense(ctx, pots, veff_hat, k);
      if (ctx.has_overlap) {
        const Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXcd> ges(ops.h, ops.b);
        if (ges.info() != Eigen::Success)
          throw Error("dense generalized eigensolve failed to converge");
        out.orbitals[k] = ges.eigenvectors().leftCols(n_pairs);
        out.eigenvalues[k] = ges.eigenvalues().head(n_pairs);
      } else {
        const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(ops.h);
        if (es.info() != Eigen::Success) throw Error("dense eigensolve failed to converge");
        out.orbitals[k] = es.eigenvectors().leftCols(n_pairs);
        out.eigenvalues[k] = es.eigenvalues().head(n_pairs);
      }
    } else {
      const Eigen::MatrixXcd* warm =
          warm_start != nullptr && warm_start->size() == nk ? &(*warm_start)[k] : nullptr;
      const KpointPairs pairs =
          davidson_lowest(ctx, pots, veff_hat, k, n_pairs, cfg.eig_tol, warm);
      out.orbitals[k] = pairs.orbitals;
      out.eigenvalues[k] = pairs.eigenvalues;
    }

    // Verify every pair against the implicit operator.
    const Eigen::MatrixXcd hx = apply_hamiltonian(ctx, pots, k, out.orbitals[k]);
    double worst = 0.0;
    for (int i = 0; i < n_pairs; ++i) {
      const Eigen::VectorXcd r =
          hx.col(i) - out.eigenvalues[k][i] * apply_overlap(ctx, k, out.orbitals[k].col(i));
      worst = std::max(worst, r.norm());
    }
    if (worst > cfg.eig_tol) {
      std::ostringstream msg;
      msg << "eigenpair residual " << worst << " exceeds tolerance " << cfg.eig_tol
          << " at k-point " << k;
      throw Error(msg.str());
    }
  }
  return out;
}

Eigen::VectorXd mix_density(const ModelContext& ctx, const std::vector<DensityPair>& history,
                            const MixingSpec& mixing) {
  if (history.empty()) throw Error("density mixing needs at least one (in, out) pair");
  const DensityPair& last = history.back();

  Eigen::VectorXd next;
  if (mixing.kind == MixingKind::Linear || history.size() < 2) {
    next = last.rho_in + mixing.factor * (last.rho_out - last.rho_in);
  } else {
    // Limited-memory type-II secant step on the residual map R = out - in:
    // project the newest residual off the span of recent residual
    // differences, take the quasi-Newton combination, and damp the
    // remainder with the linear factor.
    const Eigen::Index np = last.rho_in.size();
    const Eigen::Index m = Eigen::Index(history.size()) - 1;
    Eigen::MatrixXd d_resid(np, m), d_rho(np, m);
    for (Eigen::Index j = 0; j < m; ++j) {
      const DensityPair& a = history[size_t(j)];
      const DensityPair& b = history[size_t(j) + 1];
      d_resid.col(j) = (b.rho_out - b.rho_in) - (a.rho_out - a.rho_in);
      d_rho.col(j) = b.rho_in - a.rho_in;
    }
    const Eigen::VectorXd resid = last.rho_out - last.rho_in;
    const Eigen::VectorXd coeff = d_resid.colPivHouseholderQr().solve(resid);
    next = (last.rho_in - d_rho * coeff) + mixing.factor * (resid - d_resid * coeff);
  }

  const double integral = ctx.dv * next.sum();
  if (!(integral > 0.0)) {
    // Pathological overshoot: fall back to the plain damped step.
    next = last.rho_in + mixing.factor * (last.rho_out - last.rho_in);
  }
  const double total = ctx.dv * next.sum();
  next *= ctx.spec.n_electrons / total;
  return next;
}

ScfResult run_scf(const ModelContext& ctx, const SmearingSpec& smear, const ScfConfig& cfg,
                  std::optional<Eigen::VectorXd> init_density) {
  validate_scf_config(cfg);
  const size_t nk = size_t(ctx.n_kpoints());
  const int n = ctx.spec.n_orbitals;

  Eigen::VectorXd rho_in = init_density ? std::move(*init_density) : initial_density(ctx);
  if (rho_in.size() != ctx.np) throw ShapeError("initial density does not match the grid");

  ScfResult out;
  std::vector<DensityPair> history;
  BlockMatrix warm;
  std::optional<double> warm_mu;

  for (int iter = 0; iter < cfg.max_iter; ++iter) {
    const EigenpairResult pairs =
        solve_eigenpairs(ctx, rho_in, n, cfg, warm.empty() ? nullptr : &warm);
    BlockMatrix eta(nk);
    for (size_t k = 0; k < nk; ++k)
      eta[k] = pairs.eigenvalues[k].cast<cdouble>().asDiagonal();

    const Evaluation ev = evaluate(ctx, smear, pairs.orbitals, eta, warm_mu);
    const double residual = std::sqrt(ctx.dv * (ev.rho - rho_in).squaredNorm());

    const GradientPair g = gradients(ctx, smear, pairs.orbitals, ev);
    const double grad_psi_half = 0.5 * block_norm(g.g_psi);
    const double grad_eta_sf = sf_norm(g.g_eta);

    ScfIterationRecord rec;
    rec.n = iter;
    rec.f = ev.energy.total;
    rec.grad_psi_half = grad_psi_half;
    rec.grad_eta_sf = grad_eta_sf;
    rec.density_residual = residual;
    rec.mu = ev.occ.mu;
    out.log.push_back(rec);

    out.psi = pairs.orbitals;
    out.eta = std::move(eta);
    out.energy = ev.energy;
    out.mu = ev.occ.mu;
    out.eigenvalues = ev.occ.eps;
    out.occupations = ev.occ.f;
    out.final_residual = residual;
    out.error_metric = std::hypot(grad_psi_half, grad_eta_sf);
    out.iterations = iter + 1;
    out.max_mu_residual = std::max(out.max_mu_residual, std::abs(ev.occ.mu_residual));

    if (residual <= cfg.eps_density) {
      out.converged = true;
      break;
    }

    history.push_back({rho_in, ev.rho});
    while (int(history.size()) > std::max(1, cfg.mixing.history))
      history.erase(history.begin());
    rho_in = mix_density(ctx, history, cfg.mixing);
    warm = pairs.orbitals;
    warm_mu = ev.occ.mu;
  }
  return out;
}

} // namespace ekdft
