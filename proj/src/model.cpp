#include "ekdft/model.hpp"

#include <cmath>

namespace ekdft {

namespace {

constexpr double four_pi = 4.0 * M_PI;

// Real grid field from reciprocal Gaussian sums. keep_g0 keeps the mean
// (charge blobs); the local potential drops it (jellium convention).
Eigen::VectorXd field_from_gaussians(const ModelContext& ctx,
                                     const std::vector<GaussianField>& parts, bool keep_g0) {
  const int np = ctx.np;
  Eigen::VectorXcd coef = Eigen::VectorXcd::Zero(np);
  const auto gtable = grid_g_vectors(ctx.dims, ctx.recip);
  for (const auto& part : parts) {
    std::vector<Vec3> centers_cart;
    centers_cart.reserve(part.centers.size());
    for (const auto& c : part.centers) centers_cart.push_back(ctx.spec.cell.cartesian(c));
    for (int gi = 0; gi < np; ++gi) {
      const Vec3& g = gtable[gi];
      const double envelope =
          part.amplitude * std::exp(-0.5 * g.squaredNorm() * part.width * part.width);
      cdouble sf(0.0, 0.0);
      for (const auto& r : centers_cart) sf += std::exp(cdouble(0.0, -g.dot(r)));
      coef[gi] += envelope * sf;
    }
  }
  if (!keep_g0) coef[0] = cdouble(0.0, 0.0);
  Eigen::VectorXcd values(np);
  ctx.bases.front().grid->backward(coef.data(), values.data());
  return values.real();
}

void check_hermitian(const Eigen::MatrixXcd& m, const char* name) {
  if (m.size() == 0) return;
  if (m.rows() != m.cols()) throw InvalidMatrixError(std::string(name) + " must be square");
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  if ((m - m.adjoint()).cwiseAbs().maxCoeff() > 1e-12 * scale) {
    throw InvalidMatrixError(std::string(name) + " must be Hermitian");
  }
}

} // namespace

ModelContext build_model(const ModelSpec& spec) {
  const int n = spec.n_orbitals;
  const int n_occupied = int(std::ceil(spec.n_electrons / 2.0));
  if (!(spec.n_electrons > 0.0) || !(spec.n_electrons < 2.0 * n)) {
    throw InfeasibleError("need 0 < n_electrons < 2 * n_orbitals");
  }
  if (n <= n_occupied) {
    throw InfeasibleError("n_orbitals must exceed the occupied window ceil(n_electrons/2)");
  }
  const int k_channels = int(spec.projectors.size());
  check_hermitian(spec.d_matrix, "d_matrix");
  check_hermitian(spec.q_matrix, "q_matrix");
  if (k_channels > 0) {
    if (spec.d_matrix.size() != 0 && spec.d_matrix.rows() != k_channels) {
      throw ShapeError("d_matrix size must match the projector count");
    }
    if (spec.q_matrix.size() != 0 && spec.q_matrix.rows() != k_channels) {
      throw ShapeError("q_matrix size must match the projector count");
    }
  } else if (spec.d_matrix.size() != 0 || spec.q_matrix.size() != 0) {
    throw ShapeError("channel matrices given without projectors");
  }

  ModelContext ctx;
  ctx.spec = spec;
  ctx.recip = build_reciprocal(spec.cell);

  // Shared dense grid: max per-axis requirement over the k-points.
  std::array<int, 3> dims{1, 1, 1};
  std::vector<PlanewaveBasis> first_pass;
  for (const auto& k : spec.kpoints.points) {
    first_pass.push_back(build_basis(spec.cell, k, spec.ecut));
    for (int ax = 0; ax < 3; ++ax) dims[ax] = std::max(dims[ax], first_pass.back().fftgrid[ax]);
  }
  for (const auto& k : spec.kpoints.points) {
    ctx.bases.push_back(build_basis(spec.cell, k, spec.ecut, &dims));
  }
  // All k share one transform engine.
  for (size_t k = 1; k < ctx.bases.size(); ++k) ctx.bases[k].grid = ctx.bases[0].grid;
  ctx.dims = dims;
  ctx.np = dims[0] * dims[1] * dims[2];
  ctx.dv = spec.cell.volume / double(ctx.np);

  for (const auto& basis : ctx.bases) {
    if (basis.size() < n) {
      throw InfeasibleError("basis smaller than the orbital count; raise ecut");
    }
  }

  const auto gtable = grid_g_vectors(ctx.dims, ctx.recip);
  ctx.g2.resize(ctx.np);
  for (int i = 0; i < ctx.np; ++i) ctx.g2[i] = gtable[i].squaredNorm();

  ctx.vloc = spec.local_potential.empty() ? Eigen::VectorXd::Zero(ctx.np).eval()
                                          : field_from_gaussians(ctx, spec.local_potential, false);

  // Projector coefficient blocks per k-point (k-independent periodic
  // functions; coefficients depend on G only).
  if (k_channels > 0) {
    for (const auto& basis : ctx.bases) {
      Eigen::MatrixXcd m(basis.size(), k_channels);
      for (int j = 0; j < k_channels; ++j) {
        const auto& p = spec.projectors[j];
        const Vec3 center = spec.cell.cartesian(p.center);
        for (int i = 0; i < basis.size(); ++i) {
          const Vec3& g = basis.gcart[i];
          m(i, j) = p.amplitude * std::exp(-0.5 * g.squaredNorm() * p.width * p.width) *
                    std::exp(cdouble(0.0, -g.dot(center)));
        }
      }
      ctx.proj.push_back(std::move(m));
    }
  }

  ctx.has_overlap =
      k_channels > 0 && spec.q_matrix.size() != 0 && spec.q_matrix.cwiseAbs().maxCoeff() > 0.0;

  if (ctx.has_overlap) {
    GaussianField env;
    env.amplitude = 1.0;
    env.width = spec.aug_width;
    env.centers = {spec.aug_center};
    Eigen::VectorXd g = field_from_gaussians(ctx, {env}, true);
    const double integral = ctx.dv * g.sum();
    if (!(std::abs(integral) > 1e-12)) {
      throw InfeasibleError("augmentation envelope integrates to zero");
    }
    ctx.aug = g / integral; // discrete unit integral, so int Qshape = Q exactly
  }

  // Coercivity of B = I + M Q M*: the nontrivial eigenvalues on span(M) are
  // 1 + eig(S^{1/2} Q S^{1/2}) with the K x K projector Gram S = <M*M>.
  if (ctx.has_overlap) {
    double alpha = 1.0;
    for (const auto& m : ctx.proj) {
      const Eigen::MatrixXcd s = m.adjoint() * m;
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es_s(s);
      const Eigen::MatrixXcd shalf = es_s.operatorSqrt();
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(shalf * spec.q_matrix * shalf,
                                                         Eigen::EigenvaluesOnly);
      alpha = std::min(alpha, 1.0 + es.eigenvalues().minCoeff());
    }
    if (alpha < 1e-6) {
      throw InvalidMatrixError("overlap B = I + M Q M* is not coercive (min eig " +
                               std::to_string(alpha) + ")");
    }
    ctx.overlap_coercivity = alpha;
  }
  return ctx;
}

Eigen::VectorXd initial_density(const ModelContext& ctx) {
  const double n_e = ctx.spec.n_electrons;
  if (ctx.spec.init_charges.empty()) {
    return Eigen::VectorXd::Constant(ctx.np, n_e / ctx.spec.cell.volume);
  }
  Eigen::VectorXd rho = field_from_gaussians(ctx, ctx.spec.init_charges, true);
  rho = rho.cwiseMax(0.0);
  const double integral = ctx.dv * rho.sum();
  if (!(integral > 1e-12)) {
    throw InfeasibleError("initial charge superposition integrates to zero");
  }
  return rho * (n_e / integral);
}

Eigen::VectorXd density(const ModelContext& ctx, const BlockMatrix& psi,
                        const OccupationState& occ) {
  if (psi.size() != ctx.bases.size()) throw ShapeError("state block count mismatch");
  Eigen::VectorXd rho = Eigen::VectorXd::Zero(ctx.np);
  double aug_weight = 0.0;
  for (size_t k = 0; k < psi.size(); ++k) {
    const double w = ctx.spec.kpoints.weights[k];
    const Eigen::MatrixXcd values = to_realspace(ctx.bases[k], psi[k]);
    const auto& f = occ.fmat[k];
    const bool diag = occ.rot[k].size() == 0;
    if (diag) {
      for (int j = 0; j < values.cols(); ++j) {
        const double fj = f(j, j).real();
        if (fj == 0.0) continue;
        rho.noalias() += (w * fj) * values.col(j).cwiseAbs2();
      }
    } else {
      const Eigen::MatrixXcd weighted = values * f;
      rho.noalias() += w * weighted.cwiseProduct(values.conjugate()).rowwise().sum().real();
    }
    if (ctx.has_overlap) {
      const Eigen::MatrixXcd c = ctx.proj[k].adjoint() * psi[k]; // K x N
      aug_weight += w * (c.adjoint() * ctx.spec.q_matrix * c * f).trace().real();
    }
  }
  if (ctx.has_overlap && aug_weight != 0.0) rho.noalias() += aug_weight * ctx.aug;
  return rho;
}

Eigen::MatrixXcd apply_overlap(const ModelContext& ctx, size_t k, const Eigen::MatrixXcd& x) {
  if (!ctx.has_overlap) return x;
  return x + ctx.proj[k] * (ctx.spec.q_matrix * (ctx.proj[k].adjoint() * x));
}

OverlapFn overlap_fn(const ModelContext& ctx) {
  return [&ctx](size_t k, const Eigen::MatrixXcd& x) { return apply_overlap(ctx, k, x); };
}

HartreeResult hartree_potential(const ModelContext& ctx, const Eigen::VectorXd& rho) {
  if (rho.size() != ctx.np) throw ShapeError("density size mismatch");
  const auto& grid = *ctx.bases.front().grid;
  Eigen::VectorXcd work(ctx.np), rhohat(ctx.np);
  work = rho.cast<cdouble>();
  grid.forward(work.data(), rhohat.data());
  rhohat /= double(ctx.np);

  double energy = 0.0;
  Eigen::VectorXcd vhat = Eigen::VectorXcd::Zero(ctx.np);
  for (int i = 1; i < ctx.np; ++i) {
    if (ctx.g2[i] <= 0.0) continue;
    vhat[i] = four_pi * rhohat[i] / ctx.g2[i];
    energy += 0.5 * ctx.spec.cell.volume * four_pi * std::norm(rhohat[i]) / ctx.g2[i];
  }
  HartreeResult out;
  grid.backward(vhat.data(), work.data());
  out.v = work.real();
  out.energy = energy;
  return out;
}

XcResult xc_energy_potential(const ModelContext& ctx, const Eigen::VectorXd& rho) {
  XcResult out;
  if (ctx.spec.xc == XcKind::None) {
    out.v = Eigen::VectorXd::Zero(ctx.np);
    return out;
  }
  static const double cx = 0.75 * std::cbrt(3.0 / M_PI);
  out.v.resize(ctx.np);
  double acc = 0.0;
  for (int i = 0; i < ctx.np; ++i) {
    const double r = std::max(rho[i], 0.0);
    const double r13 = std::cbrt(r);
    acc += r * r13;
    out.v[i] = -(4.0 / 3.0) * cx * r13;
  }
  out.energy = -cx * ctx.dv * acc;
  return out;
}

Potentials build_potentials(const ModelContext& ctx, const Eigen::VectorXd& rho) {
  Potentials pots;
  const HartreeResult h = hartree_potential(ctx, rho);
  const XcResult xc = xc_energy_potential(ctx, rho);
  pots.v_hartree = h.v;
  pots.v_xc = xc.v;
  pots.veff = ctx.vloc + h.v + xc.v;
  pots.e_local = ctx.dv * ctx.vloc.dot(rho);
  pots.e_hartree = h.energy;
  pots.e_xc = xc.energy;
  const int kc = ctx.n_channels();
  if (kc > 0) {
    pots.d_eff = ctx.spec.d_matrix.size() ? ctx.spec.d_matrix
                                          : Eigen::MatrixXcd::Zero(kc, kc).eval();
    if (ctx.has_overlap) {
      const double veff_aug = ctx.dv * pots.veff.dot(ctx.aug);
      pots.d_eff += veff_aug * ctx.spec.q_matrix;
    }
  }
  return pots;
}

Eigen::MatrixXcd apply_hamiltonian(const ModelContext& ctx, const Potentials& pots, size_t k,
                                   const Eigen::MatrixXcd& x) {
  const auto& basis = ctx.bases[k];
  if (x.rows() != basis.size()) throw ShapeError("coefficient rows do not match the basis");
  Eigen::MatrixXcd out = basis.kinetic.asDiagonal() * x;
  Eigen::MatrixXcd values = to_realspace(basis, x);
  values.array().colwise() *= pots.veff.array().cast<cdouble>();
  out.noalias() += to_reciprocal(basis, values);
  if (ctx.n_channels() > 0) {
    out.noalias() += ctx.proj[k] * (pots.d_eff * (ctx.proj[k].adjoint() * x));
  }
  return out;
}

Evaluation evaluate(const ModelContext& ctx, const SmearingSpec& smear, const BlockMatrix& psi,
                    const BlockMatrix& eta, std::optional<double> warm_mu) {
  if (psi.size() != ctx.bases.size() || eta.size() != psi.size()) {
    throw ShapeError("state/eta block count mismatch");
  }
  Evaluation ev;
  ev.occ = build_occupations(eta, ctx.spec.kpoints.weights, smear, ctx.spec.n_electrons, warm_mu);
  ev.rho = density(ctx, psi, ev.occ);
  ev.pots = build_potentials(ctx, ev.rho);

  // Kinetic + bare nonlocal, traced against the occupation blocks.
  double e_kin_nl = 0.0;
  for (size_t k = 0; k < psi.size(); ++k) {
    const auto& basis = ctx.bases[k];
    const double w = ctx.spec.kpoints.weights[k];
    Eigen::MatrixXcd a = psi[k].adjoint() * (basis.kinetic.asDiagonal() * psi[k]);
    if (ctx.n_channels() > 0 && ctx.spec.d_matrix.size() != 0) {
      const Eigen::MatrixXcd c = ctx.proj[k].adjoint() * psi[k];
      a.noalias() += c.adjoint() * ctx.spec.d_matrix * c;
    }
    e_kin_nl += w * (a * ev.occ.fmat[k]).trace().real();
  }

  double entropy_acc = 0.0;
  for (size_t k = 0; k < psi.size(); ++k) {
    double acc = 0.0;
    for (int i = 0; i < ev.occ.eps[k].size(); ++i) {
      acc += s_value(smear, (ev.occ.eps[k][i] - ev.occ.mu) / smear.sigma);
    }
    entropy_acc += ctx.spec.kpoints.weights[k] * acc;
  }

  ev.energy.kinetic_nonlocal = e_kin_nl;
  ev.energy.local = ev.pots.e_local;
  ev.energy.hartree = ev.pots.e_hartree;
  ev.energy.xc = ev.pots.e_xc;
  ev.energy.entropy = -smear.sigma * entropy_acc;
  ev.energy.total = ev.energy.kinetic_nonlocal + ev.energy.local + ev.energy.hartree +
                    ev.energy.xc + ev.energy.entropy;
  return ev;
}

EnergyBreakdown free_energy(const ModelContext& ctx, const SmearingSpec& smear,
                            const BlockMatrix& psi, const BlockMatrix& eta,
                            std::optional<double> warm_mu) {
  return evaluate(ctx, smear, psi, eta, warm_mu).energy;
}

} // namespace ekdft
