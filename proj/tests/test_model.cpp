#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <complex>
#include <vector>

#include "ekdft/model.hpp"
#include "test_helpers.hpp"

using namespace ekdft;

namespace {

constexpr double pi = 3.14159265358979323846;

/// Cartesian position of dense-grid point `linear` (row-major, last index
/// fastest), matching the transform-engine layout.
Vec3 grid_position(const UnitCell& cell, const std::array<int, 3>& dims, int linear) {
  const int i2 = linear % dims[2];
  const int i1 = (linear / dims[2]) % dims[1];
  const int i0 = linear / (dims[2] * dims[1]);
  return cell.cartesian(
      Vec3(double(i0) / dims[0], double(i1) / dims[1], double(i2) / dims[2]));
}

/// Independent min-image G vector for dense-grid frequency `linear`.
Vec3 grid_frequency(const ReciprocalLattice& recip, const std::array<int, 3>& dims, int linear) {
  int m[3];
  m[2] = linear % dims[2];
  m[1] = (linear / dims[2]) % dims[1];
  m[0] = linear / (dims[2] * dims[1]);
  Vec3 frac;
  for (int ax = 0; ax < 3; ++ax) {
    if (m[ax] > dims[ax] / 2) m[ax] -= dims[ax];
    frac[ax] = double(m[ax]);
  }
  return recip.cartesian(frac);
}

/// Reference periodic Poisson solve by direct O(np^2) discrete Fourier sums:
/// c_G = (1/np) sum_i rho_i e^{-iG.r_i}, v_i = sum_{G!=0} 4pi c_G/|G|^2 e^{iG.r_i},
/// E = 2 pi V sum_{G!=0} |c_G|^2 / |G|^2.
struct PoissonOracle {
  Eigen::VectorXd v;
  double energy = 0.0;
};

PoissonOracle brute_force_poisson(const ModelContext& ctx, const Eigen::VectorXd& rho) {
  const int np = ctx.np;
  std::vector<Vec3> r(np), g(np);
  for (int i = 0; i < np; ++i) {
    r[i] = grid_position(ctx.spec.cell, ctx.dims, i);
    g[i] = grid_frequency(ctx.recip, ctx.dims, i);
  }
  Eigen::VectorXcd coef(np);
  for (int gi = 0; gi < np; ++gi) {
    cdouble acc(0.0, 0.0);
    for (int i = 0; i < np; ++i) acc += rho[i] * std::exp(cdouble(0.0, -g[gi].dot(r[i])));
    coef[gi] = acc / double(np);
  }
  PoissonOracle out;
  out.v = Eigen::VectorXd::Zero(np);
  for (int gi = 0; gi < np; ++gi) {
    const double g2 = g[gi].squaredNorm();
    if (g2 <= 1e-14) continue;
    out.energy += 2.0 * pi * ctx.spec.cell.volume * std::norm(coef[gi]) / g2;
    for (int i = 0; i < np; ++i) {
      out.v[i] += (4.0 * pi * coef[gi] * std::exp(cdouble(0.0, g[gi].dot(r[i]))) / g2).real();
    }
  }
  return out;
}

/// Fermi-Dirac occupation, written out independently of the library.
double fd_occ(double x) {
  if (x > 0) {
    const double e = std::exp(-x);
    return e / (1.0 + e);
  }
  return 1.0 / (1.0 + std::exp(x));
}

/// Fermi-Dirac entropy density -[f ln f + (1-f) ln(1-f)].
double fd_entropy(double x) {
  const double f = fd_occ(x);
  double s = 0.0;
  if (f > 0.0) s -= f * std::log(f);
  if (f < 1.0) s -= (1.0 - f) * std::log(1.0 - f);
  return s;
}

/// Index of the basis entry with integer coordinates m.
int basis_index(const PlanewaveBasis& basis, const IVec3& m) {
  for (int i = 0; i < basis.size(); ++i)
    if (basis.mvecs[size_t(i)] == m) return i;
  REQUIRE(false);
  return -1;
}

BlockMatrix shift_eta(const BlockMatrix& eta, double c) {
  BlockMatrix out(eta.size());
  for (size_t k = 0; k < eta.size(); ++k)
    out[k] = eta[k] + c * Eigen::MatrixXcd::Identity(eta[k].rows(), eta[k].cols());
  return out;
}

} // namespace

TEST_CASE("model construction and validation") {
  SUBCASE("quadrature weights cover the cell exactly") {
    const ModelContext ctx = build_model(testutil::free_electron_spec());
    CHECK(ctx.np == ctx.dims[0] * ctx.dims[1] * ctx.dims[2]);
    CHECK(ctx.dv * ctx.np == doctest::Approx(ctx.spec.cell.volume).epsilon(1e-14));
    CHECK(ctx.vloc.cwiseAbs().maxCoeff() == 0.0);
    CHECK(!ctx.has_overlap);
    CHECK(ctx.overlap_coercivity == 1.0);
  }
  SUBCASE("local potential on the grid has zero mean (constant dropped)") {
    const ModelContext ctx = build_model(testutil::smooth_well_spec());
    CHECK(std::abs(ctx.dv * ctx.vloc.sum()) <= 1e-10);
    CHECK(ctx.vloc.cwiseAbs().maxCoeff() > 0.1); // and it is not trivially zero
  }
  SUBCASE("augmentation envelope integrates to one") {
    const ModelContext ctx = build_model(testutil::generalized_overlap_spec());
    REQUIRE(ctx.has_overlap);
    CHECK(ctx.dv * ctx.aug.sum() == doctest::Approx(1.0).epsilon(1e-13));
  }
  SUBCASE("positive-definite augmentation keeps full coercivity") {
    const ModelContext ctx = build_model(testutil::generalized_overlap_spec());
    CHECK(ctx.overlap_coercivity == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("orbital count must exceed the occupied window") {
    ModelSpec spec = testutil::free_electron_spec();
    spec.n_electrons = 4.0;
    spec.n_orbitals = 2;
    CHECK_THROWS_AS(build_model(spec), InfeasibleError);
  }
  SUBCASE("electron count must fit the orbitals") {
    ModelSpec spec = testutil::free_electron_spec();
    spec.n_electrons = 12.0;
    spec.n_orbitals = 5;
    CHECK_THROWS_AS(build_model(spec), InfeasibleError);
  }
  SUBCASE("non-Hermitian channel matrices are rejected") {
    ModelSpec spec = testutil::rank1_nonlocal_spec();
    spec.d_matrix(0, 0) = cdouble(0.0, 0.3);
    CHECK_THROWS_AS(build_model(spec), InvalidMatrixError);
  }
  SUBCASE("channel matrix shape must match the projector count") {
    ModelSpec spec = testutil::rank1_nonlocal_spec();
    spec.q_matrix = Eigen::MatrixXcd::Zero(2, 2);
    CHECK_THROWS_AS(build_model(spec), ShapeError);
    ModelSpec bare = testutil::free_electron_spec();
    bare.d_matrix = Eigen::MatrixXcd::Identity(1, 1);
    CHECK_THROWS_AS(build_model(bare), ShapeError);
  }
  SUBCASE("non-coercive overlap is rejected") {
    ModelSpec spec = testutil::rank1_nonlocal_spec();
    spec.projectors[0].amplitude = 3.0;
    spec.q_matrix = Eigen::MatrixXcd::Constant(1, 1, cdouble(-0.5, 0.0));
    CHECK_THROWS_AS(build_model(spec), InvalidMatrixError);
  }
  SUBCASE("initial density: uniform fallback and normalised superposition") {
    const ModelContext bare = build_model(testutil::free_electron_spec());
    const Eigen::VectorXd uniform = initial_density(bare);
    CHECK((uniform.array() - bare.spec.n_electrons / bare.spec.cell.volume).abs().maxCoeff() ==
          0.0);
    const ModelContext well = build_model(testutil::smooth_well_spec());
    const Eigen::VectorXd rho = initial_density(well);
    CHECK(rho.minCoeff() >= 0.0);
    CHECK(well.dv * rho.sum() == doctest::Approx(well.spec.n_electrons).epsilon(1e-12));
    CHECK(rho.maxCoeff() > rho.minCoeff()); // genuinely non-uniform
  }
}

TEST_CASE("electron density") {
  SUBCASE("single fully occupied constant orbital gives 2/|cell|") {
    const ModelContext ctx = build_model(testutil::free_electron_spec());
    const int i0 = basis_index(ctx.bases[0], IVec3::Zero());
    Eigen::MatrixXcd col = Eigen::MatrixXcd::Zero(ctx.bases[0].size(), 1);
    col(i0, 0) = 1.0;
    OccupationState occ;
    occ.rot = {Eigen::MatrixXcd()};
    occ.fmat = {Eigen::MatrixXcd::Identity(1, 1)};
    const Eigen::VectorXd rho = density(ctx, {col}, occ);
    const double expect = 2.0 / ctx.spec.cell.volume;
    CHECK((rho.array() - expect).abs().maxCoeff() <= 1e-14 * expect);
  }
  SUBCASE("charge equals the weighted occupation trace (identity overlap)") {
    const ModelContext ctx = build_model(testutil::two_kpoint_spec());
    const BlockMatrix psi = testutil::random_orthonormal(ctx, 31);
    const BlockMatrix eta = testutil::random_diag_eta(ctx, 32);
    for (const SmearingSpec smear :
         {SmearingSpec::fermi_dirac(0.1), SmearingSpec::gaussian(0.1)}) {
      const OccupationState occ = build_occupations(eta, ctx.spec.kpoints.weights, smear,
                                                    ctx.spec.n_electrons);
      const Eigen::VectorXd rho = density(ctx, psi, occ);
      double trace_sum = 0.0;
      for (size_t k = 0; k < psi.size(); ++k)
        trace_sum += ctx.spec.kpoints.weights[k] * occ.fmat[k].trace().real();
      CHECK(std::abs(ctx.dv * rho.sum() - trace_sum) <= 1e-10);
      CHECK(rho.minCoeff() >= -1e-12);
    }
  }
  SUBCASE("charge conservation with density augmentation") {
    const ModelContext ctx = build_model(testutil::generalized_overlap_spec());
    const BlockMatrix psi = testutil::random_orthonormal(ctx, 33);
    const BlockMatrix eta = testutil::random_hermitian_eta(ctx, 34);
    const OccupationState occ = build_occupations(eta, ctx.spec.kpoints.weights,
                                                  SmearingSpec::fermi_dirac(0.1),
                                                  ctx.spec.n_electrons);
    const Eigen::VectorXd rho = density(ctx, psi, occ);
    double trace_sum = 0.0;
    for (size_t k = 0; k < psi.size(); ++k)
      trace_sum += ctx.spec.kpoints.weights[k] * occ.fmat[k].trace().real();
    CHECK(std::abs(ctx.dv * rho.sum() - trace_sum) <= 1e-10);
    CHECK(std::abs(trace_sum - ctx.spec.n_electrons) <= 1e-10);
  }
  SUBCASE("orbitals with exactly zero occupation do not contribute") {
    const ModelContext ctx = build_model(testutil::free_electron_spec());
    const int n = ctx.spec.n_orbitals;
    BlockMatrix psi = testutil::random_orthonormal(ctx, 35);
    // replace the last column with a fresh vector, re-orthonormalised by hand
    BlockMatrix other = psi;
    Eigen::VectorXcd fresh = testutil::random_complex(ctx.bases[0].size(), 1, 36).col(0);
    for (int j = 0; j + 1 < n; ++j) {
      fresh -= other[0].col(j) * (other[0].col(j).dot(fresh));
    }
    other[0].col(n - 1) = fresh / fresh.norm();

    Eigen::MatrixXcd f = Eigen::MatrixXcd::Zero(n, n);
    for (int j = 0; j + 1 < n; ++j) f(j, j) = 0.5 + 0.1 * j;
    OccupationState occ;
    occ.rot = {Eigen::MatrixXcd()};
    occ.fmat = {f};
    const Eigen::VectorXd a = density(ctx, psi, occ);
    const Eigen::VectorXd b = density(ctx, other, occ);
    CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);

    // same through the rotated (dense occupation matrix) path
    occ.rot = {Eigen::MatrixXcd::Identity(n, n)};
    const Eigen::VectorXd c = density(ctx, psi, occ);
    const Eigen::VectorXd d = density(ctx, other, occ);
    CHECK((c - d).cwiseAbs().maxCoeff() <= 1e-14);
    CHECK((a - c).cwiseAbs().maxCoeff() <= 1e-13);
  }
  SUBCASE("block count mismatch is rejected") {
    const ModelContext ctx = build_model(testutil::two_kpoint_spec());
    const BlockMatrix psi = testutil::random_orthonormal(ctx, 37);
    const OccupationState occ = build_occupations(
        testutil::random_diag_eta(ctx, 38), ctx.spec.kpoints.weights,
        SmearingSpec::fermi_dirac(0.1), ctx.spec.n_electrons);
    const BlockMatrix truncated(psi.begin(), psi.begin() + 1);
    CHECK_THROWS_AS(density(ctx, truncated, occ), ShapeError);
  }
}

TEST_CASE("overlap application") {
  SUBCASE("zero augmentation acts as the identity") {
    const ModelContext ctx = build_model(testutil::rank1_nonlocal_spec());
    CHECK(!ctx.has_overlap);
    const Eigen::MatrixXcd x = testutil::random_complex(ctx.bases[0].size(), 3, 41);
    CHECK((apply_overlap(ctx, 0, x) - x).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("no projectors acts as the identity") {
    const ModelContext ctx = build_model(testutil::free_electron_spec());
    const Eigen::MatrixXcd x = testutil::random_complex(ctx.bases[0].size(), 2, 42);
    CHECK((apply_overlap(ctx, 0, x) - x).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("self-adjointness on random states") {
    const ModelContext ctx = build_model(testutil::generalized_overlap_spec());
    for (uint64_t trial = 0; trial < 5; ++trial) {
      const Eigen::MatrixXcd x = testutil::random_complex(ctx.bases[0].size(), 4, 43 + trial);
      const Eigen::MatrixXcd y = testutil::random_complex(ctx.bases[0].size(), 4, 53 + trial);
      const Eigen::MatrixXcd lhs = x.adjoint() * apply_overlap(ctx, 0, y);
      const Eigen::MatrixXcd rhs = apply_overlap(ctx, 0, x).adjoint() * y;
      const double scale = std::max(1.0, lhs.cwiseAbs().maxCoeff());
      CHECK((lhs - rhs).cwiseAbs().maxCoeff() <= 1e-12 * scale);
    }
  }
  SUBCASE("rank-one augmentation matches the dense oracle") {
    ModelSpec spec = testutil::rank1_nonlocal_spec(6.0, 0.6, 4.0, 5);
    spec.q_matrix = Eigen::MatrixXcd::Constant(1, 1, cdouble(0.4, 0.0));
    const ModelContext ctx = build_model(spec);
    REQUIRE(ctx.has_overlap);
    const int ng = ctx.bases[0].size();
    const Eigen::VectorXcd m = ctx.proj[0].col(0);
    const Eigen::MatrixXcd dense =
        Eigen::MatrixXcd::Identity(ng, ng) + 0.4 * m * m.adjoint();
    const Eigen::MatrixXcd x = testutil::random_complex(ng, 3, 61);
    CHECK((apply_overlap(ctx, 0, x) - dense * x).cwiseAbs().maxCoeff() <= 1e-13);

    // coercivity bound is honoured by the dense spectrum
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(dense, Eigen::EigenvaluesOnly);
    CHECK(ctx.overlap_coercivity <= es.eigenvalues().minCoeff() + 1e-10);
  }
  SUBCASE("Ritz quotients stay above the reported coercivity") {
    const ModelContext ctx = build_model(testutil::generalized_overlap_spec());
    for (uint64_t trial = 0; trial < 50; ++trial) {
      for (int k = 0; k < ctx.n_kpoints(); ++k) {
        const Eigen::VectorXcd x =
            testutil::random_complex(ctx.bases[size_t(k)].size(), 1, 71 + trial).col(0);
        const double quotient =
            x.dot(apply_overlap(ctx, size_t(k), x).col(0)).real() / x.squaredNorm();
        CHECK(quotient >= ctx.overlap_coercivity - 1e-12);
      }
    }
  }
}

TEST_CASE("hartree potential") {
  SUBCASE("uniform density short-circuits to zero") {
    const ModelContext ctx = build_model(testutil::free_electron_spec());
    const Eigen::VectorXd rho = Eigen::VectorXd::Constant(ctx.np, 0.7);
    const HartreeResult h = hartree_potential(ctx, rho);
    CHECK(h.v.cwiseAbs().maxCoeff() <= 1e-10);
    CHECK(std::abs(h.energy) <= 1e-12);
  }
  SUBCASE("single cosine mode matches the closed form") {
    const ModelContext ctx = build_model(testutil::free_electron_spec());
    const Vec3 g0 = ctx.recip.cartesian(Vec3(1, 0, 0));
    const double a = 0.23;
    Eigen::VectorXd rho(ctx.np);
    for (int i = 0; i < ctx.np; ++i) {
      rho[i] = 2.0 * a * std::cos(g0.dot(grid_position(ctx.spec.cell, ctx.dims, i)));
    }
    const HartreeResult h = hartree_potential(ctx, rho);
    const double g2 = g0.squaredNorm();
    const double expect_e = 4.0 * pi * ctx.spec.cell.volume * a * a / g2;
    CHECK(h.energy == doctest::Approx(expect_e).epsilon(1e-12));
    for (int i = 0; i < ctx.np; ++i) {
      const double expect_v =
          (8.0 * pi * a / g2) * std::cos(g0.dot(grid_position(ctx.spec.cell, ctx.dims, i)));
      CHECK(h.v[i] == doctest::Approx(expect_v).epsilon(1e-10));
    }
  }
  SUBCASE("multi-mode density matches the brute-force Fourier oracle") {
    const ModelContext ctx = build_model(testutil::two_kpoint_spec());
    const Vec3 ga = ctx.recip.cartesian(Vec3(1, 0, 0));
    const Vec3 gb = ctx.recip.cartesian(Vec3(0, 1, 0));
    const Vec3 gc = ctx.recip.cartesian(Vec3(1, 1, -1));
    Eigen::VectorXd rho(ctx.np);
    for (int i = 0; i < ctx.np; ++i) {
      const Vec3 r = grid_position(ctx.spec.cell, ctx.dims, i);
      rho[i] = 0.4 + 0.3 * std::cos(ga.dot(r) + 0.2) + 0.2 * std::cos(gb.dot(r) - 0.7) +
               0.1 * std::cos(gc.dot(r) + 1.1);
    }
    const HartreeResult h = hartree_potential(ctx, rho);
    const PoissonOracle oracle = brute_force_poisson(ctx, rho);
    CHECK(h.energy == doctest::Approx(oracle.energy).epsilon(1e-9));
    CHECK((h.v - oracle.v).cwiseAbs().maxCoeff() <= 1e-9 * (1.0 + oracle.v.cwiseAbs().maxCoeff()));
    CHECK(h.energy >= 0.0);
    CHECK(std::abs(ctx.dv * h.v.sum()) <= 1e-10); // zero-mean convention
  }
  SUBCASE("energy is quadratic in the density") {
    const ModelContext ctx = build_model(testutil::smooth_well_spec());
    const Eigen::VectorXd rho = initial_density(ctx);
    const double e1 = hartree_potential(ctx, rho).energy;
    const double e2 = hartree_potential(ctx, 2.0 * rho).energy;
    CHECK(e2 == doctest::Approx(4.0 * e1).epsilon(1e-12));
  }
}

TEST_CASE("slater exchange") {
  SUBCASE("disabled functional returns zeros") {
    const ModelContext ctx = build_model(testutil::free_electron_spec());
    const XcResult xc = xc_energy_potential(ctx, initial_density(ctx));
    CHECK(xc.energy == 0.0);
    CHECK(xc.v.cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("zero density gives zero energy and potential") {
    const ModelContext ctx = build_model(testutil::smooth_well_spec());
    const XcResult xc = xc_energy_potential(ctx, Eigen::VectorXd::Zero(ctx.np));
    CHECK(xc.energy == 0.0);
    CHECK(xc.v.cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("uniform density matches the closed form") {
    const ModelContext ctx = build_model(testutil::smooth_well_spec());
    const double c = 0.37;
    const double cx = 0.75 * std::cbrt(3.0 / pi);
    const XcResult xc = xc_energy_potential(ctx, Eigen::VectorXd::Constant(ctx.np, c));
    CHECK(xc.energy ==
          doctest::Approx(-cx * std::pow(c, 4.0 / 3.0) * ctx.spec.cell.volume).epsilon(1e-12));
    CHECK((xc.v.array() + (4.0 / 3.0) * cx * std::cbrt(c)).abs().maxCoeff() <= 1e-14);
  }
  SUBCASE("potential is the functional derivative of the energy") {
    const ModelContext ctx = build_model(testutil::smooth_well_spec());
    Eigen::VectorXd rho(ctx.np), drho(ctx.np);
    const Vec3 ga = ctx.recip.cartesian(Vec3(1, 0, 0));
    const Vec3 gb = ctx.recip.cartesian(Vec3(0, 0, 1));
    for (int i = 0; i < ctx.np; ++i) {
      const Vec3 r = grid_position(ctx.spec.cell, ctx.dims, i);
      rho[i] = 0.5 + 0.2 * std::cos(ga.dot(r));
      drho[i] = std::cos(gb.dot(r) + 0.4) - 0.3 * std::cos(ga.dot(r));
    }
    const XcResult xc = xc_energy_potential(ctx, rho);
    const double eps = 1e-5;
    const double fd = (xc_energy_potential(ctx, rho + eps * drho).energy -
                       xc_energy_potential(ctx, rho - eps * drho).energy) /
                      (2.0 * eps);
    const double pairing = ctx.dv * xc.v.dot(drho);
    CHECK(std::abs(fd - pairing) <= 1e-7 * (1.0 + std::abs(pairing)));
  }
  SUBCASE("tiny negative densities are clamped, not propagated") {
    const ModelContext ctx = build_model(testutil::smooth_well_spec());
    Eigen::VectorXd rho = Eigen::VectorXd::Constant(ctx.np, 0.2);
    rho[0] = -1e-15;
    rho[1] = -1e-13;
    Eigen::VectorXd clamped = rho.cwiseMax(0.0);
    const XcResult a = xc_energy_potential(ctx, rho);
    const XcResult b = xc_energy_potential(ctx, clamped);
    CHECK(a.energy == b.energy);
    CHECK((a.v - b.v).cwiseAbs().maxCoeff() == 0.0);
    CHECK(std::isfinite(a.energy));
  }
}

TEST_CASE("hamiltonian application") {
  SUBCASE("free electrons: plane waves are exact eigenvectors") {
    const ModelContext ctx = build_model(testutil::free_electron_spec());
    const Potentials pots = build_potentials(ctx, initial_density(ctx));
    const auto& basis = ctx.bases[0];
    for (int j = 0; j < basis.size(); ++j) {
      Eigen::MatrixXcd e = Eigen::MatrixXcd::Zero(basis.size(), 1);
      e(j, 0) = 1.0;
      const Eigen::MatrixXcd he = apply_hamiltonian(ctx, pots, 0, e);
      CHECK((he - basis.kinetic[j] * e).cwiseAbs().maxCoeff() <= 1e-12);
    }
  }
  SUBCASE("matrix elements are Hermitian on random states") {
    for (const ModelSpec& spec :
         {testutil::generalized_overlap_spec(), testutil::two_kpoint_spec()}) {
      const ModelContext ctx = build_model(spec);
      const Potentials pots = build_potentials(ctx, initial_density(ctx));
      for (int k = 0; k < ctx.n_kpoints(); ++k) {
        const int ng = ctx.bases[size_t(k)].size();
        const Eigen::MatrixXcd x = testutil::random_complex(ng, 3, 81 + uint64_t(k));
        const Eigen::MatrixXcd y = testutil::random_complex(ng, 3, 91 + uint64_t(k));
        const Eigen::MatrixXcd lhs = x.adjoint() * apply_hamiltonian(ctx, pots, size_t(k), y);
        const Eigen::MatrixXcd rhs = apply_hamiltonian(ctx, pots, size_t(k), x).adjoint() * y;
        const double scale = std::max(1.0, lhs.cwiseAbs().maxCoeff());
        CHECK((lhs - rhs).cwiseAbs().maxCoeff() <= 1e-11 * scale);
      }
    }
  }
  SUBCASE("effective potential decomposes into its named parts") {
    const ModelContext ctx = build_model(testutil::generalized_overlap_spec());
    const Eigen::VectorXd rho = initial_density(ctx);
    const Potentials pots = build_potentials(ctx, rho);
    const HartreeResult h = hartree_potential(ctx, rho);
    const XcResult xc = xc_energy_potential(ctx, rho);
    CHECK((pots.v_hartree - h.v).cwiseAbs().maxCoeff() == 0.0);
    CHECK((pots.v_xc - xc.v).cwiseAbs().maxCoeff() == 0.0);
    CHECK((pots.veff - (ctx.vloc + h.v + xc.v)).cwiseAbs().maxCoeff() <= 1e-15);
    CHECK(pots.e_hartree == h.energy);
    CHECK(pots.e_xc == xc.energy);
    CHECK(pots.e_local == doctest::Approx(ctx.dv * ctx.vloc.dot(rho)).epsilon(1e-14));
    const double veff_aug = ctx.dv * pots.veff.dot(ctx.aug);
    const Eigen::MatrixXcd expect_deff = ctx.spec.d_matrix + veff_aug * ctx.spec.q_matrix;
    CHECK((pots.d_eff - expect_deff).cwiseAbs().maxCoeff() <= 1e-14);
  }
  SUBCASE("coefficient rows must match the basis") {
    const ModelContext ctx = build_model(testutil::free_electron_spec());
    const Potentials pots = build_potentials(ctx, initial_density(ctx));
    const Eigen::MatrixXcd bad = testutil::random_complex(3, 2, 97);
    CHECK_THROWS_AS(apply_hamiltonian(ctx, pots, 0, bad), ShapeError);
  }
}

TEST_CASE("free energy") {
  SUBCASE("two-orbital free-electron system matches a scalar hand evaluation") {
    ModelSpec spec = testutil::free_electron_spec(6.0, 1.2, 2.0, 2);
    const ModelContext ctx = build_model(spec);
    const auto& basis = ctx.bases[0];
    const int i0 = basis_index(basis, IVec3::Zero());
    const int i1 = basis_index(basis, IVec3(1, 0, 0));
    Eigen::MatrixXcd psi = Eigen::MatrixXcd::Zero(basis.size(), 2);
    psi(i0, 0) = 1.0;
    psi(i1, 1) = 1.0;
    const double eps2 = basis.kinetic[i1]; // |b1|^2 / 2
    Eigen::MatrixXcd eta = Eigen::MatrixXcd::Zero(2, 2);
    eta(1, 1) = eps2;
    const double sigma = 0.1;
    const SmearingSpec smear = SmearingSpec::fermi_dirac(sigma);

    // independent scalar route: bisect mu, then assemble the energy by hand
    double lo = -5.0, hi = 5.0;
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      const double count = 2.0 * (fd_occ((0.0 - mid) / sigma) + fd_occ((eps2 - mid) / sigma));
      (count < 2.0 ? lo : hi) = mid;
    }
    const double mu_oracle = 0.5 * (lo + hi);
    // particle-hole symmetry places mu exactly between the two levels
    CHECK(mu_oracle == doctest::Approx(0.5 * eps2).epsilon(1e-10));
    const double f2 = fd_occ((eps2 - mu_oracle) / sigma);
    const double entropy_oracle =
        -sigma * 2.0 *
        (fd_entropy((0.0 - mu_oracle) / sigma) + fd_entropy((eps2 - mu_oracle) / sigma));
    const double total_oracle = 2.0 * f2 * eps2 + entropy_oracle;

    const Evaluation ev = evaluate(ctx, smear, {psi}, {eta});
    CHECK(std::abs(ev.occ.mu - mu_oracle) <= 1e-10);
    CHECK(std::abs(ev.energy.total - total_oracle) <= 1e-10);
    CHECK(std::abs(ev.energy.kinetic_nonlocal - 2.0 * f2 * eps2) <= 1e-10);
    CHECK(std::abs(ev.energy.entropy - entropy_oracle) <= 1e-10);
    // plane waves have uniform modulus, so every density-driven term vanishes
    CHECK(ev.energy.local == 0.0);
    CHECK(std::abs(ev.energy.hartree) <= 1e-12);
    CHECK(ev.energy.xc == 0.0);
  }
  SUBCASE("invariant under constant shifts of eta") {
    const ModelContext ctx = build_model(testutil::generalized_overlap_spec());
    const SmearingSpec smear = SmearingSpec::fermi_dirac(0.1);
    const BlockMatrix psi = testutil::random_orthonormal(ctx, 101);
    const BlockMatrix eta = testutil::random_hermitian_eta(ctx, 102);
    const double f0 = free_energy(ctx, smear, psi, eta).total;
    for (double c : {0.3, -0.3, 2.0, -2.0}) {
      const double fc = free_energy(ctx, smear, psi, shift_eta(eta, c)).total;
      CHECK(std::abs(fc - f0) <= 1e-10 * (1.0 + std::abs(f0)));
    }
  }
  SUBCASE("invariant under quasi-unitary frame changes") {
    for (const ModelSpec& spec :
         {testutil::generalized_overlap_spec(), testutil::two_kpoint_spec()}) {
      const ModelContext ctx = build_model(spec);
      const SmearingSpec smear = SmearingSpec::fermi_dirac(0.1);
      const BlockMatrix psi = testutil::random_orthonormal(ctx, 103);
      const BlockMatrix eta = testutil::random_hermitian_eta(ctx, 104);
      const double f0 = free_energy(ctx, smear, psi, eta).total;
      std::mt19937_64 gen(105);
      std::uniform_real_distribution<double> cdist(-2.0, 2.0);
      for (uint64_t trial = 0; trial < 20; ++trial) {
        const double c = cdist(gen);
        BlockMatrix psi_rot(psi.size()), eta_rot(eta.size());
        for (size_t k = 0; k < psi.size(); ++k) {
          const Eigen::MatrixXcd p =
              testutil::random_unitary(int(eta[k].rows()), 1000 + 17 * trial + k);
          psi_rot[k] = psi[k] * p;
          eta_rot[k] = p.adjoint() *
                       (eta[k] + c * Eigen::MatrixXcd::Identity(eta[k].rows(), eta[k].cols())) *
                       p;
        }
        const double fr = free_energy(ctx, smear, psi_rot, eta_rot).total;
        CHECK(std::abs(fr - f0) <= 1e-9 * (1.0 + std::abs(f0)));
      }
    }
  }
  SUBCASE("breakdown sums to the total and has the expected signs") {
    const ModelContext ctx = build_model(testutil::generalized_overlap_spec());
    const BlockMatrix psi = testutil::random_orthonormal(ctx, 106);
    const BlockMatrix eta = testutil::random_hermitian_eta(ctx, 107);
    for (const SmearingSpec smear :
         {SmearingSpec::fermi_dirac(0.1), SmearingSpec::gaussian(0.05)}) {
      const EnergyBreakdown e = free_energy(ctx, smear, psi, eta);
      const double parts = e.kinetic_nonlocal + e.local + e.hartree + e.xc + e.entropy;
      CHECK(std::abs(e.total - parts) <= 1e-13 * (1.0 + std::abs(e.total)));
      CHECK(e.hartree >= 0.0);
      CHECK(e.entropy <= 0.0); // s >= 0 for the monotone kinds
    }
  }
  SUBCASE("block count mismatch is rejected") {
    const ModelContext ctx = build_model(testutil::two_kpoint_spec());
    const BlockMatrix psi = testutil::random_orthonormal(ctx, 108);
    const BlockMatrix eta = testutil::random_diag_eta(ctx, 109);
    const BlockMatrix eta_short(eta.begin(), eta.begin() + 1);
    CHECK_THROWS_AS(free_energy(ctx, SmearingSpec::fermi_dirac(0.1), psi, eta_short),
                    ShapeError);
  }
}
