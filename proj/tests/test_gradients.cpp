#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ekdft/gradients.hpp"
#include "ekdft/optimizer.hpp"
#include "test_helpers.hpp"

using namespace ekdft;

namespace {

/// All-terms-active fixture sized for exhaustive finite differencing:
/// three orbitals on a ~27-wave basis, generalized overlap included.
ModelContext fd_context() {
  return build_model(testutil::generalized_overlap_spec(6.0, 1.7, 3.0, 3));
}

/// Exact stationary point of the free-electron model: the lowest plane
/// waves as orbitals and their kinetic energies as eta.
struct StationaryFixture {
  ModelContext ctx;
  BlockMatrix psi;
  BlockMatrix eta;
};

StationaryFixture free_electron_stationary() {
  StationaryFixture fx{build_model(testutil::free_electron_spec()), {}, {}};
  const auto& basis = fx.ctx.bases[0];
  const int n = fx.ctx.spec.n_orbitals;
  Eigen::MatrixXcd psi = Eigen::MatrixXcd::Zero(basis.size(), n);
  Eigen::MatrixXcd eta = Eigen::MatrixXcd::Zero(n, n);
  for (int j = 0; j < n; ++j) {
    psi(j, j) = 1.0; // basis is ordered by ascending kinetic energy
    eta(j, j) = basis.kinetic[j];
  }
  fx.psi = {psi};
  fx.eta = {eta};
  return fx;
}

double block_scale(const BlockMatrix& a) { return 1.0 + block_norm(a); }

BlockMatrix identity_like(const BlockMatrix& a) {
  BlockMatrix out(a.size());
  for (size_t k = 0; k < a.size(); ++k)
    out[k] = Eigen::MatrixXcd::Identity(a[k].rows(), a[k].cols());
  return out;
}

} // namespace

TEST_CASE("psi gradient") {
  SUBCASE("vanishes at the free-electron stationary point") {
    const StationaryFixture fx = free_electron_stationary();
    const SmearingSpec smear = SmearingSpec::fermi_dirac(0.2);
    const Evaluation ev = evaluate(fx.ctx, smear, fx.psi, fx.eta);
    const GradientPair g = gradients(fx.ctx, smear, fx.psi, ev);
    CHECK(block_norm(g.g_psi) <= 1e-11);
    CHECK(block_norm(g.residual) <= 1e-11);
  }
  SUBCASE("lies in the orthogonal complement of the occupied frame") {
    const ModelContext ctx = fd_context();
    const SmearingSpec smear = SmearingSpec::fermi_dirac(0.15);
    const BlockMatrix psi = testutil::random_orthonormal(ctx, 11);
    const BlockMatrix eta = testutil::random_diag_eta(ctx, 12);
    const GradientPair g = gradients(ctx, smear, psi, evaluate(ctx, smear, psi, eta));
    const BlockMatrix overlap = gram(psi, g.g_psi);
    for (const auto& blk : overlap) CHECK(blk.cwiseAbs().maxCoeff() <= 1e-11 * block_scale(g.g_psi));
  }
  SUBCASE("columns with exactly zero occupation vanish") {
    const ModelContext ctx = build_model(testutil::generalized_overlap_spec(6.0, 1.2, 3.0, 4));
    const SmearingSpec smear = SmearingSpec::fermi_dirac(0.01);
    const BlockMatrix psi = testutil::random_orthonormal(ctx, 13);
    Eigen::MatrixXcd eta = Eigen::MatrixXcd::Zero(4, 4);
    eta(1, 1) = 0.01;
    eta(2, 2) = 0.02;
    eta(3, 3) = 10.0; // a thousand sigma above mu: occupation underflows to zero
    const Evaluation ev = evaluate(ctx, smear, psi, {eta});
    REQUIRE(ev.occ.f[0][3] == 0.0);
    const GradientPair g = gradients(ctx, smear, psi, ev);
    CHECK(g.g_psi[0].col(3).cwiseAbs().maxCoeff() == 0.0);
    CHECK(g.g_psi[0].leftCols(3).cwiseAbs().maxCoeff() > 0.0);
  }
  SUBCASE("directional derivative matches finite differences of the retracted energy") {
    const ModelContext ctx = fd_context();
    const SmearingSpec smear = SmearingSpec::fermi_dirac(0.15);
    const OverlapFn overlap = overlap_fn(ctx);
    const BlockMatrix psi = testutil::random_orthonormal(ctx, 14);
    const BlockMatrix eta = testutil::random_diag_eta(ctx, 15);
    const GradientPair g = gradients(ctx, smear, psi, evaluate(ctx, smear, psi, eta));
    for (uint64_t trial = 0; trial < 10; ++trial) {
      const BlockMatrix d = testutil::random_tangent(ctx, psi, 160 + trial);
      const double analytic = block_real_inner(g.g_psi, d);
      for (double h : {1e-4, 1e-5}) {
        const double fp = free_energy(ctx, smear, ortho_qr(psi, d, h, overlap), eta).total;
        const double fm = free_energy(ctx, smear, ortho_qr(psi, d, -h, overlap), eta).total;
        const double fd = (fp - fm) / (2.0 * h);
        CHECK(std::abs(fd - analytic) <= 1e-6 * (1.0 + std::abs(analytic)));
      }
    }
  }
}

TEST_CASE("eta gradient") {
  SUBCASE("vanishes at the free-electron stationary point") {
    const StationaryFixture fx = free_electron_stationary();
    const SmearingSpec smear = SmearingSpec::fermi_dirac(0.2);
    const GradientPair g =
        gradients(fx.ctx, smear, fx.psi, evaluate(fx.ctx, smear, fx.psi, fx.eta));
    CHECK(block_norm(g.g_eta) <= 1e-11);
    CHECK(std::abs(g.d_mu) <= 1e-11);
  }
  SUBCASE("blocks are Hermitian and their traces cancel") {
    for (const ModelSpec& spec :
         {testutil::generalized_overlap_spec(), testutil::two_kpoint_spec()}) {
      const ModelContext ctx = build_model(spec);
      const SmearingSpec smear = SmearingSpec::fermi_dirac(0.1);
      const BlockMatrix psi = testutil::random_orthonormal(ctx, 21);
      const BlockMatrix eta = testutil::random_diag_eta(ctx, 22);
      const GradientPair g = gradients(ctx, smear, psi, evaluate(ctx, smear, psi, eta));
      cdouble trace_sum(0.0, 0.0);
      for (const auto& blk : g.g_eta) {
        CHECK((blk - blk.adjoint()).cwiseAbs().maxCoeff() <= 1e-12 * block_scale(g.g_eta));
        trace_sum += blk.trace();
      }
      CHECK(std::abs(trace_sum) <= 1e-10 * block_scale(g.g_eta));
    }
  }
  SUBCASE("entrywise match against finite differences of the free energy") {
    const ModelContext ctx = fd_context();
    const SmearingSpec smear = SmearingSpec::fermi_dirac(0.15);
    const BlockMatrix psi = testutil::random_orthonormal(ctx, 23);
    Eigen::MatrixXcd eta0 = Eigen::MatrixXcd::Zero(3, 3);
    eta0(0, 0) = -0.2;
    eta0(1, 1) = 0.1;
    eta0(2, 2) = 0.35;
    const BlockMatrix eta = {eta0};
    const GradientPair g = gradients(ctx, smear, psi, evaluate(ctx, smear, psi, eta));

    // dF(eta + eps E)/deps = Re<g, E> recovers Re g_ij from symmetric basis
    // matrices and Im g_ij from antisymmetric-imaginary ones.
    const auto fd_pairing = [&](const Eigen::MatrixXcd& e, double h) {
      const BlockMatrix plus = {eta0 + h * e};
      const BlockMatrix minus = {eta0 - h * e};
      return (free_energy(ctx, smear, psi, plus).total -
              free_energy(ctx, smear, psi, minus).total) /
             (2.0 * h);
    };
    for (double h : {1e-4, 1e-5}) {
      for (int i = 0; i < 3; ++i) {
        for (int j = i; j < 3; ++j) {
          Eigen::MatrixXcd e = Eigen::MatrixXcd::Zero(3, 3);
          if (i == j) {
            e(i, i) = 1.0;
            const double expect = g.g_eta[0](i, i).real();
            CHECK(std::abs(fd_pairing(e, h) - expect) <= 1e-6 * (1.0 + std::abs(expect)));
          } else {
            e(i, j) = 1.0;
            e(j, i) = 1.0;
            const double expect_re = 2.0 * g.g_eta[0](i, j).real();
            CHECK(std::abs(fd_pairing(e, h) - expect_re) <= 1e-6 * (1.0 + std::abs(expect_re)));
            e(i, j) = cdouble(0.0, 1.0);
            e(j, i) = cdouble(0.0, -1.0);
            const double expect_im = 2.0 * g.g_eta[0](i, j).imag();
            CHECK(std::abs(fd_pairing(e, h) - expect_im) <= 1e-6 * (1.0 + std::abs(expect_im)));
          }
        }
      }
    }
  }
  SUBCASE("saturated occupations raise the flat-occupation error") {
    const ModelContext ctx = build_model(testutil::free_electron_spec(6.0, 1.2, 2.0, 3));
    const SmearingSpec smear = SmearingSpec::fermi_dirac(1e-4);
    const BlockMatrix psi = testutil::random_orthonormal(ctx, 24);
    Eigen::MatrixXcd eta = Eigen::MatrixXcd::Zero(3, 3);
    eta(1, 1) = 10.0;
    eta(2, 2) = 20.0;
    const Evaluation ev = evaluate(ctx, smear, psi, {eta});
    CHECK_THROWS_AS(gradients(ctx, smear, psi, ev), FlatOccupationError);
  }
}

TEST_CASE("gradient covariance under frame changes") {
  const ModelContext ctx = fd_context();
  const SmearingSpec smear = SmearingSpec::fermi_dirac(0.15);
  const BlockMatrix psi = testutil::random_orthonormal(ctx, 31);
  const BlockMatrix eta = testutil::random_hermitian_eta(ctx, 32);
  const GradientPair g = gradients(ctx, smear, psi, evaluate(ctx, smear, psi, eta));
  std::mt19937_64 gen(33);
  std::uniform_real_distribution<double> cdist(-2.0, 2.0);
  for (uint64_t trial = 0; trial < 5; ++trial) {
    const double c = cdist(gen);
    BlockMatrix psi_rot(psi.size()), eta_rot(eta.size()), expect_gpsi(psi.size()),
        expect_geta(eta.size());
    std::vector<Eigen::MatrixXcd> ps(psi.size());
    for (size_t k = 0; k < psi.size(); ++k) {
      ps[k] = testutil::random_unitary(int(eta[k].rows()), 400 + 13 * trial + k);
      psi_rot[k] = psi[k] * ps[k];
      eta_rot[k] = ps[k].adjoint() *
                   (eta[k] + c * Eigen::MatrixXcd::Identity(eta[k].rows(), eta[k].cols())) *
                   ps[k];
      expect_gpsi[k] = g.g_psi[k] * ps[k];
      expect_geta[k] = ps[k].adjoint() * g.g_eta[k] * ps[k];
    }
    const GradientPair gr = gradients(ctx, smear, psi_rot, evaluate(ctx, smear, psi_rot, eta_rot));
    double diff_psi = 0.0, diff_eta = 0.0;
    for (size_t k = 0; k < psi.size(); ++k) {
      diff_psi = std::max(diff_psi, (gr.g_psi[k] - expect_gpsi[k]).norm());
      diff_eta = std::max(diff_eta, (gr.g_eta[k] - expect_geta[k]).norm());
    }
    CHECK(diff_psi <= 1e-9 * block_scale(g.g_psi));
    CHECK(diff_eta <= 1e-9 * block_scale(g.g_eta));
  }
}

TEST_CASE("kinetic preconditioner") {
  SUBCASE("multiplier takes the documented values") {
    CHECK(kinetic_precond_multiplier(0.0) ==
          doctest::Approx(1.0 / (1.0 + std::sqrt(2.0))).epsilon(1e-15));
    CHECK(kinetic_precond_multiplier(1.0) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    const double m = kinetic_precond_multiplier(1e3);
    CHECK(std::abs(m * 2e3 - 1.0) <= 1e-3); // ~ 1/|k+G|^2 for large kinetic energy
  }
  SUBCASE("multiplier stays inside (0, 1]") {
    for (double x : {0.0, 0.3, 1.0, 2.0, 10.0, 1e4, 1e8}) {
      const double m = kinetic_precond_multiplier(x);
      CHECK(m > 0.0);
      CHECK(m <= 1.0);
    }
  }
  SUBCASE("application scales each plane-wave row by its multiplier") {
    const ModelContext ctx = build_model(testutil::two_kpoint_spec());
    BlockMatrix residual(size_t(ctx.n_kpoints()));
    for (size_t k = 0; k < residual.size(); ++k)
      residual[k] = testutil::random_complex(ctx.bases[k].size(), 3, 41 + k);
    const BlockMatrix out = precond_psi(residual, ctx.bases);
    for (size_t k = 0; k < residual.size(); ++k) {
      for (int gi = 0; gi < ctx.bases[k].size(); ++gi) {
        const double m = kinetic_precond_multiplier(ctx.bases[k].kinetic[gi]);
        CHECK((out[k].row(gi) - m * residual[k].row(gi)).cwiseAbs().maxCoeff() <= 1e-15);
      }
    }
  }
  SUBCASE("shape mismatches are rejected") {
    const ModelContext ctx = build_model(testutil::free_electron_spec());
    BlockMatrix bad = {testutil::random_complex(3, 2, 42)};
    CHECK_THROWS_AS(precond_psi(bad, ctx.bases), ShapeError);
    BlockMatrix two = {bad[0], bad[0]};
    CHECK_THROWS_AS(precond_psi(two, ctx.bases), ShapeError);
  }
}

TEST_CASE("occupation-difference preconditioner") {
  SUBCASE("applied to the eta gradient it returns cI + eta - Sigma") {
    for (const ModelSpec& spec :
         {testutil::generalized_overlap_spec(), testutil::two_kpoint_spec()}) {
      const ModelContext ctx = build_model(spec);
      const SmearingSpec smear = SmearingSpec::fermi_dirac(0.1);
      const BlockMatrix psi = testutil::random_orthonormal(ctx, 51);
      const BlockMatrix eta = testutil::random_diag_eta(ctx, 52);
      const Evaluation ev = evaluate(ctx, smear, psi, eta);
      const GradientPair g = gradients(ctx, smear, psi, ev);
      const BlockMatrix m = precond_eta(g.g_eta, ev.occ, ctx.spec.kpoints.weights, smear);
      const double c = smear.sigma * g.d_mu / g.fprime_sum;
      for (size_t k = 0; k < m.size(); ++k) {
        const Eigen::MatrixXcd expect =
            c * Eigen::MatrixXcd::Identity(eta[k].rows(), eta[k].cols()) + eta[k] - g.sigma[k];
        CHECK((m[k] - expect).cwiseAbs().maxCoeff() <=
              1e-10 * (1.0 + expect.cwiseAbs().maxCoeff()));
      }
    }
  }
  SUBCASE("zero input maps to zero") {
    const ModelContext ctx = fd_context();
    const SmearingSpec smear = SmearingSpec::fermi_dirac(0.15);
    const BlockMatrix psi = testutil::random_orthonormal(ctx, 53);
    const BlockMatrix eta = testutil::random_diag_eta(ctx, 54);
    const Evaluation ev = evaluate(ctx, smear, psi, eta);
    BlockMatrix zero = {Eigen::MatrixXcd::Zero(3, 3)};
    const BlockMatrix m = precond_eta(zero, ev.occ, ctx.spec.kpoints.weights, smear);
    CHECK(block_norm(m) == 0.0);
  }
  SUBCASE("positive definite on traceless Hermitian directions (Fermi-Dirac)") {
    const ModelContext ctx = fd_context();
    const SmearingSpec smear = SmearingSpec::fermi_dirac(0.1);
    const BlockMatrix psi = testutil::random_orthonormal(ctx, 55);
    const BlockMatrix eta = testutil::random_diag_eta(ctx, 56);
    const Evaluation ev = evaluate(ctx, smear, psi, eta);
    for (uint64_t trial = 0; trial < 20; ++trial) {
      Eigen::MatrixXcd a = testutil::random_hermitian(3, 570 + trial);
      a -= (a.trace() / 3.0) * Eigen::MatrixXcd::Identity(3, 3);
      BlockMatrix dir = {a};
      const BlockMatrix m = precond_eta(dir, ev.occ, ctx.spec.kpoints.weights, smear);
      CHECK(block_real_inner(dir, m) > 0.0);
    }
  }
  SUBCASE("requires a diagonal eta") {
    const ModelContext ctx = fd_context();
    const SmearingSpec smear = SmearingSpec::fermi_dirac(0.15);
    const BlockMatrix eta = testutil::random_hermitian_eta(ctx, 58);
    const OccupationState occ =
        build_occupations(eta, ctx.spec.kpoints.weights, smear, ctx.spec.n_electrons);
    BlockMatrix a = {testutil::random_hermitian(3, 59)};
    CHECK_THROWS_AS(precond_eta(a, occ, ctx.spec.kpoints.weights, smear), InvalidMatrixError);
  }
  SUBCASE("fully saturated channels are zeroed and counted") {
    const ModelContext ctx = build_model(testutil::free_electron_spec(6.0, 1.2, 1.0, 3));
    const SmearingSpec smear = SmearingSpec::fermi_dirac(0.01);
    Eigen::MatrixXcd eta = Eigen::MatrixXcd::Zero(3, 3);
    eta(1, 1) = 10.0;
    eta(2, 2) = 10.5; // both a thousand sigma above mu: f underflows to zero
    const OccupationState occ =
        build_occupations({eta}, ctx.spec.kpoints.weights, smear, ctx.spec.n_electrons);
    REQUIRE(occ.f[0][1] == 0.0);
    REQUIRE(occ.f[0][2] == 0.0);
    const long before = precond_eta_clamp_count();
    BlockMatrix a = {testutil::random_hermitian(3, 60)};
    const BlockMatrix m = precond_eta(a, occ, ctx.spec.kpoints.weights, smear);
    CHECK(precond_eta_clamp_count() > before);
    CHECK(m[0](1, 2) == cdouble(0.0, 0.0)); // dead channel carries no update
    CHECK(m[0].allFinite());
    CHECK(std::abs(m[0](0, 1)) > 0.0); // channels that cross mu stay alive
  }
}

TEST_CASE("line-search partials") {
  const ModelContext ctx = fd_context();
  const SmearingSpec smear = SmearingSpec::fermi_dirac(0.15);
  const BlockMatrix psi = testutil::random_orthonormal(ctx, 61);
  const BlockMatrix eta = testutil::random_diag_eta(ctx, 62);
  const BlockMatrix d_psi = testutil::random_tangent(ctx, psi, 63);
  const BlockMatrix d_eta = {testutil::random_hermitian(3, 64)};
  const GradientPair g = gradients(ctx, smear, psi, evaluate(ctx, smear, psi, eta));

  SUBCASE("at the origin the partials are the gradient pairings") {
    const LinePartials lp = line_partials(ctx, smear, psi, eta, d_psi, d_eta, 0.0, 0.0);
    CHECK(lp.value == doctest::Approx(free_energy(ctx, smear, psi, eta).total).epsilon(1e-13));
    const double expect_psi = block_real_inner(g.g_psi, d_psi);
    const double expect_eta = block_real_inner(g.g_eta, d_eta);
    CHECK(std::abs(lp.dt_psi - expect_psi) <= 1e-10 * (1.0 + std::abs(expect_psi)));
    CHECK(std::abs(lp.dt_eta - expect_eta) <= 1e-10 * (1.0 + std::abs(expect_eta)));
  }
  SUBCASE("origin partials match finite differences along each axis") {
    const LinePartials lp = line_partials(ctx, smear, psi, eta, d_psi, d_eta, 0.0, 0.0);
    const double h = 1e-5;
    const auto value_at = [&](double tp, double te) {
      return line_partials(ctx, smear, psi, eta, d_psi, d_eta, tp, te).value;
    };
    const double fd_psi = (value_at(h, 0.0) - value_at(-h, 0.0)) / (2.0 * h);
    const double fd_eta = (value_at(0.0, h) - value_at(0.0, -h)) / (2.0 * h);
    CHECK(std::abs(fd_psi - lp.dt_psi) <= 1e-6 * (1.0 + std::abs(lp.dt_psi)));
    CHECK(std::abs(fd_eta - lp.dt_eta) <= 1e-6 * (1.0 + std::abs(lp.dt_eta)));
  }
  SUBCASE("the identity direction in eta is flat") {
    const BlockMatrix ones = identity_like(eta);
    for (double t : {0.0, 0.3}) {
      const LinePartials lp = line_partials(ctx, smear, psi, eta, d_psi, ones, 0.0, t);
      CHECK(std::abs(lp.dt_eta) <= 1e-10 * (1.0 + std::abs(lp.value)));
    }
  }
  SUBCASE("partials approach their origin values linearly in t") {
    const LinePartials at0 = line_partials(ctx, smear, psi, eta, d_psi, d_eta, 0.0, 0.0);
    const double tmax = 0.2;
    const LinePartials ref = line_partials(ctx, smear, psi, eta, d_psi, d_eta, tmax, tmax);
    const double rate =
        (std::abs(ref.dt_psi - at0.dt_psi) + std::abs(ref.dt_eta - at0.dt_eta)) / tmax;
    for (double t : {0.1, 0.05, 0.025}) {
      const LinePartials lp = line_partials(ctx, smear, psi, eta, d_psi, d_eta, t, t);
      const double drift = std::abs(lp.dt_psi - at0.dt_psi) + std::abs(lp.dt_eta - at0.dt_eta);
      CHECK(drift <= 3.0 * (rate + 1e-6) * t); // no blow-up of drift/t as t -> 0
    }
  }
}

TEST_CASE("stationarity residual") {
  SUBCASE("analytic free-electron eigenpairs are stationary") {
    const StationaryFixture fx = free_electron_stationary();
    CHECK(ks_stationarity_residual(fx.ctx, SmearingSpec::fermi_dirac(0.2), fx.psi, fx.eta) <=
          1e-12);
  }
  SUBCASE("random states are far from stationary") {
    const ModelContext ctx = fd_context();
    const BlockMatrix psi = testutil::random_orthonormal(ctx, 71);
    const BlockMatrix eta = testutil::random_diag_eta(ctx, 72);
    CHECK(ks_stationarity_residual(ctx, SmearingSpec::fermi_dirac(0.15), psi, eta) > 1e-2);
  }
  SUBCASE("a converged minimiser satisfies the eigenvalue equations") {
    const ModelContext ctx = build_model(testutil::smooth_well_spec());
    const SmearingSpec smear = SmearingSpec::fermi_dirac(0.1);
    OptimizerConfig cfg;
    cfg.tol = 1e-6;
    cfg.max_iter = 300;
    const MinimizeResult res = minimize(ctx, smear, cfg, 5);
    REQUIRE(res.converged);
    CHECK(ks_stationarity_residual(ctx, smear, res.psi, res.eta) <= 1e-5);
  }
  SUBCASE("requires a diagonal eta") {
    const ModelContext ctx = fd_context();
    const BlockMatrix psi = testutil::random_orthonormal(ctx, 73);
    const BlockMatrix eta = testutil::random_hermitian_eta(ctx, 74);
    CHECK_THROWS_AS(ks_stationarity_residual(ctx, SmearingSpec::fermi_dirac(0.15), psi, eta),
                    InvalidMatrixError);
  }
}
