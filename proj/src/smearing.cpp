#include "ekdft/smearing.hpp"

#include <algorithm>
#include <cmath>

namespace ekdft {

namespace {

constexpr double sqrt_pi = 1.7724538509055160273;

// Physicists' Hermite polynomials H_0..H_n at x via H_{i+1} = 2x H_i - 2i H_{i-1}.
void hermite_table(double x, int n, std::vector<double>& h) {
  h.resize(n + 1);
  h[0] = 1.0;
  if (n >= 1) h[1] = 2.0 * x;
  for (int i = 1; i < n; ++i) h[i + 1] = 2.0 * x * h[i] - 2.0 * double(i) * h[i - 1];
}

// (-1)^i / (i! 4^i sqrt(pi))
double mp_coefficient(int i) {
  double a = 1.0 / sqrt_pi;
  for (int j = 1; j <= i; ++j) a /= -4.0 * double(j);
  return a;
}

double f_fd(double x) {
  if (x > 0.0) {
    const double t = std::exp(-x);
    return t / (1.0 + t);
  }
  return 1.0 / (1.0 + std::exp(x));
}

double s_fd(double x) {
  const double ax = std::abs(x);
  const double t = std::exp(-ax);
  return ax * t / (1.0 + t) + std::log1p(t);
}

double fp_fd(double x) {
  const double t = std::exp(-std::abs(x));
  const double d = 1.0 + t;
  return -t / (d * d);
}

void check(const SmearingSpec& spec) {
  if (!(spec.sigma > 0.0)) throw InfeasibleError("smearing sigma must be positive");
  if (spec.kind == SmearingKind::MethfesselPaxton && (spec.mp_order < 1 || spec.mp_order > 8)) {
    throw InfeasibleError("Methfessel-Paxton order must be in [1, 8]");
  }
}

} // namespace

SmearingSpec SmearingSpec::fermi_dirac(double sigma) {
  SmearingSpec s;
  s.kind = SmearingKind::FermiDirac;
  s.sigma = sigma;
  check(s);
  return s;
}

SmearingSpec SmearingSpec::gaussian(double sigma) {
  SmearingSpec s;
  s.kind = SmearingKind::Gaussian;
  s.sigma = sigma;
  check(s);
  return s;
}

SmearingSpec SmearingSpec::methfessel_paxton(double sigma, int order) {
  SmearingSpec s;
  s.kind = SmearingKind::MethfesselPaxton;
  s.sigma = sigma;
  s.mp_order = order;
  check(s);
  return s;
}

SmearingSpec SmearingSpec::marzari_vanderbilt(double sigma, double a) {
  SmearingSpec s;
  s.kind = SmearingKind::MarzariVanderbilt;
  s.sigma = sigma;
  s.mv_a = a;
  check(s);
  return s;
}

double f_value(const SmearingSpec& spec, double x) {
  switch (spec.kind) {
  case SmearingKind::FermiDirac:
    return f_fd(x);
  case SmearingKind::Gaussian:
    return 0.5 * std::erfc(x);
  case SmearingKind::MethfesselPaxton: {
    const double gauss = std::exp(-x * x);
    double corr = 0.0;
    if (gauss > 0.0) {
      std::vector<double> h;
      hermite_table(x, 2 * spec.mp_order - 1, h);
      for (int i = 1; i <= spec.mp_order; ++i) corr += mp_coefficient(i) * h[2 * i - 1];
    }
    return 0.5 * std::erfc(x) + corr * gauss;
  }
  case SmearingKind::MarzariVanderbilt: {
    const double a = spec.mv_a;
    const double gauss = std::exp(-x * x);
    return 0.5 * std::erfc(x) + (2.0 * a * x * x - 2.0 * x - a) * gauss / (4.0 * sqrt_pi);
  }
  }
  throw Error("unreachable smearing kind");
}

double s_value(const SmearingSpec& spec, double x) {
  switch (spec.kind) {
  case SmearingKind::FermiDirac:
    return s_fd(x);
  case SmearingKind::Gaussian:
    return std::exp(-x * x) / (2.0 * sqrt_pi);
  case SmearingKind::MethfesselPaxton: {
    const double gauss = std::exp(-x * x);
    if (gauss == 0.0) return 0.0;
    std::vector<double> h;
    hermite_table(x, 2 * spec.mp_order, h);
    return 0.5 * mp_coefficient(spec.mp_order) * h[2 * spec.mp_order] * gauss;
  }
  case SmearingKind::MarzariVanderbilt: {
    const double a = spec.mv_a;
    const double x2 = x * x;
    return (2.0 * a * x2 * x - 2.0 * x2 + 1.0) * std::exp(-x2) / (4.0 * sqrt_pi);
  }
  }
  throw Error("unreachable smearing kind");
}

double f_prime(const SmearingSpec& spec, double x) {
  switch (spec.kind) {
  case SmearingKind::FermiDirac:
    return fp_fd(x);
  case SmearingKind::Gaussian:
    return -std::exp(-x * x) / sqrt_pi;
  case SmearingKind::MethfesselPaxton: {
    const double gauss = std::exp(-x * x);
    if (gauss == 0.0) return -0.0;
    std::vector<double> h;
    hermite_table(x, 2 * spec.mp_order, h);
    double poly = 1.0 / sqrt_pi;
    for (int i = 1; i <= spec.mp_order; ++i) poly += mp_coefficient(i) * h[2 * i];
    return -poly * gauss;
  }
  case SmearingKind::MarzariVanderbilt: {
    const double a = spec.mv_a;
    const double x2 = x * x;
    return (-4.0 * a * x2 * x + 4.0 * x2 + 6.0 * a * x - 6.0) * std::exp(-x2) / (4.0 * sqrt_pi);
  }
  }
  throw Error("unreachable smearing kind");
}

double divided_difference_f(const SmearingSpec& spec, double mu, double e1, double e2) {
  const double delta = 1e-8 * std::max({1.0, std::abs(e1), std::abs(e2)});
  if (std::abs(e1 - e2) <= delta) {
    return f_prime(spec, (e1 - mu) / spec.sigma) / spec.sigma;
  }
  const double f1 = f_value(spec, (e1 - mu) / spec.sigma);
  const double f2 = f_value(spec, (e2 - mu) / spec.sigma);
  return (f1 - f2) / (e1 - e2);
}

namespace {

double total_occupation(const std::vector<Eigen::VectorXd>& eigs,
                        const std::vector<double>& weights, const SmearingSpec& spec, double mu) {
  double total = 0.0;
  for (size_t k = 0; k < eigs.size(); ++k) {
    double acc = 0.0;
    for (int i = 0; i < eigs[k].size(); ++i) acc += f_value(spec, (eigs[k][i] - mu) / spec.sigma);
    total += weights[k] * acc;
  }
  return total;
}

double occupation_slope(const std::vector<Eigen::VectorXd>& eigs,
                        const std::vector<double>& weights, const SmearingSpec& spec, double mu) {
  // d/dmu of the total occupation
  double total = 0.0;
  for (size_t k = 0; k < eigs.size(); ++k) {
    double acc = 0.0;
    for (int i = 0; i < eigs[k].size(); ++i) acc += f_prime(spec, (eigs[k][i] - mu) / spec.sigma);
    total += weights[k] * acc;
  }
  return -total / spec.sigma;
}

double refine_in_bracket(const std::vector<Eigen::VectorXd>& eigs,
                         const std::vector<double>& weights, const SmearingSpec& spec, double n_e,
                         double lo, double hi, double glo) {
  for (int it = 0; it < 200 && hi - lo > 1e-16 * std::max(1.0, std::abs(lo) + std::abs(hi)); ++it) {
    const double mid = 0.5 * (lo + hi);
    const double gm = total_occupation(eigs, weights, spec, mid) - n_e;
    if ((gm <= 0.0) == (glo <= 0.0)) {
      lo = mid;
      glo = gm;
    } else {
      hi = mid;
    }
  }
  double mu = 0.5 * (lo + hi);
  for (int it = 0; it < 5; ++it) {
    const double g = total_occupation(eigs, weights, spec, mu) - n_e;
    const double gp = occupation_slope(eigs, weights, spec, mu);
    if (gp == 0.0) break;
    const double next = mu - g / gp;
    if (next < lo || next > hi) break;
    mu = next;
  }
  return mu;
}

} // namespace

MuResult solve_mu(const std::vector<Eigen::VectorXd>& eigs, const std::vector<double>& weights,
                  const SmearingSpec& spec, double n_e, std::optional<double> warm) {
  check(spec);
  if (eigs.empty() || eigs.size() != weights.size()) {
    throw ShapeError("eigenvalue blocks and weights must be non-empty and equal length");
  }
  double capacity = 0.0;
  double emin = eigs[0].size() ? eigs[0][0] : 0.0;
  double emax = emin;
  int total_states = 0;
  for (size_t k = 0; k < eigs.size(); ++k) {
    if (eigs[k].size() == 0) throw ShapeError("empty eigenvalue block");
    capacity += weights[k] * double(eigs[k].size());
    emin = std::min(emin, eigs[k].minCoeff());
    emax = std::max(emax, eigs[k].maxCoeff());
    total_states += int(eigs[k].size());
  }
  if (!(n_e > 0.0) || !(n_e < capacity)) {
    throw InfeasibleError("electron count must satisfy 0 < n_e < sum_k w_k N");
  }

  const double lo0 = emin - 60.0 * spec.sigma;
  const double hi0 = emax + 60.0 * spec.sigma;

  double mu;
  if (spec.monotone()) {
    const double glo = total_occupation(eigs, weights, spec, lo0) - n_e;
    const double ghi = total_occupation(eigs, weights, spec, hi0) - n_e;
    if (!(glo <= 0.0 && ghi >= 0.0)) {
      throw NoSolutionError("chemical potential not bracketed in [min-60s, max+60s]");
    }
    mu = refine_in_bracket(eigs, weights, spec, n_e, lo0, hi0, glo);
  } else {
    // Several roots are possible: scan, then refine the bracket nearest the
    // warm start (or nearest the ceil(n_e/2)-th smallest eigenvalue).
    double ref;
    if (warm) {
      ref = *warm;
    } else {
      std::vector<double> pool;
      pool.reserve(total_states);
      for (const auto& e : eigs)
        for (int i = 0; i < e.size(); ++i) pool.push_back(e[i]);
      std::sort(pool.begin(), pool.end());
      const int idx = std::min<int>(int(pool.size()) - 1,
                                    std::max(0, int(std::ceil(n_e / 2.0)) - 1));
      ref = pool[idx];
    }
    const double span = hi0 - lo0;
    int npts = int(span / (spec.sigma / 16.0)) + 1;
    npts = std::clamp(npts, 2001, 200001);
    const double step = span / double(npts - 1);
    double best_mu = 0.0, best_dist = -1.0;
    double prev_mu = lo0;
    double prev_g = total_occupation(eigs, weights, spec, lo0) - n_e;
    for (int i = 1; i < npts; ++i) {
      const double cur_mu = lo0 + step * double(i);
      const double cur_g = total_occupation(eigs, weights, spec, cur_mu) - n_e;
      if ((prev_g <= 0.0) != (cur_g <= 0.0)) {
        const double root = refine_in_bracket(eigs, weights, spec, n_e, prev_mu, cur_mu, prev_g);
        const double dist = std::abs(root - ref);
        if (best_dist < 0.0 || dist < best_dist) {
          best_dist = dist;
          best_mu = root;
        }
      }
      prev_mu = cur_mu;
      prev_g = cur_g;
    }
    if (best_dist < 0.0) {
      throw NoSolutionError("no occupation root found in [min-60s, max+60s]");
    }
    mu = best_mu;
  }

  MuResult result;
  result.mu = mu;
  result.residual = std::abs(total_occupation(eigs, weights, spec, mu) - n_e);
  if (result.residual > 1e-12 * std::max(1.0, n_e)) {
    throw NoSolutionError("occupation constraint residual above tolerance");
  }
  return result;
}

Eigen::MatrixXcd occupation_matrix(const Eigen::MatrixXcd& eta, double mu,
                                   const SmearingSpec& spec) {
  if (eta.rows() != eta.cols()) throw InvalidMatrixError("eta block must be square");
  const double scale = std::max(1.0, eta.cwiseAbs().maxCoeff());
  if ((eta - eta.adjoint()).cwiseAbs().maxCoeff() > 1e-12 * scale) {
    throw InvalidMatrixError("eta block must be Hermitian");
  }
  const int n = int(eta.rows());

  bool diagonal = true;
  for (int j = 0; j < n && diagonal; ++j) {
    for (int i = 0; i < n; ++i) {
      if (i != j && eta(i, j) != cdouble(0.0, 0.0)) {
        diagonal = false;
        break;
      }
    }
  }
  if (diagonal) {
    Eigen::MatrixXcd f = Eigen::MatrixXcd::Zero(n, n);
    for (int i = 0; i < n; ++i) {
      f(i, i) = f_value(spec, (eta(i, i).real() - mu) / spec.sigma);
    }
    return f;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(eta);
  Eigen::VectorXd fd(n);
  for (int i = 0; i < n; ++i) fd[i] = f_value(spec, (es.eigenvalues()[i] - mu) / spec.sigma);
  Eigen::MatrixXcd f = es.eigenvectors() * fd.asDiagonal() * es.eigenvectors().adjoint();
  return 0.5 * (f + f.adjoint().eval());
}

double entropy_term(const BlockMatrix& etas, const std::vector<double>& weights, double mu,
                    const SmearingSpec& spec) {
  if (etas.size() != weights.size()) throw ShapeError("eta blocks and weights mismatch");
  double total = 0.0;
  for (size_t k = 0; k < etas.size(); ++k) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(etas[k], Eigen::EigenvaluesOnly);
    double acc = 0.0;
    for (int i = 0; i < es.eigenvalues().size(); ++i) {
      acc += s_value(spec, (es.eigenvalues()[i] - mu) / spec.sigma);
    }
    total += weights[k] * acc;
  }
  return -spec.sigma * total;
}

OccupationState build_occupations(const BlockMatrix& etas, const std::vector<double>& weights,
                                  const SmearingSpec& spec, double n_e,
                                  std::optional<double> warm) {
  if (etas.size() != weights.size()) throw ShapeError("eta blocks and weights mismatch");
  const size_t nk = etas.size();
  OccupationState occ;
  occ.eps.resize(nk);
  occ.rot.resize(nk);
  occ.f.resize(nk);
  occ.fprime.resize(nk);
  occ.fmat.resize(nk);

  for (size_t k = 0; k < nk; ++k) {
    const auto& eta = etas[k];
    if (eta.rows() != eta.cols()) throw InvalidMatrixError("eta block must be square");
    const double scale = std::max(1.0, eta.cwiseAbs().maxCoeff());
    if ((eta - eta.adjoint()).cwiseAbs().maxCoeff() > 1e-12 * scale) {
      throw InvalidMatrixError("eta block must be Hermitian");
    }
    const int n = int(eta.rows());
    bool diagonal = true;
    for (int j = 0; j < n && diagonal; ++j) {
      for (int i = 0; i < n; ++i) {
        if (i != j && eta(i, j) != cdouble(0.0, 0.0)) {
          diagonal = false;
          break;
        }
      }
    }
    if (diagonal) {
      occ.eps[k] = eta.diagonal().real();
      occ.rot[k] = Eigen::MatrixXcd(); // identity marker
    } else {
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(eta);
      occ.eps[k] = es.eigenvalues();
      occ.rot[k] = es.eigenvectors();
    }
  }

  const MuResult mu = solve_mu(occ.eps, weights, spec, n_e, warm);
  occ.mu = mu.mu;
  occ.mu_residual = mu.residual;

  for (size_t k = 0; k < nk; ++k) {
    const int n = int(occ.eps[k].size());
    occ.f[k].resize(n);
    occ.fprime[k].resize(n);
    for (int i = 0; i < n; ++i) {
      const double x = (occ.eps[k][i] - occ.mu) / spec.sigma;
      occ.f[k][i] = f_value(spec, x);
      occ.fprime[k][i] = f_prime(spec, x);
    }
    if (occ.rot[k].size() == 0) {
      occ.fmat[k] = occ.f[k].cast<cdouble>().asDiagonal();
    } else {
      Eigen::MatrixXcd f = occ.rot[k] * occ.f[k].asDiagonal() * occ.rot[k].adjoint();
      occ.fmat[k] = 0.5 * (f + f.adjoint().eval());
    }
  }
  return occ;
}

double fprime_weighted_sum(const OccupationState& occ, const std::vector<double>& weights) {
  double total = 0.0;
  for (size_t k = 0; k < occ.fprime.size(); ++k) total += weights[k] * occ.fprime[k].sum();
  return total;
}

} // namespace ekdft
