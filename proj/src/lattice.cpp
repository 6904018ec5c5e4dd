#include "ekdft/lattice.hpp"

#include <algorithm>
#include <cmath>
#include <tuple>

#include <fftw3.h>
#include <json.hpp>

namespace ekdft {

UnitCell UnitCell::from_vectors(const Vec3& a1, const Vec3& a2, const Vec3& a3) {
  Eigen::Matrix3d m;
  m.col(0) = a1;
  m.col(1) = a2;
  m.col(2) = a3;
  const double det = m.determinant();
  const double scale = std::max({a1.norm(), a2.norm(), a3.norm()});
  if (scale <= 0.0 || std::abs(det) < 1e-14 * scale * scale * scale) {
    throw InvalidCellError("cell vectors are singular or coplanar");
  }
  UnitCell cell;
  cell.a1 = a1;
  cell.a2 = a2;
  cell.a3 = a3;
  cell.volume = std::abs(det);
  return cell;
}

Eigen::Matrix3d UnitCell::matrix() const {
  Eigen::Matrix3d m;
  m.col(0) = a1;
  m.col(1) = a2;
  m.col(2) = a3;
  return m;
}

Vec3 UnitCell::cartesian(const Vec3& frac) const { return matrix() * frac; }

Eigen::Matrix3d ReciprocalLattice::matrix() const {
  Eigen::Matrix3d m;
  m.col(0) = b1;
  m.col(1) = b2;
  m.col(2) = b3;
  return m;
}

Vec3 ReciprocalLattice::cartesian(const Vec3& frac) const { return matrix() * frac; }

ReciprocalLattice build_reciprocal(const UnitCell& cell) {
  // B^T A = 2 pi I  =>  B = 2 pi A^{-T}
  const Eigen::Matrix3d b = 2.0 * M_PI * cell.matrix().inverse().transpose();
  ReciprocalLattice recip;
  recip.b1 = b.col(0);
  recip.b2 = b.col(1);
  recip.b3 = b.col(2);
  return recip;
}

KpointSet KpointSet::create(std::vector<Vec3> points, std::vector<double> weights) {
  if (points.empty() || points.size() != weights.size()) {
    throw ShapeError("k-point list and weight list must be non-empty and equal length");
  }
  double sum = 0.0;
  for (double w : weights) {
    if (!(w > 0.0)) throw InfeasibleError("k-point weights must be positive");
    sum += w;
  }
  if (std::abs(sum - 2.0) > 1e-12) {
    throw InfeasibleError("k-point weights must sum to 2 (got " + std::to_string(sum) + ")");
  }
  KpointSet set;
  set.points = std::move(points);
  set.weights = std::move(weights);
  return set;
}

int smooth_grid_size(int n) {
  if (n < 1) n = 1;
  for (int s = n;; ++s) {
    int r = s;
    for (int p : {2, 3, 5}) {
      while (r % p == 0) r /= p;
    }
    if (r == 1) return s;
  }
}

PlanewaveBasis build_basis(const UnitCell& cell, const Vec3& kpoint, double ecut,
                           const std::array<int, 3>* grid_override) {
  if (!(ecut > 0.0)) throw InfeasibleError("ecut must be positive");
  const ReciprocalLattice recip = build_reciprocal(cell);

  // Safe per-axis bound: |m_i| = |G.a_i| / (2 pi) <= |G| |a_i| / (2 pi).
  const double gmax = std::sqrt(2.0 * ecut) + kpoint.norm();
  const Vec3 alen(cell.a1.norm(), cell.a2.norm(), cell.a3.norm());
  IVec3 bound;
  for (int i = 0; i < 3; ++i) {
    bound[i] = static_cast<int>(std::ceil(gmax * alen[i] / (2.0 * M_PI))) + 1;
  }

  struct Entry {
    double kin;
    IVec3 m;
    Vec3 g;
  };
  std::vector<Entry> entries;
  for (int m1 = -bound[0]; m1 <= bound[0]; ++m1) {
    for (int m2 = -bound[1]; m2 <= bound[1]; ++m2) {
      for (int m3 = -bound[2]; m3 <= bound[2]; ++m3) {
        const Vec3 g = double(m1) * recip.b1 + double(m2) * recip.b2 + double(m3) * recip.b3;
        const double kin = 0.5 * (kpoint + g).squaredNorm();
        if (kin <= ecut) entries.push_back({kin, IVec3(m1, m2, m3), g});
      }
    }
  }
  if (entries.empty()) throw EmptyBasisError("no plane waves below the cutoff");

  std::sort(entries.begin(), entries.end(), [](const Entry& l, const Entry& r) {
    return std::make_tuple(l.kin, l.m[0], l.m[1], l.m[2]) <
           std::make_tuple(r.kin, r.m[0], r.m[1], r.m[2]);
  });

  PlanewaveBasis basis;
  basis.kpoint = kpoint;
  basis.ecut = ecut;
  basis.cell_volume = cell.volume;
  basis.mvecs.reserve(entries.size());
  basis.gcart.reserve(entries.size());
  basis.kinetic.resize(static_cast<int>(entries.size()));
  IVec3 mmax = IVec3::Zero();
  for (int i = 0; i < static_cast<int>(entries.size()); ++i) {
    basis.mvecs.push_back(entries[i].m);
    basis.gcart.push_back(entries[i].g);
    basis.kinetic[i] = entries[i].kin;
    for (int ax = 0; ax < 3; ++ax) mmax[ax] = std::max(mmax[ax], std::abs(entries[i].m[ax]));
  }

  for (int ax = 0; ax < 3; ++ax) {
    const int minimum = smooth_grid_size(4 * mmax[ax] + 1);
    if (grid_override) {
      if ((*grid_override)[ax] < minimum) {
        throw ShapeError("grid override smaller than the alias-free minimum");
      }
      basis.fftgrid[ax] = (*grid_override)[ax];
    } else {
      basis.fftgrid[ax] = minimum;
    }
  }

  basis.gmap.resize(basis.size());
  const auto& d = basis.fftgrid;
  for (int i = 0; i < basis.size(); ++i) {
    IVec3 t;
    for (int ax = 0; ax < 3; ++ax) {
      t[ax] = basis.mvecs[i][ax] % d[ax];
      if (t[ax] < 0) t[ax] += d[ax];
    }
    basis.gmap[i] = (t[0] * d[1] + t[1]) * d[2] + t[2];
  }
  basis.grid = std::make_shared<FftGrid3d>(basis.fftgrid);
  return basis;
}

Eigen::MatrixXcd to_realspace(const PlanewaveBasis& basis, const Eigen::MatrixXcd& coeffs) {
  if (coeffs.rows() != basis.size()) {
    throw ShapeError("coefficient rows do not match the basis size");
  }
  const int np = basis.grid_points();
  const double norm = 1.0 / std::sqrt(basis.cell_volume);
  Eigen::MatrixXcd values(np, coeffs.cols());
  Eigen::VectorXcd scatter = Eigen::VectorXcd::Zero(np);
  for (int j = 0; j < coeffs.cols(); ++j) {
    scatter.setZero();
    for (int i = 0; i < basis.size(); ++i) scatter[basis.gmap[i]] = coeffs(i, j);
    basis.grid->backward(scatter.data(), values.col(j).data());
    values.col(j) *= norm;
  }
  return values;
}

Eigen::MatrixXcd to_reciprocal(const PlanewaveBasis& basis, const Eigen::MatrixXcd& values) {
  const int np = basis.grid_points();
  if (values.rows() != np) throw ShapeError("grid value rows do not match the dense grid");
  const double norm = std::sqrt(basis.cell_volume) / double(np);
  Eigen::MatrixXcd coeffs(basis.size(), values.cols());
  Eigen::VectorXcd work(np);
  for (int j = 0; j < values.cols(); ++j) {
    basis.grid->forward(values.col(j).data(), work.data());
    for (int i = 0; i < basis.size(); ++i) coeffs(i, j) = work[basis.gmap[i]] * norm;
  }
  return coeffs;
}

std::string basis_summary_json(const PlanewaveBasis& basis) {
  nlohmann::json j;
  j["cell_volume"] = basis.cell_volume;
  j["kpoint"] = {basis.kpoint[0], basis.kpoint[1], basis.kpoint[2]};
  j["ecut"] = basis.ecut;
  j["n_g"] = basis.size();
  j["fft_grid"] = {basis.fftgrid[0], basis.fftgrid[1], basis.fftgrid[2]};
  return j.dump();
}

IVec3 grid_mvec(const std::array<int, 3>& dims, int linear_index) {
  IVec3 t;
  t[2] = linear_index % dims[2];
  linear_index /= dims[2];
  t[1] = linear_index % dims[1];
  t[0] = linear_index / dims[1];
  for (int ax = 0; ax < 3; ++ax) {
    if (t[ax] > dims[ax] / 2) t[ax] -= dims[ax];
  }
  return t;
}

std::vector<Vec3> grid_g_vectors(const std::array<int, 3>& dims, const ReciprocalLattice& recip) {
  const int np = dims[0] * dims[1] * dims[2];
  std::vector<Vec3> g(np);
  for (int i = 0; i < np; ++i) {
    const IVec3 m = grid_mvec(dims, i);
    g[i] = double(m[0]) * recip.b1 + double(m[1]) * recip.b2 + double(m[2]) * recip.b3;
  }
  return g;
}

FftGrid3d::FftGrid3d(const std::array<int, 3>& dims) : dims_(dims) {
  n_ = dims_[0] * dims_[1] * dims_[2];
  buf_in_ = reinterpret_cast<cdouble*>(fftw_malloc(sizeof(fftw_complex) * n_));
  buf_out_ = reinterpret_cast<cdouble*>(fftw_malloc(sizeof(fftw_complex) * n_));
  auto* in = reinterpret_cast<fftw_complex*>(buf_in_);
  auto* out = reinterpret_cast<fftw_complex*>(buf_out_);
  plan_fwd_ = fftw_plan_dft_3d(dims_[0], dims_[1], dims_[2], in, out, FFTW_FORWARD, FFTW_ESTIMATE);
  plan_bwd_ = fftw_plan_dft_3d(dims_[0], dims_[1], dims_[2], in, out, FFTW_BACKWARD, FFTW_ESTIMATE);
}

FftGrid3d::~FftGrid3d() {
  fftw_destroy_plan(static_cast<fftw_plan>(plan_fwd_));
  fftw_destroy_plan(static_cast<fftw_plan>(plan_bwd_));
  fftw_free(buf_in_);
  fftw_free(buf_out_);
}

void FftGrid3d::forward(const cdouble* in, cdouble* out) const {
  std::copy(in, in + n_, buf_in_);
  fftw_execute(static_cast<fftw_plan>(plan_fwd_));
  std::copy(buf_out_, buf_out_ + n_, out);
}

void FftGrid3d::backward(const cdouble* in, cdouble* out) const {
  std::copy(in, in + n_, buf_in_);
  fftw_execute(static_cast<fftw_plan>(plan_bwd_));
  std::copy(buf_out_, buf_out_ + n_, out);
}

} // namespace ekdft
