#pragma once

#include <array>
#include <memory>
#include <string>

#include "ekdft/types.hpp"

namespace ekdft {

/// Simulation cell spanned by three lattice vectors (bohr).
struct UnitCell {
  Vec3 a1, a2, a3;
  double volume = 0.0; // |det(a1 a2 a3)|, strictly positive

  /// Throws InvalidCellError when the vectors are (numerically) coplanar.
  static UnitCell from_vectors(const Vec3& a1, const Vec3& a2, const Vec3& a3);

  Eigen::Matrix3d matrix() const; // columns a1, a2, a3
  /// Cartesian position of fractional coordinates.
  Vec3 cartesian(const Vec3& frac) const;
};

/// Dual lattice; b_i . a_j = 2 pi delta_ij.
struct ReciprocalLattice {
  Vec3 b1, b2, b3;
  Eigen::Matrix3d matrix() const; // columns b1, b2, b3
  Vec3 cartesian(const Vec3& frac) const;
};

ReciprocalLattice build_reciprocal(const UnitCell& cell);

/// Brillouin-zone sample points (cartesian) with weights summing to 2
/// (spin factor folded into the weights).
struct KpointSet {
  std::vector<Vec3> points;
  std::vector<double> weights;

  /// Validates positivity and the weight sum (tolerance 1e-12).
  static KpointSet create(std::vector<Vec3> points, std::vector<double> weights);
  int size() const { return static_cast<int>(points.size()); }
};

/// Smallest 2,3,5-smooth integer >= n.
int smooth_grid_size(int n);

class FftGrid3d; // transform engine, defined below

/// Plane-wave set for one k-point: all G = m1 b1 + m2 b2 + m3 b3 with
/// kinetic energy |k+G|^2/2 <= ecut, ordered lexicographically by
/// (kinetic, m1, m2, m3). Basis functions are e_G(r) = e^{iG.r}/sqrt(V).
struct PlanewaveBasis {
  Vec3 kpoint;        // cartesian
  double ecut = 0.0;
  double cell_volume = 0.0;
  std::vector<IVec3> mvecs;
  std::vector<Vec3> gcart;     // G (cartesian), same order as mvecs
  Eigen::VectorXd kinetic;     // |k+G|^2 / 2
  std::array<int, 3> fftgrid{}; // dense-grid dimensions
  std::vector<int> gmap;       // linear dense-grid index per basis entry
  std::shared_ptr<FftGrid3d> grid; // shared transform engine

  int size() const { return static_cast<int>(mvecs.size()); }
  int grid_points() const { return fftgrid[0] * fftgrid[1] * fftgrid[2]; }
};

/// Enumerates the basis for (cell, k, ecut). The FFT grid is the smallest
/// 2,3,5-smooth size >= 4*max|m_i|+1 per axis so that products of two basis
/// functions are alias-free; grid_override (optional, per-axis >= that
/// minimum) lets several k-points share one dense grid.
PlanewaveBasis build_basis(const UnitCell& cell, const Vec3& kpoint, double ecut,
                           const std::array<int, 3>* grid_override = nullptr);

/// Coefficients -> complex values on the dense grid (one column per orbital).
Eigen::MatrixXcd to_realspace(const PlanewaveBasis& basis, const Eigen::MatrixXcd& coeffs);

/// Values on the dense grid -> coefficients; exact inverse of to_realspace.
Eigen::MatrixXcd to_reciprocal(const PlanewaveBasis& basis, const Eigen::MatrixXcd& values);

/// {"cell_volume":..., "kpoint":[...], "ecut":..., "n_g":..., "fft_grid":[...]}
std::string basis_summary_json(const PlanewaveBasis& basis);

/// Signed min-image integer coordinates of a dense-grid frequency index.
IVec3 grid_mvec(const std::array<int, 3>& dims, int linear_index);

/// Cartesian G for every dense-grid frequency (min-image convention).
std::vector<Vec3> grid_g_vectors(const std::array<int, 3>& dims, const ReciprocalLattice& recip);

/// Out-of-place complex 3-D FFTs on a fixed grid size (row-major, last index
/// fastest). Plans are built once; transforms copy through an owned buffer so
/// caller arrays need no special alignment. Unnormalised in both directions,
/// matching the usual DFT pair.
class FftGrid3d {
public:
  explicit FftGrid3d(const std::array<int, 3>& dims);
  ~FftGrid3d();
  FftGrid3d(const FftGrid3d&) = delete;
  FftGrid3d& operator=(const FftGrid3d&) = delete;

  const std::array<int, 3>& dims() const { return dims_; }
  int size() const { return n_; }

  void forward(const cdouble* in, cdouble* out) const;  // sum_x in[x] e^{-iG.x}
  void backward(const cdouble* in, cdouble* out) const; // sum_G in[G] e^{+iG.x}

private:
  std::array<int, 3> dims_;
  int n_;
  void* plan_fwd_;
  void* plan_bwd_;
  cdouble* buf_in_;
  cdouble* buf_out_;
};

} // namespace ekdft
