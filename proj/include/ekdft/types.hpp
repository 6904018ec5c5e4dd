#pragma once

#include <complex>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace ekdft {

using cdouble = std::complex<double>;
using Vec3 = Eigen::Vector3d;
using IVec3 = Eigen::Vector3i;

/// One complex matrix per k-point. Used both for coefficient blocks
/// (rows = plane waves, columns = orbitals) and for square matrices in
/// orbital space (Gram blocks, pseudo-eigenvalue blocks, ...).
using BlockMatrix = std::vector<Eigen::MatrixXcd>;

constexpr double hartree_to_ry = 2.0;

class Error : public std::runtime_error {
public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class InvalidCellError : public Error {
public:
  using Error::Error;
};

class ShapeError : public Error {
public:
  using Error::Error;
};

class EmptyBasisError : public Error {
public:
  using Error::Error;
};

/// A root/bracket search failed (e.g. chemical potential not bracketed).
class NoSolutionError : public Error {
public:
  using Error::Error;
};

/// Constraint cannot be met for structural reasons (bad electron count, ...).
class InfeasibleError : public Error {
public:
  using Error::Error;
};

class InvalidMatrixError : public Error {
public:
  using Error::Error;
};

/// All states are far from the chemical potential on the smearing scale:
/// occupation derivatives underflow and eta-gradients are meaningless.
class FlatOccupationError : public Error {
public:
  using Error::Error;
};

class ConfigError : public Error {
public:
  using Error::Error;
};

/// The step-size estimator's denominator vanished: both directional
/// derivatives are zero, which only happens once the gradients are zero.
class EstimatorUndefinedError : public Error {
public:
  using Error::Error;
};

} // namespace ekdft
