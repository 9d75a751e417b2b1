#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace lcae {

using Eigen::Index;

/// Dense 2-D plane of scalars, row-major: row y is contiguous memory.
template <class Scalar>
using Plane = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Single-channel grayscale image, H×W intensities.
template <class Scalar>
using Image = Plane<Scalar>;

/// Per-pixel binary prediction/label, entries in {0,1}.
using Mask = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Error taxonomy. The CLI maps each class to a distinct exit code.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Shape or size contract violated (mismatched maps, image smaller than an operator).
struct DimensionError : Error {
  using Error::Error;
};

/// Input data invalid (non-finite pixels, undecodable file contents).
struct InputError : Error {
  using Error::Error;
};

/// Configuration invalid (bad hyperparameters, impossible generator spec).
struct ConfigError : Error {
  using Error::Error;
};

/// Filesystem failure (missing path, unwritable output).
struct IoError : Error {
  using Error::Error;
};

/// Numerical failure at runtime (non-finite loss, diverged state).
struct NumericError : Error {
  using Error::Error;
};

/// Object used outside its valid lifecycle (e.g. replaying a consumed tape).
struct StateError : Error {
  using Error::Error;
};

template <class Scalar>
bool all_finite(const Plane<Scalar>& p) {
  return p.array().isFinite().all();
}

}  // namespace lcae
