#pragma once

#include <stdexcept>
#include <string>

namespace magslam {

// Malformed input files, bad configuration values, violated preconditions
// on user-supplied data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Eigensolver non-convergence, singular innovation covariances, filter
// divergence.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Basis cache missing or built for a different geometry.
class CacheMismatch : public DataError {
 public:
  using DataError::DataError;
};

}  // namespace magslam
