#pragma once

#include <stdexcept>
#include <string>

namespace parkpredict {

/// Bad or inconsistent input data: malformed files, shape mismatches, violated record invariants.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or matrix dimensions that do not line up.
class ShapeError : public DataError {
 public:
  using DataError::DataError;
};

/// A record failed a named invariant check (used by the service for 422 responses).
class ValidationError : public DataError {
 public:
  ValidationError(std::string invariant, const std::string& detail)
      : DataError(invariant + ": " + detail), invariant_(std::move(invariant)) {}

  const std::string& invariant() const { return invariant_; }

 private:
  std::string invariant_;
};

/// The path planner could not connect the start pose to the requested spot.
class InfeasiblePathError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace parkpredict
