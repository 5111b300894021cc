#pragma once

#include <Eigen/Core>
#include <stdexcept>
#include <string>

namespace qslam {

using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat3 = Eigen::Matrix3d;
using Mat6 = Eigen::Matrix<double, 6, 6>;
using Mat63 = Eigen::Matrix<double, 6, 3>;

enum class ErrorKind {
  InvalidInput,       // caller violated an operation precondition
  DataError,          // bad files, schema violations, id mismatches
  NumericalFailure,   // solver non-convergence, divergence
  ContractViolation,  // internal shape/state inconsistency
};

/// Library-wide exception; the CLI maps ErrorKind to exit codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void raise(ErrorKind kind, const std::string& msg) {
  throw Error(kind, msg);
}

inline void require(bool cond, ErrorKind kind, const std::string& msg) {
  if (!cond) raise(kind, msg);
}

}  // namespace qslam
