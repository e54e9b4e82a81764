#pragma once

#include <stdexcept>
#include <string>

namespace iclgd {

// Shape or argument mismatch detected before any arithmetic.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// An internal identity check failed; carries the measured residual.
class NumericalFault : public std::runtime_error {
 public:
  NumericalFault(const std::string& what, double residual)
      : std::runtime_error(what + " (residual " + std::to_string(residual) + ")"),
        residual_(residual) {}

  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

// Iterative kernel hit its sweep cap.
class ConvergenceError : public NumericalFault {
 public:
  using NumericalFault::NumericalFault;
};

}  // namespace iclgd
