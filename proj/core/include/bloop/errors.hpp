#ifndef BLOOP_ERRORS_HPP
#define BLOOP_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace bloop {

// Caller broke a documented precondition (dimension mismatch, bad argument,
// use of an object in an invalid state). These are programming errors, not
// runtime conditions, hence logic_error.
class ContractViolation : public std::logic_error {
 public:
  explicit ContractViolation(const std::string& msg) : std::logic_error(msg) {}
};

// The projection axis is numerically zero; the caller decides the fallback.
class DegenerateProjection : public std::runtime_error {
 public:
  explicit DegenerateProjection(const std::string& msg) : std::runtime_error(msg) {}
};

// A direction with NaN/Inf entries reached the optimizer. Training runs abort
// with a diagnostic when they see this.
class NonFiniteDirection : public std::runtime_error {
 public:
  explicit NonFiniteDirection(const std::string& msg) : std::runtime_error(msg) {}
};

// A reference-solution solve failed (e.g. rank-deficient normal equations).
class OracleFailure : public std::runtime_error {
 public:
  explicit OracleFailure(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace bloop

#endif  // BLOOP_ERRORS_HPP
