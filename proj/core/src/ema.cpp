#include "bloop/ema.hpp"

#include <string>

namespace bloop {

EmaState::EmaState(Eigen::Index dim, double rho_in) : rho(rho_in) {
  if (dim < 1) {
    throw ContractViolation("EmaState: dim must be >= 1");
  }
  if (!(rho >= 0.0 && rho <= 1.0)) {
    throw ContractViolation("EmaState: rho must lie in [0, 1], got " +
                            std::to_string(rho_in));
  }
  value = ParamVector::Zero(dim);
}

void EmaState::update(const ParamVector& g_batch) {
  if (g_batch.size() != value.size()) {
    throw ContractViolation("EmaState::update: dimension mismatch");
  }
  if (!bootstrapped) {
    value = g_batch;
    bootstrapped = true;
    return;
  }
  value = (1.0 - rho) * value + rho * g_batch;
}

}  // namespace bloop
