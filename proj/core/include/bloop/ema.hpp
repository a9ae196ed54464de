#ifndef BLOOP_EMA_HPP
#define BLOOP_EMA_HPP

#include "bloop/vecops.hpp"

namespace bloop {

// Exponential moving average of mini-batch main gradients. The first update
// copies the batch gradient verbatim (bootstrap, equivalent to rho = 1 on
// that step, no bias correction); later updates apply
//   value <- (1 - rho) * value + rho * g_batch.
struct EmaState {
  ParamVector value;
  double rho = 0.0;
  bool bootstrapped = false;

  // rho must lie in [0, 1]; dim >= 1.
  EmaState(Eigen::Index dim, double rho);

  void update(const ParamVector& g_batch);
};

}  // namespace bloop

#endif  // BLOOP_EMA_HPP
