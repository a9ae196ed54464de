#ifndef BLOOP_OPTIM_HPP
#define BLOOP_OPTIM_HPP

#include "bloop/vecops.hpp"

namespace bloop {

enum class OptimizerKind { Sgd, SgdMomentum, Adam };

// Learning-rate schedules. InverseThreeQuarters decays the base rate as
// eta_t = eta0 * (t+1)^(-3/4), which pairs with an EMA coefficient of
// eta^(2/3) in long-horizon runs.
enum class LrSchedule { Constant, InverseThreeQuarters };

// First-order update rule consuming a precomputed direction d (not the raw
// gradient):
//   Sgd:         theta <- theta - eta_t d
//   SgdMomentum: buf <- momentum * buf + d;  theta <- theta - eta_t buf
//   Adam:        bias-corrected first/second moments of d, per-coordinate step
// Moment buffers are lazily sized on the first step. All updates are
// elementwise and deterministic: identical (direction, state) sequences give
// bit-identical parameter trajectories.
struct Optimizer {
  OptimizerKind kind = OptimizerKind::Sgd;
  LrSchedule schedule = LrSchedule::Constant;
  double eta = 0.01;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step_count = 0;
  ParamVector m;  // momentum buffer / Adam first moment
  ParamVector v;  // Adam second moment

  static Optimizer sgd(double eta, LrSchedule schedule = LrSchedule::Constant);
  static Optimizer sgd_momentum(double eta, double momentum,
                                LrSchedule schedule = LrSchedule::Constant);
  static Optimizer adam(double eta, double beta1 = 0.9, double beta2 = 0.999,
                        double eps = 1e-8,
                        LrSchedule schedule = LrSchedule::Constant);

  // Effective learning rate for the step about to be taken (step index =
  // step_count, zero-based).
  double current_eta() const;

  // Applies one update in place. Throws NonFiniteDirection if d contains
  // NaN/Inf, ContractViolation on dimension mismatch. step_count increments
  // by exactly one per call.
  void step(const ParamVector& d, ParamVector& theta);
};

}  // namespace bloop

#endif  // BLOOP_OPTIM_HPP
