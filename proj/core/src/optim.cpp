#include "bloop/optim.hpp"

#include <cmath>
#include <string>

namespace bloop {

Optimizer Optimizer::sgd(double eta, LrSchedule schedule) {
  Optimizer o;
  o.kind = OptimizerKind::Sgd;
  o.schedule = schedule;
  o.eta = eta;
  return o;
}

Optimizer Optimizer::sgd_momentum(double eta, double momentum, LrSchedule schedule) {
  Optimizer o;
  o.kind = OptimizerKind::SgdMomentum;
  o.schedule = schedule;
  o.eta = eta;
  o.momentum = momentum;
  return o;
}

Optimizer Optimizer::adam(double eta, double beta1, double beta2, double eps,
                          LrSchedule schedule) {
  Optimizer o;
  o.kind = OptimizerKind::Adam;
  o.schedule = schedule;
  o.eta = eta;
  o.beta1 = beta1;
  o.beta2 = beta2;
  o.eps = eps;
  return o;
}

double Optimizer::current_eta() const {
  switch (schedule) {
    case LrSchedule::Constant:
      return eta;
    case LrSchedule::InverseThreeQuarters:
      return eta * std::pow(static_cast<double>(step_count) + 1.0, -0.75);
  }
  return eta;
}

void Optimizer::step(const ParamVector& d, ParamVector& theta) {
  if (d.size() != theta.size()) {
    throw ContractViolation("Optimizer::step: dimension mismatch");
  }
  if (!d.allFinite()) {
    throw NonFiniteDirection("Optimizer::step: direction has NaN/Inf at step " +
                             std::to_string(step_count));
  }
  const double eta_t = current_eta();
  switch (kind) {
    case OptimizerKind::Sgd:
      theta -= eta_t * d;
      break;
    case OptimizerKind::SgdMomentum: {
      if (m.size() == 0) {
        m = ParamVector::Zero(theta.size());
      }
      m = momentum * m + d;
      theta -= eta_t * m;
      break;
    }
    case OptimizerKind::Adam: {
      if (m.size() == 0) {
        m = ParamVector::Zero(theta.size());
        v = ParamVector::Zero(theta.size());
      }
      const double t = static_cast<double>(step_count) + 1.0;  // 1-based
      m = beta1 * m + (1.0 - beta1) * d;
      v = beta2 * v + (1.0 - beta2) * d.cwiseProduct(d);
      const double mc = 1.0 - std::pow(beta1, t);
      const double vc = 1.0 - std::pow(beta2, t);
      theta -= eta_t *
               ((m / mc).array() / ((v / vc).array().sqrt() + eps)).matrix();
      break;
    }
  }
  ++step_count;
}

}  // namespace bloop
