#include "bloop/vecops.hpp"

#include <algorithm>
#include <string>

namespace bloop {

namespace {

void require_same_dim(const ParamVector& a, const ParamVector& b, const char* op) {
  if (a.size() != b.size()) {
    throw ContractViolation(std::string(op) + ": dimension mismatch (" +
                            std::to_string(a.size()) + " vs " +
                            std::to_string(b.size()) + ")");
  }
}

}  // namespace

double norm_floor(double reference_norm) {
  return 1e-12 * std::max(1.0, reference_norm);
}

double dot(const ParamVector& a, const ParamVector& b) {
  require_same_dim(a, b, "dot");
  return a.dot(b);
}

double norm(const ParamVector& a) { return a.norm(); }

ParamVector scale(double alpha, const ParamVector& a) { return alpha * a; }

ParamVector axpy(double alpha, const ParamVector& x, const ParamVector& y) {
  require_same_dim(x, y, "axpy");
  return y + alpha * x;
}

ParamVector project_orth(const ParamVector& a, const ParamVector& b) {
  require_same_dim(a, b, "project_orth");
  if (b.norm() <= norm_floor(a.norm())) {
    throw DegenerateProjection("project_orth: axis norm below floor");
  }
  // Scale the axis by its max-abs entry. This changes nothing mathematically
  // (the projector depends only on the direction of b) but keeps the
  // computation invariant to the magnitude of b, exactly so when the axis is
  // a multiple of a canonical basis vector.
  const double b_inf = b.cwiseAbs().maxCoeff();
  const ParamVector axis = b / b_inf;
  const double coef = a.dot(axis) / axis.squaredNorm();
  return a - coef * axis;
}

ParamVector project_orth_span2(const ParamVector& a, const ParamVector& b1,
                               const ParamVector& b2) {
  require_same_dim(a, b1, "project_orth_span2");
  require_same_dim(a, b2, "project_orth_span2");
  if (b1.norm() <= norm_floor(a.norm())) {
    throw DegenerateProjection("project_orth_span2: first axis norm below floor");
  }
  const ParamVector out1 = project_orth(a, b1);
  // Residual of b2 after removing its b1 component. If it vanishes, b2 adds
  // nothing to the span.
  ParamVector residual;
  if (b2.norm() <= norm_floor(b1.norm())) {
    return out1;
  }
  residual = project_orth(b2, b1);
  if (residual.norm() <= norm_floor(a.norm())) {
    return out1;
  }
  return project_orth(out1, residual);
}

}  // namespace bloop
