#ifndef BLOOP_VECOPS_HPP
#define BLOOP_VECOPS_HPP

#include <Eigen/Core>

#include "bloop/errors.hpp"

namespace bloop {

// Flat parameter / gradient / direction vector. Dense, double precision.
using ParamVector = Eigen::VectorXd;

// Threshold below which a vector counts as numerically zero for projection
// purposes. Scale-relative: reference_norm is the norm of the vector on the
// other side of the operation, so tiny-but-meaningful gradients near an
// optimum are not misclassified.
double norm_floor(double reference_norm);

// Euclidean inner product. Throws ContractViolation on dimension mismatch.
double dot(const ParamVector& a, const ParamVector& b);

// Euclidean norm.
double norm(const ParamVector& a);

// alpha * a.
ParamVector scale(double alpha, const ParamVector& a);

// y + alpha * x. Throws ContractViolation on dimension mismatch.
ParamVector axpy(double alpha, const ParamVector& x, const ParamVector& y);

// Component of `a` orthogonal to `b`:  a - (<a,b>/<b,b>) b.
// The axis is pre-scaled by its max-abs entry before use, so the result
// depends only on the direction of `b`, bit-for-bit when the axis is a
// (scaled) canonical basis vector. Throws DegenerateProjection when
// ||b|| <= norm_floor(||a||).
ParamVector project_orth(const ParamVector& a, const ParamVector& b);

// Component of `a` orthogonal to span(b1, b2), via Gram-Schmidt on the pair.
// If b2 is numerically contained in span(b1) the span collapses to b1 and no
// error is raised. Throws DegenerateProjection when ||b1|| <= norm_floor(||a||).
ParamVector project_orth_span2(const ParamVector& a, const ParamVector& b1,
                               const ParamVector& b2);

}  // namespace bloop

#endif  // BLOOP_VECOPS_HPP
