#include "bloop/surgery.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace bloop {

namespace {

void require_same_dim(const ParamVector& a, const ParamVector& b, const char* op) {
  if (a.size() != b.size()) {
    throw ContractViolation(std::string(op) + ": dimension mismatch");
  }
}

void require_nonneg(double lambda, const char* op) {
  if (!(lambda >= 0.0)) {
    throw ContractViolation(std::string(op) + ": lambda must be >= 0, got " +
                            std::to_string(lambda));
  }
}

double clamp01(double x) { return std::clamp(x, 0.0, 1.0); }

}  // namespace

ParamVector bloop_direction_fullbatch(const ParamVector& g_main,
                                      const ParamVector& g_aux, double lambda) {
  require_same_dim(g_main, g_aux, "bloop_direction_fullbatch");
  require_nonneg(lambda, "bloop_direction_fullbatch");
  if (lambda == 0.0) {
    return g_main;
  }
  if (g_main.norm() <= norm_floor(g_aux.norm())) {
    // No main gradient left to protect; descend on the auxiliary loss alone.
    return scale(lambda, g_aux);
  }
  return axpy(lambda, project_orth(g_aux, g_main), g_main);
}

ParamVector bloop_direction_stochastic(const DirectionContext& ctx,
                                       const SurgerySpec& spec,
                                       bool* used_fallback) {
  require_same_dim(ctx.g_main_batch, ctx.g_aux_batch, "bloop_direction_stochastic");
  require_nonneg(spec.lambda, "bloop_direction_stochastic");
  if (used_fallback != nullptr) {
    *used_fallback = false;
  }
  if (spec.lambda == 0.0) {
    return ctx.g_main_batch;
  }
  if (ctx.ema == nullptr || !ctx.ema->bootstrapped) {
    throw ContractViolation(
        "bloop_direction_stochastic: EMA missing or not bootstrapped");
  }
  if (ctx.ema->value.size() != ctx.g_main_batch.size()) {
    throw ContractViolation("bloop_direction_stochastic: EMA dimension mismatch");
  }
  if (ctx.ema->value.norm() <= norm_floor(ctx.g_aux_batch.norm())) {
    if (used_fallback != nullptr) {
      *used_fallback = true;
    }
    switch (spec.degenerate_fallback) {
      case DegenerateFallback::MixedDirection:
        return axpy(spec.lambda, ctx.g_aux_batch, ctx.g_main_batch);
      case DegenerateFallback::AuxOnly:
        return scale(spec.lambda, ctx.g_aux_batch);
    }
  }
  return axpy(spec.lambda, project_orth(ctx.g_aux_batch, ctx.ema->value),
              ctx.g_main_batch);
}

ParamVector trilevel_direction(const ParamVector& g_main,
                               const ParamVector& g_aux1,
                               const ParamVector& g_aux2, double lambda1,
                               double lambda2) {
  require_same_dim(g_main, g_aux1, "trilevel_direction");
  require_same_dim(g_main, g_aux2, "trilevel_direction");
  require_nonneg(lambda1, "trilevel_direction");
  require_nonneg(lambda2, "trilevel_direction");
  if (lambda2 == 0.0) {
    return bloop_direction_fullbatch(g_main, g_aux1, lambda1);
  }
  const double scale_ref = std::max(g_aux1.norm(), g_aux2.norm());
  if (g_main.norm() <= norm_floor(scale_ref)) {
    // Main gradient gone: drop one level, with g_aux1 promoted to the role of
    // the protected gradient.
    if (lambda1 == 0.0 || g_aux1.norm() <= norm_floor(g_aux2.norm())) {
      return scale(lambda2, g_aux2);
    }
    return axpy(lambda2, project_orth(g_aux2, g_aux1), scale(lambda1, g_aux1));
  }
  ParamVector d = bloop_direction_fullbatch(g_main, g_aux1, lambda1);
  d += lambda2 * project_orth_span2(g_aux2, g_main, g_aux1);
  return d;
}

ParamVector mixed_direction(const ParamVector& g_main, const ParamVector& g_aux,
                            double lambda) {
  require_same_dim(g_main, g_aux, "mixed_direction");
  require_nonneg(lambda, "mixed_direction");
  return axpy(lambda, g_aux, g_main);
}

ParamVector dynamic_barrier_direction(const ParamVector& g_main,
                                      const ParamVector& g_aux, double lambda,
                                      bool* used_fallback) {
  require_same_dim(g_main, g_aux, "dynamic_barrier_direction");
  require_nonneg(lambda, "dynamic_barrier_direction");
  if (used_fallback != nullptr) {
    *used_fallback = false;
  }
  if (g_main.norm() <= norm_floor(g_aux.norm())) {
    if (used_fallback != nullptr) {
      *used_fallback = true;
    }
    return mixed_direction(g_main, g_aux, lambda);
  }
  const double mu =
      std::max(1.0 - lambda * g_main.dot(g_aux) / g_main.squaredNorm(), 0.0);
  return mu * g_main + lambda * g_aux;
}

ParamVector pcgrad_direction(const ParamVector& g_main, const ParamVector& g_aux,
                             double lambda, bool* used_fallback) {
  require_same_dim(g_main, g_aux, "pcgrad_direction");
  require_nonneg(lambda, "pcgrad_direction");
  if (used_fallback != nullptr) {
    *used_fallback = false;
  }
  const double c = g_main.dot(g_aux);
  if (c >= 0.0) {
    // Ties count as aligned, so a zero gradient never triggers a projection.
    return mixed_direction(g_main, g_aux, lambda);
  }
  const double nm = g_main.norm();
  const double na = g_aux.norm();
  if (na <= norm_floor(nm) || nm <= norm_floor(na)) {
    if (used_fallback != nullptr) {
      *used_fallback = true;
    }
    return mixed_direction(g_main, g_aux, lambda);
  }
  return project_orth(g_main, g_aux) + lambda * project_orth(g_aux, g_main);
}

ParamVector agem_direction(const ParamVector& g_main, const ParamVector& g_aux) {
  require_same_dim(g_main, g_aux, "agem_direction");
  const double c = g_main.dot(g_aux);
  if (c >= 0.0) {
    return g_main;
  }
  if (g_aux.norm() <= norm_floor(g_main.norm())) {
    return g_main;
  }
  return g_main - (c / g_aux.squaredNorm()) * g_aux;
}

ParamVector mtlmoo_direction(const ParamVector& g_main, const ParamVector& g_aux) {
  require_same_dim(g_main, g_aux, "mtlmoo_direction");
  const ParamVector seg = g_main - g_aux;
  const double seg_norm = seg.norm();
  if (seg_norm <= norm_floor(std::max(g_main.norm(), g_aux.norm()))) {
    // The gradients coincide; any point of the segment is the same.
    return g_main;
  }
  // Minimizer of ||gamma g_main + (1-gamma) g_aux|| over the segment:
  // gamma* = <g_aux - g_main, g_aux> / ||g_main - g_aux||^2, clamped to [0,1].
  const double gamma = clamp01(-seg.dot(g_aux) / seg.squaredNorm());
  return gamma * g_main + (1.0 - gamma) * g_aux;
}

ParamVector cosine_sim_direction(const ParamVector& g_main,
                                 const ParamVector& g_aux) {
  require_same_dim(g_main, g_aux, "cosine_sim_direction");
  const double nm = g_main.norm();
  const double na = g_aux.norm();
  if (nm <= norm_floor(na) || na <= norm_floor(nm)) {
    return g_main;  // cosine undefined
  }
  const double phi = g_main.dot(g_aux) / (nm * na);
  return g_main + std::max(0.0, phi) * g_aux;
}

GradVacResult gradvac_direction(const ParamVector& g_main,
                                const ParamVector& g_aux, double cos_ema,
                                double beta) {
  require_same_dim(g_main, g_aux, "gradvac_direction");
  if (!(cos_ema > -1.0 && cos_ema < 1.0)) {
    throw ContractViolation("gradvac_direction: cos_ema must lie in (-1, 1)");
  }
  if (!(beta >= 0.0 && beta <= 1.0)) {
    throw ContractViolation("gradvac_direction: beta must lie in [0, 1]");
  }
  const double nm = g_main.norm();
  const double na = g_aux.norm();
  if (nm <= norm_floor(na) || na <= norm_floor(nm)) {
    return GradVacResult{g_main, cos_ema, true};
  }
  const double phi = std::clamp(g_main.dot(g_aux) / (nm * na), -1.0, 1.0);
  ParamVector d;
  if (phi < cos_ema) {
    const double s_phi = std::sqrt(clamp01(1.0 - phi * phi));
    const double s_bar = std::sqrt(clamp01(1.0 - cos_ema * cos_ema));
    const double alpha = nm * (cos_ema * s_phi - phi * s_bar) / (na * s_bar);
    d = g_main + alpha * g_aux;
  } else {
    d = g_main + g_aux;
  }
  const double new_cos_ema = (1.0 - beta) * cos_ema + beta * phi;
  return GradVacResult{std::move(d), new_cos_ema, false};
}

ParamVector metabalance_direction(const ParamVector& g_main,
                                  const ParamVector& g_aux) {
  require_same_dim(g_main, g_aux, "metabalance_direction");
  const double nm = g_main.norm();
  const double na = g_aux.norm();
  if (na <= norm_floor(nm)) {
    return g_main;
  }
  return g_main + (nm / na) * g_aux;
}

DirectionResult compute_direction(const DirectionContext& ctx,
                                  const SurgerySpec& spec) {
  DirectionResult out;
  out.cos_ema = ctx.cos_ema;
  bool fallback = false;
  switch (spec.method) {
    case Method::Bloop:
      out.direction = bloop_direction_stochastic(ctx, spec, &fallback);
      break;
    case Method::Mixed:
      out.direction = mixed_direction(ctx.g_main_batch, ctx.g_aux_batch, spec.lambda);
      break;
    case Method::DynamicBarrier:
      out.direction = dynamic_barrier_direction(ctx.g_main_batch, ctx.g_aux_batch,
                                                spec.lambda, &fallback);
      break;
    case Method::PCGrad:
      out.direction =
          pcgrad_direction(ctx.g_main_batch, ctx.g_aux_batch, spec.lambda, &fallback);
      break;
    case Method::AGem:
      out.direction = agem_direction(ctx.g_main_batch, ctx.g_aux_batch);
      break;
    case Method::MtlMoo:
      out.direction = mtlmoo_direction(ctx.g_main_batch, ctx.g_aux_batch);
      break;
    case Method::CosineSim:
      out.direction = cosine_sim_direction(ctx.g_main_batch, ctx.g_aux_batch);
      break;
    case Method::GradVac: {
      GradVacResult r = gradvac_direction(ctx.g_main_batch, ctx.g_aux_batch,
                                          ctx.cos_ema, spec.gradvac_beta);
      out.direction = std::move(r.direction);
      out.cos_ema = r.cos_ema;
      fallback = r.degenerate_fallback_used;
      break;
    }
    case Method::MetaBalance:
      out.direction = metabalance_direction(ctx.g_main_batch, ctx.g_aux_batch);
      break;
    case Method::MainOnly:
      out.direction = ctx.g_main_batch;
      break;
  }
  out.degenerate_fallback_used = fallback;
  return out;
}

}  // namespace bloop
