#ifndef BLOOP_SURGERY_HPP
#define BLOOP_SURGERY_HPP

#include "bloop/ema.hpp"
#include "bloop/vecops.hpp"

namespace bloop {

// Update-direction rules for training a main loss with an auxiliary loss.
// All of them consume the two (mini-batch) gradients; Bloop additionally
// consumes an EMA of past main gradients, GradVac an EMA of past cosines.
enum class Method {
  Bloop,
  Mixed,
  DynamicBarrier,
  PCGrad,
  AGem,
  MtlMoo,
  CosineSim,
  GradVac,
  MetaBalance,
  MainOnly,
};

// What Bloop does when the projection axis (the main-gradient EMA) is
// numerically zero.
enum class DegenerateFallback {
  MixedDirection,  // g_main + lambda * g_aux
  AuxOnly,         // lambda * g_aux
};

struct SurgerySpec {
  Method method = Method::Bloop;
  double lambda = 1.0;        // weight on the auxiliary-derived term
  double rho = 0.01;          // Bloop: EMA coefficient for the projection axis
  double gradvac_beta = 0.01; // GradVac: EMA coefficient for the target cosine
  DegenerateFallback degenerate_fallback = DegenerateFallback::MixedDirection;
};

// Per-step inputs for compute_direction. `ema` is required by Bloop (and must
// be bootstrapped); `cos_ema` is GradVac's running target cosine.
struct DirectionContext {
  ParamVector g_main_batch;
  ParamVector g_aux_batch;
  const EmaState* ema = nullptr;
  double cos_ema = 0.0;
};

struct DirectionResult {
  ParamVector direction;
  double cos_ema = 0.0;                  // updated GradVac state (pass-through otherwise)
  bool degenerate_fallback_used = false; // a combinator hit a zero-norm guard
};

// d = g_main + lambda * (g_aux - <g_aux,g_main>/||g_main||^2 * g_main).
// Keeps the full main gradient and only the part of g_aux that does not fight
// it: <d, g_main> = ||g_main||^2. When ||g_main|| is numerically zero the
// whole of g_aux is kept: d = lambda * g_aux.
ParamVector bloop_direction_fullbatch(const ParamVector& g_main,
                                      const ParamVector& g_aux, double lambda);

// Mini-batch variant: the projection axis is the EMA of past main batch
// gradients, not the current draw (projecting on the noisy draw itself biases
// the mean direction toward the plain mixed update). `used_fallback`, when
// non-null, reports whether the degenerate-axis fallback fired.
ParamVector bloop_direction_stochastic(const DirectionContext& ctx,
                                       const SurgerySpec& spec,
                                       bool* used_fallback = nullptr);

// Three-level extension: the second auxiliary gradient is projected out of
// the span of the first two vectors, so it can disturb neither of them.
ParamVector trilevel_direction(const ParamVector& g_main,
                               const ParamVector& g_aux1,
                               const ParamVector& g_aux2, double lambda1,
                               double lambda2);

// d = g_main + lambda * g_aux (plain weighted sum).
ParamVector mixed_direction(const ParamVector& g_main, const ParamVector& g_aux,
                            double lambda);

// d = mu * g_main + lambda * g_aux with mu = max(1 - lambda <g_m,g_a>/||g_m||^2, 0).
ParamVector dynamic_barrier_direction(const ParamVector& g_main,
                                      const ParamVector& g_aux, double lambda,
                                      bool* used_fallback = nullptr);

// Aligned gradients are summed; conflicting ones are mutually projected onto
// each other's orthogonal complement first. Zero inner product counts as
// aligned.
ParamVector pcgrad_direction(const ParamVector& g_main, const ParamVector& g_aux,
                             double lambda, bool* used_fallback = nullptr);

// g_main, minus the conflicting component of g_main along g_aux if there is
// one: d = g_main - min(0, <g_m,g_a>)/||g_a||^2 * g_aux.
ParamVector agem_direction(const ParamVector& g_main, const ParamVector& g_aux);

// Min-norm point of the segment [g_main, g_aux], with the segment parameter
// clamped to [0, 1] so the output stays in the convex hull of the inputs.
ParamVector mtlmoo_direction(const ParamVector& g_main, const ParamVector& g_aux);

// d = g_main + max(0, cos(g_main, g_aux)) * g_aux.
ParamVector cosine_sim_direction(const ParamVector& g_main,
                                 const ParamVector& g_aux);

struct GradVacResult {
  ParamVector direction;
  double cos_ema = 0.0;
  bool degenerate_fallback_used = false;
};

// Pulls the cosine between the gradients up to a running EMA target phi_bar:
// when cos(g_m, g_a) = phi < phi_bar,
//   d = g_main + alpha * g_aux,
//   alpha = ||g_m|| (phi_bar sqrt(1-phi^2) - phi sqrt(1-phi_bar^2))
//           / (||g_a|| sqrt(1-phi_bar^2)),
// otherwise d = g_main + g_aux. The target is then updated:
// phi_bar <- (1-beta) phi_bar + beta phi. Requires phi_bar in (-1, 1).
GradVacResult gradvac_direction(const ParamVector& g_main,
                                const ParamVector& g_aux, double cos_ema,
                                double beta);

// d = g_main + (||g_main||/||g_aux||) * g_aux (aux term rescaled to the main
// gradient's norm).
ParamVector metabalance_direction(const ParamVector& g_main,
                                  const ParamVector& g_aux);

// Dispatch on spec.method. Methods without a lambda in their rule (A-GEM,
// MTL-MOO, CosineSim, GradVac, MetaBalance, MainOnly) ignore spec.lambda.
DirectionResult compute_direction(const DirectionContext& ctx,
                                  const SurgerySpec& spec);

}  // namespace bloop

#endif  // BLOOP_SURGERY_HPP
