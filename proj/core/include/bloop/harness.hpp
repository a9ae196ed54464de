#ifndef BLOOP_HARNESS_HPP
#define BLOOP_HARNESS_HPP

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "bloop/optim.hpp"
#include "bloop/problems.hpp"
#include "bloop/surgery.hpp"

namespace bloop {

// ---------------------------------------------------------------------------
// run configuration

enum class InitKind { Zeros, Ones, Gaussian, Explicit };

struct InitSpec {
  InitKind kind = InitKind::Zeros;
  double gaussian_scale = 1.0;   // Gaussian only
  ParamVector explicit_theta;    // Explicit only

  static InitSpec zeros();
  static InitSpec ones();
  static InitSpec gaussian(double scale = 1.0);
  static InitSpec explicit_theta_at(ParamVector theta);
};

// Materializes theta_0. Gaussian draws come from the run RNG (before any
// training-step draws), so the whole run remains a function of the seed.
ParamVector make_initial_theta(const InitSpec& init, Eigen::Index dim,
                               RunRng& rng);

struct RunConfig {
  SurgerySpec surgery;
  Optimizer optimizer = Optimizer::sgd(0.1);  // template, copied per run
  long iterations = 100;                      // steps to execute
  std::uint64_t seed = 0;
  long log_every = 10;
  bool record_reference_distances = true;
  InitSpec init;
};

// ---------------------------------------------------------------------------
// run output

struct LogRow {
  long step = 0;                // completed optimizer steps at this row
  double loss_main = 0.0;
  double loss_aux = 0.0;
  double grad_main_norm = 0.0;  // full-batch, evaluated at log points only
  double grad_aux_norm = 0.0;
  double cos_main_aux = 0.0;    // 0 when either gradient is numerically zero
  double ema_error = 0.0;       // ||ema - grad_main||; 0 at step 0 and for
                                // methods that keep no gradient EMA
  double dist_to_reference =
      std::numeric_limits<double>::quiet_NaN();  // NaN when no reference
  double wall_ms = 0.0;  // elapsed time; diagnostic only, never serialized
};

struct RunLog {
  std::vector<LogRow> rows;

  bool failed = false;
  long failed_step = -1;
  std::string failure_reason;

  // Run-level empirical constants: the largest direction norm seen on any
  // step, the largest probed main-gradient noise variance at a log point
  // (mean squared deviation of fresh batch draws from the full-batch
  // gradient, drawn from a side RNG so the trajectory is untouched), and the
  // largest full-batch auxiliary gradient norm at a log point.
  double max_direction_norm = 0.0;
  double max_grad_noise_sq = 0.0;
  double max_aux_grad_norm = 0.0;

  // Bloop diagnostics: mean of ema_error over log rows with step >= 1, and
  // mean cosine between the realized direction and the same-batch mixed
  // direction g_main + lambda * g_aux over all steps. NaN for other methods.
  double mean_ema_error = std::numeric_limits<double>::quiet_NaN();
  double mean_cos_bloop_mixed = std::numeric_limits<double>::quiet_NaN();

  long degenerate_fallbacks = 0;
  ParamVector final_theta;
  bool has_reference = false;
};

// Executes `iterations` optimizer steps: sample both batch gradients, form
// the direction (Bloop projects on the EMA from the previous step; the EMA is
// bootstrapped from the first sampled batch gradient before the first
// direction), apply the optimizer update, then fold the sampled main gradient
// into the EMA. Rows are logged at step 0, every log_every steps, and at the
// final step. A NonFiniteDirection or a non-finite logged metric marks the
// run failed at that step and returns the partial log.
RunLog run_training(const Problem& problem, const RunConfig& cfg);

// ---------------------------------------------------------------------------
// lambda-grid Pareto sweep

struct SweepConfig {
  RunConfig base;                   // lambda and seed are overwritten per run
  std::vector<double> lambda_grid;  // distinct, ascending, all >= 0
  std::vector<std::uint64_t> seeds;
  int parallelism = 1;
};

struct SweepPoint {
  double lambda = 0.0;
  std::uint64_t seed = 0;
  double final_loss_main = 0.0;  // full-batch losses at the final iterate
  double final_loss_aux = 0.0;
  double dist_to_reference = std::numeric_limits<double>::quiet_NaN();
  double max_direction_norm = 0.0;
  double max_grad_noise_sq = 0.0;
  double max_aux_grad_norm = 0.0;
  bool failed = false;
  RunLog log;
};

struct SweepSummaryRow {  // per-lambda means across non-failed seeds
  double lambda = 0.0;
  double mean_final_loss_main = std::numeric_limits<double>::quiet_NaN();
  double mean_final_loss_aux = std::numeric_limits<double>::quiet_NaN();
  double mean_dist_to_reference = std::numeric_limits<double>::quiet_NaN();
  long n_ok = 0;
  long n_failed = 0;
};

struct SweepResult {
  std::vector<SweepPoint> points;        // lambda-major, then seed order
  std::vector<SweepSummaryRow> summary;  // one row per lambda
};

// One run per (lambda, seed) pair. Runs may execute on up to
// cfg.parallelism worker threads; each owns its RNG, optimizer, and EMA, and
// results are stored by task index, so the output is bit-identical at every
// parallelism level. A run that throws is recorded as failed and the sweep
// continues.
SweepResult run_pareto_sweep(const Problem& problem, const SweepConfig& cfg);

// ---------------------------------------------------------------------------
// Monte-Carlo projection-noise demo

struct NoiseDemoRow {
  double sigma = 0.0;
  double dist_to_bloop = 0.0;  // ||E_est[d_simple] - d_bloop||
  double dist_to_mixed = 0.0;  // ||E_est[d_simple] - d_mixed||
  double stderr_norm = 0.0;    // norm of the per-coordinate standard errors
  long n_samples = 0;
};

// For each sigma, Monte-Carlo-estimates the mean of the simple stochastic
// direction g_main + pi(g_aux; g_main + sigma eps) on a fixed random
// (g_main, g_aux) pair and reports its distance to the exact Bloop direction
// and to the mixed-limit direction g_main + (1 - 1/p) g_aux.
// Requires n_samples >= 1000.
std::vector<NoiseDemoRow> run_noise_demo(int p,
                                         const std::vector<double>& sigma_grid,
                                         long n_samples, std::uint64_t seed);

// ---------------------------------------------------------------------------
// two-parameter conditioning demo

struct ConditioningDemoRow {
  std::string method;  // "bloop" or "mixed"
  double lambda = 0.0;
  double theta_a = 0.0;  // final iterate
  double theta_b = 0.0;
  double loss_main = 0.0;
  double loss_aux = 0.0;
};

// Runs Bloop and Mixed side by side on the noiseless two-parameter problem
// from theta_0 = (1, 1) with plain SGD, one pair of rows per lambda: Bloop
// lands on the bilevel solution (the origin) for every lambda, Mixed on the
// regularized point (lambda/(1+lambda), 0).
std::vector<ConditioningDemoRow> run_conditioning_demo(
    const std::vector<double>& lambda_grid, double eta, long steps,
    std::uint64_t seed);

// ---------------------------------------------------------------------------
// step-size / EMA coupling rate check

struct RateCheckConfig {
  int p = 50;
  double mu = 0.1;
  double L = 10.0;
  double sigma = 1.0;
  std::vector<long> T_grid;  // strictly increasing
  int n_seeds = 5;
  std::uint64_t base_seed = 0;
  double eta0 = 1.0;
  double lambda = 1.0;
};

struct RateCheckRow {
  long T = 0;
  std::uint64_t seed = 0;
  double eta = 0.0;               // eta0 * T^(-3/4)
  double rho = 0.0;               // min(1, eta^(2/3))
  double avg_sq_grad_norm = 0.0;  // mean over steps 0..T-1 of ||grad_main||^2
  double final_gap = 0.0;         // loss_main at the final iterate
};

// Stochastic Bloop on the diagonal PL quadratic at the coupled
// eta = eta0 T^(-3/4), rho = eta^(2/3) settings, one row per (T, seed); the
// same seed reuses the same theta_0 across T values so ratios pair up.
std::vector<RateCheckRow> run_rate_check(const RateCheckConfig& cfg);

// ---------------------------------------------------------------------------
// EMA-coefficient ablation

struct EmaAblationRow {
  double rho = 0.0;
  double final_loss_main = 0.0;
  double final_loss_aux = 0.0;
  double mean_ema_error = 0.0;
  double mean_cos_bloop_mixed = 0.0;
};

struct EmaAblationResult {
  std::vector<EmaAblationRow> rows;
  std::vector<RunLog> logs;  // one per rho, same order as rows
};

// One Bloop run per rho with everything else held fixed. Requires
// base.surgery.method == Bloop.
EmaAblationResult run_ema_ablation(const Problem& problem,
                                   const RunConfig& base,
                                   const std::vector<double>& rho_grid);

// ---------------------------------------------------------------------------
// first-order stationarity diagnostics

struct StationarityReport {
  double direction_norm = 0.0;
  double grad_main_norm = 0.0;
  double projection_norm = 0.0;       // ||pi(g_aux; g_main)||
  double decomposition_rel_error = 0.0;
  bool decomposition_ok = false;      // ||d||^2 = ||g_main||^2 +
                                      // lambda^2 ||pi||^2 to 1e-9 relative
  bool degenerate_fallback = false;   // g_main numerically zero at theta
};

// Full-batch direction decomposition at a single point: because the
// projected term is orthogonal to g_main, a small ||d|| certifies both a
// small ||g_main|| and a small lambda ||pi||. In the degenerate branch the
// direction is lambda * g_aux and the decomposition check is skipped.
StationarityReport stationarity_report(const Problem& problem,
                                       const ParamVector& theta, double lambda);

}  // namespace bloop

#endif  // BLOOP_HARNESS_HPP
