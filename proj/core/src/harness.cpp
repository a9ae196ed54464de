#include "bloop/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <thread>
#include <utility>

namespace bloop {

namespace {

// Batch draws per log point when probing the main-gradient noise level.
constexpr int kNoiseProbeDraws = 4;

double cosine_or_zero(const ParamVector& a, const ParamVector& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) {
    return 0.0;
  }
  return a.dot(b) / (na * nb);
}

double elapsed_ms(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now() - start)
      .count();
}

}  // namespace

// ---------------------------------------------------------------------------
// initialization

InitSpec InitSpec::zeros() { return {}; }

InitSpec InitSpec::ones() {
  InitSpec s;
  s.kind = InitKind::Ones;
  return s;
}

InitSpec InitSpec::gaussian(double scale) {
  InitSpec s;
  s.kind = InitKind::Gaussian;
  s.gaussian_scale = scale;
  return s;
}

InitSpec InitSpec::explicit_theta_at(ParamVector theta) {
  InitSpec s;
  s.kind = InitKind::Explicit;
  s.explicit_theta = std::move(theta);
  return s;
}

ParamVector make_initial_theta(const InitSpec& init, Eigen::Index dim,
                               RunRng& rng) {
  switch (init.kind) {
    case InitKind::Zeros:
      return ParamVector::Zero(dim);
    case InitKind::Ones:
      return ParamVector::Ones(dim);
    case InitKind::Gaussian:
      return init.gaussian_scale * draw_normal_vector(rng, dim);
    case InitKind::Explicit:
      if (init.explicit_theta.size() != dim) {
        throw ContractViolation(
            "make_initial_theta: explicit theta dimension mismatch");
      }
      return init.explicit_theta;
  }
  throw ContractViolation("make_initial_theta: unknown init kind");
}

// ---------------------------------------------------------------------------
// single training run

RunLog run_training(const Problem& problem, const RunConfig& cfg) {
  if (cfg.iterations < 1) {
    throw ContractViolation("run_training: iterations must be >= 1");
  }
  if (cfg.log_every < 1) {
    throw ContractViolation("run_training: log_every must be >= 1");
  }
  if (cfg.surgery.lambda < 0.0) {
    throw ContractViolation("run_training: lambda must be >= 0");
  }

  const bool is_bloop = cfg.surgery.method == Method::Bloop;
  RunRng rng(mix_seed(cfg.seed));
  // Side stream for the noise probes at log points, so the diagnostics never
  // perturb the training trajectory.
  RunRng probe_rng(mix_seed(cfg.seed, 0x6e6f6973u));

  ParamVector theta = make_initial_theta(cfg.init, problem.dim(), rng);
  Optimizer opt = cfg.optimizer;
  opt.step_count = 0;
  opt.m.resize(0);
  opt.v.resize(0);
  EmaState ema(problem.dim(), cfg.surgery.rho);
  double gradvac_cos = 0.0;

  RunLog log;
  log.has_reference = problem.reference().bilevel_solution.has_value();
  const auto t_start = std::chrono::steady_clock::now();

  double ema_error_sum = 0.0;
  long ema_error_count = 0;
  double dir_cos_sum = 0.0;
  long dir_cos_count = 0;

  // Appends a row of full-batch diagnostics; returns false (and marks the
  // run failed) if any recorded metric is non-finite.
  const auto log_row = [&](long step) -> bool {
    LogRow row;
    row.step = step;
    row.loss_main = problem.loss_main(theta);
    row.loss_aux = problem.loss_aux(theta);
    const ParamVector gm = problem.grad_main(theta);
    const ParamVector ga = problem.grad_aux(theta);
    row.grad_main_norm = gm.norm();
    row.grad_aux_norm = ga.norm();
    row.cos_main_aux = cosine_or_zero(gm, ga);
    if (is_bloop && ema.bootstrapped) {
      row.ema_error = (ema.value - gm).norm();
      ema_error_sum += row.ema_error;
      ++ema_error_count;
    }
    if (log.has_reference && cfg.record_reference_distances) {
      row.dist_to_reference =
          (theta - *problem.reference().bilevel_solution).norm();
    }
    double noise_sq = 0.0;
    for (int k = 0; k < kNoiseProbeDraws; ++k) {
      noise_sq += (problem.stoch_grad_main(theta, probe_rng) - gm).squaredNorm();
    }
    noise_sq /= kNoiseProbeDraws;
    log.max_grad_noise_sq = std::max(log.max_grad_noise_sq, noise_sq);
    log.max_aux_grad_norm = std::max(log.max_aux_grad_norm, row.grad_aux_norm);
    row.wall_ms = elapsed_ms(t_start);
    log.rows.push_back(row);

    const bool finite =
        std::isfinite(row.loss_main) && std::isfinite(row.loss_aux) &&
        std::isfinite(row.grad_main_norm) && std::isfinite(row.grad_aux_norm) &&
        std::isfinite(row.cos_main_aux) && std::isfinite(row.ema_error) &&
        (!(log.has_reference && cfg.record_reference_distances) ||
         std::isfinite(row.dist_to_reference));
    if (!finite) {
      log.failed = true;
      log.failed_step = step;
      log.failure_reason = "non-finite metric at log point";
    }
    return finite;
  };

  if (log_row(0)) {
    for (long t = 0; t < cfg.iterations; ++t) {
      DirectionContext ctx;
      ctx.g_main_batch = problem.stoch_grad_main(theta, rng);
      ctx.g_aux_batch = problem.stoch_grad_aux(theta, rng);
      if (is_bloop && !ema.bootstrapped) {
        // First step only: the projection axis starts from the first sampled
        // batch gradient rather than from zero.
        ema.update(ctx.g_main_batch);
      }
      ctx.ema = &ema;
      ctx.cos_ema = gradvac_cos;
      const DirectionResult res = compute_direction(ctx, cfg.surgery);
      gradvac_cos = res.cos_ema;
      log.max_direction_norm =
          std::max(log.max_direction_norm, res.direction.norm());
      if (res.degenerate_fallback_used) {
        ++log.degenerate_fallbacks;
      }
      if (is_bloop) {
        const ParamVector d_mixed =
            ctx.g_main_batch + cfg.surgery.lambda * ctx.g_aux_batch;
        dir_cos_sum += cosine_or_zero(res.direction, d_mixed);
        ++dir_cos_count;
      }
      try {
        opt.step(res.direction, theta);
      } catch (const NonFiniteDirection& e) {
        log.failed = true;
        log.failed_step = t;
        log.failure_reason = e.what();
        break;
      }
      if (is_bloop) {
        ema.update(ctx.g_main_batch);
      }
      const long done = t + 1;
      if (done == cfg.iterations || done % cfg.log_every == 0) {
        if (!log_row(done)) {
          break;
        }
      }
    }
  }

  log.final_theta = theta;
  if (is_bloop) {
    log.mean_ema_error =
        ema_error_count > 0 ? ema_error_sum / ema_error_count : 0.0;
    log.mean_cos_bloop_mixed =
        dir_cos_count > 0 ? dir_cos_sum / dir_cos_count : 0.0;
  }
  return log;
}

// ---------------------------------------------------------------------------
// Pareto sweep

SweepResult run_pareto_sweep(const Problem& problem, const SweepConfig& cfg) {
  if (cfg.lambda_grid.empty()) {
    throw ContractViolation("run_pareto_sweep: empty lambda grid");
  }
  for (std::size_t i = 0; i < cfg.lambda_grid.size(); ++i) {
    if (cfg.lambda_grid[i] < 0.0) {
      throw ContractViolation("run_pareto_sweep: lambda values must be >= 0");
    }
    if (i > 0 && !(cfg.lambda_grid[i - 1] < cfg.lambda_grid[i])) {
      throw ContractViolation(
          "run_pareto_sweep: lambda grid must be distinct and ascending");
    }
  }
  if (cfg.seeds.empty()) {
    throw ContractViolation("run_pareto_sweep: empty seed list");
  }
  if (cfg.parallelism < 1) {
    throw ContractViolation("run_pareto_sweep: parallelism must be >= 1");
  }

  struct Task {
    double lambda;
    std::uint64_t seed;
  };
  std::vector<Task> tasks;
  tasks.reserve(cfg.lambda_grid.size() * cfg.seeds.size());
  for (double lambda : cfg.lambda_grid) {
    for (std::uint64_t seed : cfg.seeds) {
      tasks.push_back({lambda, seed});
    }
  }

  std::vector<SweepPoint> points(tasks.size());
  const bool want_dist = problem.reference().bilevel_solution.has_value();

  const auto run_task = [&](std::size_t i) {
    const Task& task = tasks[i];
    SweepPoint pt;
    pt.lambda = task.lambda;
    pt.seed = task.seed;
    try {
      RunConfig rc = cfg.base;
      rc.surgery.lambda = task.lambda;
      rc.seed = task.seed;
      pt.log = run_training(problem, rc);
      pt.failed = pt.log.failed;
      pt.final_loss_main = problem.loss_main(pt.log.final_theta);
      pt.final_loss_aux = problem.loss_aux(pt.log.final_theta);
      if (want_dist) {
        pt.dist_to_reference =
            (pt.log.final_theta - *problem.reference().bilevel_solution).norm();
      }
      pt.max_direction_norm = pt.log.max_direction_norm;
      pt.max_grad_noise_sq = pt.log.max_grad_noise_sq;
      pt.max_aux_grad_norm = pt.log.max_aux_grad_norm;
    } catch (const std::exception& e) {
      pt.failed = true;
      pt.log.failed = true;
      pt.log.failure_reason = e.what();
    }
    points[i] = std::move(pt);
  };

  const std::size_t n_workers = std::min<std::size_t>(
      static_cast<std::size_t>(cfg.parallelism), tasks.size());
  if (n_workers <= 1) {
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      run_task(i);
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> workers;
    workers.reserve(n_workers);
    for (std::size_t w = 0; w < n_workers; ++w) {
      workers.emplace_back([&] {
        for (;;) {
          const std::size_t i = next.fetch_add(1);
          if (i >= tasks.size()) {
            return;
          }
          run_task(i);
        }
      });
    }
    for (std::thread& worker : workers) {
      worker.join();
    }
  }

  SweepResult result;
  result.points = std::move(points);
  for (std::size_t li = 0; li < cfg.lambda_grid.size(); ++li) {
    SweepSummaryRow row;
    row.lambda = cfg.lambda_grid[li];
    double sum_main = 0.0, sum_aux = 0.0, sum_dist = 0.0;
    for (std::size_t si = 0; si < cfg.seeds.size(); ++si) {
      const SweepPoint& pt = result.points[li * cfg.seeds.size() + si];
      if (pt.failed) {
        ++row.n_failed;
        continue;
      }
      ++row.n_ok;
      sum_main += pt.final_loss_main;
      sum_aux += pt.final_loss_aux;
      sum_dist += pt.dist_to_reference;
    }
    if (row.n_ok > 0) {
      row.mean_final_loss_main = sum_main / row.n_ok;
      row.mean_final_loss_aux = sum_aux / row.n_ok;
      if (want_dist) {
        row.mean_dist_to_reference = sum_dist / row.n_ok;
      }
    }
    result.summary.push_back(row);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Monte-Carlo projection-noise demo

std::vector<NoiseDemoRow> run_noise_demo(int p,
                                         const std::vector<double>& sigma_grid,
                                         long n_samples, std::uint64_t seed) {
  if (sigma_grid.empty()) {
    throw ContractViolation("run_noise_demo: empty sigma grid");
  }
  if (n_samples < 1000) {
    throw ContractViolation("run_noise_demo: need n_samples >= 1000");
  }
  std::vector<NoiseDemoRow> rows;
  rows.reserve(sigma_grid.size());
  for (std::size_t i = 0; i < sigma_grid.size(); ++i) {
    // Same seed for every sigma: the (g_main, g_aux) pair is shared across
    // the grid and only the axis noise varies.
    const NoiseOracle oracle(p, sigma_grid[i], seed);
    RunRng est_rng(mix_seed(seed, 1000 + i));
    const NoiseOracle::Estimate est =
        oracle.estimate_simple_direction(n_samples, est_rng);
    NoiseDemoRow row;
    row.sigma = sigma_grid[i];
    row.dist_to_bloop = (est.mean - oracle.d_bloop()).norm();
    row.dist_to_mixed = (est.mean - oracle.d_mixed()).norm();
    row.stderr_norm = est.stderr_norm;
    row.n_samples = est.n_samples;
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// conditioning demo

std::vector<ConditioningDemoRow> run_conditioning_demo(
    const std::vector<double>& lambda_grid, double eta, long steps,
    std::uint64_t seed) {
  if (lambda_grid.empty()) {
    throw ContractViolation("run_conditioning_demo: empty lambda grid");
  }
  if (!(eta > 0.0)) {
    throw ContractViolation("run_conditioning_demo: eta must be > 0");
  }
  if (steps < 1) {
    throw ContractViolation("run_conditioning_demo: steps must be >= 1");
  }
  const auto problem = make_conditioning_2d(0.0);
  ParamVector start(2);
  start << 1.0, 1.0;

  std::vector<ConditioningDemoRow> rows;
  rows.reserve(2 * lambda_grid.size());
  for (double lambda : lambda_grid) {
    for (Method method : {Method::Bloop, Method::Mixed}) {
      RunConfig rc;
      rc.surgery.method = method;
      rc.surgery.lambda = lambda;
      rc.optimizer = Optimizer::sgd(eta);
      rc.iterations = steps;
      rc.seed = seed;
      rc.log_every = steps;
      rc.init = InitSpec::explicit_theta_at(start);
      const RunLog log = run_training(*problem, rc);
      ConditioningDemoRow row;
      row.method = method == Method::Bloop ? "bloop" : "mixed";
      row.lambda = lambda;
      row.theta_a = log.final_theta[0];
      row.theta_b = log.final_theta[1];
      row.loss_main = problem->loss_main(log.final_theta);
      row.loss_aux = problem->loss_aux(log.final_theta);
      rows.push_back(row);
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// rate check

std::vector<RateCheckRow> run_rate_check(const RateCheckConfig& cfg) {
  if (cfg.T_grid.empty()) {
    throw ContractViolation("run_rate_check: empty T grid");
  }
  for (std::size_t i = 0; i < cfg.T_grid.size(); ++i) {
    if (cfg.T_grid[i] < 1) {
      throw ContractViolation("run_rate_check: T values must be >= 1");
    }
    if (i > 0 && !(cfg.T_grid[i - 1] < cfg.T_grid[i])) {
      throw ContractViolation("run_rate_check: T grid must be increasing");
    }
  }
  if (cfg.n_seeds < 1) {
    throw ContractViolation("run_rate_check: need at least one seed");
  }
  if (!(cfg.eta0 > 0.0)) {
    throw ContractViolation("run_rate_check: eta0 must be > 0");
  }
  if (cfg.lambda < 0.0) {
    throw ContractViolation("run_rate_check: lambda must be >= 0");
  }

  const auto problem =
      make_pl_quadratic(cfg.p, cfg.mu, cfg.L, cfg.base_seed, cfg.sigma);
  std::vector<RateCheckRow> rows;
  rows.reserve(cfg.T_grid.size() * cfg.n_seeds);
  for (long T : cfg.T_grid) {
    const double eta = cfg.eta0 * std::pow(static_cast<double>(T), -0.75);
    const double rho = std::min(1.0, std::pow(eta, 2.0 / 3.0));
    for (int s = 0; s < cfg.n_seeds; ++s) {
      RunConfig rc;
      rc.surgery.method = Method::Bloop;
      rc.surgery.lambda = cfg.lambda;
      rc.surgery.rho = rho;
      rc.optimizer = Optimizer::sgd(eta);
      rc.iterations = T;
      // Seed depends only on s, so each seed reuses its theta_0 across T
      // values and ratios between T's pair up run-for-run.
      rc.seed = mix_seed(cfg.base_seed, 100 + static_cast<std::uint64_t>(s));
      rc.log_every = 1;
      rc.record_reference_distances = false;
      rc.init = InitSpec::gaussian(1.0);
      const RunLog log = run_training(*problem, rc);

      RateCheckRow row;
      row.T = T;
      row.seed = rc.seed;
      row.eta = eta;
      row.rho = rho;
      // Average over the T pre-step iterates theta_0 .. theta_{T-1} (fewer
      // if the run aborted early; the non-finite metrics then show up in
      // the row rather than being silently dropped).
      const long n_avg = std::min(T, static_cast<long>(log.rows.size()));
      double sum_sq = 0.0;
      for (long t = 0; t < n_avg; ++t) {
        sum_sq += log.rows[t].grad_main_norm * log.rows[t].grad_main_norm;
      }
      row.avg_sq_grad_norm = sum_sq / static_cast<double>(n_avg);
      row.final_gap = log.rows.back().loss_main;
      rows.push_back(row);
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// EMA ablation

EmaAblationResult run_ema_ablation(const Problem& problem,
                                   const RunConfig& base,
                                   const std::vector<double>& rho_grid) {
  if (base.surgery.method != Method::Bloop) {
    throw ContractViolation("run_ema_ablation: base config must use bloop");
  }
  if (rho_grid.empty()) {
    throw ContractViolation("run_ema_ablation: empty rho grid");
  }
  EmaAblationResult result;
  for (double rho : rho_grid) {
    RunConfig rc = base;
    rc.surgery.rho = rho;
    RunLog log = run_training(problem, rc);
    EmaAblationRow row;
    row.rho = rho;
    row.final_loss_main = problem.loss_main(log.final_theta);
    row.final_loss_aux = problem.loss_aux(log.final_theta);
    row.mean_ema_error = log.mean_ema_error;
    row.mean_cos_bloop_mixed = log.mean_cos_bloop_mixed;
    result.rows.push_back(row);
    result.logs.push_back(std::move(log));
  }
  return result;
}

// ---------------------------------------------------------------------------
// stationarity diagnostics

StationarityReport stationarity_report(const Problem& problem,
                                       const ParamVector& theta,
                                       double lambda) {
  if (lambda < 0.0) {
    throw ContractViolation("stationarity_report: lambda must be >= 0");
  }
  const ParamVector gm = problem.grad_main(theta);
  const ParamVector ga = problem.grad_aux(theta);
  const ParamVector d = bloop_direction_fullbatch(gm, ga, lambda);

  StationarityReport report;
  report.grad_main_norm = gm.norm();
  report.direction_norm = d.norm();
  if (gm.norm() <= norm_floor(ga.norm())) {
    // Direction is lambda * g_aux here; the orthogonal split does not apply.
    report.degenerate_fallback = true;
    report.projection_norm = ga.norm();
    report.decomposition_ok = true;
    return report;
  }
  const ParamVector pi = project_orth(ga, gm);
  report.projection_norm = pi.norm();
  const double lhs = d.squaredNorm();
  const double rhs = gm.squaredNorm() + lambda * lambda * pi.squaredNorm();
  const double scale = std::max(lhs, std::max(rhs, 1e-300));
  report.decomposition_rel_error = std::abs(lhs - rhs) / scale;
  report.decomposition_ok = report.decomposition_rel_error <= 1e-9;
  return report;
}

}  // namespace bloop
