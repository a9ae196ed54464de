#include <benchmark/benchmark.h>

#include "bloop/ema.hpp"
#include "bloop/problems.hpp"
#include "bloop/rng.hpp"
#include "bloop/surgery.hpp"
#include "bloop/vecops.hpp"

namespace {

using bloop::ParamVector;

ParamVector random_vector(bloop::RunRng& rng, Eigen::Index p) {
  return bloop::draw_normal_vector(rng, p);
}

void BM_ProjectOrth(benchmark::State& state) {
  bloop::RunRng rng(bloop::mix_seed(1));
  const Eigen::Index p = state.range(0);
  const ParamVector a = random_vector(rng, p);
  const ParamVector b = random_vector(rng, p);
  for (auto _ : state) {
    benchmark::DoNotOptimize(bloop::project_orth(a, b));
  }
  state.SetItemsProcessed(state.iterations());
}
BENCHMARK(BM_ProjectOrth)->Arg(100)->Arg(1000)->Arg(10000);

void BM_BloopDirection(benchmark::State& state) {
  bloop::RunRng rng(bloop::mix_seed(2));
  const Eigen::Index p = state.range(0);
  const ParamVector gm = random_vector(rng, p);
  const ParamVector ga = random_vector(rng, p);
  bloop::EmaState ema(p, 0.01);
  ema.update(gm);
  bloop::SurgerySpec spec;
  spec.method = bloop::Method::Bloop;
  bloop::DirectionContext ctx{gm, ga, &ema, 0.0};
  for (auto _ : state) {
    benchmark::DoNotOptimize(bloop::compute_direction(ctx, spec));
  }
  state.SetItemsProcessed(state.iterations());
}
BENCHMARK(BM_BloopDirection)->Arg(100)->Arg(1000)->Arg(10000);

void BM_EmaUpdate(benchmark::State& state) {
  bloop::RunRng rng(bloop::mix_seed(3));
  const Eigen::Index p = state.range(0);
  const ParamVector g = random_vector(rng, p);
  bloop::EmaState ema(p, 0.01);
  for (auto _ : state) {
    ema.update(g);
    benchmark::DoNotOptimize(ema.value);
  }
  state.SetItemsProcessed(state.iterations());
}
BENCHMARK(BM_EmaUpdate)->Arg(100)->Arg(1000)->Arg(10000);

void BM_LeastSquaresStochGrad(benchmark::State& state) {
  const auto problem = bloop::make_overparam_least_squares(20, 100, 7, 4);
  bloop::RunRng rng(bloop::mix_seed(4));
  const ParamVector theta = random_vector(rng, problem->dim());
  for (auto _ : state) {
    benchmark::DoNotOptimize(problem->stoch_grad_main(theta, rng));
  }
  state.SetItemsProcessed(state.iterations());
}
BENCHMARK(BM_LeastSquaresStochGrad);

void BM_MlpSpectralPenaltyGrad(benchmark::State& state) {
  const auto problem = bloop::make_tiny_mlp_lipschitz({8, 16, 2}, 7, 64, 32);
  bloop::RunRng rng(bloop::mix_seed(5));
  const ParamVector theta = 0.3 * random_vector(rng, problem->dim());
  for (auto _ : state) {
    benchmark::DoNotOptimize(problem->grad_aux(theta));
  }
  state.SetItemsProcessed(state.iterations());
}
BENCHMARK(BM_MlpSpectralPenaltyGrad);

}  // namespace

BENCHMARK_MAIN();
