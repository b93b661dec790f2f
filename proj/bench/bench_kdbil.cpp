#include <benchmark/benchmark.h>

#include <random>

#include "stun/kd_bil.hpp"

using namespace stun;

namespace {

// Synthetic demonstrations shaped like the default task: 8-d observations,
// 25 linear k=2 candidates with `per` demonstrations each.
struct Problem {
  TrainingDataset ds;
  std::vector<ObsAction> window;
  std::vector<LatentParams> grid;
  LogPrior prior;
};

Problem make_problem(int per, int n) {
  Rng rng(17);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_int_distribution<int> a(0, kNumActions - 1);
  Problem p;
  p.grid = latent_grid(2, MixingKind::Linear, 24);
  std::vector<Demonstration> demos;
  for (const auto& b : p.grid) {
    for (int j = 0; j < per; ++j) {
      Demonstration d;
      d.obs.resize(8);
      for (double& x : d.obs) x = 0.3 * u(rng);
      d.action = static_cast<Action>(a(rng));
      d.latent = b;
      demos.push_back(d);
    }
  }
  p.ds = TrainingDataset(std::move(demos));
  for (int i = 0; i < n; ++i) {
    ObsAction x;
    x.obs.resize(8);
    for (double& v : x.obs) v = 0.3 * u(rng);
    x.action = static_cast<Action>(a(rng));
    p.window.push_back(x);
  }
  p.prior = uniform_log_prior(p.grid.size());
  return p;
}

void run(benchmark::State& state, KernelBackend backend) {
  const auto p = make_problem(static_cast<int>(state.range(0)), static_cast<int>(state.range(1)));
  const Bandwidths bw;
  for (auto _ : state) {
    auto post = posterior_over_grid(p.ds, p.window, p.grid, p.prior, bw, backend);
    benchmark::DoNotOptimize(post);
  }
  state.counters["kernel_evals"] = benchmark::Counter(
      static_cast<double>(p.ds.size()) * p.window.size(), benchmark::Counter::kIsIterationInvariantRate);
}

void BM_PosteriorSerial(benchmark::State& s) { run(s, KernelBackend::Serial); }
void BM_PosteriorParallel(benchmark::State& s) { run(s, KernelBackend::Parallel); }

}  // namespace

BENCHMARK(BM_PosteriorSerial)->Args({20, 100})->Args({120, 300})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_PosteriorParallel)->Args({20, 100})->Args({120, 300})->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
