#include <benchmark/benchmark.h>

#include "gmdiff/mixture.hpp"
#include "gmdiff/samplers.hpp"
#include "gmdiff/schedule.hpp"
#include "gmdiff/score_source.hpp"

namespace {

using namespace gmdiff;

struct Fixture {
  GaussianMixture gmm = build_grid_mixture(5, 2.0, 0.02, 2, 25);
  NoiseSchedule schedule = build_linear_schedule(1000, 1e-4, 0.02, gmm.sigma);
  ExactScore source{gmm, schedule};
};

void BM_Responsibilities(benchmark::State& state) {
  Fixture f;
  Eigen::VectorXd x(2);
  x << 0.3, -0.2;
  for (auto _ : state) {
    benchmark::DoNotOptimize(responsibilities(f.gmm, f.schedule, x, 500));
  }
}
BENCHMARK(BM_Responsibilities);

void BM_ScoreExact(benchmark::State& state) {
  Fixture f;
  Eigen::VectorXd x(2), out(2);
  x << 0.3, -0.2;
  for (auto _ : state) {
    score_exact_into(f.gmm, f.schedule, x, 500, out);
    benchmark::DoNotOptimize(out);
  }
}
BENCHMARK(BM_ScoreExact);

void BM_DdpmTrajectory(benchmark::State& state) {
  Fixture f;
  SamplerConfig config;
  config.kind = SamplerKind::ddpm;
  config.grid = ddpm_full_grid(f.schedule);
  config.seed = 7;
  std::uint64_t id = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        sample_trajectory(config, f.source, f.gmm, f.schedule, id++));
  }
}
BENCHMARK(BM_DdpmTrajectory);

void BM_DdimTrajectory(benchmark::State& state) {
  Fixture f;
  SamplerConfig config;
  config.kind = SamplerKind::ddim;
  config.grid = ddim_quadratic_grid(f.schedule, 50);
  config.seed = 7;
  std::uint64_t id = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        sample_trajectory(config, f.source, f.gmm, f.schedule, id++));
  }
}
BENCHMARK(BM_DdimTrajectory);

}  // namespace

BENCHMARK_MAIN();
