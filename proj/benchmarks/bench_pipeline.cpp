#include <benchmark/benchmark.h>

#include "ktraj/objective.hpp"
#include "ktraj/recon.hpp"
#include "ktraj/rng.hpp"
#include "ktraj/trainer.hpp"

namespace {

std::vector<double> random_image(int n, std::uint64_t seed) {
  ktraj::Rng rng(seed);
  std::vector<double> img(static_cast<std::size_t>(n) * n);
  for (auto& v : img) v = rng.uniform(0.0, 1.0);
  return img;
}

void BM_ReconForward(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto params = ktraj::recon_build(2, 8, 11);
  const auto img = random_image(n, 12);
  for (auto _ : state) {
    ktraj::diff::Tape tape;
    auto input = tape.leaf({1, n, n}, img, true);
    auto trace = ktraj::recon_forward(params, tape, input);
    benchmark::DoNotOptimize(trace.output);
  }
}
BENCHMARK(BM_ReconForward)->Arg(64);

void BM_ReconBackward(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto params = ktraj::recon_build(2, 8, 11);
  const auto img = random_image(n, 12);
  for (auto _ : state) {
    ktraj::diff::Tape tape;
    auto input = tape.leaf({1, n, n}, img, true);
    auto trace = ktraj::recon_forward(params, tape, input);
    tape.backward(tape.sum(trace.output));
    auto g = ktraj::recon_param_grad(tape, params, trace);
    benchmark::DoNotOptimize(g);
  }
}
BENCHMARK(BM_ReconBackward)->Arg(64);

void BM_Ssim(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto x = random_image(n, 21);
  const auto y = random_image(n, 22);
  for (auto _ : state) {
    auto r = ktraj::ssim(x, y, n, n, 1.0);
    benchmark::DoNotOptimize(r.mean);
  }
}
BENCHMARK(BM_Ssim)->Arg(64)->Arg(128);

// Segment integration and assembly at the default problem scale: the
// field-side cost of every training step.
void BM_AssembleTrajectory(benchmark::State& state) {
  ktraj::ProblemConfig prob;
  ktraj::PhysicsLimits lim;
  lim.grid_size = prob.grid;
  const auto init = ktraj::build_initializer(prob, lim);
  const auto control = ktraj::extract_control_points(init, prob.n_control);
  ktraj::Rng rng(31);
  const auto field = ktraj::field_init(2, prob.hidden, prob.include_time, rng);
  const ktraj::OdeConfig ode;
  for (auto _ : state) {
    auto traj = ktraj::assemble_trajectory(field, init, control, ode);
    benchmark::DoNotOptimize(traj.points);
  }
}
BENCHMARK(BM_AssembleTrajectory);

// One full train step (forward + adjoint backward) on a small problem.
void BM_PipelineStep(benchmark::State& state) {
  const int grid = 16;
  ktraj::ProblemConfig prob;
  prob.grid = grid;
  prob.shots = 2;
  prob.n_control = 8;
  prob.samples_per_shot = 80;
  prob.k_extent = 0.45;
  ktraj::PhysicsLimits lim;
  lim.grid_size = grid;
  const auto init = ktraj::build_initializer(prob, lim);
  const auto control = ktraj::extract_control_points(init, prob.n_control);
  ktraj::Rng rng(31);
  const auto field = ktraj::field_init(2, 8, true, rng);
  const auto recon = ktraj::recon_build(1, 2, 505);
  const auto sample = ktraj::make_train_sample(grid, 2, 31, 4);
  ktraj::TrainConfig cfg;
  cfg.limits = lim;
  cfg.lambda1 = 0.1;
  cfg.lambda2 = 0.1;
  for (auto _ : state) {
    ktraj::PipelineTrace trace;
    auto res = ktraj::forward_pipeline(field, recon, init, control, sample,
                                       cfg, &trace);
    auto grads = ktraj::backward_pipeline(trace);
    benchmark::DoNotOptimize(res.loss.total);
    benchmark::DoNotOptimize(grads.field);
  }
}
BENCHMARK(BM_PipelineStep);

}  // namespace
