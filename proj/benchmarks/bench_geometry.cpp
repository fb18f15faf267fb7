#include <benchmark/benchmark.h>

#include "ktraj/geometry.hpp"

static void BM_InitRadial(benchmark::State& state) {
  const int shots = static_cast<int>(state.range(0));
  for (auto _ : state) {
    auto t = ktraj::init_radial(shots, 1000, 0.5);
    benchmark::DoNotOptimize(t.points.data());
  }
}
BENCHMARK(BM_InitRadial)->Arg(8)->Arg(16);

static void BM_Kinematics(benchmark::State& state) {
  ktraj::PhysicsLimits limits;
  auto t = ktraj::init_radial(static_cast<int>(state.range(0)), 1000, 0.5);
  for (auto _ : state) {
    auto kin = ktraj::kinematics(t, limits);
    benchmark::DoNotOptimize(kin.velocity.data());
  }
}
BENCHMARK(BM_Kinematics)->Arg(8)->Arg(16);
