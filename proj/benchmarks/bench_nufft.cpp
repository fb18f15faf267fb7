#include <benchmark/benchmark.h>

#include "ktraj/nufft.hpp"
#include "ktraj/rng.hpp"

namespace {

ktraj::ComplexImage random_image(int n) {
  ktraj::Rng rng(7);
  auto img = ktraj::make_image(n);
  for (auto& v : img.data) v = {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
  return img;
}

std::vector<double> random_points(std::size_t count) {
  ktraj::Rng rng(8);
  std::vector<double> pts(2 * count);
  for (auto& p : pts) p = rng.uniform(-0.5, 0.499);
  return pts;
}

void BM_NufftForward(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto img = random_image(n);
  const auto pts = random_points(1600);
  for (auto _ : state) {
    auto s = ktraj::nufft_forward(img, pts);
    benchmark::DoNotOptimize(s);
  }
}
BENCHMARK(BM_NufftForward)->Arg(64)->Arg(128);

void BM_NufftAdjoint(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto pts = random_points(1600);
  const auto s = ktraj::nufft_forward(random_image(n), pts);
  for (auto _ : state) {
    auto img = ktraj::nufft_adjoint(s, pts, n);
    benchmark::DoNotOptimize(img);
  }
}
BENCHMARK(BM_NufftAdjoint)->Arg(64)->Arg(128);

void BM_NufftPointGrad(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto img = random_image(n);
  const auto pts = random_points(1600);
  const auto s = ktraj::nufft_forward(img, pts);
  std::vector<std::complex<double>> cot(s.size());
  for (std::size_t j = 0; j < s.size(); ++j) cot[j] = 2.0 * s[j];
  for (auto _ : state) {
    auto g = ktraj::nufft_point_grad(img, pts, cot);
    benchmark::DoNotOptimize(g);
  }
}
BENCHMARK(BM_NufftPointGrad)->Arg(64);

void BM_NdftForward(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto img = random_image(n);
  const auto pts = random_points(500);
  for (auto _ : state) {
    auto s = ktraj::ndft_forward(img, pts);
    benchmark::DoNotOptimize(s);
  }
}
BENCHMARK(BM_NdftForward)->Arg(16)->Arg(32);

}  // namespace
