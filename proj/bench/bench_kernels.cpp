// Serial reference kernels vs the OpenMP versions.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "arcflow/kernels.hpp"

namespace k = arcflow::kernels;

namespace {

std::vector<float> random_vec(std::size_t n, unsigned seed) {
  std::mt19937 rng(seed);
  std::normal_distribution<float> d(0.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

template <bool Parallel>
void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_vec(n * n, 1), b = random_vec(n * n, 2);
  std::vector<float> c(n * n);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::omp::matmul(a.data(), b.data(), c.data(), n, n, n);
    } else {
      k::serial::matmul(a.data(), b.data(), c.data(), n, n, n);
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GFLOP/s"] =
      benchmark::Counter(2.0 * n * n * n, benchmark::Counter::kIsIterationInvariantRate, benchmark::Counter::kIs1000);
}

template <bool Parallel>
void BM_MatmulAtB(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_vec(n * n, 3), b = random_vec(n * n, 4);
  std::vector<float> c(n * n);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::omp::matmul_at_b(a.data(), b.data(), c.data(), n, n, n);
    } else {
      k::serial::matmul_at_b(a.data(), b.data(), c.data(), n, n, n);
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GFLOP/s"] =
      benchmark::Counter(2.0 * n * n * n, benchmark::Counter::kIsIterationInvariantRate, benchmark::Counter::kIs1000);
}

template <bool Parallel>
void BM_MatmulABt(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_vec(n * n, 5), b = random_vec(n * n, 6);
  std::vector<float> c(n * n);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::omp::matmul_a_bt(a.data(), b.data(), c.data(), n, n, n);
    } else {
      k::serial::matmul_a_bt(a.data(), b.data(), c.data(), n, n, n);
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GFLOP/s"] =
      benchmark::Counter(2.0 * n * n * n, benchmark::Counter::kIsIterationInvariantRate, benchmark::Counter::kIs1000);
}

}  // namespace

BENCHMARK(BM_Matmul<false>)->Name("matmul/serial")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_Matmul<true>)->Name("matmul/omp")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_MatmulAtB<false>)->Name("matmul_at_b/serial")->Arg(128)->Arg(256);
BENCHMARK(BM_MatmulAtB<true>)->Name("matmul_at_b/omp")->Arg(128)->Arg(256);
BENCHMARK(BM_MatmulABt<false>)->Name("matmul_a_bt/serial")->Arg(128)->Arg(256);
BENCHMARK(BM_MatmulABt<true>)->Name("matmul_a_bt/omp")->Arg(128)->Arg(256);

BENCHMARK_MAIN();
