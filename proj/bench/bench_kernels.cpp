// Serial reference against OpenMP variants of the hot kernels.

#include <benchmark/benchmark.h>

#include <random>
#include <span>
#include <vector>

#include "fedcast/kernels.hpp"

namespace {

namespace k = fedcast::kernels;

std::vector<double> random_values(std::size_t n, unsigned seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = d(gen);
  return v;
}

template <bool Parallel>
void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const k::MatmulDims dims{n, n, n, false, false};
  const auto a = random_values(n * n, 1);
  const auto b = random_values(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::matmul(a, b, c, dims, false);
    } else {
      k::matmul_serial(a, b, c, dims, false);
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}

template <bool Parallel>
void BM_WeightedSum(benchmark::State& state) {
  const auto len = static_cast<std::size_t>(state.range(0));
  const std::size_t clients = 8;
  std::vector<std::vector<double>> store;
  std::vector<std::span<const double>> inputs;
  for (std::size_t i = 0; i < clients; ++i) store.push_back(random_values(len, 10 + i));
  for (const auto& s : store) inputs.emplace_back(s);
  const auto weights = random_values(clients, 3);
  std::vector<double> out(len);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::weighted_sum(inputs, weights, out);
    } else {
      k::weighted_sum_serial(inputs, weights, out);
    }
    benchmark::DoNotOptimize(out.data());
  }
  state.SetBytesProcessed(state.iterations() *
                          static_cast<std::int64_t>(clients * len * sizeof(double)));
}

}  // namespace

BENCHMARK(BM_Matmul<false>)->Name("matmul/serial")->RangeMultiplier(2)->Range(16, 256);
BENCHMARK(BM_Matmul<true>)->Name("matmul/openmp")->RangeMultiplier(2)->Range(16, 256);
BENCHMARK(BM_WeightedSum<false>)->Name("weighted_sum/serial")->RangeMultiplier(8)->Range(1 << 10, 1 << 19);
BENCHMARK(BM_WeightedSum<true>)->Name("weighted_sum/openmp")->RangeMultiplier(8)->Range(1 << 10, 1 << 19);

BENCHMARK_MAIN();
