// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include "qprobe/linalg.hpp"

namespace {

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  qprobe::Rng rng(1);
  const qprobe::Matrix a = rng.normal_matrix(n, n);
  const qprobe::Matrix b = rng.normal_matrix(n, n);
  for (auto _ : state) benchmark::DoNotOptimize(qprobe::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128)->Arg(256);

void BM_SpectralNorm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  qprobe::Rng rng(2);
  const qprobe::Matrix w = rng.normal_matrix(n, n);
  for (auto _ : state) benchmark::DoNotOptimize(qprobe::spectral_norm(w));
}
BENCHMARK(BM_SpectralNorm)->Arg(32)->Arg(128);

void BM_Hadamard(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  qprobe::Rng rng(3);
  const auto x = rng.normal_vector(n);
  for (auto _ : state) benchmark::DoNotOptimize(qprobe::hadamard(x));
}
BENCHMARK(BM_Hadamard)->Arg(64)->Arg(1024);

}  // namespace
