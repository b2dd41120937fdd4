// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include "qprobe/decomposition.hpp"
#include "qprobe/linalg.hpp"
#include "qprobe/network.hpp"

namespace {

void BM_DecomposeToyTransformer(benchmark::State& state) {
  const auto depth = static_cast<std::size_t>(state.range(0));
  qprobe::Rng rng(5);
  const qprobe::NetworkSpec net = qprobe::build_toy_transformer(depth, 32, 4, rng, 16);
  const qprobe::Matrix x = rng.normal_matrix(16, 32);
  qprobe::QuantConfig cfg;
  for (auto _ : state) benchmark::DoNotOptimize(qprobe::decompose_network(net, x, cfg));
}
BENCHMARK(BM_DecomposeToyTransformer)->Arg(2)->Arg(8)->Unit(benchmark::kMillisecond);

}  // namespace
