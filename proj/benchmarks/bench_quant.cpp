// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include "qprobe/linalg.hpp"
#include "qprobe/quant.hpp"

namespace {

qprobe::Matrix rows(std::int64_t cols) { return qprobe::Rng(4).normal_matrix(64, static_cast<std::size_t>(cols)); }

void BM_AbsmaxRows(benchmark::State& state) {
  const qprobe::Matrix x = rows(state.range(0));
  qprobe::QuantConfig cfg;
  for (auto _ : state) benchmark::DoNotOptimize(qprobe::absmax_quantize_rows(x, cfg));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(x.size()));
}
BENCHMARK(BM_AbsmaxRows)->Arg(64)->Arg(512);

// Dominated by the 71-point clip search.
void BM_QuestRows(benchmark::State& state) {
  const qprobe::Matrix x = rows(state.range(0));
  qprobe::QuantConfig cfg;
  cfg.scheme = qprobe::QuantScheme::quest;
  for (auto _ : state) benchmark::DoNotOptimize(qprobe::quest_quantize_rows(x, cfg));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(x.size()));
}
BENCHMARK(BM_QuestRows)->Arg(64)->Arg(512);

}  // namespace
