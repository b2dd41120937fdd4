// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include "qprobe/linalg.hpp"
#include "qprobe/optimizers.hpp"

namespace {

void BM_OptimizerStep(benchmark::State& state) {
  const auto kind = static_cast<qprobe::OptimizerKind>(state.range(0));
  qprobe::OptimizerConfig cfg;
  cfg.kind = kind;
  cfg.lr = 1e-4;
  qprobe::Rng rng(6);
  qprobe::Matrix w = rng.normal_matrix(64, 128);
  const qprobe::Matrix g = rng.normal_matrix(64, 128);
  qprobe::OptimizerState s(kind, 64, 128);
  for (auto _ : state) qprobe::step(cfg, s, w, g);
  state.SetLabel(qprobe::to_string(kind));
}
BENCHMARK(BM_OptimizerStep)->DenseRange(0, 5);

}  // namespace
