// Copyright 2026 The qprobe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qprobe/decomposition.hpp"
#include "qprobe/matrix.hpp"
#include "qprobe/network.hpp"
#include "qprobe/optimizers.hpp"
#include "qprobe/quant.hpp"
#include "qprobe/tasks.hpp"

namespace qprobe {

struct NetParams {
  std::size_t depth = 2;
  std::size_t width = 16;
  std::size_t heads = 2;
  std::size_t seq_len = 8;
  friend bool operator==(const NetParams&, const NetParams&) = default;
};

struct TrainConfig {
  TaskKind task = TaskKind::linear_teacher;
  NetParams net;
  OptimizerConfig optimizer;
  std::optional<QuantConfig> quant;  // present => QAT
  // When unset, steps = ceil(token_ratio * N / (batch * seq_len)).
  std::optional<std::size_t> steps;
  std::size_t batch = 4;  // sequences per step
  double token_ratio = 20.0;
  std::optional<double> stop_at_loss;
  std::uint64_t seed = 0;       // initialization and batch sampling
  std::uint64_t task_seed = 1;  // teacher matrix / grammar weights
  std::size_t eval_every = 10;
  std::size_t val_sequences = 16;

  void validate() const;
  std::size_t resolved_steps() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

std::string train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(std::string_view text);

/// Trained state: the network plus, for the char LM, the tied embedding
/// (vocab x width). The embedding is empty for the linear teacher.
struct Model {
  TaskKind task = TaskKind::linear_teacher;
  NetworkSpec net;
  Matrix embedding;
};

Model init_model(const TrainConfig& cfg);

struct EvalPoint {
  std::size_t step = 0;
  double loss = 0.0;
};

struct RunRecord {
  TrainConfig config;
  std::vector<double> train_loss;  // entry i is the loss at step i+1
  std::vector<EvalPoint> val_loss;
  Model model;
  std::size_t steps_run = 0;
  bool stopped_early = false;
  std::string config_hash;
  std::string content_hash;
};

/// Deterministic training run. Throws NumericalError naming the step when the
/// loss becomes non-finite.
RunRecord train(const TrainConfig& cfg);

/// Validation loss of `model` on the config's fixed validation set. When
/// `ptq` is set, linear weights are quantized once with it and linear inputs
/// are quantized row-wise on the fly. QAT configs evaluate with their own
/// quantized forward otherwise.
double validation_loss(const TrainConfig& cfg, const Model& model,
                       const std::optional<QuantConfig>& ptq = std::nullopt);

/// Network input for the first validation sequence.
Matrix validation_probe_input(const TrainConfig& cfg, const Model& model);
std::vector<Matrix> validation_inputs(const TrainConfig& cfg, const Model& model);

struct SweepArm {
  double lr = 0.0;
  std::uint64_t seed = 0;
  bool diverged = false;
  std::optional<double> final_val_loss;
  std::string error;
};

struct SweepResult {
  double best_lr = 0.0;
  std::size_t best_index = 0;
  std::vector<SweepArm> arms;
  RunRecord best_run;
};

/// Index of the non-divergent arm with the lowest final validation loss;
/// ties go to the smaller lr. Throws NumericalError when every arm diverged.
std::size_t select_best_arm(std::span<const SweepArm> arms);

/// Arm i trains with seed base.seed + i. Arms run concurrently and are picked
/// with select_best_arm.
SweepResult lr_sweep(const TrainConfig& base, std::span<const double> lrs);

struct PtqResult {
  Model quantized;  // linear weights replaced by their dequantized values
  double loss_before = 0.0;
  double loss_after = 0.0;
  double loss_delta = 0.0;
  std::vector<DecompRecord> decomposition;  // on the first validation sequence
  double r_final = 0.0;  // mean R of the last module over every validation token
};

PtqResult ptq_apply(const RunRecord& run, const QuantConfig& cfg,
                    const DecomposeOptions& decomp = {});

/// Content hash over all weight tensors (names and little-endian bytes).
std::string model_content_hash(const Model& model);
std::string config_hash(const TrainConfig& cfg);

/// Writes manifest.json, loss_curve.csv, model.json and its weight archive
/// (plus embedding.json for the char LM) into `dir`.
void write_run(const RunRecord& run, const std::filesystem::path& dir);
/// Reads back what write_run produced.
RunRecord read_run(const std::filesystem::path& dir);

std::string loss_curve_csv(const RunRecord& run);

}  // namespace qprobe
