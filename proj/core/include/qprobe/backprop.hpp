// Copyright 2026 The qprobe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "qprobe/matrix.hpp"
#include "qprobe/network.hpp"
#include "qprobe/quant.hpp"

namespace qprobe {

/// A trainable tensor inside a NetworkSpec. RMSNorm gains are exposed as
/// 1 x n with vector_param set.
struct ParamView {
  std::size_t module = 0;  // 1-based module index
  std::string name;        // e.g. "m3.weight", "m2.gamma", "m4.wq"
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::span<double> values;
  bool vector_param = false;
};

/// Parameters in module order; attention lists wq, wk, wv, wo.
std::vector<ParamView> parameter_views(NetworkSpec& net);

inline QuantConfig quest_config(int bits = 4) {
  QuantConfig c;
  c.bits = bits;
  c.scheme = QuantScheme::quest;
  return c;
}

enum class QuantMode {
  off,        // full precision
  qat,        // quantize linear inputs/weights with `quant`, STE backward
  surrogate,  // clip with frozen bounds instead of rounding (grad checking)
};

struct TapeOptions {
  QuantMode mode = QuantMode::off;
  QuantConfig quant = quest_config();
  // Required for surrogate mode: one entry per quantized tensor, in the
  // order a qat forward produced them (Tape::slots).
  const std::vector<QuantResult>* frozen = nullptr;
};

struct ModuleTape {
  Matrix x_used;  // linear: (quantized) input actually multiplied
  Matrix w_used;  // linear: (quantized) weight actually multiplied
  std::vector<double> inv_rms;
  AttentionUnit attn_weights;  // projections actually used
  Matrix attn_x_in, attn_q, attn_k, attn_v, attn_o, attn_o_in;
  std::vector<Matrix> attn_probs;
  std::vector<std::size_t> slots;  // indices into Tape::slots
};

struct Tape {
  Activations acts;
  std::vector<ModuleTape> modules;  // index l-1 for module l
  std::vector<QuantResult> slots;
};

Tape forward_tape(const NetworkSpec& net, const Matrix& x, const TapeOptions& opt = {});

struct BackwardResult {
  std::vector<Matrix> param_grads;  // aligned with parameter_views
  Matrix input_grad;
};

BackwardResult backward(const NetworkSpec& net, const Tape& tape, const Matrix& output_grad);

/// mean((y - t)^2) over all elements.
double mse_loss(const Matrix& y, const Matrix& target, Matrix* grad = nullptr);
/// Mean token cross-entropy of row-wise logits.
double cross_entropy_loss(const Matrix& logits, std::span<const int> targets, Matrix* grad = nullptr);

struct GradCheckOptions {
  double h = 1e-5;
  QuantMode mode = QuantMode::off;  // qat checks the clip surrogate
  QuantConfig quant = quest_config();
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t tensors_checked = 0;
  std::size_t elements_checked = 0;
};

/// Analytic vs central-difference gradients of mse_loss(net(x), y) for every
/// parameter tensor and the input. The error of one tensor is
/// ||analytic - numeric|| / max(||analytic||, ||numeric||); the result is
/// the maximum over tensors.
GradCheckResult grad_check(const NetworkSpec& net, const Matrix& x, const Matrix& y,
                           const GradCheckOptions& opt = {});

}  // namespace qprobe
