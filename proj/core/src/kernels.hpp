// Copyright 2026 The qprobe Authors
// SPDX-License-Identifier: Apache-2.0

// Module math shared by inference (network.cpp) and training (backprop.cpp).

#pragma once

#include <functional>
#include <vector>

#include "qprobe/matrix.hpp"
#include "qprobe/network.hpp"

namespace qprobe::detail {

Matrix relu2_forward(const Matrix& x);

// inv_rms receives 1/sqrt(mean(x^2) + eps) per row when non-null.
Matrix rmsnorm_forward(const Matrix& x, const std::vector<double>& gamma,
                       std::vector<double>* inv_rms = nullptr);

struct AttentionCache {
  Matrix x_in;   // input to the q/k/v projections (post activation quantizer)
  Matrix q, k, v;
  std::vector<Matrix> probs;  // per head, (T x T)
  Matrix o;      // concatenated head outputs
  Matrix o_in;   // input to the output projection (post activation quantizer)
};

using ActivationQuantizer = std::function<Matrix(const Matrix&)>;

/// `weights` carries the projections to use (already quantized for f^q).
/// `quantize_act`, when set, is applied to the attention input and to the
/// concatenated head output before the output projection.
Matrix attention_forward(const Matrix& x, const AttentionUnit& weights,
                         const ActivationQuantizer& quantize_act, AttentionCache* cache);

}  // namespace qprobe::detail
