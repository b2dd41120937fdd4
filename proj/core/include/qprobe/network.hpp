// Copyright 2026 The qprobe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "qprobe/matrix.hpp"
#include "qprobe/quant.hpp"

namespace qprobe {

inline constexpr double kRmsNormEpsilon = 1e-8;
inline constexpr std::size_t kFfnExpansion = 4;

struct Linear {
  Matrix weight;  // (out_features x in_features); y = x W^T
};

struct RmsNorm {
  std::vector<double> gamma;
};

struct Relu2 {};

struct ResidualBegin {
  std::string tag;
};

struct ResidualEnd {
  std::string tag;
};

// Softmax self-attention treated as one opaque module. All projections are
// (width x width).
struct AttentionUnit {
  Matrix wq, wk, wv, wo;
  std::size_t heads = 1;
  bool causal = true;
};

enum class ModuleKind { linear, rmsnorm, relu2, residual_begin, residual_end, attention_unit };

std::string to_string(ModuleKind kind);

struct ModuleSpec {
  std::variant<Linear, RmsNorm, Relu2, ResidualBegin, ResidualEnd, AttentionUnit> op;
  // Only meaningful for linear and attention_unit (its internal projections).
  bool quantize = false;

  ModuleKind kind() const noexcept { return static_cast<ModuleKind>(op.index()); }
  std::size_t parameter_count() const;
};

struct NetworkSpec {
  std::vector<ModuleSpec> modules;
  std::size_t width = 0;
  std::size_t seq_len = 0;

  /// Checks residual pairing/nesting, the quantize flags and that adjacent
  /// module dimensions compose. Throws InputError.
  void validate() const;
  std::size_t output_width() const;
  std::size_t parameter_count() const;
};

/// Activations indexed by module: entry 0 is the network input, entry l the
/// output of module l (1-based).
using Activations = std::vector<Matrix>;

Activations forward_reference(const NetworkSpec& net, const Matrix& x);

/// The four evaluations needed by the ABC decomposition, per module l >= 1:
/// h[l] = f(h[l-1]), hq[l] = f^q(hq[l-1]), fq_of_h[l] = f^q(h[l-1]),
/// f_of_hq[l] = f(hq[l-1]). Index 0 holds the input in all four vectors.
/// Residual ends take their skip from the same path as their main input.
struct DualTrace {
  Activations h;
  Activations hq;
  Activations fq_of_h;
  Activations f_of_hq;
  // Quantized weight per linear module (quantized once per trace).
  std::vector<std::optional<Matrix>> quantized_weight;

  std::size_t module_count() const noexcept { return h.empty() ? 0 : h.size() - 1; }
  void validate() const;
};

DualTrace forward_dual(const NetworkSpec& net, const Matrix& x, const QuantConfig& cfg);

/// depth blocks of {residual_begin, rmsnorm, attention_unit, residual_end,
/// residual_begin, rmsnorm, linear, relu2, linear, residual_end}, Gaussian
/// weights with stddev 1/sqrt(fan_in), unit RMSNorm gains. `seq_len` is
/// stored on the spec for callers that build inputs from it.
NetworkSpec build_toy_transformer(std::size_t depth, std::size_t width, std::size_t heads,
                                  Rng& rng, std::size_t seq_len = 8);

// Evaluation of a single module; `skip` is required for residual_end.
Matrix apply_module(const ModuleSpec& m, const Matrix& input, const Matrix* skip);
// f^q: quantized linear inputs and the given pre-quantized weights.
struct QuantizedModuleWeights {
  std::optional<Matrix> weight;                    // linear
  std::optional<AttentionUnit> attention;          // attention with quantized projections
};
QuantizedModuleWeights quantize_module_weights(const ModuleSpec& m, const QuantConfig& cfg);
Matrix apply_module_quantized(const ModuleSpec& m, const QuantizedModuleWeights& qw,
                              const Matrix& input, const Matrix* skip, const QuantConfig& cfg);

/// JSON manifest referencing tensors in a tensor archive.
void save_network(const NetworkSpec& net, const std::filesystem::path& manifest_path,
                  const std::filesystem::path& weights_index_path);
/// Loads a manifest; when `weights_index_path` is empty the manifest's
/// "weights" entry (relative to the manifest) is used.
NetworkSpec load_network(const std::filesystem::path& manifest_path,
                         const std::filesystem::path& weights_index_path = {});

}  // namespace qprobe
