// Copyright 2026 The qprobe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qprobe/matrix.hpp"

namespace qprobe {

// `none` is the lossless pass-through: f^q == f.
enum class QuantScheme { absmax_rtn, quest, none };
enum class Granularity { row_wise };
enum class Rounding { half_to_even };

struct ClipGrid {
  double lo = 0.3;
  double hi = 1.0;
  double step = 0.01;

  std::size_t size() const;
  // k-th candidate; the last one is `hi` exactly.
  double at(std::size_t k) const;
  friend bool operator==(const ClipGrid&, const ClipGrid&) = default;
};

struct QuantConfig {
  int bits = 4;
  QuantScheme scheme = QuantScheme::absmax_rtn;
  Granularity granularity = Granularity::row_wise;
  ClipGrid clip_grid;
  Rounding rounding = Rounding::half_to_even;

  void validate() const;
  friend bool operator==(const QuantConfig&, const QuantConfig&) = default;
};

inline constexpr int kMinBits = 2;
// Grid integers stay exact in a double up to 2^52.
inline constexpr int kMaxBits = 52;

/// Largest code of the signed symmetric grid {-(2^(b-1)-1), ..., 2^(b-1)-1}.
std::int64_t grid_max(int bits);

/// Round half to even.
double round_half_even(double x);

std::string to_string(QuantScheme s);
QuantScheme parse_quant_scheme(std::string_view s);

/// QuantConfig as JSON with field names bits, scheme, granularity,
/// clip_grid {lo, hi, step}, rounding.
std::string quant_config_to_json(const QuantConfig& cfg);
QuantConfig quant_config_from_json(std::string_view text);

struct QuantResult {
  Matrix values;               // dequantized, same shape as the input
  std::vector<double> scales;  // per row; Hadamard-domain scale for quest
  // quest only:
  std::vector<double> clip_ratios;
  std::vector<double> clip_bounds;
  std::optional<Mask> mask;    // (rows x padded_cols), Hadamard domain
  std::size_t padded_cols = 0;
};

/// Symmetric AbsMax round-to-nearest per row. A zero row gets scale 0.
QuantResult absmax_quantize_rows(const Matrix& x, const QuantConfig& cfg);

/// QuEST-style: per row zero-pad to a power of two, Hadamard, pick the clip
/// ratio on cfg.clip_grid minimizing the squared error (ties go to the
/// smallest ratio), RTN within [-bound, bound], record the STE mask
/// |x_hat| <= bound, inverse Hadamard and truncate.
QuantResult quest_quantize_rows(const Matrix& x, const QuantConfig& cfg);

/// Dispatch on cfg.scheme.
QuantResult quantize_rows(const Matrix& x, const QuantConfig& cfg);

/// Squared error of clip ratio `c` on one Hadamard-domain row.
double quest_clip_mse(std::span<const double> transformed, double ratio, int bits);

/// Element-wise gradient masking in the Hadamard domain.
Matrix ste_mask_backward(const Matrix& upstream_grad, const Mask& mask);

/// Gradient of the QuEST STE surrogate x -> trunc(H clip(H pad(x))) with the
/// bounds frozen in `q`: trunc(H (mask * H pad(g))).
Matrix quest_ste_backward(const Matrix& grad_values, const QuantResult& q);

/// The STE surrogate itself (rounding replaced by identity inside the frozen
/// clip bounds). Used to validate quest_ste_backward by finite differences.
Matrix quest_surrogate_forward(const Matrix& x, const QuantResult& frozen);

}  // namespace qprobe
