// Copyright 2026 The qprobe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qprobe/matrix.hpp"
#include "qprobe/network.hpp"
#include "qprobe/quant.hpp"

namespace qprobe {

// Splitting of the activation change at module l into an input-driven part
// `a` and a function-driven part `b` by averaging both orderings:
//   a = ((f^q(h^q) - f^q(h)) + (f(h^q) - f(h))) / 2
//   b = ((f^q(h^q) - f(h^q)) + (f^q(h) - f(h))) / 2
// so that a + b == h^q[l] - h[l].
struct AbSplit {
  Matrix a;
  Matrix b;
};

AbSplit ab_split(const DualTrace& trace, std::size_t module_index);

/// Per-token squared relative error and its three-way split:
///   A = |a|^2/|h|^2, B = |b|^2/|h|^2, C = 2<a,b>/|h|^2, R = A + B + C.
/// `r_direct` is |a+b|^2/|h|^2 computed independently for cross-checking.
/// Tokens whose reference row is zero are excluded and hold NaN.
struct AbcTerms {
  std::vector<double> r, a, b, c, r_direct;
  std::vector<bool> excluded;
  std::size_t n_excluded = 0;
};

AbcTerms abc_terms(const Matrix& a, const Matrix& b, const Matrix& h_ref);

enum class SummaryStat { mean, truncated_mean_top1pct };

std::string to_string(SummaryStat s);

/// Mean, or mean after dropping the ceil(1%) largest values (at least one
/// value is always kept). NaN entries are skipped. Throws on an empty input.
double summarize(std::span<const double> values, SummaryStat stat);

struct StatPair {
  std::optional<double> mean;
  std::optional<double> truncated;

  std::optional<double> get(SummaryStat s) const {
    return s == SummaryStat::mean ? mean : truncated;
  }
};

StatPair summarize_both(std::span<const double> values);

/// Gain-factorization diagnostics for a linear layer; G1 is per layer, the
/// others per token (NaN where an angle is undefined).
struct LinearGainDiagnostics {
  double g1 = 0.0;
  std::vector<double> g2, cos_phi, cos_psi;
  std::vector<double> discrepancy;  // |G - G1*G2|
};

struct DecompRecord {
  std::size_t module_index = 0;
  std::string module_kind;  // "input" for index 0
  bool quantized = false;

  std::vector<double> r, a, b, c;  // per token
  std::vector<double> gain;        // per token, NaN where undefined
  std::vector<bool> token_excluded;
  std::size_t n_tokens_excluded = 0;
  std::size_t n_gain_undefined = 0;
  // false when no token has a defined gain (e.g. R_prev == 0 everywhere).
  bool gain_defined = false;

  std::optional<LinearGainDiagnostics> linear;

  StatPair r_stat, a_stat, b_stat, c_stat, gain_stat;
  StatPair g1_stat, g2_stat, cos_phi_stat, cos_psi_stat, discrepancy_stat;
};

/// G = A[l] / R[l-1] per token; NaN where R[l-1] == 0 or either token is
/// excluded. Throws for l == 0.
std::vector<double> gain(std::span<const DecompRecord> records, std::size_t module_index);

/// Linear layer under the additive-noise model
///   f(x) = W x,  f^q(x) = (W + eps_w) x + eps_h.
struct NoiseModelLinear {
  Matrix w;
  Matrix eps_w;
  std::vector<double> eps_h;

  void validate() const;
};

struct GainFactors {
  double g1 = 0.0;
  double g2 = 0.0;
  double cos_phi = 0.0;
  double cos_psi = 0.0;
};

/// G1 = (|W + eps/2|_* / |W|_*)^2, cos(phi) = angle(W + eps/2, dh),
/// cos(psi) = angle(W, h_prev), G2 = (cos(phi)/cos(psi))^2.
GainFactors gain_factorization(const NoiseModelLinear& layer, std::span<const double> delta_h,
                               std::span<const double> h_prev);

/// Two-entry trace (upstream state, layer output) for a noise-model layer
/// with rows as tokens. Entry 0 holds h_prev / hq_prev, which may differ.
DualTrace noise_model_trace(const NoiseModelLinear& layer, const Matrix& h_prev,
                            const Matrix& hq_prev);

/// Records for entries 0 and 1 of a noise-model trace, using the generic
/// path (ab_split, abc_terms, gain) plus the closed-form factors per token.
std::vector<DecompRecord> decompose_noise_linear(const NoiseModelLinear& layer,
                                                 const Matrix& h_prev, const Matrix& hq_prev);

struct DecomposeOptions {
  // Spectral-ratio/alignment diagnostics for linear layers (two power
  // iterations per layer).
  bool linear_diagnostics = true;
};

/// Runs forward_dual and returns one record per module plus the input record
/// at index 0.
std::vector<DecompRecord> decompose_network(const NetworkSpec& net, const Matrix& x,
                                            const QuantConfig& cfg,
                                            const DecomposeOptions& options = {});
std::vector<DecompRecord> decompose_trace(const NetworkSpec& net, const DualTrace& trace,
                                          const DecomposeOptions& options = {});

}  // namespace qprobe
