// Copyright 2026 The qprobe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>
#include <string_view>

#include "qprobe/matrix.hpp"

namespace qprobe {

enum class OptimizerKind { adamw, muon, psgd, scion, shampoo, soap };

inline constexpr OptimizerKind kAllOptimizers[] = {
    OptimizerKind::adamw, OptimizerKind::muon,    OptimizerKind::psgd,
    OptimizerKind::scion, OptimizerKind::shampoo, OptimizerKind::soap};

std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer_kind(std::string_view name);

struct NsCoefficients {
  double a = 0.0;
  double b = 0.0;
  double c = 0.0;
  friend bool operator==(const NsCoefficients&, const NsCoefficients&) = default;
};

// Quintic coefficients tuned for Muon; the cubic map has unit singular values
// as an exact fixed point (1.5 - 0.5 = 1).
inline constexpr NsCoefficients kQuinticNs{3.4445, -4.7750, 2.0315};
inline constexpr NsCoefficients kCubicNs{1.5, -0.5, 0.0};

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adamw;
  double lr = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;       // first moment (adamw, shampoo, soap)
  double beta2 = 0.999;     // second moment (adamw, shampoo, soap)
  double momentum = 0.95;   // muon, scion
  bool nesterov = true;     // muon
  std::size_t ns_iters = 5;
  std::size_t precond_update_freq = 10;
  double epsilon = 1e-8;
  NsCoefficients ns_coefficients = kQuinticNs;
  double damping = 1e-6;    // added to preconditioner eigenvalues (shampoo)
  double precond_lr = 0.1;  // whitening-fit step (psgd)

  void validate() const;
  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

std::string optimizer_config_to_json(const OptimizerConfig& cfg);
OptimizerConfig optimizer_config_from_json(std::string_view text);

/// Element counts for one m x n layer, gradients included:
/// adamw 3mn, muon 2mn, psgd mn+m^2+n^2, scion 2mn, shampoo 3mn+m^2+n^2,
/// soap 3mn+2m^2+2n^2.
std::size_t state_memory_elements(OptimizerKind kind, std::size_t m, std::size_t n);
/// Shampoo including its inverse-root (eigenbasis-derived) matrices:
/// 3mn+2m^2+2n^2. Equal to state_memory_elements for the other kinds.
std::size_t state_memory_with_eigenbasis(OptimizerKind kind, std::size_t m, std::size_t n);

/// Per-parameter optimizer state. Vector parameters (norm gains) always use
/// AdamW regardless of the configured kind.
class OptimizerState {
 public:
  OptimizerState(OptimizerKind kind, std::size_t rows, std::size_t cols, bool vector_param = false);

  OptimizerKind kind() const noexcept { return kind_; }
  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t step_count() const noexcept { return step_; }

  /// Live float elements held by the state (Table-style accounting, i.e.
  /// without Shampoo's inverse roots).
  std::size_t state_elements() const noexcept;
  /// Shampoo inverse-root matrices; zero for every other kind.
  std::size_t eigenbasis_elements() const noexcept;

  bool all_finite() const noexcept;

  // SOAP: keep Q_L = Q_R = I (test hook for the rotation-identity check).
  void freeze_identity_basis() noexcept { freeze_basis_ = true; }

  const Matrix& left() const noexcept { return left_; }
  const Matrix& right() const noexcept { return right_; }
  const Matrix& left_basis() const noexcept { return left_basis_; }
  const Matrix& right_basis() const noexcept { return right_basis_; }

 private:
  friend void step(const OptimizerConfig&, OptimizerState&, Matrix&, const Matrix&);

  OptimizerKind kind_;
  std::size_t rows_;
  std::size_t cols_;
  std::size_t step_ = 0;
  Matrix grad_;
  Matrix m_;
  Matrix v_;
  Matrix left_, right_;              // L/R statistics, or P_L/P_R for psgd
  Matrix left_basis_, right_basis_;  // shampoo inverse roots, soap eigenbases
  bool has_preconditioner_ = false;
  bool freeze_basis_ = false;
};

/// One update of `w` in place given gradient `g`. Throws NumericalError on a
/// non-finite gradient or state and InputError on shape mismatch.
void step(const OptimizerConfig& cfg, OptimizerState& state, Matrix& w, const Matrix& g);

/// T iterations of X' = aX + b(XX^T)X + c(XX^T)^2 X. The caller normalizes X
/// so that its top singular value is at most one. A zero matrix is returned
/// unchanged.
Matrix newton_schulz(const Matrix& x, std::size_t iterations, const NsCoefficients& coeffs);

}  // namespace qprobe
