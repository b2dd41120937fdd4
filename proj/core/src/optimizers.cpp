// Copyright 2026 The qprobe Authors
// SPDX-License-Identifier: Apache-2.0

#include "qprobe/optimizers.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include <fmt/format.h>

#include "json.hpp"
#include "json_io.hpp"
#include "qprobe/errors.hpp"
#include "qprobe/linalg.hpp"

namespace qprobe {
namespace {

constexpr double kNormFloor = 1e-7;

struct KindName {
  OptimizerKind kind;
  const char* name;
};

constexpr KindName kKindNames[] = {
    {OptimizerKind::adamw, "adamw"}, {OptimizerKind::muon, "muon"},
    {OptimizerKind::psgd, "psgd"},   {OptimizerKind::scion, "scion"},
    {OptimizerKind::shampoo, "shampoo"}, {OptimizerKind::soap, "soap"}};

Matrix empty() { return Matrix(0, 0); }

void decay(Matrix& w, const OptimizerConfig& cfg) {
  if (cfg.weight_decay == 0.0) return;
  w *= 1.0 - cfg.lr * cfg.weight_decay;
}

void ema(Matrix& acc, const Matrix& x, double beta) {
  auto a = acc.data();
  auto v = x.data();
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = beta * a[i] + (1.0 - beta) * v[i];
}

void ema_sq(Matrix& acc, const Matrix& x, double beta) {
  auto a = acc.data();
  auto v = x.data();
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = beta * a[i] + (1.0 - beta) * v[i] * v[i];
}

// m_hat / (sqrt(v_hat) + eps), elementwise.
Matrix adam_direction(const Matrix& m, const Matrix& v, const OptimizerConfig& cfg, std::size_t t) {
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  Matrix d(m.rows(), m.cols());
  auto dm = d.data();
  auto mm = m.data();
  auto vv = v.data();
  for (std::size_t i = 0; i < dm.size(); ++i) {
    dm[i] = (mm[i] / c1) / (std::sqrt(vv[i] / c2) + cfg.epsilon);
  }
  return d;
}

void apply(Matrix& w, const Matrix& d, double scale) {
  auto wv = w.data();
  auto dv = d.data();
  for (std::size_t i = 0; i < wv.size(); ++i) wv[i] -= scale * dv[i];
}

Matrix orthogonalized(const Matrix& u, const OptimizerConfig& cfg) {
  const double norm = frobenius_norm(u);
  Matrix x = u;
  x *= 1.0 / (norm + kNormFloor);
  return newton_schulz(x, cfg.ns_iters, cfg.ns_coefficients);
}

// Adds g g^T (or g^T g) to a symmetric accumulator and re-symmetrizes.
void accumulate_gram(Matrix& acc, const Matrix& g, bool left) {
  acc += left ? matmul_nt(g, g) : matmul_tn(g, g);
  symmetrize(acc);
}

// V diag(f(lambda)) V^T for f(l) = (max(l,0) + damping)^(-1/4); a zero
// shifted eigenvalue maps to zero (pseudo-inverse).
Matrix inverse_fourth_root(const Matrix& s, double damping) {
  const SymmetricEigen eig = symmetric_eigen(s);
  std::vector<double> mapped(eig.values.size());
  for (std::size_t i = 0; i < mapped.size(); ++i) {
    const double shifted = std::max(eig.values[i], 0.0) + damping;
    mapped[i] = shifted > 0.0 ? std::pow(shifted, -0.25) : 0.0;
  }
  return eigen_reconstruct(eig, mapped);
}

// One symmetrized multiplicative step of P toward S = I, where S is the
// second moment of the preconditioned gradient on this side.
void whitening_fit(Matrix& p, const Matrix& s, double mu) {
  Matrix e = s;
  for (std::size_t i = 0; i < e.rows(); ++i) e(i, i) -= 1.0;
  const double step = mu / std::max(1.0, frobenius_norm(e));
  Matrix upd = matmul(e, p);
  upd += matmul(p, e);
  upd *= 0.5 * step;
  p -= upd;
  symmetrize(p);
}

void check_beta(double b, const char* name) {
  if (!(b >= 0.0 && b < 1.0)) throw InputError(fmt::format("{} must be in [0, 1), got {}", name, b));
}

}  // namespace

std::string to_string(OptimizerKind kind) {
  for (const auto& kn : kKindNames) {
    if (kn.kind == kind) return kn.name;
  }
  return "unknown";
}

OptimizerKind parse_optimizer_kind(std::string_view name) {
  for (const auto& kn : kKindNames) {
    if (name == kn.name) return kn.kind;
  }
  throw InputError(fmt::format("unknown optimizer '{}'", name));
}

void OptimizerConfig::validate() const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw InputError(fmt::format("lr must be >= 0, got {}", lr));
  if (!(weight_decay >= 0.0)) throw InputError("weight_decay must be >= 0");
  check_beta(beta1, "beta1");
  check_beta(beta2, "beta2");
  check_beta(momentum, "momentum");
  if (ns_iters < 1) throw InputError("ns_iters must be >= 1");
  if (precond_update_freq < 1) throw InputError("precond_update_freq must be >= 1");
  if (!(epsilon >= 0.0)) throw InputError("epsilon must be >= 0");
  if (!(damping >= 0.0)) throw InputError("damping must be >= 0");
  if (!(precond_lr > 0.0)) throw InputError("precond_lr must be > 0");
}

void to_json(nlohmann::json& j, const OptimizerConfig& c) {
  j = {{"kind", to_string(c.kind)},
       {"lr", c.lr},
       {"weight_decay", c.weight_decay},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"momentum", c.momentum},
       {"nesterov", c.nesterov},
       {"ns_iters", c.ns_iters},
       {"precond_update_freq", c.precond_update_freq},
       {"epsilon", c.epsilon},
       {"ns_coefficients", {c.ns_coefficients.a, c.ns_coefficients.b, c.ns_coefficients.c}},
       {"damping", c.damping},
       {"precond_lr", c.precond_lr}};
}

void from_json(const nlohmann::json& j, OptimizerConfig& c) {
  if (j.contains("kind")) c.kind = parse_optimizer_kind(j.at("kind").get<std::string>());
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.momentum = j.value("momentum", c.momentum);
  c.nesterov = j.value("nesterov", c.nesterov);
  c.ns_iters = j.value("ns_iters", c.ns_iters);
  c.precond_update_freq = j.value("precond_update_freq", c.precond_update_freq);
  c.epsilon = j.value("epsilon", c.epsilon);
  if (j.contains("ns_coefficients")) {
    const auto& a = j.at("ns_coefficients");
    if (!a.is_array() || a.size() != 3) throw InputError("ns_coefficients must be [a, b, c]");
    c.ns_coefficients = {a[0].get<double>(), a[1].get<double>(), a[2].get<double>()};
  }
  c.damping = j.value("damping", c.damping);
  c.precond_lr = j.value("precond_lr", c.precond_lr);
  c.validate();
}

std::string optimizer_config_to_json(const OptimizerConfig& cfg) {
  nlohmann::json j = cfg;
  return j.dump(2);
}

OptimizerConfig optimizer_config_from_json(std::string_view text) {
  return parse_json_as<OptimizerConfig>(text, "optimizer config");
}

std::size_t state_memory_elements(OptimizerKind kind, std::size_t m, std::size_t n) {
  const std::size_t mn = m * n;
  switch (kind) {
    case OptimizerKind::adamw: return 3 * mn;
    case OptimizerKind::muon: return 2 * mn;
    case OptimizerKind::psgd: return mn + m * m + n * n;
    case OptimizerKind::scion: return 2 * mn;
    case OptimizerKind::shampoo: return 3 * mn + m * m + n * n;
    case OptimizerKind::soap: return 3 * mn + 2 * m * m + 2 * n * n;
  }
  return 0;
}

std::size_t state_memory_with_eigenbasis(OptimizerKind kind, std::size_t m, std::size_t n) {
  if (kind == OptimizerKind::shampoo) return state_memory_elements(kind, m, n) + m * m + n * n;
  return state_memory_elements(kind, m, n);
}

OptimizerState::OptimizerState(OptimizerKind kind, std::size_t rows, std::size_t cols, bool vector_param)
    : kind_(vector_param ? OptimizerKind::adamw : kind),
      rows_(rows),
      cols_(cols),
      grad_(rows, cols),
      m_(empty()),
      v_(empty()),
      left_(empty()),
      right_(empty()),
      left_basis_(empty()),
      right_basis_(empty()) {
  if (rows == 0 || cols == 0) throw InputError("optimizer state needs a non-empty parameter");
  switch (kind_) {
    case OptimizerKind::adamw:
      m_ = Matrix(rows, cols);
      v_ = Matrix(rows, cols);
      break;
    case OptimizerKind::muon:
    case OptimizerKind::scion:
      m_ = Matrix(rows, cols);
      break;
    case OptimizerKind::psgd:
      left_ = Matrix::identity(rows);
      right_ = Matrix::identity(cols);
      break;
    case OptimizerKind::shampoo:
      m_ = Matrix(rows, cols);
      v_ = Matrix(rows, cols);
      left_ = Matrix(rows, rows);
      right_ = Matrix(cols, cols);
      left_basis_ = Matrix(rows, rows);
      right_basis_ = Matrix(cols, cols);
      break;
    case OptimizerKind::soap:
      m_ = Matrix(rows, cols);
      v_ = Matrix(rows, cols);
      left_ = Matrix(rows, rows);
      right_ = Matrix(cols, cols);
      left_basis_ = Matrix::identity(rows);
      right_basis_ = Matrix::identity(cols);
      break;
  }
}

std::size_t OptimizerState::state_elements() const noexcept {
  std::size_t total = grad_.size() + m_.size() + v_.size() + left_.size() + right_.size();
  if (kind_ != OptimizerKind::shampoo) total += left_basis_.size() + right_basis_.size();
  return total;
}

std::size_t OptimizerState::eigenbasis_elements() const noexcept {
  return kind_ == OptimizerKind::shampoo ? left_basis_.size() + right_basis_.size() : 0;
}

bool OptimizerState::all_finite() const noexcept {
  return grad_.all_finite() && m_.all_finite() && v_.all_finite() && left_.all_finite() &&
         right_.all_finite() && left_basis_.all_finite() && right_basis_.all_finite();
}

Matrix newton_schulz(const Matrix& x, std::size_t iterations, const NsCoefficients& k) {
  if (frobenius_norm(x) == 0.0) return x;
  const bool tall = x.rows() > x.cols();
  Matrix cur = tall ? x.transposed() : x;
  for (std::size_t it = 0; it < iterations; ++it) {
    const Matrix a = matmul_nt(cur, cur);
    Matrix b = a;
    b *= k.b;
    if (k.c != 0.0) {
      Matrix aa = matmul(a, a);
      aa *= k.c;
      b += aa;
    }
    Matrix next = matmul(b, cur);
    Matrix lin = cur;
    lin *= k.a;
    next += lin;
    cur = std::move(next);
  }
  return tall ? cur.transposed() : cur;
}

void step(const OptimizerConfig& cfg, OptimizerState& s, Matrix& w, const Matrix& g) {
  if (w.rows() != s.rows_ || w.cols() != s.cols_ || !w.same_shape(g)) {
    throw InputError(fmt::format("optimizer step: state {}x{}, weight {}x{}, gradient {}x{}", s.rows_,
                                 s.cols_, w.rows(), w.cols(), g.rows(), g.cols()));
  }
  if (!g.all_finite()) throw NumericalError(fmt::format("optimizer step {}: gradient has NaN or Inf", s.step_ + 1));
  if (!s.all_finite()) throw NumericalError(fmt::format("optimizer step {}: state is not finite", s.step_ + 1));

  const std::size_t t = ++s.step_;
  s.grad_ = g;
  const bool refresh = t % cfg.precond_update_freq == 0;

  switch (s.kind_) {
    case OptimizerKind::adamw: {
      ema(s.m_, g, cfg.beta1);
      ema_sq(s.v_, g, cfg.beta2);
      const Matrix d = adam_direction(s.m_, s.v_, cfg, t);
      decay(w, cfg);
      apply(w, d, cfg.lr);
      break;
    }
    case OptimizerKind::muon: {
      s.m_ *= cfg.momentum;
      s.m_ += g;
      Matrix u = s.m_;
      if (cfg.nesterov) {
        u *= cfg.momentum;
        u += g;
      }
      const Matrix o = orthogonalized(u, cfg);
      const double hi = static_cast<double>(std::max(s.rows_, s.cols_));
      const double lo = static_cast<double>(std::min(s.rows_, s.cols_));
      decay(w, cfg);
      apply(w, o, cfg.lr * std::sqrt(hi / lo));
      break;
    }
    case OptimizerKind::scion: {
      ema(s.m_, g, cfg.momentum);
      const Matrix o = orthogonalized(s.m_, cfg);
      const double scale = std::sqrt(static_cast<double>(s.rows_) / static_cast<double>(s.cols_));
      decay(w, cfg);
      apply(w, o, cfg.lr * scale);
      break;
    }
    case OptimizerKind::psgd: {
      if (t == 1 || refresh) {
        const Matrix a = matmul(matmul(s.left_, g), s.right_);
        Matrix sl = matmul_nt(a, a);
        sl *= 1.0 / static_cast<double>(s.cols_);
        Matrix sr = matmul_tn(a, a);
        sr *= 1.0 / static_cast<double>(s.rows_);
        whitening_fit(s.left_, sl, cfg.precond_lr);
        whitening_fit(s.right_, sr, cfg.precond_lr);
      }
      const Matrix d = matmul(matmul(s.left_, g), s.right_);
      decay(w, cfg);
      apply(w, d, cfg.lr);
      break;
    }
    case OptimizerKind::shampoo: {
      accumulate_gram(s.left_, g, true);
      accumulate_gram(s.right_, g, false);
      ema(s.m_, g, cfg.beta1);
      ema_sq(s.v_, g, cfg.beta2);
      if (refresh) {
        s.left_basis_ = inverse_fourth_root(s.left_, cfg.damping);
        s.right_basis_ = inverse_fourth_root(s.right_, cfg.damping);
        s.has_preconditioner_ = true;
      }
      Matrix d(0, 0);
      if (s.has_preconditioner_) {
        Matrix mhat = s.m_;
        mhat *= 1.0 / (1.0 - std::pow(cfg.beta1, static_cast<double>(t)));
        d = matmul(matmul(s.left_basis_, mhat), s.right_basis_);
      } else {
        d = adam_direction(s.m_, s.v_, cfg, t);
      }
      decay(w, cfg);
      apply(w, d, cfg.lr);
      break;
    }
    case OptimizerKind::soap: {
      accumulate_gram(s.left_, g, true);
      accumulate_gram(s.right_, g, false);
      if ((t == 1 || refresh) && !s.freeze_basis_) {
        s.left_basis_ = symmetric_eigen(s.left_).vectors;
        s.right_basis_ = symmetric_eigen(s.right_).vectors;
      }
      const Matrix& ql = s.left_basis_;
      const Matrix& qr = s.right_basis_;
      ema(s.m_, g, cfg.beta1);
      ema_sq(s.v_, matmul(matmul_tn(ql, g), qr), cfg.beta2);
      const Matrix mrot = matmul(matmul_tn(ql, s.m_), qr);
      const Matrix nrot = adam_direction(mrot, s.v_, cfg, t);
      const Matrix d = matmul_nt(matmul(ql, nrot), qr);
      decay(w, cfg);
      apply(w, d, cfg.lr);
      break;
    }
  }
  if (!w.all_finite()) throw NumericalError(fmt::format("optimizer step {}: weights became non-finite", t));
}

}  // namespace qprobe
