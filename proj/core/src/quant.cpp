// Copyright 2026 The qprobe Authors
// SPDX-License-Identifier: Apache-2.0

#include "qprobe/quant.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "json_io.hpp"
#include "qprobe/errors.hpp"
#include "qprobe/linalg.hpp"

namespace qprobe {
namespace {

void require_finite(const Matrix& x, const char* what) {
  if (!x.all_finite()) throw NumericalError(fmt::format("{}: input has NaN or Inf", what));
}

double max_abs(std::span<const double> row) {
  double m = 0.0;
  for (double v : row) m = std::max(m, std::abs(v));
  return m;
}

// Code k maps to (k / qmax) * bound so that the extreme code reproduces the
// bound exactly; this makes re-quantization of on-grid values the identity.
double snap(double v, double bound, std::int64_t qmax) {
  if (bound == 0.0) return 0.0;
  const double q = static_cast<double>(qmax);
  double k = round_half_even(v * q / bound);
  k = std::clamp(k, -q, q);
  return (k / q) * bound;
}

std::vector<double> padded_hadamard(std::span<const double> row, std::size_t padded) {
  std::vector<double> buf(padded, 0.0);
  std::copy(row.begin(), row.end(), buf.begin());
  hadamard_inplace(buf);
  return buf;
}

}  // namespace

std::size_t ClipGrid::size() const {
  return static_cast<std::size_t>(std::llround((hi - lo) / step)) + 1;
}

double ClipGrid::at(std::size_t k) const {
  return k + 1 == size() ? hi : lo + static_cast<double>(k) * step;
}

void QuantConfig::validate() const {
  if (bits < kMinBits || bits > kMaxBits) {
    throw InputError(fmt::format("bits must be in [{}, {}], got {}", kMinBits, kMaxBits, bits));
  }
  if (!(clip_grid.lo < clip_grid.hi) || !(clip_grid.step > 0.0) || !(clip_grid.lo > 0.0)) {
    throw InputError("clip_grid requires 0 < lo < hi and step > 0");
  }
}

std::int64_t grid_max(int bits) { return (std::int64_t{1} << (bits - 1)) - 1; }

double round_half_even(double x) {
  // nearbyint honours the default round-to-nearest-even mode.
  return std::nearbyint(x);
}

std::string to_string(QuantScheme s) {
  switch (s) {
    case QuantScheme::absmax_rtn: return "absmax_rtn";
    case QuantScheme::quest: return "quest";
    case QuantScheme::none: return "none";
  }
  return "?";
}

QuantScheme parse_quant_scheme(std::string_view s) {
  if (s == "absmax_rtn" || s == "absmax") return QuantScheme::absmax_rtn;
  if (s == "quest") return QuantScheme::quest;
  if (s == "none") return QuantScheme::none;
  throw InputError(fmt::format("unknown quantization scheme '{}'", s));
}

std::string quant_config_to_json(const QuantConfig& cfg) {
  return nlohmann::json(cfg).dump();
}

QuantConfig quant_config_from_json(std::string_view text) {
  return parse_json_as<QuantConfig>(text, "quant config");
}

QuantResult absmax_quantize_rows(const Matrix& x, const QuantConfig& cfg) {
  cfg.validate();
  require_finite(x, "absmax_quantize_rows");
  const std::int64_t qmax = grid_max(cfg.bits);
  QuantResult out;
  out.values = Matrix(x.rows(), x.cols());
  out.scales.resize(x.rows());
  out.padded_cols = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto row = x.row(r);
    const double m = max_abs(row);
    out.scales[r] = m / static_cast<double>(qmax);
    auto dst = out.values.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) dst[c] = snap(row[c], m, qmax);
  }
  return out;
}

double quest_clip_mse(std::span<const double> transformed, double ratio, int bits) {
  const std::int64_t qmax = grid_max(bits);
  const double bound = ratio * max_abs(transformed);
  double acc = 0.0;
  for (double v : transformed) {
    const double e = v - snap(v, bound, qmax);
    acc += e * e;
  }
  return acc;
}

QuantResult quest_quantize_rows(const Matrix& x, const QuantConfig& cfg) {
  cfg.validate();
  require_finite(x, "quest_quantize_rows");
  const std::int64_t qmax = grid_max(cfg.bits);
  const std::size_t padded = next_power_of_two(std::max<std::size_t>(x.cols(), 1));
  const std::size_t candidates = cfg.clip_grid.size();

  QuantResult out;
  out.values = Matrix(x.rows(), x.cols());
  out.scales.resize(x.rows());
  out.clip_ratios.resize(x.rows());
  out.clip_bounds.resize(x.rows());
  out.mask = Mask(x.rows(), padded, true);
  out.padded_cols = padded;

  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto t = padded_hadamard(x.row(r), padded);
    const double m = max_abs(t);

    std::size_t best = 0;
    double best_mse = quest_clip_mse(t, cfg.clip_grid.at(0), cfg.bits);
    for (std::size_t k = 1; k < candidates; ++k) {
      const double mse = quest_clip_mse(t, cfg.clip_grid.at(k), cfg.bits);
      if (mse < best_mse) {
        best_mse = mse;
        best = k;
      }
    }
    const double ratio = cfg.clip_grid.at(best);
    const double bound = ratio * m;
    out.clip_ratios[r] = ratio;
    out.clip_bounds[r] = bound;
    out.scales[r] = bound / static_cast<double>(qmax);

    std::vector<double> q(padded);
    for (std::size_t c = 0; c < padded; ++c) {
      q[c] = snap(t[c], bound, qmax);
      out.mask->set(r, c, std::abs(t[c]) <= bound);
    }
    hadamard_inplace(q);
    std::copy_n(q.begin(), x.cols(), out.values.row(r).begin());
  }
  return out;
}

QuantResult quantize_rows(const Matrix& x, const QuantConfig& cfg) {
  switch (cfg.scheme) {
    case QuantScheme::absmax_rtn: return absmax_quantize_rows(x, cfg);
    case QuantScheme::quest: return quest_quantize_rows(x, cfg);
    case QuantScheme::none: {
      require_finite(x, "quantize_rows");
      QuantResult out;
      out.values = x;
      out.scales.assign(x.rows(), 0.0);
      out.padded_cols = x.cols();
      return out;
    }
  }
  throw InputError("unknown quantization scheme");
}

Matrix ste_mask_backward(const Matrix& upstream_grad, const Mask& mask) {
  if (upstream_grad.rows() != mask.rows || upstream_grad.cols() != mask.cols) {
    throw InputError(fmt::format("ste_mask_backward: gradient {}x{} vs mask {}x{}",
                                 upstream_grad.rows(), upstream_grad.cols(), mask.rows, mask.cols));
  }
  Matrix out(upstream_grad.rows(), upstream_grad.cols());
  for (std::size_t i = 0; i < mask.bits.size(); ++i) {
    out.data()[i] = mask.bits[i] ? upstream_grad.data()[i] : 0.0;
  }
  return out;
}

Matrix quest_ste_backward(const Matrix& grad_values, const QuantResult& q) {
  if (!q.mask) throw InputError("quest_ste_backward: quantization result carries no mask");
  const std::size_t padded = q.padded_cols;
  Matrix transformed(grad_values.rows(), padded);
  for (std::size_t r = 0; r < grad_values.rows(); ++r) {
    const auto t = padded_hadamard(grad_values.row(r), padded);
    std::copy(t.begin(), t.end(), transformed.row(r).begin());
  }
  Matrix masked = ste_mask_backward(transformed, *q.mask);
  Matrix out(grad_values.rows(), grad_values.cols());
  for (std::size_t r = 0; r < grad_values.rows(); ++r) {
    auto row = masked.row(r);
    hadamard_inplace(row);
    std::copy_n(row.begin(), grad_values.cols(), out.row(r).begin());
  }
  return out;
}

Matrix quest_surrogate_forward(const Matrix& x, const QuantResult& frozen) {
  const std::size_t padded = frozen.padded_cols;
  Matrix out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto t = padded_hadamard(x.row(r), padded);
    const double bound = frozen.clip_bounds.at(r);
    for (double& v : t) v = std::clamp(v, -bound, bound);
    hadamard_inplace(t);
    std::copy_n(t.begin(), x.cols(), out.row(r).begin());
  }
  return out;
}

}  // namespace qprobe
