// Copyright 2026 The qprobe Authors
// SPDX-License-Identifier: Apache-2.0

#include "kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "qprobe/errors.hpp"
#include "qprobe/linalg.hpp"

namespace qprobe::detail {

Matrix relu2_forward(const Matrix& x) {
  Matrix y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    y.data()[i] = v > 0.0 ? v * v : 0.0;
  }
  return y;
}

Matrix rmsnorm_forward(const Matrix& x, const std::vector<double>& gamma,
                       std::vector<double>* inv_rms) {
  if (gamma.size() != x.cols()) throw InputError("rmsnorm: gamma length does not match width");
  Matrix y(x.rows(), x.cols());
  if (inv_rms) inv_rms->resize(x.rows());
  const double n = static_cast<double>(x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto row = x.row(r);
    double ss = 0.0;
    for (double v : row) ss += v * v;
    const double inv = 1.0 / std::sqrt(ss / n + kRmsNormEpsilon);
    if (inv_rms) (*inv_rms)[r] = inv;
    auto out = y.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) out[c] = gamma[c] * row[c] * inv;
  }
  return y;
}

Matrix attention_forward(const Matrix& x, const AttentionUnit& w,
                         const ActivationQuantizer& quantize_act, AttentionCache* cache) {
  const std::size_t tokens = x.rows();
  const std::size_t width = x.cols();
  if (w.heads == 0 || width % w.heads != 0) {
    throw InputError("attention: width must be divisible by heads");
  }
  const std::size_t head_dim = width / w.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));

  Matrix x_in = quantize_act ? quantize_act(x) : x;
  Matrix q = matmul_nt(x_in, w.wq);
  Matrix k = matmul_nt(x_in, w.wk);
  Matrix v = matmul_nt(x_in, w.wv);

  Matrix o(tokens, width);
  std::vector<Matrix> probs;
  probs.reserve(w.heads);
  for (std::size_t h = 0; h < w.heads; ++h) {
    const std::size_t off = h * head_dim;
    Matrix p(tokens, tokens);
    for (std::size_t i = 0; i < tokens; ++i) {
      const std::size_t visible = w.causal ? i + 1 : tokens;
      double row_max = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < visible; ++j) {
        double s = 0.0;
        for (std::size_t d = 0; d < head_dim; ++d) s += q(i, off + d) * k(j, off + d);
        s *= inv_sqrt;
        p(i, j) = s;
        row_max = std::max(row_max, s);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < visible; ++j) {
        p(i, j) = std::exp(p(i, j) - row_max);
        z += p(i, j);
      }
      for (std::size_t j = 0; j < visible; ++j) p(i, j) /= z;
      for (std::size_t j = visible; j < tokens; ++j) p(i, j) = 0.0;
      for (std::size_t d = 0; d < head_dim; ++d) {
        double acc = 0.0;
        for (std::size_t j = 0; j < visible; ++j) acc += p(i, j) * v(j, off + d);
        o(i, off + d) = acc;
      }
    }
    probs.push_back(std::move(p));
  }

  Matrix o_in = quantize_act ? quantize_act(o) : o;
  Matrix out = matmul_nt(o_in, w.wo);
  if (cache) {
    cache->x_in = std::move(x_in);
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->probs = std::move(probs);
    cache->o = std::move(o);
    cache->o_in = std::move(o_in);
  }
  return out;
}

}  // namespace qprobe::detail
