// Copyright 2026 The qprobe Authors
// SPDX-License-Identifier: Apache-2.0

#include "qprobe/decomposition.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "qprobe/errors.hpp"
#include "qprobe/linalg.hpp"

namespace qprobe {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

Matrix half_sum(const Matrix& x, const Matrix& y) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = 0.5 * (x.data()[i] + y.data()[i]);
  return out;
}

DecompRecord make_record(std::size_t index, std::string kind, bool quantized,
                         const AbcTerms& terms) {
  DecompRecord rec;
  rec.module_index = index;
  rec.module_kind = std::move(kind);
  rec.quantized = quantized;
  rec.r = terms.r;
  rec.a = terms.a;
  rec.b = terms.b;
  rec.c = terms.c;
  rec.token_excluded = terms.excluded;
  rec.n_tokens_excluded = terms.n_excluded;
  return rec;
}

DecompRecord input_record(const Matrix& x) {
  const Matrix zero(x.rows(), x.cols());
  DecompRecord rec = make_record(0, "input", false, abc_terms(zero, zero, x));
  rec.gain.assign(x.rows(), kNaN);
  rec.n_gain_undefined = x.rows();
  return rec;
}

void fill_gain(std::vector<DecompRecord>& records, std::size_t l) {
  auto& rec = records[l];
  rec.gain = gain(records, l);
  rec.n_gain_undefined = static_cast<std::size_t>(
      std::count_if(rec.gain.begin(), rec.gain.end(), [](double g) { return std::isnan(g); }));
  rec.gain_defined = rec.n_gain_undefined < rec.gain.size();
}

void fill_summaries(DecompRecord& rec) {
  rec.r_stat = summarize_both(rec.r);
  rec.a_stat = summarize_both(rec.a);
  rec.b_stat = summarize_both(rec.b);
  rec.c_stat = summarize_both(rec.c);
  rec.gain_stat = summarize_both(rec.gain);
  if (rec.linear) {
    const double g1[] = {rec.linear->g1};
    rec.g1_stat = summarize_both(g1);
    rec.g2_stat = summarize_both(rec.linear->g2);
    rec.cos_phi_stat = summarize_both(rec.linear->cos_phi);
    rec.cos_psi_stat = summarize_both(rec.linear->cos_psi);
    rec.discrepancy_stat = summarize_both(rec.linear->discrepancy);
  }
}

// Closed-form factors for every token of a linear layer, given W and the
// weight perturbation.
LinearGainDiagnostics linear_diagnostics(const Matrix& w, const Matrix& eps_w, const Matrix& h_prev,
                                         const Matrix& hq_prev, std::span<const double> gain) {
  const Matrix w_half = w + 0.5 * eps_w;
  const double w_norm = spectral_norm(w);
  const double w_half_norm = spectral_norm(w_half);
  LinearGainDiagnostics d;
  d.g1 = w_norm == 0.0 ? kNaN : (w_half_norm / w_norm) * (w_half_norm / w_norm);
  const std::size_t tokens = h_prev.rows();
  d.g2.assign(tokens, kNaN);
  d.cos_phi.assign(tokens, kNaN);
  d.cos_psi.assign(tokens, kNaN);
  d.discrepancy.assign(tokens, kNaN);
  std::vector<double> delta(h_prev.cols());
  for (std::size_t t = 0; t < tokens; ++t) {
    const auto hp = h_prev.row(t);
    const auto hqp = hq_prev.row(t);
    for (std::size_t j = 0; j < delta.size(); ++j) delta[j] = hqp[j] - hp[j];
    if (w_half_norm > 0.0 && l2_norm(delta) > 0.0) {
      d.cos_phi[t] = matrix_vector_angle_cos(w_half, w_half_norm, delta);
    }
    if (w_norm > 0.0 && l2_norm(hp) > 0.0) {
      d.cos_psi[t] = matrix_vector_angle_cos(w, w_norm, hp);
    }
    if (!std::isnan(d.cos_phi[t]) && !std::isnan(d.cos_psi[t]) && d.cos_psi[t] > 0.0) {
      const double ratio = d.cos_phi[t] / d.cos_psi[t];
      d.g2[t] = ratio * ratio;
      if (!std::isnan(gain[t])) d.discrepancy[t] = std::abs(gain[t] - d.g1 * d.g2[t]);
    }
  }
  return d;
}

}  // namespace

AbSplit ab_split(const DualTrace& trace, std::size_t l) {
  if (l == 0 || l >= trace.h.size()) {
    throw InputError(fmt::format("ab_split: module index {} out of range [1, {}]", l,
                                 trace.module_count()));
  }
  const Matrix& fq_hq = trace.hq[l];
  const Matrix& fq_h = trace.fq_of_h[l];
  const Matrix& f_hq = trace.f_of_hq[l];
  const Matrix& f_h = trace.h[l];
  if (!fq_hq.same_shape(fq_h) || !fq_hq.same_shape(f_hq) || !fq_hq.same_shape(f_h)) {
    throw InputError("ab_split: trace tensors differ in shape");
  }
  return {half_sum(fq_hq - fq_h, f_hq - f_h), half_sum(fq_hq - f_hq, fq_h - f_h)};
}

AbcTerms abc_terms(const Matrix& a, const Matrix& b, const Matrix& h_ref) {
  if (!a.same_shape(b) || !a.same_shape(h_ref)) throw InputError("abc_terms: shape mismatch");
  const std::size_t tokens = a.rows();
  AbcTerms t;
  for (auto* v : {&t.r, &t.a, &t.b, &t.c, &t.r_direct}) v->assign(tokens, kNaN);
  t.excluded.assign(tokens, false);
  std::vector<double> sum(a.cols());
  for (std::size_t i = 0; i < tokens; ++i) {
    const double hn = l2_norm(h_ref.row(i));
    if (hn == 0.0) {
      t.excluded[i] = true;
      ++t.n_excluded;
      continue;
    }
    const double h2 = hn * hn;
    const double an = l2_norm(a.row(i));
    const double bn = l2_norm(b.row(i));
    t.a[i] = (an / hn) * (an / hn);
    t.b[i] = (bn / hn) * (bn / hn);
    t.c[i] = 2.0 * dot(a.row(i), b.row(i)) / h2;
    t.r[i] = t.a[i] + t.b[i] + t.c[i];
    const auto ar = a.row(i);
    const auto br = b.row(i);
    for (std::size_t j = 0; j < sum.size(); ++j) sum[j] = ar[j] + br[j];
    const double sn = l2_norm(sum);
    t.r_direct[i] = (sn / hn) * (sn / hn);
  }
  return t;
}

std::string to_string(SummaryStat s) {
  return s == SummaryStat::mean ? "mean" : "trunc";
}

double summarize(std::span<const double> values, SummaryStat stat) {
  std::vector<double> v;
  v.reserve(values.size());
  for (double x : values) {
    if (!std::isnan(x)) v.push_back(x);
  }
  if (v.empty()) throw InputError("summarize: no values");
  if (stat == SummaryStat::truncated_mean_top1pct) {
    const std::size_t n = v.size();
    std::size_t drop = static_cast<std::size_t>(std::ceil(0.01 * static_cast<double>(n)));
    drop = std::min(drop, n - 1);
    std::sort(v.begin(), v.end());
    v.resize(n - drop);
  }
  double acc = 0.0;
  for (double x : v) acc += x;
  return acc / static_cast<double>(v.size());
}

StatPair summarize_both(std::span<const double> values) {
  const bool any = std::any_of(values.begin(), values.end(), [](double x) { return !std::isnan(x); });
  if (!any) return {};
  return {summarize(values, SummaryStat::mean),
          summarize(values, SummaryStat::truncated_mean_top1pct)};
}

std::vector<double> gain(std::span<const DecompRecord> records, std::size_t l) {
  if (l == 0) throw InputError("gain: module 0 has no previous module");
  if (l >= records.size()) throw InputError("gain: module index out of range");
  const auto& prev = records[l - 1];
  const auto& cur = records[l];
  if (prev.r.size() != cur.a.size()) throw InputError("gain: token counts differ");
  std::vector<double> g(cur.a.size(), kNaN);
  for (std::size_t t = 0; t < g.size(); ++t) {
    const double r_prev = prev.r[t];
    if (std::isnan(r_prev) || std::isnan(cur.a[t]) || r_prev == 0.0) continue;
    g[t] = cur.a[t] / r_prev;
  }
  return g;
}

void NoiseModelLinear::validate() const {
  if (!w.same_shape(eps_w)) throw InputError("noise model: eps_w shape differs from W");
  if (eps_h.size() != w.rows()) throw InputError("noise model: eps_h length differs from W rows");
}

GainFactors gain_factorization(const NoiseModelLinear& layer, std::span<const double> delta_h,
                               std::span<const double> h_prev) {
  layer.validate();
  if (delta_h.size() != layer.w.cols() || h_prev.size() != layer.w.cols()) {
    throw InputError("gain_factorization: vector length does not match W columns");
  }
  const Matrix w_half = layer.w + 0.5 * layer.eps_w;
  const double w_norm = spectral_norm(layer.w);
  const double w_half_norm = spectral_norm(w_half);
  if (w_norm == 0.0 || w_half_norm == 0.0) {
    throw InputError("gain_factorization: W and W + eps/2 must be nonzero");
  }
  GainFactors f;
  f.g1 = (w_half_norm / w_norm) * (w_half_norm / w_norm);
  f.cos_phi = matrix_vector_angle_cos(w_half, w_half_norm, delta_h);
  f.cos_psi = matrix_vector_angle_cos(layer.w, w_norm, h_prev);
  if (f.cos_psi == 0.0) throw InputError("gain_factorization: h_prev lies in the null space of W");
  const double ratio = f.cos_phi / f.cos_psi;
  f.g2 = ratio * ratio;
  return f;
}

DualTrace noise_model_trace(const NoiseModelLinear& layer, const Matrix& h_prev,
                            const Matrix& hq_prev) {
  layer.validate();
  if (!h_prev.same_shape(hq_prev) || h_prev.cols() != layer.w.cols()) {
    throw InputError("noise_model_trace: activation shapes do not match the layer");
  }
  const Matrix w_q = layer.w + layer.eps_w;
  const auto f = [&](const Matrix& x) { return matmul_nt(x, layer.w); };
  const auto fq = [&](const Matrix& x) {
    Matrix y = matmul_nt(x, w_q);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      auto row = y.row(r);
      for (std::size_t c = 0; c < row.size(); ++c) row[c] += layer.eps_h[c];
    }
    return y;
  };
  DualTrace t;
  t.h = {h_prev, f(h_prev)};
  t.hq = {hq_prev, fq(hq_prev)};
  t.fq_of_h = {h_prev, fq(h_prev)};
  t.f_of_hq = {hq_prev, f(hq_prev)};
  t.quantized_weight = {std::nullopt, w_q};
  return t;
}

std::vector<DecompRecord> decompose_noise_linear(const NoiseModelLinear& layer,
                                                 const Matrix& h_prev, const Matrix& hq_prev) {
  const DualTrace t = noise_model_trace(layer, h_prev, hq_prev);
  std::vector<DecompRecord> records;
  // Entry 0 carries the upstream error R_prev = |hq_prev - h_prev|^2 / |h_prev|^2.
  const Matrix zero(h_prev.rows(), h_prev.cols());
  records.push_back(make_record(0, "upstream", false, abc_terms(hq_prev - h_prev, zero, h_prev)));
  records[0].gain.assign(h_prev.rows(), kNaN);
  const AbSplit split = ab_split(t, 1);
  records.push_back(make_record(1, "linear", true, abc_terms(split.a, split.b, t.h[1])));
  fill_gain(records, 1);
  records[1].linear = linear_diagnostics(layer.w, layer.eps_w, h_prev, hq_prev, records[1].gain);
  for (auto& r : records) fill_summaries(r);
  return records;
}

std::vector<DecompRecord> decompose_trace(const NetworkSpec& net, const DualTrace& trace,
                                          const DecomposeOptions& options) {
  trace.validate();
  if (trace.module_count() != net.modules.size()) {
    throw InputError("decompose: trace does not belong to this network");
  }
  std::vector<DecompRecord> records;
  records.reserve(trace.h.size());
  records.push_back(input_record(trace.h[0]));
  for (std::size_t l = 1; l < trace.h.size(); ++l) {
    const ModuleSpec& m = net.modules[l - 1];
    const AbSplit split = ab_split(trace, l);
    records.push_back(make_record(l, to_string(m.kind()), m.quantize,
                                  abc_terms(split.a, split.b, trace.h[l])));
    fill_gain(records, l);
    if (options.linear_diagnostics && trace.quantized_weight[l]) {
      const Matrix& w = std::get<Linear>(m.op).weight;
      records[l].linear = linear_diagnostics(w, *trace.quantized_weight[l] - w, trace.h[l - 1],
                                             trace.hq[l - 1], records[l].gain);
    }
  }
  for (auto& r : records) fill_summaries(r);
  return records;
}

std::vector<DecompRecord> decompose_network(const NetworkSpec& net, const Matrix& x,
                                            const QuantConfig& cfg, const DecomposeOptions& options) {
  return decompose_trace(net, forward_dual(net, x, cfg), options);
}

}  // namespace qprobe
