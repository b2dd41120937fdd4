// Copyright 2026 The qprobe Authors
// SPDX-License-Identifier: Apache-2.0

#include "qprobe/backprop.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "kernels.hpp"
#include "qprobe/errors.hpp"
#include "qprobe/linalg.hpp"

namespace qprobe {
namespace {

// Clip within frozen per-row bounds in the Hadamard domain. The mask is taken
// from the actual input so that backward matches this forward exactly.
Matrix surrogate_slot(const Matrix& x, const QuantResult& frozen, QuantResult& record) {
  const std::size_t padded = next_power_of_two(x.cols());
  if (frozen.clip_bounds.size() != x.rows() || frozen.padded_cols != padded) {
    throw InputError("surrogate forward: frozen quantizer does not match the tensor");
  }
  record = QuantResult{};
  record.values = Matrix(x.rows(), x.cols());
  record.clip_bounds = frozen.clip_bounds;
  record.clip_ratios = frozen.clip_ratios;
  record.scales = frozen.scales;
  record.padded_cols = padded;
  record.mask = Mask(x.rows(), padded, true);
  std::vector<double> buf(padded);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    std::fill(buf.begin(), buf.end(), 0.0);
    std::copy(x.row(r).begin(), x.row(r).end(), buf.begin());
    hadamard_inplace(buf);
    const double bound = frozen.clip_bounds[r];
    for (std::size_t c = 0; c < padded; ++c) {
      record.mask->set(r, c, std::abs(buf[c]) <= bound);
      buf[c] = std::clamp(buf[c], -bound, bound);
    }
    hadamard_inplace(buf);
    std::copy_n(buf.begin(), x.cols(), record.values.row(r).begin());
  }
  return record.values;
}

class SlotQuantizer {
 public:
  SlotQuantizer(const TapeOptions& opt, Tape& tape) : opt_(opt), tape_(tape) {}

  Matrix operator()(const Matrix& x, ModuleTape& mt) {
    const std::size_t idx = tape_.slots.size();
    mt.slots.push_back(idx);
    if (opt_.mode == QuantMode::qat) {
      QuantResult r = quantize_rows(x, opt_.quant);
      Matrix v = r.values;
      tape_.slots.push_back(std::move(r));
      return v;
    }
    if (!opt_.frozen || idx >= opt_.frozen->size()) {
      throw InputError("surrogate forward needs one frozen quantizer per quantized tensor");
    }
    const QuantResult& f = (*opt_.frozen)[idx];
    tape_.slots.emplace_back();
    if (!f.mask) {
      tape_.slots.back().values = x;
      return x;
    }
    return surrogate_slot(x, f, tape_.slots.back());
  }

 private:
  const TapeOptions& opt_;
  Tape& tape_;
};

Matrix slot_backward(const Matrix& g, const QuantResult& q) {
  return q.mask ? quest_ste_backward(g, q) : g;
}

// Output projection: out = o_in Wo^T.
void output_projection_backward(const ModuleTape& mt, const Matrix& dout, Matrix& dwo, Matrix& do_in) {
  dwo = matmul_tn(dout, mt.attn_o_in);
  do_in = matmul(dout, mt.attn_weights.wo);
}

void attention_core_backward(const ModuleTape& mt, const Matrix& d_o, Matrix& dq, Matrix& dk, Matrix& dv) {
  const std::size_t tokens = mt.attn_q.rows();
  const std::size_t width = mt.attn_q.cols();
  const std::size_t heads = mt.attn_weights.heads;
  const std::size_t head_dim = width / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  dq = Matrix(tokens, width);
  dk = Matrix(tokens, width);
  dv = Matrix(tokens, width);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * head_dim;
    const Matrix& p = mt.attn_probs[h];
    Matrix dp(tokens, tokens);
    for (std::size_t i = 0; i < tokens; ++i) {
      for (std::size_t j = 0; j < tokens; ++j) {
        if (p(i, j) == 0.0) continue;
        double s = 0.0;
        for (std::size_t d = 0; d < head_dim; ++d) s += d_o(i, off + d) * mt.attn_v(j, off + d);
        dp(i, j) = s;
      }
    }
    for (std::size_t j = 0; j < tokens; ++j) {
      for (std::size_t d = 0; d < head_dim; ++d) {
        double s = 0.0;
        for (std::size_t i = 0; i < tokens; ++i) s += p(i, j) * d_o(i, off + d);
        dv(j, off + d) = s;
      }
    }
    Matrix ds(tokens, tokens);
    for (std::size_t i = 0; i < tokens; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < tokens; ++j) row += dp(i, j) * p(i, j);
      for (std::size_t j = 0; j < tokens; ++j) ds(i, j) = p(i, j) * (dp(i, j) - row) * inv_sqrt;
    }
    for (std::size_t i = 0; i < tokens; ++i) {
      for (std::size_t d = 0; d < head_dim; ++d) {
        double sq = 0.0;
        double sk = 0.0;
        for (std::size_t j = 0; j < tokens; ++j) {
          sq += ds(i, j) * mt.attn_k(j, off + d);
          sk += ds(j, i) * mt.attn_q(j, off + d);
        }
        dq(i, off + d) = sq;
        dk(i, off + d) = sk;
      }
    }
  }
}

double rel_error(const Matrix& a, const Matrix& n) {
  const double na = frobenius_norm(a);
  const double nn = frobenius_norm(n);
  const double denom = std::max(na, nn);
  if (denom < 1e-300) return 0.0;
  return frobenius_norm(a - n) / denom;
}

}  // namespace

std::vector<ParamView> parameter_views(NetworkSpec& net) {
  std::vector<ParamView> out;
  for (std::size_t i = 0; i < net.modules.size(); ++i) {
    const std::size_t l = i + 1;
    auto& op = net.modules[i].op;
    auto add = [&](const char* field, Matrix& m) {
      out.push_back({l, fmt::format("m{}.{}", l, field), m.rows(), m.cols(), m.data(), false});
    };
    if (auto* lin = std::get_if<Linear>(&op)) {
      add("weight", lin->weight);
    } else if (auto* norm = std::get_if<RmsNorm>(&op)) {
      out.push_back({l, fmt::format("m{}.gamma", l), 1, norm->gamma.size(),
                     std::span<double>(norm->gamma), true});
    } else if (auto* att = std::get_if<AttentionUnit>(&op)) {
      add("wq", att->wq);
      add("wk", att->wk);
      add("wv", att->wv);
      add("wo", att->wo);
    }
  }
  return out;
}

Tape forward_tape(const NetworkSpec& net, const Matrix& x, const TapeOptions& opt) {
  net.validate();
  if (x.cols() != net.width || (net.seq_len != 0 && x.rows() != net.seq_len)) {
    throw InputError(fmt::format("input is {}x{}, network expects {}x{}", x.rows(), x.cols(),
                                 net.seq_len, net.width));
  }
  if (!x.all_finite()) throw NumericalError("network input has NaN or Inf");
  if (opt.mode != QuantMode::off) opt.quant.validate();

  Tape tape;
  tape.acts.reserve(net.modules.size() + 1);
  tape.acts.push_back(x);
  tape.modules.resize(net.modules.size());
  SlotQuantizer quantize(opt, tape);
  std::vector<Matrix> skips;

  for (std::size_t i = 0; i < net.modules.size(); ++i) {
    const ModuleSpec& m = net.modules[i];
    ModuleTape& mt = tape.modules[i];
    const Matrix in = tape.acts.back();
    const bool quant = m.quantize && opt.mode != QuantMode::off;
    Matrix out;
    switch (m.kind()) {
      case ModuleKind::linear: {
        const Linear& lin = std::get<Linear>(m.op);
        if (in.cols() != lin.weight.cols()) throw InputError("linear: input width mismatch");
        mt.x_used = quant ? quantize(in, mt) : in;
        mt.w_used = quant ? quantize(lin.weight, mt) : lin.weight;
        out = matmul_nt(mt.x_used, mt.w_used);
        break;
      }
      case ModuleKind::rmsnorm:
        out = detail::rmsnorm_forward(in, std::get<RmsNorm>(m.op).gamma, &mt.inv_rms);
        break;
      case ModuleKind::relu2:
        out = detail::relu2_forward(in);
        break;
      case ModuleKind::residual_begin:
        skips.push_back(in);
        out = in;
        break;
      case ModuleKind::residual_end:
        out = in;
        out += skips.back();
        skips.pop_back();
        break;
      case ModuleKind::attention_unit: {
        const AttentionUnit& a = std::get<AttentionUnit>(m.op);
        mt.attn_weights = a;
        detail::ActivationQuantizer act;
        if (quant) {
          mt.attn_weights.wq = quantize(a.wq, mt);
          mt.attn_weights.wk = quantize(a.wk, mt);
          mt.attn_weights.wv = quantize(a.wv, mt);
          mt.attn_weights.wo = quantize(a.wo, mt);
          act = [&](const Matrix& t) { return quantize(t, mt); };
        }
        detail::AttentionCache cache;
        out = detail::attention_forward(in, mt.attn_weights, act, &cache);
        mt.attn_x_in = std::move(cache.x_in);
        mt.attn_q = std::move(cache.q);
        mt.attn_k = std::move(cache.k);
        mt.attn_v = std::move(cache.v);
        mt.attn_probs = std::move(cache.probs);
        mt.attn_o = std::move(cache.o);
        mt.attn_o_in = std::move(cache.o_in);
        break;
      }
    }
    tape.acts.push_back(std::move(out));
  }
  return tape;
}

BackwardResult backward(const NetworkSpec& net, const Tape& tape, const Matrix& output_grad) {
  const std::size_t n_mod = net.modules.size();
  if (tape.modules.size() != n_mod || tape.acts.size() != n_mod + 1) {
    throw InputError("backward: tape does not belong to this network");
  }
  if (!output_grad.same_shape(tape.acts.back())) throw InputError("backward: output gradient shape mismatch");

  // First parameter index of each module.
  std::vector<std::size_t> first(n_mod + 1, 0);
  for (std::size_t i = 0; i < n_mod; ++i) {
    std::size_t count = 0;
    switch (net.modules[i].kind()) {
      case ModuleKind::linear:
      case ModuleKind::rmsnorm: count = 1; break;
      case ModuleKind::attention_unit: count = 4; break;
      default: break;
    }
    first[i + 1] = first[i] + count;
  }

  BackwardResult res;
  res.param_grads.resize(first[n_mod]);
  Matrix g = output_grad;
  std::vector<Matrix> skip_grads;

  for (std::size_t i = n_mod; i-- > 0;) {
    const ModuleSpec& m = net.modules[i];
    const ModuleTape& mt = tape.modules[i];
    const Matrix& in = tape.acts[i];
    const std::size_t p = first[i];
    switch (m.kind()) {
      case ModuleKind::linear: {
        Matrix dx = matmul(g, mt.w_used);
        Matrix dw = matmul_tn(g, mt.x_used);
        if (!mt.slots.empty()) {
          dx = slot_backward(dx, tape.slots[mt.slots[0]]);
          dw = slot_backward(dw, tape.slots[mt.slots[1]]);
        }
        res.param_grads[p] = std::move(dw);
        g = std::move(dx);
        break;
      }
      case ModuleKind::rmsnorm: {
        const auto& gamma = std::get<RmsNorm>(m.op).gamma;
        const double n = static_cast<double>(in.cols());
        Matrix dgamma(1, in.cols());
        Matrix dx(in.rows(), in.cols());
        for (std::size_t r = 0; r < in.rows(); ++r) {
          const double inv = mt.inv_rms[r];
          double coupling = 0.0;
          for (std::size_t c = 0; c < in.cols(); ++c) {
            dgamma(0, c) += g(r, c) * in(r, c) * inv;
            coupling += g(r, c) * gamma[c] * in(r, c);
          }
          const double k = coupling * inv * inv * inv / n;
          for (std::size_t c = 0; c < in.cols(); ++c) {
            dx(r, c) = inv * gamma[c] * g(r, c) - in(r, c) * k;
          }
        }
        res.param_grads[p] = std::move(dgamma);
        g = std::move(dx);
        break;
      }
      case ModuleKind::relu2: {
        for (std::size_t k = 0; k < g.size(); ++k) {
          const double v = in.data()[k];
          g.data()[k] = v > 0.0 ? g.data()[k] * 2.0 * v : 0.0;
        }
        break;
      }
      case ModuleKind::residual_end:
        skip_grads.push_back(g);
        break;
      case ModuleKind::residual_begin:
        g += skip_grads.back();
        skip_grads.pop_back();
        break;
      case ModuleKind::attention_unit: {
        Matrix dwo, do_in;
        output_projection_backward(mt, g, dwo, do_in);
        const bool quant = !mt.slots.empty();
        // Slot order: wq, wk, wv, wo, x_in, o_in.
        Matrix d_o = quant ? slot_backward(do_in, tape.slots[mt.slots[5]]) : do_in;
        Matrix dq, dk, dv;
        attention_core_backward(mt, d_o, dq, dk, dv);
        const AttentionUnit& w = mt.attn_weights;
        Matrix dwq = matmul_tn(dq, mt.attn_x_in);
        Matrix dwk = matmul_tn(dk, mt.attn_x_in);
        Matrix dwv = matmul_tn(dv, mt.attn_x_in);
        Matrix dx_in = matmul(dq, w.wq);
        dx_in += matmul(dk, w.wk);
        dx_in += matmul(dv, w.wv);
        if (quant) {
          dwq = slot_backward(dwq, tape.slots[mt.slots[0]]);
          dwk = slot_backward(dwk, tape.slots[mt.slots[1]]);
          dwv = slot_backward(dwv, tape.slots[mt.slots[2]]);
          dwo = slot_backward(dwo, tape.slots[mt.slots[3]]);
          dx_in = slot_backward(dx_in, tape.slots[mt.slots[4]]);
        }
        res.param_grads[p] = std::move(dwq);
        res.param_grads[p + 1] = std::move(dwk);
        res.param_grads[p + 2] = std::move(dwv);
        res.param_grads[p + 3] = std::move(dwo);
        g = std::move(dx_in);
        break;
      }
    }
  }
  res.input_grad = std::move(g);
  return res;
}

double mse_loss(const Matrix& y, const Matrix& target, Matrix* grad) {
  if (!y.same_shape(target)) throw InputError("mse_loss: shape mismatch");
  const double inv_n = 1.0 / static_cast<double>(y.size());
  if (grad) *grad = Matrix(y.rows(), y.cols());
  double acc = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double d = y.data()[i] - target.data()[i];
    acc += d * d;
    if (grad) grad->data()[i] = 2.0 * d * inv_n;
  }
  return acc * inv_n;
}

double cross_entropy_loss(const Matrix& logits, std::span<const int> targets, Matrix* grad) {
  if (targets.size() != logits.rows()) throw InputError("cross_entropy_loss: target count mismatch");
  const double inv_n = 1.0 / static_cast<double>(logits.rows());
  if (grad) *grad = Matrix(logits.rows(), logits.cols());
  double acc = 0.0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const auto row = logits.row(r);
    const int t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= row.size()) throw InputError("cross_entropy_loss: target out of range");
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : row) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    const double log_z = mx + std::log(z);
    acc += log_z - row[static_cast<std::size_t>(t)];
    if (grad) {
      auto gr = grad->row(r);
      for (std::size_t c = 0; c < row.size(); ++c) gr[c] = std::exp(row[c] - log_z) * inv_n;
      gr[static_cast<std::size_t>(t)] -= inv_n;
    }
  }
  return acc * inv_n;
}

GradCheckResult grad_check(const NetworkSpec& net_in, const Matrix& x, const Matrix& y,
                           const GradCheckOptions& opt) {
  NetworkSpec net = net_in;
  TapeOptions topt;
  std::vector<QuantResult> frozen;
  if (opt.mode != QuantMode::off) {
    TapeOptions q;
    q.mode = QuantMode::qat;
    q.quant = opt.quant;
    frozen = forward_tape(net, x, q).slots;
    topt.mode = QuantMode::surrogate;
    topt.quant = opt.quant;
    topt.frozen = &frozen;
  }

  auto loss_at = [&](const Matrix& input) {
    const Tape t = forward_tape(net, input, topt);
    return mse_loss(t.acts.back(), y);
  };

  const Tape tape = forward_tape(net, x, topt);
  Matrix dy;
  mse_loss(tape.acts.back(), y, &dy);
  const BackwardResult analytic = backward(net, tape, dy);

  GradCheckResult res;
  auto record = [&](const std::string& name, const Matrix& a, const Matrix& num) {
    const double e = rel_error(a, num);
    ++res.tensors_checked;
    res.elements_checked += a.size();
    if (res.worst_tensor.empty() || e > res.max_rel_error) {
      res.max_rel_error = e;
      res.worst_tensor = name;
    }
  };

  auto views = parameter_views(net);
  for (std::size_t k = 0; k < views.size(); ++k) {
    auto& v = views[k];
    Matrix num(v.rows, v.cols);
    for (std::size_t e = 0; e < v.values.size(); ++e) {
      const double orig = v.values[e];
      v.values[e] = orig + opt.h;
      const double lp = loss_at(x);
      v.values[e] = orig - opt.h;
      const double lm = loss_at(x);
      v.values[e] = orig;
      num.data()[e] = (lp - lm) / (2.0 * opt.h);
    }
    record(v.name, analytic.param_grads[k], num);
  }

  Matrix xp = x;
  Matrix num(x.rows(), x.cols());
  for (std::size_t e = 0; e < x.size(); ++e) {
    const double orig = xp.data()[e];
    xp.data()[e] = orig + opt.h;
    const double lp = loss_at(xp);
    xp.data()[e] = orig - opt.h;
    const double lm = loss_at(xp);
    xp.data()[e] = orig;
    num.data()[e] = (lp - lm) / (2.0 * opt.h);
  }
  record("input", analytic.input_grad, num);
  return res;
}

}  // namespace qprobe
