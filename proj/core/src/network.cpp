// Copyright 2026 The qprobe Authors
// SPDX-License-Identifier: Apache-2.0

#include "qprobe/network.hpp"

#include <cmath>
#include <map>
#include <utility>

#include <fmt/format.h>

#include "kernels.hpp"
#include "qprobe/errors.hpp"
#include "qprobe/linalg.hpp"

namespace qprobe {
namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

void check_input(const Matrix& x, std::size_t width) {
  if (x.cols() != width) {
    throw InputError(fmt::format("module input has width {}, expected {}", x.cols(), width));
  }
}

// Per-path stacks of activations saved at residual_begin.
struct SkipStack {
  std::vector<Matrix> saved;
  const Matrix* top() const { return saved.empty() ? nullptr : &saved.back(); }
};

}  // namespace

std::string to_string(ModuleKind kind) {
  switch (kind) {
    case ModuleKind::linear: return "linear";
    case ModuleKind::rmsnorm: return "rmsnorm";
    case ModuleKind::relu2: return "relu2";
    case ModuleKind::residual_begin: return "residual_begin";
    case ModuleKind::residual_end: return "residual_end";
    case ModuleKind::attention_unit: return "attention_unit";
  }
  return "?";
}

std::size_t ModuleSpec::parameter_count() const {
  return std::visit(overloaded{
                        [](const Linear& l) { return l.weight.size(); },
                        [](const RmsNorm& n) { return n.gamma.size(); },
                        [](const AttentionUnit& a) {
                          return a.wq.size() + a.wk.size() + a.wv.size() + a.wo.size();
                        },
                        [](const auto&) { return std::size_t{0}; },
                    },
                    op);
}

void NetworkSpec::validate() const {
  if (width == 0) throw InputError("network width must be positive");
  std::size_t current = width;
  std::vector<std::pair<std::string, std::size_t>> open;
  for (std::size_t i = 0; i < modules.size(); ++i) {
    const auto& m = modules[i];
    const auto where = [&] { return fmt::format("module {} ({})", i + 1, to_string(m.kind())); };
    if (m.quantize && m.kind() != ModuleKind::linear && m.kind() != ModuleKind::attention_unit) {
      throw InputError(where() + ": only linear layers and attention projections can be quantized");
    }
    std::visit(overloaded{
                   [&](const Linear& l) {
                     if (l.weight.cols() != current || l.weight.rows() == 0) {
                       throw InputError(fmt::format("{}: weight {}x{} does not accept width {}",
                                                    where(), l.weight.rows(), l.weight.cols(),
                                                    current));
                     }
                     current = l.weight.rows();
                   },
                   [&](const RmsNorm& n) {
                     if (n.gamma.size() != current) {
                       throw InputError(where() + ": gamma length does not match width");
                     }
                   },
                   [&](const Relu2&) {},
                   [&](const ResidualBegin& b) { open.emplace_back(b.tag, current); },
                   [&](const ResidualEnd& e) {
                     if (open.empty() || open.back().first != e.tag) {
                       throw InputError(where() + fmt::format(": residual tag '{}' does not close "
                                                              "the innermost open residual",
                                                              e.tag));
                     }
                     if (open.back().second != current) {
                       throw InputError(where() + ": residual branch changes width");
                     }
                     open.pop_back();
                   },
                   [&](const AttentionUnit& a) {
                     for (const Matrix* w : {&a.wq, &a.wk, &a.wv, &a.wo}) {
                       if (w->rows() != current || w->cols() != current) {
                         throw InputError(where() + ": attention projections must be width x width");
                       }
                     }
                     if (a.heads == 0 || current % a.heads != 0) {
                       throw InputError(where() + ": width must be divisible by heads");
                     }
                   },
               },
               m.op);
  }
  if (!open.empty()) {
    throw InputError(fmt::format("residual '{}' is never closed", open.back().first));
  }
}

std::size_t NetworkSpec::output_width() const {
  std::size_t current = width;
  for (const auto& m : modules) {
    if (const auto* l = std::get_if<Linear>(&m.op)) current = l->weight.rows();
  }
  return current;
}

std::size_t NetworkSpec::parameter_count() const {
  std::size_t n = 0;
  for (const auto& m : modules) n += m.parameter_count();
  return n;
}

Matrix apply_module(const ModuleSpec& m, const Matrix& input, const Matrix* skip) {
  return std::visit(
      overloaded{
          [&](const Linear& l) {
            check_input(input, l.weight.cols());
            return matmul_nt(input, l.weight);
          },
          [&](const RmsNorm& n) { return detail::rmsnorm_forward(input, n.gamma); },
          [&](const Relu2&) { return detail::relu2_forward(input); },
          [&](const ResidualBegin&) { return input; },
          [&](const ResidualEnd&) {
            if (skip == nullptr || !skip->same_shape(input)) {
              throw InputError("residual_end without a matching saved activation");
            }
            return input + *skip;
          },
          [&](const AttentionUnit& a) {
            check_input(input, a.wq.cols());
            return detail::attention_forward(input, a, nullptr, nullptr);
          },
      },
      m.op);
}

QuantizedModuleWeights quantize_module_weights(const ModuleSpec& m, const QuantConfig& cfg) {
  QuantizedModuleWeights qw;
  if (!m.quantize) return qw;
  if (const auto* l = std::get_if<Linear>(&m.op)) {
    qw.weight = quantize_rows(l->weight, cfg).values;
  } else if (const auto* a = std::get_if<AttentionUnit>(&m.op)) {
    AttentionUnit q = *a;
    q.wq = quantize_rows(a->wq, cfg).values;
    q.wk = quantize_rows(a->wk, cfg).values;
    q.wv = quantize_rows(a->wv, cfg).values;
    q.wo = quantize_rows(a->wo, cfg).values;
    qw.attention = std::move(q);
  }
  return qw;
}

Matrix apply_module_quantized(const ModuleSpec& m, const QuantizedModuleWeights& qw,
                              const Matrix& input, const Matrix* skip, const QuantConfig& cfg) {
  if (!m.quantize) return apply_module(m, input, skip);
  if (qw.weight) {
    check_input(input, qw.weight->cols());
    return matmul_nt(quantize_rows(input, cfg).values, *qw.weight);
  }
  if (qw.attention) {
    check_input(input, qw.attention->wq.cols());
    return detail::attention_forward(
        input, *qw.attention, [&](const Matrix& a) { return quantize_rows(a, cfg).values; },
        nullptr);
  }
  throw InputError("quantized module is missing its quantized weights");
}

Activations forward_reference(const NetworkSpec& net, const Matrix& x) {
  net.validate();
  if (x.cols() != net.width || (net.seq_len != 0 && x.rows() != net.seq_len)) {
    throw InputError(fmt::format("input is {}x{}, network expects {}x{}", x.rows(), x.cols(),
                                 net.seq_len, net.width));
  }
  if (!x.all_finite()) throw NumericalError("network input has NaN or Inf");
  Activations h;
  h.reserve(net.modules.size() + 1);
  h.push_back(x);
  SkipStack skips;
  for (const auto& m : net.modules) {
    const Matrix& in = h.back();
    if (m.kind() == ModuleKind::residual_end) {
      h.push_back(apply_module(m, in, skips.top()));
      skips.saved.pop_back();
    } else {
      if (m.kind() == ModuleKind::residual_begin) skips.saved.push_back(in);
      h.push_back(apply_module(m, in, nullptr));
    }
  }
  return h;
}

void DualTrace::validate() const {
  const std::size_t n = h.size();
  if (hq.size() != n || fq_of_h.size() != n || f_of_hq.size() != n || n == 0) {
    throw InputError("dual trace vectors have inconsistent lengths");
  }
  for (std::size_t l = 0; l < n; ++l) {
    if (!h[l].same_shape(hq[l]) || !h[l].same_shape(fq_of_h[l]) || !h[l].same_shape(f_of_hq[l])) {
      throw InputError(fmt::format("dual trace tensors at module {} differ in shape", l));
    }
  }
}

DualTrace forward_dual(const NetworkSpec& net, const Matrix& x, const QuantConfig& cfg) {
  net.validate();
  cfg.validate();
  if (x.cols() != net.width || (net.seq_len != 0 && x.rows() != net.seq_len)) {
    throw InputError(fmt::format("input is {}x{}, network expects {}x{}", x.rows(), x.cols(),
                                 net.seq_len, net.width));
  }
  if (!x.all_finite()) throw NumericalError("network input has NaN or Inf");

  DualTrace t;
  const std::size_t count = net.modules.size() + 1;
  for (auto* v : {&t.h, &t.hq, &t.fq_of_h, &t.f_of_hq}) {
    v->reserve(count);
    v->push_back(x);
  }
  t.quantized_weight.assign(count, std::nullopt);

  SkipStack ref_skips;
  SkipStack q_skips;
  for (std::size_t i = 0; i < net.modules.size(); ++i) {
    const auto& m = net.modules[i];
    const QuantizedModuleWeights qw = quantize_module_weights(m, cfg);
    if (qw.weight) t.quantized_weight[i + 1] = *qw.weight;

    const Matrix& h_prev = t.h.back();
    const Matrix& hq_prev = t.hq.back();
    const Matrix* ref_skip = nullptr;
    const Matrix* q_skip = nullptr;
    if (m.kind() == ModuleKind::residual_begin) {
      ref_skips.saved.push_back(h_prev);
      q_skips.saved.push_back(hq_prev);
    } else if (m.kind() == ModuleKind::residual_end) {
      ref_skip = ref_skips.top();
      q_skip = q_skips.top();
    }

    Matrix h = apply_module(m, h_prev, ref_skip);
    Matrix hq = apply_module_quantized(m, qw, hq_prev, q_skip, cfg);
    Matrix fq_of_h = apply_module_quantized(m, qw, h_prev, ref_skip, cfg);
    Matrix f_of_hq = apply_module(m, hq_prev, q_skip);
    t.h.push_back(std::move(h));
    t.hq.push_back(std::move(hq));
    t.fq_of_h.push_back(std::move(fq_of_h));
    t.f_of_hq.push_back(std::move(f_of_hq));

    if (m.kind() == ModuleKind::residual_end) {
      ref_skips.saved.pop_back();
      q_skips.saved.pop_back();
    }
  }
  return t;
}

NetworkSpec build_toy_transformer(std::size_t depth, std::size_t width, std::size_t heads,
                                  Rng& rng, std::size_t seq_len) {
  if (width == 0 || heads == 0 || width % heads != 0) {
    throw InputError(fmt::format("toy transformer needs width divisible by heads (got {} / {})",
                                 width, heads));
  }
  NetworkSpec net;
  net.width = width;
  net.seq_len = seq_len;
  const std::size_t hidden = kFfnExpansion * width;
  const auto gaussian = [&](std::size_t out, std::size_t in) {
    return rng.normal_matrix(out, in, 1.0 / std::sqrt(static_cast<double>(in)));
  };
  for (std::size_t b = 0; b < depth; ++b) {
    const std::string attn_tag = fmt::format("block{}.attn", b);
    const std::string ffn_tag = fmt::format("block{}.ffn", b);
    net.modules.push_back({ResidualBegin{attn_tag}, false});
    net.modules.push_back({RmsNorm{std::vector<double>(width, 1.0)}, false});
    AttentionUnit attn;
    attn.wq = gaussian(width, width);
    attn.wk = gaussian(width, width);
    attn.wv = gaussian(width, width);
    attn.wo = gaussian(width, width);
    attn.heads = heads;
    attn.causal = true;
    net.modules.push_back({std::move(attn), true});
    net.modules.push_back({ResidualEnd{attn_tag}, false});
    net.modules.push_back({ResidualBegin{ffn_tag}, false});
    net.modules.push_back({RmsNorm{std::vector<double>(width, 1.0)}, false});
    net.modules.push_back({Linear{gaussian(hidden, width)}, true});
    net.modules.push_back({Relu2{}, false});
    net.modules.push_back({Linear{gaussian(width, hidden)}, true});
    net.modules.push_back({ResidualEnd{ffn_tag}, false});
  }
  return net;
}

}  // namespace qprobe
