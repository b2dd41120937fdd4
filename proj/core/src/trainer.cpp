// Copyright 2026 The qprobe Authors
// SPDX-License-Identifier: Apache-2.0

#include "qprobe/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "json.hpp"
#include "json_io.hpp"
#include "qprobe/backprop.hpp"
#include "qprobe/errors.hpp"
#include "qprobe/hash.hpp"
#include "qprobe/linalg.hpp"
#include "qprobe/parallel.hpp"
#include "qprobe/tensor_archive.hpp"

namespace qprobe {

void to_json(nlohmann::json& j, const TrainConfig& c);

namespace {

// Stream tags for derive_seed.
constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kDataStream = 2;
constexpr std::uint64_t kValStream = 3;
constexpr std::uint64_t kTrainCorpusStream = 4;
constexpr std::uint64_t kValCorpusStream = 5;

constexpr std::size_t kTrainCorpusChars = 20000;
constexpr std::size_t kValCorpusChars = 4000;

struct Example {
  Matrix x;  // teacher input
  Matrix y;  // teacher target
  std::vector<int> tokens;
  std::vector<int> targets;
};

// Everything a run needs besides the model: task objects and the fixed
// validation set.
struct TaskData {
  std::optional<LinearTeacher> teacher;
  std::vector<int> train_ids;
  std::vector<Example> val;
  Matrix positions;
};

Example lm_window(const std::vector<int>& ids, std::size_t start, std::size_t len) {
  Example e;
  e.tokens.assign(ids.begin() + static_cast<std::ptrdiff_t>(start),
                  ids.begin() + static_cast<std::ptrdiff_t>(start + len));
  e.targets.assign(ids.begin() + static_cast<std::ptrdiff_t>(start + 1),
                   ids.begin() + static_cast<std::ptrdiff_t>(start + len + 1));
  return e;
}

TaskData make_task_data(const TrainConfig& cfg) {
  TaskData d;
  const std::size_t t = cfg.net.seq_len;
  Rng val_rng(derive_seed(cfg.task_seed, kValStream));
  if (cfg.task == TaskKind::linear_teacher) {
    d.teacher.emplace(cfg.net.width, cfg.task_seed);
    for (std::size_t i = 0; i < cfg.val_sequences; ++i) {
      Example e;
      d.teacher->sample(val_rng, t, e.x, e.y);
      d.val.push_back(std::move(e));
    }
  } else {
    const CharGrammar grammar(cfg.task_seed);
    Rng train_corpus(derive_seed(cfg.task_seed, kTrainCorpusStream));
    Rng val_corpus(derive_seed(cfg.task_seed, kValCorpusStream));
    d.train_ids = CharGrammar::encode(grammar.corpus(train_corpus, kTrainCorpusChars));
    const auto val_ids = CharGrammar::encode(grammar.corpus(val_corpus, kValCorpusChars));
    for (std::size_t i = 0; i < cfg.val_sequences; ++i) {
      d.val.push_back(lm_window(val_ids, val_rng.below(val_ids.size() - t - 1), t));
    }
    d.positions = sinusoidal_positions(t, cfg.net.width);
  }
  return d;
}

Example draw_example(const TrainConfig& cfg, const TaskData& d, Rng& rng) {
  const std::size_t t = cfg.net.seq_len;
  if (d.teacher) {
    Example e;
    d.teacher->sample(rng, t, e.x, e.y);
    return e;
  }
  return lm_window(d.train_ids, rng.below(d.train_ids.size() - t - 1), t);
}

double logit_scale(const Model& m) { return 1.0 / std::sqrt(static_cast<double>(m.net.width)); }

Matrix network_input(const Model& m, const TaskData& d, const Example& e) {
  if (m.task == TaskKind::linear_teacher) return e.x;
  Matrix x = d.positions;
  for (std::size_t r = 0; r < e.tokens.size(); ++r) {
    const auto emb = m.embedding.row(static_cast<std::size_t>(e.tokens[r]));
    auto row = x.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += emb[c];
  }
  return x;
}

// Loss of the network output; fills the output gradient when requested.
double output_loss(const Model& m, const Example& e, const Matrix& out, Matrix* dout, Matrix* dembed) {
  if (m.task == TaskKind::linear_teacher) return mse_loss(out, e.y, dout);
  const double s = logit_scale(m);
  Matrix logits = matmul_nt(out, m.embedding);
  logits *= s;
  Matrix dlogits;
  const double loss = cross_entropy_loss(logits, e.targets, dout ? &dlogits : nullptr);
  if (dout) {
    dlogits *= s;
    *dout = matmul(dlogits, m.embedding);
    *dembed = matmul_tn(dlogits, out);
  }
  return loss;
}

struct ExampleGrad {
  double loss = 0.0;
  std::vector<Matrix> params;
  Matrix embedding;
};

ExampleGrad example_grad(const Model& m, const TaskData& d, const Example& e, const TapeOptions& topt) {
  const Matrix x = network_input(m, d, e);
  const Tape tape = forward_tape(m.net, x, topt);
  ExampleGrad g;
  Matrix dout;
  g.loss = output_loss(m, e, tape.acts.back(), &dout, &g.embedding);
  BackwardResult br = backward(m.net, tape, dout);
  g.params = std::move(br.param_grads);
  if (m.task == TaskKind::synthetic_char_lm) {
    for (std::size_t r = 0; r < e.tokens.size(); ++r) {
      auto row = g.embedding.row(static_cast<std::size_t>(e.tokens[r]));
      const auto src = br.input_grad.row(r);
      for (std::size_t c = 0; c < row.size(); ++c) row[c] += src[c];
    }
  }
  return g;
}

enum class EvalMode { fp, qat, ptq };

Matrix forward_ptq(const NetworkSpec& net, const std::vector<QuantizedModuleWeights>& qw,
                   const Matrix& x, const QuantConfig& q) {
  std::vector<Matrix> skips;
  Matrix h = x;
  for (std::size_t i = 0; i < net.modules.size(); ++i) {
    const ModuleSpec& m = net.modules[i];
    const Matrix* skip = nullptr;
    if (m.kind() == ModuleKind::residual_begin) skips.push_back(h);
    if (m.kind() == ModuleKind::residual_end) skip = &skips.back();
    Matrix next = apply_module_quantized(m, qw[i], h, skip, q);
    if (m.kind() == ModuleKind::residual_end) skips.pop_back();
    h = std::move(next);
  }
  return h;
}

double eval_loss(const TrainConfig& cfg, const TaskData& d, const Model& m, EvalMode mode,
                 const QuantConfig* q) {
  std::vector<QuantizedModuleWeights> qw;
  if (mode == EvalMode::ptq) {
    for (const auto& mod : m.net.modules) qw.push_back(quantize_module_weights(mod, *q));
  }
  std::vector<double> losses(d.val.size());
  parallel_for(d.val.size(), [&](std::size_t i) {
    const Matrix x = network_input(m, d, d.val[i]);
    Matrix out;
    if (mode == EvalMode::ptq) {
      out = forward_ptq(m.net, qw, x, *q);
    } else if (mode == EvalMode::qat) {
      TapeOptions topt;
      topt.mode = QuantMode::qat;
      topt.quant = *cfg.quant;
      out = forward_tape(m.net, x, topt).acts.back();
    } else {
      out = forward_reference(m.net, x).back();
    }
    losses[i] = output_loss(m, d.val[i], out, nullptr, nullptr);
  });
  double acc = 0.0;
  for (double l : losses) acc += l;
  return acc / static_cast<double>(losses.size());
}

std::string fmt_double(double v) {
  if (std::isnan(v)) return "nan";
  return fmt::format("{:.17g}", v);
}

std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw InputError(fmt::format("cannot read '{}'", p.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw InputError(fmt::format("cannot write '{}'", p.string()));
  out << text;
}

}  // namespace

void TrainConfig::validate() const {
  optimizer.validate();
  if (quant) quant->validate();
  if (steps && *steps < 1) throw InputError("steps must be >= 1");
  if (!(token_ratio > 0.0)) throw InputError("token_ratio must be > 0");
  if (batch < 1) throw InputError("batch must be >= 1");
  if (eval_every < 1) throw InputError("eval_every must be >= 1");
  if (val_sequences < 1) throw InputError("val_sequences must be >= 1");
  if (net.depth < 1 || net.width < 1 || net.heads < 1 || net.seq_len < 1) {
    throw InputError("net depth, width, heads and seq_len must be >= 1");
  }
  if (net.width % net.heads != 0) throw InputError("net width must be divisible by heads");
  if (stop_at_loss && !std::isfinite(*stop_at_loss)) throw InputError("stop_at_loss must be finite");
}

std::size_t TrainConfig::resolved_steps() const {
  if (steps) return *steps;
  Rng rng(0);
  Model m;
  m.net = build_toy_transformer(net.depth, net.width, net.heads, rng, net.seq_len);
  std::size_t n = m.net.parameter_count();
  if (task == TaskKind::synthetic_char_lm) n += CharGrammar::vocab_size() * net.width;
  const double tokens = token_ratio * static_cast<double>(n);
  return std::max<std::size_t>(
      1, static_cast<std::size_t>(std::ceil(tokens / static_cast<double>(batch * net.seq_len))));
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json::object();
  j["task"] = to_string(c.task);
  j["net"] = {{"depth", c.net.depth}, {"width", c.net.width}, {"heads", c.net.heads}, {"seq_len", c.net.seq_len}};
  j["optimizer"] = c.optimizer;
  j["quant"] = c.quant ? nlohmann::json(*c.quant) : nlohmann::json(nullptr);
  j["steps"] = c.steps ? nlohmann::json(*c.steps) : nlohmann::json(nullptr);
  j["batch"] = c.batch;
  j["token_ratio"] = c.token_ratio;
  j["stop_at_loss"] = c.stop_at_loss ? nlohmann::json(*c.stop_at_loss) : nlohmann::json(nullptr);
  j["seed"] = c.seed;
  j["task_seed"] = c.task_seed;
  j["eval_every"] = c.eval_every;
  j["val_sequences"] = c.val_sequences;
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const char* known[] = {"task", "net", "optimizer", "quant", "steps", "batch", "token_ratio",
                                "stop_at_loss", "seed", "task_seed", "eval_every", "val_sequences"};
  for (const auto& [key, _] : j.items()) {
    if (std::find_if(std::begin(known), std::end(known), [&](const char* k) { return key == k; }) ==
        std::end(known)) {
      throw InputError(fmt::format("unknown train config field '{}'", key));
    }
  }
  if (j.contains("task")) c.task = parse_task_kind(j.at("task").get<std::string>());
  if (j.contains("net")) {
    const auto& n = j.at("net");
    c.net.depth = n.value("depth", c.net.depth);
    c.net.width = n.value("width", c.net.width);
    c.net.heads = n.value("heads", c.net.heads);
    c.net.seq_len = n.value("seq_len", c.net.seq_len);
  }
  if (j.contains("optimizer")) c.optimizer = j.at("optimizer").get<OptimizerConfig>();
  if (j.contains("quant") && !j.at("quant").is_null()) c.quant = j.at("quant").get<QuantConfig>();
  if (j.contains("steps") && !j.at("steps").is_null()) c.steps = j.at("steps").get<std::size_t>();
  c.batch = j.value("batch", c.batch);
  c.token_ratio = j.value("token_ratio", c.token_ratio);
  if (j.contains("stop_at_loss") && !j.at("stop_at_loss").is_null()) {
    c.stop_at_loss = j.at("stop_at_loss").get<double>();
  }
  c.seed = j.value("seed", c.seed);
  c.task_seed = j.value("task_seed", c.task_seed);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.val_sequences = j.value("val_sequences", c.val_sequences);
  c.validate();
}

std::string train_config_to_json(const TrainConfig& cfg) {
  nlohmann::json j = cfg;
  return j.dump(2);
}

TrainConfig train_config_from_json(std::string_view text) {
  return parse_json_as<TrainConfig>(text, "train config");
}

Model init_model(const TrainConfig& cfg) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, kInitStream));
  Model m;
  m.task = cfg.task;
  m.net = build_toy_transformer(cfg.net.depth, cfg.net.width, cfg.net.heads, rng, cfg.net.seq_len);
  if (cfg.task == TaskKind::synthetic_char_lm) {
    m.embedding = rng.normal_matrix(CharGrammar::vocab_size(), cfg.net.width);
  }
  return m;
}

double validation_loss(const TrainConfig& cfg, const Model& model, const std::optional<QuantConfig>& ptq) {
  const TaskData d = make_task_data(cfg);
  if (ptq) return eval_loss(cfg, d, model, EvalMode::ptq, &*ptq);
  return eval_loss(cfg, d, model, cfg.quant ? EvalMode::qat : EvalMode::fp, nullptr);
}

Matrix validation_probe_input(const TrainConfig& cfg, const Model& model) {
  const TaskData d = make_task_data(cfg);
  return network_input(model, d, d.val.front());
}

std::vector<Matrix> validation_inputs(const TrainConfig& cfg, const Model& model) {
  const TaskData d = make_task_data(cfg);
  std::vector<Matrix> out;
  out.reserve(d.val.size());
  for (const Example& e : d.val) out.push_back(network_input(model, d, e));
  return out;
}

RunRecord train(const TrainConfig& cfg) {
  cfg.validate();
  RunRecord run;
  run.config = cfg;
  run.config_hash = config_hash(cfg);
  run.model = init_model(cfg);
  Model& m = run.model;
  const TaskData data = make_task_data(cfg);
  const std::size_t steps = cfg.resolved_steps();

  TapeOptions topt;
  if (cfg.quant) {
    topt.mode = QuantMode::qat;
    topt.quant = *cfg.quant;
  }
  const EvalMode eval_mode = cfg.quant ? EvalMode::qat : EvalMode::fp;

  std::vector<OptimizerState> states;
  for (const auto& v : parameter_views(m.net)) {
    states.emplace_back(cfg.optimizer.kind, v.rows, v.cols, v.vector_param);
  }
  std::optional<OptimizerState> embed_state;
  if (!m.embedding.empty()) {
    // Embeddings use AdamW under every optimizer kind.
    embed_state.emplace(OptimizerKind::adamw, m.embedding.rows(), m.embedding.cols(), true);
  }

  auto evaluate = [&](std::size_t step) {
    const double l = eval_loss(cfg, data, m, eval_mode, nullptr);
    if (!std::isfinite(l)) throw NumericalError(fmt::format("training diverged at step {} (validation loss {})", step, l));
    run.val_loss.push_back({step, l});
    return cfg.stop_at_loss && l <= *cfg.stop_at_loss;
  };

  Rng data_rng(derive_seed(cfg.seed, kDataStream));
  if (evaluate(0)) {
    run.stopped_early = true;
  }
  for (std::size_t s = 1; s <= steps && !run.stopped_early; ++s) {
    std::vector<Example> batch;
    batch.reserve(cfg.batch);
    for (std::size_t b = 0; b < cfg.batch; ++b) batch.push_back(draw_example(cfg, data, data_rng));

    std::vector<ExampleGrad> grads(cfg.batch);
    parallel_for(cfg.batch, [&](std::size_t b) { grads[b] = example_grad(m, data, batch[b], topt); });

    const double inv_b = 1.0 / static_cast<double>(cfg.batch);
    double loss = 0.0;
    for (const auto& g : grads) loss += g.loss;
    loss *= inv_b;
    if (!std::isfinite(loss)) throw NumericalError(fmt::format("training diverged at step {} (loss {})", s, loss));

    auto views = parameter_views(m.net);
    for (std::size_t k = 0; k < views.size(); ++k) {
      Matrix g = grads[0].params[k];
      for (std::size_t b = 1; b < grads.size(); ++b) g += grads[b].params[k];
      g *= inv_b;
      Matrix w(views[k].rows, views[k].cols,
               std::vector<double>(views[k].values.begin(), views[k].values.end()));
      try {
        step(cfg.optimizer, states[k], w, g);
      } catch (const NumericalError& e) {
        throw NumericalError(fmt::format("training diverged at step {}: {}", s, e.what()));
      }
      std::copy(w.data().begin(), w.data().end(), views[k].values.begin());
    }
    if (embed_state) {
      Matrix g = grads[0].embedding;
      for (std::size_t b = 1; b < grads.size(); ++b) g += grads[b].embedding;
      g *= inv_b;
      OptimizerConfig ecfg = cfg.optimizer;
      ecfg.kind = OptimizerKind::adamw;
      try {
        step(ecfg, *embed_state, m.embedding, g);
      } catch (const NumericalError& e) {
        throw NumericalError(fmt::format("training diverged at step {}: {}", s, e.what()));
      }
    }

    run.train_loss.push_back(loss);
    run.steps_run = s;
    if (s % cfg.eval_every == 0 || s == steps) {
      if (evaluate(s)) run.stopped_early = true;
    }
  }
  run.content_hash = model_content_hash(m);
  return run;
}

std::size_t select_best_arm(std::span<const SweepArm> arms) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < arms.size(); ++i) {
    const auto& a = arms[i];
    if (a.diverged || !a.final_val_loss) continue;
    if (!best) {
      best = i;
      continue;
    }
    const auto& b = arms[*best];
    if (*a.final_val_loss < *b.final_val_loss ||
        (*a.final_val_loss == *b.final_val_loss && a.lr < b.lr)) {
      best = i;
    }
  }
  if (!best) throw NumericalError("every learning rate in the sweep diverged");
  return *best;
}

SweepResult lr_sweep(const TrainConfig& base, std::span<const double> lrs) {
  if (lrs.empty()) throw InputError("lr sweep needs at least one learning rate");
  SweepResult res;
  res.arms.resize(lrs.size());
  std::vector<std::optional<RunRecord>> runs(lrs.size());
  parallel_for(lrs.size(), [&](std::size_t i) {
    TrainConfig cfg = base;
    cfg.optimizer.lr = lrs[i];
    cfg.seed = base.seed + i;
    SweepArm& arm = res.arms[i];
    arm.lr = lrs[i];
    arm.seed = cfg.seed;
    try {
      RunRecord r = train(cfg);
      arm.final_val_loss = r.val_loss.back().loss;
      runs[i] = std::move(r);
    } catch (const NumericalError& e) {
      arm.diverged = true;
      arm.error = e.what();
    }
  });
  const std::size_t best = select_best_arm(res.arms);
  res.best_index = best;
  res.best_lr = res.arms[best].lr;
  res.best_run = std::move(*runs[best]);
  return res;
}

PtqResult ptq_apply(const RunRecord& run, const QuantConfig& cfg, const DecomposeOptions& decomp) {
  cfg.validate();
  const TaskData d = make_task_data(run.config);
  PtqResult res;
  res.loss_before = eval_loss(run.config, d, run.model, EvalMode::fp, nullptr);
  res.loss_after = eval_loss(run.config, d, run.model, EvalMode::ptq, &cfg);
  res.loss_delta = res.loss_after - res.loss_before;
  res.quantized = run.model;
  for (auto& mod : res.quantized.net.modules) {
    const QuantizedModuleWeights qw = quantize_module_weights(mod, cfg);
    if (auto* lin = std::get_if<Linear>(&mod.op); lin && qw.weight) lin->weight = *qw.weight;
    if (auto* att = std::get_if<AttentionUnit>(&mod.op); att && qw.attention) *att = *qw.attention;
  }
  const Matrix probe = network_input(run.model, d, d.val.front());
  res.decomposition = decompose_network(run.model.net, probe, cfg, decomp);

  double sum = 0.0;
  std::size_t count = 0;
  for (const Example& e : d.val) {
    const DualTrace t = forward_dual(run.model.net, network_input(run.model, d, e), cfg);
    const Matrix& h = t.h.back();
    const Matrix diff = t.hq.back() - h;
    for (std::size_t r = 0; r < h.rows(); ++r) {
      const double hn = l2_norm(h.row(r));
      if (hn == 0.0) continue;
      const double dn = l2_norm(diff.row(r));
      sum += (dn / hn) * (dn / hn);
      ++count;
    }
  }
  res.r_final = count == 0 ? 0.0 : sum / static_cast<double>(count);
  return res;
}

std::string model_content_hash(const Model& model) {
  Fnv1a h;
  Model copy = model;
  for (const auto& v : parameter_views(copy.net)) {
    h.update(v.name);
    h.update(std::span<const double>(v.values.data(), v.values.size()));
  }
  if (!model.embedding.empty()) {
    h.update("embedding");
    h.update(model.embedding.data());
  }
  return h.hex();
}

std::string config_hash(const TrainConfig& cfg) {
  nlohmann::json j = cfg;
  Fnv1a h;
  h.update(j.dump());
  return h.hex();
}

std::string loss_curve_csv(const RunRecord& run) {
  std::string out = "step,train_loss,val_loss\n";
  std::size_t vi = 0;
  for (std::size_t s = 0; s <= run.steps_run; ++s) {
    const double train = s == 0 ? std::nan("") : run.train_loss[s - 1];
    double val = std::nan("");
    if (vi < run.val_loss.size() && run.val_loss[vi].step == s) val = run.val_loss[vi++].loss;
    out += fmt::format("{},{},{}\n", s, fmt_double(train), fmt_double(val));
  }
  return out;
}

void write_run(const RunRecord& run, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_network(run.model.net, dir / "model.json", dir / "weights.json");
  if (!run.model.embedding.empty()) {
    TensorArchive emb;
    emb.add("embedding", run.model.embedding);
    emb.save(dir / "embedding.json");
  }
  nlohmann::json j;
  j["format"] = "qprobe-run";
  j["version"] = 1;
  j["config"] = run.config;
  j["config_hash"] = run.config_hash;
  j["seed"] = run.config.seed;
  j["content_hash"] = run.content_hash;
  j["steps_run"] = run.steps_run;
  j["stopped_early"] = run.stopped_early;
  j["network"] = "model.json";
  j["embedding"] = run.model.embedding.empty() ? nlohmann::json(nullptr) : nlohmann::json("embedding.json");
  j["loss_curve"] = "loss_curve.csv";
  write_text(dir / "manifest.json", j.dump(2) + "\n");
  write_text(dir / "loss_curve.csv", loss_curve_csv(run));
}

RunRecord read_run(const std::filesystem::path& dir) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw InputError(fmt::format("malformed run manifest: {}", e.what()));
  }
  if (j.value("format", "") != "qprobe-run") throw InputError("not a qprobe run manifest");
  RunRecord run;
  try {
    run.config = j.at("config").get<TrainConfig>();
    run.config_hash = j.at("config_hash").get<std::string>();
    run.content_hash = j.at("content_hash").get<std::string>();
    run.steps_run = j.at("steps_run").get<std::size_t>();
    run.stopped_early = j.at("stopped_early").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw InputError(fmt::format("malformed run manifest: {}", e.what()));
  }
  run.model.task = run.config.task;
  run.model.net = load_network(dir / j.at("network").get<std::string>());
  if (!j.at("embedding").is_null()) {
    run.model.embedding = TensorArchive::load(dir / j.at("embedding").get<std::string>()).get("embedding");
  }
  std::istringstream csv(read_text(dir / j.value("loss_curve", "loss_curve.csv")));
  std::string line;
  std::getline(csv, line);
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string a, b, c;
    std::getline(ls, a, ',');
    std::getline(ls, b, ',');
    std::getline(ls, c, ',');
    const auto step = static_cast<std::size_t>(std::stoull(a));
    const double train = std::strtod(b.c_str(), nullptr);
    const double val = std::strtod(c.c_str(), nullptr);
    if (step > 0) run.train_loss.push_back(train);
    if (!std::isnan(val)) run.val_loss.push_back({step, val});
  }
  return run;
}

}  // namespace qprobe
