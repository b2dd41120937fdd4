// Copyright 2026 The qprobe Authors
// SPDX-License-Identifier: Apache-2.0

#include "cli.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

#include <fmt/format.h>

#include "CLI11.hpp"
#include "json.hpp"
#include "qprobe/decomposition.hpp"
#include "qprobe/errors.hpp"
#include "qprobe/linalg.hpp"
#include "qprobe/metrics.hpp"
#include "qprobe/network.hpp"
#include "qprobe/optimizers.hpp"
#include "qprobe/quant.hpp"
#include "qprobe/report.hpp"
#include "qprobe/scaling.hpp"
#include "qprobe/tasks.hpp"
#include "qprobe/trainer.hpp"

namespace qprobe::cli {
namespace {

namespace fs = std::filesystem;

constexpr std::uint64_t kInputStream = 11;

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw InputError(fmt::format("cannot read '{}'", p.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw InputError(fmt::format("cannot write '{}'", p.string()));
  out << text;
}

struct ModelFlags {
  std::string model;
  std::string weights;
  bool toy = false;
  std::size_t depth = 4;
  std::size_t width = 16;
  std::size_t heads = 2;
  std::size_t seq_len = 8;

  void add(CLI::App& app) {
    app.add_option("--model", model, "Network manifest (JSON)");
    app.add_option("--weights", weights, "Weight archive index (defaults to the manifest's)");
    app.add_flag("--toy", toy, "Use a seeded toy transformer instead of --model");
    app.add_option("--depth", depth, "Toy transformer blocks");
    app.add_option("--width", width, "Toy transformer width");
    app.add_option("--heads", heads, "Toy transformer heads");
    app.add_option("--seq-len", seq_len, "Toy transformer sequence length");
  }

  NetworkSpec load(std::uint64_t seed) const {
    if (toy) {
      Rng rng(seed);
      return build_toy_transformer(depth, width, heads, rng, seq_len);
    }
    if (model.empty()) throw InputError("either --model or --toy is required");
    return load_network(model, weights);
  }
};

struct QuantFlags {
  int bits = 4;
  std::string scheme = "absmax";
  std::string config;

  void add(CLI::App& app) {
    app.add_option("--bits", bits, "Quantization bit width");
    app.add_option("--scheme", scheme, "absmax, quest or none (lossless)");
    app.add_option("--config", config, "Quantization config JSON file (overrides --bits/--scheme)");
  }

  QuantConfig get() const {
    if (!config.empty()) return quant_config_from_json(read_file(config));
    QuantConfig q;
    q.bits = bits;
    q.scheme = parse_quant_scheme(scheme);
    q.validate();
    return q;
  }
};

Matrix probe_input(const NetworkSpec& net, std::uint64_t seed) {
  Rng rng(derive_seed(seed, kInputStream));
  const std::size_t rows = net.seq_len != 0 ? net.seq_len : 8;
  return rng.normal_matrix(rows, net.width);
}

SummaryStat parse_stat(const std::string& s) {
  if (s == "mean") return SummaryStat::mean;
  if (s == "trunc") return SummaryStat::truncated_mean_top1pct;
  throw InputError(fmt::format("unknown --stat '{}' (mean or trunc)", s));
}

void write_decomposition(const fs::path& dir, const std::vector<DecompRow>& rows, SummaryStat stat) {
  write_file(dir / "decomposition.csv", decomposition_csv(rows));
  for (const auto& [name, svg] : decomposition_plots(rows, to_string(stat))) {
    write_file(dir / fmt::format("plot_{}.svg", name), svg);
  }
}

void print_rows(std::ostream& out, const std::vector<DecompRow>& rows, SummaryStat stat) {
  out << fmt::format("{:>6} {:<15} {:>3} {:>12} {:>12} {:>12} {:>12} {:>10}\n", "module", "kind", "q", "R", "A", "B",
                     "C", "G");
  for (const auto& r : rows) {
    if (r.stat != to_string(stat)) continue;
    out << fmt::format("{:>6} {:<15} {:>3} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e} {:>10.4g}\n", r.module_index,
                       r.module_kind, r.quantized ? "y" : "n", r.r, r.a, r.b, r.c, r.g);
  }
}

TrainConfig load_train_config(const std::string& path) {
  return path.empty() ? TrainConfig{} : train_config_from_json(read_file(path));
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::istringstream in(s);
  std::string cell;
  while (std::getline(in, cell, ',')) {
    if (cell.empty()) continue;
    out.push_back(parse_double(cell));
  }
  if (out.empty()) throw InputError("--lrs needs at least one value");
  return out;
}

std::string run_summary_json(const RunRecord& run) {
  nlohmann::json j;
  j["steps_run"] = run.steps_run;
  j["stopped_early"] = run.stopped_early;
  j["final_train_loss"] = run.train_loss.empty() ? nlohmann::json(nullptr) : nlohmann::json(run.train_loss.back());
  j["final_val_loss"] = run.val_loss.back().loss;
  j["content_hash"] = run.content_hash;
  return j.dump(2);
}

bool report_check(std::ostream& out, const std::string& name, bool ok, const std::string& detail) {
  out << fmt::format("{:<34} {:<5} {}\n", name, ok ? "PASS" : "FAIL", detail);
  return ok;
}

std::size_t corrupted_formula(OptimizerKind kind, std::size_t m, std::size_t n) {
  // Negative control: SOAP without its second pair of eigenbases.
  if (kind == OptimizerKind::soap) return 3 * m * n + m * m + n * n;
  return state_memory_elements(kind, m, n);
}

}  // namespace

bool selftest(const SelftestOptions& options, std::ostream& out) {
  bool all = true;
  out << fmt::format("{:<34} {:<5} {}\n", "check", "state", "detail");

  {
    Rng rng(1);
    const NetworkSpec net = build_toy_transformer(2, 16, 2, rng, 8);
    QuantConfig q;
    q.bits = 4;
    const Matrix x = rng.normal_matrix(8, 16);
    const auto recs = decompose_network(net, x, q, {false});
    double worst = 0.0;
    for (const auto& r : recs) {
      for (std::size_t t = 0; t < r.r.size(); ++t) {
        if (r.token_excluded[t]) continue;
        worst = std::max(worst, std::abs(r.r[t] - (r.a[t] + r.b[t] + r.c[t])) / std::max(r.r[t], 1e-12));
      }
    }
    all &= report_check(out, "decomposition R = A + B + C", worst <= 1e-10, fmt::format("max rel {:.3e}", worst));
  }
  {
    Rng rng(2);
    const Matrix w = rng.normal_matrix(16, 24);
    QuantConfig q;
    q.bits = 4;
    const Matrix once = absmax_quantize_rows(w, q).values;
    const Matrix twice = absmax_quantize_rows(once, q).values;
    all &= report_check(out, "absmax grid closure", once == twice, "Q(Q(x)) == Q(x)");
    const Matrix neg = absmax_quantize_rows(w * -1.0, q).values;
    all &= report_check(out, "absmax symmetry", neg == once * -1.0, "Q(-x) == -Q(x)");
  }
  {
    bool ok = true;
    std::string detail = "6 kinds x 3 shapes";
    const std::pair<std::size_t, std::size_t> shapes[] = {{4, 8}, {7, 3}, {1, 5}};
    for (OptimizerKind kind : kAllOptimizers) {
      for (const auto& [m, n] : shapes) {
        const OptimizerState st(kind, m, n);
        const std::size_t expected = options.corrupt_memory_formula ? corrupted_formula(kind, m, n)
                                                                    : state_memory_elements(kind, m, n);
        if (st.state_elements() != expected) {
          ok = false;
          detail = fmt::format("{} {}x{}: live {} vs formula {}", to_string(kind), m, n, st.state_elements(), expected);
        }
      }
    }
    all &= report_check(out, "optimizer state accounting", ok, detail);
  }
  {
    const double d = 1e-3;
    const bool quad = huber(0.5 * d, d) == 0.125 * d * d;
    const bool lin = std::abs(huber(3 * d, d) - 2.5 * d * d) <= 1e-18;
    const bool cont = std::abs(huber(std::nextafter(d, 1.0), d) - huber(d, d)) <= 1e-15;
    const bool c1 = huber_derivative(d, d) == d && huber_derivative(std::nextafter(d, 1.0), d) == d;
    all &= report_check(out, "huber pointwise", quad && lin && cont && c1, "quadratic, linear, C1 at delta");
  }
  {
    const Matrix x = {{1, 0, 0}, {0, 1, 0}};
    const Matrix y = newton_schulz(x, 5, kCubicNs);
    all &= report_check(out, "newton-schulz fixed point", frobenius_norm(y - x) <= 1e-12, "cubic map, orthonormal rows");
  }
  {
    const Matrix d = Matrix::diagonal(std::vector<double>{3.0, -5.0, 1.0});
    const double s = spectral_norm(d);
    all &= report_check(out, "spectral norm", std::abs(s - 5.0) <= 1e-8, fmt::format("diag(3,-5,1) -> {:.10f}", s));
  }
  out << (all ? "selftest: all checks passed\n" : "selftest: FAILED\n");
  return all;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Quantization error decomposition and optimizer scaling toolkit", "qprobe"};
  app.require_subcommand(1);
  std::uint64_t seed = 0;
  std::string out_path;
  std::string stat_name = "mean";

  auto* analyze = app.add_subcommand("analyze", "ABC decomposition of a network under quantization");
  ModelFlags analyze_model;
  QuantFlags analyze_quant;
  analyze_model.add(*analyze);
  analyze_quant.add(*analyze);
  analyze->add_option("--seed", seed, "Seed for the probe input and toy weights");
  analyze->add_option("--out", out_path, "Output directory")->required();
  analyze->add_option("--stat", stat_name, "Summary statistic for plots: mean or trunc");

  auto* train_cmd = app.add_subcommand("train", "Train a toy model (QAT when --bits is given)");
  std::string train_config;
  std::optional<int> train_bits;
  std::string train_scheme = "quest";
  std::optional<std::uint64_t> train_seed;
  train_cmd->add_option("--config", train_config, "Train config JSON file");
  train_cmd->add_option("--seed", train_seed, "Override the config seed");
  train_cmd->add_option("--bits", train_bits, "Enable QAT with this bit width");
  train_cmd->add_option("--scheme", train_scheme, "QAT quantizer (default quest)");
  train_cmd->add_option("--out", out_path, "Run directory")->required();

  auto* sweep = app.add_subcommand("sweep", "Learning-rate sweep");
  std::string sweep_config;
  std::string lrs;
  std::optional<std::uint64_t> sweep_seed;
  sweep->add_option("--config", sweep_config, "Train config JSON file");
  sweep->add_option("--lrs", lrs, "Comma-separated learning rates")->required();
  sweep->add_option("--seed", sweep_seed, "Base seed (arm i uses seed + i)");
  sweep->add_option("--out", out_path, "Output directory")->required();

  auto* ptq = app.add_subcommand("ptq", "Post-training quantization of a trained run");
  std::string run_dir;
  QuantFlags ptq_quant;
  ptq->add_option("--run", run_dir, "Run directory written by train")->required();
  ptq_quant.add(*ptq);
  ptq->add_option("--out", out_path, "Output directory")->required();
  ptq->add_option("--stat", stat_name, "Summary statistic for plots: mean or trunc");

  auto* metrics = app.add_subcommand("metrics", "Row-wise MMR and kurtosis of module activations");
  ModelFlags metrics_model;
  std::optional<std::size_t> module_index;
  metrics_model.add(*metrics);
  metrics->add_option("--seed", seed, "Seed for the probe input and toy weights");
  metrics->add_option("--module", module_index, "Module index (default: last)");
  metrics->add_option("--out", out_path, "Output JSON file (default: stdout)");

  auto* fit_cmd = app.add_subcommand("fit-scaling", "Fit the iso-compute scaling law per optimizer");
  std::string data_path;
  bool paper_data = false;
  bool sequential = false;
  bool no_ci = false;
  fit_cmd->add_option("--data", data_path, "CSV: optimizer,n_params,tokens,loss,precision");
  fit_cmd->add_flag("--paper-data", paper_data, "Use the bundled published dataset");
  fit_cmd->add_flag("--sequential", sequential, "Fit fp coefficients first, then rho");
  fit_cmd->add_flag("--no-ci", no_ci, "Skip leave-one-out confidence");
  fit_cmd->add_option("--seed", seed, "Accepted for uniformity; the fit is deterministic");
  fit_cmd->add_option("--out", out_path, "Output directory")->required();

  auto* paper = app.add_subcommand("paper-data", "Print the bundled dataset as CSV");
  paper->add_option("--out", out_path, "Output CSV file (default: stdout)");

  auto* self = app.add_subcommand("selftest", "Run the embedded invariant checks");
  bool inject_fault = false;
  self->add_flag("--inject-fault", inject_fault, "Corrupt one memory formula (negative control)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitInput;
  }

  try {
    if (analyze->parsed()) {
      const NetworkSpec net = analyze_model.load(seed);
      const QuantConfig q = analyze_quant.get();
      const SummaryStat stat = parse_stat(stat_name);
      const Matrix x = probe_input(net, seed);
      const DualTrace trace = forward_dual(net, x, q);
      const auto records = decompose_trace(net, trace);
      const auto rows = decomposition_rows(records, trace.h);
      write_decomposition(out_path, rows, stat);
      print_rows(out, rows, stat);
    } else if (train_cmd->parsed()) {
      TrainConfig cfg = load_train_config(train_config);
      if (train_seed) cfg.seed = *train_seed;
      if (train_bits) {
        QuantConfig q;
        q.bits = *train_bits;
        q.scheme = parse_quant_scheme(train_scheme);
        cfg.quant = q;
      }
      cfg.validate();
      const RunRecord run = train(cfg);
      write_run(run, out_path);
      out << run_summary_json(run) << "\n";
    } else if (sweep->parsed()) {
      TrainConfig cfg = load_train_config(sweep_config);
      if (sweep_seed) cfg.seed = *sweep_seed;
      const auto lr_list = parse_list(lrs);
      const SweepResult res = lr_sweep(cfg, lr_list);
      nlohmann::json j;
      j["best_lr"] = res.best_lr;
      j["best_index"] = res.best_index;
      j["arms"] = nlohmann::json::array();
      for (const auto& a : res.arms) {
        j["arms"].push_back({{"lr", a.lr},
                             {"seed", a.seed},
                             {"diverged", a.diverged},
                             {"final_val_loss", a.final_val_loss ? nlohmann::json(*a.final_val_loss) : nlohmann::json(nullptr)},
                             {"error", a.error}});
      }
      write_file(fs::path(out_path) / "sweep.json", j.dump(2) + "\n");
      write_run(res.best_run, fs::path(out_path) / "best");
      out << j.dump(2) << "\n";
    } else if (ptq->parsed()) {
      const RunRecord run = read_run(run_dir);
      QuantConfig q = ptq_quant.get();
      const SummaryStat stat = parse_stat(stat_name);
      const PtqResult res = ptq_apply(run, q);
      nlohmann::json j;
      j["loss_before"] = res.loss_before;
      j["loss_after"] = res.loss_after;
      j["loss_delta"] = res.loss_delta;
      j["quant"] = nlohmann::json::parse(quant_config_to_json(q));
      const fs::path dir(out_path);
      write_file(dir / "ptq.json", j.dump(2) + "\n");
      save_network(res.quantized.net, dir / "model.json", dir / "weights.json");
      const Matrix probe = validation_probe_input(run.config, run.model);
      const auto ref = forward_reference(run.model.net, probe);
      const auto rows = decomposition_rows(res.decomposition, ref);
      write_decomposition(dir, rows, stat);
      out << j.dump(2) << "\n";
    } else if (metrics->parsed()) {
      const NetworkSpec net = metrics_model.load(seed);
      const Matrix x = probe_input(net, seed);
      const Activations h = forward_reference(net, x);
      const std::size_t l = module_index.value_or(h.size() - 1);
      if (l >= h.size()) throw InputError(fmt::format("--module {} out of range [0, {}]", l, h.size() - 1));
      const std::string text = metrics_json(metric_report(h[l])) + "\n";
      if (out_path.empty()) {
        out << text;
      } else {
        write_file(out_path, text);
      }
    } else if (fit_cmd->parsed()) {
      if (paper_data == !data_path.empty()) throw InputError("exactly one of --data or --paper-data is required");
      const auto points = paper_data ? bundled_paper_data() : parse_scaling_csv(read_file(data_path));
      FitOptions opt;
      opt.mode = sequential ? FitMode::sequential : FitMode::joint;
      const auto fits = fit_by_optimizer(points, opt, !no_ci);
      const fs::path dir(out_path);
      write_file(dir / "fits.json", scaling_fits_to_json(fits) + "\n");
      write_file(dir / "scaling.svg", scaling_plot_svg(points, fits));
      out << fmt::format("{:<10} {:>12} {:>8} {:>8} {:>8}\n", "optimizer", "A'", "alpha", "E", "rho_4bit");
      for (const auto& f : fits) {
        out << fmt::format("{:<10} {:>12.4g} {:>8.4f} {:>8.4f} {:>8}\n", f.optimizer_label, f.a_prime, f.alpha,
                           f.e_irreducible, f.rho_4bit ? fmt::format("{:.4f}", *f.rho_4bit) : "n/a");
      }
    } else if (paper->parsed()) {
      const std::string csv = scaling_csv(bundled_paper_data());
      if (out_path.empty()) {
        out << csv;
      } else {
        write_file(out_path, csv);
      }
    } else if (self->parsed()) {
      return selftest({inject_fault}, out) ? kExitOk : kExitFailure;
    }
  } catch (const InputError& e) {
    err << "input error: " << e.what() << "\n";
    return kExitInput;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "input error: " << e.what() << "\n";
    return kExitInput;
  }
  return kExitOk;
}

}  // namespace qprobe::cli
