// Copyright 2026 The qprobe Authors
// SPDX-License-Identifier: Apache-2.0

#include "qprobe/scaling.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "json.hpp"
#include "qprobe/errors.hpp"
#include "qprobe/parallel.hpp"

namespace qprobe {
namespace {

constexpr double kRhoCeiling = 1.5;  // upper end of the sanity band
constexpr std::array<double, 5> kAlphaGrid = {0.1, 0.2, 0.3, 0.4, 0.5};
constexpr std::array<double, 3> kEFactors = {0.5, 0.8, 1.0};
constexpr std::array<double, 3> kRhoGrid = {0.7, 0.85, 1.0};

// Unconstrained coordinates: log A', log alpha, log E, logit(rho / 1.5).
using Coords = std::array<double, 4>;

struct Params {
  double a, alpha, e, rho;
};

Params decode(const Coords& u) {
  return {std::exp(u[0]), std::exp(u[1]), std::exp(u[2]), kRhoCeiling / (1.0 + std::exp(-u[3]))};
}

Coords encode(const Params& p) {
  const double s = p.rho / kRhoCeiling;
  return {std::log(p.a), std::log(p.alpha), std::log(p.e), std::log(s / (1.0 - s))};
}

double point_rho(const ScalingPoint& pt, double rho) { return pt.precision == Precision::w4a4 ? rho : 1.0; }

double model_loss(const Params& p, const ScalingPoint& pt) {
  return p.a / std::pow(static_cast<double>(pt.n_params) * point_rho(pt, p.rho), p.alpha) + p.e;
}

double objective(std::span<const ScalingPoint> pts, const Params& p, double delta) {
  double acc = 0.0;
  for (const auto& pt : pts) acc += huber(std::log(model_loss(p, pt)) - std::log(pt.loss), delta);
  return acc;
}

// Solves m x = b in place by Gaussian elimination with partial pivoting.
bool solve(std::vector<std::vector<double>> m, std::vector<double> b, std::vector<double>& x) {
  const std::size_t n = b.size();
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r) {
      if (std::abs(m[r][c]) > std::abs(m[piv][c])) piv = r;
    }
    if (!(std::abs(m[piv][c]) > 0.0)) return false;
    std::swap(m[piv], m[c]);
    std::swap(b[piv], b[c]);
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = m[r][c] / m[c][c];
      for (std::size_t k = c; k < n; ++k) m[r][k] -= f * m[c][k];
      b[r] -= f * b[c];
    }
  }
  x.assign(n, 0.0);
  for (std::size_t c = n; c-- > 0;) {
    double s = b[c];
    for (std::size_t k = c + 1; k < n; ++k) s -= m[c][k] * x[k];
    x[c] = s / m[c][c];
  }
  return std::all_of(x.begin(), x.end(), [](double v) { return std::isfinite(v); });
}

// Levenberg-Marquardt over the free coordinates.
Coords minimize(std::span<const ScalingPoint> pts, Coords u, const std::vector<std::size_t>& free,
                double delta, std::size_t max_iter) {
  const std::size_t k = free.size();
  double obj = objective(pts, decode(u), delta);
  double lambda = 1e-3;
  std::size_t quiet = 0;
  for (std::size_t it = 0; it < max_iter; ++it) {
    const Params p = decode(u);
    std::vector<std::vector<double>> h(k, std::vector<double>(k, 0.0));
    std::vector<double> g(k, 0.0);
    for (const auto& pt : pts) {
      const double rho = point_rho(pt, p.rho);
      const double log_nr = std::log(static_cast<double>(pt.n_params) * rho);
      const double term = p.a * std::exp(-p.alpha * log_nr);
      const double pred = term + p.e;
      const double r = std::log(pred) - std::log(pt.loss);
      const double w = std::abs(r) <= delta ? 1.0 : delta / std::abs(r);
      std::array<double, 4> d = {term, -term * log_nr * p.alpha, p.e, 0.0};
      if (pt.precision == Precision::w4a4) {
        // d term/d rho = -alpha term / rho; d rho/d u3 = rho (1 - rho / 1.5).
        d[3] = -term * p.alpha * (1.0 - p.rho / kRhoCeiling);
      }
      for (double& v : d) v /= pred;
      for (std::size_t i = 0; i < k; ++i) {
        g[i] += w * r * d[free[i]];
        for (std::size_t j = 0; j < k; ++j) h[i][j] += w * d[free[i]] * d[free[j]];
      }
    }
    bool accepted = false;
    double new_obj = obj;
    Coords trial = u;
    for (int inner = 0; inner < 60; ++inner) {
      auto m = h;
      for (std::size_t i = 0; i < k; ++i) m[i][i] += lambda * std::max(h[i][i], 1e-12);
      std::vector<double> neg_g(k);
      for (std::size_t i = 0; i < k; ++i) neg_g[i] = -g[i];
      std::vector<double> step;
      if (solve(m, neg_g, step)) {
        trial = u;
        for (std::size_t i = 0; i < k; ++i) trial[free[i]] += step[i];
        const Params tp = decode(trial);
        new_obj = objective(pts, tp, delta);
        if (std::isfinite(new_obj) && new_obj < obj) {
          accepted = true;
          break;
        }
      }
      lambda *= 4.0;
      if (lambda > 1e16) break;
    }
    if (!accepted) break;
    const double gain = obj - new_obj;
    u = trial;
    obj = new_obj;
    lambda = std::max(lambda / 3.0, 1e-15);
    quiet = gain <= 1e-15 * std::max(obj, 1e-300) ? quiet + 1 : 0;
    if (quiet >= 5) break;
  }
  return u;
}

void check_points(std::span<const ScalingPoint> pts) {
  if (pts.size() < 4) throw InputError(fmt::format("scaling fit needs at least 4 points, got {}", pts.size()));
  std::set<std::uint64_t> sizes;
  bool has_fp = false;
  for (const auto& p : pts) {
    if (!(p.loss > 0.0) || !std::isfinite(p.loss)) throw InputError("scaling point loss must be positive");
    if (p.n_params < 1) throw InputError("scaling point n_params must be >= 1");
    sizes.insert(p.n_params);
    has_fp = has_fp || p.precision == Precision::fp;
  }
  if (!has_fp) throw InputError("scaling fit needs at least one fp point");
  if (sizes.size() < 2) throw InputError("scaling fit is degenerate: all points share one N");
}

bool has_w4a4(std::span<const ScalingPoint> pts) {
  return std::any_of(pts.begin(), pts.end(), [](const auto& p) { return p.precision == Precision::w4a4; });
}

ScalingFit finish(std::span<const ScalingPoint> pts, const Params& p, bool with_rho, double delta) {
  ScalingFit f;
  f.optimizer_label = pts.front().optimizer_label;
  f.a_prime = p.a;
  f.alpha = p.alpha;
  f.e_irreducible = p.e;
  if (with_rho) f.rho_4bit = p.rho;
  for (const auto& pt : pts) f.residuals.push_back(std::log(model_loss(p, pt)) - std::log(pt.loss));
  f.objective = objective(pts, p, delta);
  f.n_points = pts.size();
  return f;
}

double pop_std(const std::vector<double>& v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size()));
}

std::string trim(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.pop_back();
  std::size_t b = 0;
  while (b < s.size() && s[b] == ' ') ++b;
  return s.substr(b);
}

}  // namespace

std::string to_string(Precision p) { return p == Precision::fp ? "fp" : "w4a4"; }

Precision parse_precision(std::string_view s) {
  if (s == "fp") return Precision::fp;
  if (s == "w4a4") return Precision::w4a4;
  throw InputError(fmt::format("unknown precision '{}'", s));
}

double predict(const ScalingFit& fit, double n_params, Precision precision) {
  if (!(n_params >= 1.0)) throw InputError("predict needs n >= 1");
  double rho = 1.0;
  if (precision == Precision::w4a4) {
    if (!fit.rho_4bit) throw InputError("fit has no rho_4bit; cannot predict w4a4 loss");
    rho = *fit.rho_4bit;
  }
  return fit.a_prime / std::pow(n_params * rho, fit.alpha) + fit.e_irreducible;
}

double huber(double r, double delta) {
  const double a = std::abs(r);
  return a <= delta ? 0.5 * r * r : delta * (a - 0.5 * delta);
}

double huber_derivative(double r, double delta) {
  return std::abs(r) <= delta ? r : (r > 0.0 ? delta : -delta);
}

std::vector<FitStart> multi_start_grid(std::span<const ScalingPoint> points) {
  if (points.empty()) throw InputError("multi-start grid needs points");
  double min_loss = std::numeric_limits<double>::infinity();
  for (const auto& p : points) min_loss = std::min(min_loss, p.loss);
  const ScalingPoint& first = points.front();
  std::vector<FitStart> grid;
  for (double alpha : kAlphaGrid) {
    for (double ef : kEFactors) {
      for (double rho : kRhoGrid) {
        const double e = ef * min_loss;
        // Floor keeps A' positive when E meets the first point's loss.
        const double gap = std::max(first.loss - e, 1e-3 * first.loss);
        const double a = gap * std::pow(static_cast<double>(first.n_params) * point_rho(first, rho), alpha);
        grid.push_back({a, alpha, e, rho});
      }
    }
  }
  return grid;
}

double fit_objective(std::span<const ScalingPoint> points, double a_prime, double alpha,
                     double e_irreducible, double rho, double delta) {
  return objective(points, {a_prime, alpha, e_irreducible, rho}, delta);
}

ScalingFit fit(std::span<const ScalingPoint> points, const FitOptions& opt) {
  check_points(points);
  const bool with_rho = has_w4a4(points);
  const auto grid = multi_start_grid(points);

  if (opt.mode == FitMode::sequential && with_rho) {
    std::vector<ScalingPoint> fp, q;
    for (const auto& p : points) (p.precision == Precision::fp ? fp : q).push_back(p);
    Params best{};
    double best_obj = std::numeric_limits<double>::infinity();
    if (fp.size() >= 3) {
      for (const auto& s : multi_start_grid(fp)) {
        const Coords u = minimize(fp, encode({s.a_prime, s.alpha, s.e_irreducible, 1.0}), {0, 1, 2},
                                  opt.delta, opt.max_iterations);
        const double o = objective(fp, decode(u), opt.delta);
        if (o < best_obj) {
          best_obj = o;
          best = decode(u);
        }
      }
    } else {
      throw InputError("sequential scaling fit needs at least 3 fp points");
    }
    double best_rho_obj = std::numeric_limits<double>::infinity();
    Params stage1 = best;
    for (double rho : kRhoGrid) {
      Params start = stage1;
      start.rho = rho;
      const Coords u = minimize(q, encode(start), {3}, opt.delta, opt.max_iterations);
      const double o = objective(q, decode(u), opt.delta);
      if (o < best_rho_obj) {
        best_rho_obj = o;
        best = decode(u);
      }
    }
    return finish(points, best, true, opt.delta);
  }

  const std::vector<std::size_t> free = with_rho ? std::vector<std::size_t>{0, 1, 2, 3}
                                                 : std::vector<std::size_t>{0, 1, 2};
  Params best{};
  double best_obj = std::numeric_limits<double>::infinity();
  for (const auto& s : grid) {
    const double rho = with_rho ? s.rho : 1.0;
    const Coords u = minimize(points, encode({s.a_prime, s.alpha, s.e_irreducible, rho}), free,
                              opt.delta, opt.max_iterations);
    const Params p = decode(u);
    const double o = objective(points, p, opt.delta);
    if (o < best_obj) {
      best_obj = o;
      best = p;
    }
  }
  return finish(points, best, with_rho, opt.delta);
}

ParameterStd loo_confidence(std::span<const ScalingPoint> points, const FitOptions& opt) {
  check_points(points);
  std::optional<std::size_t> keep_fp, keep_q;
  for (std::size_t i = 0; i < points.size(); ++i) {
    auto& slot = points[i].precision == Precision::fp ? keep_fp : keep_q;
    if (!slot || points[i].loss < points[*slot].loss) slot = i;
  }
  std::vector<std::size_t> dropped;
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (i != keep_fp && i != keep_q) dropped.push_back(i);
  }
  if (dropped.empty()) throw InputError("leave-one-out needs at least one droppable point");
  std::vector<ScalingFit> fits(dropped.size());
  parallel_for(dropped.size(), [&](std::size_t f) {
    std::vector<ScalingPoint> subset;
    for (std::size_t i = 0; i < points.size(); ++i) {
      if (i != dropped[f]) subset.push_back(points[i]);
    }
    fits[f] = fit(subset, opt);
  });
  std::vector<double> a, al, e, r;
  for (const auto& f : fits) {
    a.push_back(f.a_prime);
    al.push_back(f.alpha);
    e.push_back(f.e_irreducible);
    if (f.rho_4bit) r.push_back(*f.rho_4bit);
  }
  ParameterStd s;
  s.a_prime = pop_std(a);
  s.alpha = pop_std(al);
  s.e_irreducible = pop_std(e);
  if (r.size() == fits.size()) s.rho_4bit = pop_std(r);
  return s;
}

std::vector<ScalingFit> fit_by_optimizer(std::span<const ScalingPoint> points, const FitOptions& opt,
                                         bool with_ci) {
  std::vector<std::string> labels;
  for (const auto& p : points) {
    if (std::find(labels.begin(), labels.end(), p.optimizer_label) == labels.end()) {
      labels.push_back(p.optimizer_label);
    }
  }
  std::vector<ScalingFit> out;
  for (const auto& label : labels) {
    std::vector<ScalingPoint> group;
    for (const auto& p : points) {
      if (p.optimizer_label == label) group.push_back(p);
    }
    ScalingFit f = fit(group, opt);
    if (with_ci) f.ci = loo_confidence(group, opt);
    out.push_back(std::move(f));
  }
  return out;
}

std::vector<ScalingPoint> parse_scaling_csv(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || trim(line) != "optimizer,n_params,tokens,loss,precision") {
    throw InputError("scaling CSV must start with header optimizer,n_params,tokens,loss,precision");
  }
  std::vector<ScalingPoint> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(trim(cell));
    if (f.size() != 5) throw InputError(fmt::format("scaling CSV line {}: expected 5 fields", lineno));
    ScalingPoint p;
    p.optimizer_label = f[0];
    try {
      std::size_t used = 0;
      p.n_params = std::stoull(f[1], &used);
      if (used != f[1].size()) throw std::invalid_argument("n_params");
      p.tokens = std::stoull(f[2], &used);
      if (used != f[2].size()) throw std::invalid_argument("tokens");
      p.loss = std::stod(f[3], &used);
      if (used != f[3].size()) throw std::invalid_argument("loss");
    } catch (const std::logic_error&) {
      throw InputError(fmt::format("scaling CSV line {}: malformed number", lineno));
    }
    p.precision = parse_precision(f[4]);
    if (p.optimizer_label.empty()) throw InputError(fmt::format("scaling CSV line {}: empty optimizer", lineno));
    if (!(p.loss > 0.0) || !std::isfinite(p.loss)) {
      throw InputError(fmt::format("scaling CSV line {}: loss must be positive", lineno));
    }
    if (p.n_params < 1) throw InputError(fmt::format("scaling CSV line {}: n_params must be >= 1", lineno));
    out.push_back(std::move(p));
  }
  if (out.empty()) throw InputError("scaling CSV has no data rows");
  return out;
}

std::string scaling_csv(std::span<const ScalingPoint> points) {
  std::string out = "optimizer,n_params,tokens,loss,precision\n";
  for (const auto& p : points) {
    out += fmt::format("{},{},{},{},{}\n", p.optimizer_label, p.n_params, p.tokens, p.loss, to_string(p.precision));
  }
  return out;
}

std::string scaling_fits_to_json(std::span<const ScalingFit> fits) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& f : fits) {
    nlohmann::json j;
    j["optimizer"] = f.optimizer_label;
    j["a_prime"] = f.a_prime;
    j["alpha"] = f.alpha;
    j["e_irreducible"] = f.e_irreducible;
    j["rho_4bit"] = f.rho_4bit ? nlohmann::json(*f.rho_4bit) : nlohmann::json(nullptr);
    if (f.ci) {
      j["ci"] = {{"a_prime", f.ci->a_prime},
                 {"alpha", f.ci->alpha},
                 {"e_irreducible", f.ci->e_irreducible},
                 {"rho_4bit", f.ci->rho_4bit ? nlohmann::json(*f.ci->rho_4bit) : nlohmann::json(nullptr)}};
    } else {
      j["ci"] = nullptr;
    }
    j["residuals"] = f.residuals;
    j["objective"] = f.objective;
    j["n_points"] = f.n_points;
    arr.push_back(std::move(j));
  }
  return arr.dump(2);
}

std::vector<ScalingFit> scaling_fits_from_json(std::string_view text) {
  std::vector<ScalingFit> out;
  try {
    const auto arr = nlohmann::json::parse(text);
    if (!arr.is_array()) throw InputError("scaling fits JSON must be an array");
    for (const auto& j : arr) {
      ScalingFit f;
      f.optimizer_label = j.at("optimizer").get<std::string>();
      f.a_prime = j.at("a_prime").get<double>();
      f.alpha = j.at("alpha").get<double>();
      f.e_irreducible = j.at("e_irreducible").get<double>();
      if (!j.at("rho_4bit").is_null()) f.rho_4bit = j.at("rho_4bit").get<double>();
      if (!j.at("ci").is_null()) {
        const auto& c = j.at("ci");
        ParameterStd s;
        s.a_prime = c.at("a_prime").get<double>();
        s.alpha = c.at("alpha").get<double>();
        s.e_irreducible = c.at("e_irreducible").get<double>();
        if (!c.at("rho_4bit").is_null()) s.rho_4bit = c.at("rho_4bit").get<double>();
        f.ci = s;
      }
      f.residuals = j.at("residuals").get<std::vector<double>>();
      f.objective = j.at("objective").get<double>();
      f.n_points = j.at("n_points").get<std::size_t>();
      out.push_back(std::move(f));
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(fmt::format("malformed scaling fits JSON: {}", e.what()));
  }
  return out;
}

}  // namespace qprobe
