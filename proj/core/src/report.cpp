// Copyright 2026 The qprobe Authors
// SPDX-License-Identifier: Apache-2.0

#include "qprobe/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <sstream>

#include <fmt/format.h>

#include "json.hpp"
#include "qprobe/errors.hpp"

namespace qprobe {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                    "#9467bd", "#8c564b", "#e377c2", "#17becf"};

double stat_value(const StatPair& p, SummaryStat s) { return p.get(s).value_or(kNaN); }

double metric_mean(const std::vector<std::optional<double>>& values) {
  return summarize_metric(values).mean.value_or(kNaN);
}

bool same(double x, double y) { return (std::isnan(x) && std::isnan(y)) || x == y; }

std::string escape_xml(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::vector<double> linear_ticks(double lo, double hi) {
  std::vector<double> t;
  for (int i = 0; i <= 4; ++i) t.push_back(lo + (hi - lo) * i / 4.0);
  return t;
}

}  // namespace

bool operator==(const DecompRow& x, const DecompRow& y) {
  return x.module_index == y.module_index && x.module_kind == y.module_kind && x.quantized == y.quantized &&
         x.stat == y.stat && same(x.r, y.r) && same(x.a, y.a) && same(x.b, y.b) && same(x.c, y.c) &&
         same(x.g, y.g) && same(x.g1, y.g1) && same(x.g2, y.g2) && same(x.cos_phi, y.cos_phi) &&
         same(x.cos_psi, y.cos_psi) && x.n_tokens_excluded == y.n_tokens_excluded && same(x.mmr, y.mmr) &&
         same(x.kurtosis, y.kurtosis);
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return fmt::format("{}", v);
}

double parse_double(std::string_view s) {
  const std::string str(s);
  if (str == "nan") return kNaN;
  if (str == "inf") return std::numeric_limits<double>::infinity();
  if (str == "-inf") return -std::numeric_limits<double>::infinity();
  char* end = nullptr;
  const double v = std::strtod(str.c_str(), &end);
  if (str.empty() || end != str.c_str() + str.size()) throw InputError(fmt::format("malformed number '{}'", s));
  return v;
}

std::vector<DecompRow> decomposition_rows(std::span<const DecompRecord> records, std::span<const Matrix> reference) {
  std::vector<DecompRow> rows;
  for (const auto& rec : records) {
    double mmr = kNaN;
    double kurt = kNaN;
    if (rec.module_index < reference.size()) {
      mmr = metric_mean(mmr_rows(reference[rec.module_index]));
      kurt = metric_mean(kurtosis_rows(reference[rec.module_index]));
    }
    for (SummaryStat s : {SummaryStat::mean, SummaryStat::truncated_mean_top1pct}) {
      DecompRow row;
      row.module_index = rec.module_index;
      row.module_kind = rec.module_kind;
      row.quantized = rec.quantized;
      row.stat = to_string(s);
      row.r = stat_value(rec.r_stat, s);
      row.a = stat_value(rec.a_stat, s);
      row.b = stat_value(rec.b_stat, s);
      row.c = stat_value(rec.c_stat, s);
      row.g = stat_value(rec.gain_stat, s);
      row.g1 = rec.linear ? rec.linear->g1 : kNaN;
      row.g2 = stat_value(rec.g2_stat, s);
      row.cos_phi = stat_value(rec.cos_phi_stat, s);
      row.cos_psi = stat_value(rec.cos_psi_stat, s);
      row.n_tokens_excluded = rec.n_tokens_excluded;
      row.mmr = mmr;
      row.kurtosis = kurt;
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

std::string decomposition_csv(std::span<const DecompRow> rows) {
  std::string out(kDecompCsvHeader);
  out += '\n';
  for (const auto& r : rows) {
    out += fmt::format("{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n", r.module_index, r.module_kind,
                       r.quantized ? 1 : 0, r.stat, format_double(r.r), format_double(r.a), format_double(r.b),
                       format_double(r.c), format_double(r.g), format_double(r.g1), format_double(r.g2),
                       format_double(r.cos_phi), format_double(r.cos_psi), r.n_tokens_excluded,
                       format_double(r.mmr), format_double(r.kurtosis));
  }
  return out;
}

std::vector<DecompRow> parse_decomposition_csv(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != kDecompCsvHeader) throw InputError("decomposition CSV header mismatch");
  std::vector<DecompRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 16) throw InputError(fmt::format("decomposition CSV line {}: expected 16 fields", lineno));
    DecompRow r;
    try {
      r.module_index = std::stoull(f[0]);
      r.n_tokens_excluded = std::stoull(f[13]);
    } catch (const std::logic_error&) {
      throw InputError(fmt::format("decomposition CSV line {}: malformed integer", lineno));
    }
    r.module_kind = f[1];
    if (f[2] != "0" && f[2] != "1") throw InputError(fmt::format("decomposition CSV line {}: quantized must be 0/1", lineno));
    r.quantized = f[2] == "1";
    r.stat = f[3];
    r.r = parse_double(f[4]);
    r.a = parse_double(f[5]);
    r.b = parse_double(f[6]);
    r.c = parse_double(f[7]);
    r.g = parse_double(f[8]);
    r.g1 = parse_double(f[9]);
    r.g2 = parse_double(f[10]);
    r.cos_phi = parse_double(f[11]);
    r.cos_psi = parse_double(f[12]);
    r.mmr = parse_double(f[14]);
    r.kurtosis = parse_double(f[15]);
    rows.push_back(std::move(r));
  }
  return rows;
}

std::string metrics_json(const MetricReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < report.mmr_per_row.size(); ++i) {
    const auto& m = report.mmr_per_row[i];
    const auto& k = report.kurtosis_per_row[i];
    rows.push_back({{"row_index", i},
                    {"mmr", m ? nlohmann::json(*m) : nlohmann::json(nullptr)},
                    {"kurtosis", k ? nlohmann::json(*k) : nlohmann::json(nullptr)}});
  }
  return rows.dump(2);
}

std::string line_plot_svg(std::span<const PlotSeries> series, const PlotOptions& opt) {
  constexpr double W = 760, L = 70, R = 230, T = 40, B = 55;
  const double legend_rows = static_cast<double>(series.size() + opt.notes.size()) + 1.0;
  const double H = std::max(440.0, T + 18.0 * legend_rows + B);
  auto tx = [&](double x) { return opt.log_x ? std::log10(x) : x; };
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i]) || !std::isfinite(tx(s.x[i]))) continue;
      x0 = std::min(x0, tx(s.x[i]));
      x1 = std::max(x1, tx(s.x[i]));
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  if (!(x0 <= x1)) { x0 = 0; x1 = 1; }
  if (!(y0 <= y1)) { y0 = 0; y1 = 1; }
  if (x0 == x1) { x0 -= 0.5; x1 += 0.5; }
  if (y0 == y1) { y0 -= 0.5; y1 += 0.5; }
  const double pad = 0.05 * (y1 - y0);
  y0 -= pad;
  y1 += pad;
  auto px = [&](double x) { return L + (tx(x) - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };

  std::string out = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\" "
      "font-family=\"sans-serif\" font-size=\"12\">\n",
      W, H, W, H);
  out += fmt::format("<rect width=\"{}\" height=\"{}\" fill=\"white\"/>\n", W, H);
  out += fmt::format("<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
                     (L + W - R) / 2, escape_xml(opt.title));
  out += fmt::format("<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n", L, T,
                     W - L - R, H - T - B);

  std::vector<double> xt;
  if (opt.log_x) {
    for (double e = std::ceil(x0); e <= std::floor(x1); e += 1.0) xt.push_back(e);
    if (xt.size() < 2) xt = linear_ticks(x0, x1);
  } else {
    xt = linear_ticks(x0, x1);
  }
  for (double t : xt) {
    const double x = L + (t - x0) / (x1 - x0) * (W - L - R);
    const std::string label = opt.log_x ? fmt::format("{:.3g}", std::pow(10.0, t)) : fmt::format("{:.3g}", t);
    out += fmt::format("<line x1=\"{:.2f}\" y1=\"{}\" x2=\"{:.2f}\" y2=\"{}\" stroke=\"black\"/>\n", x, H - B, x,
                       H - B + 5);
    out += fmt::format("<text x=\"{:.2f}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n", x, H - B + 19, label);
  }
  for (double t : linear_ticks(y0, y1)) {
    const double y = py(t);
    out += fmt::format("<line x1=\"{}\" y1=\"{:.2f}\" x2=\"{}\" y2=\"{:.2f}\" stroke=\"black\"/>\n", L - 5, y, L, y);
    out += fmt::format("<line x1=\"{}\" y1=\"{:.2f}\" x2=\"{}\" y2=\"{:.2f}\" stroke=\"#e0e0e0\"/>\n", L, y, W - R, y);
    out += fmt::format("<text x=\"{}\" y=\"{:.2f}\" text-anchor=\"end\">{:.3g}</text>\n", L - 8, y + 4, t);
  }
  out += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n", (L + W - R) / 2, H - 12,
                     escape_xml(opt.x_label));
  out += fmt::format("<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
                     (T + H - B) / 2, (T + H - B) / 2, escape_xml(opt.y_label));

  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const std::size_t ci = s.color >= 0 ? static_cast<std::size_t>(s.color) : k;
    const char* color = kPalette[ci % std::size(kPalette)];
    const std::string dash = s.dashed ? " stroke-dasharray=\"6 4\"" : "";
    if (s.markers) {
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        if (!std::isfinite(s.y[i]) || !std::isfinite(tx(s.x[i]))) continue;
        out += fmt::format("<circle cx=\"{:.2f}\" cy=\"{:.2f}\" r=\"3\" fill=\"{}\"/>\n", px(s.x[i]),
                           py(s.y[i]), color);
      }
      const double my = T + 14 + 18.0 * static_cast<double>(k);
      out += fmt::format("<circle cx=\"{}\" cy=\"{:.1f}\" r=\"3\" fill=\"{}\"/>\n", W - R + 24, my, color);
      out += fmt::format("<text x=\"{}\" y=\"{:.1f}\">{}</text>\n", W - R + 42, my + 4, escape_xml(s.name));
      continue;
    }
    std::string pts;
    auto flush = [&] {
      if (!pts.empty()) {
        out += fmt::format("<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.8\"{} points=\"{}\"/>\n", color,
                           dash, pts);
      }
      pts.clear();
    };
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i]) || !std::isfinite(tx(s.x[i]))) {
        flush();
        continue;
      }
      if (!pts.empty()) pts += ' ';
      pts += fmt::format("{:.2f},{:.2f}", px(s.x[i]), py(s.y[i]));
    }
    flush();
    const double ly = T + 14 + 18.0 * static_cast<double>(k);
    out += fmt::format("<line x1=\"{}\" y1=\"{:.1f}\" x2=\"{}\" y2=\"{:.1f}\" stroke=\"{}\" stroke-width=\"2\"{}/>\n",
                       W - R + 12, ly, W - R + 36, ly, color, dash);
    out += fmt::format("<text x=\"{}\" y=\"{:.1f}\">{}</text>\n", W - R + 42, ly + 4, escape_xml(s.name));
  }
  for (std::size_t i = 0; i < opt.notes.size(); ++i) {
    const double ny = T + 14 + 18.0 * static_cast<double>(series.size() + i) + 8;
    out += fmt::format("<text x=\"{}\" y=\"{:.1f}\" font-size=\"11\">{}</text>\n", W - R + 12, ny,
                       escape_xml(opt.notes[i]));
  }
  out += "</svg>\n";
  return out;
}

std::vector<std::pair<std::string, std::string>> decomposition_plots(std::span<const DecompRow> rows,
                                                                     std::string_view stat) {
  struct Q {
    const char* name;
    double DecompRow::*field;
  };
  const Q quantities[] = {{"R", &DecompRow::r}, {"A", &DecompRow::a}, {"B", &DecompRow::b},
                          {"C", &DecompRow::c}, {"G", &DecompRow::g}};
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& q : quantities) {
    PlotSeries s;
    s.name = fmt::format("{} ({})", q.name, stat);
    for (const auto& r : rows) {
      if (r.stat != stat) continue;
      s.x.push_back(static_cast<double>(r.module_index));
      s.y.push_back(r.*q.field);
    }
    PlotOptions opt;
    opt.title = fmt::format("{} by module", q.name);
    opt.x_label = "module index";
    opt.y_label = q.name;
    const PlotSeries one[] = {s};
    out.emplace_back(q.name, line_plot_svg(one, opt));
  }
  return out;
}

std::string scaling_plot_svg(std::span<const ScalingPoint> points, std::span<const ScalingFit> fits) {
  std::vector<PlotSeries> series;
  PlotOptions opt;
  opt.title = "Loss vs parameters";
  opt.x_label = "N (parameters)";
  opt.y_label = "loss";
  opt.log_x = true;
  for (std::size_t fi = 0; fi < fits.size(); ++fi) {
    const auto& f = fits[fi];
    std::vector<double> ns;
    for (const auto& p : points) {
      if (p.optimizer_label == f.optimizer_label) ns.push_back(static_cast<double>(p.n_params));
    }
    if (ns.empty()) continue;
    std::sort(ns.begin(), ns.end());
    ns.erase(std::unique(ns.begin(), ns.end()), ns.end());
    const double lo = std::log10(ns.front());
    const double hi = std::log10(ns.back());
    for (Precision prec : {Precision::fp, Precision::w4a4}) {
      if (prec == Precision::w4a4 && !f.rho_4bit) continue;
      PlotSeries s;
      s.name = fmt::format("{} {}", f.optimizer_label, to_string(prec));
      s.dashed = prec == Precision::w4a4;
      s.color = static_cast<int>(fi);
      for (int i = 0; i <= 40; ++i) {
        const double n = std::pow(10.0, lo + (hi - lo) * i / 40.0);
        s.x.push_back(n);
        s.y.push_back(predict(f, n, prec));
      }
      series.push_back(std::move(s));
    }
    opt.notes.push_back(f.rho_4bit ? fmt::format("{}: rho_4bit = {:.3f}", f.optimizer_label, *f.rho_4bit)
                                   : fmt::format("{}: rho_4bit undefined", f.optimizer_label));
  }
  for (std::size_t fi = 0; fi < fits.size(); ++fi) {
    const auto& f = fits[fi];
    for (Precision prec : {Precision::fp, Precision::w4a4}) {
      PlotSeries s;
      s.name = fmt::format("{} {} (obs)", f.optimizer_label, to_string(prec));
      s.markers = true;
      s.color = static_cast<int>(fi);
      for (const auto& p : points) {
        if (p.optimizer_label != f.optimizer_label || p.precision != prec) continue;
        s.x.push_back(static_cast<double>(p.n_params));
        s.y.push_back(p.loss);
      }
      if (!s.x.empty()) series.push_back(std::move(s));
    }
  }
  return line_plot_svg(series, opt);
}

}  // namespace qprobe
