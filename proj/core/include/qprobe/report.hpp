// Copyright 2026 The qprobe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qprobe/decomposition.hpp"
#include "qprobe/metrics.hpp"
#include "qprobe/network.hpp"
#include "qprobe/scaling.hpp"

namespace qprobe {

/// One decomposition CSV row; undefined values are NaN and print as "nan".
struct DecompRow {
  std::size_t module_index = 0;
  std::string module_kind;
  bool quantized = false;
  std::string stat;  // "mean" or "trunc"
  double r = 0, a = 0, b = 0, c = 0;
  double g = 0, g1 = 0, g2 = 0, cos_phi = 0, cos_psi = 0;
  std::size_t n_tokens_excluded = 0;
  double mmr = 0;       // mean row-wise MMR of the module's reference output
  double kurtosis = 0;  // mean row-wise kurtosis of the same
};

bool operator==(const DecompRow& x, const DecompRow& y);  // NaN == NaN here

inline constexpr std::string_view kDecompCsvHeader =
    "module_index,module_kind,quantized,stat,R,A,B,C,G,G1,G2,cos_phi,cos_psi,n_tokens_excluded,mmr,kurtosis";

/// Two rows per record (mean, then trunc). `reference` holds the module
/// outputs used for the metric columns (index 0 = input); may be empty.
std::vector<DecompRow> decomposition_rows(std::span<const DecompRecord> records,
                                          std::span<const Matrix> reference = {});

std::string decomposition_csv(std::span<const DecompRow> rows);
std::vector<DecompRow> parse_decomposition_csv(std::string_view text);

/// [{"row_index", "mmr", "kurtosis"}, ...] with null for undefined rows.
std::string metrics_json(const MetricReport& report);

/// Shortest round-trip decimal; "nan", "inf", "-inf" for non-finite values.
std::string format_double(double v);
double parse_double(std::string_view s);

struct PlotSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;  // non-finite points break the line
  bool dashed = false;
  bool markers = false;  // circles instead of a line
  int color = -1;        // palette index; -1 uses the series position
};

struct PlotOptions {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_x = false;
  std::vector<std::string> notes;  // extra text lines under the legend
};

/// Standalone SVG line plot with axes, ticks and a legend.
std::string line_plot_svg(std::span<const PlotSeries> series, const PlotOptions& options);

/// One plot per quantity ("R", "A", "B", "C", "G") over module index for the
/// given statistic; returns (quantity, svg) pairs.
std::vector<std::pair<std::string, std::string>> decomposition_plots(std::span<const DecompRow> rows,
                                                                     std::string_view stat);

/// Loss vs N with fp and w4a4 points and fitted curves per optimizer,
/// annotated with rho_4bit.
std::string scaling_plot_svg(std::span<const ScalingPoint> points, std::span<const ScalingFit> fits);

}  // namespace qprobe
