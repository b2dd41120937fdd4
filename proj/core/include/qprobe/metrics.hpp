// Copyright 2026 The qprobe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <span>
#include <vector>

#include "qprobe/matrix.hpp"

namespace qprobe {

/// Row-wise max(|x|) / median(|x|). Rows with a zero median are undefined
/// (std::nullopt). Even-length medians average the two central values.
std::vector<std::optional<double>> mmr_rows(const Matrix& x);

/// Row-wise Pearson kurtosis m4 / m2^2 with population moments (Gaussian
/// reference 3). Zero-variance rows are undefined.
std::vector<std::optional<double>> kurtosis_rows(const Matrix& x);

/// Spearman rank correlation with average ranks for ties. Throws InputError
/// on length mismatch, fewer than two values, or a constant input.
double spearman(std::span<const double> xs, std::span<const double> ys);

struct MetricSummary {
  std::optional<double> mean;
  std::optional<double> max;
  std::size_t n_undefined = 0;
};

struct MetricReport {
  std::vector<std::optional<double>> mmr_per_row;
  std::vector<std::optional<double>> kurtosis_per_row;
  MetricSummary mmr;
  MetricSummary kurtosis;
};

MetricSummary summarize_metric(std::span<const std::optional<double>> values);
MetricReport metric_report(const Matrix& x);

}  // namespace qprobe
