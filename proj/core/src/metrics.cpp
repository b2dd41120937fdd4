// Copyright 2026 The qprobe Authors
// SPDX-License-Identifier: Apache-2.0

#include "qprobe/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "qprobe/errors.hpp"

namespace qprobe {
namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
  std::vector<double> ranks(v.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

std::vector<std::optional<double>> mmr_rows(const Matrix& x) {
  std::vector<std::optional<double>> out(x.rows());
  std::vector<double> mags(x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    if (x.cols() == 0) continue;
    const auto row = x.row(r);
    std::transform(row.begin(), row.end(), mags.begin(), [](double v) { return std::abs(v); });
    std::sort(mags.begin(), mags.end());
    const std::size_t n = mags.size();
    const double median = n % 2 == 1 ? mags[n / 2] : 0.5 * (mags[n / 2 - 1] + mags[n / 2]);
    if (median > 0.0) out[r] = mags.back() / median;
  }
  return out;
}

std::vector<std::optional<double>> kurtosis_rows(const Matrix& x) {
  std::vector<std::optional<double>> out(x.rows());
  const double n = static_cast<double>(x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    if (x.cols() == 0) continue;
    const auto row = x.row(r);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= n;
    double m2 = 0.0;
    double m4 = 0.0;
    for (double v : row) {
      const double d = v - mean;
      const double d2 = d * d;
      m2 += d2;
      m4 += d2 * d2;
    }
    m2 /= n;
    m4 /= n;
    if (m2 > 0.0) out[r] = m4 / (m2 * m2);
  }
  return out;
}

double spearman(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw InputError("spearman: length mismatch");
  if (xs.size() < 2) throw InputError("spearman: need at least two observations");
  const auto rx = average_ranks(xs);
  const auto ry = average_ranks(ys);
  const double n = static_cast<double>(xs.size());
  const double mean = (n + 1.0) / 2.0;
  double sxy = 0.0;
  double sxx = 0.0;
  double syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    const double dx = rx[i] - mean;
    const double dy = ry[i] - mean;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw InputError("spearman: constant input has no ranking");
  return sxy / std::sqrt(sxx * syy);
}

MetricSummary summarize_metric(std::span<const std::optional<double>> values) {
  MetricSummary s;
  double acc = 0.0;
  std::size_t n = 0;
  for (const auto& v : values) {
    if (!v) {
      ++s.n_undefined;
      continue;
    }
    acc += *v;
    ++n;
    s.max = s.max ? std::max(*s.max, *v) : *v;
  }
  if (n > 0) s.mean = acc / static_cast<double>(n);
  return s;
}

MetricReport metric_report(const Matrix& x) {
  MetricReport r;
  r.mmr_per_row = mmr_rows(x);
  r.kurtosis_per_row = kurtosis_rows(x);
  r.mmr = summarize_metric(r.mmr_per_row);
  r.kurtosis = summarize_metric(r.kurtosis_per_row);
  return r;
}

}  // namespace qprobe
