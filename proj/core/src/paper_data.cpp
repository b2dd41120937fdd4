// Copyright 2026 The qprobe Authors
// SPDX-License-Identifier: Apache-2.0

// Published pretraining results bundled as constants (dataset version 1).

#include <array>
#include <cmath>

#include "qprobe/scaling.hpp"

namespace qprobe {
namespace {

constexpr int kDatasetVersion = 1;
constexpr double kNa = -1.0;

constexpr std::array<std::uint64_t, 6> kParams = {49'748'760,  121'813'686, 225'335'892,
                                                  477'024'972, 729'974'655, 1'489'423'554};
constexpr std::array<std::uint64_t, 6> kTokens = {1'000'000'000,  2'000'000'000,
                                                  6'000'000'000,  10'000'000'000,
                                                  14'000'000'000, 30'000'000'000};

struct LossRow {
  const char* optimizer;
  std::array<double, 6> fp;
  std::array<double, 6> w4a4;
};

// Final test losses at 50M, 125M, 350M, 500M, 760M, 1.5B.
constexpr std::array<LossRow, 6> kLosses = {{
    {"AdamW", {3.695, 3.318, 2.961, 2.834, 2.744, 2.627}, {3.757, 3.375, 3.009, 2.905, 2.787, 2.655}},
    {"Muon", {3.632, 3.263, 2.915, 2.804, 2.719, 2.612}, {3.698, 3.340, 2.971, 2.868, 2.765, 2.651}},
    {"PSGD", {3.615, 3.283, 2.978, 2.841, 2.799, kNa}, {3.696, 3.339, 3.19, 2.976, 2.844, kNa}},
    {"Scion", {3.615, 3.269, 2.932, 2.805, 2.726, kNa}, {3.703, 3.335, 2.980, 2.850, 2.763, kNa}},
    {"Shampoo", {3.648, 3.311, 2.959, 2.831, 2.741, 2.622}, {3.735, 3.341, 2.999, 2.849, 2.782, 2.640}},
    {"SOAP", {3.589, 3.241, 2.916, 2.803, 2.754, kNa}, {3.682, 3.302, 2.981, 2.842, 2.797, kNa}},
}};

}  // namespace

std::vector<ScalingPoint> bundled_paper_data() {
  static_assert(kDatasetVersion == 1);
  std::vector<ScalingPoint> out;
  for (const auto& row : kLosses) {
    for (std::size_t i = 0; i < kParams.size(); ++i) {
      if (row.fp[i] != kNa) out.push_back({kParams[i], kTokens[i], row.fp[i], Precision::fp, row.optimizer});
    }
    for (std::size_t i = 0; i < kParams.size(); ++i) {
      if (row.w4a4[i] != kNa) {
        out.push_back({kParams[i], kTokens[i], row.w4a4[i], Precision::w4a4, row.optimizer});
      }
    }
  }
  return out;
}

std::vector<PublishedCoefficients> published_coefficients() {
  return {
      {"AdamW", 79, 7, 0.20, 1.40, 0.863, 0.003},
      {"Muon", 208, 40, 0.27, 1.85, 0.852, 0.010},
      {"PSGD", 77, 6, 0.18, 1.39, 0.739, 0.049},
      {"Scion", 148, 22, 0.25, 1.75, 0.856, 0.010},
      {"Shampoo", 142, 26, 0.24, 1.72, 0.879, 0.018},
      {"SOAP", 706, 132, 0.35, 2.22, 0.822, 0.010},
  };
}

}  // namespace qprobe
