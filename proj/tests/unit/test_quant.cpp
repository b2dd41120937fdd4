// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <limits>
#include <vector>

#include <gtest/gtest.h>

#include "qprobe/errors.hpp"
#include "qprobe/linalg.hpp"
#include "qprobe/quant.hpp"

using namespace qprobe;

namespace {

QuantConfig absmax(int bits) {
  QuantConfig c;
  c.bits = bits;
  return c;
}

QuantConfig quest(int bits) {
  QuantConfig c = absmax(bits);
  c.scheme = QuantScheme::quest;
  return c;
}

// Brute force: nearest of the 2*qmax+1 grid levels, ties to the even code.
double nearest_level(double x, double scale, int qmax) {
  double best = 0.0;
  double best_err = std::numeric_limits<double>::infinity();
  for (int k = -qmax; k <= qmax; ++k) {
    const double err = std::abs(x - k * scale);
    if (err < best_err || (err == best_err && k % 2 == 0)) {
      best_err = err;
      best = k * scale;
    }
  }
  return best;
}

}  // namespace

TEST(Absmax, ZeroRow) {
  const QuantResult q = absmax_quantize_rows(Matrix(1, 3), absmax(4));
  EXPECT_EQ(q.values, Matrix(1, 3));
  EXPECT_EQ(q.scales[0], 0.0);
}

TEST(Absmax, AlreadyOnGrid) {
  const Matrix x{{-7, 7, 3}};
  const QuantResult q = absmax_quantize_rows(x, absmax(4));
  EXPECT_EQ(q.scales[0], 1.0);
  EXPECT_EQ(q.values, x);
}

TEST(Absmax, MatchesBruteForceGrid) {
  const QuantResult q = absmax_quantize_rows(Matrix{{0.5, -1.0, 0.26}}, absmax(4));
  EXPECT_DOUBLE_EQ(q.scales[0], 1.0 / 7.0);
  EXPECT_NEAR(q.values(0, 0), 4.0 / 7.0, 1e-15);
  EXPECT_NEAR(q.values(0, 1), -1.0, 1e-15);
  EXPECT_NEAR(q.values(0, 2), 2.0 / 7.0, 1e-15);

  Rng rng(1);
  const Matrix x = rng.normal_matrix(20, 9);
  const QuantResult r = absmax_quantize_rows(x, absmax(3));
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j)
      EXPECT_NEAR(r.values(i, j), nearest_level(x(i, j), r.scales[i], 3), 1e-14);
}

TEST(Absmax, RejectsNonFinite) {
  EXPECT_THROW(absmax_quantize_rows(Matrix{{1.0, std::nan("")}}, absmax(4)), NumericalError);
  EXPECT_THROW(quest_quantize_rows(Matrix{{INFINITY, 1.0}}, quest(4)), NumericalError);
}

TEST(Absmax, ClosureSymmetryAndErrorBound) {
  Rng rng(2);
  for (int bits : {2, 3, 4, 8}) {
    const Matrix x = rng.normal_matrix(10, 13);
    const QuantResult q = absmax_quantize_rows(x, absmax(bits));
    EXPECT_EQ(absmax_quantize_rows(q.values, absmax(bits)).values, q.values);
    EXPECT_EQ(absmax_quantize_rows(-1.0 * x, absmax(bits)).values, -1.0 * q.values);
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < x.cols(); ++j)
        EXPECT_LE(std::abs(x(i, j) - q.values(i, j)), q.scales[i] / 2 * (1 + 1e-12));
  }
}

TEST(RoundHalfEven, Ties) {
  EXPECT_EQ(round_half_even(0.5), 0.0);
  EXPECT_EQ(round_half_even(1.5), 2.0);
  EXPECT_EQ(round_half_even(2.5), 2.0);
  EXPECT_EQ(round_half_even(-2.5), -2.0);
  EXPECT_EQ(round_half_even(2.6), 3.0);
}

TEST(Quest, ConstantRowPicksSmallestOptimalClip) {
  const Matrix x(1, 8, 1.5);
  const QuantConfig cfg = quest(4);
  const QuantResult q = quest_quantize_rows(x, cfg);
  const auto t = hadamard(std::vector<double>(8, 1.5));
  const double chosen = quest_clip_mse(t, q.clip_ratios[0], 4);
  for (std::size_t k = 0; k < cfg.clip_grid.size(); ++k) {
    const double mse = quest_clip_mse(t, cfg.clip_grid.at(k), 4);
    EXPECT_LE(chosen, mse);
    if (mse == chosen) {
      EXPECT_EQ(cfg.clip_grid.at(k), q.clip_ratios[0]);  // first in grid order
      break;
    }
  }
  for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(q.values(0, j), 1.5, 1e-14);
}

TEST(Quest, OnGridRowIsFixedPoint) {
  // A row whose Hadamard transform already sits on the 4-bit grid.
  std::vector<double> t{7, -3, 0, 1, 5, -7, 2, 4};
  auto x = hadamard(t);
  const QuantResult q = quest_quantize_rows(Matrix(1, 8, x), quest(4));
  for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(q.values(0, j), x[j], 1e-12);
  EXPECT_EQ(q.clip_ratios[0], 1.0);
}

TEST(Quest, ClipMatchesExhaustiveOracleAndIsMseOptimal) {
  Rng rng(3);
  const QuantConfig cfg = quest(4);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix x = rng.normal_matrix(1, 16);
    const QuantResult q = quest_quantize_rows(x, cfg);
    const std::vector<double> raw(x.row(0).begin(), x.row(0).end());
    const auto t = hadamard(raw);
    std::size_t best = 0;
    double best_mse = quest_clip_mse(t, cfg.clip_grid.at(0), 4);
    for (std::size_t k = 1; k < cfg.clip_grid.size(); ++k) {
      const double mse = quest_clip_mse(t, cfg.clip_grid.at(k), 4);
      EXPECT_LE(quest_clip_mse(t, q.clip_ratios[0], 4), mse);
      if (mse < best_mse) {
        best_mse = mse;
        best = k;
      }
    }
    EXPECT_EQ(q.clip_ratios[0], cfg.clip_grid.at(best));
  }
}

TEST(Quest, MaskMarksWithinBound) {
  Rng rng(4);
  const Matrix x = rng.normal_matrix(3, 5);  // padded to 8
  const QuantResult q = quest_quantize_rows(x, quest(3));
  ASSERT_TRUE(q.mask.has_value());
  EXPECT_EQ(q.padded_cols, 8u);
  for (std::size_t r = 0; r < 3; ++r) {
    std::vector<double> row(x.row(r).begin(), x.row(r).end());
    row.resize(8, 0.0);
    const auto t = hadamard(row);
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ((*q.mask)(r, c), std::abs(t[c]) <= q.clip_bounds[r]);
  }
  EXPECT_FALSE(absmax_quantize_rows(x, absmax(3)).mask.has_value());
}

TEST(Quest, Symmetry) {
  Rng rng(5);
  const Matrix x = rng.normal_matrix(6, 12);
  EXPECT_EQ(quest_quantize_rows(-1.0 * x, quest(4)).values, -1.0 * quest_quantize_rows(x, quest(4)).values);
}

TEST(SteMask, Examples) {
  Rng rng(6);
  const Matrix g = rng.normal_matrix(2, 4);
  EXPECT_EQ(ste_mask_backward(g, Mask(2, 4, true)), g);
  EXPECT_EQ(ste_mask_backward(g, Mask(2, 4, false)), Matrix(2, 4));
  Mask m(2, 4, false);
  m.set(0, 1, true);
  m.set(1, 3, true);
  const Matrix out = ste_mask_backward(g, m);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(out(r, c), m(r, c) ? g(r, c) : 0.0);
  EXPECT_THROW(ste_mask_backward(g, Mask(4, 2, true)), InputError);
}

TEST(QuantConfig, JsonRoundTripAndValidation) {
  QuantConfig c = quest(3);
  c.clip_grid = {0.5, 0.9, 0.05};
  EXPECT_EQ(quant_config_from_json(quant_config_to_json(c)), c);
  QuantConfig bad = absmax(1);
  EXPECT_THROW(bad.validate(), InputError);
  bad = absmax(4);
  bad.clip_grid = {1.0, 0.5, 0.01};
  EXPECT_THROW(bad.validate(), InputError);
}
