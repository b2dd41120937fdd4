// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "qprobe/errors.hpp"
#include "qprobe/linalg.hpp"
#include "qprobe/scaling.hpp"

using namespace qprobe;

namespace {

const std::vector<double> kSizes{1e7, 3e7, 1e8, 3e8, 1e9};

std::vector<ScalingPoint> synthetic(double a, double alpha, double e, std::optional<double> rho, double noise = 0.0,
                                    std::uint64_t seed = 0, double n_scale = 1.0) {
  ScalingFit truth;
  truth.a_prime = a;
  truth.alpha = alpha;
  truth.e_irreducible = e;
  truth.rho_4bit = rho;
  Rng rng(seed);
  std::vector<ScalingPoint> pts;
  for (Precision p : {Precision::fp, Precision::w4a4}) {
    if (p == Precision::w4a4 && !rho) break;
    for (double n : kSizes) {
      const double l = predict(truth, n, p) * std::exp(noise * rng.normal());
      pts.push_back({static_cast<std::uint64_t>(n * n_scale), static_cast<std::uint64_t>(20 * n), l, p, "synth"});
    }
  }
  return pts;
}

ScalingPoint find_point(const std::vector<ScalingPoint>& pts, const std::string& label, Precision p, double n_lo,
                        double n_hi) {
  for (const auto& pt : pts) {
    if (pt.optimizer_label == label && pt.precision == p && pt.n_params >= n_lo && pt.n_params <= n_hi) return pt;
  }
  ADD_FAILURE() << "no point for " << label;
  return {};
}

}  // namespace

TEST(Predict, Examples) {
  ScalingFit f;
  f.a_prime = 0.0;
  f.alpha = 0.3;
  f.e_irreducible = 1.7;
  EXPECT_EQ(predict(f, 1e6, Precision::fp), 1.7);
  EXPECT_EQ(predict(f, 1e9, Precision::fp), 1.7);

  f.a_prime = 5e8;
  f.alpha = 1.0;
  f.e_irreducible = 0.0;
  EXPECT_DOUBLE_EQ(predict(f, 5e8, Precision::fp), 1.0);
}

TEST(Predict, PublishedAdamWAtLargestSize) {
  ScalingFit f;
  f.a_prime = 79;
  f.alpha = 0.20;
  f.e_irreducible = 1.40;
  const double got = predict(f, 1489423554.0, Precision::fp);
  EXPECT_NEAR(got, 79.0 / std::pow(1489423554.0, 0.20) + 1.40, 1e-12);
  EXPECT_NEAR(got, 2.55617, 1e-5);
}

TEST(Predict, MonotoneInNAndRho) {
  ScalingFit f;
  f.a_prime = 100;
  f.alpha = 0.25;
  f.e_irreducible = 1.5;
  f.rho_4bit = 0.8;
  EXPECT_GT(predict(f, 1e7, Precision::fp), predict(f, 1e8, Precision::fp));
  EXPECT_GT(predict(f, 1e7, Precision::w4a4), predict(f, 1e7, Precision::fp));
  f.rho_4bit = 0.9;
  const double hi = predict(f, 1e7, Precision::w4a4);
  f.rho_4bit = 0.7;
  EXPECT_GT(predict(f, 1e7, Precision::w4a4), hi);
}

TEST(Huber, PointwiseAndSmooth) {
  const double d = 1e-3;
  EXPECT_EQ(huber(0.0, d), 0.0);
  EXPECT_DOUBLE_EQ(huber(5e-4, d), 0.5 * 5e-4 * 5e-4);
  EXPECT_DOUBLE_EQ(huber(-0.01, d), d * (0.01 - d / 2));
  EXPECT_DOUBLE_EQ(huber_derivative(5e-4, d), 5e-4);
  EXPECT_DOUBLE_EQ(huber_derivative(-0.01, d), -d);
  for (double s : {1.0, -1.0}) {
    const double k = s * d;
    EXPECT_NEAR(huber(k * (1 - 1e-12), d), huber(k * (1 + 1e-12), d), 1e-15);
    EXPECT_NEAR(huber_derivative(k * (1 - 1e-12), d), huber_derivative(k * (1 + 1e-12), d), 1e-14);
    EXPECT_DOUBLE_EQ(huber_derivative(k, d), k);
  }
}

TEST(Fit, NoiselessFpRecovery) {
  const auto pts = synthetic(100, 0.25, 1.5, std::nullopt);
  const ScalingFit f = fit(pts);
  EXPECT_NEAR(f.a_prime, 100, 0.1);
  EXPECT_NEAR(f.alpha, 0.25, 2.5e-4);
  EXPECT_NEAR(f.e_irreducible, 1.5, 1.5e-3);
  EXPECT_FALSE(f.rho_4bit.has_value());
  EXPECT_EQ(f.n_points, pts.size());
  EXPECT_EQ(f.residuals.size(), pts.size());
}

TEST(Fit, PlantedRho) {
  const auto pts = synthetic(100, 0.25, 1.5, 0.8);
  const ScalingFit f = fit(pts);
  ASSERT_TRUE(f.rho_4bit.has_value());
  EXPECT_NEAR(*f.rho_4bit, 0.8, 0.01);
}

TEST(Fit, ObjectiveBeatsEveryStart) {
  const auto pts = synthetic(60, 0.3, 2.0, 0.85, 0.01, 4);
  const ScalingFit f = fit(pts);
  for (const FitStart& s : multi_start_grid(pts)) {
    EXPECT_LE(f.objective, fit_objective(pts, s.a_prime, s.alpha, s.e_irreducible, s.rho, 1e-3));
  }
  EXPECT_NEAR(f.objective, fit_objective(pts, f.a_prime, f.alpha, f.e_irreducible, *f.rho_4bit, 1e-3), 1e-15);
}

TEST(Fit, MultiStartGridOrder) {
  const auto pts = synthetic(100, 0.25, 1.5, 0.8);
  const auto grid = multi_start_grid(pts);
  ASSERT_EQ(grid.size(), 5u * 3u * 3u);
  EXPECT_EQ(grid[0].alpha, 0.1);
  EXPECT_EQ(grid[0].rho, 0.7);
  EXPECT_EQ(grid[1].rho, 0.85);
  EXPECT_EQ(grid.back().alpha, 0.5);
  EXPECT_EQ(grid.back().rho, 1.0);
}

TEST(Fit, ScaleEquivariance) {
  const double k = 8.0;
  const ScalingFit a = fit(synthetic(100, 0.25, 1.5, 0.8));
  const ScalingFit b = fit(synthetic(100, 0.25, 1.5, 0.8, 0.0, 0, k));
  EXPECT_NEAR(b.alpha, a.alpha, 1e-6);
  EXPECT_NEAR(b.e_irreducible, a.e_irreducible, 1e-6);
  EXPECT_NEAR(*b.rho_4bit, *a.rho_4bit, 1e-6);
  EXPECT_NEAR(b.a_prime / std::pow(k, a.alpha), a.a_prime, 1e-6 * a.a_prime);
}

TEST(Fit, SequentialModeRecoversPlantedRho) {
  FitOptions opt;
  opt.mode = FitMode::sequential;
  const ScalingFit f = fit(synthetic(100, 0.25, 1.5, 0.8), opt);
  EXPECT_NEAR(*f.rho_4bit, 0.8, 0.01);
  EXPECT_NEAR(f.alpha, 0.25, 1e-3);
}

TEST(Fit, Errors) {
  auto pts = synthetic(100, 0.25, 1.5, std::nullopt);
  EXPECT_THROW(fit(std::span(pts).first(3)), InputError);
  for (auto& p : pts) p.n_params = 1000;
  EXPECT_THROW(fit(pts), InputError);
  auto q = synthetic(100, 0.25, 1.5, 0.8);
  std::erase_if(q, [](const ScalingPoint& p) { return p.precision == Precision::fp; });
  EXPECT_THROW(fit(q), InputError);
}

TEST(Loo, DuplicatedPointsGiveZeroStd) {
  auto pts = synthetic(100, 0.25, 1.5, 0.8);
  const auto copy = pts;
  pts.insert(pts.end(), copy.begin(), copy.end());
  const ParameterStd s = loo_confidence(pts);
  EXPECT_NEAR(s.alpha, 0.0, 1e-9);
  EXPECT_NEAR(s.e_irreducible, 0.0, 1e-9);
  EXPECT_NEAR(*s.rho_4bit, 0.0, 1e-9);
}

TEST(Loo, StdShrinksWithNoise) {
  double prev = INFINITY;
  for (double noise : {2e-2, 5e-3, 1e-3}) {
    const ParameterStd s = loo_confidence(synthetic(100, 0.25, 1.5, 0.8, noise, 5));
    EXPECT_LT(s.alpha, prev) << noise;
    prev = s.alpha;
  }
}

TEST(BundledData, PublishedEntries) {
  const auto pts = bundled_paper_data();
  EXPECT_EQ(find_point(pts, "AdamW", Precision::fp, 4e7, 6e7).loss, 3.695);
  EXPECT_EQ(find_point(pts, "Shampoo", Precision::w4a4, 1e9, 2e9).loss, 2.640);
  std::size_t psgd_fp = 0, psgd_q = 0;
  for (const auto& p : pts) {
    if (p.optimizer_label != "PSGD") continue;
    (p.precision == Precision::fp ? psgd_fp : psgd_q)++;
    EXPECT_LT(p.n_params, 1e9);
  }
  EXPECT_EQ(psgd_fp, 5u);
  EXPECT_EQ(psgd_q, 5u);
  EXPECT_EQ(published_coefficients().size(), 6u);
}

TEST(ScalingIo, CsvAndJsonRoundTrip) {
  const auto pts = bundled_paper_data();
  EXPECT_EQ(parse_scaling_csv(scaling_csv(pts)), pts);
  EXPECT_THROW(parse_scaling_csv("optimizer,n_params,tokens,loss,precision\nx,10,20,-1,fp\n"), InputError);
  EXPECT_THROW(parse_scaling_csv("foo,bar\n"), InputError);

  std::vector<ScalingFit> fits = fit_by_optimizer(synthetic(100, 0.25, 1.5, 0.8, 0.01, 6));
  ASSERT_EQ(fits.size(), 1u);
  ASSERT_TRUE(fits[0].ci.has_value());
  const auto back = scaling_fits_from_json(scaling_fits_to_json(fits));
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].alpha, fits[0].alpha);
  EXPECT_EQ(back[0].rho_4bit, fits[0].rho_4bit);
  EXPECT_EQ(back[0].ci->alpha, fits[0].ci->alpha);
  EXPECT_EQ(back[0].residuals, fits[0].residuals);
}

