// Copyright 2026 The qprobe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace qprobe {

enum class Precision { fp, w4a4 };

std::string to_string(Precision p);
Precision parse_precision(std::string_view s);

struct ScalingPoint {
  std::uint64_t n_params = 0;  // embedding-inclusive
  std::uint64_t tokens = 0;
  double loss = 0.0;
  Precision precision = Precision::fp;
  std::string optimizer_label;
  friend bool operator==(const ScalingPoint&, const ScalingPoint&) = default;
};

struct ParameterStd {
  double a_prime = 0.0;
  double alpha = 0.0;
  double e_irreducible = 0.0;
  std::optional<double> rho_4bit;
};

/// L = A' / (N rho)^alpha + E with rho = 1 for fp and rho_4bit for w4a4.
struct ScalingFit {
  std::string optimizer_label;
  double a_prime = 0.0;
  double alpha = 0.0;
  double e_irreducible = 0.0;
  std::optional<double> rho_4bit;  // unset when no w4a4 point was fitted
  std::optional<ParameterStd> ci;  // std across leave-one-out folds
  std::vector<double> residuals;   // log L_pred - log L_obs, input order
  double objective = 0.0;          // sum of Huber losses of the residuals
  std::size_t n_points = 0;
};

double predict(const ScalingFit& fit, double n_params, Precision precision);

/// 0.5 r^2 for |r| <= delta, delta (|r| - delta / 2) beyond.
double huber(double r, double delta);
double huber_derivative(double r, double delta);

enum class FitMode {
  joint,       // (A', alpha, E, rho) together
  sequential,  // (A', alpha, E) on fp points, then rho on w4a4 points
};

struct FitOptions {
  double delta = 1e-3;
  FitMode mode = FitMode::joint;
  std::size_t max_iterations = 2000;
};

struct FitStart {
  double a_prime, alpha, e_irreducible, rho;
};

/// The deterministic multi-start grid: alpha-major, then E factor, then rho,
/// with A' solved from the first point.
std::vector<FitStart> multi_start_grid(std::span<const ScalingPoint> points);

/// Huber objective on log residuals at the given parameters.
double fit_objective(std::span<const ScalingPoint> points, double a_prime, double alpha,
                     double e_irreducible, double rho, double delta);

/// Levenberg-Marquardt on the IRLS-weighted normal equations of the Huber
/// objective (a step is accepted only if the objective decreases), from each
/// grid start; the lowest objective wins, ties to the earlier start.
/// Throws InputError for fewer than 4 points, no fp point, or a single N.
ScalingFit fit(std::span<const ScalingPoint> points, const FitOptions& options = {});

/// Refits without each point in turn, always keeping the lowest-loss fp and
/// lowest-loss w4a4 points; returns the population std of each parameter.
ParameterStd loo_confidence(std::span<const ScalingPoint> points, const FitOptions& options = {});

/// One fit (with LOO std) per optimizer label, in order of first appearance.
std::vector<ScalingFit> fit_by_optimizer(std::span<const ScalingPoint> points,
                                         const FitOptions& options = {}, bool with_ci = true);

/// CSV with header optimizer,n_params,tokens,loss,precision.
std::vector<ScalingPoint> parse_scaling_csv(std::string_view text);
std::string scaling_csv(std::span<const ScalingPoint> points);

std::string scaling_fits_to_json(std::span<const ScalingFit> fits);
std::vector<ScalingFit> scaling_fits_from_json(std::string_view text);

/// Published per-optimizer coefficients, for comparison with refits.
struct PublishedCoefficients {
  std::string optimizer_label;
  double a_prime, a_prime_std;
  double alpha;
  double e_irreducible;
  double rho_4bit, rho_std;
};

/// Fp and w4a4 final losses per optimizer at six model sizes; sizes without
/// a published value are omitted.
std::vector<ScalingPoint> bundled_paper_data();
std::vector<PublishedCoefficients> published_coefficients();

}  // namespace qprobe
