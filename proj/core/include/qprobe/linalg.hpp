// Copyright 2026 The qprobe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "qprobe/matrix.hpp"

namespace qprobe {

// All reductions below accumulate left to right in ascending index order, so
// results are bit-identical across runs and thread counts.

Matrix matmul(const Matrix& a, const Matrix& b);
// a * b^T, the natural product for (tokens x in) activations and
// (out x in) weights.
Matrix matmul_nt(const Matrix& a, const Matrix& b);
// a^T * b
Matrix matmul_tn(const Matrix& a, const Matrix& b);
// W x for a column vector x, with W stored (out x in).
std::vector<double> matvec(const Matrix& w, std::span<const double> x);

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> x);
std::vector<double> l2_norm_rows(const Matrix& x);
double frobenius_norm(const Matrix& x);

struct SpectralNormResult {
  double value = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
};

inline constexpr std::uint64_t kPowerIterationSeed = 0x5EED;
inline constexpr double kPowerIterationTol = 1e-10;
inline constexpr std::size_t kPowerIterationMaxIter = 10'000;

/// Largest singular value by power iteration on W^T W, started from a unit
/// vector drawn from a fixed seed. Stops when successive estimates differ by
/// less than `tol` relatively, or after `max_iter` iterations with
/// `converged == false`. An all-zero matrix yields exactly 0.
SpectralNormResult spectral_norm_ex(const Matrix& w, double tol = kPowerIterationTol,
                                    std::size_t max_iter = kPowerIterationMaxIter);
double spectral_norm(const Matrix& w, double tol = kPowerIterationTol,
                     std::size_t max_iter = kPowerIterationMaxIter);

bool is_power_of_two(std::size_t n) noexcept;
std::size_t next_power_of_two(std::size_t n) noexcept;

/// Normalized Walsh-Hadamard transform (scaled by 1/sqrt(n)). Symmetric and
/// orthogonal, hence an involution. Length must be a power of two.
void hadamard_inplace(std::span<double> x);
std::vector<double> hadamard(std::span<const double> x);

/// cos of the matrix-vector angle: ||A x|| / (||A||_* ||x||), clamped to
/// [0, 1]. Throws InputError for zero A or zero x.
double matrix_vector_angle_cos(const Matrix& a, std::span<const double> x);
// Same, with a precomputed spectral norm of `a`.
double matrix_vector_angle_cos(const Matrix& a, double a_spectral, std::span<const double> x);

struct SymmetricEigen {
  std::vector<double> values;  // ascending
  Matrix vectors;              // columns are eigenvectors
};

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Deterministic
/// sweep order; used for the Shampoo/SOAP preconditioners.
SymmetricEigen symmetric_eigen(const Matrix& s, double tol = 1e-14, std::size_t max_sweeps = 100);

/// V diag(f(lambda)) V^T for a symmetric matrix given its eigendecomposition.
Matrix eigen_reconstruct(const SymmetricEigen& eig, std::span<const double> mapped_values);

void symmetrize(Matrix& s);

}  // namespace qprobe
