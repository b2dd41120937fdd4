// Copyright 2026 The qprobe Authors
// SPDX-License-Identifier: Apache-2.0

#include "qprobe/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "qprobe/errors.hpp"
#include "qprobe/parallel.hpp"

namespace qprobe {
namespace {

// Row-parallel only above this many multiply-adds; each output row is still
// reduced serially in ascending k.
constexpr std::size_t kParallelWork = 1u << 18;

template <typename RowFn>
void for_each_row(std::size_t rows, std::size_t work, RowFn&& fn) {
  if (work >= kParallelWork && rows > 1) {
    parallel_for(rows, fn);
  } else {
    for (std::size_t i = 0; i < rows; ++i) fn(i);
  }
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw InputError(fmt::format("matmul: {}x{} times {}x{}", a.rows(), a.cols(), b.rows(),
                                 b.cols()));
  }
  Matrix out(a.rows(), b.cols());
  const std::size_t n = a.cols();
  for_each_row(a.rows(), a.rows() * b.cols() * n, [&](std::size_t i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < n; ++k) acc += a(i, k) * b(k, j);
      out(i, j) = acc;
    }
  });
  return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw InputError(fmt::format("matmul_nt: {}x{} times ({}x{})^T", a.rows(), a.cols(), b.rows(),
                                 b.cols()));
  }
  Matrix out(a.rows(), b.rows());
  const std::size_t n = a.cols();
  for_each_row(a.rows(), a.rows() * b.rows() * n, [&](std::size_t i) {
    const auto ar = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const auto br = b.row(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < n; ++k) acc += ar[k] * br[k];
      out(i, j) = acc;
    }
  });
  return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw InputError(fmt::format("matmul_tn: ({}x{})^T times {}x{}", a.rows(), a.cols(), b.rows(),
                                 b.cols()));
  }
  Matrix out(a.cols(), b.cols());
  const std::size_t n = a.rows();
  for_each_row(a.cols(), a.cols() * b.cols() * n, [&](std::size_t i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < n; ++k) acc += a(k, i) * b(k, j);
      out(i, j) = acc;
    }
  });
  return out;
}

std::vector<double> matvec(const Matrix& w, std::span<const double> x) {
  if (w.cols() != x.size()) {
    throw InputError(fmt::format("matvec: {}x{} times vector of {}", w.rows(), w.cols(), x.size()));
  }
  std::vector<double> out(w.rows());
  for (std::size_t i = 0; i < w.rows(); ++i) out[i] = dot(w.row(i), x);
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InputError("dot: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double l2_norm(std::span<const double> x) {
  double acc = 0.0;
  for (double v : x) acc += v * v;
  return std::sqrt(acc);
}

std::vector<double> l2_norm_rows(const Matrix& x) {
  std::vector<double> out(x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) out[r] = l2_norm(x.row(r));
  return out;
}

double frobenius_norm(const Matrix& x) { return l2_norm(x.data()); }

SpectralNormResult spectral_norm_ex(const Matrix& w, double tol, std::size_t max_iter) {
  if (w.empty()) throw InputError("spectral_norm: empty matrix");
  if (!(tol > 0.0)) throw InputError("spectral_norm: tol must be positive");
  SpectralNormResult result;
  if (frobenius_norm(w) == 0.0) {
    result.converged = true;
    return result;
  }

  Rng rng(kPowerIterationSeed);
  std::vector<double> v = rng.normal_vector(w.cols());
  double vn = l2_norm(v);
  for (double& x : v) x /= vn;

  double prev = 0.0;
  double best = 0.0;
  std::vector<double> wv(w.rows());
  std::vector<double> wtwv(w.cols());
  for (std::size_t it = 1; it <= max_iter; ++it) {
    for (std::size_t i = 0; i < w.rows(); ++i) wv[i] = dot(w.row(i), v);
    const double estimate = l2_norm(wv);
    best = std::max(best, estimate);
    result.iterations = it;
    if (it > 1 && std::abs(estimate - prev) < tol * estimate) {
      result.converged = true;
      break;
    }
    prev = estimate;
    std::fill(wtwv.begin(), wtwv.end(), 0.0);
    for (std::size_t i = 0; i < w.rows(); ++i) {
      const auto row = w.row(i);
      for (std::size_t j = 0; j < w.cols(); ++j) wtwv[j] += row[j] * wv[i];
    }
    vn = l2_norm(wtwv);
    if (vn == 0.0) {
      // Start vector landed in the null space of W^T W.
      result.converged = true;
      break;
    }
    for (std::size_t j = 0; j < w.cols(); ++j) v[j] = wtwv[j] / vn;
  }
  result.value = best;
  return result;
}

double spectral_norm(const Matrix& w, double tol, std::size_t max_iter) {
  return spectral_norm_ex(w, tol, max_iter).value;
}

bool is_power_of_two(std::size_t n) noexcept { return n != 0 && (n & (n - 1)) == 0; }

std::size_t next_power_of_two(std::size_t n) noexcept {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

void hadamard_inplace(std::span<double> x) {
  const std::size_t n = x.size();
  if (!is_power_of_two(n)) {
    throw InputError(fmt::format("hadamard: length {} is not a power of two", n));
  }
  for (std::size_t h = 1; h < n; h <<= 1) {
    for (std::size_t i = 0; i < n; i += 2 * h) {
      for (std::size_t j = i; j < i + h; ++j) {
        const double a = x[j];
        const double b = x[j + h];
        x[j] = a + b;
        x[j + h] = a - b;
      }
    }
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(n));
  for (double& v : x) v *= scale;
}

std::vector<double> hadamard(std::span<const double> x) {
  std::vector<double> out(x.begin(), x.end());
  hadamard_inplace(out);
  return out;
}

double matrix_vector_angle_cos(const Matrix& a, double a_spectral, std::span<const double> x) {
  const double xn = l2_norm(x);
  if (xn == 0.0) throw InputError("matrix-vector angle undefined for a zero vector");
  if (a_spectral == 0.0) throw InputError("matrix-vector angle undefined for a zero matrix");
  const double c = l2_norm(matvec(a, x)) / (a_spectral * xn);
  return std::clamp(c, 0.0, 1.0);
}

double matrix_vector_angle_cos(const Matrix& a, std::span<const double> x) {
  return matrix_vector_angle_cos(a, spectral_norm(a), x);
}

SymmetricEigen symmetric_eigen(const Matrix& s, double tol, std::size_t max_sweeps) {
  if (s.rows() != s.cols()) throw InputError("symmetric_eigen: matrix is not square");
  const std::size_t n = s.rows();
  Matrix a = s;
  Matrix v = Matrix::identity(n);

  auto off_norm = [&] {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) acc += a(i, j) * a(i, j);
    }
    return std::sqrt(acc);
  };
  const double scale = std::max(frobenius_norm(a), 1e-300);

  for (std::size_t sweep = 0; sweep < max_sweeps; ++sweep) {
    if (off_norm() <= tol * scale) break;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double sn = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - sn * akq;
          a(k, q) = sn * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - sn * aqk;
          a(q, k) = sn * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - sn * vkq;
          v(k, q) = sn * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return a(i, i) < a(j, j); });
  SymmetricEigen out;
  out.values.resize(n);
  out.vectors = Matrix(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    out.values[k] = a(order[k], order[k]);
    for (std::size_t r = 0; r < n; ++r) out.vectors(r, k) = v(r, order[k]);
  }
  return out;
}

Matrix eigen_reconstruct(const SymmetricEigen& eig, std::span<const double> mapped_values) {
  const std::size_t n = eig.values.size();
  if (mapped_values.size() != n) throw InputError("eigen_reconstruct: length mismatch");
  Matrix out(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        acc += eig.vectors(i, k) * mapped_values[k] * eig.vectors(j, k);
      }
      out(i, j) = acc;
    }
  }
  return out;
}

void symmetrize(Matrix& s) {
  for (std::size_t i = 0; i < s.rows(); ++i) {
    for (std::size_t j = i + 1; j < s.cols(); ++j) {
      const double m = 0.5 * (s(i, j) + s(j, i));
      s(i, j) = m;
      s(j, i) = m;
    }
  }
}

}  // namespace qprobe
