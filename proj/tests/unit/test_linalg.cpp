// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <vector>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "qprobe/errors.hpp"
#include "qprobe/linalg.hpp"
#include "qprobe/matrix.hpp"
#include "qprobe/tensor_archive.hpp"

using namespace qprobe;

namespace {

Eigen::MatrixXd to_eigen(const Matrix& m) {
  Eigen::MatrixXd e(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) e(r, c) = m(r, c);
  return e;
}

}  // namespace

TEST(Matmul, IdentityAndColumnSelection) {
  EXPECT_EQ(matmul(Matrix::identity(2), Matrix{{1}, {2}}), (Matrix{{1}, {2}}));
  EXPECT_EQ(matmul(Matrix{{1, 2}, {3, 4}}, Matrix{{0}, {1}}), (Matrix{{2}, {4}}));
}

TEST(Matmul, MatchesNaiveTripleLoopBitExactly) {
  Rng rng(3);
  const Matrix a = rng.normal_matrix(7, 5);
  const Matrix b = rng.normal_matrix(5, 3);
  Matrix want(7, 3);
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < 5; ++k) acc += a(i, k) * b(k, j);
      want(i, j) = acc;
    }
  EXPECT_EQ(matmul(a, b), want);
  EXPECT_EQ(matmul(a, b), matmul(a, b));
}

TEST(Matmul, TransposedVariantsAgree) {
  Rng rng(4);
  const Matrix a = rng.normal_matrix(6, 4);
  const Matrix b = rng.normal_matrix(5, 4);
  const Matrix c = rng.normal_matrix(6, 3);
  const Matrix nt = matmul_nt(a, b);
  const Matrix ref = matmul(a, b.transposed());
  for (std::size_t i = 0; i < nt.size(); ++i) EXPECT_NEAR(nt.data()[i], ref.data()[i], 1e-13);
  const Matrix tn = matmul_tn(a, c);
  const Matrix ref2 = matmul(a.transposed(), c);
  for (std::size_t i = 0; i < tn.size(); ++i) EXPECT_NEAR(tn.data()[i], ref2.data()[i], 1e-13);
}

TEST(Matmul, DimensionMismatchThrows) {
  EXPECT_THROW(matmul(Matrix(2, 3), Matrix(2, 3)), InputError);
}

TEST(RowNorms, Examples) {
  EXPECT_EQ(l2_norm_rows(Matrix{{3, 4}}), std::vector<double>{5});
  EXPECT_EQ(l2_norm_rows(Matrix(1, 3)), std::vector<double>{0});
  Rng rng(5);
  const Matrix x = rng.normal_matrix(1, 17);
  double s = 0.0;
  for (double v : x.row(0)) s += v * v;
  EXPECT_NEAR(l2_norm_rows(x)[0], std::sqrt(s), 1e-14 * std::sqrt(s));
}

TEST(SpectralNorm, TrivialCases) {
  EXPECT_NEAR(spectral_norm(Matrix::identity(5)), 1.0, 1e-12);
  EXPECT_NEAR(spectral_norm(Matrix{{3, 0}, {0, 1}}), 3.0, 1e-9);
  EXPECT_EQ(spectral_norm(Matrix(3, 4)), 0.0);
}

TEST(SpectralNorm, MatchesSvdOracle) {
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix w = rng.normal_matrix(6, 4);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(to_eigen(w));
    const double want = svd.singularValues()(0);
    const auto got = spectral_norm_ex(w);
    EXPECT_TRUE(got.converged);
    EXPECT_NEAR(got.value, want, 1e-6 * want);
  }
}

TEST(SpectralNorm, AbsoluteHomogeneity) {
  Rng rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix a = rng.normal_matrix(5, 7);
    const double c = rng.uniform(-4.0, 4.0);
    const double base = spectral_norm(a);
    EXPECT_NEAR(spectral_norm(c * a), std::abs(c) * base, 1e-10 * std::abs(c) * base);
  }
}

TEST(Hadamard, Examples) {
  EXPECT_EQ(hadamard(std::vector<double>{2.5}), std::vector<double>{2.5});
  const auto h2 = hadamard(std::vector<double>{1, 1});
  EXPECT_NEAR(h2[0], std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(h2[1], 0.0, 1e-15);
  EXPECT_THROW(hadamard(std::vector<double>{1, 2, 3}), InputError);
}

TEST(Hadamard, InvolutionAndNormPreservation) {
  Rng rng(8);
  for (std::size_t n : {8u, 64u}) {
    const auto v = rng.normal_vector(n);
    const auto once = hadamard(v);
    const auto twice = hadamard(once);
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(twice[i], v[i], 1e-12);
    EXPECT_NEAR(l2_norm(once), l2_norm(v), 1e-12 * l2_norm(v));
  }
}

TEST(MatrixVectorAngle, Examples) {
  const std::vector<double> x{0.3, -1.2};
  EXPECT_NEAR(matrix_vector_angle_cos(Matrix::identity(2), x), 1.0, 1e-12);
  EXPECT_NEAR(matrix_vector_angle_cos(Matrix{{2, 0}, {0, 0}}, std::vector<double>{0, 1}), 0.0, 1e-15);
  const double s = 1.0 / std::sqrt(2.0);
  EXPECT_NEAR(matrix_vector_angle_cos(Matrix{{2, 0}, {0, 1}}, std::vector<double>{s, s}),
              std::sqrt(2.5) / 2.0, 1e-9);
  EXPECT_THROW(matrix_vector_angle_cos(Matrix::identity(2), std::vector<double>{0, 0}), InputError);
  EXPECT_THROW(matrix_vector_angle_cos(Matrix(2, 2), x), InputError);
}

TEST(MatrixVectorAngle, AlwaysInUnitInterval) {
  Rng rng(9);
  for (int i = 0; i < 50; ++i) {
    const Matrix a = rng.normal_matrix(4, 6);
    const auto x = rng.normal_vector(6);
    const double c = matrix_vector_angle_cos(a, x);
    EXPECT_GE(c, 0.0);
    EXPECT_LE(c, 1.0);
  }
}

TEST(SymmetricEigen, MatchesEigenSolver) {
  Rng rng(10);
  Matrix s = rng.normal_matrix(9, 9);
  s += s.transposed();
  const SymmetricEigen eig = symmetric_eigen(s);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> oracle(to_eigen(s));
  for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(eig.values[i], oracle.eigenvalues()(i), 1e-10);
  const Matrix back = eigen_reconstruct(eig, eig.values);
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_NEAR(back.data()[i], s.data()[i], 1e-10);
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  EXPECT_NE(Rng(42).next_u64(), Rng(43).next_u64());
}

TEST(TensorArchive, RoundTrip) {
  Rng rng(11);
  TensorArchive ar;
  ar.add("w", rng.normal_matrix(3, 5));
  ar.add("v", rng.normal_matrix(1, 4));
  const auto dir = std::filesystem::temp_directory_path() / "qprobe_test_archive";
  std::filesystem::create_directories(dir);
  ar.save(dir / "index.json");
  EXPECT_EQ(TensorArchive::load(dir / "index.json"), ar);
  std::filesystem::remove_all(dir);
}
