#include <cmath>

#include <gtest/gtest.h>

#include "hdnn/matrix.hpp"
#include "hdnn/random.hpp"

namespace hdnn {
namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (double& v : m.values()) v = rng.normal();
  return m;
}

TEST(Matmul, HandComputedProduct) {
  const Matrix a{{1, 2}, {3, 4}};
  const Matrix b{{5}, {6}};
  EXPECT_EQ(matmul(a, b), (Matrix{{17}, {39}}));
}

TEST(Matmul, IdentityAndZero) {
  Rng rng(3);
  const Matrix a = random_matrix(3, 5, rng);
  EXPECT_EQ(matmul(Matrix::identity(3), a), a);
  EXPECT_EQ(matmul(Matrix(4, 3), a), Matrix(4, 5));
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
  try {
    matmul(Matrix(2, 3), Matrix(2, 3));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(2x3)"), std::string::npos) << msg;
  }
}

TEST(Matmul, TransposedFormsAgreeWithExplicitTranspose) {
  Rng rng(11);
  const Matrix a = random_matrix(4, 3, rng);
  const Matrix b = random_matrix(5, 3, rng);
  const Matrix c = random_matrix(4, 2, rng);
  EXPECT_EQ(matmul_nt(a, b), matmul(a, transpose(b)));
  EXPECT_EQ(matmul_tn(a, c), matmul(transpose(a), c));
}

TEST(Matmul, DistributesOverAddition) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix a = random_matrix(3, 4, rng);
    const Matrix b = random_matrix(4, 2, rng);
    const Matrix c = random_matrix(4, 2, rng);
    const Matrix lhs = matmul(a, add(b, c));
    const Matrix rhs = add(matmul(a, b), matmul(a, c));
    EXPECT_LT(max_abs_diff(lhs, rhs), 1e-12);
    EXPECT_EQ(matmul(matmul(Matrix::identity(3), a), b), matmul(a, b));
  }
}

TEST(Sigmoid, ReferenceValues) {
  EXPECT_EQ(sigmoid(0.0), 0.5);
  EXPECT_NEAR(sigmoid(2.0), 0.8807970779778823, 1e-15);
  // Saturates without overflow or NaN.
  EXPECT_EQ(sigmoid(-800.0), 0.0);
  EXPECT_EQ(sigmoid(800.0), 1.0);
}

TEST(Sigmoid, SymmetryAndRange) {
  Rng rng(1);
  Matrix x = random_matrix(10, 10, rng);
  for (double& v : x.values()) v *= 10.0;
  const Matrix s = sigmoid(x);
  const Matrix t = sigmoid(scale(x, -1.0));
  for (std::size_t i = 0; i < s.size(); ++i) {
    EXPECT_NEAR(s.values()[i] + t.values()[i], 1.0, 1e-15);
    EXPECT_GT(s.values()[i], 0.0);
    EXPECT_LT(s.values()[i], 1.0);
  }
}

TEST(Elementwise, BinaryShapeMismatchThrows) {
  EXPECT_THROW(add(Matrix(2, 2), Matrix(2, 3)), ShapeError);
  EXPECT_THROW(hadamard(Matrix(1, 2), Matrix(2, 1)), ShapeError);
  EXPECT_THROW(subtract(Matrix(1, 2), Matrix(2, 1)), ShapeError);
}

TEST(Elementwise, LogRejectsNonPositive) {
  EXPECT_THROW(log(Matrix{{1.0, 0.0}}), DomainError);
  EXPECT_THROW(log(Matrix{{-1.0}}), DomainError);
  EXPECT_NEAR(log(exp(Matrix{{0.25, -3.0}}))(0, 1), -3.0, 1e-15);
}

TEST(Elementwise, HadamardAndScale) {
  const Matrix a{{1, 2}, {3, 4}};
  EXPECT_EQ(hadamard(a, a), (Matrix{{1, 4}, {9, 16}}));
  EXPECT_EQ(scale(a, 0.5), (Matrix{{0.5, 1}, {1.5, 2}}));
  EXPECT_EQ(subtract(a, a), Matrix(2, 2));
}

TEST(Matrix, ConstructorRejectsWrongDataLength) {
  EXPECT_THROW(Matrix(2, 2, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST(Matrix, DeterministicProducts) {
  Rng r1(9), r2(9);
  const Matrix a1 = random_matrix(6, 7, r1), b1 = random_matrix(7, 3, r1);
  const Matrix a2 = random_matrix(6, 7, r2), b2 = random_matrix(7, 3, r2);
  EXPECT_EQ(matmul(a1, b1), matmul(a2, b2));
}

TEST(LogSumExp, StableForLargeInputs) {
  const std::vector<double> v{1000.0, 1000.0};
  EXPECT_NEAR(log_sum_exp(v), 1000.0 + std::log(2.0), 1e-12);
  EXPECT_NEAR(log_add(-1000.0, -1000.0), -1000.0 + std::log(2.0), 1e-12);
  EXPECT_EQ(log_add(-INFINITY, 3.0), 3.0);
}

TEST(Stacking, VstackAndSlices) {
  const Matrix a{{1, 2}};
  const Matrix b{{3, 4}, {5, 6}};
  const Matrix blocks[] = {a, b};
  const Matrix s = vstack(blocks);
  EXPECT_EQ(s, (Matrix{{1, 2}, {3, 4}, {5, 6}}));
  EXPECT_EQ(row_slice(s, 1, 2), b);
  EXPECT_EQ(column_slice(s, 1, 1), (Matrix{{2}, {4}, {6}}));
}

}  // namespace
}  // namespace hdnn
