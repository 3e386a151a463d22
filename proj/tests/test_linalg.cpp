#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "dlnet/linalg.hpp"
#include "dlnet/rng.hpp"
#include "jacobi_oracle.hpp"

using namespace dlnet;

namespace {

Matrix mat(Index rows, Index cols, std::initializer_list<double> values) {
  Matrix m(rows, cols);
  auto it = values.begin();
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = *it++;
  return m;
}

std::vector<double> row_major(const Matrix& m) {
  std::vector<double> out;
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) out.push_back(m(r, c));
  return out;
}

template <class F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected dlnet::Error";
  return ErrorCode::Io;
}

}  // namespace

TEST(NumericalRank, Identity) { EXPECT_EQ(numerical_rank(Matrix::Identity(3, 3)), 3); }

TEST(NumericalRank, ZeroMatrix) { EXPECT_EQ(numerical_rank(Matrix::Zero(2, 4)), 0); }

TEST(NumericalRank, TinySingularValueIsDropped) {
  EXPECT_EQ(numerical_rank(mat(2, 2, {1, 0, 0, 1e-15})), 1);
}

TEST(NumericalRank, ProductScaleRaisesTheCut) {
  // sigma = 1e-6 counts on its own, but not against a reference magnitude of 1e4.
  const Matrix m = mat(2, 2, {1e-6, 0, 0, 0});
  EXPECT_EQ(numerical_rank(m), 1);
  EXPECT_EQ(numerical_rank(m, kDefaultRankTol, 1e4), 0);
}

TEST(NumericalRank, EmptyIsRejected) {
  EXPECT_EQ(code_of([] { numerical_rank(Matrix(0, 3)); }), ErrorCode::InvalidArgument);
}

TEST(KernelVector, DiagonalRankOne) {
  const Vector w = kernel_vector(mat(2, 2, {1, 0, 0, 0}));
  EXPECT_NEAR(w(0), 0.0, 1e-15);
  EXPECT_NEAR(w(1), 1.0, 1e-15);
}

TEST(KernelVector, RowVectorSignConvention) {
  // First significant component is made positive.
  const Vector w = kernel_vector(mat(1, 2, {1, 1}));
  EXPECT_NEAR(w(0), 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(w(1), -1.0 / std::sqrt(2.0), 1e-15);
}

TEST(KernelVector, ZeroMatrixGivesFirstBasisVector) {
  const Vector w = kernel_vector(Matrix::Zero(3, 4));
  EXPECT_EQ(w, Vector::Unit(4, 0));
}

TEST(KernelVector, FullColumnRankThrows) {
  EXPECT_EQ(code_of([] { kernel_vector(Matrix::Identity(2, 2)); }), ErrorCode::FullColumnRank);
}

TEST(KernelVector, AnnihilatesRandomWideMatrices) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    SplitMix64 rng = SplitMix64::stream(7, s);
    const Index rows = rng.uniform_int(1, 4);
    const Index cols = rows + rng.uniform_int(1, 3);
    const Matrix m = rng.normal_matrix(rows, cols);
    const Vector w = kernel_vector(m);
    EXPECT_NEAR(w.norm(), 1.0, 1e-14);
    EXPECT_LE((m * w).norm(), 1e-12 * m.norm());
  }
}

TEST(MinNormRightSolve, TallColumn) {
  const RightSolve s = min_norm_right_solve(mat(2, 1, {1, 0}), mat(2, 1, {0.1, 0.2}));
  EXPECT_TRUE(s.solution.isApprox(mat(2, 2, {0.1, 0, 0.2, 0}), 1e-15));
  EXPECT_NEAR(s.amplification, 1.0, 1e-15);
  EXPECT_LE(s.residual, 1e-16);
}

TEST(MinNormRightSolve, IdentityReturnsRightHandSide) {
  SplitMix64 rng(3);
  const Matrix d = rng.normal_matrix(4, 3);
  const RightSolve s = min_norm_right_solve(Matrix::Identity(3, 3), d);
  EXPECT_LE((s.solution - d).norm(), 1e-14);
}

TEST(MinNormRightSolve, ZeroA1IsRankDeficient) {
  EXPECT_EQ(code_of([] { min_norm_right_solve(Matrix::Zero(2, 1), mat(2, 1, {1, 1})); }),
            ErrorCode::RankDeficientLift);
}

TEST(MinNormRightSolve, ShapeMismatch) {
  EXPECT_EQ(code_of([] { min_norm_right_solve(Matrix::Identity(2, 2), Matrix::Ones(2, 3)); }),
            ErrorCode::ShapeMismatch);
}

TEST(MinNormRightSolve, SolutionRowsLieInRangeOfA1Transpose) {
  for (std::uint64_t s = 0; s < 30; ++s) {
    SplitMix64 rng = SplitMix64::stream(11, s);
    const Index cols = rng.uniform_int(1, 3);
    const Index rows = cols + rng.uniform_int(0, 3);
    const Matrix a1 = rng.normal_matrix(rows, cols);
    const Matrix d = rng.normal_matrix(rng.uniform_int(1, 4), cols);
    const RightSolve out = min_norm_right_solve(a1, d);
    EXPECT_LE(out.residual, 1e-10 * (1.0 + d.norm()));
    // Minimum norm: D1 is orthogonal to the left null space of A1.
    const Matrix p = complement_projector(a1);
    EXPECT_LE((out.solution * p).norm(), 1e-10 * (1.0 + out.solution.norm()));
  }
}

TEST(BestRankApprox, Diagonal) {
  const Matrix m = mat(2, 2, {3, 0, 0, 1});
  EXPECT_TRUE(best_rank_approx(m, 1).isApprox(mat(2, 2, {3, 0, 0, 0})));
  EXPECT_EQ(best_rank_approx(m, 2), m);
  EXPECT_EQ(best_rank_approx(m, 0), Matrix::Zero(2, 2));
}

TEST(BestRankApprox, RankOutOfRange) {
  EXPECT_EQ(code_of([] { best_rank_approx(Matrix::Ones(2, 3), 3); }), ErrorCode::InvalidArgument);
  EXPECT_EQ(code_of([] { best_rank_approx(Matrix::Ones(2, 3), -1); }),
            ErrorCode::InvalidArgument);
}

// Eckart-Young against a Jacobi SVD that shares no code with Eigen: the
// error of the truncation equals the tail of the oracle's singular values.
TEST(BestRankApprox, ErrorMatchesIndependentSingularValues) {
  for (std::uint64_t s = 0; s < 60; ++s) {
    SplitMix64 rng = SplitMix64::stream(19, s);
    const Index rows = rng.uniform_int(1, 6);
    const Index cols = rng.uniform_int(1, 6);
    const Matrix m = rng.normal_matrix(rows, cols);
    const auto sv = oracle::jacobi_singular_values(row_major(m), int(rows), int(cols));
    const Index full = std::min(rows, cols);
    for (Index d = 0; d <= full; ++d) {
      double tail = 0.0;
      for (Index i = d; i < full; ++i) tail += sv[std::size_t(i)] * sv[std::size_t(i)];
      const Matrix approx = best_rank_approx(m, d);
      EXPECT_NEAR((m - approx).norm(), std::sqrt(tail), 1e-12 * (1.0 + m.norm()));
      EXPECT_LE(numerical_rank(approx), d);
    }
  }
}

TEST(SingularValues, AgreeWithJacobiOracle) {
  for (std::uint64_t s = 0; s < 40; ++s) {
    SplitMix64 rng = SplitMix64::stream(23, s);
    const Matrix m = rng.normal_matrix(rng.uniform_int(1, 5), rng.uniform_int(1, 5));
    const Vector mine = singular_values(m);
    const auto ref = oracle::jacobi_singular_values(row_major(m), int(m.rows()), int(m.cols()));
    ASSERT_EQ(std::size_t(mine.size()), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(mine(Index(i)), ref[i], 1e-12);
  }
}

TEST(ComplementProjector, ZeroForFullRowRank) {
  EXPECT_EQ(complement_projector(Matrix::Identity(3, 3)), Matrix::Zero(3, 3));
}

TEST(ComplementProjector, ProjectsOntoLeftNullSpace) {
  const Matrix p = complement_projector(mat(2, 1, {1, 0}));
  EXPECT_TRUE(p.isApprox(mat(2, 2, {0, 0, 0, 1})));
}

TEST(Tolerances, RejectNonPositive) {
  Tolerances t;
  t.grad_tol = 0.0;
  EXPECT_EQ(code_of([&] { t.validate(); }), ErrorCode::InvalidArgument);
  t = Tolerances{};
  t.rank_tol = 1.0;
  EXPECT_EQ(code_of([&] { t.validate(); }), ErrorCode::InvalidArgument);
}
