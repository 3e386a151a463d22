#pragma once

// Tolerance-aware dense kernels: numerical rank, canonical kernel vectors,
// minimum-norm right solves and truncated-SVD approximation.

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/Dense>

#include "dlnet/error.hpp"

namespace dlnet {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

inline constexpr double kDefaultRankTol = 1e-9;
inline constexpr double kDefaultInvarianceTol = 1e-9;
inline constexpr double kDefaultGradTol = 1e-8;
inline constexpr double kDefaultSubspaceTol = 1e-6;

/// Thresholds used wherever an exact-arithmetic "= 0" or "rank" statement has
/// to be decided in floating point.
struct Tolerances {
  double rank_tol = kDefaultRankTol;            // relative to sigma_max
  double invariance_tol = kDefaultInvarianceTol;  // relative product/loss deviation
  double grad_tol = kDefaultGradTol;            // absolute Frobenius norm
  double subspace_tol = kDefaultSubspaceTol;    // relative membership threshold

  void validate() const {
    auto positive = [](double x) { return std::isfinite(x) && x > 0.0; };
    if (!positive(rank_tol) || !positive(invariance_tol) || !positive(grad_tol) ||
        !positive(subspace_tol)) {
      throw Error(ErrorCode::InvalidArgument, "tolerances must be finite and strictly positive");
    }
    if (rank_tol >= 1.0) {
      throw Error(ErrorCode::InvalidArgument, "rank_tol must be < 1");
    }
  }
};

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

inline void require_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) {
    throw Error(ErrorCode::NonFinite, std::string(what) + " contains NaN or Inf");
  }
}

inline std::string shape_string(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

/// Singular values in non-increasing order.
inline Vector singular_values(const Matrix& m) {
  if (m.size() == 0) return Vector();
  Eigen::JacobiSVD<Matrix> svd(m);
  return svd.singularValues();
}

/// Number of singular values strictly above rank_tol * max(sigma_max, scale);
/// 0 for the zero matrix. `scale` is an optional reference magnitude for
/// matrices computed as products: rounding leaves entries of order
/// eps * prod ||M_i||, which must not count as rank.
inline Index numerical_rank(const Matrix& m, double rank_tol = kDefaultRankTol,
                            double scale = 0.0) {
  if (m.size() == 0) {
    throw Error(ErrorCode::InvalidArgument, "numerical_rank of an empty matrix");
  }
  const Vector s = singular_values(m);
  const double ref = std::max(s.size() > 0 ? s(0) : 0.0, scale);
  if (ref == 0.0) return 0;
  const double cut = rank_tol * ref;
  Index r = 0;
  for (Index i = 0; i < s.size(); ++i) {
    if (s(i) > cut) ++r;
  }
  return r;
}

/// Flips the sign so the first component with |x| > 1e-12 is positive.
inline void sign_normalize(Vector& v) {
  for (Index i = 0; i < v.size(); ++i) {
    if (std::abs(v(i)) > 1e-12) {
      if (v(i) < 0.0) v = -v;
      return;
    }
  }
}

/// Canonical unit vector in the (numerical) kernel of m: the right singular
/// vector of the smallest singular value, largest index on ties, sign
/// normalized. A matrix of numerical rank 0 (including the zero matrix)
/// returns e_1. `scale` as in numerical_rank.
inline Vector kernel_vector(const Matrix& m, double rank_tol = kDefaultRankTol,
                            double scale = 0.0) {
  if (m.size() == 0) {
    throw Error(ErrorCode::InvalidArgument, "kernel_vector of an empty matrix");
  }
  const Index n = m.cols();
  Eigen::JacobiSVD<Matrix> svd(m, Eigen::ComputeFullV);
  const Vector& s = svd.singularValues();
  const double ref = std::max(s.size() > 0 ? s(0) : 0.0, scale);
  Index rank = 0;
  for (Index i = 0; i < s.size(); ++i) {
    if (ref > 0.0 && s(i) > rank_tol * ref) ++rank;
  }
  if (rank == 0) {
    return Vector::Unit(n, 0);
  }
  if (rank >= n) {
    throw Error(ErrorCode::FullColumnRank,
                "matrix " + shape_string(m) + " has full column rank at rank_tol");
  }
  // Columns of the full V are ordered by non-increasing singular value, with
  // the implicit zero singular values (n > rows) last.
  Vector w = svd.matrixV().col(n - 1);
  w.normalize();
  sign_normalize(w);
  return w;
}

struct RightSolve {
  Matrix solution;       // D1 with D1 * A1 = D, minimum Frobenius norm
  double amplification;  // ||D1|| / ||D||, 0 when D = 0
  double residual;       // ||D1 * A1 - D||
};

/// Minimum-norm solution of D1 * A1 = D for A1 of full column rank.
inline RightSolve min_norm_right_solve(const Matrix& a1, const Matrix& d,
                                       double rank_tol = kDefaultRankTol, double scale = 0.0) {
  if (a1.size() == 0) {
    throw Error(ErrorCode::InvalidArgument, "empty A1 in min_norm_right_solve");
  }
  if (d.cols() != a1.cols()) {
    throw Error(ErrorCode::ShapeMismatch,
                "D is " + shape_string(d) + " but A1 is " + shape_string(a1));
  }
  Eigen::JacobiSVD<Matrix> svd(a1, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vector& s = svd.singularValues();
  const double ref = std::max(s.size() > 0 ? s(0) : 0.0, scale);
  Index rank = 0;
  for (Index i = 0; i < s.size(); ++i) {
    if (ref > 0.0 && s(i) > rank_tol * ref) ++rank;
  }
  if (rank < a1.cols()) {
    throw Error(ErrorCode::RankDeficientLift,
                "A1 (" + shape_string(a1) + ") has rank " + std::to_string(rank) +
                    " < " + std::to_string(a1.cols()));
  }
  // pinv(A1) = V * S^-1 * U^T
  const Matrix pinv = svd.matrixV() * s.cwiseInverse().asDiagonal() * svd.matrixU().transpose();
  RightSolve out;
  out.solution = d * pinv;
  const double dn = d.norm();
  out.amplification = dn > 0.0 ? out.solution.norm() / dn : 0.0;
  out.residual = (out.solution * a1 - d).norm();
  return out;
}

/// Frobenius-optimal approximation of rank at most `rank` (truncated SVD).
inline Matrix best_rank_approx(const Matrix& m, Index rank) {
  const Index full = std::min(m.rows(), m.cols());
  if (rank < 0 || rank > full) {
    throw Error(ErrorCode::InvalidArgument,
                "rank " + std::to_string(rank) + " outside [0, " + std::to_string(full) + "]");
  }
  if (rank == 0) return Matrix::Zero(m.rows(), m.cols());
  if (rank == full) return m;
  Eigen::JacobiSVD<Matrix> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  return svd.matrixU().leftCols(rank) * svd.singularValues().head(rank).asDiagonal() *
         svd.matrixV().leftCols(rank).transpose();
}

/// Orthogonal projector onto the orthogonal complement of range(m), built
/// from the complementary left singular vectors (exactly zero when m has full
/// row rank).
inline Matrix complement_projector(const Matrix& m, double rank_tol = kDefaultRankTol) {
  const Index rows = m.rows();
  if (m.size() == 0) return Matrix::Identity(rows, rows);
  Eigen::JacobiSVD<Matrix> svd(m, Eigen::ComputeFullU);
  const Vector& s = svd.singularValues();
  const double smax = s.size() > 0 ? s(0) : 0.0;
  Index rank = 0;
  for (Index i = 0; i < s.size(); ++i) {
    if (smax > 0.0 && s(i) > rank_tol * smax) ++rank;
  }
  const Matrix u = svd.matrixU().rightCols(rows - rank);
  return u * u.transpose();
}

}  // namespace dlnet
