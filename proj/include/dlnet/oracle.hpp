#pragma once

// Ground truth for the quadratic loss: reduced-rank regression by whitening,
// and central finite differences of the deep loss.

#include <string>

#include "dlnet/error.hpp"
#include "dlnet/linalg.hpp"
#include "dlnet/network.hpp"

namespace dlnet {

/// X = R Q with Q having orthonormal rows (d0 x n) and R square invertible.
struct Whitening {
  Matrix r;
  Matrix q;
};

inline Whitening whiten(const Matrix& x, double rank_tol = kDefaultRankTol) {
  if (x.rows() > x.cols() || numerical_rank(x, rank_tol) < x.rows()) {
    throw Error(ErrorCode::RankDeficientData,
                "X (" + shape_string(x) + ") does not have full row rank");
  }
  Eigen::HouseholderQR<Matrix> qr(x.transpose());
  const Index d0 = x.rows();
  const Matrix q_thin = qr.householderQ() * Matrix::Identity(x.cols(), d0);  // n x d0
  const Matrix r_upper = qr.matrixQR().topRows(d0).triangularView<Eigen::Upper>();
  return {r_upper.transpose(), q_thin.transpose()};
}

struct OracleSolution {
  Matrix w;     // minimizer of ||W X - Y||^2 over rank(W) <= d
  double loss;  // its loss
};

/// Reduced-rank regression: in whitened coordinates W' = W R the loss is
/// ||W' - Y Q^T||^2 plus a constant, so W' is the truncated SVD of Y Q^T.
inline OracleSolution rrr_oracle(const Matrix& x, const Matrix& y, Index d,
                                 double rank_tol = kDefaultRankTol) {
  if (x.cols() != y.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "X and Y sample counts differ");
  }
  const Whitening wh = whiten(x, rank_tol);
  const Matrix c = y * wh.q.transpose();
  const Index rank = std::min<Index>(d, std::min(c.rows(), c.cols()));
  const Matrix w_white = best_rank_approx(c, rank);
  OracleSolution out;
  // W = W' R^{-1}  <=>  R^T W^T = W'^T
  out.w = wh.r.transpose().triangularView<Eigen::Upper>().solve(w_white.transpose()).transpose();
  out.loss = (out.w * x - y).squaredNorm();
  return out;
}

inline OracleSolution rrr_oracle(const QuadraticLoss& f, Index d,
                                 double rank_tol = kDefaultRankTol) {
  return rrr_oracle(f.x(), f.y(), d, rank_tol);
}

/// Default step h = 1e-5 (1 + ||M_i||).
inline double default_fd_step(const FactorChain& chain, Index layer) {
  return 1e-5 * (1.0 + chain.layer(layer).norm());
}

/// Central differences (L(M + hE) - L(M - hE)) / 2h, entry by entry.
inline Matrix finite_diff_gradient(const FactorChain& chain, const ConvexLoss& f, Index layer,
                                   double h) {
  if (!(h > 0.0)) throw Error(ErrorCode::InvalidArgument, "finite-difference step must be > 0");
  FactorChain probe = chain;
  const Matrix base = chain.layer(layer);
  Matrix out(base.rows(), base.cols());
  for (Index c = 0; c < base.cols(); ++c) {
    for (Index r = 0; r < base.rows(); ++r) {
      Matrix m = base;
      m(r, c) += h;
      probe.set_layer(layer, m);
      const double up = loss(probe, f);
      m(r, c) = base(r, c) - h;
      probe.set_layer(layer, m);
      const double down = loss(probe, f);
      out(r, c) = (up - down) / (2.0 * h);
    }
  }
  return out;
}

inline Matrix finite_diff_gradient(const FactorChain& chain, const ConvexLoss& f, Index layer) {
  return finite_diff_gradient(chain, f, layer, default_fd_step(chain, layer));
}

}  // namespace dlnet
