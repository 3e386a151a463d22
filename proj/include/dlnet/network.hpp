#pragma once

// Deep linear network parameter points, convex losses on the end-to-end
// product, exact layer gradients and the bottleneck split.
//
// Layers are numbered 1..k throughout the public API; width d_i is the
// output width of layer i and d_0 the input width.

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dlnet/error.hpp"
#include "dlnet/linalg.hpp"

namespace dlnet {

class DimensionSignature {
 public:
  DimensionSignature() = default;

  explicit DimensionSignature(std::vector<Index> widths) : widths_(std::move(widths)) {
    if (widths_.size() < 3) {
      throw Error(ErrorCode::InvalidArgument, "a dimension signature needs k >= 2 layers");
    }
    for (Index w : widths_) {
      if (w <= 0) throw Error(ErrorCode::InvalidArgument, "layer widths must be positive");
    }
  }

  Index depth() const { return static_cast<Index>(widths_.size()) - 1; }
  Index width(Index i) const { return widths_.at(static_cast<std::size_t>(i)); }
  Index input_dim() const { return widths_.front(); }
  Index output_dim() const { return widths_.back(); }
  Index narrowest() const { return *std::min_element(widths_.begin(), widths_.end()); }
  const std::vector<Index>& widths() const { return widths_; }

  friend bool operator==(const DimensionSignature&, const DimensionSignature&) = default;

 private:
  std::vector<Index> widths_;
};

/// The parameter point M_1..M_k. Layer i has shape d_i x d_{i-1}.
class FactorChain {
 public:
  FactorChain() = default;

  explicit FactorChain(std::vector<Matrix> factors) : factors_(std::move(factors)) {
    if (factors_.size() < 2) {
      throw Error(ErrorCode::InvalidArgument, "a factor chain needs at least two layers");
    }
    std::vector<Index> widths;
    widths.push_back(factors_.front().cols());
    for (std::size_t i = 0; i < factors_.size(); ++i) {
      const Matrix& m = factors_[i];
      if (m.rows() <= 0 || m.cols() <= 0) {
        throw Error(ErrorCode::ShapeMismatch, "layer " + std::to_string(i + 1) + " is empty");
      }
      if (m.cols() != widths.back()) {
        throw Error(ErrorCode::ShapeMismatch,
                    "layer " + std::to_string(i + 1) + " is " + shape_string(m) +
                        " but the previous width is " + std::to_string(widths.back()));
      }
      require_finite(m, "factor");
      widths.push_back(m.rows());
    }
    dims_ = DimensionSignature(std::move(widths));
  }

  const DimensionSignature& dims() const { return dims_; }
  Index depth() const { return dims_.depth(); }

  const Matrix& layer(Index i) const { return factors_.at(checked(i)); }

  void set_layer(Index i, Matrix m) {
    Matrix& slot = factors_.at(checked(i));
    if (m.rows() != slot.rows() || m.cols() != slot.cols()) {
      throw Error(ErrorCode::ShapeMismatch, "replacement for layer " + std::to_string(i) +
                                                " is " + shape_string(m) + ", expected " +
                                                shape_string(slot));
    }
    require_finite(m, "factor");
    slot = std::move(m);
  }

  const std::vector<Matrix>& factors() const { return factors_; }

  double max_layer_norm() const {
    double best = 0.0;
    for (const Matrix& m : factors_) best = std::max(best, m.norm());
    return best;
  }

 private:
  std::size_t checked(Index i) const {
    if (i < 1 || i > depth()) {
      throw Error(ErrorCode::InvalidArgument, "layer index " + std::to_string(i) + " not in 1.." +
                                                  std::to_string(depth()));
    }
    return static_cast<std::size_t>(i - 1);
  }

  DimensionSignature dims_;
  std::vector<Matrix> factors_;
};

/// A differentiable convex function on d_k x d_0 matrices.
///
/// Implementations must be stateless (or internally synchronized): the
/// analyzer may evaluate one loss from several threads.
class ConvexLoss {
 public:
  virtual ~ConvexLoss() = default;

  virtual Index out_rows() const = 0;
  virtual Index in_cols() const = 0;
  virtual double value(const Matrix& w) const = 0;
  virtual Matrix gradient(const Matrix& w) const = 0;
  virtual std::string_view kind() const = 0;

 protected:
  void check_shape(const Matrix& w) const {
    if (w.rows() != out_rows() || w.cols() != in_cols()) {
      throw Error(ErrorCode::ShapeMismatch, "loss expects " + std::to_string(out_rows()) + "x" +
                                                std::to_string(in_cols()) + ", got " +
                                                shape_string(w));
    }
  }
};

/// f(W) = ||W X - Y||_F^2.
class QuadraticLoss final : public ConvexLoss {
 public:
  QuadraticLoss(Matrix x, Matrix y) : x_(std::move(x)), y_(std::move(y)) {
    if (x_.cols() != y_.cols() || x_.size() == 0 || y_.size() == 0) {
      throw Error(ErrorCode::ShapeMismatch,
                  "X is " + shape_string(x_) + ", Y is " + shape_string(y_));
    }
    require_finite(x_, "X");
    require_finite(y_, "Y");
  }

  Index out_rows() const override { return y_.rows(); }
  Index in_cols() const override { return x_.rows(); }

  double value(const Matrix& w) const override {
    check_shape(w);
    return (w * x_ - y_).squaredNorm();
  }

  Matrix gradient(const Matrix& w) const override {
    check_shape(w);
    return 2.0 * (w * x_ - y_) * x_.transpose();
  }

  std::string_view kind() const override { return "quadratic"; }

  const Matrix& x() const { return x_; }
  const Matrix& y() const { return y_; }

 private:
  Matrix x_;
  Matrix y_;
};

/// f(W) = sum_ij log cosh(W_ij - T_ij).
class LogCoshLoss final : public ConvexLoss {
 public:
  explicit LogCoshLoss(Matrix target) : target_(std::move(target)) {
    if (target_.size() == 0) throw Error(ErrorCode::ShapeMismatch, "empty log-cosh target");
    require_finite(target_, "target");
  }

  Index out_rows() const override { return target_.rows(); }
  Index in_cols() const override { return target_.cols(); }

  double value(const Matrix& w) const override {
    check_shape(w);
    double total = 0.0;
    for (Index c = 0; c < w.cols(); ++c) {
      for (Index r = 0; r < w.rows(); ++r) {
        const double a = std::abs(w(r, c) - target_(r, c));
        // log cosh a = a + log1p(exp(-2a)) - log 2, stable for large a
        total += a + std::log1p(std::exp(-2.0 * a)) - std::log(2.0);
      }
    }
    return total;
  }

  Matrix gradient(const Matrix& w) const override {
    check_shape(w);
    return (w - target_).array().tanh().matrix();
  }

  std::string_view kind() const override { return "logcosh"; }

  const Matrix& target() const { return target_; }

 private:
  Matrix target_;
};

/// g(X) = f(X^T). Used to mirror constructions from the lower super-layer to
/// the upper one. Holds a non-owning reference.
class TransposedLoss final : public ConvexLoss {
 public:
  explicit TransposedLoss(const ConvexLoss& base) : base_(base) {}

  Index out_rows() const override { return base_.in_cols(); }
  Index in_cols() const override { return base_.out_rows(); }
  double value(const Matrix& w) const override { return base_.value(w.transpose()); }
  Matrix gradient(const Matrix& w) const override {
    return base_.gradient(w.transpose()).transpose();
  }
  std::string_view kind() const override { return "transposed"; }

 private:
  const ConvexLoss& base_;
};

/// M_hi * ... * M_lo. An empty product (hi = lo - 1) is the identity of
/// width d_hi.
inline Matrix partial_product(const FactorChain& chain, Index lo, Index hi) {
  const Index k = chain.depth();
  if (lo < 1 || lo > k + 1 || hi < 0 || hi > k || hi < lo - 1) {
    throw Error(ErrorCode::InvalidArgument, "partial_product range [" + std::to_string(lo) +
                                                ", " + std::to_string(hi) + "] invalid for k=" +
                                                std::to_string(k));
  }
  if (hi < lo) {
    const Index n = chain.dims().width(hi);
    return Matrix::Identity(n, n);
  }
  Matrix p = chain.layer(lo);
  for (Index i = lo + 1; i <= hi; ++i) p = chain.layer(i) * p;
  return p;
}

inline Matrix end_to_end(const FactorChain& chain) {
  return partial_product(chain, 1, chain.depth());
}

inline void check_compatible(const FactorChain& chain, const ConvexLoss& f) {
  if (f.out_rows() != chain.dims().output_dim() || f.in_cols() != chain.dims().input_dim()) {
    throw Error(ErrorCode::ShapeMismatch,
                "loss acts on " + std::to_string(f.out_rows()) + "x" +
                    std::to_string(f.in_cols()) + " but the chain maps " +
                    std::to_string(chain.dims().input_dim()) + " -> " +
                    std::to_string(chain.dims().output_dim()));
  }
}

inline double loss(const FactorChain& chain, const ConvexLoss& f) {
  check_compatible(chain, f);
  return f.value(end_to_end(chain));
}

/// Chain rule at a known outer gradient G = f'(W):
/// dL/dM_i = (M_k..M_{i+1})^T G (M_{i-1}..M_1)^T.
inline std::vector<Matrix> layer_gradients_from(const FactorChain& chain, const Matrix& outer) {
  const Index k = chain.depth();
  // suffix[i] = M_k..M_{i+1}, prefix[i] = M_{i-1}..M_1
  std::vector<Matrix> prefix(static_cast<std::size_t>(k + 1));
  prefix[1] = Matrix::Identity(chain.dims().input_dim(), chain.dims().input_dim());
  for (Index i = 2; i <= k; ++i) prefix[i] = chain.layer(i - 1) * prefix[i - 1];
  std::vector<Matrix> grads(static_cast<std::size_t>(k));
  Matrix left = outer;  // (M_k..M_{i+1})^T G
  for (Index i = k; i >= 1; --i) {
    grads[i - 1] = left * prefix[i].transpose();
    if (i > 1) left = chain.layer(i).transpose() * left;
  }
  return grads;
}

inline std::vector<Matrix> layer_gradients(const FactorChain& chain, const ConvexLoss& f) {
  check_compatible(chain, f);
  return layer_gradients_from(chain, f.gradient(end_to_end(chain)));
}

inline double max_norm(const std::vector<Matrix>& ms) {
  double best = 0.0;
  for (const Matrix& m : ms) best = std::max(best, m.norm());
  return best;
}

/// prod_{i=lo..hi} ||M_i||_F: the magnitude against which rounding noise in
/// the computed product M_hi..M_lo is judged. 1 for an empty range.
inline double product_scale(const FactorChain& chain, Index lo, Index hi) {
  double s = 1.0;
  for (Index i = lo; i <= hi; ++i) s *= chain.layer(i).norm();
  return s;
}

/// Split of the chain at an interior minimum-width layer j into the upper
/// super-layer A = M_k..M_{j+1} and the lower super-layer B = M_j..M_1.
struct BottleneckSplit {
  Index j = 0;
  Index width = 0;       // d = d_j
  Matrix upper;          // A, d_k x d
  Matrix lower;          // B, d x d_0
  Matrix upper_inner;    // A1 = M_{k-1}..M_{j+1}, d_{k-1} x d
  Matrix lower_inner;    // B1 = M_j..M_2, d x d_1
  double upper_scale = 0.0;        // product_scale over layers j+1..k
  double lower_scale = 0.0;        // layers 1..j
  double upper_inner_scale = 0.0;  // layers j+1..k-1
  double lower_inner_scale = 0.0;  // layers 2..j

  Index rank_upper(double rank_tol = kDefaultRankTol) const {
    return numerical_rank(upper, rank_tol, upper_scale);
  }
  Index rank_lower(double rank_tol = kDefaultRankTol) const {
    return numerical_rank(lower, rank_tol, lower_scale);
  }
};

/// Split at a caller-chosen interior index (0 < j < k, d_j = d).
inline BottleneckSplit split_at(const FactorChain& chain, Index j) {
  const Index k = chain.depth();
  if (j <= 0 || j >= k) {
    throw Error(ErrorCode::InvalidArgument, "split index must be interior");
  }
  if (chain.dims().width(j) != chain.dims().narrowest()) {
    throw Error(ErrorCode::InvalidArgument,
                "split index " + std::to_string(j) + " is not a minimum-width layer");
  }
  BottleneckSplit s;
  s.j = j;
  s.width = chain.dims().width(j);
  s.upper = partial_product(chain, j + 1, k);
  s.lower = partial_product(chain, 1, j);
  s.upper_inner = partial_product(chain, j + 1, k - 1);
  s.lower_inner = partial_product(chain, 2, j);
  s.upper_scale = product_scale(chain, j + 1, k);
  s.lower_scale = product_scale(chain, 1, j);
  s.upper_inner_scale = product_scale(chain, j + 1, k - 1);
  s.lower_inner_scale = product_scale(chain, 2, j);
  return s;
}

/// Smallest interior j with d_j = min_i d_i, or nullopt when only the
/// boundary widths attain the minimum.
inline std::optional<BottleneckSplit> bottleneck_split(const FactorChain& chain) {
  const Index k = chain.depth();
  const Index d = chain.dims().narrowest();
  for (Index j = 1; j < k; ++j) {
    if (chain.dims().width(j) == d) return split_at(chain, j);
  }
  return std::nullopt;
}

/// Chain of g(X) = f(X^T): layers reversed and transposed, so layer i of the
/// result is M_{k+1-i}^T and the end-to-end product is W^T.
inline FactorChain transpose_chain(const FactorChain& chain) {
  std::vector<Matrix> out;
  const Index k = chain.depth();
  out.reserve(static_cast<std::size_t>(k));
  for (Index i = k; i >= 1; --i) out.push_back(chain.layer(i).transpose());
  return FactorChain(std::move(out));
}

}  // namespace dlnet
