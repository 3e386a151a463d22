#pragma once

// Product-invariant rank-one perturbations, the inductive subspace-escape
// construction at rank-deficient plateaus, and the full-rank lift of a
// super-layer perturbation to a single layer.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "dlnet/error.hpp"
#include "dlnet/linalg.hpp"
#include "dlnet/network.hpp"
#include "dlnet/rng.hpp"

namespace dlnet {

/// M_i -> M_i + w v^T, with w (approximately) annihilated by M_k..M_{i+1}.
struct RankOnePerturbation {
  Index layer = 0;
  Vector w;  // unit, in R^{d_i}
  Vector v;  // in R^{d_{i-1}}
};

struct InvariantFamily {
  std::vector<RankOnePerturbation> perturbations;
  double scale = 0.0;  // budget delta for each ||v_i||
};

enum class Side { Lower, Upper };

inline std::string_view to_string(Side s) { return s == Side::Lower ? "lower" : "upper"; }

/// A perturbed point with the same loss but a nonzero two-layer
/// super-gradient, witnessing that the original point is not a local minimum.
struct EscapeCertificate {
  FactorChain perturbed_chain;
  Side side = Side::Lower;        // super-layer that was perturbed
  Index split_index = 0;          // j
  Index i_star = 0;               // 0: the lower super-layer already escaped V
  Index witness_row = 0;          // 1-based row of B~ (column of A~ for Upper)
  double super_gradient_norm = 0.0;
  double loss_delta = 0.0;
  double original_loss = 0.0;
  double delta = 0.0;
  InvariantFamily family;         // layer numbers refer to the original chain
};

/// delta = 1e-3 (1 + max_i ||M_i||).
inline double default_delta(const FactorChain& chain) {
  return 1e-3 * (1.0 + chain.max_layer_norm());
}

/// Kernel witnesses w_1..w_j with (M_k..M_{i+1}) w_i ~ 0. Requires
/// rank(A) < d.
inline std::vector<Vector> kernel_family(const FactorChain& chain, const BottleneckSplit& split,
                                         double rank_tol = kDefaultRankTol) {
  if (split.rank_upper(rank_tol) >= split.width) {
    throw Error(ErrorCode::FullRankA,
                "upper super-layer has full rank " + std::to_string(split.width));
  }
  std::vector<Vector> ws;
  ws.reserve(static_cast<std::size_t>(split.j));
  // left = M_k..M_{i+1}, grown downward from i = j.
  Matrix left = split.upper;
  double scale = split.upper_scale;
  for (Index i = split.j; i >= 1; --i) {
    if (i < split.j) {
      left = left * chain.layer(i + 1);
      scale *= chain.layer(i + 1).norm();
    }
    ws.push_back(kernel_vector(left, rank_tol, scale));
  }
  std::vector<Vector> ordered(ws.rbegin(), ws.rend());
  return ordered;
}

/// Family on layers 1..j with the canonical kernel witnesses and free
/// directions v_i = delta * (unit vector drawn from `seed`).
inline InvariantFamily random_family(const FactorChain& chain, const BottleneckSplit& split,
                                     double delta, std::uint64_t seed,
                                     double rank_tol = kDefaultRankTol) {
  if (!(delta >= 0.0) || !std::isfinite(delta)) {
    throw Error(ErrorCode::InvalidArgument, "delta must be finite and non-negative");
  }
  const std::vector<Vector> ws = kernel_family(chain, split, rank_tol);
  SplitMix64 rng = SplitMix64::stream(seed, 0xFA317ULL);
  InvariantFamily family;
  family.scale = delta;
  for (Index i = 1; i <= split.j; ++i) {
    Vector v = rng.normal_vector(chain.layer(i).cols());
    v *= delta / std::max(v.norm(), 1e-300);
    family.perturbations.push_back({i, ws[static_cast<std::size_t>(i - 1)], std::move(v)});
  }
  return family;
}

inline FactorChain apply_family(const FactorChain& chain, const InvariantFamily& family) {
  FactorChain out = chain;
  for (const RankOnePerturbation& p : family.perturbations) {
    if (p.layer < 1 || p.layer > chain.depth()) {
      throw Error(ErrorCode::InvalidArgument,
                  "perturbation layer " + std::to_string(p.layer) + " out of range");
    }
    const Matrix& m = chain.layer(p.layer);
    if (p.w.size() != m.rows() || p.v.size() != m.cols()) {
      throw Error(ErrorCode::ShapeMismatch,
                  "perturbation for layer " + std::to_string(p.layer) + " has w in R^" +
                      std::to_string(p.w.size()) + ", v in R^" + std::to_string(p.v.size()) +
                      " but the layer is " + shape_string(m));
    }
    out.set_layer(p.layer, out.layer(p.layer) + p.w * p.v.transpose());
  }
  return out;
}

/// True iff ||G vec|| <= subspace_tol ||G|| ||vec||, i.e. vec lies in
/// V = {v : G v = 0} up to tolerance. The zero vector is always a member.
inline bool subspace_membership(const Vector& vec, const Matrix& g,
                                double subspace_tol = kDefaultSubspaceTol) {
  if (vec.size() != g.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "vector length does not match gradient columns");
  }
  return (g * vec).norm() <= subspace_tol * g.norm() * vec.norm();
}

namespace detail {

/// ||G r|| / (||G|| ||r||); 0 for zero rows.
inline double violation(const Matrix& g, double g_norm, const Vector& row) {
  const double rn = row.norm();
  if (rn == 0.0 || g_norm == 0.0) return 0.0;
  return (g * row).norm() / (g_norm * rn);
}

/// Row of p with the largest V-violation; {-1, 0} if every row is a member.
/// `floor` is the absolute rounding level of p's entries: a row r counts as a
/// member when ||G r|| <= ||G|| (tol ||r|| + floor), so rows that are zero up
/// to rounding never look like escapes.
inline std::pair<Index, double> worst_row(const Matrix& p, const Matrix& g, double tol,
                                          double floor = 0.0) {
  const double gn = g.norm();
  Index best = -1;
  double best_v = 0.0;
  for (Index r = 0; r < p.rows(); ++r) {
    const Vector row = p.row(r).transpose();
    if ((g * row).norm() <= gn * (tol * row.norm() + floor)) continue;
    const double v = violation(g, gn, row);
    if (best < 0 || v > best_v) {
      best = r;
      best_v = v;
    }
  }
  return {best, best_v};
}

inline bool rows_in_subspace(const Matrix& p, const Matrix& g, double tol, double floor = 0.0) {
  return worst_row(p, g, tol, floor).first < 0;
}

}  // namespace detail

/// Builds the escape on the lower super-layer: a product-invariant family on
/// layers 1..j whose perturbed B~ has a row outside V = {v : f'(W) v = 0}.
///
/// Follows the inductive construction exactly: i* is the first layer whose
/// partial product has all rows in V; layers below i* stay untouched; at i* = 1
/// the first layer receives v_1 = delta u with u the sign-normalized
/// largest-norm row of f'(W); above, a layer is perturbed along delta e_l
/// only when the unperturbed step would fold every row back into V.
inline EscapeCertificate escape_construction(const FactorChain& chain, const ConvexLoss& f,
                                             const BottleneckSplit& split, double delta,
                                             const Tolerances& tols = {}) {
  tols.validate();
  check_compatible(chain, f);
  if (!(delta > 0.0) || !std::isfinite(delta)) {
    throw Error(ErrorCode::InvalidArgument, "delta must be finite and positive");
  }
  const Matrix w = end_to_end(chain);
  const Matrix g = f.gradient(w);
  const double g_norm = g.norm();
  if (g_norm <= tols.grad_tol) {
    throw Error(ErrorCode::GradientVanishes,
                "||f'(W)|| = " + std::to_string(g_norm) + ": the point is globally certified");
  }
  const std::vector<Vector> kernels = kernel_family(chain, split, tols.rank_tol);
  const Index j = split.j;

  EscapeCertificate cert;
  cert.side = Side::Lower;
  cert.split_index = j;
  cert.delta = delta;
  cert.family.scale = delta;
  cert.original_loss = f.value(w);

  // i* = min{i : R(M_i..M_1) subset of V}; membership is inherited upward.
  Matrix prefix = chain.layer(1);
  Index i_star = 0;
  std::vector<Matrix> prefixes;
  std::vector<double> floors;  // rank_tol * prod_{l<=i} ||M_l||, i = 1..j
  double scale = 1.0;
  for (Index i = 1; i <= j; ++i) {
    scale *= chain.layer(i).norm();
    floors.push_back(tols.rank_tol * scale);
  }
  for (Index i = 1; i <= j; ++i) {
    if (i > 1) prefix = chain.layer(i) * prefix;
    prefixes.push_back(prefix);
    if (detail::rows_in_subspace(prefix, g, tols.subspace_tol,
                                 floors[static_cast<std::size_t>(i - 1)])) {
      i_star = i;
      break;
    }
  }
  cert.i_star = i_star;

  Matrix current;  // M~_i..M~_1
  Index next = 0;  // next layer to decide
  if (i_star == 0) {
    current = split.lower;
    next = j + 1;
  } else if (i_star == 1) {
    Index best = 0;
    for (Index r = 1; r < g.rows(); ++r) {
      if (g.row(r).norm() > g.row(best).norm()) best = r;
    }
    Vector u = g.row(best).transpose();
    u.normalize();
    sign_normalize(u);
    RankOnePerturbation p{1, kernels[0], delta * u};
    current = chain.layer(1) + p.w * p.v.transpose();
    cert.family.perturbations.push_back(std::move(p));
    next = 2;
  } else {
    current = prefixes[static_cast<std::size_t>(i_star - 2)];
    next = i_star;
  }

  for (Index i = next; i <= j; ++i) {
    const auto at = [&](Index layer) { return floors[static_cast<std::size_t>(layer - 1)]; };
    Matrix candidate = chain.layer(i) * current;
    if (!detail::rows_in_subspace(candidate, g, tols.subspace_tol, at(i))) {
      current = std::move(candidate);
      continue;
    }
    const auto [row, score] = detail::worst_row(current, g, tols.subspace_tol, at(i - 1));
    if (row < 0) {
      throw Error(ErrorCode::ConstructionFailed,
                  "no row of the partial product below layer " + std::to_string(i) +
                      " escapes V; check subspace_tol");
    }
    (void)score;
    RankOnePerturbation p{i, kernels[static_cast<std::size_t>(i - 1)],
                          delta * Vector::Unit(current.rows(), row)};
    Matrix grown = candidate + p.w * (delta * current.row(row));
    current = std::move(grown);
    cert.family.perturbations.push_back(std::move(p));
  }

  cert.perturbed_chain = apply_family(chain, cert.family);
  const Matrix b_tilde = partial_product(cert.perturbed_chain, 1, j);
  const auto [row, score] =
      detail::worst_row(b_tilde, g, tols.subspace_tol, tols.rank_tol * split.lower_scale);
  (void)score;
  cert.witness_row = row < 0 ? 0 : row + 1;
  cert.super_gradient_norm = (g * b_tilde.transpose()).norm();
  cert.loss_delta = loss(cert.perturbed_chain, f) - cert.original_loss;

  if (cert.super_gradient_norm <= tols.grad_tol || row < 0) {
    throw Error(ErrorCode::ConstructionFailed,
                "||f'(W) B~^T|| = " + std::to_string(cert.super_gradient_norm) +
                    " after " + std::to_string(j) + " steps (i* = " + std::to_string(i_star) +
                    ")");
  }
  if (std::abs(cert.loss_delta) > tols.invariance_tol * (1.0 + std::abs(cert.original_loss))) {
    throw Error(ErrorCode::ConstructionFailed,
                "perturbation changed the loss by " + std::to_string(cert.loss_delta));
  }
  return cert;
}

/// Mirror of escape_construction for the upper super-layer, obtained by
/// running the lower-side construction on g(X) = f(X^T) over the transposed
/// chain. Requires rank(B) < d.
inline EscapeCertificate escape_construction_upper(const FactorChain& chain, const ConvexLoss& f,
                                                   const BottleneckSplit& split, double delta,
                                                   const Tolerances& tols = {}) {
  const Index k = chain.depth();
  const FactorChain flipped = transpose_chain(chain);
  const TransposedLoss g(f);
  const BottleneckSplit flipped_split = split_at(flipped, k - split.j);
  EscapeCertificate cert;
  try {
    cert = escape_construction(flipped, g, flipped_split, delta, tols);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::FullRankA) {
      throw Error(ErrorCode::FullRankA, "lower super-layer has full rank (mirrored escape)");
    }
    throw;
  }
  cert.perturbed_chain = transpose_chain(cert.perturbed_chain);
  cert.side = Side::Upper;
  cert.split_index = split.j;
  // Layer i of the flipped chain is M_{k+1-i}^T, so w and v swap roles.
  for (RankOnePerturbation& p : cert.family.perturbations) {
    p.layer = k + 1 - p.layer;
    std::swap(p.w, p.v);
  }
  return cert;
}

struct Lift {
  Index layer = 0;       // k for Upper, 1 for Lower
  Matrix update;         // D1, added to that layer
  double amplification;  // ||D1|| / ||D||
  double residual;       // ||D1 A1 - D|| (or ||B1 D1 - D||)
};

/// Realizes a super-layer perturbation D by a single-layer update: Upper
/// solves D1 A1 = D and updates M_k; Lower solves B1 D1 = D and updates M_1.
inline Lift lift_perturbation(const FactorChain& chain, const BottleneckSplit& split,
                              const Matrix& d, Side side, double rank_tol = kDefaultRankTol) {
  require_finite(d, "D");
  Lift out;
  if (side == Side::Upper) {
    if (d.rows() != split.upper.rows() || d.cols() != split.upper.cols()) {
      throw Error(ErrorCode::ShapeMismatch,
                  "D is " + shape_string(d) + ", A is " + shape_string(split.upper));
    }
    RightSolve s = min_norm_right_solve(split.upper_inner, d, rank_tol, split.upper_inner_scale);
    out.layer = chain.depth();
    out.update = std::move(s.solution);
    out.amplification = s.amplification;
    out.residual = s.residual;
  } else {
    if (d.rows() != split.lower.rows() || d.cols() != split.lower.cols()) {
      throw Error(ErrorCode::ShapeMismatch,
                  "D is " + shape_string(d) + ", B is " + shape_string(split.lower));
    }
    RightSolve s = min_norm_right_solve(split.lower_inner.transpose(), d.transpose(), rank_tol,
                                        split.lower_inner_scale);
    out.layer = 1;
    out.update = s.solution.transpose();
    out.amplification = s.amplification;
    out.residual = s.residual;
  }
  return out;
}

}  // namespace dlnet
