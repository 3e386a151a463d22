#pragma once

// Seeded instance generation. Each construction targets one branch of the
// critical-point case split:
//
//   generic                 standard normal layers scaled by 1/sqrt(d_{i-1})
//   rank_deficient          generic, but the layer just above the bottleneck
//                           has rank r < d (not critical in general)
//   rank_deficient_plateau  critical, f'(W) != 0, min(rank A, rank B) < d
//   full_rank_critical      critical, f'(W) != 0, rank A = rank B = d
//   factored_global         the global optimum factored through the widths
//
// Critical points for the quadratic loss are stationary points of the
// whitened reduced problem ||W' - C||^2 (C = Y Q^T, X = R Q): W' keeps a subset
// S of the singular triplets of C. For log-cosh the pair (A, B) is drawn first
// and the target is solved so that f'(AB) is orthogonal to range(A) and to
// the row space of B.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dlnet/error.hpp"
#include "dlnet/linalg.hpp"
#include "dlnet/network.hpp"
#include "dlnet/oracle.hpp"
#include "dlnet/rng.hpp"

namespace dlnet {

enum class LossKind { Quadratic, LogCosh };
enum class Construction { Generic, RankDeficient, RankDeficientPlateau, FullRankCritical, FactoredGlobal };
enum class DataModel { Generic, Planted, Identity };

inline std::string_view to_string(LossKind k) {
  return k == LossKind::Quadratic ? "quadratic" : "logcosh";
}

inline std::string_view to_string(Construction c) {
  switch (c) {
    case Construction::Generic: return "generic";
    case Construction::RankDeficient: return "rank_deficient";
    case Construction::RankDeficientPlateau: return "rank_deficient_plateau";
    case Construction::FullRankCritical: return "full_rank_critical";
    case Construction::FactoredGlobal: return "factored_global";
  }
  return "unknown";
}

inline std::string_view to_string(DataModel d) {
  switch (d) {
    case DataModel::Generic: return "generic";
    case DataModel::Planted: return "planted";
    case DataModel::Identity: return "identity";
  }
  return "unknown";
}

inline LossKind parse_loss_kind(std::string_view s) {
  if (s == "quadratic") return LossKind::Quadratic;
  if (s == "logcosh") return LossKind::LogCosh;
  throw Error(ErrorCode::Parse, "unknown loss kind '" + std::string(s) + "'");
}

inline Construction parse_construction(std::string_view s) {
  for (Construction c : {Construction::Generic, Construction::RankDeficient,
                         Construction::RankDeficientPlateau, Construction::FullRankCritical,
                         Construction::FactoredGlobal}) {
    if (s == to_string(c)) return c;
  }
  throw Error(ErrorCode::Parse, "unknown construction '" + std::string(s) + "'");
}

inline DataModel parse_data_model(std::string_view s) {
  if (s == "generic") return DataModel::Generic;
  if (s == "planted") return DataModel::Planted;
  if (s == "identity") return DataModel::Identity;
  throw Error(ErrorCode::Parse, "unknown data model '" + std::string(s) + "'");
}

struct InstanceSpec {
  DimensionSignature dims;
  LossKind loss = LossKind::Quadratic;
  Index samples = 0;  // n for the quadratic loss; 0 means d_0 + 2
  double data_scale = 1.0;
  // planted: Y = W X + E with rank(W) <= d, E X^T = 0
  // identity: X = Y = I (quadratic) or target I (log-cosh); needs d_0 = d_k
  DataModel data = DataModel::Generic;
  Construction construction = Construction::Generic;
  std::uint64_t seed = 0;
  Index target_rank = -1;  // r for the rank-deficient constructions; -1 draws r in [0, d-1]
};

struct Instance {
  InstanceSpec spec;
  FactorChain chain;
  std::shared_ptr<const ConvexLoss> loss;
};

namespace detail {

// Stream labels; one per independent draw.
inline constexpr std::uint64_t kStreamX = 1;
inline constexpr std::uint64_t kStreamY = 2;
inline constexpr std::uint64_t kStreamPlant = 3;
inline constexpr std::uint64_t kStreamChoice = 4;
inline constexpr std::uint64_t kStreamMix = 5;
inline constexpr std::uint64_t kStreamTarget = 6;
inline constexpr std::uint64_t kStreamPair = 7;
inline constexpr std::uint64_t kStreamLayer = 100;  // + layer index
inline constexpr std::uint64_t kStreamNull = 200;   // + layer index

inline Matrix generic_layer(std::uint64_t seed, Index i, Index rows, Index cols) {
  SplitMix64 rng = SplitMix64::stream(seed, kStreamLayer + static_cast<std::uint64_t>(i));
  return rng.normal_matrix(rows, cols, 1.0 / std::sqrt(static_cast<double>(cols)));
}

inline Matrix product_of(const std::vector<Matrix>& layers, Index lo, Index hi, Index identity) {
  if (hi < lo) return Matrix::Identity(identity, identity);
  Matrix p = layers[static_cast<std::size_t>(lo - 1)];
  for (Index i = lo + 1; i <= hi; ++i) p = layers[static_cast<std::size_t>(i - 1)] * p;
  return p;
}

/// Realizes A (d_k x d_j) and B (d_j x d_0) as M_k..M_{j+1} and M_j..M_1 with
/// random inner layers; M_k and M_1 are solved. When `mix` is set, M_k and M_1
/// also get a random component that the inner products annihilate, so A and B
/// are unchanged but M_1's rows are generic.
inline FactorChain factor_through(const DimensionSignature& dims, Index j, Matrix a, Matrix b,
                                  std::uint64_t seed, bool mix) {
  const Index k = dims.depth();
  if (j == 0) {
    a = a * b;
  } else if (j == k) {
    b = a * b;
  }
  std::vector<Matrix> layers(static_cast<std::size_t>(k));
  for (Index i = 1; i <= k; ++i) {
    layers[static_cast<std::size_t>(i - 1)] =
        generic_layer(seed, i, dims.width(i), dims.width(i - 1));
  }
  if (j < k) {
    const Matrix a1 = product_of(layers, j + 1, k - 1, dims.width(j));
    Matrix top = min_norm_right_solve(a1, a).solution;
    if (mix) {
      SplitMix64 rng = SplitMix64::stream(seed, kStreamNull + static_cast<std::uint64_t>(k));
      const Matrix z = rng.normal_matrix(top.rows(), top.cols(),
                                         1.0 / std::sqrt(static_cast<double>(top.cols())));
      top += z * complement_projector(a1);
    }
    layers[static_cast<std::size_t>(k - 1)] = top;
  }
  if (j > 0) {
    const Matrix b1 = product_of(layers, 2, j, dims.width(1));
    Matrix bottom = min_norm_right_solve(b1.transpose(), b.transpose()).solution.transpose();
    if (mix) {
      SplitMix64 rng = SplitMix64::stream(seed, kStreamNull + 1);
      const Matrix z = rng.normal_matrix(bottom.rows(), bottom.cols(),
                                         1.0 / std::sqrt(static_cast<double>(bottom.cols())));
      bottom += complement_projector(b1.transpose()) * z;
    }
    layers[0] = bottom;
  }
  return FactorChain(std::move(layers));
}

/// Random well-conditioned d x d matrix: orthogonal times diag(e^[-1/2, 1/2]).
inline Matrix random_mixing(SplitMix64& rng, Index d) {
  Eigen::HouseholderQR<Matrix> qr(rng.normal_matrix(d, d));
  Matrix q = qr.householderQ();
  for (Index i = 0; i < d; ++i) q.col(i) *= std::exp(rng.uniform() - 0.5);
  return q;
}

inline std::vector<Index> random_subset(SplitMix64& rng, Index pool, Index size) {
  std::vector<Index> idx(static_cast<std::size_t>(pool));
  std::iota(idx.begin(), idx.end(), Index{0});
  for (Index i = 0; i < size; ++i) {
    const Index pick = rng.uniform_int(i, pool - 1);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick)]);
  }
  idx.resize(static_cast<std::size_t>(size));
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline Index smallest_argmin(const DimensionSignature& dims, bool interior_only) {
  const Index d = dims.narrowest();
  const Index k = dims.depth();
  for (Index j = interior_only ? 1 : 0; j <= (interior_only ? k - 1 : k); ++j) {
    if (dims.width(j) == d) return j;
  }
  return -1;
}

[[noreturn]] inline void infeasible(const std::string& why) {
  throw Error(ErrorCode::InfeasibleConstruction, why);
}

struct QuadraticData {
  Matrix x;
  Matrix y;
};

inline QuadraticData quadratic_data(const InstanceSpec& spec) {
  const Index d0 = spec.dims.input_dim();
  const Index dk = spec.dims.output_dim();
  const Index d = spec.dims.narrowest();
  if (spec.data == DataModel::Identity) {
    if (d0 != dk) infeasible("identity data needs d_0 = d_k");
    return {Matrix::Identity(d0, d0), Matrix::Identity(dk, d0)};
  }
  const Index n = spec.samples > 0 ? spec.samples : d0 + 2;
  SplitMix64 rx = SplitMix64::stream(spec.seed, kStreamX);
  QuadraticData data;
  data.x = rx.normal_matrix(d0, n, spec.data_scale);
  SplitMix64 ry = SplitMix64::stream(spec.seed, kStreamY);
  if (spec.data == DataModel::Generic) {
    data.y = ry.normal_matrix(dk, n, spec.data_scale);
  } else {
    SplitMix64 rp = SplitMix64::stream(spec.seed, kStreamPlant);
    const Matrix w_true = rp.normal_matrix(dk, d) * rp.normal_matrix(d, d0) /
                          std::sqrt(static_cast<double>(d));
    // residual orthogonal to the row space of X
    const Matrix e = ry.normal_matrix(dk, n, spec.data_scale) *
                     complement_projector(data.x.transpose());
    data.y = w_true * data.x + e;
  }
  return data;
}

inline Index draw_rank(const InstanceSpec& spec, SplitMix64& choice) {
  const Index d = spec.dims.narrowest();
  if (spec.target_rank >= 0) {
    if (spec.target_rank >= d) infeasible("target rank must be < d = " + std::to_string(d));
    return spec.target_rank;
  }
  return choice.uniform_int(0, d - 1);
}

/// Stationary super-layer pair of the whitened quadratic problem.
inline std::pair<Matrix, Matrix> quadratic_critical_pair(const InstanceSpec& spec,
                                                         const QuadraticData& data,
                                                         SplitMix64& choice) {
  const Index d = spec.dims.narrowest();
  Whitening wh;
  try {
    wh = whiten(data.x);
  } catch (const Error& e) {
    infeasible(std::string("data cannot be whitened: ") + e.what());
  }
  const Matrix c = data.y * wh.q.transpose();
  const Index dk = c.rows();
  const Index d0 = c.cols();
  Eigen::JacobiSVD<Matrix> svd(c, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vector& sigma = svd.singularValues();
  const Index s = numerical_rank(c);

  std::vector<Index> keep;
  Index pad_a = 0;
  Index pad_b = 0;
  if (spec.construction == Construction::FullRankCritical) {
    if (s <= d) {
      infeasible("full_rank_critical needs rank(C) > d; rank(C) = " + std::to_string(s));
    }
    keep = random_subset(choice, s, d);
    bool top = true;
    for (Index t = 0; t < d; ++t) top = top && keep[static_cast<std::size_t>(t)] == t;
    if (top) keep.back() = choice.uniform_int(d, s - 1);  // any non-top subset is non-optimal
  } else {
    const Index r = draw_rank(spec, choice);
    if (s <= r) infeasible("rank(C) = " + std::to_string(s) + " leaves f'(W) = 0 at rank r");
    keep = random_subset(choice, s, r);
    // Optionally complete one super-layer to full rank with null directions of C.
    const bool can_a = dk - s >= d - r;
    const bool can_b = d0 - s >= d - r;
    const Index option = choice.uniform_int(0, 2);
    if (option == 1 && can_a) pad_a = d - r;
    if (option == 2 && can_b) pad_b = d - r;
  }
  const Index r = static_cast<Index>(keep.size());
  Matrix a = Matrix::Zero(dk, d);
  Matrix b_white = Matrix::Zero(d, d0);
  for (Index t = 0; t < r; ++t) {
    const Index idx = keep[static_cast<std::size_t>(t)];
    const double root = std::sqrt(sigma(idx));
    a.col(t) = root * svd.matrixU().col(idx);
    b_white.row(t) = root * svd.matrixV().col(idx).transpose();
  }
  for (Index t = 0; t < pad_a; ++t) a.col(r + t) = svd.matrixU().col(s + t);
  for (Index t = 0; t < pad_b; ++t) b_white.row(r + t) = svd.matrixV().col(s + t).transpose();
  // B = B' R^{-1}  <=>  R^T B^T = B'^T
  const Matrix b = wh.r.transpose()
                       .triangularView<Eigen::Upper>()
                       .solve(b_white.transpose())
                       .transpose();
  return {a, b};
}

/// Log-cosh: draw (A, B) with the requested ranks, then a gradient G with
/// A^T G = 0 and G B^T = 0 and |G_ij| <= 1/2, and set T = AB - atanh(G).
inline std::pair<std::pair<Matrix, Matrix>, Matrix> logcosh_critical(const InstanceSpec& spec,
                                                                     SplitMix64& choice) {
  const Index d = spec.dims.narrowest();
  const Index dk = spec.dims.output_dim();
  const Index d0 = spec.dims.input_dim();
  Index rank_a = d;
  Index rank_b = d;
  if (spec.construction == Construction::RankDeficientPlateau) {
    const Index r = draw_rank(spec, choice);
    const Index option = choice.uniform_int(0, 2);
    rank_a = option == 1 ? d : r;
    rank_b = option == 2 ? d : r;
  } else if (dk <= d || d0 <= d) {
    infeasible("full_rank_critical with log-cosh needs d_0 > d and d_k > d");
  }
  SplitMix64 rp = SplitMix64::stream(spec.seed, kStreamPair);
  const double scale = std::sqrt(spec.data_scale);
  Matrix a = Matrix::Zero(dk, d);
  Matrix b = Matrix::Zero(d, d0);
  a.leftCols(rank_a) = rp.normal_matrix(dk, rank_a, scale);
  b.topRows(rank_b) = rp.normal_matrix(rank_b, d0, scale);
  SplitMix64 rt = SplitMix64::stream(spec.seed, kStreamTarget);
  Matrix g = complement_projector(a) * rt.normal_matrix(dk, d0) *
             complement_projector(b.transpose());
  const double peak = g.cwiseAbs().maxCoeff();
  if (!(peak > 1e-8)) infeasible("no room for a nonzero gradient orthogonal to A and B");
  g *= 0.5 / peak;
  const Matrix target = a * b - g.array().atanh().matrix();
  return {{a, b}, target};
}

}  // namespace detail

/// Deterministic in `spec`: equal specs give bitwise-identical instances.
inline Instance gen_instance(const InstanceSpec& spec) {
  using namespace detail;
  const DimensionSignature& dims = spec.dims;
  const Index d = dims.narrowest();
  const Index d0 = dims.input_dim();
  const Index dk = dims.output_dim();
  const Index k = dims.depth();
  if (!(spec.data_scale > 0.0) || !std::isfinite(spec.data_scale)) {
    throw Error(ErrorCode::InvalidArgument, "data_scale must be positive");
  }
  SplitMix64 choice = SplitMix64::stream(spec.seed, kStreamChoice);
  const Index j_interior = smallest_argmin(dims, true);
  const bool needs_split = spec.construction == Construction::RankDeficient ||
                           spec.construction == Construction::RankDeficientPlateau ||
                           spec.construction == Construction::FullRankCritical;
  if (needs_split && j_interior < 0) {
    infeasible(std::string(to_string(spec.construction)) + " needs an interior minimum-width layer");
  }

  Instance out;
  out.spec = spec;
  std::optional<QuadraticData> qdata;
  Matrix target;
  if (spec.loss == LossKind::Quadratic) {
    qdata = quadratic_data(spec);
  } else if (spec.data == DataModel::Identity) {
    if (d0 != dk) infeasible("identity data needs d_0 = d_k");
    target = Matrix::Identity(dk, d0);
  } else if (spec.construction == Construction::FactoredGlobal || spec.data == DataModel::Planted) {
    SplitMix64 rp = SplitMix64::stream(spec.seed, kStreamPlant);
    target = rp.normal_matrix(dk, d, spec.data_scale) * rp.normal_matrix(d, d0) /
             std::sqrt(static_cast<double>(d));
  } else {
    target = SplitMix64::stream(spec.seed, kStreamTarget).normal_matrix(dk, d0, spec.data_scale);
  }

  const bool mix = choice.uniform_int(0, 1) == 1;
  switch (spec.construction) {
    case Construction::Generic: {
      std::vector<Matrix> layers;
      for (Index i = 1; i <= k; ++i) layers.push_back(generic_layer(spec.seed, i, dims.width(i), dims.width(i - 1)));
      out.chain = FactorChain(std::move(layers));
      break;
    }
    case Construction::RankDeficient: {
      std::vector<Matrix> layers;
      for (Index i = 1; i <= k; ++i) layers.push_back(generic_layer(spec.seed, i, dims.width(i), dims.width(i - 1)));
      const Index r = draw_rank(spec, choice);
      const Index rows = dims.width(j_interior + 1);
      SplitMix64 rl = SplitMix64::stream(spec.seed, kStreamPair);
      Matrix thin = Matrix::Zero(rows, d);
      if (r > 0) {
        thin = rl.normal_matrix(rows, r) * rl.normal_matrix(r, d) / std::sqrt(static_cast<double>(d * r));
      }
      layers[static_cast<std::size_t>(j_interior)] = thin;
      out.chain = FactorChain(std::move(layers));
      break;
    }
    case Construction::RankDeficientPlateau:
    case Construction::FullRankCritical: {
      std::pair<Matrix, Matrix> pair;
      if (spec.loss == LossKind::Quadratic) {
        pair = quadratic_critical_pair(spec, *qdata, choice);
      } else {
        auto [ab, t] = logcosh_critical(spec, choice);
        pair = std::move(ab);
        target = std::move(t);
      }
      SplitMix64 rm = SplitMix64::stream(spec.seed, kStreamMix);
      const Matrix t = random_mixing(rm, d);
      const Matrix a = pair.first * t;
      const Matrix b = t.partialPivLu().solve(pair.second);
      out.chain = factor_through(dims, j_interior, a, b, spec.seed, mix);
      break;
    }
    case Construction::FactoredGlobal: {
      Matrix w_star;
      if (spec.loss == LossKind::Quadratic) {
        try {
          w_star = rrr_oracle(qdata->x, qdata->y, d).w;
        } catch (const Error& e) {
          infeasible(std::string("oracle unavailable: ") + e.what());
        }
      } else {
        w_star = target;
      }
      Eigen::JacobiSVD<Matrix> svd(w_star, Eigen::ComputeThinU | Eigen::ComputeThinV);
      const Index r = std::min<Index>(d, svd.singularValues().size());
      Matrix a = Matrix::Zero(dk, d);
      Matrix b = Matrix::Zero(d, d0);
      for (Index t = 0; t < r; ++t) {
        const double root = std::sqrt(svd.singularValues()(t));
        a.col(t) = root * svd.matrixU().col(t);
        b.row(t) = root * svd.matrixV().col(t).transpose();
      }
      out.chain = factor_through(dims, smallest_argmin(dims, false), a, b, spec.seed, mix);
      break;
    }
  }

  if (spec.loss == LossKind::Quadratic) {
    out.loss = std::make_shared<QuadraticLoss>(qdata->x, qdata->y);
  } else {
    out.loss = std::make_shared<LogCoshLoss>(target);
  }
  if (spec.construction != Construction::Generic &&
      spec.construction != Construction::RankDeficient) {
    // Ill-conditioned draws (whitening, pseudo-inverse factoring) can leave
    // rounding residue in the layer gradients well above the critical level.
    const double residue = max_norm(layer_gradients(out.chain, *out.loss));
    if (residue > 0.1 * kDefaultGradTol) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.3e", residue);
      infeasible(std::string("construction is not critical after rounding: max layer gradient ") +
                 buf);
    }
  }
  return out;
}

/// Random dims with an interior bottleneck: k in [2, 5], d in [1, 3],
/// d_0, d_k in [d+1, 8], other widths in [d, 8].
inline DimensionSignature random_bottleneck_dims(SplitMix64& rng) {
  const Index k = rng.uniform_int(2, 5);
  const Index d = rng.uniform_int(1, 3);
  const Index j = rng.uniform_int(1, k - 1);
  std::vector<Index> w(static_cast<std::size_t>(k + 1));
  for (Index i = 0; i <= k; ++i) {
    w[static_cast<std::size_t>(i)] = (i == 0 || i == k) ? rng.uniform_int(d + 1, 8)
                                                         : rng.uniform_int(d, 8);
  }
  w[static_cast<std::size_t>(j)] = d;
  return DimensionSignature(std::move(w));
}

/// Random dims with k in [2, 5] and widths in [1, 8], no structure imposed.
inline DimensionSignature random_dims(SplitMix64& rng) {
  const Index k = rng.uniform_int(2, 5);
  std::vector<Index> w(static_cast<std::size_t>(k + 1));
  for (Index& x : w) x = rng.uniform_int(1, 8);
  return DimensionSignature(std::move(w));
}

}  // namespace dlnet
