#include <cmath>

#include <gtest/gtest.h>

#include "dlnet/instance.hpp"
#include "dlnet/perturbation.hpp"

using namespace dlnet;

namespace {

Matrix mat(Index rows, Index cols, std::initializer_list<double> values) {
  Matrix m(rows, cols);
  auto it = values.begin();
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = *it++;
  return m;
}

// Zero lower layers under a rank-one top layer; data X = Y = I.
FactorChain e1() { return FactorChain({Matrix::Zero(1, 2), Matrix::Zero(1, 1), mat(2, 1, {1, 0})}); }

const QuadraticLoss& identity_loss(Index n) {
  static const QuadraticLoss two(Matrix::Identity(2, 2), Matrix::Identity(2, 2));
  static const QuadraticLoss three(Matrix::Identity(3, 3), Matrix::Identity(3, 3));
  return n == 2 ? two : three;
}

Instance draw(Construction c, LossKind loss, std::uint64_t seed) {
  InstanceSpec spec;
  spec.dims = DimensionSignature({4, 3, 2, 3, 4});
  spec.loss = loss;
  spec.construction = c;
  spec.seed = seed;
  return gen_instance(spec);
}

}  // namespace

TEST(SubspaceMembership, Basics) {
  const Matrix g = mat(2, 2, {1, 0, 0, 0});
  EXPECT_TRUE(subspace_membership(Vector::Unit(2, 1), g));
  EXPECT_FALSE(subspace_membership(Vector::Unit(2, 0), g));
  EXPECT_TRUE(subspace_membership(Vector::Zero(2), g));
  EXPECT_THROW(subspace_membership(Vector::Zero(3), g), Error);
}

TEST(KernelFamily, AnnihilatedByUpperProducts) {
  const Instance inst = draw(Construction::RankDeficient, LossKind::Quadratic, 3);
  const auto split = bottleneck_split(inst.chain);
  ASSERT_TRUE(split);
  if (split->rank_upper() == split->width) GTEST_SKIP() << "drew a full-rank upper side";
  const auto ws = kernel_family(inst.chain, *split);
  ASSERT_EQ(Index(ws.size()), split->j);
  for (Index i = 1; i <= split->j; ++i) {
    const Matrix left = partial_product(inst.chain, i + 1, inst.chain.depth());
    const Vector& w = ws[std::size_t(i - 1)];
    EXPECT_NEAR(w.norm(), 1.0, 1e-14);
    EXPECT_LE((left * w).norm(), 1e-9 * (1.0 + left.norm()));
  }
}

TEST(KernelFamily, FullRankUpperSideThrows) {
  SplitMix64 rng(2);
  const FactorChain deep({rng.normal_matrix(1, 3), rng.normal_matrix(3, 1)});
  try {
    kernel_family(deep, *bottleneck_split(deep));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::FullRankA);
  }
}

TEST(InvariantFamily, LossAndProductUnchangedAtAnyScale) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Instance inst = draw(Construction::RankDeficient, s % 2 ? LossKind::LogCosh : LossKind::Quadratic, s);
    const auto split = bottleneck_split(inst.chain);
    if (split->rank_upper() == split->width) continue;
    const double base = loss(inst.chain, *inst.loss);
    for (double delta : {1e-3, 0.1, 10.0}) {
      const FactorChain moved = apply_family(inst.chain, random_family(inst.chain, *split, delta, s));
      EXPECT_LE(std::abs(loss(moved, *inst.loss) - base), 1e-9 * (1.0 + std::abs(base)));
      EXPECT_LE((end_to_end(moved) - end_to_end(inst.chain)).norm(),
                1e-9 * (1.0 + end_to_end(inst.chain).norm()));
    }
  }
}

TEST(InvariantFamily, ApplyRejectsBadShapes) {
  InvariantFamily f;
  f.perturbations.push_back({1, Vector::Ones(2), Vector::Ones(2)});
  EXPECT_THROW(apply_family(e1(), f), Error);
  f.perturbations[0].layer = 7;
  EXPECT_THROW(apply_family(e1(), f), Error);
}

TEST(Escape, E1UsesTheLargestGradientRow) {
  const FactorChain c = e1();
  const auto split = bottleneck_split(c);
  ASSERT_TRUE(split);
  EXPECT_EQ(split->j, 1);
  const double delta = 1e-3;
  const EscapeCertificate cert = escape_construction(c, identity_loss(2), *split, delta);
  EXPECT_EQ(cert.side, Side::Lower);
  EXPECT_EQ(cert.i_star, 1);
  ASSERT_EQ(cert.family.perturbations.size(), 1u);
  const RankOnePerturbation& p = cert.family.perturbations[0];
  EXPECT_EQ(p.layer, 1);
  EXPECT_NEAR(p.w(0), 1.0, 1e-15);
  EXPECT_NEAR(p.v(0), delta, 1e-18);
  EXPECT_NEAR(p.v(1), 0.0, 1e-18);
  EXPECT_EQ(cert.witness_row, 1);
  EXPECT_NEAR(cert.super_gradient_norm, 2.0 * delta, 1e-15);
  EXPECT_EQ(cert.loss_delta, 0.0);
  EXPECT_DOUBLE_EQ(cert.original_loss, 2.0);
}

TEST(Escape, LaterLayerCarriesThePerturbation) {
  // M_1 already leaves V; M_2 folds it back, so layer 2 is the one perturbed
  // and layer 1 stays put.
  const FactorChain c({mat(2, 3, {1, 0, 0, 0, 1, 0}), Matrix::Zero(1, 2), Matrix::Zero(3, 1)});
  const auto split = bottleneck_split(c);
  ASSERT_TRUE(split);
  EXPECT_EQ(split->j, 2);
  const double delta = default_delta(c);
  const EscapeCertificate cert = escape_construction(c, identity_loss(3), *split, delta);
  EXPECT_EQ(cert.i_star, 2);
  ASSERT_EQ(cert.family.perturbations.size(), 1u);
  EXPECT_EQ(cert.family.perturbations[0].layer, 2);
  EXPECT_EQ(cert.perturbed_chain.layer(1), c.layer(1));
  EXPECT_NEAR(cert.super_gradient_norm, 2.0 * delta, 1e-15);
  EXPECT_EQ(cert.loss_delta, 0.0);
}

TEST(Escape, UpperSideMirror) {
  const FactorChain c = e1();
  const auto split = bottleneck_split(c);
  const EscapeCertificate cert = escape_construction_upper(c, identity_loss(2), *split, 1e-3);
  EXPECT_EQ(cert.side, Side::Upper);
  for (const RankOnePerturbation& p : cert.family.perturbations) {
    EXPECT_GT(p.layer, split->j);
  }
  const Matrix a = partial_product(cert.perturbed_chain, split->j + 1, c.depth());
  const Matrix g = identity_loss(2).gradient(end_to_end(c));
  EXPECT_GT((a.transpose() * g).norm(), 1e-8);
  EXPECT_LE(std::abs(cert.loss_delta), 1e-12);
}

TEST(Escape, GloballyOptimalPointIsRejected) {
  const FactorChain narrow({mat(1, 2, {1, 0}), Matrix::Zero(1, 1), mat(2, 1, {1, 0})});
  const QuadraticLoss f(Matrix::Identity(2, 2), Matrix::Zero(2, 2));
  try {
    escape_construction(narrow, f, *bottleneck_split(narrow), 1e-3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::GradientVanishes);
  }
}

TEST(Escape, BadDeltaIsRejected) {
  const FactorChain c = e1();
  EXPECT_THROW(escape_construction(c, identity_loss(2), *bottleneck_split(c), 0.0), Error);
  EXPECT_THROW(escape_construction(c, identity_loss(2), *bottleneck_split(c), std::nan("")), Error);
}

TEST(Lift, UpperUpdateSolvesAgainstInnerProduct) {
  const FactorChain c({mat(1, 2, {0.3, -0.2}), mat(2, 1, {1, 0}), mat(2, 2, {0.5, 0.1, -0.4, 0.7})});
  const auto split = bottleneck_split(c);
  ASSERT_TRUE(split);
  EXPECT_EQ(split->j, 1);
  const Matrix d = mat(2, 1, {0.1, 0.2});
  const Lift lift = lift_perturbation(c, *split, d, Side::Upper);
  EXPECT_EQ(lift.layer, 3);
  EXPECT_TRUE(lift.update.isApprox(mat(2, 2, {0.1, 0, 0.2, 0}), 1e-15));
  EXPECT_NEAR(lift.amplification, 1.0, 1e-15);
  FactorChain moved = c;
  moved.set_layer(3, c.layer(3) + lift.update);
  const auto after = bottleneck_split(moved);
  EXPECT_LE((after->upper - split->upper - d).norm(), 1e-15);
}

TEST(Lift, LowerUpdateSolvesAgainstInnerProduct) {
  SplitMix64 rng(4);
  const FactorChain c({rng.normal_matrix(3, 2), rng.normal_matrix(2, 3), rng.normal_matrix(3, 2)});
  const auto split = bottleneck_split(c);
  const Matrix d = rng.normal_matrix(2, 2);
  const Lift lift = lift_perturbation(c, *split, d, Side::Lower);
  EXPECT_EQ(lift.layer, 1);
  FactorChain moved = c;
  moved.set_layer(1, c.layer(1) + lift.update);
  EXPECT_LE((bottleneck_split(moved)->lower - split->lower - d).norm(), 1e-12 * (1.0 + d.norm()));
}

TEST(Lift, RankDeficientInnerProduct) {
  const FactorChain c({mat(1, 2, {1, 1}), Matrix::Zero(2, 1), Matrix::Identity(2, 2)});
  try {
    lift_perturbation(c, *bottleneck_split(c), Matrix::Ones(2, 1), Side::Upper);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::RankDeficientLift);
  }
}

TEST(Lift, ShapeChecked) {
  const FactorChain c = e1();
  EXPECT_THROW(lift_perturbation(c, *bottleneck_split(c), Matrix::Ones(3, 1), Side::Upper), Error);
}
