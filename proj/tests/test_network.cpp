#include <cmath>

#include <gtest/gtest.h>

#include "dlnet/network.hpp"
#include "dlnet/oracle.hpp"
#include "dlnet/rng.hpp"

using namespace dlnet;

namespace {

Matrix mat(Index rows, Index cols, std::initializer_list<double> values) {
  Matrix m(rows, cols);
  auto it = values.begin();
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = *it++;
  return m;
}

Matrix scalar(double x) { return Matrix::Constant(1, 1, x); }

FactorChain random_chain(SplitMix64& rng, const std::vector<Index>& dims) {
  std::vector<Matrix> layers;
  for (std::size_t i = 1; i < dims.size(); ++i) layers.push_back(rng.normal_matrix(dims[i], dims[i - 1]));
  return FactorChain(std::move(layers));
}

}  // namespace

TEST(FactorChain, RejectsIncompatibleShapes) {
  try {
    FactorChain({Matrix::Ones(2, 3), Matrix::Ones(2, 3)});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
  }
}

TEST(FactorChain, RejectsSingleLayerAndNonFinite) {
  EXPECT_THROW(FactorChain({Matrix::Ones(2, 2)}), Error);
  Matrix bad = Matrix::Ones(2, 2);
  bad(0, 1) = std::nan("");
  EXPECT_THROW(FactorChain({bad, Matrix::Ones(2, 2)}), Error);
}

TEST(FactorChain, DimsFollowLayers) {
  const FactorChain c({Matrix::Zero(3, 2), Matrix::Zero(1, 3), Matrix::Zero(4, 1)});
  EXPECT_EQ(c.dims().widths(), (std::vector<Index>{2, 3, 1, 4}));
  EXPECT_EQ(c.depth(), 3);
  EXPECT_EQ(c.dims().narrowest(), 1);
}

TEST(PartialProduct, SmallChain) {
  const FactorChain c({mat(1, 2, {1, 0}), scalar(2), mat(2, 1, {1, 3})});
  EXPECT_EQ(partial_product(c, 1, 3), mat(2, 2, {2, 0, 6, 0}));
  EXPECT_EQ(end_to_end(c), mat(2, 2, {2, 0, 6, 0}));
}

TEST(PartialProduct, EmptyRangeIsIdentity) {
  const FactorChain c({mat(1, 2, {1, 0}), scalar(2), mat(2, 1, {1, 3})});
  EXPECT_EQ(partial_product(c, 2, 1), Matrix::Identity(1, 1));
  EXPECT_EQ(partial_product(c, 1, 0), Matrix::Identity(2, 2));
  EXPECT_THROW(partial_product(c, 3, 1), Error);
}

TEST(PartialProduct, Scalars) {
  const FactorChain c({scalar(2), scalar(3), scalar(4)});
  EXPECT_EQ(end_to_end(c), scalar(24));
}

TEST(Loss, ZeroChainAgainstIdentityData) {
  const FactorChain c({Matrix::Zero(1, 2), Matrix::Zero(1, 1), mat(2, 1, {1, 0})});
  const QuadraticLoss f(Matrix::Identity(2, 2), Matrix::Identity(2, 2));
  EXPECT_DOUBLE_EQ(loss(c, f), 2.0);
}

TEST(Loss, IncompatibleLossIsRejected) {
  const FactorChain c({Matrix::Zero(1, 2), Matrix::Zero(3, 1)});
  const QuadraticLoss f(Matrix::Identity(2, 2), Matrix::Identity(2, 2));
  EXPECT_THROW(loss(c, f), Error);
}

TEST(LogCosh, StableForLargeResiduals) {
  const LogCoshLoss f(Matrix::Zero(1, 1));
  EXPECT_NEAR(f.value(scalar(800.0)), 800.0 - std::log(2.0), 1e-9);
  EXPECT_NEAR(f.gradient(scalar(800.0))(0, 0), 1.0, 1e-15);
  EXPECT_DOUBLE_EQ(f.value(scalar(0.0)), 0.0);
}

TEST(Convexity, SampledMidpoints) {
  SplitMix64 rng(5);
  const QuadraticLoss q(rng.normal_matrix(3, 5), rng.normal_matrix(2, 5));
  const LogCoshLoss lc(rng.normal_matrix(2, 3));
  for (const ConvexLoss* f : {static_cast<const ConvexLoss*>(&q), static_cast<const ConvexLoss*>(&lc)}) {
    for (int t = 0; t < 200; ++t) {
      const Matrix a = rng.normal_matrix(2, 3, 3.0);
      const Matrix b = rng.normal_matrix(2, 3, 3.0);
      const double mid = f->value(0.5 * (a + b));
      const double avg = 0.5 * (f->value(a) + f->value(b));
      EXPECT_LE(mid, avg + 1e-12 * (1.0 + std::abs(avg))) << f->kind();
    }
  }
}

TEST(LayerGradients, ScalarToyIsExact) {
  // L(a, b) = (b a)^2, dL/da = 2 a b^2, dL/db = 2 a^2 b.
  const FactorChain c({scalar(1.5), scalar(0.5)});
  const QuadraticLoss f(scalar(1.0), scalar(0.0));
  const auto g = layer_gradients(c, f);
  EXPECT_DOUBLE_EQ(g[0](0, 0), 0.75);
  EXPECT_DOUBLE_EQ(g[1](0, 0), 2.25);
  EXPECT_NEAR(finite_diff_gradient(c, f, 1)(0, 0), 0.75, 1e-10);
  EXPECT_NEAR(finite_diff_gradient(c, f, 2)(0, 0), 2.25, 1e-10);
}

TEST(LayerGradients, MatchFiniteDifferences) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    SplitMix64 rng = SplitMix64::stream(31, s);
    const FactorChain c = random_chain(rng, {3, 2, 4, 2});
    const QuadraticLoss q(rng.normal_matrix(3, 6), rng.normal_matrix(2, 6));
    const LogCoshLoss lc(rng.normal_matrix(2, 3));
    for (const ConvexLoss* f : {static_cast<const ConvexLoss*>(&q), static_cast<const ConvexLoss*>(&lc)}) {
      const auto g = layer_gradients(c, *f);
      for (Index i = 1; i <= c.depth(); ++i) {
        const Matrix fd = finite_diff_gradient(c, *f, i);
        EXPECT_LE((g[std::size_t(i - 1)] - fd).norm(), std::max(1e-5 * fd.norm(), 1e-8));
      }
    }
  }
}

TEST(FiniteDiff, OversizedStepIsVisiblyWrong) {
  const FactorChain c({scalar(1.0), scalar(1.0)});
  const LogCoshLoss f(scalar(0.0));
  const double exact = layer_gradients(c, f)[0](0, 0);
  EXPECT_GT(std::abs(finite_diff_gradient(c, f, 1, 1.0)(0, 0) - exact), 1e-2);
  EXPECT_THROW(finite_diff_gradient(c, f, 1, 0.0), Error);
}

TEST(Bottleneck, SmallestInteriorMinimum) {
  SplitMix64 rng(9);
  const auto split = bottleneck_split(random_chain(rng, {2, 3, 1, 4, 2}));
  ASSERT_TRUE(split);
  EXPECT_EQ(split->j, 2);
  EXPECT_EQ(split->width, 1);
  EXPECT_EQ(split->upper.rows(), 2);
  EXPECT_EQ(split->lower.cols(), 2);

  const auto tie = bottleneck_split(random_chain(rng, {3, 1, 1, 3}));
  ASSERT_TRUE(tie);
  EXPECT_EQ(tie->j, 1);
}

TEST(Bottleneck, NoneWhenOnlyBoundaryIsNarrowest) {
  SplitMix64 rng(9);
  EXPECT_FALSE(bottleneck_split(random_chain(rng, {1, 3, 3})));
}

TEST(Bottleneck, FactorsReproduceTheProduct) {
  SplitMix64 rng(13);
  const FactorChain c = random_chain(rng, {3, 4, 2, 5, 2, 3});
  const auto s = bottleneck_split(c);
  ASSERT_TRUE(s);
  EXPECT_LE((s->upper * s->lower - end_to_end(c)).norm(), 1e-12 * end_to_end(c).norm());
  EXPECT_LE((c.layer(c.depth()) * s->upper_inner - s->upper).norm(), 1e-12 * s->upper.norm());
  EXPECT_LE((s->lower_inner * c.layer(1) - s->lower).norm(), 1e-12 * s->lower.norm());
  EXPECT_EQ(s->rank_upper(), 2);
  EXPECT_EQ(s->rank_lower(), 2);
}

TEST(TransposeChain, ProductIsTransposed) {
  SplitMix64 rng(17);
  const FactorChain c = random_chain(rng, {3, 2, 4});
  const FactorChain t = transpose_chain(c);
  EXPECT_LE((end_to_end(t) - end_to_end(c).transpose()).norm(), 1e-14);
  const QuadraticLoss f(rng.normal_matrix(3, 5), rng.normal_matrix(4, 5));
  const TransposedLoss g(f);
  EXPECT_NEAR(loss(t, g), loss(c, f), 1e-12 * loss(c, f));
}
