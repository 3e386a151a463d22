#include <cmath>

#include <gtest/gtest.h>

#include "dlnet/analyzer.hpp"
#include "dlnet/instance.hpp"
#include "dlnet/train.hpp"

using namespace dlnet;

namespace {

FactorChain e1() {
  Matrix top = Matrix::Zero(2, 1);
  top(0, 0) = 1.0;
  return FactorChain({Matrix::Zero(1, 2), Matrix::Zero(1, 1), top});
}

const QuadraticLoss identity_data(Matrix::Identity(2, 2), Matrix::Identity(2, 2));

Instance make(const std::vector<Index>& dims, Construction c, LossKind loss, std::uint64_t seed,
              DataModel data = DataModel::Generic) {
  InstanceSpec spec;
  spec.dims = DimensionSignature(dims);
  spec.construction = c;
  spec.loss = loss;
  spec.seed = seed;
  spec.data = data;
  return gen_instance(spec);
}

}  // namespace

TEST(Classify, GenericPointIsNotCritical) {
  const Instance inst = make({3, 2, 1, 2, 3}, Construction::Generic, LossKind::Quadratic, 1);
  const auto rep = classify(inst.chain, *inst.loss);
  EXPECT_EQ(rep.label, Label::NotCritical);
  EXPECT_GT(rep.max_layer_grad(), kDefaultGradTol);
  EXPECT_EQ(rep.layer_grad_norms.size(), 4u);
}

TEST(Classify, E1IsAnEscapablePlateau) {
  const auto rep = classify(e1(), identity_data);
  EXPECT_EQ(rep.label, Label::EscapablePlateau);
  EXPECT_DOUBLE_EQ(rep.loss, 2.0);
  EXPECT_EQ(rep.split_index, 1);
  EXPECT_EQ(rep.rank_a, 0);
  EXPECT_EQ(rep.rank_b, 0);
  ASSERT_TRUE(rep.escape);
  EXPECT_EQ(rep.escape->i_star, 1);
  ASSERT_TRUE(rep.oracle_gap);
  EXPECT_NEAR(*rep.oracle_gap, 1.0, 1e-12);
}

TEST(Classify, PlantedFactorizationIsGloballyCertified) {
  const Instance inst = make({2, 3, 1, 4, 2}, Construction::FactoredGlobal, LossKind::Quadratic, 5,
                             DataModel::Planted);
  const auto rep = classify(inst.chain, *inst.loss);
  EXPECT_EQ(rep.label, Label::GlobalCertified);
  ASSERT_TRUE(rep.oracle_gap);
  EXPECT_LE(std::abs(*rep.oracle_gap), 1e-8);
  EXPECT_TRUE(global_certificate(inst.chain, *inst.loss));
}

TEST(Classify, FullRankCriticalReduces) {
  const Instance inst = make({4, 3, 2, 3, 4}, Construction::FullRankCritical, LossKind::Quadratic, 7);
  const auto rep = classify(inst.chain, *inst.loss);
  ASSERT_EQ(rep.label, Label::ReducibleFullRank);
  const auto [a, b] = two_layer_reduction(inst.chain, *inst.loss);
  const Matrix g = inst.loss->gradient(a * b);
  EXPECT_LE((g * b.transpose()).norm(), kDefaultGradTol);
  EXPECT_LE((a.transpose() * g).norm(), kDefaultGradTol);
}

TEST(Classify, ReductionRefusesOtherLabels) {
  try {
    two_layer_reduction(e1(), identity_data);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::WrongClassification);
  }
}

TEST(Classify, PlateauConstructionsEscape) {
  for (std::uint64_t s = 0; s < 12; ++s) {
    const LossKind kind = s % 3 == 2 ? LossKind::LogCosh : LossKind::Quadratic;
    Instance inst;
    try {
      inst = make({4, 3, 2, 3, 4}, Construction::RankDeficientPlateau, kind, s);
    } catch (const Error& e) {
      ASSERT_EQ(e.code(), ErrorCode::InfeasibleConstruction);
      continue;
    }
    const auto rep = classify(inst.chain, *inst.loss);
    ASSERT_EQ(rep.label, Label::EscapablePlateau) << "seed " << s;
    ASSERT_TRUE(rep.escape) << "seed " << s;
    EXPECT_GT(rep.escape->super_gradient_norm, kDefaultGradTol);
    EXPECT_LE(std::abs(rep.escape->loss_delta), 1e-9 * (1.0 + std::abs(rep.loss)));
  }
}

TEST(Classify, CriticalWithoutBottleneck) {
  // Widths [1, 2, 1]: the minimum sits only on the boundary.
  const FactorChain c({Matrix::Zero(2, 1), Matrix::Zero(1, 2)});
  const QuadraticLoss f(Matrix::Ones(1, 1), Matrix::Ones(1, 1));
  const auto rep = classify(c, f);
  EXPECT_EQ(rep.label, Label::CriticalNoBottleneck);
  EXPECT_EQ(rep.split_index, 0);
  EXPECT_THROW(super_gradients(c, f), Error);
}

TEST(SuperGradients, MatchTheSplit) {
  SplitMix64 rng(8);
  const FactorChain c({rng.normal_matrix(2, 3), rng.normal_matrix(1, 2), rng.normal_matrix(3, 1)});
  const QuadraticLoss f(rng.normal_matrix(3, 4), rng.normal_matrix(3, 4));
  const auto [ga, gb] = super_gradients(c, f);
  const Matrix g = f.gradient(end_to_end(c));
  EXPECT_LE((ga - g * partial_product(c, 1, 2).transpose()).norm(), 1e-12 * (1.0 + ga.norm()));
  EXPECT_LE((gb - partial_product(c, 3, 3).transpose() * g).norm(), 1e-12 * (1.0 + gb.norm()));
}

TEST(Descent, E1ReachesLowerLoss) {
  const FactorChain c = e1();
  const auto rep = classify(c, identity_data);
  const DescentOutcome out = descent_search(c, identity_data, rep);
  EXPECT_TRUE(out.found) << out.diagnostics;
  EXPECT_LT(out.final_loss, 2.0 - 1e-6);
  EXPECT_GE(out.final_loss, 1.0 - 1e-9);
  EXPECT_EQ(out.loss_trace.front(), 2.0);
}

TEST(Descent, ZeroBudgetFindsNothing) {
  const FactorChain c = e1();
  const auto rep = classify(c, identity_data);
  DescentConfig cfg;
  cfg.budget = 0;
  const DescentOutcome out = descent_search(c, identity_data, rep, cfg);
  EXPECT_FALSE(out.found);
  EXPECT_EQ(out.steps, 0);
}

TEST(Descent, RequiresAPlateauReport) {
  const Instance inst = make({3, 2, 1, 2, 3}, Construction::Generic, LossKind::Quadratic, 1);
  const auto rep = classify(inst.chain, *inst.loss);
  EXPECT_THROW(descent_search(inst.chain, *inst.loss, rep), Error);
}

TEST(Train, StallsAtE1) {
  const TrainResult r = train_gd(e1(), identity_data);
  EXPECT_EQ(r.trajectory.status, TrainStatus::StalledCritical);
  ASSERT_EQ(r.trajectory.records.size(), 1u);
  EXPECT_EQ(r.trajectory.records[0].rank_a, 0);
  EXPECT_EQ(r.trajectory.records[0].rank_b, 0);
}

TEST(Train, StopsImmediatelyAtAGlobalFactorization) {
  const Instance inst = make({2, 3, 1, 4, 2}, Construction::FactoredGlobal, LossKind::Quadratic, 5,
                             DataModel::Planted);
  const TrainResult r = train_gd(inst.chain, *inst.loss);
  EXPECT_EQ(r.trajectory.status, TrainStatus::Converged);
  ASSERT_EQ(r.trajectory.records.size(), 1u);
  EXPECT_EQ(r.trajectory.records[0].step, 0);
}

TEST(Train, LossIsMonotoneAndApproachesTheOracle) {
  const Instance inst = make({3, 4, 2, 4, 3}, Construction::Generic, LossKind::Quadratic, 11);
  TrainConfig cfg;
  cfg.max_steps = 20000;
  cfg.stop_grad_tol = 1e-9;
  const TrainResult r = train_gd(inst.chain, *inst.loss, cfg);
  const auto& rec = r.trajectory.records;
  for (std::size_t i = 1; i < rec.size(); ++i) EXPECT_LE(rec[i].loss, rec[i - 1].loss);
  const auto* q = dynamic_cast<const QuadraticLoss*>(inst.loss.get());
  const double star = rrr_oracle(*q, 2).loss;
  EXPECT_GE(rec.back().loss, star - 1e-9 * (1.0 + star));
  EXPECT_LE(rec.back().loss - star, 1e-5 * std::max(star, 1.0));
}

TEST(Train, ZeroStepBudget) {
  const Instance inst = make({3, 2, 1, 2, 3}, Construction::Generic, LossKind::Quadratic, 1);
  TrainConfig cfg;
  cfg.max_steps = 0;
  const TrainResult r = train_gd(inst.chain, *inst.loss, cfg);
  EXPECT_EQ(r.trajectory.status, TrainStatus::BudgetExhausted);
  EXPECT_EQ(r.trajectory.records.size(), 1u);
}
