#include "dhn/losses.hpp"
#include "dhn/ops.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

namespace {

using namespace dhn;

double global_value(std::vector<double> p, std::vector<int> y, double a1 = 0.69, double a2 = 1.76) {
  const auto n = static_cast<Index>(p.size());
  return global_loss(Tensor({n}, Buffer::Map(p.data(), n)), y, a1, a2).item();
}

TEST(GlobalLoss, HandValues) {
  EXPECT_NEAR(global_value({0.5}, {1}), 0.69 * std::log(2.0), 1e-12);
  EXPECT_NEAR(global_value({0.5}, {0}), 1.76 * std::log(2.0), 1e-12);
  EXPECT_NEAR(global_value({1.0 - 1e-12}, {1}), 0.0, 1e-6);
  EXPECT_NEAR(global_value({0.5, 0.5}, {1, 0}), (0.69 + 1.76) * std::log(2.0), 1e-12);
  EXPECT_TRUE(std::isfinite(global_value({0.0, 1.0}, {1, 0})));
  EXPECT_NEAR(global_value({0.0}, {1}), -0.69 * std::log(kProbabilityClamp), 1e-9);
}

TEST(GlobalLoss, RejectsBadLabels) {
  EXPECT_THROW(global_value({0.5}, {2}), std::invalid_argument);
  EXPECT_THROW(global_value({0.5, 0.2}, {1}), std::invalid_argument);
}

TEST(GlobalLoss, LinearInClassWeights) {
  std::mt19937_64 g(1);
  std::uniform_real_distribution<double> u(0.01, 0.99);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> p(8);
    std::vector<int> y(8);
    for (int i = 0; i < 8; ++i) {
      p[i] = u(g);
      y[i] = i % 3 == 0;
    }
    const double base = global_value(p, y, 0.69, 1.76);
    const double pos = global_value(p, y, 0.69, 1e-300);
    EXPECT_GE(base, 0.0);
    EXPECT_NEAR(global_value(p, y, 1.38, 1.76), base + pos, 1e-10);
  }
}

TEST(LocalLoss, SinglePositiveRegressionTerm) {
  SampledRegression reg{Tensor({1, 4}, 0.0), {{0, 0, 2, 2}}, {{1, 1, 3, 3}}};
  const LocalLoss l = local_loss({}, reg, {}, {});
  EXPECT_NEAR(l.l_reg.item(), 68.0 / 63.0, 1e-12);
  EXPECT_EQ(l.l_obj.item(), 0.0);
  EXPECT_EQ(l.l_cls.item(), 0.0);
  EXPECT_EQ(l.l_bbox.item(), 0.0);
  EXPECT_NEAR(l.total.item(), 68.0 / 63.0, 1e-12);
}

TEST(LocalLoss, EmptySetsAreZero) {
  const LocalLoss l = local_loss({}, {}, {}, {});
  EXPECT_EQ(l.total.item(), 0.0);
}

TEST(LocalLoss, NoGroundTruthReducesToNegativeCrossEntropy) {
  SampledObjectness obj{Tensor::from({3}, {-1.0, 0.5, 2.0}), {0, 0, 0}};
  SampledClassification cls{Tensor::from({2, 2}, {0.3, -0.2, 1.0, 1.0}), {0, 0}};
  const LocalLoss l = local_loss(obj, {}, cls, {});
  double obj_ref = 0;
  for (double z : {-1.0, 0.5, 2.0}) obj_ref += std::log1p(std::exp(z));
  EXPECT_NEAR(l.l_obj.item(), obj_ref / 3.0, 1e-12);
  const double cls_ref = (std::log(std::exp(0.3) + std::exp(-0.2)) - 0.3 + std::log(2.0)) / 2.0;
  EXPECT_NEAR(l.l_cls.item(), cls_ref, 1e-12);
  EXPECT_EQ(l.l_reg.item(), 0.0);
  EXPECT_EQ(l.l_bbox.item(), 0.0);
}

TEST(LocalLoss, PerfectPredictionsApproachZero) {
  SampledObjectness obj{Tensor::from({2}, {40.0, -40.0}), {1, 0}};
  SampledRegression reg{Tensor({1, 4}, 0.0), {{4, 4, 12, 12}}, {{4, 4, 12, 12}}};
  SampledClassification cls{Tensor::from({1, 2}, {-40.0, 40.0}), {1}};
  const LocalLoss l = local_loss(obj, reg, cls, reg);
  EXPECT_LT(l.total.item(), 1e-12);
}

TEST(LocalLoss, PositiveWithoutMatchIsRejected) {
  SampledRegression reg{Tensor({1, 4}, 0.0), {{0, 0, 2, 2}}, {}};
  EXPECT_THROW(local_loss({}, reg, {}, {}), std::invalid_argument);
}

TEST(LocalLoss, RegressionTermsStayBelowTwo) {
  std::mt19937_64 g(2);
  std::normal_distribution<double> d(0.0, 2.0);
  for (int t = 0; t < 200; ++t) {
    Buffer v(4);
    for (Index i = 0; i < 4; ++i) v[i] = d(g);
    SampledRegression reg{Tensor({1, 4}, v), {{10, 10, 20, 20}}, {{50, 50, 60, 70}}};
    const double r = local_loss({}, reg, {}, {}).l_reg.item();
    EXPECT_GE(r, 0.0);
    EXPECT_LT(r, 2.0);
  }
}

TEST(Multitask, WeightedSumAndGradientSplit) {
  EXPECT_EQ(multitask_loss(Tensor::scalar(0.0), Tensor::scalar(0.0), 0.35, 2.5).item(), 0.0);
  Tensor lg = Tensor::scalar(2.0, true), ll = Tensor::scalar(4.0, true);
  Tape tape;
  {
    TapeScope scope(tape);
    const Tensor l = multitask_loss(lg, ll, 0.35, 2.5);
    EXPECT_NEAR(l.item(), 10.7, 1e-12);
    backward(tape, l);
  }
  EXPECT_EQ(lg.grad()[0], 0.35);
  EXPECT_EQ(ll.grad()[0], 2.5);
}

TEST(Weights, Validation) {
  EXPECT_NO_THROW(LossWeights{}.validate());
  EXPECT_THROW((LossWeights{0.69, 0.0, 0.35, 2.5}.validate()), std::invalid_argument);
}

}  // namespace
