// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "letlab/losses.hpp"
#include "letlab/ops.hpp"
#include "letlab/random.hpp"

namespace letlab {
namespace {

TEST(NllTest, UniformLogits) {
  Tensor logits = Tensor::zeros({1, 3, 16});
  std::vector<std::int32_t> targets{0, 7, 15};
  EXPECT_NEAR(loss_nll(logits, targets).item(), std::log(16.0), 1e-14);
}

TEST(NllTest, ConfidentCorrectPredictions) {
  std::vector<double> v(2 * 4, -40.0);
  v[0 * 4 + 2] = 40.0;
  v[1 * 4 + 1] = 40.0;
  Tensor logits({1, 2, 4}, v);
  std::vector<std::int32_t> targets{2, 1};
  EXPECT_LT(loss_nll(logits, targets).item(), 1e-30);
}

TEST(NllTest, HalfProbability) {
  Tensor logits = Tensor::of({1, 1, 2}, {0.0, 0.0});
  std::vector<std::int32_t> target{1};
  EXPECT_NEAR(loss_nll(logits, target).item(), std::log(2.0), 1e-15);
}

TEST(NllTest, RejectsBadTargets) {
  Tensor logits = Tensor::zeros({1, 2, 3});
  std::vector<std::int32_t> few{0};
  std::vector<std::int32_t> out_of_range{0, 3};
  EXPECT_THROW(loss_nll(logits, few), ShapeError);
  EXPECT_THROW(loss_nll(logits, out_of_range), Error);
}

TEST(RkdTest, EqualDistributionsGiveEntropy) {
  Tensor logits = Tensor::of({1, 1, 3}, {0.2, -1.0, 0.7});
  double z = std::exp(0.2) + std::exp(-1.0) + std::exp(0.7), h = 0.0;
  for (double l : {0.2, -1.0, 0.7}) h -= std::exp(l) / z * std::log(std::exp(l) / z);
  EXPECT_NEAR(loss_rkd(logits, logits).item(), h, 1e-14);
}

TEST(RkdTest, OneHotTeacherReducesToNll) {
  Tensor student = Tensor::of({1, 1, 4}, {0.3, 0.1, -0.5, 1.2});
  Tensor teacher = Tensor::of({1, 1, 4}, {-800.0, 800.0, -800.0, -800.0});
  std::vector<std::int32_t> t{1};
  EXPECT_NEAR(loss_rkd(student, teacher).item(), loss_nll(student, t).item(), 1e-14);
}

TEST(RkdTest, UniformBothGiveLogVocab) {
  EXPECT_NEAR(loss_rkd(Tensor::zeros({2, 3, 4}), Tensor::zeros({2, 3, 4})).item(), std::log(4.0), 1e-14);
}

TEST(RkdTest, TemperatureSoftensBoth) {
  Tensor s = Tensor::of({1, 1, 2}, {2.0, 0.0}), t = Tensor::of({1, 1, 2}, {0.0, 4.0});
  Tensor s2 = Tensor::of({1, 1, 2}, {1.0, 0.0}), t2 = Tensor::of({1, 1, 2}, {0.0, 2.0});
  EXPECT_NEAR(loss_rkd(s, t, 2.0).item(), loss_rkd(s2, t2, 1.0).item(), 1e-14);
}

TEST(RkdTest, TeacherReceivesNoGradient) {
  Tensor s = Tensor::of({1, 1, 3}, {0.1, 0.2, 0.3}, true), t = Tensor::of({1, 1, 3}, {0.5, 0.0, -0.5}, true);
  Tape tape;
  TapeScope scope(tape);
  GradientMap g = backward(loss_rkd(s, t));
  EXPECT_FALSE(g.contains(t));
  EXPECT_TRUE(g.contains(s));
}

TEST(TotalLossTest, Arithmetic) {
  AlignmentSpec spec;
  spec.lambda0 = 0.1;
  spec.s_stop = 1500;
  Tensor nll = Tensor::scalar(2.0), proj = Tensor::scalar(-0.5);
  EXPECT_DOUBLE_EQ(loss_total(nll, proj, 0, spec).item(), 1.95);
}

TEST(TotalLossTest, ZeroWeightReturnsNllItself) {
  AlignmentSpec spec;
  Tensor nll = Tensor::scalar(2.0, true), proj = Tensor::scalar(-0.5, true);
  EXPECT_EQ(loss_total(nll, proj, spec.s_stop, spec).id(), nll.id());
  EXPECT_EQ(loss_total(nll, proj, spec.s_stop + 10, spec).id(), nll.id());
  spec.lambda0 = 0.0;
  for (std::size_t s : {0u, 7u, 1499u}) EXPECT_EQ(loss_total(nll, proj, s, spec).item(), 2.0);
}

}  // namespace
}  // namespace letlab
