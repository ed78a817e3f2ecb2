// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "letlab/alignment.hpp"
#include "letlab/ops.hpp"
#include "letlab/random.hpp"

namespace letlab {
namespace {

Tensor randn(Rng& rng, Shape shape) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = rng.normal();
  return Tensor(std::move(shape), v);
}

// Direct evaluation of the linear interpolation formula, one coordinate at
// a time, in long double.
std::vector<double> brute_interpolate(const std::vector<double>& h, std::size_t target) {
  const std::size_t src = h.size();
  std::vector<double> out(target);
  if (target == 1) return {h[0]};
  for (std::size_t j = 0; j < target; ++j) {
    long double u = static_cast<long double>(j) * static_cast<long double>(src - 1) / static_cast<long double>(target - 1);
    auto lo = static_cast<std::size_t>(std::floor(u));
    long double beta = u - static_cast<long double>(lo);
    long double hi = lo + 1 < src ? h[lo + 1] : 0.0L;
    out[j] = static_cast<double>((1.0L - beta) * h[lo] + beta * hi);
  }
  return out;
}

TEST(LayerSelectionTest, NamedVariants) {
  EXPECT_EQ(select_layers(LayerPairStrategy::parse("L2E"), 4, 8, 3), (LayerPair{4, 3}));
  EXPECT_EQ(select_layers(LayerPairStrategy::parse("L2L"), 4, 8, 3), (LayerPair{4, 8}));
  EXPECT_EQ(select_layers(LayerPairStrategy::parse("M2M"), 5, 8, 3), (LayerPair{3, 4}));
  EXPECT_EQ(select_layers(LayerPairStrategy::parse("L2M"), 4, 8, 3), (LayerPair{4, 4}));
  EXPECT_EQ(select_layers(LayerPairStrategy::parse("M2E"), 4, 8, 3), (LayerPair{2, 3}));
  EXPECT_EQ(select_layers(LayerPairStrategy::parse("M2L"), 4, 8, 3), (LayerPair{2, 8}));
}

TEST(LayerSelectionTest, MiddleIsCeilingOfHalf) {
  for (std::size_t lt = 1; lt <= 9; ++lt) {
    for (std::size_t lm = 3; lm <= 9; ++lm) {
      LayerPair p = select_layers(LayerPairStrategy::named(LayerVariant::M2M), lt, lm, 3);
      EXPECT_EQ(p.teacher_layer, (lt + 1) / 2);
      EXPECT_EQ(p.target_layer, (lm + 1) / 2);
    }
  }
}

TEST(LayerSelectionTest, CountedFromTheEnd) {
  EXPECT_EQ(select_layers(LayerPairStrategy::parse("L1-F1"), 4, 8), (LayerPair{4, 1}));
  EXPECT_EQ(select_layers(LayerPairStrategy::parse("L1-F3"), 4, 8), (LayerPair{4, 3}));
  EXPECT_EQ(select_layers(LayerPairStrategy::parse("L1-F5"), 4, 8), (LayerPair{4, 5}));
  EXPECT_EQ(select_layers(LayerPairStrategy::parse("L3-F3"), 4, 8), (LayerPair{2, 3}));
  EXPECT_EQ(select_layers(LayerPairStrategy::parse("T2-M7"), 4, 8), (LayerPair{2, 7}));
}

TEST(LayerSelectionTest, RejectsOutOfRangeAndGarbage) {
  EXPECT_THROW(select_layers(LayerPairStrategy::parse("L5-F1"), 4, 8), ConfigError);
  EXPECT_THROW(select_layers(LayerPairStrategy::parse("L1-F9"), 4, 8), ConfigError);
  EXPECT_THROW(select_layers(LayerPairStrategy::parse("L2E"), 4, 2, 3), ConfigError);
  EXPECT_THROW(LayerPairStrategy::parse("L2X"), ConfigError);
  EXPECT_THROW(LayerPairStrategy::parse("L0-F1"), ConfigError);
}

TEST(LayerSelectionTest, StringRoundTrip) {
  for (const char* s : {"L2E", "M2L", "L1-F3", "T2-M5"}) EXPECT_EQ(LayerPairStrategy::parse(s).str(), s);
}

TEST(InterpolationTest, PlanCoordinates) {
  InterpolationPlan p = make_interpolation_plan(7, 4);
  for (std::size_t j = 0; j < 4; ++j) {
    EXPECT_DOUBLE_EQ(p.source_index[j], static_cast<double>(j) * 6.0 / 3.0);
    EXPECT_DOUBLE_EQ(p.beta[j], p.source_index[j] - std::floor(p.source_index[j]));
  }
  EXPECT_EQ(p.source_index.front(), 0.0);
  EXPECT_EQ(p.source_index.back(), 6.0);
}

TEST(InterpolationTest, Examples) {
  std::vector<double> same{5, 7, 9}, down{1, 2, 3, 4}, up{0, 2, 4};
  EXPECT_EQ(interpolate_hidden(same, 3), same);
  EXPECT_EQ(interpolate_hidden(down, 2), (std::vector<double>{1, 4}));
  EXPECT_EQ(interpolate_hidden(up, 5), (std::vector<double>{0, 1, 2, 3, 4}));
  EXPECT_EQ(interpolate_hidden(down, 1), (std::vector<double>{1}));
}

TEST(InterpolationTest, MatchesBruteForceOracle) {
  Rng rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    std::size_t dm = 2 + rng.below(63), dt = 2 + rng.below(63);
    std::vector<double> h(dm);
    for (double& v : h) v = rng.normal();
    std::vector<double> got = interpolate_hidden(h, dt), want = brute_interpolate(h, dt);
    ASSERT_EQ(got.size(), dt);
    for (std::size_t j = 0; j < dt; ++j) EXPECT_NEAR(got[j], want[j], 1e-12) << dm << "->" << dt;
    EXPECT_EQ(got.front(), h.front());
    EXPECT_EQ(got.back(), h.back());
    if (dm == dt) EXPECT_EQ(std::memcmp(got.data(), h.data(), dm * sizeof(double)), 0);
  }
}

TEST(InterpolationTest, TensorVersionWorksPerRow) {
  Rng rng(5);
  Tensor h = randn(rng, {2, 3, 6});
  Tensor out = interpolate_hidden(h, 4);
  ASSERT_EQ(out.shape(), (Shape{2, 3, 4}));
  for (std::size_t r = 0; r < 6; ++r) {
    std::vector<double> row(h.data().begin() + r * 6, h.data().begin() + (r + 1) * 6);
    auto want = interpolate_hidden(row, 4);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(out[r * 4 + j], want[j]);
  }
}

TEST(CosineLossTest, Examples) {
  Tensor a = Tensor::of({1, 3}, {1, 2, 3});
  EXPECT_NEAR(proj_loss_cosine(a, a).item(), -1.0, 1e-15);
  EXPECT_NEAR(proj_loss_cosine(a, Tensor::of({1, 3}, {-1, -2, -3})).item(), 1.0, 1e-15);
  EXPECT_NEAR(proj_loss_cosine(Tensor::of({1, 2}, {1, 0}), Tensor::of({1, 2}, {0, 5})).item(), 0.0, 1e-15);
}

TEST(CosineLossTest, ZeroVectorGivesZero) {
  EXPECT_EQ(proj_loss_cosine(Tensor::of({1, 2}, {0, 0}), Tensor::of({1, 2}, {1, 1})).item(), 0.0);
}

TEST(CosineLossTest, SumReductionScalesWithTokens) {
  Rng rng(6);
  Tensor a = randn(rng, {2, 5, 4}), b = randn(rng, {2, 5, 4});
  EXPECT_NEAR(proj_loss_cosine(a, b, TokenReduction::sum).item(), 10.0 * proj_loss_cosine(a, b).item(), 1e-12);
  double mean = proj_loss_cosine(a, b).item();
  EXPECT_GE(mean, -1.0);
  EXPECT_LE(mean, 1.0);
}

TEST(CosineLossTest, ShapeMismatchThrows) {
  Rng rng(7);
  EXPECT_THROW(proj_loss_cosine(randn(rng, {2, 4}), randn(rng, {2, 5})), ShapeError);
}

double naive_logsum(const std::vector<double>& a, const std::vector<double>& b) {
  long double na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    na += static_cast<long double>(a[i]) * a[i];
    nb += static_cast<long double>(b[i]) * b[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  long double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    long double d = a[i] / na - b[i] / nb;
    s += std::exp(d * d);
  }
  return static_cast<double>(std::log(s));
}

TEST(LogsumLossTest, IdenticalVectorsGiveLogN) {
  for (std::size_t n : {2u, 5u, 64u}) {
    Tensor a = Tensor::full({1, n}, 0.25);
    EXPECT_NEAR(proj_loss_logsum(a, a).item(), std::log(static_cast<double>(n)), 1e-14);
  }
}

TEST(LogsumLossTest, DominantDimensionMatchesOracle) {
  std::vector<double> a{10.0, 0.1, -0.2, 0.05}, b{-0.3, 1.0, 0.2, 0.1};
  Tensor ta = Tensor({1, 4}, a), tb = Tensor({1, 4}, b);
  EXPECT_NEAR(proj_loss_logsum(ta, tb).item(), naive_logsum(a, b), 1e-6);
}

TEST(LogsumLossTest, ScaleInvariant) {
  Rng rng(8);
  Tensor a = randn(rng, {3, 6}), b = randn(rng, {3, 6});
  EXPECT_NEAR(proj_loss_logsum(ops::scale(a, 2.0), b).item(), proj_loss_logsum(a, b).item(), 1e-14);
}

TEST(LogsumLossTest, MeanOverTokensMatchesOracle) {
  Rng rng(9);
  Tensor a = randn(rng, {2, 3, 5}), b = randn(rng, {2, 3, 5});
  double want = 0.0;
  for (std::size_t r = 0; r < 6; ++r) {
    std::vector<double> ra(a.data().begin() + r * 5, a.data().begin() + r * 5 + 5);
    std::vector<double> rb(b.data().begin() + r * 5, b.data().begin() + r * 5 + 5);
    want += naive_logsum(ra, rb);
  }
  EXPECT_NEAR(proj_loss_logsum(a, b).item(), want / 6.0, 1e-12);
  EXPECT_NEAR(proj_loss_logsum(a, b, TokenReduction::sum).item(), want, 1e-12);
}

TEST(LambdaScheduleTest, Examples) {
  EXPECT_EQ(lambda_at(0, 0.1, 1500), 0.1);
  EXPECT_EQ(lambda_at(1500, 0.1, 1500), 0.0);
  EXPECT_EQ(lambda_at(750, 0.1, 1500), 0.05);
  EXPECT_EQ(lambda_at(4000, 0.1, 1500), 0.0);
}

TEST(LambdaScheduleTest, LinearAndMonotone) {
  double prev = 1.0;
  for (std::size_t s = 0; s <= 300; ++s) {
    double l = lambda_at(s, 1.0, 300);
    EXPECT_NEAR(l, 1.0 - static_cast<double>(s) / 300.0, 1e-15);
    EXPECT_LE(l, prev);
    prev = l;
  }
}

TEST(CosineMetricTest, Examples) {
  Tensor a = Tensor::of({2, 2}, {1, 1, 2, 0});
  EXPECT_NEAR(cosine_similarity_metric(a, a), 1.0, 1e-15);
  Rng rng(10);
  Tensor x = randn(rng, {3, 4, 8}), y = randn(rng, {3, 4, 8});
  EXPECT_NEAR(cosine_similarity_metric(x, y), -proj_loss_cosine(x, y).item(), 1e-15);
}

TEST(CosineMetricTest, MatchesIndependentImplementation) {
  Rng rng(11);
  Tensor x = randn(rng, {1, 64}), y = randn(rng, {1, 64});
  long double dot = 0, nx = 0, ny = 0;
  for (std::size_t i = 0; i < 64; ++i) {
    dot += static_cast<long double>(x[i]) * y[i];
    nx += static_cast<long double>(x[i]) * x[i];
    ny += static_cast<long double>(y[i]) * y[i];
  }
  EXPECT_NEAR(cosine_similarity_metric(x, y), static_cast<double>(dot / std::sqrt(nx * ny)), 1e-12);
}

TEST(MatchWidthTest, InterpolatesOnlyWhenNeeded) {
  Rng rng(12);
  Tensor h = randn(rng, {1, 2, 8});
  EXPECT_EQ(match_width(h, 8).id(), h.id());
  EXPECT_EQ(match_width(h, 4).shape(), (Shape{1, 2, 4}));
}

TEST(AlignmentSpecTest, Validation) {
  AlignmentSpec a;
  EXPECT_NO_THROW(a.validate());
  a.lambda0 = -0.1;
  EXPECT_THROW(a.validate(), ConfigError);
  a = {};
  a.s_stop = 0;
  EXPECT_THROW(a.validate(), ConfigError);
}

}  // namespace
}  // namespace letlab
