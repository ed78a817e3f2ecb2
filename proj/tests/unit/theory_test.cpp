// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "letlab/ops.hpp"
#include "letlab/random.hpp"
#include "letlab/theory.hpp"

namespace letlab {
namespace {

Tensor vec(std::initializer_list<double> v) { return Tensor::of({v.size()}, v); }

TEST(NumericHessianTest, QuadraticRecoversMatrix) {
  const double A[3][3] = {{2.0, -1.0, 0.5}, {-1.0, 3.0, 0.25}, {0.5, 0.25, 1.5}};
  FlatFn f = [&](std::span<const double> x) {
    double s = 0.0;
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) s += 0.5 * x[i] * A[i][j] * x[j];
    }
    return s;
  };
  std::vector<double> x0{0.3, -0.7, 1.1};
  SquareMatrix h = numeric_hessian(f, x0);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) EXPECT_NEAR(h(i, j), A[i][j], 1e-6);
  }
}

TEST(NumericHessianTest, LinearIsZero) {
  FlatFn f = [](std::span<const double> x) { return 0.3 * x[0] - 0.2 * x[1] + 0.05 * x[2]; };
  std::vector<double> x0{0.1, 0.2, -0.3};
  SquareMatrix h = numeric_hessian(f, x0);
  for (double v : h.values) EXPECT_LT(std::abs(v), 1e-8);
}

TEST(NumericHessianTest, NonFiniteIsReported) {
  FlatFn f = [](std::span<const double> x) { return std::log(x[0]); };
  std::vector<double> x0{1e-5};
  EXPECT_THROW(numeric_hessian(f, x0), NumericalError);
  EXPECT_THROW(numeric_hessian(f, x0, 0.0), ConfigError);
}

// Cross-oracle: central differences of the autodiff gradient.
TEST(NumericHessianTest, DeepLinearMatchesDifferencedAutodiffGradient) {
  DeepLinearNet net = random_deep_linear(3, 2, 31);
  Tensor x = vec({0.6, -0.8}), t = vec({0.2, 0.9});
  const std::size_t k = 3, n = 12;
  FlatFn f = deep_linear_alignment_loss(3, 2, k, {0.6, -0.8}, {0.2, 0.9});
  std::vector<double> w = flatten(net);
  SquareMatrix h = numeric_hessian(f, w);

  auto gradient = [&](const std::vector<double>& flat) {
    DeepLinearNet copy;
    for (std::size_t l = 0; l < 3; ++l) {
      copy.weights.push_back(Tensor({2, 2}, std::vector<double>(flat.begin() + l * 4, flat.begin() + l * 4 + 4), true));
    }
    Tape tape;
    TapeScope scope(tape);
    GradientMap g = tape.backward(deep_linear_alignment_loss(copy, k, x, t));
    std::vector<double> out;
    for (const auto& wl : copy.weights) {
      Tensor gl = g.of(wl);
      out.insert(out.end(), gl.data().begin(), gl.data().end());
    }
    return out;
  };
  const double eps = 1e-6;
  for (std::size_t j = 0; j < n; ++j) {
    std::vector<double> up = w, down = w;
    up[j] += eps;
    down[j] -= eps;
    auto gu = gradient(up), gd = gradient(down);
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(h(i, j), (gu[i] - gd[i]) / (2 * eps), 1e-5) << i << "," << j;
  }
}

TEST(AlignmentLossTest, FlatAndTensorFormsAgree) {
  DeepLinearNet net = random_deep_linear(4, 3, 2);
  Tensor x = vec({0.1, 0.5, -0.3}), t = vec({1.0, 0.0, 0.4});
  for (std::size_t k = 1; k <= 4; ++k) {
    FlatFn f = deep_linear_alignment_loss(4, 3, k, {0.1, 0.5, -0.3}, {1.0, 0.0, 0.4});
    EXPECT_NEAR(f(flatten(net)), deep_linear_alignment_loss(net, k, x, t).item(), 1e-14);
  }
  EXPECT_THROW(deep_linear_alignment_loss(net, 0, x, t), ConfigError);
  EXPECT_THROW(deep_linear_alignment_loss(net, 5, x, t), ConfigError);
}

TEST(GradientVanishingTest, AutodiffAboveDepthOne) {
  DeepLinearNet net = random_deep_linear(3, 2, 4);
  EXPECT_LT(verify_gradient_vanishing(net, 1, vec({1.0, 0.5}), vec({-0.2, 0.7})), 1e-10);
}

TEST(GradientVanishingTest, FullDepthIsVacuous) {
  DeepLinearNet net = random_deep_linear(3, 2, 4);
  EXPECT_EQ(verify_gradient_vanishing(net, 3, vec({1.0, 0.5}), vec({-0.2, 0.7})), 0.0);
}

TEST(GradientVanishingTest, FiniteDifferences) {
  DeepLinearNet net = random_deep_linear(4, 2, 5);
  EXPECT_LT(verify_gradient_vanishing(net, 2, vec({0.3, 0.9}), vec({0.5, -0.5}), GradientMethod::finite_difference),
            1e-7);
}

TEST(GradientVanishingTest, LiveLayersDoHaveGradient) {
  DeepLinearNet net = random_deep_linear(3, 2, 6);
  Tape tape;
  TapeScope scope(tape);
  for (auto& w : net.weights) w.set_requires_grad(true);
  GradientMap g = tape.backward(deep_linear_alignment_loss(net, 2, vec({0.3, 0.9}), vec({0.5, -0.5})));
  double live = 0.0;
  for (double v : g.of(net.weights[0]).data()) live = std::max(live, std::abs(v));
  EXPECT_GT(live, 1e-3);
}

TEST(BlockStructureTest, SingleLiveBlock) {
  DeepLinearNet net = random_deep_linear(3, 2, 7);
  HessianReport r = verify_block_structure(net, 1, vec({0.4, -1.0}), vec({0.3, 0.3}));
  EXPECT_EQ(r.live_blocks(), 1u);
  EXPECT_NEAR(r.total_frobenius, r.block_norms[0][0], 1e-9);
  EXPECT_LT(r.forbidden_max, 1e-6);
  EXPECT_GT(r.block_norms[0][0], 0.0);
}

TEST(BlockStructureTest, FourLiveBlocks) {
  DeepLinearNet net = random_deep_linear(4, 2, 8);
  HessianReport r = verify_block_structure(net, 2, vec({0.4, -1.0}), vec({0.3, 0.3}));
  EXPECT_EQ(r.live_blocks(), 4u);
  EXPECT_TRUE(r.forbidden_ok(1e-6));
  EXPECT_TRUE(r.noise_scaling_ok());
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      if (i >= 2 || j >= 2) EXPECT_EQ(r.block_norms[i][j], 0.0);
      EXPECT_NEAR(r.block_norms[i][j], r.block_norms[j][i], 1e-9);
    }
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < 2; ++j) acc += r.block_norms[i][j] * r.block_norms[i][j];
  }
  EXPECT_NEAR(r.total_frobenius * r.total_frobenius, acc, 1e-9 * acc);
  EXPECT_NEAR(r.block_accumulated, r.total_frobenius, 1e-9 * r.total_frobenius);
  EXPECT_LT(r.max_asymmetry, 1e-9);
  EXPECT_TRUE(r.bound_ok());
}

TEST(BlockStructureTest, FullDepthHasAllBlocksLive) {
  DeepLinearNet net = random_deep_linear(3, 2, 9);
  HessianReport r = verify_block_structure(net, 3, vec({0.4, -1.0}), vec({0.3, 0.3}));
  EXPECT_EQ(r.live_blocks(), 9u);
  EXPECT_EQ(r.forbidden_max, 0.0);
}

TEST(BlockStructureTest, GuardRejectsLargeNets) {
  DeepLinearNet net = random_deep_linear(5, 9, 1);
  Tensor x = Tensor::full({9}, 1.0), t = Tensor::full({9}, 0.5);
  EXPECT_THROW(verify_block_structure(net, 1, x, t), ConfigError);
}

TEST(SweepTest, DefaultSweepPasses) {
  SweepOptions o;
  SweepResult r = curvature_sweep(o);
  EXPECT_TRUE(r.forbidden_ok());
  EXPECT_TRUE(r.noise_scaling_ok());
  EXPECT_TRUE(r.bounds_ok());
  EXPECT_TRUE(r.monotone_bound());
  ASSERT_EQ(r.rows.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(r.rows[i].bound, static_cast<double>(i + 1) * r.global_c);
  for (const auto& trial : r.reports) {
    for (const auto& rep : trial) EXPECT_LE(rep.total_frobenius, rep.bound);
  }
}

TEST(SweepTest, EarlierDepthHasSmallerBoundOnTheSameNet) {
  SweepOptions o;
  o.k_values = {1, 2};
  SweepResult r = curvature_sweep(o);
  EXPECT_LE(r.rows[0].bound, r.rows[1].bound);
}

TEST(SweepTest, IdentityTrialsHaveZeroVariance) {
  SweepOptions o;
  o.identity = true;
  o.trials = 4;
  SweepResult r = curvature_sweep(o);
  for (const auto& row : r.rows) EXPECT_EQ(row.std_frobenius, 0.0);
}

TEST(SweepTest, TablesAreReproducible) {
  SweepOptions o;
  o.trials = 1;
  o.seed = 12;
  std::stringstream a, b;
  write_csv(a, sweep_table(curvature_sweep(o)));
  write_csv(b, sweep_table(curvature_sweep(o)));
  EXPECT_EQ(a.str(), b.str());
  Table blocks = block_table(curvature_sweep(o));
  EXPECT_EQ(blocks.rows.size(), 3u * 16u);
  EXPECT_TRUE(sweep_summary(curvature_sweep(o))["passed"].get<bool>());
}

}  // namespace
}  // namespace letlab
