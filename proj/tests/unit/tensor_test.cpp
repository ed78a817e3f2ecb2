// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <set>

#include "letlab/gradcheck.hpp"
#include "letlab/gradcheck_suites.hpp"
#include "letlab/losses.hpp"
#include "letlab/ops.hpp"
#include "letlab/random.hpp"
#include "letlab/tensor.hpp"

namespace letlab {
namespace {

Tensor randn(Rng& rng, Shape shape, bool grad = true) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = rng.normal();
  return Tensor(std::move(shape), std::move(v), grad);
}

TEST(TensorTest, ShapeMustMatchData) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  Tensor t({2, 3}, std::vector<double>(6, 1.0));
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.dim(-1), 3u);
}

TEST(TensorTest, NonFiniteForwardIsAnError) {
  Tensor x = Tensor::of({2}, {-1.0, 1.0});
  EXPECT_THROW(ops::log(x), NumericalError);
  Tensor big = Tensor::of({1}, {std::numeric_limits<double>::max()});
  EXPECT_THROW(ops::mul(big, big), NumericalError);
}

TEST(TensorTest, RmsNormOfConstantRowIsOne) {
  Tensor x = Tensor::of({1, 4}, {2.5, 2.5, 2.5, 2.5});
  Tensor g = Tensor::full({4}, 1.0);
  Tensor y = ops::rms_norm(x, g);
  for (double v : y.data()) EXPECT_NEAR(v, 1.0, 1e-6);
}

TEST(TensorTest, SoftmaxOfZerosIsUniform) {
  Tensor y = ops::row_softmax(Tensor::of({1, 2}, {0.0, 0.0}));
  EXPECT_DOUBLE_EQ(y[0], 0.5);
  EXPECT_DOUBLE_EQ(y[1], 0.5);
}

TEST(TensorTest, MatmulWithIdentityRows) {
  Tensor a = Tensor::of({2, 3}, {1, 0, 0, 0, 1, 0});
  Tensor x = Tensor::of({3, 1}, {1, 2, 3});
  Tensor y = ops::matmul(a, x);
  EXPECT_EQ(y[0], 1.0);
  EXPECT_EQ(y[1], 2.0);
}

TEST(TapeTest, SquareHasGradientSix) {
  Tensor x = Tensor::scalar(3.0, true);
  Tape tape;
  TapeScope scope(tape);
  Tensor y = ops::mul(x, x);
  EXPECT_DOUBLE_EQ(backward(y).of(x).item(), 6.0);
}

TEST(TapeTest, InputsAreRecordedBeforeTheirConsumers) {
  Rng rng(1);
  Tensor a = randn(rng, {3, 3}), b = randn(rng, {3, 3});
  Tape tape;
  TapeScope scope(tape);
  Tensor loss = ops::sum(ops::gelu(ops::matmul(ops::add(a, b), ops::matmul(a, b))));
  std::set<NodeId> produced{a.id(), b.id()};
  for (const auto& e : tape.entries()) {
    for (const auto& in : e.inputs) EXPECT_TRUE(produced.contains(in.id())) << e.op;
    EXPECT_TRUE(produced.insert(e.output.id()).second);
  }
}

TEST(TapeTest, BackwardIsRepeatable) {
  Rng rng(2);
  Tensor a = randn(rng, {2, 3});
  Tape tape;
  TapeScope scope(tape);
  Tensor loss = ops::sum(ops::mul(ops::silu(a), a));
  Tensor g1 = tape.backward(loss).of(a), g2 = tape.backward(loss).of(a);
  for (std::size_t i = 0; i < g1.numel(); ++i) EXPECT_EQ(g1[i], g2[i]);
}

TEST(TapeTest, SharedSubexpressionAccumulates) {
  // y = x*x + x*x: a node used twice must still be visited once per use.
  Tensor x = Tensor::scalar(1.5, true);
  Tape tape;
  TapeScope scope(tape);
  Tensor sq = ops::mul(x, x);
  EXPECT_DOUBLE_EQ(backward(ops::add(sq, sq)).of(x).item(), 6.0);
}

TEST(TapeTest, NoTapeMeansNoRecording) {
  Tensor x = Tensor::scalar(2.0, true);
  Tensor y = ops::mul(x, x);
  EXPECT_EQ(active_tape(), nullptr);
  EXPECT_DOUBLE_EQ(y.item(), 4.0);
}

TEST(TapeTest, SoftmaxCrossEntropyGradientIsProbabilitiesMinusOneHot) {
  Rng rng(3);
  Tensor logits = randn(rng, {1, 3, 5});
  std::vector<std::int32_t> targets{4, 0, 2};
  Tape tape;
  TapeScope scope(tape);
  Tensor g = backward(loss_nll(logits, targets)).of(logits);
  for (std::size_t r = 0; r < 3; ++r) {
    double mx = -1e300, z = 0.0;
    for (std::size_t v = 0; v < 5; ++v) mx = std::max(mx, logits[r * 5 + v]);
    for (std::size_t v = 0; v < 5; ++v) z += std::exp(logits[r * 5 + v] - mx);
    for (std::size_t v = 0; v < 5; ++v) {
      double p = std::exp(logits[r * 5 + v] - mx) / z;
      double expected = (p - (static_cast<std::int32_t>(v) == targets[r] ? 1.0 : 0.0)) / 3.0;
      EXPECT_NEAR(g[r * 5 + v], expected, 1e-14);
    }
  }
}

TEST(GradCheckTest, MatmulChainBelowOneInAMillion) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    std::vector<Tensor> p{randn(rng, {4, 4}), randn(rng, {4, 4}), randn(rng, {4, 4})};
    Tensor w = randn(rng, {4, 4}, false);
    auto fn = [w](const std::vector<Tensor>& q) {
      return ops::sum(ops::mul(ops::matmul(ops::matmul(q[0], q[1]), q[2]), w));
    };
    EXPECT_LT(grad_check(fn, p, 1e-5), 1e-6);
  }
}

TEST(GradCheckTest, LinearSquaredErrorBelowTenMillionth) {
  Rng rng(7);
  Tensor x = randn(rng, {6, 3}, false), y = randn(rng, {6, 1}, false);
  std::vector<Tensor> p{randn(rng, {3, 1})};
  auto fn = [x, y](const std::vector<Tensor>& q) {
    Tensor r = ops::sub(ops::matmul(x, q[0]), y);
    return ops::mean(ops::mul(r, r));
  };
  EXPECT_LT(grad_check(fn, p), 1e-7);
}

TEST(GradCheckTest, ConstantFunctionIsExact) {
  Rng rng(8);
  std::vector<Tensor> p{randn(rng, {3})};
  auto fn = [](const std::vector<Tensor>&) { return Tensor::scalar(4.0); };
  EXPECT_EQ(grad_check(fn, p), 0.0);
}

TEST(GradCheckTest, DetectsAWrongBackward) {
  Tensor x = Tensor::of({3}, {0.3, -0.2, 1.1}, true);
  auto fn = [](const std::vector<Tensor>& q) {
    const Tensor& in = q[0];
    Buffer v(in.data().begin(), in.data().end());
    for (double& e : v) e = e * e;
    Tensor sq = emit("bad_square", in.shape(), std::move(v), {in}, [](const BackwardContext& ctx) {
      auto gi = ctx.grad_in(0);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += ctx.grad_out()[i] * ctx.input(0)[i];  // missing factor 2
    });
    return ops::sum(sq);
  };
  EXPECT_GT(grad_check(fn, {x}), 1e-2);
}

// Every primitive over 20 seeds at the tighter per-primitive tolerance.
TEST(GradCheckTest, EveryPrimitiveOverTwentySeeds) {
  for (const auto& item : run_gradcheck_suite(GradCheckScope::primitives, 20, 11)) {
    EXPECT_LT(item.worst, 1e-5) << item.name;
  }
}

TEST(GradCheckTest, TwoLayerTransformerNll) {
  for (const auto& item : run_gradcheck_suite(GradCheckScope::model, 3, 5)) {
    EXPECT_LT(item.worst, 1e-4) << item.name;
  }
}

TEST(GradCheckTest, SuiteReportIsDeterministic) {
  auto a = run_gradcheck_suite(GradCheckScope::losses, 2, 9);
  auto b = run_gradcheck_suite(GradCheckScope::losses, 2, 9);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_EQ(a[i].worst, b[i].worst);
  }
}

TEST(GradCheckTest, ScopeParsing) {
  EXPECT_EQ(parse_gradcheck_scope("model"), GradCheckScope::model);
  EXPECT_THROW(parse_gradcheck_scope("everything"), ConfigError);
}

}  // namespace
}  // namespace letlab
