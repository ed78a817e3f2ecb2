// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "letlab/model.hpp"
#include "letlab/ops.hpp"
#include "letlab/random.hpp"

namespace letlab {
namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.vocab_size = 16;
  c.hidden_size = 8;
  c.intermediate_size = 16;
  c.num_layers = 2;
  c.num_heads = 2;
  c.num_kv_heads = 2;
  c.max_seq_len = 16;
  return c;
}

TEST(ModelConfigTest, RejectsInconsistentShapes) {
  ModelConfig c = small_config();
  c.num_kv_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.hidden_size = 9;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.num_layers = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.vocab_size = 1;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ModelTest, ParameterCountMatchesHandCount) {
  ModelConfig c = small_config();
  c.num_kv_heads = 1;
  // embed 16*8; per layer: 2 norms of 8, wq 64, wk 32, wv 32, wo 64,
  // swiglu 3*8*16; final norm 8.
  const std::size_t expected = 128 + 2 * (16 + 64 + 32 + 32 + 64 + 384) + 8;
  EXPECT_EQ(parameter_count(c), expected);
  TransformerModel m = init_params(c, 1);
  std::size_t n = 0;
  for (const auto& p : m.parameters()) n += p.value.numel();
  EXPECT_EQ(n, expected);
  EXPECT_EQ(m.num_parameters(), expected);

  c.tie_embeddings = false;
  c.activation = Activation::gelu;
  EXPECT_EQ(parameter_count(c), 128 + 2 * (16 + 64 + 32 + 32 + 64 + 256) + 8 + 128);
  n = 0;
  for (const auto& p : init_params(c, 1).parameters()) n += p.value.numel();
  EXPECT_EQ(n, parameter_count(c));
}

TEST(ModelTest, ForwardShapes) {
  TransformerModel m = init_params(small_config(), 3);
  std::vector<std::int32_t> ids(10);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<std::int32_t>(i % 16);
  ForwardResult r = m.forward(ids, 2, 5);
  EXPECT_EQ(r.logits.shape(), (Shape{2, 5, 16}));
  ASSERT_EQ(r.hidden.size(), 3u);
  for (const auto& h : r.hidden) EXPECT_EQ(h.shape(), (Shape{2, 5, 8}));
}

TEST(ModelTest, ForwardRejectsBadInput) {
  TransformerModel m = init_params(small_config(), 3);
  std::vector<std::int32_t> ids(5, 0);
  EXPECT_THROW(m.forward(ids, 2, 5), ShapeError);
  ids[2] = 16;
  EXPECT_THROW(m.forward(ids, 1, 5), Error);
}

TEST(ModelTest, Causality) {
  for (auto act : {Activation::swiglu, Activation::gelu}) {
    ModelConfig c = small_config();
    c.num_layers = 1;
    c.activation = act;
    TransformerModel m = init_params(c, 5);
    std::vector<std::int32_t> ids{1, 2, 3, 4, 5, 6};
    ForwardResult a = m.forward(ids, 1, 6);
    for (std::size_t t = 0; t < 6; ++t) {
      auto changed = ids;
      changed[t] = (changed[t] + 7) % 16;
      ForwardResult b = m.forward(changed, 1, 6);
      for (std::size_t i = 0; i < t * 16; ++i) EXPECT_EQ(a.logits[i], b.logits[i]) << "t=" << t;
      bool differs = false;
      for (std::size_t i = t * 16; i < (t + 1) * 16; ++i) differs = differs || a.logits[i] != b.logits[i];
      EXPECT_TRUE(differs);
    }
  }
}

// Grouped-query attention equals full attention whose K/V heads are copies.
TEST(ModelTest, GroupedQueryMatchesDuplicatedHeads) {
  ModelConfig gqa = small_config();
  gqa.num_kv_heads = 1;
  ModelConfig full = gqa;
  full.num_kv_heads = 2;
  TransformerModel a = init_params(gqa, 9);
  std::vector<NamedTensor> params;
  for (const auto& p : a.parameters()) {
    const bool kv = p.name.ends_with(".wk") || p.name.ends_with(".wv");
    if (!kv) {
      params.push_back({p.name, Tensor(p.value.shape(), Buffer(p.value.data().begin(), p.value.data().end()))});
      continue;
    }
    const std::size_t rows = p.value.dim(0), cols = p.value.dim(1);
    Buffer dup(rows * cols * 2);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        dup[r * 2 * cols + c] = p.value[r * cols + c];
        dup[r * 2 * cols + cols + c] = p.value[r * cols + c];
      }
    }
    params.push_back({p.name, Tensor({rows, 2 * cols}, std::move(dup))});
  }
  TransformerModel b(full, std::move(params));
  std::vector<std::int32_t> ids{3, 1, 4, 1, 5, 9, 2, 6};
  ForwardResult ra = a.forward(ids, 2, 4), rb = b.forward(ids, 2, 4);
  for (std::size_t i = 0; i < ra.logits.numel(); ++i) EXPECT_NEAR(ra.logits[i], rb.logits[i], 1e-12);
}

TEST(ModelTest, InitIsDeterministicPerSeed) {
  TransformerModel a = init_params(small_config(), 42), b = init_params(small_config(), 42),
                   c = init_params(small_config(), 43);
  EXPECT_EQ(a.parameter_hash(), b.parameter_hash());
  bool differs = false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    auto x = a.parameters()[i].value.data(), y = b.parameters()[i].value.data(), z = c.parameters()[i].value.data();
    EXPECT_TRUE(std::equal(x.begin(), x.end(), y.begin()));
    differs = differs || !std::equal(x.begin(), x.end(), z.begin());
  }
  EXPECT_TRUE(differs);
  EXPECT_NE(a.parameter_hash(), c.parameter_hash());
}

TEST(ModelTest, SampledWeightsAreCentred) {
  ModelConfig c = small_config();
  c.hidden_size = 128;
  c.num_heads = 4;
  c.num_kv_heads = 4;
  TransformerModel m = init_params(c, 17);
  auto w = m.param("layers.1.wq").data();
  ASSERT_GE(w.size(), 10000u);
  double mean = 0.0, sq = 0.0;
  for (double v : w) mean += v;
  mean /= static_cast<double>(w.size());
  for (double v : w) sq += (v - mean) * (v - mean);
  const double se = std::sqrt(sq / static_cast<double>(w.size() - 1)) / std::sqrt(static_cast<double>(w.size()));
  EXPECT_LT(std::abs(mean), 3.0 * se);
  EXPECT_GT(se, 0.0);
}

TEST(ModelTest, CloneHasFreshIdentity) {
  TransformerModel a = init_params(small_config(), 1);
  TransformerModel b = a.clone();
  EXPECT_EQ(a.parameter_hash(), b.parameter_hash());
  EXPECT_NE(a.parameters()[0].value.id(), b.parameters()[0].value.id());
  b.parameters()[0].value.mutable_data()[0] += 1.0;
  EXPECT_NE(a.parameter_hash(), b.parameter_hash());
}

TEST(ModelTest, FrozenModelRecordsNothing) {
  TransformerModel m = init_params(small_config(), 1);
  m.set_trainable(false);
  std::vector<std::int32_t> ids{1, 2, 3, 4};
  Tape tape;
  TapeScope scope(tape);
  m.forward(ids, 1, 4);
  EXPECT_EQ(tape.size(), 0u);
}

TEST(DeepLinearTest, IdentityKeepsInput) {
  DeepLinearNet net = identity_deep_linear(3, 2);
  Tensor x = Tensor::of({2}, {0.3, -1.2});
  for (const auto& h : deep_linear_forward(net, x)) {
    EXPECT_EQ(h[0], 0.3);
    EXPECT_EQ(h[1], -1.2);
  }
}

TEST(DeepLinearTest, ScalarComposition) {
  DeepLinearNet net;
  net.weights = {Tensor::of({2, 2}, {2, 0, 0, 2}), Tensor::of({2, 2}, {3, 0, 0, 3})};
  auto h = deep_linear_forward(net, Tensor::of({2}, {1, 1}));
  ASSERT_EQ(h.size(), 3u);
  EXPECT_EQ(h[2][0], 6.0);
  EXPECT_EQ(h[2][1], 6.0);
}

TEST(DeepLinearTest, MatchesDenseProduct) {
  DeepLinearNet net = random_deep_linear(3, 2, 21);
  const double x[2] = {0.7, -0.4};
  // P = W2 W1 W0 by explicit 2x2 products.
  double p[2][2] = {{1, 0}, {0, 1}};
  for (const auto& w : net.weights) {
    double q[2][2];
    for (int i = 0; i < 2; ++i) {
      for (int j = 0; j < 2; ++j) q[i][j] = w[i * 2 + 0] * p[0][j] + w[i * 2 + 1] * p[1][j];
    }
    std::copy(&q[0][0], &q[0][0] + 4, &p[0][0]);
  }
  auto h = deep_linear_forward(net, Tensor::of({2}, {x[0], x[1]}));
  EXPECT_NEAR(h[3][0], p[0][0] * x[0] + p[0][1] * x[1], 1e-12);
  EXPECT_NEAR(h[3][1], p[1][0] * x[0] + p[1][1] * x[1], 1e-12);
}

}  // namespace
}  // namespace letlab
