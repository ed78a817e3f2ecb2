// SPDX-License-Identifier: Apache-2.0
//
// Decoder-only transformer (RMSNorm, rotary attention with optional
// grouped-query heads, gated or plain MLP) that exposes every layer's
// residual stream, plus the bias-free deep linear network used by the
// curvature checks.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "letlab/tensor.hpp"
#include "letlab/token_batch.hpp"

namespace letlab {

enum class Activation { relu, gelu, silu, swiglu };

std::string_view to_string(Activation a);
Activation parse_activation(std::string_view name);

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t hidden_size = 64;
  std::size_t intermediate_size = 128;
  std::size_t num_layers = 2;
  std::size_t num_heads = 4;
  std::size_t num_kv_heads = 4;
  Activation activation = Activation::swiglu;
  std::size_t max_seq_len = 128;
  bool tie_embeddings = true;
  double rope_base = 10000.0;

  /// Throws ConfigError on an inconsistent configuration.
  void validate() const;
  std::size_t head_dim() const { return hidden_size / num_heads; }

  bool operator==(const ModelConfig&) const = default;
};

/// Closed-form parameter count for `config`.
std::size_t parameter_count(const ModelConfig& config);

struct NamedTensor {
  std::string name;
  Tensor value;
};

/// Residual-stream snapshots: entry 0 is the embedding output, entry l the
/// output of layer l. Each is [batch, seq, hidden].
using HiddenStates = std::vector<Tensor>;

struct ForwardResult {
  Tensor logits;  // [batch, seq, vocab]
  HiddenStates hidden;
};

class TransformerModel {
 public:
  /// Adopts `params`, which must match the layout `init_params` produces.
  TransformerModel(ModelConfig config, std::vector<NamedTensor> params);

  const ModelConfig& config() const { return config_; }
  const std::vector<NamedTensor>& parameters() const { return params_; }
  std::vector<NamedTensor>& parameters() { return params_; }
  const Tensor& param(std::string_view name) const;

  ForwardResult forward(const TokenBatch& batch) const;
  ForwardResult forward(std::span<const std::int32_t> ids, std::size_t batch, std::size_t seq) const;

  /// Applies transformer layer `layer` (1-based) to a residual stream.
  Tensor apply_layer(std::size_t layer, const Tensor& x) const;
  /// Final norm plus output head.
  Tensor head(const Tensor& x) const;

  void set_trainable(bool trainable);
  /// Deep copy with fresh tensor identities.
  TransformerModel clone() const;
  /// FNV-1a over the parameter bytes in manifest order.
  std::uint64_t parameter_hash() const;
  std::size_t num_parameters() const;

 private:
  struct LayerSlots {
    std::size_t attn_norm, wq, wk, wv, wo, mlp_norm, w_gate, w_up, w_down;
  };

  void bind();
  const Tensor& at(std::size_t slot) const { return params_[slot].value; }

  ModelConfig config_;
  std::vector<NamedTensor> params_;
  std::size_t embed_ = 0, final_norm_ = 0, lm_head_ = 0;
  std::vector<LayerSlots> layers_;
};

/// Truncated-normal(0.02) weights, residual output projections scaled by
/// 1/sqrt(2 L), unit norm gains. Deterministic in `seed`.
TransformerModel init_params(const ModelConfig& config, std::uint64_t seed);

/// h^(l+1) = W^(l) h^(l), no biases or nonlinearity.
struct DeepLinearNet {
  std::vector<Tensor> weights;  // each [d, d]

  std::size_t depth() const { return weights.size(); }
  std::size_t dim() const { return weights.empty() ? 0 : weights.front().dim(0); }
};

/// Entries scaled so the product stays O(1): N(0, 1/d) per entry.
DeepLinearNet random_deep_linear(std::size_t depth, std::size_t dim, std::uint64_t seed);
DeepLinearNet identity_deep_linear(std::size_t depth, std::size_t dim);

/// All intermediate states h^(0) = x, ..., h^(L).
HiddenStates deep_linear_forward(const DeepLinearNet& net, const Tensor& x);

}  // namespace letlab
