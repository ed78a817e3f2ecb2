// SPDX-License-Identifier: Apache-2.0

#include "letlab/model.hpp"

#include <cmath>
#include <cstring>

#include "letlab/ops.hpp"
#include "letlab/random.hpp"

namespace letlab {

namespace {

std::string layer_name(std::size_t layer, std::string_view what) {
  return "layers." + std::to_string(layer) + "." + std::string(what);
}

}  // namespace

std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::relu:
      return "relu";
    case Activation::gelu:
      return "gelu";
    case Activation::silu:
      return "silu";
    case Activation::swiglu:
      return "swiglu";
  }
  return "?";
}

Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::relu;
  if (name == "gelu") return Activation::gelu;
  if (name == "silu") return Activation::silu;
  if (name == "swiglu") return Activation::swiglu;
  throw ConfigError("unknown activation '" + std::string(name) + "' (expected relu, gelu, silu or swiglu)");
}

void ModelConfig::validate() const {
  if (vocab_size < 2) throw ConfigError("model: vocab_size must be >= 2");
  if (num_layers < 1) throw ConfigError("model: num_layers must be >= 1");
  if (hidden_size == 0 || intermediate_size == 0 || max_seq_len == 0) {
    throw ConfigError("model: hidden_size, intermediate_size and max_seq_len must be positive");
  }
  if (num_heads == 0 || num_kv_heads == 0) throw ConfigError("model: head counts must be positive");
  if (num_heads % num_kv_heads != 0) throw ConfigError("model: num_heads must be divisible by num_kv_heads");
  if (hidden_size % num_heads != 0) throw ConfigError("model: hidden_size must be divisible by num_heads");
  if (head_dim() % 2 != 0) throw ConfigError("model: rotary embeddings need an even head_dim");
  if (!(rope_base > 1.0)) throw ConfigError("model: rope_base must exceed 1");
}

std::size_t parameter_count(const ModelConfig& c) {
  const std::size_t d = c.hidden_size, kv = c.num_kv_heads * c.head_dim();
  const std::size_t mlp = (c.activation == Activation::swiglu ? 3 : 2) * d * c.intermediate_size;
  const std::size_t per_layer = 2 * d + d * d + 2 * d * kv + d * d + mlp;
  return c.vocab_size * d + c.num_layers * per_layer + d + (c.tie_embeddings ? 0 : d * c.vocab_size);
}

TransformerModel::TransformerModel(ModelConfig config, std::vector<NamedTensor> params)
    : config_(std::move(config)), params_(std::move(params)) {
  config_.validate();
  bind();
}

void TransformerModel::bind() {
  auto find = [this](const std::string& name, const Shape& shape) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (params_[i].name == name) {
        if (params_[i].value.shape() != shape) {
          throw ConfigError("model: parameter " + name + " has shape " + shape_str(params_[i].value.shape()) +
                            ", expected " + shape_str(shape));
        }
        return i;
      }
    }
    throw ConfigError("model: missing parameter " + name);
  };
  const std::size_t d = config_.hidden_size, v = config_.vocab_size, f = config_.intermediate_size;
  const std::size_t kv = config_.num_kv_heads * config_.head_dim();
  std::size_t expected = 2 + config_.num_layers * (config_.activation == Activation::swiglu ? 9 : 8) +
                         (config_.tie_embeddings ? 0 : 1);
  if (params_.size() != expected) {
    throw ConfigError("model: expected " + std::to_string(expected) + " parameter tensors, got " +
                      std::to_string(params_.size()));
  }
  embed_ = find("embed", {v, d});
  layers_.clear();
  for (std::size_t l = 1; l <= config_.num_layers; ++l) {
    LayerSlots s{};
    s.attn_norm = find(layer_name(l, "attn_norm"), {d});
    s.wq = find(layer_name(l, "wq"), {d, d});
    s.wk = find(layer_name(l, "wk"), {d, kv});
    s.wv = find(layer_name(l, "wv"), {d, kv});
    s.wo = find(layer_name(l, "wo"), {d, d});
    s.mlp_norm = find(layer_name(l, "mlp_norm"), {d});
    s.w_gate = config_.activation == Activation::swiglu ? find(layer_name(l, "w_gate"), {d, f}) : 0;
    s.w_up = find(layer_name(l, "w_up"), {d, f});
    s.w_down = find(layer_name(l, "w_down"), {f, d});
    layers_.push_back(s);
  }
  final_norm_ = find("final_norm", {d});
  if (!config_.tie_embeddings) lm_head_ = find("lm_head", {d, v});
}

const Tensor& TransformerModel::param(std::string_view name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p.value;
  }
  throw Error("model: no parameter named " + std::string(name));
}

ForwardResult TransformerModel::forward(const TokenBatch& batch) const {
  return forward(batch.inputs, batch.batch, batch.seq);
}

ForwardResult TransformerModel::forward(std::span<const std::int32_t> ids, std::size_t batch, std::size_t seq) const {
  if (seq > config_.max_seq_len) {
    throw ShapeError("forward: sequence length " + std::to_string(seq) + " exceeds max_seq_len " +
                     std::to_string(config_.max_seq_len));
  }
  if (ids.size() != batch * seq) {
    throw ShapeError("forward: " + std::to_string(ids.size()) + " ids for batch " + std::to_string(batch) + " x seq " +
                     std::to_string(seq));
  }
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= config_.vocab_size) {
      throw Error("forward: token id " + std::to_string(ids[i]) + " at batch " + std::to_string(i / seq) +
                  " position " + std::to_string(i % seq) + " is outside vocab_size " +
                  std::to_string(config_.vocab_size));
    }
  }
  ForwardResult result;
  Tensor x = ops::gather_rows(at(embed_), ids, {batch, seq});
  result.hidden.push_back(x);
  for (std::size_t l = 1; l <= config_.num_layers; ++l) {
    x = apply_layer(l, x);
    result.hidden.push_back(x);
  }
  result.logits = head(x);
  return result;
}

Tensor TransformerModel::apply_layer(std::size_t layer, const Tensor& x) const {
  const LayerSlots& s = layers_.at(layer - 1);
  const auto& c = config_;
  Tensor a = ops::rms_norm(x, at(s.attn_norm));
  Tensor q = ops::rope(ops::matmul(a, at(s.wq)), c.num_heads, c.rope_base);
  Tensor k = ops::rope(ops::matmul(a, at(s.wk)), c.num_kv_heads, c.rope_base);
  Tensor v = ops::matmul(a, at(s.wv));
  Tensor att = ops::causal_attention(q, k, v, c.num_heads, c.num_kv_heads);
  Tensor h = ops::add(x, ops::matmul(att, at(s.wo)));

  Tensor m = ops::rms_norm(h, at(s.mlp_norm));
  Tensor f;
  switch (c.activation) {
    case Activation::swiglu:
      f = ops::mul(ops::silu(ops::matmul(m, at(s.w_gate))), ops::matmul(m, at(s.w_up)));
      break;
    case Activation::relu:
      f = ops::relu(ops::matmul(m, at(s.w_up)));
      break;
    case Activation::gelu:
      f = ops::gelu(ops::matmul(m, at(s.w_up)));
      break;
    case Activation::silu:
      f = ops::silu(ops::matmul(m, at(s.w_up)));
      break;
  }
  return ops::add(h, ops::matmul(f, at(s.w_down)));
}

Tensor TransformerModel::head(const Tensor& x) const {
  Tensor n = ops::rms_norm(x, at(final_norm_));
  return config_.tie_embeddings ? ops::matmul(n, ops::transpose(at(embed_))) : ops::matmul(n, at(lm_head_));
}

void TransformerModel::set_trainable(bool trainable) {
  for (auto& p : params_) p.value.set_requires_grad(trainable);
}

TransformerModel TransformerModel::clone() const {
  std::vector<NamedTensor> copy;
  copy.reserve(params_.size());
  for (const auto& p : params_) {
    Tensor t = p.value.detach();
    t.set_requires_grad(p.value.requires_grad());
    copy.push_back({p.name, t});
  }
  return TransformerModel(config_, std::move(copy));
}

std::uint64_t TransformerModel::parameter_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : params_) {
    for (double v : p.value.data()) {
      unsigned char bytes[sizeof(double)];
      std::memcpy(bytes, &v, sizeof v);
      for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
      }
    }
  }
  return h;
}

std::size_t TransformerModel::num_parameters() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

TransformerModel init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  constexpr double stddev = 0.02;
  const double residual_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config.num_layers));
  const std::size_t d = config.hidden_size, v = config.vocab_size, f = config.intermediate_size;
  const std::size_t kv = config.num_kv_heads * config.head_dim();

  std::vector<NamedTensor> params;
  auto normal = [&](std::string name, Shape shape, double factor) {
    std::vector<double> values(numel(shape));
    for (double& x : values) x = rng.truncated_normal(stddev) * factor;
    params.push_back({std::move(name), Tensor(std::move(shape), std::move(values), true)});
  };
  auto ones = [&](std::string name, std::size_t n) {
    params.push_back({std::move(name), Tensor::full({n}, 1.0, true)});
  };

  normal("embed", {v, d}, 1.0);
  for (std::size_t l = 1; l <= config.num_layers; ++l) {
    ones(layer_name(l, "attn_norm"), d);
    normal(layer_name(l, "wq"), {d, d}, 1.0);
    normal(layer_name(l, "wk"), {d, kv}, 1.0);
    normal(layer_name(l, "wv"), {d, kv}, 1.0);
    normal(layer_name(l, "wo"), {d, d}, residual_scale);
    ones(layer_name(l, "mlp_norm"), d);
    if (config.activation == Activation::swiglu) normal(layer_name(l, "w_gate"), {d, f}, 1.0);
    normal(layer_name(l, "w_up"), {d, f}, 1.0);
    normal(layer_name(l, "w_down"), {f, d}, residual_scale);
  }
  ones("final_norm", d);
  if (!config.tie_embeddings) normal("lm_head", {d, v}, 1.0);
  return TransformerModel(config, std::move(params));
}

DeepLinearNet random_deep_linear(std::size_t depth, std::size_t dim, std::uint64_t seed) {
  if (depth == 0 || dim == 0) throw ConfigError("deep linear net: depth and dim must be positive");
  Rng rng(seed);
  const double sd = 1.0 / std::sqrt(static_cast<double>(dim));
  DeepLinearNet net;
  for (std::size_t l = 0; l < depth; ++l) {
    std::vector<double> w(dim * dim);
    for (double& x : w) x = rng.normal() * sd;
    net.weights.emplace_back(Shape{dim, dim}, std::move(w), true);
  }
  return net;
}

DeepLinearNet identity_deep_linear(std::size_t depth, std::size_t dim) {
  DeepLinearNet net;
  for (std::size_t l = 0; l < depth; ++l) {
    std::vector<double> w(dim * dim, 0.0);
    for (std::size_t i = 0; i < dim; ++i) w[i * dim + i] = 1.0;
    net.weights.emplace_back(Shape{dim, dim}, std::move(w), true);
  }
  return net;
}

HiddenStates deep_linear_forward(const DeepLinearNet& net, const Tensor& x) {
  const std::size_t d = net.dim();
  if (x.rank() != 1 || x.dim(0) != d) {
    throw ShapeError("deep_linear_forward: input " + shape_str(x.shape()) + " does not match width " + std::to_string(d));
  }
  HiddenStates hs{x};
  for (const auto& w : net.weights) hs.push_back(ops::matmul(w, hs.back()));
  return hs;
}

}  // namespace letlab
