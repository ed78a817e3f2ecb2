// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives. Every op checks its input shapes, rejects
// non-finite results, and records itself on the active tape when any input
// requires a gradient.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "letlab/tensor.hpp"

namespace letlab::ops {

inline constexpr double kRmsNormEps = 1e-6;
inline constexpr double kNormalizeEps = 1e-12;

/// a [..., m, k] x b [k, n] -> [..., m, n]; or batched when both operands
/// carry the same leading batch dimensions.
Tensor matmul(const Tensor& a, const Tensor& b);
/// Swaps the last two dimensions.
Tensor transpose(const Tensor& x);

// Elementwise binaries. `b` may equal a's shape or a trailing suffix of it
// (broadcast over the leading dimensions).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);

Tensor relu(const Tensor& x);
/// Exact (erf) GELU.
Tensor gelu(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor log(const Tensor& x);

/// x / sqrt(mean(x^2) + 1e-6) * gain, over the last dimension.
Tensor rms_norm(const Tensor& x, const Tensor& gain);
/// x / max(||x||, 1e-12) over the last dimension.
Tensor l2_normalize_rows(const Tensor& x);
Tensor row_softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);
/// log(sum(exp(x))) over the last dimension; drops that dimension.
Tensor logsumexp_rows(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Sum over the last dimension; drops that dimension.
Tensor row_sum(const Tensor& x);

/// Rows of `table` [V, d] selected by `ids`; result shape is `index_shape` + [d].
Tensor gather_rows(const Tensor& table, std::span<const std::int32_t> ids, const Shape& index_shape);
/// x[..., ids[i]] for each leading row i; drops the last dimension.
Tensor pick(const Tensor& x, std::span<const std::int32_t> ids);

Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor reshape(const Tensor& x, Shape shape);

/// Rotary position embedding on x [B, T, heads * head_dim], rotating the
/// (i, i + head_dim/2) pairs of every head by position t.
Tensor rope(const Tensor& x, std::size_t num_heads, double base);

/// Causal scaled dot-product attention in token-major layout.
/// q [B, T, H * dh], k and v [B, T, Hkv * dh]; query head h reads kv head
/// h / (H / Hkv).
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t num_heads,
                        std::size_t num_kv_heads);

}  // namespace letlab::ops
