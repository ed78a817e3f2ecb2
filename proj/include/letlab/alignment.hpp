// SPDX-License-Identifier: Apache-2.0
//
// Hidden-state alignment between a target model and a frozen smaller model:
// layer pairing, hidden-dimension interpolation, projection losses, the
// decaying alignment weight, and the cosine-similarity diagnostic.

#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "letlab/tensor.hpp"

namespace letlab {

enum class LossKind { cosine, logsum };
enum class TokenReduction { mean, sum };
enum class LayerVariant { L2E, L2M, L2L, M2E, M2M, M2L };

std::string_view to_string(LossKind k);
std::string_view to_string(TokenReduction r);
std::string_view to_string(LayerVariant v);
LossKind parse_loss_kind(std::string_view s);
TokenReduction parse_token_reduction(std::string_view s);

/// Which teacher layer guides which target layer. Either a named variant
/// (teacher last/middle x target early/middle/last), an "Lx-Fy" pair (x-th
/// teacher layer counted from the end, y-th target layer from the front), or
/// an absolute (teacher_layer, target_layer) pair.
struct LayerPairStrategy {
  std::optional<LayerVariant> variant;
  std::size_t teacher_layer = 0;
  std::size_t target_layer = 0;
  bool teacher_from_end = false;

  static LayerPairStrategy named(LayerVariant v);
  static LayerPairStrategy from_end(std::size_t teacher_from_last, std::size_t target_layer);
  static LayerPairStrategy absolute(std::size_t teacher_layer, std::size_t target_layer);
  /// Accepts L2E, L2M, L2L, M2E, M2M, M2L, "Lx-Fy" and "Tx-My".
  static LayerPairStrategy parse(std::string_view text);
  std::string str() const;

  bool operator==(const LayerPairStrategy&) const = default;
};

struct LayerPair {
  std::size_t teacher_layer;
  std::size_t target_layer;

  bool operator==(const LayerPair&) const = default;
};

inline constexpr std::size_t kDefaultEarlyLayer = 3;

/// Resolves a strategy to 1-based layer indices. Middle is ceil(L / 2).
LayerPair select_layers(const LayerPairStrategy& strategy, std::size_t teacher_layers, std::size_t target_layers,
                        std::size_t early_index = kDefaultEarlyLayer);

struct AlignmentSpec {
  LayerPairStrategy strategy = LayerPairStrategy::named(LayerVariant::L2E);
  LossKind loss_kind = LossKind::cosine;
  double lambda0 = 0.1;
  std::size_t s_stop = 1500;
  TokenReduction token_reduction = TokenReduction::mean;
  std::size_t early_layer = kDefaultEarlyLayer;

  void validate() const;
  bool operator==(const AlignmentSpec&) const = default;
};

/// Per output coordinate j: source position u_j = j (d_M - 1) / (d_T - 1),
/// lower index floor(u_j) and weight beta_j = u_j - floor(u_j).
struct InterpolationPlan {
  std::size_t source_dim = 0;
  std::size_t target_dim = 0;
  std::vector<double> source_index;
  std::vector<std::size_t> lower;
  std::vector<double> beta;
};

InterpolationPlan make_interpolation_plan(std::size_t source_dim, std::size_t target_dim);

/// One vector, source_dim -> target_dim.
std::vector<double> interpolate_hidden(std::span<const double> h, std::size_t target_dim);
/// Differentiable, applied independently to every row of the last dimension.
Tensor interpolate_hidden(const Tensor& h, std::size_t target_dim);

/// -cos(h_M, h_T) per token, reduced over batch and positions. h_T is
/// treated as a constant.
Tensor proj_loss_cosine(const Tensor& h_m, const Tensor& h_t, TokenReduction reduction = TokenReduction::mean);

/// log-sum-exp over features of the squared difference between the
/// L2-normalized vectors, per token, then reduced. h_T is a constant.
Tensor proj_loss_logsum(const Tensor& h_m, const Tensor& h_t, TokenReduction reduction = TokenReduction::mean);

using ProjectionLoss = std::function<Tensor(const Tensor&, const Tensor&, TokenReduction)>;
ProjectionLoss projection_loss(LossKind kind);

/// lambda0 * max(0, (s_stop - s) / s_stop).
double lambda_at(std::size_t step, double lambda0, std::size_t s_stop);

/// Mean over all rows of cos(h_M, h_T). Diagnostic only, never recorded.
double cosine_similarity_metric(const Tensor& h_m, const Tensor& h_t);

/// Brings the target model's hidden state to the teacher's width when they
/// differ; returns it unchanged otherwise.
Tensor match_width(const Tensor& h_m, std::size_t teacher_dim);

}  // namespace letlab
