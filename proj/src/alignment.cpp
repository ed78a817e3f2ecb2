// SPDX-License-Identifier: Apache-2.0

#include "letlab/alignment.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <memory>

#include "letlab/ops.hpp"

namespace letlab {

namespace {

constexpr std::string_view kVariantNames[] = {"L2E", "L2M", "L2L", "M2E", "M2M", "M2L"};

std::size_t ceil_half(std::size_t n) { return (n + 1) / 2; }

bool parse_count(std::string_view s, std::size_t& out) {
  if (s.empty()) return false;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

void check_same_shape(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.rank() == 0) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

Tensor reduce_tokens(const Tensor& per_token, TokenReduction reduction) {
  return reduction == TokenReduction::mean ? ops::mean(per_token) : ops::sum(per_token);
}

}  // namespace

std::string_view to_string(LossKind k) { return k == LossKind::cosine ? "cosine" : "logsum"; }

std::string_view to_string(TokenReduction r) { return r == TokenReduction::mean ? "mean" : "sum"; }

std::string_view to_string(LayerVariant v) { return kVariantNames[static_cast<int>(v)]; }

LossKind parse_loss_kind(std::string_view s) {
  if (s == "cosine") return LossKind::cosine;
  if (s == "logsum") return LossKind::logsum;
  throw ConfigError("unknown loss_kind '" + std::string(s) + "' (expected cosine or logsum)");
}

TokenReduction parse_token_reduction(std::string_view s) {
  if (s == "mean") return TokenReduction::mean;
  if (s == "sum") return TokenReduction::sum;
  throw ConfigError("unknown token_reduction '" + std::string(s) + "' (expected mean or sum)");
}

LayerPairStrategy LayerPairStrategy::named(LayerVariant v) {
  LayerPairStrategy s;
  s.variant = v;
  return s;
}

LayerPairStrategy LayerPairStrategy::from_end(std::size_t teacher_from_last, std::size_t target_layer) {
  LayerPairStrategy s;
  s.teacher_layer = teacher_from_last;
  s.target_layer = target_layer;
  s.teacher_from_end = true;
  return s;
}

LayerPairStrategy LayerPairStrategy::absolute(std::size_t teacher_layer, std::size_t target_layer) {
  LayerPairStrategy s;
  s.teacher_layer = teacher_layer;
  s.target_layer = target_layer;
  return s;
}

LayerPairStrategy LayerPairStrategy::parse(std::string_view text) {
  for (std::size_t i = 0; i < std::size(kVariantNames); ++i) {
    if (text == kVariantNames[i]) return named(static_cast<LayerVariant>(i));
  }
  auto dash = text.find('-');
  if (dash != std::string_view::npos && dash >= 2 && text.size() > dash + 2) {
    std::string_view left = text.substr(0, dash), right = text.substr(dash + 1);
    std::size_t a = 0, b = 0;
    if (parse_count(left.substr(1), a) && parse_count(right.substr(1), b) && a >= 1 && b >= 1) {
      if (left[0] == 'L' && right[0] == 'F') return from_end(a, b);
      if (left[0] == 'T' && right[0] == 'M') return absolute(a, b);
    }
  }
  throw ConfigError("unknown layer strategy '" + std::string(text) +
                    "' (expected L2E, L2M, L2L, M2E, M2M, M2L, Lx-Fy or Tx-My)");
}

std::string LayerPairStrategy::str() const {
  if (variant) return std::string(to_string(*variant));
  return (teacher_from_end ? "L" : "T") + std::to_string(teacher_layer) + (teacher_from_end ? "-F" : "-M") +
         std::to_string(target_layer);
}

LayerPair select_layers(const LayerPairStrategy& strategy, std::size_t teacher_layers, std::size_t target_layers,
                        std::size_t early_index) {
  LayerPair p{};
  if (strategy.variant) {
    switch (*strategy.variant) {
      case LayerVariant::L2E:
      case LayerVariant::L2M:
      case LayerVariant::L2L:
        p.teacher_layer = teacher_layers;
        break;
      default:
        p.teacher_layer = ceil_half(teacher_layers);
    }
    switch (*strategy.variant) {
      case LayerVariant::L2E:
      case LayerVariant::M2E:
        p.target_layer = early_index;
        break;
      case LayerVariant::L2M:
      case LayerVariant::M2M:
        p.target_layer = ceil_half(target_layers);
        break;
      default:
        p.target_layer = target_layers;
    }
  } else if (strategy.teacher_from_end) {
    p.teacher_layer = strategy.teacher_layer <= teacher_layers ? teacher_layers - strategy.teacher_layer + 1 : 0;
    p.target_layer = strategy.target_layer;
  } else {
    p = {strategy.teacher_layer, strategy.target_layer};
  }
  if (p.teacher_layer < 1 || p.teacher_layer > teacher_layers || p.target_layer < 1 || p.target_layer > target_layers) {
    throw ConfigError("layer strategy " + strategy.str() + " resolves outside the models (teacher layers " +
                      std::to_string(teacher_layers) + ", target layers " + std::to_string(target_layers) +
                      ", early layer " + std::to_string(early_index) + ")");
  }
  return p;
}

void AlignmentSpec::validate() const {
  if (!(lambda0 >= 0.0) || !std::isfinite(lambda0)) throw ConfigError("alignment: lambda0 must be finite and >= 0");
  if (s_stop < 1) throw ConfigError("alignment: s_stop must be >= 1");
  if (early_layer < 1) throw ConfigError("alignment: early_layer must be >= 1");
}

InterpolationPlan make_interpolation_plan(std::size_t source_dim, std::size_t target_dim) {
  if (source_dim == 0 || target_dim == 0) throw ShapeError("interpolate_hidden: dimensions must be positive");
  InterpolationPlan plan;
  plan.source_dim = source_dim;
  plan.target_dim = target_dim;
  for (std::size_t j = 0; j < target_dim; ++j) {
    // target_dim == 1 degenerates to the first source entry.
    double u = target_dim == 1 ? 0.0
                               : static_cast<double>(j * (source_dim - 1)) / static_cast<double>(target_dim - 1);
    auto lo = static_cast<std::size_t>(std::floor(u));
    double beta = u - static_cast<double>(lo);
    if (lo >= source_dim - 1) {
      lo = source_dim - 1;
      beta = 0.0;
    }
    plan.source_index.push_back(u);
    plan.lower.push_back(lo);
    plan.beta.push_back(beta);
  }
  return plan;
}

std::vector<double> interpolate_hidden(std::span<const double> h, std::size_t target_dim) {
  if (h.empty()) throw ShapeError("interpolate_hidden: empty input");
  if (h.size() == target_dim) return {h.begin(), h.end()};
  InterpolationPlan plan = make_interpolation_plan(h.size(), target_dim);
  std::vector<double> out(target_dim);
  for (std::size_t j = 0; j < target_dim; ++j) {
    std::size_t lo = plan.lower[j];
    double b = plan.beta[j];
    out[j] = b == 0.0 ? h[lo] : (1.0 - b) * h[lo] + b * h[lo + 1];
  }
  return out;
}

Tensor interpolate_hidden(const Tensor& h, std::size_t target_dim) {
  if (h.rank() == 0 || h.numel() == 0) throw ShapeError("interpolate_hidden: empty input");
  const std::size_t d = h.shape().back();
  auto plan = std::make_shared<InterpolationPlan>(make_interpolation_plan(d, target_dim));
  const std::size_t rows = h.numel() / d;
  auto in = h.data();
  Buffer out(rows * target_dim);
  for (std::size_t r = 0; r < rows; ++r) {
    if (d == target_dim) {
      std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(r * d), d, out.begin() + static_cast<std::ptrdiff_t>(r * d));
      continue;
    }
    for (std::size_t j = 0; j < target_dim; ++j) {
      std::size_t lo = plan->lower[j];
      double b = plan->beta[j];
      out[r * target_dim + j] = b == 0.0 ? in[r * d + lo] : (1.0 - b) * in[r * d + lo] + b * in[r * d + lo + 1];
    }
  }
  Shape shape = h.shape();
  shape.back() = target_dim;
  return emit("interpolate_hidden", std::move(shape), std::move(out), {h}, [plan, rows](const BackwardContext& ctx) {
    if (!ctx.needs(0)) return;
    const std::size_t d = plan->source_dim, w = plan->target_dim;
    auto g = ctx.grad_out();
    auto gx = ctx.grad_in(0);
    for (std::size_t r = 0; r < rows; ++r) {
      if (d == w) {
        for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += g[r * d + j];
        continue;
      }
      for (std::size_t j = 0; j < w; ++j) {
        std::size_t lo = plan->lower[j];
        double b = plan->beta[j];
        if (b == 0.0) {
          gx[r * d + lo] += g[r * w + j];
        } else {
          gx[r * d + lo] += (1.0 - b) * g[r * w + j];
          gx[r * d + lo + 1] += b * g[r * w + j];
        }
      }
    }
  });
}

Tensor proj_loss_cosine(const Tensor& h_m, const Tensor& h_t, TokenReduction reduction) {
  check_same_shape("proj_loss_cosine", h_m, h_t);
  Tensor nm = ops::l2_normalize_rows(h_m);
  Tensor nt = ops::l2_normalize_rows(h_t.detach());
  Tensor cos = ops::row_sum(ops::mul(nm, nt));
  return ops::scale(reduce_tokens(cos, reduction), -1.0);
}

Tensor proj_loss_logsum(const Tensor& h_m, const Tensor& h_t, TokenReduction reduction) {
  check_same_shape("proj_loss_logsum", h_m, h_t);
  Tensor diff = ops::sub(ops::l2_normalize_rows(h_m), ops::l2_normalize_rows(h_t.detach()));
  return reduce_tokens(ops::logsumexp_rows(ops::mul(diff, diff)), reduction);
}

ProjectionLoss projection_loss(LossKind kind) {
  if (kind == LossKind::cosine) return [](const Tensor& a, const Tensor& b, TokenReduction r) { return proj_loss_cosine(a, b, r); };
  return [](const Tensor& a, const Tensor& b, TokenReduction r) { return proj_loss_logsum(a, b, r); };
}

double lambda_at(std::size_t step, double lambda0, std::size_t s_stop) {
  if (step >= s_stop) return 0.0;
  const auto stop = static_cast<double>(s_stop);
  return lambda0 * ((stop - static_cast<double>(step)) / stop);
}

double cosine_similarity_metric(const Tensor& h_m, const Tensor& h_t) {
  check_same_shape("cosine_similarity_metric", h_m, h_t);
  const std::size_t d = h_m.shape().back();
  const std::size_t rows = h_m.numel() / d;
  auto a = h_m.data();
  auto b = h_t.data();
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      ab += a[r * d + i] * b[r * d + i];
      aa += a[r * d + i] * a[r * d + i];
      bb += b[r * d + i] * b[r * d + i];
    }
    total += ab / (std::max(std::sqrt(aa), ops::kNormalizeEps) * std::max(std::sqrt(bb), ops::kNormalizeEps));
  }
  return total / static_cast<double>(rows);
}

Tensor match_width(const Tensor& h_m, std::size_t teacher_dim) {
  return h_m.shape().back() == teacher_dim ? h_m : interpolate_hidden(h_m, teacher_dim);
}

}  // namespace letlab
