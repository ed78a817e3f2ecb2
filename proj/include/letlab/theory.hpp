// SPDX-License-Identifier: Apache-2.0
//
// Curvature checks on deep linear networks: the alignment loss at depth k
// cannot depend on layers k and above, so its gradient and every Hessian
// block touching those layers vanish, and the Hessian norm is bounded by
// k times the largest live block norm.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "letlab/metrics.hpp"
#include "letlab/model.hpp"

namespace letlab {

/// Dense n x n row-major matrix.
struct SquareMatrix {
  std::size_t n = 0;
  std::vector<double> values;

  double operator()(std::size_t i, std::size_t j) const { return values[i * n + j]; }
  double& operator()(std::size_t i, std::size_t j) { return values[i * n + j]; }
  double frobenius() const;
};

using FlatFn = std::function<double(std::span<const double>)>;

/// Central second differences, then (H + H^T) / 2.
SquareMatrix numeric_hessian(const FlatFn& f, std::span<const double> params, double fd_step = 1e-4);

inline constexpr double kDefaultHessianStep = 1e-4;
inline constexpr std::size_t kMaxHessianParams = 400;

/// Weights of all layers, layer-major, each row-major.
std::vector<double> flatten(const DeepLinearNet& net);

/// -cos(h^(k), target) as a plain function of the flattened weights.
FlatFn deep_linear_alignment_loss(std::size_t depth, std::size_t dim, std::size_t k, std::vector<double> x,
                                  std::vector<double> target);

/// Same loss through the autodiff tape; h^(k) comes from deep_linear_forward.
Tensor deep_linear_alignment_loss(const DeepLinearNet& net, std::size_t k, const Tensor& x, const Tensor& target);

enum class GradientMethod { autodiff, finite_difference };

/// Largest |dL/dW^(j)| entry over layers j >= k (0-based). 0 when no layer
/// qualifies.
double verify_gradient_vanishing(const DeepLinearNet& net, std::size_t k, const Tensor& x, const Tensor& target,
                                 GradientMethod method = GradientMethod::autodiff, double fd_step = 1e-6);

struct HessianReport {
  std::size_t depth = 0;
  std::size_t dim = 0;
  std::size_t k = 0;
  double fd_step = kDefaultHessianStep;
  /// depth x depth Frobenius norms of the d^2 x d^2 blocks.
  std::vector<std::vector<double>> block_norms;
  /// Largest |entry| over blocks (i, j) with i >= k or j >= k.
  double forbidden_max = 0.0;
  /// Same, recomputed at fd_step / 2.
  double forbidden_max_half_step = 0.0;
  double total_frobenius = 0.0;
  /// sqrt of the sum of squared live block norms.
  double block_accumulated = 0.0;
  double max_asymmetry = 0.0;
  /// Largest live block norm.
  double c = 0.0;
  double bound = 0.0;

  bool forbidden_ok(double tolerance) const { return forbidden_max < tolerance; }
  bool noise_scaling_ok() const { return forbidden_max_half_step <= 0.5 * forbidden_max; }
  bool bound_ok() const { return total_frobenius <= bound; }
  std::size_t live_blocks() const { return k * k; }
};

/// Throws ConfigError when depth * dim^2 exceeds kMaxHessianParams.
HessianReport verify_block_structure(const DeepLinearNet& net, std::size_t k, const Tensor& x, const Tensor& target,
                                     double fd_step = kDefaultHessianStep);

struct SweepOptions {
  std::size_t depth = 4;
  std::size_t dim = 2;
  std::vector<std::size_t> k_values{1, 2, 3};
  std::size_t trials = 10;
  std::uint64_t seed = 0;
  double fd_step = kDefaultHessianStep;
  /// Identity weights with input and target fixed across trials.
  bool identity = false;
  double forbidden_tolerance = 1e-6;
};

struct SweepRow {
  std::size_t k;
  double mean_frobenius;
  double std_frobenius;
  double max_frobenius;
  /// k * C with C the largest live block norm over every trial and k.
  double bound;
  bool every_trial_bounded;
};

struct SweepResult {
  SweepOptions options;
  std::vector<SweepRow> rows;
  /// reports[t][i] for trial t and options.k_values[i].
  std::vector<std::vector<HessianReport>> reports;
  double global_c = 0.0;

  bool forbidden_ok() const;
  bool noise_scaling_ok() const;
  bool bounds_ok() const;
  bool monotone_bound() const;
  bool passed() const;
};

SweepResult curvature_sweep(const SweepOptions& options);

Table sweep_table(const SweepResult& r);
/// One row per (trial, k, block i, block j).
Table block_table(const SweepResult& r);
nlohmann::json sweep_summary(const SweepResult& r);

}  // namespace letlab
