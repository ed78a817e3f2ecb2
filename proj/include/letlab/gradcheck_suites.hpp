// SPDX-License-Identifier: Apache-2.0
//
// Named finite-difference suites behind `let_lab gradcheck`.

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace letlab {

enum class GradCheckScope { primitives, losses, model };

GradCheckScope parse_gradcheck_scope(std::string_view s);
std::string_view to_string(GradCheckScope s);

struct GradCheckItem {
  std::string name;
  /// Worst relative error over all seeds.
  double worst = 0.0;
  std::size_t seeds = 0;
};

inline constexpr double kGradCheckThreshold = 1e-4;

/// Every item in `scope`, each evaluated on `seeds` random draws.
std::vector<GradCheckItem> run_gradcheck_suite(GradCheckScope scope, std::size_t seeds = 20, std::uint64_t base_seed = 0,
                                               double fd_step = 1e-5);

}  // namespace letlab
