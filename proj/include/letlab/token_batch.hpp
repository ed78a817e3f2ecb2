// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace letlab {

/// Row-major batch x seq token ids; targets are the inputs shifted by one
/// corpus position.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::int32_t> inputs;
  std::vector<std::int32_t> targets;

  bool operator==(const TokenBatch&) const = default;
};

}  // namespace letlab
