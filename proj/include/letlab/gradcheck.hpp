// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <vector>

#include "letlab/tensor.hpp"

namespace letlab {

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Largest |autodiff - central difference| / max(1, |central difference|)
/// over every entry of `params`. Each parameter must require gradients; its
/// values are perturbed in place and restored bit-for-bit afterwards.
double grad_check(const ScalarFn& fn, const std::vector<Tensor>& params, double fd_step = 1e-5);

}  // namespace letlab
