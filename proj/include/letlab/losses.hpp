// SPDX-License-Identifier: Apache-2.0
//
// Language-modeling objectives: next-token NLL, output distillation from a
// frozen model, and the alignment-weighted total.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

#include "letlab/alignment.hpp"
#include "letlab/tensor.hpp"

namespace letlab {

/// Mean over positions of -log softmax(logits)[target]. logits [B, T, V],
/// targets B * T ids.
Tensor loss_nll(const Tensor& logits, std::span<const std::int32_t> targets);

/// Mean over positions of -sum_v P_T(v) log P_M(v), both softened by
/// `temperature`. The teacher logits are treated as constants.
Tensor loss_rkd(const Tensor& student_logits, const Tensor& teacher_logits, double temperature = 1.0);

/// nll + lambda_at(step) * proj. Returns `nll` itself once the weight is 0.
Tensor loss_total(const Tensor& nll, const Tensor& proj, std::size_t step, const AlignmentSpec& spec);

}  // namespace letlab
