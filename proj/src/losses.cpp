// SPDX-License-Identifier: Apache-2.0

#include "letlab/losses.hpp"

#include <cmath>

#include "letlab/ops.hpp"

namespace letlab {

Tensor loss_nll(const Tensor& logits, std::span<const std::int32_t> targets) {
  if (logits.rank() < 2 || logits.numel() / logits.dim(-1) != targets.size()) {
    throw ShapeError("loss_nll: logits " + shape_str(logits.shape()) + " vs " + std::to_string(targets.size()) +
                     " targets");
  }
  return ops::scale(ops::mean(ops::pick(ops::log_softmax(logits), targets)), -1.0);
}

Tensor loss_rkd(const Tensor& student_logits, const Tensor& teacher_logits, double temperature) {
  if (student_logits.shape() != teacher_logits.shape() || student_logits.rank() < 1) {
    throw ShapeError("loss_rkd: shape mismatch " + shape_str(student_logits.shape()) + " vs " +
                     shape_str(teacher_logits.shape()));
  }
  if (!(temperature > 0.0)) throw ConfigError("loss_rkd: temperature must be positive");
  const double inv = 1.0 / temperature;
  Tensor teacher = teacher_logits.detach();
  Tensor p_t = ops::row_softmax(inv == 1.0 ? teacher : ops::scale(teacher, inv));
  Tensor log_p_m = ops::log_softmax(inv == 1.0 ? student_logits : ops::scale(student_logits, inv));
  return ops::scale(ops::mean(ops::row_sum(ops::mul(log_p_m, p_t))), -1.0);
}

Tensor loss_total(const Tensor& nll, const Tensor& proj, std::size_t step, const AlignmentSpec& spec) {
  double lambda = lambda_at(step, spec.lambda0, spec.s_stop);
  if (lambda == 0.0) return nll;
  return ops::add(nll, ops::scale(proj, lambda));
}

}  // namespace letlab
