// SPDX-License-Identifier: Apache-2.0

#include "letlab/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace letlab {

namespace {

double evaluate(const ScalarFn& fn, const std::vector<Tensor>& params) {
  Tensor out = fn(params);
  if (out.numel() != 1) throw ShapeError("grad_check: function returned shape " + shape_str(out.shape()));
  double v = out.item();
  if (!std::isfinite(v)) throw NumericalError("grad_check: function returned a non-finite value");
  return v;
}

}  // namespace

double grad_check(const ScalarFn& fn, const std::vector<Tensor>& params, double fd_step) {
  for (const auto& p : params) {
    if (!p.requires_grad()) throw Error("grad_check: every parameter must require gradients");
  }
  std::vector<Tensor> grads;
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = fn(params);
    if (loss.numel() != 1) throw ShapeError("grad_check: function returned shape " + shape_str(loss.shape()));
    if (!std::isfinite(loss.item())) throw NumericalError("grad_check: function returned a non-finite value");
    if (tape.contains(loss.id())) {
      GradientMap g = tape.backward(loss);
      for (const auto& p : params) grads.push_back(g.of(p));
    } else {
      for (const auto& p : params) grads.push_back(Tensor::zeros(p.shape()));
    }
  }

  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i];
    auto values = p.mutable_data();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double saved = values[j];
      values[j] = saved + fd_step;
      double up = evaluate(fn, params);
      values[j] = saved - fd_step;
      double down = evaluate(fn, params);
      values[j] = saved;
      double fd = (up - down) / (2.0 * fd_step);
      double err = std::abs(grads[i][j] - fd) / std::max(1.0, std::abs(fd));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace letlab
