// SPDX-License-Identifier: Apache-2.0

#include "letlab/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <string>

namespace letlab::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatView = Eigen::Map<RowMat>;
using ConstMatView = Eigen::Map<const RowMat>;
using StridedView = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedView = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

ConstMatView view(std::span<const double> d, std::size_t rows, std::size_t cols) {
  return ConstMatView(d.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

MatView view(std::span<double> d, std::size_t rows, std::size_t cols) {
  return MatView(d.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

[[noreturn]] void shape_fail(std::string_view op, const Shape& a, const Shape& b, std::string_view why) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b) + " (" +
                   std::string(why) + ")");
}

std::size_t last_dim(std::string_view op, const Tensor& x) {
  if (x.rank() == 0) throw ShapeError(std::string(op) + ": needs rank >= 1, got a scalar");
  return x.shape().back();
}

Shape drop_last(const Shape& s) { return Shape(s.begin(), s.end() - 1); }

// Size of the broadcast block when `b` is a trailing suffix of `a`.
std::size_t suffix_block(std::string_view op, const Shape& a, const Shape& b) {
  if (b.size() > a.size() || !std::equal(b.rbegin(), b.rend(), a.rbegin())) {
    shape_fail(op, a, b, "second operand must match or be a trailing suffix of the first");
  }
  return numel(b);
}

template <typename F, typename G>
Tensor unary(std::string_view op, const Tensor& x, F forward, G derivative) {
  auto in = x.data();
  Buffer out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = forward(in[i]);
  return emit(op, x.shape(), std::move(out), {x}, [derivative](const BackwardContext& ctx) {
    if (!ctx.needs(0)) return;
    auto xin = ctx.input(0).data();
    auto g = ctx.grad_out();
    auto gx = ctx.grad_in(0);
    for (std::size_t i = 0; i < xin.size(); ++i) gx[i] += g[i] * derivative(xin[i]);
  });
}

// Sums `g` over the broadcast (leading) dimensions into `dst` of size `block`.
void reduce_into(std::span<const double> g, std::span<double> dst, std::size_t block) {
  for (std::size_t o = 0; o < g.size(); o += block) {
    for (std::size_t i = 0; i < block; ++i) dst[i] += g[o + i];
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  constexpr std::string_view op = "matmul";
  if (a.rank() == 0 || b.rank() == 0) shape_fail(op, a.shape(), b.shape(), "scalars are not matrices");

  if (b.rank() <= 2) {
    std::size_t k = b.dim(0);
    std::size_t n = b.rank() == 2 ? b.dim(1) : 1;
    if (a.shape().back() != k) shape_fail(op, a.shape(), b.shape(), "inner dimensions differ");
    std::size_t m = a.numel() / k;
    Shape out_shape = drop_last(a.shape());
    if (b.rank() == 2) out_shape.push_back(n);
    Buffer out(m * n);
    view(std::span<double>(out), m, n).noalias() = view(a.data(), m, k) * view(b.data(), k, n);
    return emit(op, std::move(out_shape), std::move(out), {a, b}, [m, k, n](const BackwardContext& ctx) {
      auto g = view(ctx.grad_out(), m, n);
      if (ctx.needs(0)) view(ctx.grad_in(0), m, k).noalias() += g * view(ctx.input(1).data(), k, n).transpose();
      if (ctx.needs(1)) view(ctx.grad_in(1), k, n).noalias() += view(ctx.input(0).data(), m, k).transpose() * g;
    });
  }

  if (a.rank() != b.rank() || !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
    shape_fail(op, a.shape(), b.shape(), "batched operands need identical leading dimensions");
  }
  std::size_t m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  if (b.dim(-2) != k) shape_fail(op, a.shape(), b.shape(), "inner dimensions differ");
  std::size_t batch = a.numel() / (m * k);
  Shape out_shape = a.shape();
  out_shape.back() = n;
  Buffer out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    view(std::span<double>(out).subspan(i * m * n, m * n), m, n).noalias() =
        view(a.data().subspan(i * m * k, m * k), m, k) * view(b.data().subspan(i * k * n, k * n), k, n);
  }
  return emit(op, std::move(out_shape), std::move(out), {a, b}, [batch, m, k, n](const BackwardContext& ctx) {
    for (std::size_t i = 0; i < batch; ++i) {
      auto g = view(ctx.grad_out().subspan(i * m * n, m * n), m, n);
      if (ctx.needs(0)) {
        view(ctx.grad_in(0).subspan(i * m * k, m * k), m, k).noalias() +=
            g * view(ctx.input(1).data().subspan(i * k * n, k * n), k, n).transpose();
      }
      if (ctx.needs(1)) {
        view(ctx.grad_in(1).subspan(i * k * n, k * n), k, n).noalias() +=
            view(ctx.input(0).data().subspan(i * m * k, m * k), m, k).transpose() * g;
      }
    }
  });
}

Tensor transpose(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("transpose: needs rank >= 2, got " + shape_str(x.shape()));
  std::size_t r = x.dim(-2), c = x.dim(-1);
  std::size_t batch = x.numel() / (r * c);
  Shape out_shape = x.shape();
  std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
  Buffer out(x.numel());
  auto in = x.data();
  for (std::size_t b = 0; b < batch; ++b) {
    view(std::span<double>(out).subspan(b * r * c, r * c), c, r) = view(in.subspan(b * r * c, r * c), r, c).transpose();
  }
  return emit("transpose", std::move(out_shape), std::move(out), {x}, [batch, r, c](const BackwardContext& ctx) {
    if (!ctx.needs(0)) return;
    for (std::size_t b = 0; b < batch; ++b) {
      view(ctx.grad_in(0).subspan(b * r * c, r * c), r, c) += view(ctx.grad_out().subspan(b * r * c, r * c), c, r).transpose();
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  std::size_t block = suffix_block("add", a.shape(), b.shape());
  auto av = a.data();
  auto bv = b.data();
  Buffer out(av.size());
  for (std::size_t o = 0; o < av.size(); o += block) {
    for (std::size_t i = 0; i < block; ++i) out[o + i] = av[o + i] + bv[i];
  }
  return emit("add", a.shape(), std::move(out), {a, b}, [block](const BackwardContext& ctx) {
    auto g = ctx.grad_out();
    if (ctx.needs(0)) {
      auto ga = ctx.grad_in(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (ctx.needs(1)) reduce_into(g, ctx.grad_in(1), block);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  std::size_t block = suffix_block("sub", a.shape(), b.shape());
  auto av = a.data();
  auto bv = b.data();
  Buffer out(av.size());
  for (std::size_t o = 0; o < av.size(); o += block) {
    for (std::size_t i = 0; i < block; ++i) out[o + i] = av[o + i] - bv[i];
  }
  return emit("sub", a.shape(), std::move(out), {a, b}, [block](const BackwardContext& ctx) {
    auto g = ctx.grad_out();
    if (ctx.needs(0)) {
      auto ga = ctx.grad_in(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (ctx.needs(1)) {
      auto gb = ctx.grad_in(1);
      for (std::size_t o = 0; o < g.size(); o += block) {
        for (std::size_t i = 0; i < block; ++i) gb[i] -= g[o + i];
      }
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  std::size_t block = suffix_block("mul", a.shape(), b.shape());
  auto av = a.data();
  auto bv = b.data();
  Buffer out(av.size());
  for (std::size_t o = 0; o < av.size(); o += block) {
    for (std::size_t i = 0; i < block; ++i) out[o + i] = av[o + i] * bv[i];
  }
  return emit("mul", a.shape(), std::move(out), {a, b}, [block](const BackwardContext& ctx) {
    auto g = ctx.grad_out();
    auto av = ctx.input(0).data();
    auto bv = ctx.input(1).data();
    if (ctx.needs(0)) {
      auto ga = ctx.grad_in(0);
      for (std::size_t o = 0; o < g.size(); o += block) {
        for (std::size_t i = 0; i < block; ++i) ga[o + i] += g[o + i] * bv[i];
      }
    }
    if (ctx.needs(1)) {
      auto gb = ctx.grad_in(1);
      for (std::size_t o = 0; o < g.size(); o += block) {
        for (std::size_t i = 0; i < block; ++i) gb[i] += g[o + i] * av[o + i];
      }
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  return unary("scale", x, [factor](double v) { return v * factor; }, [factor](double) { return factor; });
}

Tensor relu(const Tensor& x) {
  return unary("relu", x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary(
      "gelu", x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [inv_sqrt_2pi](double v) { return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v); });
}

Tensor silu(const Tensor& x) {
  auto in = x.data();
  const auto n = static_cast<Eigen::Index>(in.size());
  auto sig = std::make_shared<Buffer>(in.size());
  Eigen::Map<const Eigen::ArrayXd> xv(in.data(), n);
  Eigen::Map<Eigen::ArrayXd> sv(sig->data(), n);
  sv = 1.0 / (1.0 + (-xv).exp());
  Buffer out(in.size());
  Eigen::Map<Eigen::ArrayXd>(out.data(), n) = xv * sv;
  return emit("silu", x.shape(), std::move(out), {x}, [sig](const BackwardContext& ctx) {
    if (!ctx.needs(0)) return;
    const auto n = static_cast<Eigen::Index>(sig->size());
    Eigen::Map<const Eigen::ArrayXd> xv(ctx.input(0).data().data(), n), sv(sig->data(), n),
        g(ctx.grad_out().data(), n);
    Eigen::Map<Eigen::ArrayXd>(ctx.grad_in(0).data(), n) += g * (sv * (1.0 + xv * (1.0 - sv)));
  });
}

Tensor log(const Tensor& x) {
  return unary("log", x, [](double v) { return std::log(v); }, [](double v) { return 1.0 / v; });
}

Tensor rms_norm(const Tensor& x, const Tensor& gain) {
  std::size_t d = last_dim("rms_norm", x);
  if (gain.rank() != 1 || gain.dim(0) != d) shape_fail("rms_norm", x.shape(), gain.shape(), "gain must be [d]");
  std::size_t rows = x.numel() / d;
  auto in = x.data();
  auto gv = gain.data();
  Buffer out(in.size());
  auto inv_rms = std::make_shared<Buffer>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * d;
    double ss = 0.0;
    for (std::size_t i = 0; i < d; ++i) ss += row[i] * row[i];
    double inv = 1.0 / std::sqrt(ss / static_cast<double>(d) + kRmsNormEps);
    (*inv_rms)[r] = inv;
    for (std::size_t i = 0; i < d; ++i) out[r * d + i] = row[i] * inv * gv[i];
  }
  return emit("rms_norm", x.shape(), std::move(out), {x, gain}, [d, rows, inv_rms](const BackwardContext& ctx) {
    auto g = ctx.grad_out();
    auto in = ctx.input(0).data();
    auto gv = ctx.input(1).data();
    Buffer dn(d);
    for (std::size_t r = 0; r < rows; ++r) {
      const double inv = (*inv_rms)[r];
      const double* row = in.data() + r * d;
      const double* grow = g.data() + r * d;
      if (ctx.needs(1)) {
        auto gg = ctx.grad_in(1);
        for (std::size_t i = 0; i < d; ++i) gg[i] += grow[i] * row[i] * inv;
      }
      if (ctx.needs(0)) {
        double dot = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
          dn[i] = grow[i] * gv[i];
          dot += dn[i] * row[i] * inv;
        }
        dot /= static_cast<double>(d);
        double* gx = ctx.grad_in(0).data() + r * d;
        for (std::size_t i = 0; i < d; ++i) gx[i] += (dn[i] - row[i] * inv * dot) * inv;
      }
    }
  });
}

Tensor l2_normalize_rows(const Tensor& x) {
  std::size_t d = last_dim("l2_normalize_rows", x);
  std::size_t rows = x.numel() / d;
  auto in = x.data();
  Buffer out(in.size());
  auto norms = std::make_shared<Buffer>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t i = 0; i < d; ++i) ss += in[r * d + i] * in[r * d + i];
    double nrm = std::sqrt(ss);
    (*norms)[r] = nrm;
    double denom = std::max(nrm, kNormalizeEps);
    for (std::size_t i = 0; i < d; ++i) out[r * d + i] = in[r * d + i] / denom;
  }
  return emit("l2_normalize_rows", x.shape(), std::move(out), {x}, [d, rows, norms](const BackwardContext& ctx) {
    if (!ctx.needs(0)) return;
    auto g = ctx.grad_out();
    auto y = ctx.output().data();
    auto gx = ctx.grad_in(0);
    for (std::size_t r = 0; r < rows; ++r) {
      double nrm = (*norms)[r];
      if (nrm > kNormalizeEps) {
        double dot = 0.0;
        for (std::size_t i = 0; i < d; ++i) dot += g[r * d + i] * y[r * d + i];
        for (std::size_t i = 0; i < d; ++i) gx[r * d + i] += (g[r * d + i] - y[r * d + i] * dot) / nrm;
      } else {
        for (std::size_t i = 0; i < d; ++i) gx[r * d + i] += g[r * d + i] / kNormalizeEps;
      }
    }
  });
}

Tensor row_softmax(const Tensor& x) {
  std::size_t d = last_dim("row_softmax", x);
  std::size_t rows = x.numel() / d;
  auto in = x.data();
  Buffer out(in.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * d;
    double mx = *std::max_element(row, row + d);
    double z = 0.0;
    for (std::size_t i = 0; i < d; ++i) z += (out[r * d + i] = std::exp(row[i] - mx));
    for (std::size_t i = 0; i < d; ++i) out[r * d + i] /= z;
  }
  return emit("row_softmax", x.shape(), std::move(out), {x}, [d, rows](const BackwardContext& ctx) {
    if (!ctx.needs(0)) return;
    auto g = ctx.grad_out();
    auto y = ctx.output().data();
    auto gx = ctx.grad_in(0);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t i = 0; i < d; ++i) dot += g[r * d + i] * y[r * d + i];
      for (std::size_t i = 0; i < d; ++i) gx[r * d + i] += y[r * d + i] * (g[r * d + i] - dot);
    }
  });
}

Tensor log_softmax(const Tensor& x) {
  std::size_t d = last_dim("log_softmax", x);
  std::size_t rows = x.numel() / d;
  auto in = x.data();
  Buffer out(in.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * d;
    double mx = *std::max_element(row, row + d);
    double z = 0.0;
    for (std::size_t i = 0; i < d; ++i) z += std::exp(row[i] - mx);
    double lse = mx + std::log(z);
    for (std::size_t i = 0; i < d; ++i) out[r * d + i] = row[i] - lse;
  }
  return emit("log_softmax", x.shape(), std::move(out), {x}, [d, rows](const BackwardContext& ctx) {
    if (!ctx.needs(0)) return;
    auto g = ctx.grad_out();
    auto y = ctx.output().data();
    auto gx = ctx.grad_in(0);
    for (std::size_t r = 0; r < rows; ++r) {
      double gs = 0.0;
      for (std::size_t i = 0; i < d; ++i) gs += g[r * d + i];
      for (std::size_t i = 0; i < d; ++i) gx[r * d + i] += g[r * d + i] - std::exp(y[r * d + i]) * gs;
    }
  });
}

Tensor logsumexp_rows(const Tensor& x) {
  std::size_t d = last_dim("logsumexp_rows", x);
  std::size_t rows = x.numel() / d;
  auto in = x.data();
  Buffer out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * d;
    double mx = *std::max_element(row, row + d);
    double z = 0.0;
    for (std::size_t i = 0; i < d; ++i) z += std::exp(row[i] - mx);
    out[r] = mx + std::log(z);
  }
  return emit("logsumexp_rows", drop_last(x.shape()), std::move(out), {x}, [d, rows](const BackwardContext& ctx) {
    if (!ctx.needs(0)) return;
    auto g = ctx.grad_out();
    auto lse = ctx.output().data();
    auto in = ctx.input(0).data();
    auto gx = ctx.grad_in(0);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t i = 0; i < d; ++i) gx[r * d + i] += g[r] * std::exp(in[r * d + i] - lse[r]);
    }
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return emit("sum", {}, {s}, {x}, [](const BackwardContext& ctx) {
    if (!ctx.needs(0)) return;
    double g = ctx.grad_out()[0];
    for (double& v : ctx.grad_in(0)) v += g;
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  double s = 0.0;
  for (double v : x.data()) s += v;
  const double n = static_cast<double>(x.numel());
  return emit("mean", {}, {s / n}, {x}, [n](const BackwardContext& ctx) {
    if (!ctx.needs(0)) return;
    double g = ctx.grad_out()[0] / n;
    for (double& v : ctx.grad_in(0)) v += g;
  });
}

Tensor row_sum(const Tensor& x) {
  std::size_t d = last_dim("row_sum", x);
  std::size_t rows = x.numel() / d;
  auto in = x.data();
  Buffer out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < d; ++i) out[r] += in[r * d + i];
  }
  return emit("row_sum", drop_last(x.shape()), std::move(out), {x}, [d, rows](const BackwardContext& ctx) {
    if (!ctx.needs(0)) return;
    auto g = ctx.grad_out();
    auto gx = ctx.grad_in(0);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t i = 0; i < d; ++i) gx[r * d + i] += g[r];
    }
  });
}

Tensor gather_rows(const Tensor& table, std::span<const std::int32_t> ids, const Shape& index_shape) {
  if (table.rank() != 2) throw ShapeError("gather_rows: table must be [V, d], got " + shape_str(table.shape()));
  if (numel(index_shape) != ids.size()) {
    throw ShapeError("gather_rows: index shape " + shape_str(index_shape) + " does not match " +
                     std::to_string(ids.size()) + " ids");
  }
  std::size_t vocab = table.dim(0), d = table.dim(1);
  auto tv = table.data();
  Buffer out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw Error("gather_rows: id " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                  " out of range for " + std::to_string(vocab) + " rows");
    }
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(ids[i]) * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  Shape out_shape = index_shape;
  out_shape.push_back(d);
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  return emit("gather_rows", std::move(out_shape), std::move(out), {table},
              [saved = std::move(saved), d](const BackwardContext& ctx) {
                if (!ctx.needs(0)) return;
                auto g = ctx.grad_out();
                auto gt = ctx.grad_in(0);
                for (std::size_t i = 0; i < saved.size(); ++i) {
                  double* dst = gt.data() + static_cast<std::size_t>(saved[i]) * d;
                  for (std::size_t j = 0; j < d; ++j) dst[j] += g[i * d + j];
                }
              });
}

Tensor pick(const Tensor& x, std::span<const std::int32_t> ids) {
  std::size_t d = last_dim("pick", x);
  std::size_t rows = x.numel() / d;
  if (ids.size() != rows) {
    throw ShapeError("pick: " + std::to_string(ids.size()) + " ids for " + std::to_string(rows) + " rows of " +
                     shape_str(x.shape()));
  }
  auto in = x.data();
  Buffer out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= d) {
      throw Error("pick: id " + std::to_string(ids[r]) + " at row " + std::to_string(r) + " out of range for width " +
                  std::to_string(d));
    }
    out[r] = in[r * d + static_cast<std::size_t>(ids[r])];
  }
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  return emit("pick", drop_last(x.shape()), std::move(out), {x}, [saved = std::move(saved), d](const BackwardContext& ctx) {
    if (!ctx.needs(0)) return;
    auto g = ctx.grad_out();
    auto gx = ctx.grad_in(0);
    for (std::size_t r = 0; r < saved.size(); ++r) gx[r * d + static_cast<std::size_t>(saved[r])] += g[r];
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  int r = static_cast<int>(first.size());
  int ax = axis < 0 ? axis + r : axis;
  if (ax < 0 || ax >= r) throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " + shape_str(first));
  auto a = static_cast<std::size_t>(ax);
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < a; ++i) outer *= first[i];
  for (std::size_t i = a + 1; i < first.size(); ++i) inner *= first[i];
  Shape out_shape = first;
  out_shape[a] = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == a) || s[i] == first[i];
    if (!ok) shape_fail("concat", first, s, "non-concatenated dimensions must agree");
    widths.push_back(s[a] * inner);
    out_shape[a] += s[a];
  }
  std::size_t total = out_shape[a] * inner;
  Buffer out(outer * total);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    auto src = parts[p].data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * widths[p]), widths[p],
                  out.begin() + static_cast<std::ptrdiff_t>(o * total + offset));
    }
    offset += widths[p];
  }
  return emit("concat", std::move(out_shape), std::move(out), parts, [widths, outer, total](const BackwardContext& ctx) {
    auto g = ctx.grad_out();
    std::size_t offset = 0;
    for (std::size_t p = 0; p < widths.size(); ++p) {
      if (ctx.needs(p)) {
        auto gp = ctx.grad_in(p);
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t i = 0; i < widths[p]; ++i) gp[o * widths[p] + i] += g[o * total + offset + i];
        }
      }
      offset += widths[p];
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) shape_fail("reshape", x.shape(), shape, "element counts differ");
  Buffer out(x.data().begin(), x.data().end());
  return emit("reshape", std::move(shape), std::move(out), {x}, [](const BackwardContext& ctx) {
    if (!ctx.needs(0)) return;
    auto g = ctx.grad_out();
    auto gx = ctx.grad_in(0);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Tensor rope(const Tensor& x, std::size_t num_heads, double base) {
  if (x.rank() != 3 || num_heads == 0 || x.dim(2) % num_heads != 0 || (x.dim(2) / num_heads) % 2 != 0) {
    throw ShapeError("rope: expected [B, T, heads * even head_dim] with " + std::to_string(num_heads) +
                     " heads, got " + shape_str(x.shape()));
  }
  std::size_t batch = x.dim(0), seq = x.dim(1), width = x.dim(2);
  std::size_t hd = width / num_heads, half = hd / 2;
  auto cs = std::make_shared<Buffer>(seq * half * 2);
  for (std::size_t t = 0; t < seq; ++t) {
    for (std::size_t i = 0; i < half; ++i) {
      double theta = static_cast<double>(t) * std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
      (*cs)[(t * half + i) * 2] = std::cos(theta);
      (*cs)[(t * half + i) * 2 + 1] = std::sin(theta);
    }
  }
  auto in = x.data();
  Buffer out(in.size());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < seq; ++t) {
      for (std::size_t h = 0; h < num_heads; ++h) {
        std::size_t o = (b * seq + t) * width + h * hd;
        for (std::size_t i = 0; i < half; ++i) {
          double c = (*cs)[(t * half + i) * 2], s = (*cs)[(t * half + i) * 2 + 1];
          double x1 = in[o + i], x2 = in[o + i + half];
          out[o + i] = x1 * c - x2 * s;
          out[o + i + half] = x1 * s + x2 * c;
        }
      }
    }
  }
  return emit("rope", x.shape(), std::move(out), {x}, [cs, batch, seq, width, num_heads, hd, half](const BackwardContext& ctx) {
    if (!ctx.needs(0)) return;
    auto g = ctx.grad_out();
    auto gx = ctx.grad_in(0);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t t = 0; t < seq; ++t) {
        for (std::size_t h = 0; h < num_heads; ++h) {
          std::size_t o = (b * seq + t) * width + h * hd;
          for (std::size_t i = 0; i < half; ++i) {
            double c = (*cs)[(t * half + i) * 2], s = (*cs)[(t * half + i) * 2 + 1];
            double g1 = g[o + i], g2 = g[o + i + half];
            gx[o + i] += g1 * c + g2 * s;
            gx[o + i + half] += -g1 * s + g2 * c;
          }
        }
      }
    }
  });
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t num_heads,
                        std::size_t num_kv_heads) {
  constexpr std::string_view op = "causal_attention";
  if (q.rank() != 3 || k.shape() != v.shape() || k.rank() != 3 || q.dim(0) != k.dim(0) || q.dim(1) != k.dim(1)) {
    shape_fail(op, q.shape(), k.shape(), "expected q [B, T, H*dh] and matching k/v [B, T, Hkv*dh]");
  }
  if (num_heads == 0 || num_kv_heads == 0 || num_heads % num_kv_heads != 0 || q.dim(2) % num_heads != 0) {
    throw ShapeError("causal_attention: invalid head split " + std::to_string(num_heads) + "/" +
                     std::to_string(num_kv_heads) + " for " + shape_str(q.shape()));
  }
  const std::size_t batch = q.dim(0), seq = q.dim(1), qw = q.dim(2);
  const std::size_t hd = qw / num_heads, kw = hd * num_kv_heads;
  if (k.dim(2) != kw) shape_fail(op, q.shape(), k.shape(), "kv width must be num_kv_heads * head_dim");
  const std::size_t group = num_heads / num_kv_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const auto T = static_cast<Eigen::Index>(seq), D = static_cast<Eigen::Index>(hd);

  auto probs = std::make_shared<Buffer>(batch * num_heads * seq * seq, 0.0);
  Buffer out(q.numel());
  RowMat scores(T, T);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < num_heads; ++h) {
      std::size_t kvh = h / group;
      ConstStridedView Q(q.data().data() + b * seq * qw + h * hd, T, D, Eigen::OuterStride<>(static_cast<Eigen::Index>(qw)));
      ConstStridedView K(k.data().data() + b * seq * kw + kvh * hd, T, D, Eigen::OuterStride<>(static_cast<Eigen::Index>(kw)));
      ConstStridedView V(v.data().data() + b * seq * kw + kvh * hd, T, D, Eigen::OuterStride<>(static_cast<Eigen::Index>(kw)));
      scores.noalias() = Q * K.transpose();
      MatView P(probs->data() + (b * num_heads + h) * seq * seq, T, T);
      for (Eigen::Index i = 0; i < T; ++i) {
        auto row = scores.row(i).head(i + 1).array() * scale;
        const double mx = row.maxCoeff();
        auto p = P.row(i).head(i + 1).array();
        p = (row - mx).exp();
        p /= p.sum();
      }
      StridedView O(out.data() + b * seq * qw + h * hd, T, D, Eigen::OuterStride<>(static_cast<Eigen::Index>(qw)));
      O.noalias() = P.triangularView<Eigen::Lower>() * V;
    }
  }
  return emit(op, q.shape(), std::move(out), {q, k, v},
              [=](const BackwardContext& ctx) {
                RowMat dP(T, T), dS(T, T);
                const double* qd = ctx.input(0).data().data();
                const double* kd = ctx.input(1).data().data();
                const double* vd = ctx.input(2).data().data();
                for (std::size_t b = 0; b < batch; ++b) {
                  for (std::size_t h = 0; h < num_heads; ++h) {
                    std::size_t kvh = h / group;
                    const auto qs = Eigen::OuterStride<>(static_cast<Eigen::Index>(qw));
                    const auto ks = Eigen::OuterStride<>(static_cast<Eigen::Index>(kw));
                    ConstStridedView G(ctx.grad_out().data() + b * seq * qw + h * hd, T, D, qs);
                    ConstMatView P(probs->data() + (b * num_heads + h) * seq * seq, T, T);
                    ConstStridedView V(vd + b * seq * kw + kvh * hd, T, D, ks);
                    if (ctx.needs(2)) {
                      StridedView dV(ctx.grad_in(2).data() + b * seq * kw + kvh * hd, T, D, ks);
                      dV.noalias() += P.transpose() * G;
                    }
                    if (!ctx.needs(0) && !ctx.needs(1)) continue;
                    dP.noalias() = G * V.transpose();
                    for (Eigen::Index i = 0; i < T; ++i) {
                      double dot = 0.0;
                      for (Eigen::Index j = 0; j <= i; ++j) dot += dP(i, j) * P(i, j);
                      for (Eigen::Index j = 0; j < T; ++j) dS(i, j) = j <= i ? P(i, j) * (dP(i, j) - dot) * scale : 0.0;
                    }
                    if (ctx.needs(0)) {
                      ConstStridedView K(kd + b * seq * kw + kvh * hd, T, D, ks);
                      StridedView dQ(ctx.grad_in(0).data() + b * seq * qw + h * hd, T, D, qs);
                      dQ.noalias() += dS * K;
                    }
                    if (ctx.needs(1)) {
                      ConstStridedView Q(qd + b * seq * qw + h * hd, T, D, qs);
                      StridedView dK(ctx.grad_in(1).data() + b * seq * kw + kvh * hd, T, D, ks);
                      dK.noalias() += dS.transpose() * Q;
                    }
                  }
                }
              });
}

}  // namespace letlab::ops
