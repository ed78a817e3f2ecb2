// SPDX-License-Identifier: Apache-2.0

#include "letlab/theory.hpp"

#include <algorithm>
#include <cmath>

#include "letlab/ops.hpp"
#include "letlab/random.hpp"

namespace letlab {

namespace {

void check_depth(std::size_t k, std::size_t depth) {
  if (k < 1 || k > depth) {
    throw ConfigError("alignment depth k=" + std::to_string(k) + " must lie in [1, " + std::to_string(depth) + "]");
  }
}

std::vector<double> as_vector(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

HessianReport analyse(const SquareMatrix& h, std::size_t depth, std::size_t dim, std::size_t k) {
  HessianReport r;
  r.depth = depth;
  r.dim = dim;
  r.k = k;
  const std::size_t b = dim * dim;
  r.block_norms.assign(depth, std::vector<double>(depth, 0.0));
  double live_sq = 0.0;
  for (std::size_t bi = 0; bi < depth; ++bi) {
    for (std::size_t bj = 0; bj < depth; ++bj) {
      double sq = 0.0, mx = 0.0;
      for (std::size_t i = bi * b; i < (bi + 1) * b; ++i) {
        for (std::size_t j = bj * b; j < (bj + 1) * b; ++j) {
          sq += h(i, j) * h(i, j);
          mx = std::max(mx, std::abs(h(i, j)));
        }
      }
      r.block_norms[bi][bj] = std::sqrt(sq);
      if (bi >= k || bj >= k) {
        r.forbidden_max = std::max(r.forbidden_max, mx);
      } else {
        live_sq += sq;
        r.c = std::max(r.c, std::sqrt(sq));
      }
    }
  }
  for (std::size_t bi = 0; bi < depth; ++bi) {
    for (std::size_t bj = 0; bj < depth; ++bj) {
      r.max_asymmetry = std::max(r.max_asymmetry, std::abs(r.block_norms[bi][bj] - r.block_norms[bj][bi]));
    }
  }
  r.total_frobenius = h.frobenius();
  r.block_accumulated = std::sqrt(live_sq);
  r.bound = static_cast<double>(k) * r.c;
  return r;
}

double forbidden_max_of(const SquareMatrix& h, std::size_t dim, std::size_t k) {
  const std::size_t b = dim * dim;
  double mx = 0.0;
  for (std::size_t i = 0; i < h.n; ++i) {
    for (std::size_t j = 0; j < h.n; ++j) {
      if (i / b >= k || j / b >= k) mx = std::max(mx, std::abs(h(i, j)));
    }
  }
  return mx;
}

}  // namespace

double SquareMatrix::frobenius() const {
  double s = 0.0;
  for (double v : values) s += v * v;
  return std::sqrt(s);
}

SquareMatrix numeric_hessian(const FlatFn& f, std::span<const double> params, double fd_step) {
  if (!(fd_step > 0.0)) throw ConfigError("numeric_hessian: fd_step must be positive");
  const std::size_t n = params.size();
  std::vector<double> x(params.begin(), params.end());
  const double h = fd_step;
  const double f0 = f(x);
  auto at = [&](std::size_t i, double di, std::size_t j, double dj) {
    const double xi = x[i], xj = x[j];
    x[i] = xi + di;
    x[j] = (i == j ? x[j] : xj) + (i == j ? 0.0 : dj);
    double v = f(x);
    x[i] = xi;
    x[j] = xj;
    return v;
  };
  SquareMatrix raw{n, std::vector<double>(n * n, 0.0)};
  for (std::size_t i = 0; i < n; ++i) {
    raw(i, i) = (at(i, h, i, 0.0) - 2.0 * f0 + at(i, -h, i, 0.0)) / (h * h);
    for (std::size_t j = i + 1; j < n; ++j) {
      double v = (at(i, h, j, h) - at(i, h, j, -h) - at(i, -h, j, h) + at(i, -h, j, -h)) / (4.0 * h * h);
      raw(i, j) = v;
      raw(j, i) = v;
    }
  }
  SquareMatrix out{n, std::vector<double>(n * n)};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      out(i, j) = 0.5 * (raw(i, j) + raw(j, i));
      if (!std::isfinite(out(i, j))) {
        throw NumericalError("numeric_hessian: non-finite entry at (" + std::to_string(i) + ", " + std::to_string(j) +
                             ")");
      }
    }
  }
  return out;
}

std::vector<double> flatten(const DeepLinearNet& net) {
  std::vector<double> out;
  for (const auto& w : net.weights) out.insert(out.end(), w.data().begin(), w.data().end());
  return out;
}

FlatFn deep_linear_alignment_loss(std::size_t depth, std::size_t dim, std::size_t k, std::vector<double> x,
                                  std::vector<double> target) {
  check_depth(k, depth);
  if (x.size() != dim || target.size() != dim) throw ShapeError("deep_linear_alignment_loss: vector width mismatch");
  return [depth, dim, k, x = std::move(x), target = std::move(target)](std::span<const double> w) {
    if (w.size() != depth * dim * dim) throw ShapeError("deep_linear_alignment_loss: wrong parameter count");
    std::vector<double> h = x, next(dim);
    for (std::size_t l = 0; l < k; ++l) {
      const double* W = w.data() + l * dim * dim;
      for (std::size_t r = 0; r < dim; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < dim; ++c) s += W[r * dim + c] * h[c];
        next[r] = s;
      }
      h.swap(next);
    }
    double hh = 0.0, tt = 0.0, ht = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
      hh += h[i] * h[i];
      tt += target[i] * target[i];
    }
    const double nh = std::max(std::sqrt(hh), ops::kNormalizeEps), nt = std::max(std::sqrt(tt), ops::kNormalizeEps);
    for (std::size_t i = 0; i < dim; ++i) ht += (h[i] / nh) * (target[i] / nt);
    return -ht;
  };
}

Tensor deep_linear_alignment_loss(const DeepLinearNet& net, std::size_t k, const Tensor& x, const Tensor& target) {
  check_depth(k, net.depth());
  HiddenStates hs = deep_linear_forward(net, x);
  Tensor a = ops::l2_normalize_rows(hs[k]);
  Tensor b = ops::l2_normalize_rows(target.detach());
  return ops::scale(ops::sum(ops::mul(a, b)), -1.0);
}

double verify_gradient_vanishing(const DeepLinearNet& net, std::size_t k, const Tensor& x, const Tensor& target,
                                 GradientMethod method, double fd_step) {
  check_depth(k, net.depth());
  const std::size_t d = net.dim(), L = net.depth(), b = d * d;
  double worst = 0.0;
  if (method == GradientMethod::autodiff) {
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = deep_linear_alignment_loss(net, k, x, target);
    GradientMap g = tape.backward(loss);
    for (std::size_t j = k; j < L; ++j) {
      Tensor gj = g.of(net.weights[j]);
      for (double v : gj.data()) worst = std::max(worst, std::abs(v));
    }
    return worst;
  }
  FlatFn f = deep_linear_alignment_loss(L, d, k, as_vector(x), as_vector(target));
  std::vector<double> w = flatten(net);
  for (std::size_t i = k * b; i < L * b; ++i) {
    const double orig = w[i];
    w[i] = orig + fd_step;
    const double up = f(w);
    w[i] = orig - fd_step;
    const double down = f(w);
    w[i] = orig;
    worst = std::max(worst, std::abs((up - down) / (2.0 * fd_step)));
  }
  return worst;
}

HessianReport verify_block_structure(const DeepLinearNet& net, std::size_t k, const Tensor& x, const Tensor& target,
                                     double fd_step) {
  const std::size_t L = net.depth(), d = net.dim();
  check_depth(k, L);
  if (L * d * d > kMaxHessianParams) {
    throw ConfigError("dense Hessian guard: L * d^2 = " + std::to_string(L * d * d) + " exceeds " +
                      std::to_string(kMaxHessianParams) + "; use a smaller depth or width");
  }
  FlatFn f = deep_linear_alignment_loss(L, d, k, as_vector(x), as_vector(target));
  std::vector<double> w = flatten(net);
  SquareMatrix h = numeric_hessian(f, w, fd_step);
  HessianReport r = analyse(h, L, d, k);
  r.fd_step = fd_step;
  r.forbidden_max_half_step = forbidden_max_of(numeric_hessian(f, w, 0.5 * fd_step), d, k);
  return r;
}

bool SweepResult::forbidden_ok() const {
  for (const auto& trial : reports) {
    for (const auto& r : trial) {
      if (!r.forbidden_ok(options.forbidden_tolerance)) return false;
    }
  }
  return true;
}

bool SweepResult::noise_scaling_ok() const {
  for (const auto& trial : reports) {
    for (const auto& r : trial) {
      if (!r.noise_scaling_ok()) return false;
    }
  }
  return true;
}

bool SweepResult::bounds_ok() const {
  return std::all_of(rows.begin(), rows.end(), [](const SweepRow& r) { return r.every_trial_bounded; });
}

bool SweepResult::monotone_bound() const {
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].k >= rows[i - 1].k && rows[i].bound < rows[i - 1].bound) return false;
  }
  return true;
}

bool SweepResult::passed() const { return forbidden_ok() && noise_scaling_ok() && bounds_ok() && monotone_bound(); }

SweepResult curvature_sweep(const SweepOptions& o) {
  if (o.trials < 1) throw ConfigError("curvature_sweep: trials must be >= 1");
  if (o.k_values.empty()) throw ConfigError("curvature_sweep: no k values");
  for (auto k : o.k_values) check_depth(k, o.depth);
  if (o.depth * o.dim * o.dim > kMaxHessianParams) {
    throw ConfigError("dense Hessian guard: L * d^2 = " + std::to_string(o.depth * o.dim * o.dim) + " exceeds " +
                      std::to_string(kMaxHessianParams) + "; use a smaller depth or width");
  }
  SweepResult res;
  res.options = o;
  auto random_vector = [&](Rng& rng) {
    std::vector<double> v(o.dim);
    for (double& e : v) e = rng.normal();
    return Tensor({o.dim}, std::move(v));
  };
  for (std::size_t t = 0; t < o.trials; ++t) {
    const std::uint64_t trial_seed = o.identity ? derive_seed(o.seed, "trial") : derive_seed(o.seed, "trial-" + std::to_string(t));
    DeepLinearNet net = o.identity ? identity_deep_linear(o.depth, o.dim)
                                   : random_deep_linear(o.depth, o.dim, derive_seed(trial_seed, "weights"));
    Rng rng(derive_seed(trial_seed, "vectors"));
    Tensor x = random_vector(rng);
    Tensor target = random_vector(rng);
    std::vector<HessianReport> per_k;
    for (auto k : o.k_values) {
      per_k.push_back(verify_block_structure(net, k, x, target, o.fd_step));
      res.global_c = std::max(res.global_c, per_k.back().c);
    }
    res.reports.push_back(std::move(per_k));
  }
  for (std::size_t i = 0; i < o.k_values.size(); ++i) {
    SweepRow row{o.k_values[i], 0.0, 0.0, 0.0, static_cast<double>(o.k_values[i]) * res.global_c, true};
    for (const auto& trial : res.reports) {
      const auto& r = trial[i];
      row.mean_frobenius += r.total_frobenius;
      row.max_frobenius = std::max(row.max_frobenius, r.total_frobenius);
      row.every_trial_bounded = row.every_trial_bounded && r.bound_ok();
    }
    row.mean_frobenius /= static_cast<double>(o.trials);
    double var = 0.0;
    for (const auto& trial : res.reports) var += std::pow(trial[i].total_frobenius - row.mean_frobenius, 2);
    row.std_frobenius = std::sqrt(var / static_cast<double>(o.trials));
    res.rows.push_back(row);
  }
  return res;
}

Table sweep_table(const SweepResult& r) {
  Table t;
  t.header = {"k", "mean_frobenius", "std_frobenius", "max_frobenius", "bound", "every_trial_bounded"};
  for (const auto& row : r.rows) {
    t.rows.push_back({static_cast<double>(row.k), row.mean_frobenius, row.std_frobenius, row.max_frobenius, row.bound,
                      row.every_trial_bounded ? 1.0 : 0.0});
  }
  return t;
}

Table block_table(const SweepResult& r) {
  Table t;
  t.header = {"trial", "k", "block_i", "block_j", "frobenius", "live"};
  for (std::size_t tr = 0; tr < r.reports.size(); ++tr) {
    for (const auto& rep : r.reports[tr]) {
      for (std::size_t i = 0; i < rep.depth; ++i) {
        for (std::size_t j = 0; j < rep.depth; ++j) {
          t.rows.push_back({static_cast<double>(tr), static_cast<double>(rep.k), static_cast<double>(i),
                            static_cast<double>(j), rep.block_norms[i][j], (i < rep.k && j < rep.k) ? 1.0 : 0.0});
        }
      }
    }
  }
  return t;
}

nlohmann::json sweep_summary(const SweepResult& r) {
  double worst_forbidden = 0.0, worst_accum = 0.0, worst_asym = 0.0;
  for (const auto& trial : r.reports) {
    for (const auto& rep : trial) {
      worst_forbidden = std::max(worst_forbidden, rep.forbidden_max);
      worst_accum = std::max(worst_accum, std::abs(rep.total_frobenius - rep.block_accumulated) /
                                              std::max(rep.total_frobenius, 1e-300));
      worst_asym = std::max(worst_asym, rep.max_asymmetry);
    }
  }
  const auto& o = r.options;
  return {
      {"depth", o.depth},
      {"dim", o.dim},
      {"k_values", o.k_values},
      {"trials", o.trials},
      {"seed", o.seed},
      {"identity_weights", o.identity},
      {"tolerances", {{"forbidden_max_abs", o.forbidden_tolerance}, {"fd_step", o.fd_step}, {"noise_halving_ratio", 0.5}}},
      {"claims",
       {{"gradient_and_hessian_blocks_vanish_above_k", r.forbidden_ok()},
        {"forbidden_entries_shrink_with_step", r.noise_scaling_ok()},
        {"frobenius_bound_every_trial", r.bounds_ok()},
        {"bound_nondecreasing_in_k", r.monotone_bound()}}},
      {"worst", {{"forbidden_max_abs", worst_forbidden}, {"block_accumulation_rel_error", worst_accum}, {"block_asymmetry", worst_asym}}},
      {"global_c", r.global_c},
      {"passed", r.passed()},
  };
}

}  // namespace letlab
