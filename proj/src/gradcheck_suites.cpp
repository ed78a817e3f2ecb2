// SPDX-License-Identifier: Apache-2.0

#include "letlab/gradcheck_suites.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "letlab/alignment.hpp"
#include "letlab/gradcheck.hpp"
#include "letlab/losses.hpp"
#include "letlab/model.hpp"
#include "letlab/ops.hpp"
#include "letlab/random.hpp"

namespace letlab {

namespace {

struct Case {
  std::string name;
  // Builds the parameters and the scalar function for one seed.
  std::function<std::pair<std::vector<Tensor>, ScalarFn>(Rng&)> make;
};

// Normal entries kept at least `gap` away from zero (keeps kinks out of
// reach of the difference stencil).
Tensor random_tensor(Rng& rng, Shape shape, bool grad = true, double gap = 0.0) {
  std::vector<double> v(numel(shape));
  for (double& x : v) {
    do {
      x = rng.normal();
    } while (std::abs(x) < gap);
  }
  return Tensor(std::move(shape), std::move(v), grad);
}

Tensor positive_tensor(Rng& rng, Shape shape) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = 0.5 + rng.uniform();
  return Tensor(std::move(shape), std::move(v), true);
}

std::vector<std::int32_t> random_ids(Rng& rng, std::size_t n, std::size_t vocab) {
  std::vector<std::int32_t> ids(n);
  for (auto& i : ids) i = static_cast<std::int32_t>(rng.below(vocab));
  return ids;
}

// Projects a tensor-valued op onto a fixed random direction.
ScalarFn probe(std::function<Tensor(const std::vector<Tensor>&)> op, Tensor weights) {
  return [op = std::move(op), weights](const std::vector<Tensor>& p) { return ops::sum(ops::mul(op(p), weights)); };
}

template <typename Op>
Case unary_case(std::string name, Shape shape, Op op, double gap = 0.0, bool positive = false) {
  return {name, [=](Rng& rng) {
            Tensor x = positive ? positive_tensor(rng, shape) : random_tensor(rng, shape, true, gap);
            Tensor probe_w = random_tensor(rng, op(x.detach()).shape(), false);
            return std::pair{std::vector<Tensor>{x}, probe([op](const std::vector<Tensor>& p) { return op(p[0]); }, probe_w)};
          }};
}

std::vector<Case> primitive_cases() {
  std::vector<Case> c;
  c.push_back({"matmul", [](Rng& rng) {
                 Tensor a = random_tensor(rng, {2, 3, 4}), b = random_tensor(rng, {4, 5});
                 Tensor w = random_tensor(rng, {2, 3, 5}, false);
                 return std::pair{std::vector<Tensor>{a, b},
                                  probe([](const std::vector<Tensor>& p) { return ops::matmul(p[0], p[1]); }, w)};
               }});
  c.push_back({"matmul_batched", [](Rng& rng) {
                 Tensor a = random_tensor(rng, {2, 3, 4}), b = random_tensor(rng, {2, 4, 3});
                 Tensor w = random_tensor(rng, {2, 3, 3}, false);
                 return std::pair{std::vector<Tensor>{a, b},
                                  probe([](const std::vector<Tensor>& p) { return ops::matmul(p[0], p[1]); }, w)};
               }});
  for (const char* name : {"add", "sub", "mul"}) {
    std::string n = name;
    c.push_back({n + "_broadcast", [n](Rng& rng) {
                   Tensor a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {4});
                   Tensor w = random_tensor(rng, {3, 4}, false);
                   auto op = [n](const std::vector<Tensor>& p) {
                     return n == "add" ? ops::add(p[0], p[1]) : n == "sub" ? ops::sub(p[0], p[1]) : ops::mul(p[0], p[1]);
                   };
                   return std::pair{std::vector<Tensor>{a, b}, probe(op, w)};
                 }});
  }
  c.push_back(unary_case("scale", {3, 4}, [](const Tensor& x) { return ops::scale(x, -1.7); }));
  c.push_back(unary_case("relu", {3, 4}, [](const Tensor& x) { return ops::relu(x); }, 1e-3));
  c.push_back(unary_case("gelu", {3, 4}, [](const Tensor& x) { return ops::gelu(x); }));
  c.push_back(unary_case("silu", {3, 4}, [](const Tensor& x) { return ops::silu(x); }));
  c.push_back(unary_case("log", {3, 4}, [](const Tensor& x) { return ops::log(x); }, 0.0, true));
  c.push_back({"rms_norm", [](Rng& rng) {
                 Tensor x = random_tensor(rng, {3, 5}), g = random_tensor(rng, {5});
                 Tensor w = random_tensor(rng, {3, 5}, false);
                 return std::pair{std::vector<Tensor>{x, g},
                                  probe([](const std::vector<Tensor>& p) { return ops::rms_norm(p[0], p[1]); }, w)};
               }});
  c.push_back(unary_case("l2_normalize_rows", {3, 5}, [](const Tensor& x) { return ops::l2_normalize_rows(x); }));
  c.push_back(unary_case("row_softmax", {3, 5}, [](const Tensor& x) { return ops::row_softmax(x); }));
  c.push_back(unary_case("log_softmax", {3, 5}, [](const Tensor& x) { return ops::log_softmax(x); }));
  c.push_back(unary_case("logsumexp_rows", {3, 5}, [](const Tensor& x) { return ops::logsumexp_rows(x); }));
  c.push_back(unary_case("row_sum", {3, 5}, [](const Tensor& x) { return ops::row_sum(x); }));
  c.push_back({"sum", [](Rng& rng) {
                 Tensor x = random_tensor(rng, {3, 4});
                 return std::pair{std::vector<Tensor>{x}, ScalarFn([](const std::vector<Tensor>& p) {
                                    return ops::sum(ops::mul(p[0], p[0]));
                                  })};
               }});
  c.push_back({"mean", [](Rng& rng) {
                 Tensor x = random_tensor(rng, {3, 4});
                 return std::pair{std::vector<Tensor>{x}, ScalarFn([](const std::vector<Tensor>& p) {
                                    return ops::mean(ops::mul(p[0], p[0]));
                                  })};
               }});
  c.push_back({"gather_rows", [](Rng& rng) {
                 Tensor table = random_tensor(rng, {6, 3});
                 auto ids = random_ids(rng, 8, 6);
                 Tensor w = random_tensor(rng, {2, 4, 3}, false);
                 return std::pair{std::vector<Tensor>{table}, probe([ids](const std::vector<Tensor>& p) {
                                    return ops::gather_rows(p[0], ids, {2, 4});
                                  }, w)};
               }});
  c.push_back({"pick", [](Rng& rng) {
                 Tensor x = random_tensor(rng, {4, 5});
                 auto ids = random_ids(rng, 4, 5);
                 Tensor w = random_tensor(rng, {4}, false);
                 return std::pair{std::vector<Tensor>{x},
                                  probe([ids](const std::vector<Tensor>& p) { return ops::pick(p[0], ids); }, w)};
               }});
  c.push_back(unary_case("transpose", {2, 3, 4}, [](const Tensor& x) { return ops::transpose(x); }));
  c.push_back(unary_case("reshape", {2, 3, 4}, [](const Tensor& x) { return ops::reshape(x, {6, 4}); }));
  c.push_back({"concat", [](Rng& rng) {
                 Tensor a = random_tensor(rng, {2, 3}), b = random_tensor(rng, {2, 2});
                 Tensor w = random_tensor(rng, {2, 5}, false);
                 return std::pair{std::vector<Tensor>{a, b},
                                  probe([](const std::vector<Tensor>& p) { return ops::concat({p[0], p[1]}, -1); }, w)};
               }});
  c.push_back(unary_case("rope", {2, 3, 8}, [](const Tensor& x) { return ops::rope(x, 2, 10000.0); }));
  c.push_back({"causal_attention_gqa", [](Rng& rng) {
                 Tensor q = random_tensor(rng, {2, 4, 8}), k = random_tensor(rng, {2, 4, 4}), v = random_tensor(rng, {2, 4, 4});
                 Tensor w = random_tensor(rng, {2, 4, 8}, false);
                 return std::pair{std::vector<Tensor>{q, k, v}, probe([](const std::vector<Tensor>& p) {
                                    return ops::causal_attention(p[0], p[1], p[2], 2, 1);
                                  }, w)};
               }});
  c.push_back(unary_case("interpolate_hidden", {2, 3, 7}, [](const Tensor& x) { return interpolate_hidden(x, 4); }));
  return c;
}

ModelConfig tiny_config(std::size_t d, std::size_t layers, Activation act = Activation::swiglu) {
  ModelConfig m;
  m.vocab_size = 7;
  m.hidden_size = d;
  m.intermediate_size = 2 * d;
  m.num_layers = layers;
  m.num_heads = 2;
  m.num_kv_heads = 1;
  m.activation = act;
  m.max_seq_len = 8;
  return m;
}

// Parameter list for grad_check plus a rebuild of the model around them.
std::vector<Tensor> model_params(const TransformerModel& m) {
  std::vector<Tensor> out;
  for (const auto& p : m.parameters()) out.push_back(p.value);
  return out;
}

std::vector<Case> loss_cases() {
  std::vector<Case> c;
  c.push_back({"nll", [](Rng& rng) {
                 Tensor logits = random_tensor(rng, {2, 3, 6});
                 auto targets = random_ids(rng, 6, 6);
                 return std::pair{std::vector<Tensor>{logits},
                                  ScalarFn([targets](const std::vector<Tensor>& p) { return loss_nll(p[0], targets); })};
               }});
  c.push_back({"rkd", [](Rng& rng) {
                 Tensor student = random_tensor(rng, {2, 3, 6});
                 Tensor teacher = random_tensor(rng, {2, 3, 6}, false);
                 return std::pair{std::vector<Tensor>{student},
                                  ScalarFn([teacher](const std::vector<Tensor>& p) { return loss_rkd(p[0], teacher, 1.0); })};
               }});
  c.push_back({"rkd_temperature_2", [](Rng& rng) {
                 Tensor student = random_tensor(rng, {2, 3, 6});
                 Tensor teacher = random_tensor(rng, {2, 3, 6}, false);
                 return std::pair{std::vector<Tensor>{student},
                                  ScalarFn([teacher](const std::vector<Tensor>& p) { return loss_rkd(p[0], teacher, 2.0); })};
               }});
  for (auto kind : {LossKind::cosine, LossKind::logsum}) {
    for (auto red : {TokenReduction::mean, TokenReduction::sum}) {
      std::string name = "proj_" + std::string(to_string(kind)) + "_" + std::string(to_string(red));
      c.push_back({name, [kind, red](Rng& rng) {
                     Tensor hm = random_tensor(rng, {2, 3, 5});
                     Tensor ht = random_tensor(rng, {2, 3, 5}, false);
                     return std::pair{std::vector<Tensor>{hm}, ScalarFn([kind, red, ht](const std::vector<Tensor>& p) {
                                        return projection_loss(kind)(p[0], ht, red);
                                      })};
                   }});
      c.push_back({name + "_interpolated", [kind, red](Rng& rng) {
                     Tensor hm = random_tensor(rng, {2, 3, 9});
                     Tensor ht = random_tensor(rng, {2, 3, 4}, false);
                     return std::pair{std::vector<Tensor>{hm}, ScalarFn([kind, red, ht](const std::vector<Tensor>& p) {
                                        return projection_loss(kind)(match_width(p[0], 4), ht, red);
                                      })};
                   }});
    }
  }
  // nll + lambda(s) * proj through a small target model aligned to a
  // narrower frozen one.
  for (auto kind : {LossKind::cosine, LossKind::logsum}) {
    std::string name = "total_" + std::string(to_string(kind));
    c.push_back({name, [kind](Rng& rng) {
                   ModelConfig mc = tiny_config(8, 3), tc = tiny_config(4, 2);
                   auto target = init_params(mc, rng.next());
                   // Larger weights than the default init keep gradients well
                   // above the difference noise.
                   for (auto& p : target.parameters()) {
                     for (double& v : p.value.mutable_data()) v *= 3.0;
                   }
                   auto teacher = init_params(tc, rng.next());
                   teacher.set_trainable(false);
                   auto ids = random_ids(rng, 8, mc.vocab_size);
                   std::vector<std::int32_t> targets = random_ids(rng, 8, mc.vocab_size);
                   AlignmentSpec spec;
                   spec.loss_kind = kind;
                   spec.lambda0 = 0.7;
                   spec.s_stop = 10;
                   spec.early_layer = 2;
                   const std::size_t step = rng.below(10);
                   ModelConfig cfg = mc;
                   std::vector<std::string> names;
                   for (const auto& p : target.parameters()) names.push_back(p.name);
                   ScalarFn fn = [=](const std::vector<Tensor>& p) {
                     std::vector<NamedTensor> named;
                     for (std::size_t i = 0; i < p.size(); ++i) named.push_back({names[i], p[i]});
                     TransformerModel m(cfg, std::move(named));
                     ForwardResult out = m.forward(ids, 2, 4);
                     ForwardResult t = teacher.forward(ids, 2, 4);
                     LayerPair pair = select_layers(spec.strategy, 2, 3, spec.early_layer);
                     Tensor proj = projection_loss(spec.loss_kind)(match_width(out.hidden[pair.target_layer], 4),
                                                                   t.hidden[pair.teacher_layer], spec.token_reduction);
                     return loss_total(loss_nll(out.logits, targets), proj, step, spec);
                   };
                   return std::pair{model_params(target), fn};
                 }});
  }
  return c;
}

std::vector<Case> model_cases() {
  std::vector<Case> c;
  for (auto act : {Activation::swiglu, Activation::gelu, Activation::relu, Activation::silu}) {
    c.push_back({"transformer_2layer_nll_" + std::string(to_string(act)), [act](Rng& rng) {
                   ModelConfig mc = tiny_config(8, 2, act);
                   auto model = init_params(mc, rng.next());
                   for (auto& p : model.parameters()) {
                     for (double& v : p.value.mutable_data()) v *= 3.0;
                   }
                   auto ids = random_ids(rng, 8, mc.vocab_size);
                   auto targets = random_ids(rng, 8, mc.vocab_size);
                   std::vector<std::string> names;
                   for (const auto& p : model.parameters()) names.push_back(p.name);
                   ScalarFn fn = [=](const std::vector<Tensor>& p) {
                     std::vector<NamedTensor> named;
                     for (std::size_t i = 0; i < p.size(); ++i) named.push_back({names[i], p[i]});
                     return loss_nll(TransformerModel(mc, std::move(named)).forward(ids, 2, 4).logits, targets);
                   };
                   return std::pair{model_params(model), fn};
                 }});
  }
  return c;
}

}  // namespace

GradCheckScope parse_gradcheck_scope(std::string_view s) {
  if (s == "primitives") return GradCheckScope::primitives;
  if (s == "losses") return GradCheckScope::losses;
  if (s == "model") return GradCheckScope::model;
  throw ConfigError("unknown gradcheck scope '" + std::string(s) + "' (expected primitives, losses or model)");
}

std::string_view to_string(GradCheckScope s) {
  switch (s) {
    case GradCheckScope::primitives:
      return "primitives";
    case GradCheckScope::losses:
      return "losses";
    case GradCheckScope::model:
      return "model";
  }
  return "?";
}

std::vector<GradCheckItem> run_gradcheck_suite(GradCheckScope scope, std::size_t seeds, std::uint64_t base_seed,
                                               double fd_step) {
  std::vector<Case> cases = scope == GradCheckScope::primitives ? primitive_cases()
                            : scope == GradCheckScope::losses   ? loss_cases()
                                                                : model_cases();
  std::vector<GradCheckItem> out;
  for (const auto& c : cases) {
    GradCheckItem item{c.name, 0.0, seeds};
    for (std::size_t s = 0; s < seeds; ++s) {
      Rng rng(derive_seed(base_seed, c.name + "#" + std::to_string(s)));
      auto [params, fn] = c.make(rng);
      item.worst = std::max(item.worst, grad_check(fn, params, fd_step));
    }
    out.push_back(std::move(item));
  }
  return out;
}

}  // namespace letlab
