// SPDX-License-Identifier: Apache-2.0
//
// let_lab: command-line front end.
//
// Exit codes: 0 success, 1 check failure, 2 missing prerequisite,
// 3 numerical divergence, 64 usage error.

#include <malloc.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "letlab/config.hpp"
#include "letlab/gradcheck_suites.hpp"
#include "letlab/metrics.hpp"
#include "letlab/pipeline.hpp"
#include "letlab/theory.hpp"
#include "letlab/trainer.hpp"

namespace fs = std::filesystem;
using namespace letlab;
using nlohmann::json;

namespace {

enum Exit : int { kOk = 0, kCheckFailed = 1, kMissing = 2, kDiverged = 3, kUsage = 64 };

class UsageError : public Error {
 public:
  using Error::Error;
};

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string mode;
};

RunConfigFile load(const Common& c) {
  if (c.config.empty()) throw UsageError("--config is required");
  if (!fs::exists(c.config)) throw MissingPrerequisite("config " + c.config + " not found");
  std::ifstream in(c.config);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(c.config + ": " + e.what());
  }
  if (c.seed) j["seed"] = *c.seed;
  RunConfigFile cfg = run_config_from_json(j);
  if (c.seed) cfg.reseed(*c.seed);
  if (!c.mode.empty()) cfg.train.mode = parse_train_mode(c.mode);
  if (const char* out = std::getenv("LET_LAB_OUT"); out != nullptr && *out != '\0') {
    cfg.output_dir = out;
  }
  cfg.train.validate();
  return cfg;
}

fs::path output_root() {
  if (const char* out = std::getenv("LET_LAB_OUT"); out != nullptr && *out != '\0') return out;
  return "let_out";
}

fs::path run_dir(const RunConfigFile& cfg) {
  return cfg.output_dir / "runs" / (std::string(to_string(cfg.train.mode)) + "-seed" + std::to_string(cfg.train.seed));
}

Corpora corpora(const RunConfigFile& cfg) { return corpora_for(cfg, cfg.output_dir / "data"); }

int cmd_gen_data(const Common& c) {
  RunConfigFile cfg = load(c);
  json m = gen_data(cfg, cfg.output_dir / "data");
  std::cout << "wrote " << (cfg.output_dir / "data").string() << ": " << m["train_tokens"] << " train, "
            << m["test_tokens"] << " test tokens";
  if (!m["entropy_rate"].is_null()) std::cout << ", entropy rate " << m["entropy_rate"].get<double>() << " nats";
  std::cout << '\n';
  return kOk;
}

int cmd_pretrain(const Common& c) {
  RunConfigFile cfg = load(c);
  Corpora data = corpora(cfg);
  TransformerModel t = pretrain_teacher(cfg, data);
  std::cout << "teacher checkpoint " << cfg.resolved_teacher_checkpoint().string() << " (test perplexity "
            << format_number(perplexity(t, data.test, cfg.train.seq_len, cfg.train.batch_size)) << ")\n";
  return kOk;
}

int cmd_train(const Common& c, bool resume) {
  RunConfigFile cfg = load(c);
  Corpora data = corpora(cfg);
  std::optional<TransformerModel> teacher;
  if (cfg.train.needs_teacher()) teacher = load_teacher(cfg);
  const fs::path dir = run_dir(cfg);
  RunOutcome o = run_training(cfg, data, teacher ? &*teacher : nullptr, dir, resume);
  std::cout << "run " << dir.string() << ": " << o.steps_run << " steps";
  if (o.final_test_ppl) std::cout << ", test perplexity " << format_number(*o.final_test_ppl);
  std::cout << '\n';
  return kOk;
}

int cmd_eval(const Common& c, const std::string& checkpoint) {
  RunConfigFile cfg = load(c);
  const fs::path path = checkpoint.empty() ? run_dir(cfg) / "checkpoint.bin" : fs::path(checkpoint);
  if (!fs::exists(path)) throw MissingPrerequisite("checkpoint " + path.string() + " not found");
  Checkpoint ck = read_checkpoint(path);
  Corpora data = corpora(cfg);
  TransformerModel m = model_from_checkpoint(ck);
  const double nll = mean_nll(m, data.test, cfg.train.seq_len, cfg.train.batch_size);
  json out = {{"checkpoint", path.string()}, {"step", ck.step}, {"test_nll", nll}, {"test_ppl", std::exp(nll)}};
  if (data.entropy_rate) out["entropy_rate"] = *data.entropy_rate;
  std::cout << out.dump() << '\n';
  return kOk;
}

int cmd_ablate(const Common& c, const std::string& suite, std::size_t jobs, bool resume) {
  RunConfigFile cfg = load(c);
  const AblationSuite s = parse_ablation_suite(suite);
  Corpora data = corpora(cfg);
  TransformerModel teacher = load_teacher(cfg);
  AblationResult r = run_ablation(cfg, s, data, teacher, jobs, resume);
  for (const auto& cell : r.cells) {
    if (cell.ok) {
      std::cout << cell.id << ": ok (" << cell.steps_run << " new steps)\n";
    } else {
      std::cout << cell.id << ": FAILED: " << cell.error << '\n';
    }
  }
  std::cout << "tables in " << r.dir.string() << '\n';
  return r.all_ok() ? kOk : kCheckFailed;
}

int cmd_verify_theory(const SweepOptions& opts) {
  for (std::size_t k : opts.k_values) {
    if (k == 0 || k > opts.depth) {
      throw UsageError("--k-list: k=" + std::to_string(k) + " must lie in [1, " + std::to_string(opts.depth) + "]");
    }
  }
  if (opts.depth == 0 || opts.dim == 0 || opts.trials == 0) throw UsageError("--L, --d and --trials must be positive");
  if (opts.depth * opts.dim * opts.dim > kMaxHessianParams) {
    throw MissingPrerequisite("dense Hessian guard: L * d^2 = " + std::to_string(opts.depth * opts.dim * opts.dim) +
                              " exceeds " + std::to_string(kMaxHessianParams));
  }
  SweepResult r = curvature_sweep(opts);
  const fs::path dir = output_root() / "theory";
  fs::create_directories(dir);
  Table t = sweep_table(r);
  write_csv(std::cout, t);
  write_csv(dir / "sweep.csv", t);
  write_csv(dir / "blocks.csv", block_table(r));
  json summary = sweep_summary(r);
  std::ofstream(dir / "summary.json") << summary.dump(2) << '\n';
  std::cout << summary.dump(2) << '\n';
  std::cout << (r.passed() ? "verify-theory: PASS" : "verify-theory: FAIL") << '\n';
  return r.passed() ? kOk : kCheckFailed;
}

int cmd_gradcheck(const std::string& scope, std::size_t seeds, std::uint64_t seed) {
  const GradCheckScope s = parse_gradcheck_scope(scope);
  std::vector<GradCheckItem> items = run_gradcheck_suite(s, seeds, seed);
  std::vector<std::string> offenders;
  for (const auto& it : items) {
    const bool ok = it.worst < kGradCheckThreshold;
    std::printf("%-40s worst %.3e over %zu seeds  %s\n", it.name.c_str(), it.worst, it.seeds, ok ? "ok" : "FAIL");
    if (!ok) offenders.push_back(it.name);
  }
  if (!offenders.empty()) {
    std::printf("gradcheck %s: %zu item(s) above %.0e:", scope.c_str(), offenders.size(), kGradCheckThreshold);
    for (const auto& o : offenders) std::printf(" %s", o.c_str());
    std::printf("\n");
    return kCheckFailed;
  }
  std::printf("gradcheck %s: all %zu items below %.0e\n", scope.c_str(), items.size(), kGradCheckThreshold);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  // Keep large activation buffers on the heap free lists between steps.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  CLI::App app{"LET lab: layer-alignment training experiments on a desk-scale transformer"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub, bool with_mode) {
    sub->add_option("--config", common.config, "Run configuration (JSON)");
    sub->add_option("--seed", common.seed, "Override the top-level seed");
    if (with_mode) sub->add_option("--mode", common.mode, "baseline, let, rkd or kd_then_standard");
  };

  auto* gen = app.add_subcommand("gen-data", "Generate and split the corpus");
  add_common(gen, false);
  auto* pre = app.add_subcommand("pretrain-teacher", "Train the small model T");
  add_common(pre, false);
  bool resume = false;
  auto* train = app.add_subcommand("train", "Train the target model M");
  add_common(train, true);
  train->add_flag("--resume", resume, "Continue from the run's checkpoint");
  std::string checkpoint;
  auto* eval = app.add_subcommand("eval", "Test perplexity of a checkpoint");
  add_common(eval, true);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint (default: the train run for --mode)");
  std::string suite;
  std::size_t jobs = 1;
  auto* ablate = app.add_subcommand("ablate", "Run an ablation grid");
  add_common(ablate, false);
  ablate->add_option("--suite", suite, "layers, lambda, sstop or layer-select")->required();
  ablate->add_option("--jobs", jobs, "Concurrent cells")->check(CLI::PositiveNumber);
  ablate->add_flag("--resume", resume, "Skip finished cells, continue partial ones");

  SweepOptions sweep;
  auto* theory = app.add_subcommand("verify-theory", "Hessian block structure of deep linear networks");
  theory->add_option("--config", common.config, "Ignored; accepted for symmetry");
  theory->add_option("--L", sweep.depth, "Depth");
  theory->add_option("--d", sweep.dim, "Width");
  theory->add_option("--k-list", sweep.k_values, "Alignment depths")->delimiter(',');
  theory->add_option("--trials", sweep.trials, "Random trials");
  theory->add_option("--seed", sweep.seed, "Sweep seed");
  theory->add_option("--fd-step", sweep.fd_step, "Finite-difference step");
  theory->add_flag("--identity", sweep.identity, "Identity weights instead of random ones");

  std::string scope = "losses";
  std::size_t seeds = 20;
  std::uint64_t gc_seed = 0;
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  grad->add_option("--config", common.config, "Ignored; accepted for symmetry");
  grad->add_option("--scope", scope, "primitives, losses or model");
  grad->add_option("--seeds", seeds, "Random draws per item")->check(CLI::PositiveNumber);
  grad->add_option("--seed", gc_seed, "Base seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) return cmd_gen_data(common);
    if (*pre) return cmd_pretrain(common);
    if (*train) return cmd_train(common, resume);
    if (*eval) return cmd_eval(common, checkpoint);
    if (*ablate) return cmd_ablate(common, suite, jobs, resume);
    if (*theory) return cmd_verify_theory(sweep);
    if (*grad) return cmd_gradcheck(scope, seeds, gc_seed);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const MissingPrerequisite& e) {
    std::cerr << "missing prerequisite: " << e.what() << '\n';
    return kMissing;
  } catch (const NumericalError& e) {
    std::cerr << "numerical divergence: " << e.what() << '\n';
    return kDiverged;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kCheckFailed;
  }
  return kUsage;
}
