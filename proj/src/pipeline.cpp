// SPDX-License-Identifier: Apache-2.0

#include "letlab/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <mutex>
#include <thread>

#include "letlab/metrics.hpp"

namespace letlab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

std::string lambda_id(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return std::string("lambda-") + buf;
}

}  // namespace

Corpora load_corpora(const DataConfig& data) {
  Corpus full;
  std::optional<double> rate;
  switch (data.source) {
    case DataSource::markov:
      full = gen_markov_corpus(*data.markov, data.length);
      rate = data.markov->entropy_rate();
      break;
    case DataSource::bytes:
      if (!fs::exists(data.path)) throw MissingPrerequisite("data file " + data.path.string() + " not found");
      full = read_byte_file(data.path);
      break;
    case DataSource::tokens:
      if (!fs::exists(data.path)) throw MissingPrerequisite("data file " + data.path.string() + " not found");
      full = read_token_file(data.path);
      break;
  }
  auto [train, test] = split_corpus(full, data.train_fraction);
  return {std::move(train), std::move(test), rate};
}

json gen_data(const RunConfigFile& config, const fs::path& dir) {
  Corpora c = load_corpora(config.data);
  ensure_dir(dir);
  write_token_file(dir / "train.tok", c.train);
  write_token_file(dir / "test.tok", c.test);
  json manifest = {{"data", to_json(config.data)},
                   {"vocab_size", c.train.vocab_size},
                   {"train_tokens", c.train.size()},
                   {"test_tokens", c.test.size()},
                   {"train_file", "train.tok"},
                   {"test_file", "test.tok"},
                   {"synthetic", config.data.source == DataSource::markov}};
  if (config.data.markov) manifest["seed"] = config.data.markov->seed;
  manifest["entropy_rate"] = c.entropy_rate ? json(*c.entropy_rate) : json(nullptr);
  write_json(dir / "manifest.json", manifest);
  return manifest;
}

Corpora corpora_for(const RunConfigFile& config, const fs::path& data_dir) {
  const fs::path manifest_path = data_dir / "manifest.json";
  if (fs::exists(manifest_path)) {
    std::ifstream in(manifest_path);
    json m = json::parse(in, nullptr, false);
    if (!m.is_discarded() && m.value("data", json()) == to_json(config.data)) {
      Corpora c{read_token_file(data_dir / "train.tok"), read_token_file(data_dir / "test.tok"), std::nullopt};
      if (m.contains("entropy_rate") && !m["entropy_rate"].is_null()) c.entropy_rate = m["entropy_rate"].get<double>();
      return c;
    }
  }
  return load_corpora(config.data);
}

TransformerModel pretrain_teacher(const RunConfigFile& config, const Corpora& corpora) {
  const TrainConfig tc = config.resolved_teacher_train();
  tc.validate();
  if (config.model_t.vocab_size != corpora.train.vocab_size) {
    throw ConfigError("model_t.vocab_size " + std::to_string(config.model_t.vocab_size) + " differs from the corpus (" +
                      std::to_string(corpora.train.vocab_size) + ")");
  }
  const fs::path ckpt = config.resolved_teacher_checkpoint();
  const fs::path dir = ckpt.parent_path().empty() ? fs::path(".") : ckpt.parent_path();
  ensure_dir(dir);
  json echo = to_json(config);
  echo["teacher_train"] = to_json(tc);
  write_json(dir / "config.json", echo);
  Trainer t(tc, initial_model(config.model_t, tc.seed, "teacher-init"), corpora.train, &corpora.test, nullptr, dir);
  t.set_checkpoint_kind("teacher");
  t.set_config_echo(echo);
  t.run();
  t.save_checkpoint(ckpt);
  return t.model();
}

TransformerModel load_teacher(const RunConfigFile& config) {
  const fs::path ckpt = config.resolved_teacher_checkpoint();
  if (!fs::exists(ckpt)) {
    throw MissingPrerequisite("teacher checkpoint " + ckpt.string() + " not found (run pretrain-teacher first)");
  }
  Checkpoint ck = read_checkpoint(ckpt);
  if (ck.model_config != config.model_t) {
    throw ConfigError("teacher checkpoint " + ckpt.string() + " does not match model_t");
  }
  return model_from_checkpoint(ck);
}

RunOutcome run_training(const RunConfigFile& config, const Corpora& corpora, const TransformerModel* teacher,
                        const fs::path& run_dir, bool resume) {
  config.train.validate();
  if (config.train.needs_teacher() && teacher == nullptr) {
    throw MissingPrerequisite("mode " + std::string(to_string(config.train.mode)) + " needs a teacher checkpoint");
  }
  ensure_dir(run_dir);
  const json echo = to_json(config);
  RunOutcome out;
  if (teacher != nullptr) out.teacher_hash_before = teacher->parameter_hash();
  const fs::path ckpt = run_dir / "checkpoint.bin";
  std::optional<Trainer> trainer;
  if (resume && fs::exists(ckpt)) {
    std::ifstream in(run_dir / "config.json");
    json previous = json::parse(in, nullptr, false);
    if (previous != echo) throw ConfigError("resume: " + run_dir.string() + " was produced by a different config");
    trainer.emplace(Trainer::resume(ckpt, config.train, corpora.train, &corpora.test, teacher, run_dir));
  } else {
    write_json(run_dir / "config.json", echo);
    trainer.emplace(config.train, initial_model(config.model_m, config.train.seed), corpora.train, &corpora.test,
                    teacher, run_dir);
    trainer->set_config_echo(echo);
  }
  const std::size_t start = trainer->step();
  trainer->run();
  out.steps_run = trainer->step() - start;
  out.final_step = trainer->step();
  if (!trainer->evals().empty()) out.final_test_ppl = trainer->evals().back().test_ppl;
  if (trainer->teacher() != nullptr) out.teacher_hash_after = trainer->teacher()->parameter_hash();
  if (teacher != nullptr && teacher->parameter_hash() != out.teacher_hash_before) {
    throw NumericalError("teacher parameters changed during training");
  }
  return out;
}

AblationSuite parse_ablation_suite(std::string_view s) {
  if (s == "layers") return AblationSuite::layers;
  if (s == "lambda") return AblationSuite::lambda;
  if (s == "sstop") return AblationSuite::sstop;
  if (s == "layer-select") return AblationSuite::layer_select;
  throw ConfigError("unknown suite '" + std::string(s) + "' (expected layers, lambda, sstop or layer-select)");
}

std::string_view to_string(AblationSuite s) {
  switch (s) {
    case AblationSuite::layers:
      return "layers";
    case AblationSuite::lambda:
      return "lambda";
    case AblationSuite::sstop:
      return "sstop";
    case AblationSuite::layer_select:
      return "layer-select";
  }
  return "?";
}

std::vector<AblationCell> ablation_cells(const RunConfigFile& base, AblationSuite suite) {
  const AlignmentSpec spec = base.train.alignment.value_or(AlignmentSpec{});
  std::vector<AblationCell> cells;
  auto add = [&](std::string id, AlignmentSpec a) {
    RunConfigFile c = base;
    c.train.mode = TrainMode::let;
    c.train.alignment = a;
    cells.push_back({std::move(id), std::move(c)});
  };
  switch (suite) {
    case AblationSuite::layers:
      for (auto v : {LayerVariant::L2E, LayerVariant::L2M, LayerVariant::L2L, LayerVariant::M2E, LayerVariant::M2M,
                     LayerVariant::M2L}) {
        AlignmentSpec a = spec;
        a.strategy = LayerPairStrategy::named(v);
        add(std::string(to_string(v)), a);
      }
      break;
    case AblationSuite::lambda:
      for (double l : {0.01, 0.1, 0.3, 1.0, 3.0}) {
        AlignmentSpec a = spec;
        a.lambda0 = l;
        add(lambda_id(l), a);
      }
      break;
    case AblationSuite::sstop:
      for (std::size_t pct : {10, 20}) {
        AlignmentSpec a = spec;
        a.s_stop = base.train.total_steps * pct / 100;
        add("sstop-" + std::to_string(a.s_stop), a);
      }
      break;
    case AblationSuite::layer_select:
      for (const char* s : {"L1-F1", "L1-F3", "L1-F5", "L3-F3"}) {
        AlignmentSpec a = spec;
        a.strategy = LayerPairStrategy::parse(s);
        add(s, a);
      }
      break;
  }
  std::sort(cells.begin(), cells.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  return cells;
}

bool AblationResult::all_ok() const {
  return std::all_of(cells.begin(), cells.end(), [](const CellResult& c) { return c.ok; });
}

AblationResult run_ablation(const RunConfigFile& base, AblationSuite suite, const Corpora& corpora,
                            const TransformerModel& teacher, std::size_t jobs, bool resume) {
  const std::vector<AblationCell> cells = ablation_cells(base, suite);
  AblationResult result;
  result.dir = base.output_dir / "ablate" / std::string(to_string(suite));
  ensure_dir(result.dir);
  result.cells.resize(cells.size());

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      CellResult& r = result.cells[i];
      r.id = cells[i].id;
      try {
        RunOutcome o = run_training(cells[i].config, corpora, &teacher, result.dir / cells[i].id, resume);
        r.steps_run = o.steps_run;
        r.ok = true;
      } catch (const std::exception& e) {
        r.error = e.what();
      }
    }
  };
  const std::size_t n = std::clamp<std::size_t>(jobs, 1, std::max<std::size_t>(cells.size(), 1));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < n; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  std::vector<std::pair<std::string, MetricsLog>> logs;
  for (const auto& c : result.cells) {
    if (c.ok) logs.emplace_back(c.id, read_metrics(result.dir / c.id / "metrics.jsonl"));
  }
  if (!logs.empty()) {
    write_csv(result.dir / "perplexity.csv", compare_runs(logs, "test_ppl"));
    write_csv(result.dir / "similarity.csv", compare_runs(logs, "cos_sim"));
  }
  return result;
}

}  // namespace letlab
