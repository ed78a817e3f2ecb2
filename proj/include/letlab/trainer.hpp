// SPDX-License-Identifier: Apache-2.0
//
// Training loop for the target model: plain next-token training, hidden-state
// alignment against a frozen smaller model with a decaying weight, output
// distillation, and distillation followed by plain training. AdamW with
// warmup plus cosine decay, global-norm clipping, checkpoints, bitwise
// resume.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "letlab/alignment.hpp"
#include "letlab/data.hpp"
#include "letlab/metrics.hpp"
#include "letlab/model.hpp"

namespace letlab {

enum class TrainMode { baseline, let, rkd, kd_then_standard };

std::string_view to_string(TrainMode m);
TrainMode parse_train_mode(std::string_view s);

struct TrainConfig {
  TrainMode mode = TrainMode::baseline;
  std::optional<AlignmentSpec> alignment;
  std::size_t n_kd = 0;
  std::size_t total_steps = 1000;
  std::size_t batch_size = 16;
  std::size_t seq_len = 64;
  double peak_lr = 1e-3;
  double warmup_fraction = 0.10;
  double final_lr_fraction = 0.10;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  double grad_clip_norm = 1.0;
  double kd_temperature = 1.0;
  double kd_weight = 1.0;
  std::uint64_t seed = 0;
  /// Evaluate and checkpoint every this many steps; 0 means only at the end.
  std::size_t eval_interval = 0;

  void validate() const;
  bool needs_teacher() const { return mode != TrainMode::baseline; }

  bool operator==(const TrainConfig&) const = default;
};

/// Linear warmup over warmup_fraction * total_steps, then cosine decay to
/// final_lr_fraction * peak_lr at total_steps.
double lr_at(double step, const TrainConfig& config);

struct OptimizerState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::size_t step = 0;

  static OptimizerState for_params(const std::vector<NamedTensor>& params);
  bool operator==(const OptimizerState&) const = default;
};

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
double clip_global_norm(std::vector<std::vector<double>>& grads, double max_norm);

/// Clips, then one AdamW step with decoupled weight decay on every
/// parameter. Throws NumericalError naming the parameter (and `step`) on a
/// non-finite gradient, before anything is modified.
void adamw_update(std::vector<NamedTensor>& params, std::vector<std::vector<double>> grads, OptimizerState& opt,
                  double lr, const TrainConfig& config, std::size_t step = 0);

/// "LETCKPT1", u64 header length, JSON header, then little-endian doubles
/// for every manifest entry (parameters, then optimizer moments).
struct Checkpoint {
  std::string kind = "model";
  ModelConfig model_config;
  std::vector<NamedTensor> params;
  std::optional<OptimizerState> optimizer;
  std::size_t step = 0;
  BatchIterator::Cursor cursor;
  nlohmann::json config_echo = nlohmann::json::object();
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);
TransformerModel model_from_checkpoint(const Checkpoint& ckpt);

/// Fresh target model for `config.seed`, drawn from the named sub-stream.
TransformerModel initial_model(const ModelConfig& model_config, std::uint64_t seed, std::string_view stream = "init");

struct RunState {
  TransformerModel model;
  const TransformerModel* teacher = nullptr;
  OptimizerState optimizer;
  std::size_t step = 0;
  std::size_t teacher_forwards = 0;
};

/// One optimizer update of `state.model` on `batch` at step state.step,
/// which then advances by one.
MetricsRecord train_step(RunState& state, const TrainConfig& config, const TokenBatch& batch);

class Trainer {
 public:
  /// `teacher` is copied and frozen. Files go to `out_dir` (metrics.jsonl,
  /// checkpoint.bin) unless it is empty.
  Trainer(TrainConfig config, TransformerModel initial, const Corpus& train, const Corpus* test,
          const TransformerModel* teacher, std::filesystem::path out_dir = {});

  /// Continues from a checkpoint written by a run with the same config.
  /// Metrics already logged past the checkpoint are discarded.
  static Trainer resume(const std::filesystem::path& checkpoint, TrainConfig config, const Corpus& train,
                        const Corpus* test, const TransformerModel* teacher, std::filesystem::path out_dir = {});

  /// Trains until total_steps, or until `stop_after` completed steps.
  void run(std::optional<std::size_t> stop_after = std::nullopt);

  void set_checkpoint_kind(std::string kind) { checkpoint_kind_ = std::move(kind); }
  void set_config_echo(nlohmann::json echo) { config_echo_ = std::move(echo); }
  void save_checkpoint(const std::filesystem::path& path) const;

  const TrainConfig& config() const { return config_; }
  const TransformerModel& model() const { return state_.model; }
  const TransformerModel* teacher() const { return teacher_.get(); }
  const OptimizerState& optimizer() const { return state_.optimizer; }
  std::size_t step() const { return state_.step; }
  std::size_t teacher_forwards() const { return state_.teacher_forwards; }
  const std::vector<MetricsRecord>& records() const { return records_; }
  const std::vector<EvalRecord>& evals() const { return evals_; }

 private:
  void open_log(bool truncate);
  void append_line(const std::string& line);

  TrainConfig config_;
  const Corpus* train_;
  const Corpus* test_;
  std::unique_ptr<TransformerModel> teacher_;
  RunState state_;
  BatchIterator batches_;
  std::filesystem::path out_dir_;
  std::ofstream log_;
  std::string checkpoint_kind_ = "model";
  nlohmann::json config_echo_ = nlohmann::json::object();
  std::vector<MetricsRecord> records_;
  std::vector<EvalRecord> evals_;
};

}  // namespace letlab
