// SPDX-License-Identifier: Apache-2.0
//
// Config-driven workflows behind the command-line tool: corpus generation,
// teacher pretraining, single runs and ablation grids.

#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "letlab/config.hpp"
#include "letlab/data.hpp"
#include "letlab/model.hpp"
#include "letlab/trainer.hpp"

namespace letlab {

/// A required input (teacher checkpoint, data file) is absent.
class MissingPrerequisite : public Error {
 public:
  using Error::Error;
};

struct Corpora {
  Corpus train;
  Corpus test;
  /// Analytic entropy rate in nats for synthetic sources.
  std::optional<double> entropy_rate;
};

/// Builds (or reads) the corpus described by `data` and splits it.
Corpora load_corpora(const DataConfig& data);

/// Writes train.tok, test.tok and manifest.json into `dir`; returns the
/// manifest.
nlohmann::json gen_data(const RunConfigFile& config, const std::filesystem::path& dir);

/// Corpora from `dir` when gen-data already ran there with the same data
/// block, otherwise built in memory.
Corpora corpora_for(const RunConfigFile& config, const std::filesystem::path& data_dir);

/// Trains T in baseline mode and writes its checkpoint (kind "teacher") to
/// config.resolved_teacher_checkpoint(). Returns the trained teacher.
TransformerModel pretrain_teacher(const RunConfigFile& config, const Corpora& corpora);

/// Reads the teacher checkpoint. Throws MissingPrerequisite when absent.
TransformerModel load_teacher(const RunConfigFile& config);

struct RunOutcome {
  std::size_t steps_run = 0;
  std::size_t final_step = 0;
  std::optional<double> final_test_ppl;
  std::uint64_t teacher_hash_before = 0;
  std::uint64_t teacher_hash_after = 0;
};

/// Trains the target model into `run_dir` (metrics.jsonl, checkpoint.bin,
/// config.json). With `resume` an existing checkpoint is continued; a
/// finished one is left alone.
RunOutcome run_training(const RunConfigFile& config, const Corpora& corpora, const TransformerModel* teacher,
                        const std::filesystem::path& run_dir, bool resume = false);

enum class AblationSuite { layers, lambda, sstop, layer_select };

AblationSuite parse_ablation_suite(std::string_view s);
std::string_view to_string(AblationSuite s);

struct AblationCell {
  std::string id;
  RunConfigFile config;
};

/// Grid cells in lexicographic id order, all in let mode.
std::vector<AblationCell> ablation_cells(const RunConfigFile& base, AblationSuite suite);

struct CellResult {
  std::string id;
  bool ok = false;
  std::string error;
  std::size_t steps_run = 0;
};

struct AblationResult {
  std::filesystem::path dir;
  std::vector<CellResult> cells;
  bool all_ok() const;
};

/// Runs every cell under <output_dir>/ablate/<suite>/<id> with up to `jobs`
/// concurrent workers, then writes perplexity.csv and similarity.csv over
/// the cells that finished.
AblationResult run_ablation(const RunConfigFile& base, AblationSuite suite, const Corpora& corpora,
                            const TransformerModel& teacher, std::size_t jobs = 1, bool resume = false);

}  // namespace letlab
