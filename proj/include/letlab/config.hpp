// SPDX-License-Identifier: Apache-2.0
//
// JSON run configuration. Every object is checked against its known keys;
// anything unrecognised is a ConfigError.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "letlab/alignment.hpp"
#include "letlab/data.hpp"
#include "letlab/model.hpp"
#include "letlab/trainer.hpp"

namespace letlab {

using nlohmann::json;

json to_json(const ModelConfig& c);
json to_json(const AlignmentSpec& a);
json to_json(const TrainConfig& t);
json to_json(const MarkovSpec& m);

/// Missing keys take the struct defaults.
ModelConfig model_config_from_json(const json& j);
AlignmentSpec alignment_from_json(const json& j);
TrainConfig train_config_from_json(const json& j, TrainConfig base = {});
MarkovSpec markov_from_json(const json& j);

enum class DataSource { markov, bytes, tokens };

struct DataConfig {
  DataSource source = DataSource::markov;
  std::optional<MarkovSpec> markov;
  std::filesystem::path path;
  std::size_t length = 200000;
  double train_fraction = 0.9;
};

json to_json(const DataConfig& d);
DataConfig data_config_from_json(const json& j, std::uint64_t seed);

struct RunConfigFile {
  ModelConfig model_m;
  ModelConfig model_t;
  DataConfig data;
  TrainConfig train;
  /// Teacher pretraining schedule; defaults to `train` in baseline mode.
  std::optional<TrainConfig> teacher_train;
  /// Defaults to <output_dir>/teacher/checkpoint.bin.
  std::filesystem::path teacher_checkpoint;
  std::filesystem::path output_dir = "let_out";
  std::uint64_t seed = 0;

  TrainConfig resolved_teacher_train() const;
  std::filesystem::path resolved_teacher_checkpoint() const;
  /// Sets seed, train.seed and teacher_train.seed.
  void reseed(std::uint64_t seed);
};

/// Top-level `seed` fills train.seed and the Markov seed when they are not
/// given explicitly; the `alignment` block becomes train.alignment.
RunConfigFile run_config_from_json(const json& j);
RunConfigFile load_run_config(const std::filesystem::path& path);
/// Fully resolved echo with every default materialised.
json to_json(const RunConfigFile& c);

}  // namespace letlab
