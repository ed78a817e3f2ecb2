// SPDX-License-Identifier: Apache-2.0

#include "letlab/config.hpp"

#include <algorithm>
#include <fstream>
#include <initializer_list>

#include "letlab/random.hpp"

namespace letlab {

namespace {

void check_keys(const json& j, std::string_view where, std::initializer_list<std::string_view> allowed) {
  if (!j.is_object()) throw ConfigError(std::string(where) + ": expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      std::string list;
      for (auto a : allowed) list += (list.empty() ? "" : ", ") + std::string(a);
      throw ConfigError(std::string(where) + ": unknown key '" + key + "' (allowed: " + list + ")");
    }
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, std::string_view where) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string(where) + "." + key + ": wrong type");
  }
}

std::string_view to_string(DataSource s) {
  switch (s) {
    case DataSource::markov:
      return "markov";
    case DataSource::bytes:
      return "bytes";
    case DataSource::tokens:
      return "tokens";
  }
  return "?";
}

DataSource parse_source(std::string_view s) {
  if (s == "markov") return DataSource::markov;
  if (s == "bytes") return DataSource::bytes;
  if (s == "tokens") return DataSource::tokens;
  throw ConfigError("data.source: unknown source '" + std::string(s) + "' (expected markov, bytes or tokens)");
}

}  // namespace

json to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size},
          {"hidden_size", c.hidden_size},
          {"intermediate_size", c.intermediate_size},
          {"num_layers", c.num_layers},
          {"num_heads", c.num_heads},
          {"num_kv_heads", c.num_kv_heads},
          {"activation", std::string(to_string(c.activation))},
          {"max_seq_len", c.max_seq_len},
          {"tie_embeddings", c.tie_embeddings},
          {"rope_base", c.rope_base}};
}

ModelConfig model_config_from_json(const json& j) {
  constexpr std::string_view w = "model";
  check_keys(j, w,
             {"vocab_size", "hidden_size", "intermediate_size", "num_layers", "num_heads", "num_kv_heads", "activation",
              "max_seq_len", "tie_embeddings", "rope_base"});
  ModelConfig c;
  read(j, "vocab_size", c.vocab_size, w);
  read(j, "hidden_size", c.hidden_size, w);
  read(j, "intermediate_size", c.intermediate_size, w);
  read(j, "num_layers", c.num_layers, w);
  read(j, "num_heads", c.num_heads, w);
  c.num_kv_heads = c.num_heads;
  read(j, "num_kv_heads", c.num_kv_heads, w);
  std::string act(to_string(c.activation));
  read(j, "activation", act, w);
  c.activation = parse_activation(act);
  read(j, "max_seq_len", c.max_seq_len, w);
  read(j, "tie_embeddings", c.tie_embeddings, w);
  read(j, "rope_base", c.rope_base, w);
  c.validate();
  return c;
}

json to_json(const AlignmentSpec& a) {
  return {{"strategy", a.strategy.str()},
          {"loss_kind", std::string(to_string(a.loss_kind))},
          {"lambda0", a.lambda0},
          {"s_stop", a.s_stop},
          {"token_reduction", std::string(to_string(a.token_reduction))},
          {"early_layer", a.early_layer}};
}

AlignmentSpec alignment_from_json(const json& j) {
  constexpr std::string_view w = "alignment";
  check_keys(j, w, {"strategy", "loss_kind", "lambda0", "s_stop", "token_reduction", "early_layer"});
  AlignmentSpec a;
  std::string strategy = a.strategy.str(), kind(to_string(a.loss_kind)), red(to_string(a.token_reduction));
  read(j, "strategy", strategy, w);
  read(j, "loss_kind", kind, w);
  read(j, "token_reduction", red, w);
  read(j, "lambda0", a.lambda0, w);
  read(j, "s_stop", a.s_stop, w);
  read(j, "early_layer", a.early_layer, w);
  a.strategy = LayerPairStrategy::parse(strategy);
  a.loss_kind = parse_loss_kind(kind);
  a.token_reduction = parse_token_reduction(red);
  a.validate();
  return a;
}

json to_json(const TrainConfig& t) {
  return {{"mode", std::string(to_string(t.mode))},
          {"alignment", t.alignment ? to_json(*t.alignment) : json(nullptr)},
          {"n_kd", t.n_kd},
          {"total_steps", t.total_steps},
          {"batch_size", t.batch_size},
          {"seq_len", t.seq_len},
          {"peak_lr", t.peak_lr},
          {"warmup_fraction", t.warmup_fraction},
          {"final_lr_fraction", t.final_lr_fraction},
          {"adam_beta1", t.adam_beta1},
          {"adam_beta2", t.adam_beta2},
          {"adam_eps", t.adam_eps},
          {"weight_decay", t.weight_decay},
          {"grad_clip_norm", t.grad_clip_norm},
          {"kd_temperature", t.kd_temperature},
          {"kd_weight", t.kd_weight},
          {"seed", t.seed},
          {"eval_interval", t.eval_interval}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig t) {
  constexpr std::string_view w = "train";
  check_keys(j, w,
             {"mode", "alignment", "n_kd", "total_steps", "batch_size", "seq_len", "peak_lr", "warmup_fraction",
              "final_lr_fraction", "adam_beta1", "adam_beta2", "adam_eps", "weight_decay", "grad_clip_norm",
              "kd_temperature", "kd_weight", "seed", "eval_interval"});
  std::string mode(to_string(t.mode));
  read(j, "mode", mode, w);
  t.mode = parse_train_mode(mode);
  if (auto it = j.find("alignment"); it != j.end()) {
    if (it->is_null()) {
      t.alignment.reset();
    } else {
      t.alignment = alignment_from_json(*it);
    }
  }
  read(j, "n_kd", t.n_kd, w);
  read(j, "total_steps", t.total_steps, w);
  read(j, "batch_size", t.batch_size, w);
  read(j, "seq_len", t.seq_len, w);
  read(j, "peak_lr", t.peak_lr, w);
  read(j, "warmup_fraction", t.warmup_fraction, w);
  read(j, "final_lr_fraction", t.final_lr_fraction, w);
  read(j, "adam_beta1", t.adam_beta1, w);
  read(j, "adam_beta2", t.adam_beta2, w);
  read(j, "adam_eps", t.adam_eps, w);
  read(j, "weight_decay", t.weight_decay, w);
  read(j, "grad_clip_norm", t.grad_clip_norm, w);
  read(j, "kd_temperature", t.kd_temperature, w);
  read(j, "kd_weight", t.kd_weight, w);
  read(j, "seed", t.seed, w);
  read(j, "eval_interval", t.eval_interval, w);
  return t;
}

json to_json(const MarkovSpec& m) {
  return {{"order", m.order}, {"vocab_size", m.vocab_size}, {"table", m.table}, {"seed", m.seed}};
}

MarkovSpec markov_from_json(const json& j) {
  constexpr std::string_view w = "data.markov";
  check_keys(j, w, {"order", "vocab_size", "table", "seed"});
  MarkovSpec m;
  read(j, "order", m.order, w);
  read(j, "vocab_size", m.vocab_size, w);
  read(j, "table", m.table, w);
  read(j, "seed", m.seed, w);
  m.validate();
  return m;
}

json to_json(const DataConfig& d) {
  json j = {{"source", std::string(to_string(d.source))},
            {"length", d.length},
            {"train_fraction", d.train_fraction}};
  if (d.markov) j["markov"] = to_json(*d.markov);
  if (!d.path.empty()) j["path"] = d.path.string();
  return j;
}

DataConfig data_config_from_json(const json& j, std::uint64_t seed) {
  constexpr std::string_view w = "data";
  check_keys(j, w, {"source", "markov", "path", "length", "train_fraction"});
  DataConfig d;
  std::string source(to_string(d.source)), path;
  read(j, "source", source, w);
  d.source = parse_source(source);
  read(j, "path", path, w);
  d.path = path;
  read(j, "length", d.length, w);
  read(j, "train_fraction", d.train_fraction, w);
  if (!(d.train_fraction > 0.0 && d.train_fraction < 1.0)) throw ConfigError("data.train_fraction must be in (0, 1)");
  if (d.source == DataSource::markov) {
    if (!j.contains("markov")) throw ConfigError("data: source markov needs a markov block");
    json m = j.at("markov");
    if (m.is_object() && !m.contains("seed")) m["seed"] = derive_seed(seed, "data");
    d.markov = markov_from_json(m);
  } else if (d.path.empty()) {
    throw ConfigError("data: source " + source + " needs a path");
  }
  return d;
}

TrainConfig RunConfigFile::resolved_teacher_train() const {
  TrainConfig t = teacher_train.value_or(train);
  t.mode = TrainMode::baseline;
  t.alignment.reset();
  return t;
}

std::filesystem::path RunConfigFile::resolved_teacher_checkpoint() const {
  return teacher_checkpoint.empty() ? output_dir / "teacher" / "checkpoint.bin" : teacher_checkpoint;
}

void RunConfigFile::reseed(std::uint64_t s) {
  seed = s;
  train.seed = s;
  if (teacher_train) teacher_train->seed = s;
}

RunConfigFile run_config_from_json(const json& j) {
  check_keys(j, "config",
             {"model_m", "model_t", "data", "train", "alignment", "output_dir", "seed", "teacher_train",
              "teacher_checkpoint"});
  RunConfigFile c;
  read(j, "seed", c.seed, "config");
  std::string out = c.output_dir.string(), teacher_ckpt;
  read(j, "output_dir", out, "config");
  read(j, "teacher_checkpoint", teacher_ckpt, "config");
  c.output_dir = out;
  c.teacher_checkpoint = teacher_ckpt;
  if (j.contains("model_m")) c.model_m = model_config_from_json(j.at("model_m"));
  if (j.contains("model_t")) c.model_t = model_config_from_json(j.at("model_t"));

  json data = j.value("data", json::object());
  c.data = data_config_from_json(data, c.seed);

  TrainConfig defaults;
  defaults.seed = c.seed;
  c.train = train_config_from_json(j.value("train", json::object()), defaults);
  if (j.contains("alignment") && !j.at("alignment").is_null()) {
    if (j.value("train", json::object()).contains("alignment")) {
      throw ConfigError("config: alignment given both at top level and inside train");
    }
    c.train.alignment = alignment_from_json(j.at("alignment"));
  }
  if (j.contains("teacher_train")) {
    c.teacher_train = train_config_from_json(j.at("teacher_train"), defaults);
    if (c.teacher_train->mode != TrainMode::baseline) throw ConfigError("teacher_train: mode must be baseline");
    c.teacher_train->validate();
  }
  c.train.validate();
  return c;
}

RunConfigFile load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

json to_json(const RunConfigFile& c) {
  json j = {{"model_m", to_json(c.model_m)},
            {"model_t", to_json(c.model_t)},
            {"data", to_json(c.data)},
            {"train", to_json(c.train)},
            {"output_dir", c.output_dir.string()},
            {"seed", c.seed},
            {"teacher_checkpoint", c.resolved_teacher_checkpoint().string()}};
  if (c.teacher_train) j["teacher_train"] = to_json(*c.teacher_train);
  return j;
}

}  // namespace letlab
