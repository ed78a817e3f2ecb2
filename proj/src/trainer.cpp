// SPDX-License-Identifier: Apache-2.0

#include "letlab/trainer.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <iterator>
#include <numbers>
#include <sstream>

#include "letlab/config.hpp"
#include "letlab/losses.hpp"
#include "letlab/ops.hpp"
#include "letlab/random.hpp"

namespace letlab {

namespace {

constexpr char kCheckpointMagic[8] = {'L', 'E', 'T', 'C', 'K', 'P', 'T', '1'};

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

void put_doubles(std::string& out, std::span<const double> values) {
  for (double v : values) put_u64(out, std::bit_cast<std::uint64_t>(v));
}

void get_doubles(const unsigned char* p, std::span<double> out) {
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::bit_cast<double>(get_u64(p + 8 * i));
}

void write_file_atomically(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + tmp.string() + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::vector<std::vector<double>> collect_grads(const GradientMap& grads, const std::vector<NamedTensor>& params) {
  std::vector<std::vector<double>> out;
  out.reserve(params.size());
  for (const auto& p : params) {
    const auto* g = grads.find(p.value.id());
    out.push_back(g ? std::vector<double>(g->begin(), g->end()) : std::vector<double>(p.value.numel(), 0.0));
  }
  return out;
}

}  // namespace

std::string_view to_string(TrainMode m) {
  switch (m) {
    case TrainMode::baseline:
      return "baseline";
    case TrainMode::let:
      return "let";
    case TrainMode::rkd:
      return "rkd";
    case TrainMode::kd_then_standard:
      return "kd_then_standard";
  }
  return "?";
}

TrainMode parse_train_mode(std::string_view s) {
  if (s == "baseline") return TrainMode::baseline;
  if (s == "let") return TrainMode::let;
  if (s == "rkd") return TrainMode::rkd;
  if (s == "kd_then_standard") return TrainMode::kd_then_standard;
  throw ConfigError("unknown mode '" + std::string(s) + "' (expected baseline, let, rkd or kd_then_standard)");
}

void TrainConfig::validate() const {
  if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0)) throw ConfigError("train: warmup_fraction must be in (0, 1)");
  if (!(final_lr_fraction >= 0.0 && final_lr_fraction <= 1.0)) {
    throw ConfigError("train: final_lr_fraction must be in [0, 1]");
  }
  if (batch_size < 1 || seq_len < 1) throw ConfigError("train: batch_size and seq_len must be positive");
  if (!(peak_lr > 0.0) || !std::isfinite(peak_lr)) throw ConfigError("train: peak_lr must be positive");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ConfigError("train: adam betas must be in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("train: adam_eps must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be >= 0");
  if (!(grad_clip_norm > 0.0)) throw ConfigError("train: grad_clip_norm must be positive");
  if (!(kd_temperature > 0.0)) throw ConfigError("train: kd_temperature must be positive");
  if (!(kd_weight >= 0.0)) throw ConfigError("train: kd_weight must be >= 0");
  if (mode == TrainMode::let && !alignment) throw ConfigError("train: mode let requires an alignment block");
  if (alignment) alignment->validate();
  if (mode == TrainMode::kd_then_standard && n_kd > total_steps) {
    throw ConfigError("train: n_kd (" + std::to_string(n_kd) + ") exceeds total_steps (" + std::to_string(total_steps) +
                      ")");
  }
}

double lr_at(double step, const TrainConfig& c) {
  const double total = static_cast<double>(c.total_steps);
  const double warmup = c.warmup_fraction * total;
  if (step < warmup) return c.peak_lr * step / warmup;
  const double progress = std::min(1.0, (step - warmup) / (total - warmup));
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return c.peak_lr * (c.final_lr_fraction + (1.0 - c.final_lr_fraction) * cosine);
}

OptimizerState OptimizerState::for_params(const std::vector<NamedTensor>& params) {
  OptimizerState s;
  for (const auto& p : params) {
    s.m.emplace_back(p.value.numel(), 0.0);
    s.v.emplace_back(p.value.numel(), 0.0);
  }
  return s;
}

double clip_global_norm(std::vector<std::vector<double>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) {
    for (double x : g) sq += x * x;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& g : grads) {
      for (double& x : g) x *= scale;
    }
  }
  return norm;
}

void adamw_update(std::vector<NamedTensor>& params, std::vector<std::vector<double>> grads, OptimizerState& opt,
                  double lr, const TrainConfig& c, std::size_t step) {
  if (grads.size() != params.size() || opt.m.size() != params.size() || opt.v.size() != params.size()) {
    throw ShapeError("adamw_update: " + std::to_string(params.size()) + " parameters, " + std::to_string(grads.size()) +
                     " gradients, " + std::to_string(opt.m.size()) + " moment slots");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].value.numel()) {
      throw ShapeError("adamw_update: gradient size mismatch for " + params[i].name);
    }
    if (!all_finite(grads[i])) {
      throw NumericalError("step " + std::to_string(step) + ": non-finite gradient in parameter " + params[i].name);
    }
  }
  clip_global_norm(grads, c.grad_clip_norm);
  opt.step += 1;
  const double t = static_cast<double>(opt.step);
  const double bc1 = 1.0 - std::pow(c.adam_beta1, t);
  const double bc2 = 1.0 - std::pow(c.adam_beta2, t);
  const double decay = lr * c.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].value.mutable_data();
    auto& m = opt.m[i];
    auto& v = opt.v[i];
    const auto& g = grads[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = c.adam_beta1 * m[j] + (1.0 - c.adam_beta1) * g[j];
      v[j] = c.adam_beta2 * v[j] + (1.0 - c.adam_beta2) * g[j] * g[j];
      p[j] -= decay * p[j];
      p[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + c.adam_eps);
    }
  }
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  json manifest = json::array();
  for (const auto& p : ckpt.params) manifest.push_back({{"name", p.name}, {"shape", p.value.shape()}});
  if (ckpt.optimizer) {
    for (const char* which : {"m", "v"}) {
      for (const auto& p : ckpt.params) {
        manifest.push_back({{"name", std::string("adam.") + which + "." + p.name}, {"shape", p.value.shape()}});
      }
    }
  }
  json header = {
      {"format", "LETCKPT1"},
      {"kind", ckpt.kind},
      {"step", ckpt.step},
      {"model_config", to_json(ckpt.model_config)},
      {"config", ckpt.config_echo},
      {"manifest", manifest},
      {"optimizer", ckpt.optimizer ? json{{"step", ckpt.optimizer->step}} : json(nullptr)},
      {"data_cursor", {{"epoch", ckpt.cursor.epoch}, {"index", ckpt.cursor.index}}},
  };
  std::string text = header.dump();
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  put_u64(out, text.size());
  out += text;
  for (const auto& p : ckpt.params) put_doubles(out, p.value.data());
  if (ckpt.optimizer) {
    for (const auto& m : ckpt.optimizer->m) put_doubles(out, m);
    for (const auto& v : ckpt.optimizer->v) put_doubles(out, v);
  }
  write_file_atomically(path, out);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path.string());
  std::string raw{std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
  if (raw.size() < 16 || raw.compare(0, 8, kCheckpointMagic, 8) != 0) {
    throw IoError(path.string() + ": not a LETCKPT1 checkpoint");
  }
  const auto* bytes = reinterpret_cast<const unsigned char*>(raw.data());
  const std::uint64_t hlen = get_u64(bytes + 8);
  if (raw.size() < 16 + hlen) throw IoError(path.string() + ": truncated header");
  json header;
  try {
    header = json::parse(raw.substr(16, hlen));
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": bad header: " + e.what());
  }
  Checkpoint ck;
  ck.kind = header.at("kind").get<std::string>();
  ck.step = header.at("step").get<std::size_t>();
  ck.model_config = model_config_from_json(header.at("model_config"));
  ck.config_echo = header.at("config");
  ck.cursor.epoch = header.at("data_cursor").at("epoch").get<std::uint64_t>();
  ck.cursor.index = header.at("data_cursor").at("index").get<std::size_t>();
  std::size_t offset = 16 + hlen;
  auto next_block = [&](const json& entry) {
    Shape shape = entry.at("shape").get<Shape>();
    std::vector<double> values(numel(shape));
    if (raw.size() < offset + 8 * values.size()) {
      throw IoError(path.string() + ": truncated payload at " + entry.at("name").get<std::string>());
    }
    get_doubles(bytes + offset, values);
    offset += 8 * values.size();
    return Tensor(std::move(shape), std::move(values));
  };
  const json& manifest = header.at("manifest");
  const bool has_opt = !header.at("optimizer").is_null();
  const std::size_t n_params = has_opt ? manifest.size() / 3 : manifest.size();
  for (std::size_t i = 0; i < n_params; ++i) {
    Tensor t = next_block(manifest[i]);
    t.set_requires_grad(true);
    ck.params.push_back({manifest[i].at("name").get<std::string>(), t});
  }
  if (has_opt) {
    OptimizerState opt;
    opt.step = header.at("optimizer").at("step").get<std::size_t>();
    for (std::size_t i = n_params; i < 2 * n_params; ++i) {
      Tensor t = next_block(manifest[i]);
      opt.m.emplace_back(t.data().begin(), t.data().end());
    }
    for (std::size_t i = 2 * n_params; i < 3 * n_params; ++i) {
      Tensor t = next_block(manifest[i]);
      opt.v.emplace_back(t.data().begin(), t.data().end());
    }
    ck.optimizer = std::move(opt);
  }
  if (offset != raw.size()) throw IoError(path.string() + ": trailing bytes after payload");
  return ck;
}

TransformerModel model_from_checkpoint(const Checkpoint& ckpt) {
  std::vector<NamedTensor> params;
  for (const auto& p : ckpt.params) {
    Tensor t = p.value.detach();
    t.set_requires_grad(true);
    params.push_back({p.name, t});
  }
  return TransformerModel(ckpt.model_config, std::move(params));
}

TransformerModel initial_model(const ModelConfig& model_config, std::uint64_t seed, std::string_view stream) {
  return init_params(model_config, derive_seed(seed, stream));
}

MetricsRecord train_step(RunState& state, const TrainConfig& config, const TokenBatch& batch) {
  const std::size_t s = state.step;
  MetricsRecord rec;
  rec.step = s;
  rec.lambda = config.mode == TrainMode::let ? lambda_at(s, config.alignment->lambda0, config.alignment->s_stop) : 0.0;
  const bool use_kd =
      config.mode == TrainMode::rkd || (config.mode == TrainMode::kd_then_standard && s < config.n_kd);
  if ((rec.lambda > 0.0 || use_kd) && state.teacher == nullptr) {
    throw ConfigError("train_step: mode " + std::string(to_string(config.mode)) + " needs a teacher model");
  }
  try {
    Tape tape;
    TapeScope scope(tape);
    ForwardResult out = state.model.forward(batch);
    Tensor nll = loss_nll(out.logits, batch.targets);
    Tensor total = nll;
    rec.loss_nll = nll.item();

    if (rec.lambda > 0.0) {
      const AlignmentSpec& spec = *config.alignment;
      const auto& tc = state.teacher->config();
      LayerPair pair = select_layers(spec.strategy, tc.num_layers, state.model.config().num_layers, spec.early_layer);
      ForwardResult t_out = state.teacher->forward(batch);
      ++state.teacher_forwards;
      const Tensor& h_t = t_out.hidden[pair.teacher_layer];
      Tensor h_m = match_width(out.hidden[pair.target_layer], tc.hidden_size);
      Tensor proj = projection_loss(spec.loss_kind)(h_m, h_t, spec.token_reduction);
      rec.loss_proj = proj.item();
      rec.cos_sim = cosine_similarity_metric(h_m, h_t);
      total = loss_total(nll, proj, s, spec);
    }
    if (use_kd) {
      ForwardResult t_out = state.teacher->forward(batch);
      ++state.teacher_forwards;
      Tensor kd = loss_rkd(out.logits, t_out.logits, config.kd_temperature);
      rec.loss_kd = kd.item();
      total = ops::add(total, config.kd_weight == 1.0 ? kd : ops::scale(kd, config.kd_weight));
    }
    rec.loss_total = total.item();
    if (!std::isfinite(rec.loss_total)) throw NumericalError("loss is not finite");

    auto grads = collect_grads(tape.backward(total), state.model.parameters());
    rec.lr = lr_at(static_cast<double>(s + 1), config);
    adamw_update(state.model.parameters(), std::move(grads), state.optimizer, rec.lr, config, s);
  } catch (const NumericalError& e) {
    std::string what = e.what();
    if (what.rfind("step ", 0) == 0) throw;
    throw NumericalError("step " + std::to_string(s) + ": " + what);
  }
  state.step += 1;
  return rec;
}

Trainer::Trainer(TrainConfig config, TransformerModel initial, const Corpus& train, const Corpus* test,
                 const TransformerModel* teacher, std::filesystem::path out_dir)
    : config_(std::move(config)),
      train_(&train),
      test_(test),
      state_{std::move(initial), nullptr, {}, 0, 0},
      batches_(train, config_.batch_size, config_.seq_len, derive_seed(config_.seed, "shuffle")),
      out_dir_(std::move(out_dir)) {
  config_.validate();
  if (config_.needs_teacher() && teacher == nullptr) {
    throw ConfigError("train: mode " + std::string(to_string(config_.mode)) + " needs a teacher checkpoint");
  }
  const auto& mc = state_.model.config();
  if (train.vocab_size > mc.vocab_size) {
    throw ConfigError("train: corpus vocab_size " + std::to_string(train.vocab_size) + " exceeds the model's " +
                      std::to_string(mc.vocab_size));
  }
  if (config_.seq_len > mc.max_seq_len) throw ConfigError("train: seq_len exceeds the model's max_seq_len");
  if (teacher != nullptr && config_.needs_teacher()) {
    if (teacher->config().vocab_size != mc.vocab_size) {
      throw ConfigError("train: teacher and target vocabularies differ (" + std::to_string(teacher->config().vocab_size) +
                        " vs " + std::to_string(mc.vocab_size) + ")");
    }
    if (config_.mode == TrainMode::let) {
      const auto& a = *config_.alignment;
      select_layers(a.strategy, teacher->config().num_layers, mc.num_layers, a.early_layer);
    }
    teacher_ = std::make_unique<TransformerModel>(teacher->clone());
    teacher_->set_trainable(false);
    state_.teacher = teacher_.get();
  }
  state_.model.set_trainable(true);
  state_.optimizer = OptimizerState::for_params(state_.model.parameters());
  open_log(true);
}

Trainer Trainer::resume(const std::filesystem::path& checkpoint, TrainConfig config, const Corpus& train,
                        const Corpus* test, const TransformerModel* teacher, std::filesystem::path out_dir) {
  Checkpoint ck = read_checkpoint(checkpoint);
  if (!ck.optimizer) throw ConfigError("resume: checkpoint " + checkpoint.string() + " has no optimizer state");
  std::vector<std::string> kept;
  const auto log_path = out_dir / "metrics.jsonl";
  if (!out_dir.empty() && std::filesystem::exists(log_path)) {
    std::ifstream in(log_path);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      json j = json::parse(line);
      std::size_t step = j.at("step").get<std::size_t>();
      if (j.contains("test_ppl") ? step <= ck.step : step < ck.step) kept.push_back(line);
    }
  }
  Trainer t(std::move(config), model_from_checkpoint(ck), train, test, teacher, std::move(out_dir));
  t.state_.optimizer = std::move(*ck.optimizer);
  t.state_.step = ck.step;
  t.batches_.seek(ck.cursor);
  t.checkpoint_kind_ = ck.kind;
  t.config_echo_ = ck.config_echo;
  for (const auto& line : kept) t.append_line(line);
  if (t.state_.optimizer.m.size() != t.state_.model.parameters().size()) {
    throw ConfigError("resume: optimizer state does not match the model");
  }
  return t;
}

void Trainer::open_log(bool truncate) {
  if (out_dir_.empty()) return;
  std::filesystem::create_directories(out_dir_);
  const auto path = out_dir_ / "metrics.jsonl";
  log_.open(path, std::ios::binary | (truncate ? std::ios::trunc : std::ios::app));
  if (!log_) throw IoError("cannot open " + path.string() + " for writing");
}

void Trainer::append_line(const std::string& line) {
  if (!log_.is_open()) return;
  log_ << line << '\n';
  log_.flush();
  if (!log_) throw IoError("write failed for " + (out_dir_ / "metrics.jsonl").string());
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  Checkpoint ck;
  ck.kind = checkpoint_kind_;
  ck.model_config = state_.model.config();
  ck.params = state_.model.parameters();
  ck.optimizer = state_.optimizer;
  ck.step = state_.step;
  ck.cursor = batches_.cursor();
  ck.config_echo = config_echo_;
  write_checkpoint(path, ck);
}

void Trainer::run(std::optional<std::size_t> stop_after) {
  const std::size_t end = std::min(config_.total_steps, stop_after.value_or(config_.total_steps));
  while (state_.step < end) {
    TokenBatch batch = batches_.next();
    MetricsRecord rec = train_step(state_, config_, batch);
    records_.push_back(rec);
    append_line(to_json_line(rec));
    const std::size_t done = state_.step;
    const bool boundary =
        done == config_.total_steps || (config_.eval_interval > 0 && done % config_.eval_interval == 0);
    if (boundary) {
      if (test_ != nullptr) {
        EvalRecord e{done, perplexity(state_.model, *test_, config_.seq_len, config_.batch_size)};
        evals_.push_back(e);
        append_line(to_json_line(e));
      }
      if (!out_dir_.empty()) save_checkpoint(out_dir_ / "checkpoint.bin");
    } else if (done == end && !out_dir_.empty()) {
      save_checkpoint(out_dir_ / "checkpoint.bin");
    }
  }
}

}  // namespace letlab
