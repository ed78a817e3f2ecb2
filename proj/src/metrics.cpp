// SPDX-License-Identifier: Apache-2.0

#include "letlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>

#include <json.hpp>

#include "letlab/losses.hpp"

namespace letlab {

namespace {

using nlohmann::json;

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> optional_from(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  return it->get<double>();
}

std::optional<double> step_field(const MetricsRecord& r, std::string_view field) {
  if (field == "lr") return r.lr;
  if (field == "lambda") return r.lambda;
  if (field == "loss_nll") return r.loss_nll;
  if (field == "loss_proj") return r.loss_proj;
  if (field == "loss_kd") return r.loss_kd;
  if (field == "loss_total") return r.loss_total;
  if (field == "cos_sim") return r.cos_sim;
  throw ConfigError("compare_runs: unknown field '" + std::string(field) + "'");
}

}  // namespace

std::string to_json_line(const MetricsRecord& r) {
  json j = json::object();
  j["step"] = r.step;
  j["lr"] = r.lr;
  j["lambda"] = r.lambda;
  j["loss_nll"] = r.loss_nll;
  j["loss_proj"] = r.loss_proj;
  j["loss_kd"] = optional_json(r.loss_kd);
  j["loss_total"] = r.loss_total;
  j["cos_sim"] = optional_json(r.cos_sim);
  return j.dump();
}

std::string to_json_line(const EvalRecord& r) {
  json j = json::object();
  j["step"] = r.step;
  j["test_ppl"] = r.test_ppl;
  return j.dump();
}

MetricsLog parse_metrics(std::istream& in) {
  MetricsLog log;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw IoError("metrics line " + std::to_string(lineno) + ": " + e.what());
    }
    if (j.contains("test_ppl")) {
      log.evals.push_back({j.at("step").get<std::size_t>(), j.at("test_ppl").get<double>()});
      continue;
    }
    MetricsRecord r;
    r.step = j.at("step").get<std::size_t>();
    r.lr = j.at("lr").get<double>();
    r.lambda = j.at("lambda").get<double>();
    r.loss_nll = j.at("loss_nll").get<double>();
    r.loss_proj = j.at("loss_proj").get<double>();
    r.loss_kd = optional_from(j, "loss_kd");
    r.loss_total = j.at("loss_total").get<double>();
    r.cos_sim = optional_from(j, "cos_sim");
    log.steps.push_back(r);
  }
  return log;
}

MetricsLog read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open metrics log " + path.string());
  return parse_metrics(in);
}

double mean_nll(const TransformerModel& model, const Corpus& corpus, std::size_t seq_len, std::size_t batch_size) {
  auto eval = sequential_batches(corpus, batch_size, seq_len);
  if (eval.empty()) {
    throw ConfigError("perplexity: corpus of " + std::to_string(corpus.size()) + " tokens has no full window of " +
                      std::to_string(seq_len));
  }
  double total = 0.0;
  std::size_t tokens = 0;
  for (const auto& b : eval) {
    Tensor logits = model.forward(b).logits;
    total += loss_nll(logits, b.targets).item() * static_cast<double>(b.targets.size());
    tokens += b.targets.size();
  }
  return total / static_cast<double>(tokens);
}

double perplexity(const TransformerModel& model, const Corpus& corpus, std::size_t seq_len, std::size_t batch_size) {
  return std::exp(mean_nll(model, corpus, seq_len, batch_size));
}

std::vector<TrajectoryPoint> similarity_trajectory(const MetricsLog& log, std::size_t window) {
  std::vector<const MetricsRecord*> with;
  for (const auto& r : log.steps) {
    if (r.cos_sim) with.push_back(&r);
  }
  if (window == 0) throw ConfigError("similarity_trajectory: window must be positive");
  if (window > with.size()) {
    throw ConfigError("similarity_trajectory: window " + std::to_string(window) + " exceeds the " +
                      std::to_string(with.size()) + " records carrying cos_sim");
  }
  std::vector<TrajectoryPoint> out;
  for (std::size_t end = window; end <= with.size(); ++end) {
    double s = 0.0;
    for (std::size_t i = end - window; i < end; ++i) s += *with[i]->cos_sim;
    out.push_back({with[end - 1]->step, s / static_cast<double>(window)});
  }
  return out;
}

Table compare_runs(std::vector<std::pair<std::string, MetricsLog>> runs, std::string_view field) {
  if (runs.empty()) throw ConfigError("compare_runs: no runs");
  if (field != "test_ppl") step_field(MetricsRecord{}, field);
  std::stable_sort(runs.begin(), runs.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<std::vector<std::pair<std::size_t, std::optional<double>>>> columns;
  for (const auto& [name, log] : runs) {
    std::vector<std::pair<std::size_t, std::optional<double>>> col;
    if (field == "test_ppl") {
      for (const auto& e : log.evals) col.emplace_back(e.step, e.test_ppl);
    } else {
      for (const auto& r : log.steps) col.emplace_back(r.step, step_field(r, field));
    }
    columns.push_back(std::move(col));
  }
  const auto& grid = columns.front();
  for (std::size_t c = 1; c < columns.size(); ++c) {
    const auto& other = columns[c];
    std::size_t n = std::min(grid.size(), other.size());
    for (std::size_t i = 0; i < n; ++i) {
      if (grid[i].first != other[i].first) {
        throw ConfigError("compare_runs: step grids diverge at row " + std::to_string(i) + ": " + runs[0].first +
                          " has step " + std::to_string(grid[i].first) + ", " + runs[c].first + " has step " +
                          std::to_string(other[i].first));
      }
    }
    if (grid.size() != other.size()) {
      throw ConfigError("compare_runs: step grids diverge at row " + std::to_string(n) + ": " + runs[0].first + " has " +
                        std::to_string(grid.size()) + " rows, " + runs[c].first + " has " +
                        std::to_string(other.size()));
    }
  }
  Table t;
  t.header.push_back("step");
  for (const auto& r : runs) t.header.push_back(r.first);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    std::vector<std::optional<double>> row{static_cast<double>(grid[i].first)};
    for (const auto& col : columns) row.push_back(col[i].second);
    t.rows.push_back(std::move(row));
  }
  return t;
}

Table trajectory_table(const std::vector<TrajectoryPoint>& points, std::string_view value_column) {
  Table t;
  t.header = {"step", std::string(value_column)};
  for (const auto& p : points) t.rows.push_back({static_cast<double>(p.step), p.value});
  return t;
}

std::string format_number(double v) {
  if (v == std::floor(v) && std::abs(v) < 1e15) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.0f", v);
    return buf;
  }
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_csv(std::ostream& out, const Table& table) {
  for (std::size_t i = 0; i < table.header.size(); ++i) out << (i ? "," : "") << table.header[i];
  out << '\n';
  for (const auto& row : table.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out << ',';
      if (row[i]) out << format_number(*row[i]);
    }
    out << '\n';
  }
}

void write_csv(const std::filesystem::path& path, const Table& table) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_csv(out, table);
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace letlab
