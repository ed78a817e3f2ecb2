// SPDX-License-Identifier: Apache-2.0
//
// Run-log records (JSON lines), held-out perplexity, and plot-ready tables.

#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "letlab/data.hpp"
#include "letlab/model.hpp"

namespace letlab {

/// One optimizer step. `step` is the 0-based step index s; `lr` is the rate
/// applied by that update. Absent fields serialize as null.
struct MetricsRecord {
  std::size_t step = 0;
  double lr = 0.0;
  double lambda = 0.0;
  double loss_nll = 0.0;
  double loss_proj = 0.0;
  std::optional<double> loss_kd;
  double loss_total = 0.0;
  std::optional<double> cos_sim;

  bool operator==(const MetricsRecord&) const = default;
};

/// Held-out evaluation after `step` completed updates.
struct EvalRecord {
  std::size_t step = 0;
  double test_ppl = 0.0;

  bool operator==(const EvalRecord&) const = default;
};

std::string to_json_line(const MetricsRecord& r);
std::string to_json_line(const EvalRecord& r);

struct MetricsLog {
  std::vector<MetricsRecord> steps;
  std::vector<EvalRecord> evals;
};

MetricsLog parse_metrics(std::istream& in);
MetricsLog read_metrics(const std::filesystem::path& path);

/// Token-weighted mean NLL over every evaluation window in corpus order.
double mean_nll(const TransformerModel& model, const Corpus& corpus, std::size_t seq_len, std::size_t batch_size);
/// exp(mean_nll).
double perplexity(const TransformerModel& model, const Corpus& corpus, std::size_t seq_len, std::size_t batch_size);

struct TrajectoryPoint {
  std::size_t step;
  double value;
};

/// Sliding means of cos_sim over `window` consecutive records that carry it,
/// each labelled with the step of the window's last record.
std::vector<TrajectoryPoint> similarity_trajectory(const MetricsLog& log, std::size_t window = 50);

/// Plot-ready table; the first column is the step. Missing cells are empty
/// in CSV.
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::optional<double>>> rows;
};

/// One column per run (ordered by run id) of `field` keyed by step. `field`
/// is test_ppl (eval records) or any per-step numeric key.
Table compare_runs(std::vector<std::pair<std::string, MetricsLog>> runs, std::string_view field);

Table trajectory_table(const std::vector<TrajectoryPoint>& points, std::string_view value_column = "cos_sim");

void write_csv(std::ostream& out, const Table& table);
void write_csv(const std::filesystem::path& path, const Table& table);
std::string format_number(double v);

}  // namespace letlab
