#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "stgrat/data.hpp"
#include "stgrat/model.hpp"

namespace stgrat {

struct MetricValues {
  Real mae = 0;
  Real rmse = 0;
  Real mape = 0;  ///< percent, over entries with non-zero truth
  Index count = 0;
  Index mape_count = 0;
};

/// Error metrics over mask-true entries. Throws if there are none.
MetricValues metrics(const Matrix& pred, const Matrix& truth, const Matrix& mask);

struct HorizonMetric {
  std::string horizon;  ///< "3", "6", "12" or "avg"
  MetricValues values;
};

struct MetricReport {
  std::string slice = "all";
  std::vector<HorizonMetric> horizons;

  const HorizonMetric* find(const std::string& horizon) const;
};

/// Forecasts for every window of a dataset, in original units.
struct Predictions {
  SequenceShape shape;  ///< batch = windows, steps = T_out
  Matrix predicted;     ///< rows x 1
  Matrix truth;
  Matrix mask;
  std::vector<Index> series_rows;          ///< per (window, step)
  std::vector<std::int64_t> timestamps;    ///< per (window, step)

  Index step_index(Index window, Index step) const { return window * shape.steps + step; }
};

Predictions predict_dataset(const ModelConfig& config, const ModelParams& params, const GraphArtifacts& graph,
                            const WindowedDataset& data, Index batch_size = 64);

/// Repeats the last input observation of each window for every future step.
Predictions persistence_baseline(const WindowedDataset& data);

/// Metrics at each listed horizon (1-based step) plus "avg" over all steps,
/// restricted to `selection` (rows x 1, nonzero = included) when non-empty.
/// Horizons whose selection is empty are reported with count 0.
MetricReport horizon_report(const Predictions& p, const std::string& slice = "all",
                            const std::vector<int>& horizons = {3, 6, 12}, const Matrix& selection = {});

/// Half-open hour ranges [start, end) of the target wall-clock time.
using HourRange = std::pair<int, int>;
std::vector<HourRange> parse_hour_ranges(const std::string& text);
std::vector<MetricReport> time_range_metrics(const Predictions& p, const std::vector<HourRange>& ranges,
                                             const std::vector<int>& horizons = {3, 6, 12});

struct PeltOptions {
  Real penalty = 10;
  Index jump = 1;
  Index min_size = 6;
};

/// Optimal L2 mean-shift segmentation; returns interior breakpoints (segment starts), ascending.
std::vector<Index> pelt_changepoints(const std::vector<Real>& signal, const PeltOptions& options = {});

/// Total cost (L2 + penalty per breakpoint) of a segmentation.
Real segmentation_cost(const std::vector<Real>& signal, const std::vector<Index>& breakpoints, Real penalty);

struct ImpededInterval {
  std::string node_id;
  Index node = 0;
  Index start = 0;  ///< first row, inclusive
  Index end = 0;    ///< last row, exclusive
  Real min_speed = 0;
};

std::vector<ImpededInterval> impeded_intervals(const SpeedTable& table, Index node, const PeltOptions& options = {},
                                               Real threshold = 20);
std::vector<ImpededInterval> impeded_intervals(const SpeedTable& table, const PeltOptions& options = {},
                                               Real threshold = 20);

/// Metrics over prediction targets whose (node, row) lies in an interval.
MetricReport impeded_metrics(const Predictions& p, const std::vector<ImpededInterval>& intervals,
                             const std::vector<int>& horizons = {3, 6, 12});

void write_metric_csv(const std::vector<MetricReport>& reports, std::ostream& out);
void write_metric_csv(const std::vector<MetricReport>& reports, const std::string& path);

/// CSV of spatial attention records; sentinel rows use key `__sentinel__`, zero weights are omitted.
void write_attention_csv(const std::vector<AttentionRecord>& records, const std::vector<std::string>& node_ids,
                         std::ostream& out);

/// Runs an eval-mode forecast of the first window in `batch`, recording encoder spatial attention.
std::vector<AttentionRecord> export_attention(const ModelConfig& config, const ModelParams& params,
                                              const GraphArtifacts& graph, const SequenceBatch& batch,
                                              const std::string& path);

}  // namespace stgrat
