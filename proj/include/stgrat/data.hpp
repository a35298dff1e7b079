#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "stgrat/attention.hpp"
#include "stgrat/numerics.hpp"

namespace stgrat {

/// Time-by-node speed observations. Missing cells hold 0 with observed = 0.
struct SpeedTable {
  std::vector<std::int64_t> timestamps;  ///< epoch seconds, strictly increasing
  std::vector<std::string> node_ids;
  Matrix speeds;    ///< steps x nodes
  Matrix observed;  ///< steps x nodes, 1 = observed, 0 = missing
  bool irregular_spacing = false;

  Index steps() const { return speeds.rows(); }
  Index nodes() const { return speeds.cols(); }
};

/// Parses epoch seconds or ISO-8601 `YYYY-MM-DD[ T]HH:MM[:SS]` (UTC).
std::int64_t parse_timestamp(const std::string& text);
std::string format_timestamp(std::int64_t epoch_seconds);
/// Seconds since midnight / 86400, in [0, 1).
Real time_of_day(std::int64_t epoch_seconds);
int hour_of_day(std::int64_t epoch_seconds);

SpeedTable load_speed_table(const std::string& path);
SpeedTable read_speed_table(std::istream& in, const std::string& source_name);
void save_speed_table(const SpeedTable& table, const std::string& path);

enum class NormalizationMethod { zscore, minmax };

struct NormalizationStats {
  NormalizationMethod method = NormalizationMethod::zscore;
  Real mean = 0;
  Real std = 1;
  Real min = 0;
  Real max = 1;

  Real normalize(Real x) const;
  Real denormalize(Real x) const;
};

/// Statistics over observed entries of rows [0, train_steps) only.
NormalizationStats fit_normalization(const SpeedTable& table, Index train_steps, NormalizationMethod method);

/// Normalised view of a SpeedTable used for windowing.
struct NormalizedSeries {
  std::vector<std::int64_t> timestamps;
  std::vector<std::string> node_ids;
  Matrix raw;         ///< steps x nodes, original units (0 where missing)
  Matrix normalized;  ///< steps x nodes, missing entries 0
  Matrix observed;
  std::vector<Real> time_of_day;
  NormalizationStats stats;

  Index steps() const { return raw.rows(); }
  Index nodes() const { return raw.cols(); }
};

NormalizedSeries normalize(const SpeedTable& table, const NormalizationStats& stats);

/// Rows [0, n) covered by the first `train_fraction` of the windows.
Index training_rows(Index steps, Index input_steps, Index output_steps, Real train_fraction);

/// Fits statistics over the rows spanned by the first `train_fraction` of the
/// windows a (T_in, T_out) windowing would produce, then normalises.
NormalizedSeries normalize_for_training(const SpeedTable& table, Index input_steps, Index output_steps,
                                        Real train_fraction, NormalizationMethod method);

/// Stride-1 (input, target) windows over a shared normalised series.
struct WindowedDataset {
  std::shared_ptr<const NormalizedSeries> series;
  Index input_steps = 12;
  Index output_steps = 12;
  std::vector<Index> starts;  ///< first input row of each window, chronological

  std::size_t size() const { return starts.size(); }
  bool empty() const { return starts.empty(); }
  /// Row index of target step `step` of window `w`.
  Index target_row(std::size_t w, Index step) const { return starts[w] + input_steps + step; }
};

WindowedDataset make_windows(std::shared_ptr<const NormalizedSeries> series, Index input_steps, Index output_steps);

struct DatasetSplit {
  WindowedDataset train;
  WindowedDataset validation;
  WindowedDataset test;
};

/// Chronological split by example index: floor for train/validation, rest to test.
DatasetSplit chrono_split(const WindowedDataset& data, Real train = 0.7, Real validation = 0.1, Real test = 0.2);

/// Stacked windows in SequenceShape row order.
struct SequenceBatch {
  SequenceShape input_shape;
  SequenceShape target_shape;
  Matrix inputs;             ///< input rows x 2 (normalised speed, time of day)
  Matrix targets;            ///< target rows x 1, original units
  Matrix targets_normalized; ///< target rows x 1
  Matrix target_mask;        ///< target rows x 1
  Matrix target_time;        ///< (batch * T_out) x 1 time of day of each target step
  std::vector<Index> target_rows;  ///< series row of each (batch, step)
};

SequenceBatch make_batch(const WindowedDataset& data, const std::vector<std::size_t>& windows);

/// Builds a batch of one input window read from its own table (for prediction).
SequenceBatch make_input_batch(const SpeedTable& window, const NormalizationStats& stats, Index output_steps,
                               std::int64_t step_seconds);

/// Synthetic directed ring: speed = base + amplitude * sin(2 pi t / period + phase * position) + noise.
struct RingScenario {
  Index nodes = 12;
  Index days = 30;
  Index steps_per_day = 288;
  Real base = 50;
  Real amplitude = 15;
  Real phase_lag = 0.3;
  Real noise = 1.0;
  std::int64_t start_epoch = 1'483'228'800;  // 2017-01-01T00:00:00Z
  std::int64_t step_seconds = 300;
  Real ring_distance = 1.0;
};

SpeedTable synthetic_ring_speeds(const RingScenario& scenario, std::uint64_t seed);
/// Directed ring edges s0 -> s1 -> ... -> s{n-1} -> s0.
std::vector<EdgeRecord> synthetic_ring_edges(const RingScenario& scenario);

}  // namespace stgrat
