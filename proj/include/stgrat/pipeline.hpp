#pragma once

#include <memory>
#include <optional>
#include <vector>

#include "stgrat/config.hpp"
#include "stgrat/data.hpp"
#include "stgrat/graph.hpp"
#include "stgrat/model.hpp"

namespace stgrat {

/// Data, split and graph inputs of one training or evaluation run.
struct Experiment {
  SpeedTable table;
  std::shared_ptr<const NormalizedSeries> series;
  WindowedDataset windows;
  DatasetSplit split;
  GraphArtifacts graph;
  std::int64_t step_seconds = 300;
};

/// Road graph over the table's columns (in table order). VAR weighting uses
/// only the first `train_rows` rows.
RoadGraph graph_for_table(const SpeedTable& table, const std::vector<EdgeRecord>& edges, const DataOptions& options,
                          Index train_rows);

/// Normalises (with `stats` when given, else fitted on the training rows),
/// windows, splits and builds graph artifacts. Without `embeddings` and
/// with embedding_dim > 0 a LINE embedding is trained from `seed`.
Experiment prepare_experiment(const RunConfig& config, SpeedTable table, const std::vector<EdgeRecord>& edges,
                              std::optional<EmbeddingTable> embeddings = std::nullopt,
                              std::optional<NormalizationStats> stats = std::nullopt);

/// Same, around a graph that is already built (e.g. restored from a checkpoint).
Experiment prepare_experiment(const RunConfig& config, SpeedTable table, RoadGraph graph, EmbeddingTable embeddings,
                              const NormalizationStats& stats);

/// Spacing of the first two timestamps (300 s when there is only one row).
std::int64_t step_seconds(const SpeedTable& table);

/// Reorders table columns to follow `node_ids`; every id must be present.
SpeedTable reorder_columns(const SpeedTable& table, const std::vector<std::string>& node_ids);

}  // namespace stgrat
