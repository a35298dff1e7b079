#include "stgrat/pipeline.hpp"

#include <stdexcept>

namespace stgrat {

RoadGraph graph_for_table(const SpeedTable& table, const std::vector<EdgeRecord>& edges, const DataOptions& options,
                          Index train_rows) {
  GraphBuildOptions g;
  g.weighting = options.weighting;
  g.cutoff = options.cutoff;
  if (options.sigma > 0) g.sigma = options.sigma;
  if (options.weighting == EdgeWeighting::var_augmented) {
    std::vector<std::pair<Index, Index>> pairs;
    std::vector<const EdgeRecord*> kept;
    auto column = [&](const std::string& id) -> Index {
      for (std::size_t i = 0; i < table.node_ids.size(); ++i) {
        if (table.node_ids[i] == id) return static_cast<Index>(i);
      }
      throw std::invalid_argument("edge references node '" + id + "' missing from the speed table");
    };
    for (const auto& e : edges) {
      // Weight of edge i -> j: influence of i's past on j's present.
      pairs.emplace_back(column(e.to), column(e.from));
      kept.push_back(&e);
    }
    const Index rows = std::min(train_rows, table.steps());
    const auto weights = var_edge_weights(table.speeds.topRows(rows), pairs, options.var_lag);
    for (std::size_t i = 0; i < kept.size(); ++i) g.var_weights[{kept[i]->from, kept[i]->to}] = weights[i].weight;
  }
  return build_graph(table.node_ids, edges, g);
}

std::int64_t step_seconds(const SpeedTable& table) {
  if (table.timestamps.size() < 2) return 300;
  return table.timestamps[1] - table.timestamps[0];
}

namespace {

Experiment assemble(const RunConfig& config, SpeedTable table, const NormalizationStats& stats) {
  Experiment ex;
  ex.step_seconds = step_seconds(table);
  ex.series = std::make_shared<const NormalizedSeries>(normalize(table, stats));
  ex.windows = make_windows(ex.series, config.model.input_steps, config.model.output_steps);
  ex.split = chrono_split(ex.windows, config.data.train_fraction, config.data.validation_fraction,
                          config.data.test_fraction);
  ex.table = std::move(table);
  return ex;
}

}  // namespace

Experiment prepare_experiment(const RunConfig& config, SpeedTable table, const std::vector<EdgeRecord>& edges,
                              std::optional<EmbeddingTable> embeddings, std::optional<NormalizationStats> stats) {
  config.model.validate();
  const Index train_rows =
      training_rows(table.steps(), config.model.input_steps, config.model.output_steps, config.data.train_fraction);
  if (!stats) stats = fit_normalization(table, train_rows, config.data.normalization);
  RoadGraph graph = graph_for_table(table, edges, config.data, train_rows);
  EmbeddingTable emb;
  if (embeddings) {
    emb = std::move(*embeddings);
  } else if (config.model.embedding_dim > 0) {
    LineOptions line = config.data.line;
    line.dim = config.model.embedding_dim;
    emb = line_embed(graph, line, mix_seed({config.train.seed, 0x11eeull}));
  }
  Experiment ex = assemble(config, std::move(table), *stats);
  ex.graph = GraphArtifacts::build(std::move(graph), std::move(emb), config.model);
  return ex;
}

Experiment prepare_experiment(const RunConfig& config, SpeedTable table, RoadGraph graph, EmbeddingTable embeddings,
                              const NormalizationStats& stats) {
  config.model.validate();
  Experiment ex = assemble(config, reorder_columns(table, graph.node_ids()), stats);
  ex.graph = GraphArtifacts::build(std::move(graph), std::move(embeddings), config.model);
  return ex;
}

SpeedTable reorder_columns(const SpeedTable& table, const std::vector<std::string>& node_ids) {
  SpeedTable out;
  out.timestamps = table.timestamps;
  out.irregular_spacing = table.irregular_spacing;
  out.node_ids = node_ids;
  out.speeds.resize(table.steps(), static_cast<Index>(node_ids.size()));
  out.observed.resize(table.steps(), static_cast<Index>(node_ids.size()));
  for (std::size_t j = 0; j < node_ids.size(); ++j) {
    Index src = -1;
    for (std::size_t i = 0; i < table.node_ids.size(); ++i) {
      if (table.node_ids[i] == node_ids[j]) src = static_cast<Index>(i);
    }
    if (src < 0) throw std::invalid_argument("speed table has no column for node '" + node_ids[j] + "'");
    out.speeds.col(static_cast<Index>(j)) = table.speeds.col(src);
    out.observed.col(static_cast<Index>(j)) = table.observed.col(src);
  }
  return out;
}

}  // namespace stgrat
