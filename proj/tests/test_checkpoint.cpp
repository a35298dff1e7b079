#include <doctest.h>

#include "stgrat/checkpoint.hpp"
#include "test_util.hpp"

using namespace stgrat;

namespace {

struct Trained {
  Checkpoint ckpt;
  WindowedDataset windows;
  GraphArtifacts graph;
};

Trained trained_checkpoint() {
  ModelConfig m;
  m.layers = 1;
  m.d_model = 8;
  m.heads = 2;
  m.K = 1;
  m.range = 1;
  m.input_steps = 3;
  m.output_steps = 3;
  m.dropout = 0.1;
  m.embedding_dim = 2;
  RingScenario sc;
  sc.nodes = 3;
  sc.days = 1;
  const SpeedTable table = synthetic_ring_speeds(sc, 4);
  auto series = std::make_shared<const NormalizedSeries>(
      normalize_for_training(table, 3, 3, 0.7, NormalizationMethod::zscore));
  WindowedDataset windows = make_windows(series, 3, 3);
  WindowedDataset train = windows;
  train.starts.resize(12);
  Rng rng(2);
  EmbeddingTable emb{2, table.node_ids, test::random_matrix(3, 2, rng)};
  RoadGraph g = build_graph(table.node_ids, synthetic_ring_edges(sc));
  GraphArtifacts art = GraphArtifacts::build(g, emb, m);
  TrainConfig tc;
  tc.batch_size = 4;
  tc.threads = 1;
  tc.seed = 8;
  TrainingState st = initial_state(m, tc);
  train_epoch(m, art, train, tc, st);
  Checkpoint c{m, st, series->stats, tc.seed, 300, g, emb};
  return {c, windows, art};
}

}  // namespace

TEST_CASE("checkpoint round trip is byte identical") {
  const Trained t = trained_checkpoint();
  const std::string bytes = serialize_checkpoint(t.ckpt);
  const Checkpoint back = deserialize_checkpoint(bytes);
  CHECK(serialize_checkpoint(back) == bytes);
  CHECK(back.model == t.ckpt.model);
  CHECK(back.state.iteration == t.ckpt.state.iteration);
  CHECK(back.state.epoch == 1);
  CHECK(back.state.optimizer.step == t.ckpt.state.optimizer.step);
  CHECK(back.stats.mean == t.ckpt.stats.mean);
  CHECK(back.seed == 8);
  CHECK(back.embeddings.vectors == t.ckpt.embeddings.vectors);

  const auto dir = test::scratch_dir("ckpt");
  const std::string path = (dir / "model.ckpt").string();
  save_checkpoint(path, t.ckpt);
  const Checkpoint loaded = load_checkpoint(path, t.ckpt.model);
  CHECK(test::read_text(dir / "model.ckpt") == bytes);

  const SequenceBatch b = make_batch(t.windows, {0, 5, 40});
  const GraphArtifacts restored = GraphArtifacts::build(loaded.graph, loaded.embeddings, loaded.model);
  const Matrix before = forecast_normalized(t.ckpt.model, t.ckpt.state.params, t.graph, b);
  const Matrix after = forecast_normalized(loaded.model, loaded.state.params, restored, b);
  CHECK(before == after);
}

TEST_CASE("damaged checkpoints are rejected") {
  const Trained t = trained_checkpoint();
  const std::string bytes = serialize_checkpoint(t.ckpt);
  auto message_of = [](const std::string& data) {
    try {
      deserialize_checkpoint(data, "x.ckpt");
    } catch (const CheckpointError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message_of(bytes.substr(0, bytes.size() / 2)).find("truncated") != std::string::npos);
  CHECK(message_of(bytes.substr(0, 4)).find("x.ckpt") != std::string::npos);
  CHECK(message_of("not a checkpoint at all").find("bad magic") != std::string::npos);
  std::string flipped = bytes;
  flipped[bytes.size() / 2] = static_cast<char>(flipped[bytes.size() / 2] ^ 0x5A);
  CHECK(message_of(flipped).find("checksum") != std::string::npos);
  std::string version = bytes;
  version[8] = static_cast<char>(kCheckpointVersion + 1);
  CHECK(message_of(version).find("unsupported checkpoint version 2") != std::string::npos);
  CHECK(message_of(bytes + "junk") != "");

  const auto dir = test::scratch_dir("ckpt_bad");
  const std::string path = (dir / "model.ckpt").string();
  save_checkpoint(path, t.ckpt);
  ModelConfig other = t.ckpt.model;
  other.heads = 4;
  try {
    load_checkpoint(path, other);
    FAIL("expected a configuration mismatch");
  } catch (const CheckpointError& e) {
    CHECK(std::string(e.what()).find("configuration mismatch") != std::string::npos);
    CHECK(std::string(e.what()).find("heads=4") != std::string::npos);
  }
  CHECK_THROWS_AS(load_checkpoint((dir / "absent.ckpt").string()), CheckpointError);
}
