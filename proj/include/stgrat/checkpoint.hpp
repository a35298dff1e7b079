#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include "stgrat/data.hpp"
#include "stgrat/graph.hpp"
#include "stgrat/model.hpp"
#include "stgrat/training.hpp"

namespace stgrat {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Everything needed to resume training or run inference without the original inputs.
struct Checkpoint {
  ModelConfig model;
  TrainingState state;
  NormalizationStats stats;
  std::uint64_t seed = 0;
  std::int64_t step_seconds = 300;
  RoadGraph graph;
  EmbeddingTable embeddings;
};

/// Binary layout: magic "STGRAT1\0", u32 version, tagged length-prefixed
/// sections (little-endian), then an FNV-1a 64 checksum of all preceding bytes.
std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes, const std::string& source = "checkpoint");

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);
/// Also rejects a checkpoint whose model configuration differs from `expected`.
Checkpoint load_checkpoint(const std::string& path, const ModelConfig& expected);

}  // namespace stgrat
