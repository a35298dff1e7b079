#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "stgrat/data.hpp"
#include "stgrat/graph.hpp"
#include "stgrat/model.hpp"
#include "stgrat/training.hpp"

namespace stgrat {

/// Invalid configuration; `key()` names the offending entry when there is one.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string key, const std::string& message)
      : std::invalid_argument(message), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

/// Ordered `key = value` entries; `#` starts a comment.
struct KeyValues {
  std::vector<std::pair<std::string, std::string>> entries;

  void set(const std::string& key, const std::string& value);
  const std::string* get(const std::string& key) const;
};

KeyValues parse_key_values(const std::string& text, const std::string& source = "config");
KeyValues load_key_values(const std::string& path);

struct DataOptions {
  std::string speeds;
  std::string graph;
  std::string embeddings;  ///< empty: computed with LINE at train time
  Real train_fraction = 0.7;
  Real validation_fraction = 0.1;
  Real test_fraction = 0.2;
  NormalizationMethod normalization = NormalizationMethod::zscore;
  EdgeWeighting weighting = EdgeWeighting::gaussian_kernel;
  Real sigma = 0;  ///< 0: standard deviation of the distances
  Real cutoff = 0.1;
  int var_lag = 1;
  LineOptions line;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataOptions data;
  std::string output_dir = "run";
};

/// Applies entries onto `config`; unknown keys and malformed values raise ConfigError.
void apply_key_values(RunConfig& config, const KeyValues& values);

/// Every key the run configuration understands.
const std::vector<std::string>& known_config_keys();

/// Canonical sorted `key=value` lines describing a model; round-trips through parse_model_config.
std::string canonical_model_config(const ModelConfig& config);
ModelConfig parse_model_config(const std::string& text);

}  // namespace stgrat
