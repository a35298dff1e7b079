#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "stgrat/data.hpp"
#include "stgrat/model.hpp"

namespace stgrat {

struct TrainConfig {
  Index batch_size = 20;
  std::int64_t warmup_steps = 4000;
  Real kappa = 10000;
  int max_epochs = 100;
  std::uint64_t seed = 0;
  Real prior_lo = 1;
  Real prior_hi = 6;
  int patience = 10;
  /// Multiplier on the warmup learning-rate schedule.
  Real lr_scale = 1;
  Real clip_norm = 5;
  /// Examples per independent forward/backward unit. Gradients of the units
  /// are summed in a fixed order, so results do not depend on thread count.
  Index chunk_size = 5;
  /// Worker threads; 0 = STGRAT_THREADS or hardware concurrency.
  int threads = 0;
  Index eval_batch_size = 64;
  /// Overrides the scheduled-sampling probability (instrumentation and tests).
  std::optional<Real> forced_epsilon;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

/// Thrown when the loss becomes non-finite.
class NumericFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Probability of feeding ground truth at iteration i: kappa / (kappa + exp(i / kappa)).
Real sampling_probability(std::int64_t iteration, Real kappa);

/// scale * mean |pred - target| over mask-true entries; 0 when nothing is observed.
Var masked_mae_loss(Var pred, const Matrix& target, const Matrix& mask, Real scale = 1);

/// Factor converting a normalised difference into original units.
Real normalization_scale(const NormalizationStats& stats);

struct TrainingState {
  ModelParams params;
  OptimizerState optimizer;
  std::int64_t iteration = 0;
  int epoch = 0;
};

TrainingState initial_state(const ModelConfig& model, const TrainConfig& train);

/// What one batch fed to the decoder; passed to an optional observer.
struct BatchTrace {
  std::size_t batch_index = 0;
  std::int64_t iteration = 0;
  Real epsilon = 1;
  Index truth_feeds = 0;
  Index prediction_feeds = 0;
  int passes = 0;
  /// Normalised speed source of each target row as finally fed back
  /// (ground truth or the model's own prediction).
  Matrix feedback_source;
  std::vector<std::size_t> windows;
  Real loss = 0;
};
using BatchObserver = std::function<void(const BatchTrace&)>;

struct EpochStats {
  Real train_mae = 0;
  Real learning_rate = 0;
  Real epsilon = 1;
  std::int64_t iteration = 0;
};

/// One pass over `train` in shuffled mini-batches with scheduled sampling,
/// masked MAE, gradient clipping and a warmup-scheduled Adam update.
EpochStats train_epoch(const ModelConfig& model, const GraphArtifacts& graph, const WindowedDataset& train,
                       const TrainConfig& config, TrainingState& state, const BatchObserver& observer = {});

/// Loss and gradient of one batch (train mode, fixed feedback); used by gradient checks.
Real batch_loss_and_gradient(const ModelConfig& model, const ModelParams& params, const GraphArtifacts& graph,
                             const SequenceBatch& batch, const Matrix& feedback, Real scale, Mode mode,
                             std::uint64_t dropout_seed, std::vector<Matrix>* grads);

struct EpochLog {
  int epoch = 0;
  std::int64_t iteration = 0;
  Real train_mae = 0;
  Real val_mae = 0;
  Real val_rmse = 0;
  Real val_mape = 0;
  Real learning_rate = 0;
  Real epsilon = 0;
};

std::string metrics_log_header();
std::string metrics_log_row(const EpochLog& row);

struct FitResult {
  std::vector<EpochLog> log;
  int best_epoch = 0;
  Real best_val_mae = 0;
  bool stopped_early = false;
};

/// Trains until max_epochs or `patience` epochs without validation
/// improvement; `state` ends holding the best-validation snapshot.
/// `on_epoch` is invoked after every epoch (e.g. for logging).
FitResult fit(const ModelConfig& model, const GraphArtifacts& graph, const WindowedDataset& train,
              const WindowedDataset& validation, const TrainConfig& config, TrainingState& state,
              const std::function<void(const EpochLog&)>& on_epoch = {});

int resolve_thread_count(int requested);

}  // namespace stgrat
