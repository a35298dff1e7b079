#include "stgrat/training.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <numeric>
#include <thread>

#include "stgrat/evaluation.hpp"
#include "text_util.hpp"

namespace stgrat {

void TrainConfig::validate() const {
  if (batch_size < 1) throw ContractError("train config: batch_size must be >= 1");
  if (!(kappa > 0)) throw ContractError("train config: kappa must be > 0");
  if (warmup_steps < 1) throw ContractError("train config: warmup_steps must be >= 1");
  if (max_epochs < 0) throw ContractError("train config: max_epochs must be >= 0");
  if (patience < 1) throw ContractError("train config: patience must be >= 1");
  if (!(prior_hi >= prior_lo)) throw ContractError("train config: prior range is empty");
  if (!(lr_scale > 0)) throw ContractError("train config: lr_scale must be > 0");
  if (!(clip_norm > 0)) throw ContractError("train config: clip_norm must be > 0");
  if (chunk_size < 1) throw ContractError("train config: chunk_size must be >= 1");
  if (eval_batch_size < 1) throw ContractError("train config: eval_batch_size must be >= 1");
  if (threads < 0) throw ContractError("train config: threads must be >= 0");
  if (forced_epsilon && (*forced_epsilon < 0 || *forced_epsilon > 1)) {
    throw ContractError("train config: forced epsilon must be in [0, 1]");
  }
}

Real sampling_probability(std::int64_t iteration, Real kappa) {
  if (iteration < 0) throw ContractError("sampling_probability: iteration must be >= 0");
  if (!(kappa > 0)) throw ContractError("sampling_probability: kappa must be > 0");
  const Real x = static_cast<Real>(iteration) / kappa;
  // exp overflows past ~709.78; the probability is already far below 1e-300 there.
  if (x > 700) return 0;
  return kappa / (kappa + std::exp(x));
}

Var masked_mae_loss(Var pred, const Matrix& target, const Matrix& mask, Real scale) {
  const auto count = static_cast<Real>((mask.array() != 0.0).count());
  if (count == 0) return ad::scale(ad::masked_abs_sum(pred, target, mask, 1), 0);
  return ad::masked_abs_sum(pred, target, mask, count / scale);
}

Real normalization_scale(const NormalizationStats& stats) {
  return stats.method == NormalizationMethod::zscore ? stats.std : stats.max - stats.min;
}

TrainingState initial_state(const ModelConfig& model, const TrainConfig& train) {
  model.validate();
  train.validate();
  Rng rng(mix_seed({train.seed, 0x1417ull}));
  TrainingState s{ModelParams::create(model, rng, train.prior_lo, train.prior_hi), {}, 0, 0};
  s.optimizer.warmup_steps = train.warmup_steps;
  s.optimizer.d_model = model.d_model;
  return s;
}

int resolve_thread_count(int requested) {
  int n = requested > 0 ? requested : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  if (const char* env = std::getenv("STGRAT_THREADS")) {
    if (auto cap = text::parse_int(env); cap && *cap >= 1) n = std::min<int>(n, static_cast<int>(*cap));
  }
  return std::max(1, n);
}

namespace {

struct ChunkResult {
  std::vector<Matrix> grads;
  Real loss = 0;
  Index truth_feeds = 0;
  Index prediction_feeds = 0;
  int passes = 0;
  Matrix source;
};

struct ChunkContext {
  const ModelConfig& model;
  const ModelParams& params;
  const GraphArtifacts& graph;
  const WindowedDataset& data;
  std::uint64_t seed;
  std::int64_t iteration;
  Real epsilon;
  Real denominator;  // observed targets in the whole batch
  Real scale;
};

ChunkResult run_chunk(const ChunkContext& ctx, const std::vector<std::size_t>& windows, std::uint64_t dropout_seed) {
  const SequenceBatch batch = make_batch(ctx.data, windows);
  const SequenceShape in = batch.input_shape;
  const SequenceShape out = batch.target_shape;

  // use_pred[b][j]: target step j reaches decoder position j + 1 as the model's own prediction.
  std::vector<std::vector<char>> use_pred(static_cast<std::size_t>(out.batch));
  int most = 0;
  ChunkResult res;
  for (Index b = 0; b < out.batch; ++b) {
    auto& row = use_pred[static_cast<std::size_t>(b)];
    int count = 0;
    for (Index j = 0; j + 1 < out.steps; ++j) {
      Rng coin(mix_seed({ctx.seed, static_cast<std::uint64_t>(ctx.iteration), static_cast<std::uint64_t>(j),
                         static_cast<std::uint64_t>(windows[static_cast<std::size_t>(b)])}));
      const bool pred = !(coin.uniform() < ctx.epsilon);
      row.push_back(pred ? 1 : 0);
      count += pred;
    }
    res.prediction_feeds += count;
    res.truth_feeds += (out.steps - 1) - count;
    most = std::max(most, count);
  }

  res.grads = ctx.params.store.zero_gradients();
  Tape tape(true);
  ParamBinder bind(tape, ctx.params.store, &res.grads);
  Rng dropout_rng(dropout_seed);
  ForwardPass pass(bind, ctx.model, ctx.params, ctx.graph, {Mode::train, &dropout_rng});
  Var memory = pass.encode(pass.embed(batch.inputs, in), in);
  const Rng after_encode = dropout_rng;

  Matrix source = batch.targets_normalized;
  // Each pass fixes at least the earliest unresolved fed-back prediction of every
  // example, because decoder position p only sees positions <= p.
  for (int k = 0; k < most; ++k) {
    Tape scratch(false);
    ParamBinder nb(scratch, ctx.params.store, nullptr);
    Rng rng = after_encode;
    ForwardPass np(nb, ctx.model, ctx.params, ctx.graph, {Mode::train, &rng});
    const Matrix y = np.decode(decoder_feedback(source, batch.target_time, out, out.steps), out,
                               scratch.constant_ref(memory.value()), in).value();
    ++res.passes;
    bool changed = false;
    for (Index b = 0; b < out.batch; ++b) {
      for (Index j = 0; j + 1 < out.steps; ++j) {
        if (!use_pred[static_cast<std::size_t>(b)][static_cast<std::size_t>(j)]) continue;
        for (Index n = 0; n < out.nodes; ++n) {
          const Index r = out.row(b, j, n);
          if (source(r, 0) != y(r, 0)) {
            source(r, 0) = y(r, 0);
            changed = true;
          }
        }
      }
    }
    if (!changed) break;
  }

  dropout_rng = after_encode;
  Var y = pass.decode(decoder_feedback(source, batch.target_time, out, out.steps), out, memory, in);
  ++res.passes;
  Var loss = ctx.denominator > 0 ? ad::masked_abs_sum(y, batch.targets_normalized, batch.target_mask, ctx.denominator / ctx.scale)
                                 : ad::scale(ad::masked_abs_sum(y, batch.targets_normalized, batch.target_mask, 1), 0);
  res.loss = loss.value()(0, 0);
  if (std::isfinite(res.loss)) tape.backward(loss);
  res.source = std::move(source);
  return res;
}

Real observed_targets(const WindowedDataset& data, const std::vector<std::size_t>& windows) {
  const NormalizedSeries& s = *data.series;
  Real count = 0;
  for (std::size_t w : windows) {
    for (Index t = 0; t < data.output_steps; ++t) count += s.observed.row(data.target_row(w, t)).sum();
  }
  return count;
}

template <typename Fn>
void parallel_for(std::size_t count, int threads, Fn&& fn) {
  const auto workers = std::min<std::size_t>(count, static_cast<std::size_t>(std::max(1, threads)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace

EpochStats train_epoch(const ModelConfig& model, const GraphArtifacts& graph, const WindowedDataset& train,
                       const TrainConfig& config, TrainingState& state, const BatchObserver& observer) {
  config.validate();
  if (train.empty()) throw ContractError("train_epoch: empty training set");
  tune_allocator();
  const int threads = resolve_thread_count(config.threads);
  const Real scale = normalization_scale(train.series->stats);

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng shuffle(mix_seed({config.seed, static_cast<std::uint64_t>(state.epoch), 0x5u}));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

  std::vector<Matrix*> param_ptrs;
  for (auto& p : state.params.store.items()) param_ptrs.push_back(&p.value);

  EpochStats stats;
  Real weighted_loss = 0;
  Real weight = 0;
  const auto bs = static_cast<std::size_t>(config.batch_size);
  const auto cs = static_cast<std::size_t>(config.chunk_size);
  std::size_t batch_index = 0;
  for (std::size_t begin = 0; begin < order.size(); begin += bs, ++batch_index) {
    const std::vector<std::size_t> windows(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                           order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), begin + bs)));
    const Real epsilon = config.forced_epsilon ? *config.forced_epsilon : sampling_probability(state.iteration, config.kappa);
    const ChunkContext ctx{model, state.params, graph, train, config.seed, state.iteration,
                           epsilon, observed_targets(train, windows), scale};

    const std::size_t chunks = (windows.size() + cs - 1) / cs;
    std::vector<ChunkResult> results(chunks);
    parallel_for(chunks, threads, [&](std::size_t c) {
      const std::vector<std::size_t> part(windows.begin() + static_cast<std::ptrdiff_t>(c * cs),
                                          windows.begin() + static_cast<std::ptrdiff_t>(std::min(windows.size(), (c + 1) * cs)));
      const auto seed = mix_seed({config.seed, static_cast<std::uint64_t>(state.iteration), c, 0xD0u});
      results[c] = run_chunk(ctx, part, seed);
    });

    BatchTrace trace;
    trace.batch_index = batch_index;
    trace.iteration = state.iteration;
    trace.epsilon = epsilon;
    std::vector<Matrix> grads = std::move(results[0].grads);
    for (std::size_t c = 0; c < chunks; ++c) {
      const ChunkResult& r = results[c];
      if (c > 0) {
        for (std::size_t i = 0; i < grads.size(); ++i) grads[i] += r.grads[i];
      }
      trace.loss += r.loss;
      trace.truth_feeds += r.truth_feeds;
      trace.prediction_feeds += r.prediction_feeds;
      trace.passes = std::max(trace.passes, r.passes);
    }
    if (!std::isfinite(trace.loss)) {
      throw NumericFailure("non-finite training loss at batch " + std::to_string(batch_index) + " of epoch " +
                           std::to_string(state.epoch + 1) + " (iteration " + std::to_string(state.iteration) + ")");
    }
    if (observer) {
      trace.windows = windows;
      trace.feedback_source.resize(static_cast<Index>(windows.size()) * train.output_steps * graph.graph.node_count(), 1);
      Index row = 0;
      for (const auto& r : results) {
        trace.feedback_source.middleRows(row, r.source.rows()) = r.source;
        row += r.source.rows();
      }
      observer(trace);
    }

    Real norm2 = 0;
    for (const auto& g : grads) norm2 += g.squaredNorm();
    const Real norm = std::sqrt(norm2);
    if (!std::isfinite(norm)) {
      throw NumericFailure("non-finite gradient at batch " + std::to_string(batch_index) + " of epoch " +
                           std::to_string(state.epoch + 1));
    }
    if (norm > config.clip_norm) {
      for (auto& g : grads) g *= config.clip_norm / norm;
    }
    const Real lr = config.lr_scale * state.optimizer.scheduled_rate();
    std::vector<const Matrix*> grad_ptrs;
    for (const auto& g : grads) grad_ptrs.push_back(&g);
    adam_update(param_ptrs, grad_ptrs, state.optimizer, lr);
    ++state.iteration;

    weighted_loss += trace.loss * ctx.denominator;
    weight += ctx.denominator;
    stats.learning_rate = lr;
    stats.epsilon = epsilon;
  }
  ++state.epoch;
  stats.train_mae = weight > 0 ? weighted_loss / weight : 0;
  stats.iteration = state.iteration;
  return stats;
}

Real batch_loss_and_gradient(const ModelConfig& model, const ModelParams& params, const GraphArtifacts& graph,
                             const SequenceBatch& batch, const Matrix& feedback, Real scale, Mode mode,
                             std::uint64_t dropout_seed, std::vector<Matrix>* grads) {
  if (grads) *grads = params.store.zero_gradients();
  Tape tape(grads != nullptr);
  ParamBinder bind(tape, params.store, grads);
  Rng rng(dropout_seed);
  ForwardPass pass(bind, model, params, graph, {mode, &rng});
  Var memory = pass.encode(pass.embed(batch.inputs, batch.input_shape), batch.input_shape);
  Var y = pass.decode(feedback, batch.target_shape, memory, batch.input_shape);
  Var loss = masked_mae_loss(y, batch.targets_normalized, batch.target_mask, scale);
  if (grads) tape.backward(loss);
  return loss.value()(0, 0);
}

std::string metrics_log_header() { return "epoch,iter,train_mae,val_mae,val_rmse,val_mape,lr,epsilon"; }

std::string metrics_log_row(const EpochLog& r) {
  using text::format_real;
  return std::to_string(r.epoch) + "," + std::to_string(r.iteration) + "," + format_real(r.train_mae) + "," +
         format_real(r.val_mae) + "," + format_real(r.val_rmse) + "," + format_real(r.val_mape) + "," +
         format_real(r.learning_rate) + "," + format_real(r.epsilon);
}

FitResult fit(const ModelConfig& model, const GraphArtifacts& graph, const WindowedDataset& train,
              const WindowedDataset& validation, const TrainConfig& config, TrainingState& state,
              const std::function<void(const EpochLog&)>& on_epoch) {
  config.validate();
  if (validation.empty()) throw ContractError("fit: empty validation set");
  FitResult result;
  TrainingState best = state;
  bool have_best = false;
  int since_best = 0;
  while (state.epoch < config.max_epochs) {
    const EpochStats es = train_epoch(model, graph, train, config, state);
    const Predictions p = predict_dataset(model, state.params, graph, validation, config.eval_batch_size);
    const MetricValues m = metrics(p.predicted, p.truth, p.mask);
    EpochLog row{state.epoch, state.iteration, es.train_mae, m.mae, m.rmse, m.mape, es.learning_rate, es.epsilon};
    result.log.push_back(row);
    if (on_epoch) on_epoch(row);
    if (!std::isfinite(m.mae)) throw NumericFailure("non-finite validation MAE after epoch " + std::to_string(state.epoch));
    if (!have_best || m.mae < result.best_val_mae) {
      have_best = true;
      result.best_val_mae = m.mae;
      result.best_epoch = state.epoch;
      best = state;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      result.stopped_early = true;
      break;
    }
  }
  if (have_best) state = std::move(best);
  return result;
}

}  // namespace stgrat
