#pragma once

#include <string>
#include <vector>

#include "stgrat/attention.hpp"
#include "stgrat/autodiff.hpp"
#include "stgrat/data.hpp"
#include "stgrat/graph.hpp"

namespace stgrat {

struct ModelConfig {
  int layers = 4;
  Index d_model = 128;
  int heads = 4;
  int K = 2;
  int range = 2;
  Index input_steps = 12;
  Index output_steps = 12;
  Real dropout = 0.3;
  Index embedding_dim = 64;
  /// Hidden width of the point-wise feed-forward block; 0 means d_model.
  Index ffn_dim = 0;
  bool directed_heads = true;
  bool use_prior = true;
  bool use_sentinel = true;
  SentinelForm sentinel_form = SentinelForm::exponential;

  void validate() const;
  Index ffn_width() const { return ffn_dim > 0 ? ffn_dim : d_model; }
  bool operator==(const ModelConfig&) const = default;
};

struct FfnParams {
  ParamId w1, b1, w2, b2;
};

struct NormParams {
  ParamId gain, bias;
};

struct EncoderLayerParams {
  SpatialAttentionLayerParams spatial;
  TemporalAttentionParams temporal;
  FfnParams ffn;
  NormParams norm_spatial, norm_temporal, norm_ffn;
};

struct DecoderLayerParams {
  SpatialAttentionLayerParams spatial;
  TemporalAttentionParams masked;
  TemporalAttentionParams cross;
  FfnParams ffn;
  NormParams norm_spatial, norm_masked, norm_cross, norm_ffn;
};

/// All learnable weights. Tensors live in `store`; the structs hold handles.
struct ModelParams {
  ParameterSet store;
  ParamId input_features;   ///< 2 x d_model (speed, time of day)
  ParamId input_embedding;  ///< embedding_dim x d_model (absent when embedding_dim = 0)
  ParamId input_bias;       ///< 1 x d_model
  std::vector<EncoderLayerParams> encoder;
  std::vector<DecoderLayerParams> decoder;
  ParamId start_token;  ///< 1 x d_model
  ParamId output_weight, output_bias;

  /// Xavier matrices, zero biases, unit norm gains, prior weights from U(prior_lo, prior_hi).
  static ModelParams create(const ModelConfig& config, Rng& rng, Real prior_lo = 1, Real prior_hi = 6);
  std::size_t scalar_count() const { return store.scalar_count(); }
};

/// Graph-derived inputs the network needs at every forward pass.
struct GraphArtifacts {
  RoadGraph graph;
  TransitionPair transitions;
  SpatialStructure spatial;
  EmbeddingTable embeddings;

  static GraphArtifacts build(RoadGraph graph, EmbeddingTable embeddings, const ModelConfig& config);
};

Matrix positional_encoding(Index steps, Index d_model);

struct ForwardOptions {
  Mode mode = Mode::eval;
  Rng* rng = nullptr;  ///< dropout source, required in train mode with dropout > 0
  std::vector<AttentionRecord>* encoder_records = nullptr;
  std::vector<AttentionRecord>* decoder_records = nullptr;
};

/// Builds the network's computation on one tape.
class ForwardPass {
 public:
  ForwardPass(ParamBinder& bind, const ModelConfig& config, const ModelParams& params, const GraphArtifacts& graph,
              ForwardOptions options = {});

  /// features: rows in SequenceShape order, columns (speed, time of day).
  Var embed(const Matrix& features, SequenceShape shape);
  Var ffn(const FfnParams& p, Var x);
  Var encode(Var embedded, SequenceShape shape);
  /// Decoder over positions 0..shape.steps-1; position 0 is the start token.
  /// feedback: rows (b, p, n) x 2; row content at p = 0 is ignored.
  /// Returns rows x 1 normalised predictions, position p predicting target step p.
  Var decode(const Matrix& feedback, SequenceShape shape, Var memory, SequenceShape memory_shape);

  Tape& tape() { return bind_.tape(); }

 private:
  Var sublayer(Var x, Var y, const NormParams& norm);
  SpatialSettings spatial_settings() const;

  ParamBinder& bind_;
  const ModelConfig& config_;
  const ModelParams& params_;
  const GraphArtifacts& graph_;
  ForwardOptions options_;
};

/// Decoder feedback matrix for `steps` positions: input at position p >= 1 is
/// (speed of target step p-1, time of day of target step p-1).
Matrix decoder_feedback(const Matrix& speeds_normalized, const Matrix& target_time, SequenceShape target_shape,
                        Index steps);

/// Autoregressive forecast in eval mode; returns (batch * T_out * N) x 1 normalised predictions.
Matrix forecast_normalized(const ModelConfig& config, const ModelParams& params, const GraphArtifacts& graph,
                           const SequenceBatch& batch, std::vector<AttentionRecord>* encoder_records = nullptr);

/// Denormalised forecast for the first window of a batch: T_out x N.
Matrix forecast(const ModelConfig& config, const ModelParams& params, const GraphArtifacts& graph,
                const SequenceBatch& batch, const NormalizationStats& stats);

/// Teacher-forced predictions (normalised) given decoder feedback built from ground truth.
Matrix teacher_forced_normalized(const ModelConfig& config, const ModelParams& params, const GraphArtifacts& graph,
                                 const SequenceBatch& batch, const Matrix& feedback);

}  // namespace stgrat
