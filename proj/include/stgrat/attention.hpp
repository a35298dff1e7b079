#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "stgrat/autodiff.hpp"
#include "stgrat/graph.hpp"

namespace stgrat {

/// Sparse attention pattern: query row q attends to key rows
/// keys[offsets[q] .. offsets[q+1]). bias_slots, when present, index the
/// row-major bias matrix entry added to each logit.
struct AttentionLayout {
  Index query_count = 0;
  Index key_count = 0;
  std::vector<Index> offsets;
  std::vector<Index> keys;
  std::vector<Index> bias_slots;

  Index entries() const { return static_cast<Index>(keys.size()); }
};

/// How the sentinel logit enters the normaliser.
///  exponential: exp(e_s) + sum exp(e_j), a proper probability split.
///  literal:     e_s + sum exp(e_j); kept for comparison, weights may leave [0, 1].
enum class SentinelForm { exponential, literal };

struct AttendOptions {
  Real scale = 1;
  /// Per-query sentinel key/value rows (aligned with the query matrix).
  std::optional<Var> sentinel_key;
  std::optional<Var> sentinel_value;
  std::optional<Var> bias;
  SentinelForm form = SentinelForm::exponential;
  /// Inverted dropout on the joint weight vector (sentinel included), not renormalised.
  Real weight_dropout = 0;
  Rng* rng = nullptr;
};

/// Pre-dropout weights aligned with an AttentionLayout.
struct AttentionWeights {
  std::vector<Real> weights;
  std::vector<Real> sentinel;
};

/// Scaled dot-product attention over an arbitrary sparse layout, with an
/// optional sentinel key/value competing with the listed keys.
Var attend(Var queries, Var keys, Var values, std::shared_ptr<const AttentionLayout> layout,
           const AttendOptions& options, AttentionWeights* record = nullptr);

struct AttentionRecord {
  int layer = 0;
  int head = 0;  ///< numbered from 1
  std::string direction;
  Index block = 0;  ///< time step for spatial records, node for temporal ones
  Index query = 0;
  std::vector<Index> keys;
  std::vector<Real> weights;
  Real sentinel_weight = 0;
};

// ---------------------------------------------------------------- spatial

struct SpatialHeadParams {
  ParamId query;
  ParamId key;
  ParamId sentinel_key;
  ParamId value;
  ParamId sentinel_value;
  ParamId prior;  ///< 1 x (K+1) diffusion weights
  FlowDirection direction = FlowDirection::inflow;
};

struct SpatialAttentionLayerParams {
  std::vector<SpatialHeadParams> heads;
  ParamId output;
};

/// Graph-derived tables shared by every spatial attention layer.
struct SpatialStructure {
  Index nodes = 0;
  int K = 0;
  int range = 1;
  std::vector<std::vector<Index>> inflow;
  std::vector<std::vector<Index>> outflow;
  std::vector<std::vector<Index>> both;
  std::vector<Matrix> incoming_powers;  ///< (D_I^-1 A^T)^k, k = 0..K
  std::vector<Matrix> outgoing_powers;  ///< (D_O^-1 A)^k

  static SpatialStructure build(const RoadGraph& g, const TransitionPair& pair, int K, int range);
  const std::vector<std::vector<Index>>& neighbors(FlowDirection d) const;
  const std::vector<Matrix>& powers(FlowDirection d) const;
};

struct SpatialSettings {
  bool use_sentinel = true;
  bool use_prior = true;
  bool directed = true;
  SentinelForm form = SentinelForm::exponential;
  Real weight_dropout = 0;
};

/// Creates Xavier-initialised head parameters; prior weights drawn from U(lo, hi).
SpatialAttentionLayerParams make_spatial_layer(ParameterSet& params, const std::string& prefix, Index d_model,
                                               int heads, int K, Rng& rng, Real prior_lo = 1, Real prior_hi = 6);

/// Spatial attention applied independently to each block of `structure.nodes`
/// consecutive rows of `z` (one block per time step and batch element).
Var spatial_attention(ParamBinder& bind, const SpatialAttentionLayerParams& layer, const SpatialStructure& structure,
                      Var z, const SpatialSettings& settings, Rng* rng = nullptr,
                      std::vector<AttentionRecord>* records = nullptr, int layer_index = 0);

// --------------------------------------------------------------- temporal

enum class TemporalMasking { none, causal };
enum class TemporalMode { self, encoder_decoder };

struct TemporalHeadParams {
  ParamId query;
  ParamId key;
  ParamId value;
};

struct TemporalAttentionParams {
  std::vector<TemporalHeadParams> heads;
  ParamId output;
  TemporalMasking masking = TemporalMasking::none;
  TemporalMode mode = TemporalMode::self;
};

TemporalAttentionParams make_temporal_layer(ParameterSet& params, const std::string& prefix, Index d_model, int heads,
                                            TemporalMasking masking, TemporalMode mode, Rng& rng);

/// Row (b, t, n) of a sequence tensor lives at ((b * steps) + t) * nodes + n.
struct SequenceShape {
  Index batch = 1;
  Index steps = 1;
  Index nodes = 1;

  Index rows() const { return batch * steps * nodes; }
  Index row(Index b, Index t, Index n) const { return (b * steps + t) * nodes + n; }
};

/// Allowed iff key step <= query step.
std::vector<std::vector<bool>> causal_mask(Index steps);

/// Multi-head attention over time, independently for every (batch, node).
/// In self mode `key_source` must be `queries` with the same shape.
Var temporal_attention(ParamBinder& bind, const TemporalAttentionParams& layer, Var queries, SequenceShape query_shape,
                       Var key_source, SequenceShape key_shape, Real weight_dropout = 0, Rng* rng = nullptr,
                       std::vector<AttentionRecord>* records = nullptr, int layer_index = 0);

}  // namespace stgrat
