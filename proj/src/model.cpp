#include "stgrat/model.hpp"

#include <cmath>

namespace stgrat {

void ModelConfig::validate() const {
  if (layers < 0) throw ContractError("config: layers must be >= 0");
  if (d_model < 1) throw ContractError("config: d_model must be >= 1");
  if (heads < 1 || d_model % heads != 0) {
    throw ContractError("config: d_model " + std::to_string(d_model) + " is not divisible by heads " +
                        std::to_string(heads));
  }
  if (directed_heads && heads % 2 != 0) throw ContractError("config: directed heads need an even head count");
  if (d_model % 2 != 0) throw ContractError("config: d_model must be even for positional encoding");
  if (K < 0) throw ContractError("config: K must be >= 0");
  if (range < 1) throw ContractError("config: range must be >= 1");
  if (input_steps < 1 || output_steps < 1) throw ContractError("config: window lengths must be >= 1");
  if (dropout < 0 || dropout >= 1) throw ContractError("config: dropout must be in [0, 1)");
  if (embedding_dim < 0) throw ContractError("config: embedding_dim must be >= 0");
  if (ffn_dim < 0) throw ContractError("config: ffn_dim must be >= 0");
}

namespace {

FfnParams make_ffn(ParameterSet& s, const std::string& prefix, Index d_model, Index hidden, Rng& rng) {
  return {s.add(prefix + ".w1", xavier_init(d_model, hidden, rng)), s.add(prefix + ".b1", Matrix::Zero(1, hidden)),
          s.add(prefix + ".w2", xavier_init(hidden, d_model, rng)), s.add(prefix + ".b2", Matrix::Zero(1, d_model))};
}

NormParams make_norm(ParameterSet& s, const std::string& prefix, Index d_model) {
  return {s.add(prefix + ".gain", Matrix::Ones(1, d_model)), s.add(prefix + ".bias", Matrix::Zero(1, d_model))};
}

}  // namespace

ModelParams ModelParams::create(const ModelConfig& c, Rng& rng, Real prior_lo, Real prior_hi) {
  c.validate();
  ModelParams p;
  auto& s = p.store;
  const Index d = c.d_model;
  // One projection of [features, embedding], stored as two blocks.
  const Matrix w_in = xavier_init(2 + c.embedding_dim, d, rng);
  p.input_features = s.add("input.features", w_in.topRows(2));
  if (c.embedding_dim > 0) p.input_embedding = s.add("input.embedding", w_in.bottomRows(c.embedding_dim));
  p.input_bias = s.add("input.bias", Matrix::Zero(1, d));
  for (int l = 0; l < c.layers; ++l) {
    const std::string pre = "encoder." + std::to_string(l);
    EncoderLayerParams e;
    e.spatial = make_spatial_layer(s, pre + ".spatial", d, c.heads, c.K, rng, prior_lo, prior_hi);
    e.temporal = make_temporal_layer(s, pre + ".temporal", d, c.heads, TemporalMasking::none, TemporalMode::self, rng);
    e.ffn = make_ffn(s, pre + ".ffn", d, c.ffn_width(), rng);
    e.norm_spatial = make_norm(s, pre + ".norm_spatial", d);
    e.norm_temporal = make_norm(s, pre + ".norm_temporal", d);
    e.norm_ffn = make_norm(s, pre + ".norm_ffn", d);
    p.encoder.push_back(e);
  }
  p.start_token = s.add("decoder.start_token", xavier_init(1, d, rng));
  for (int l = 0; l < c.layers; ++l) {
    const std::string pre = "decoder." + std::to_string(l);
    DecoderLayerParams e;
    e.spatial = make_spatial_layer(s, pre + ".spatial", d, c.heads, c.K, rng, prior_lo, prior_hi);
    e.masked = make_temporal_layer(s, pre + ".masked", d, c.heads, TemporalMasking::causal, TemporalMode::self, rng);
    e.cross = make_temporal_layer(s, pre + ".cross", d, c.heads, TemporalMasking::none, TemporalMode::encoder_decoder, rng);
    e.ffn = make_ffn(s, pre + ".ffn", d, c.ffn_width(), rng);
    e.norm_spatial = make_norm(s, pre + ".norm_spatial", d);
    e.norm_masked = make_norm(s, pre + ".norm_masked", d);
    e.norm_cross = make_norm(s, pre + ".norm_cross", d);
    e.norm_ffn = make_norm(s, pre + ".norm_ffn", d);
    p.decoder.push_back(e);
  }
  p.output_weight = s.add("output.weight", xavier_init(d, 1, rng));
  p.output_bias = s.add("output.bias", Matrix::Zero(1, 1));
  return p;
}

GraphArtifacts GraphArtifacts::build(RoadGraph graph, EmbeddingTable embeddings, const ModelConfig& config) {
  if (config.embedding_dim > 0) {
    if (embeddings.dim != config.embedding_dim || embeddings.vectors.rows() != graph.node_count() ||
        embeddings.vectors.cols() != config.embedding_dim) {
      throw ContractError("model: embedding table is " + shape_string(embeddings.vectors) + ", expected " +
                          shape_string(graph.node_count(), config.embedding_dim));
    }
    if (embeddings.node_ids != graph.node_ids()) throw ContractError("model: embedding rows do not follow graph node order");
  }
  GraphArtifacts a;
  a.transitions = transition_matrices(graph);
  a.spatial = SpatialStructure::build(graph, a.transitions, config.K, config.range);
  a.graph = std::move(graph);
  a.embeddings = std::move(embeddings);
  return a;
}

Matrix positional_encoding(Index steps, Index d_model) {
  if (d_model % 2 != 0) throw ContractError("positional_encoding: d_model must be even, got " + std::to_string(d_model));
  Matrix pe(steps, d_model);
  for (Index pos = 0; pos < steps; ++pos) {
    for (Index i = 0; i < d_model / 2; ++i) {
      const Real angle = static_cast<Real>(pos) / std::pow(10000.0, static_cast<Real>(2 * i) / static_cast<Real>(d_model));
      pe(pos, 2 * i) = std::sin(angle);
      pe(pos, 2 * i + 1) = std::cos(angle);
    }
  }
  return pe;
}

ForwardPass::ForwardPass(ParamBinder& bind, const ModelConfig& config, const ModelParams& params,
                         const GraphArtifacts& graph, ForwardOptions options)
    : bind_(bind), config_(config), params_(params), graph_(graph), options_(options) {
  if (options_.mode == Mode::train && config_.dropout > 0 && !options_.rng) {
    throw ContractError("forward: train mode with dropout needs an rng");
  }
}

SpatialSettings ForwardPass::spatial_settings() const {
  SpatialSettings s;
  s.use_sentinel = config_.use_sentinel;
  s.use_prior = config_.use_prior;
  s.directed = config_.directed_heads;
  s.form = config_.sentinel_form;
  s.weight_dropout = options_.mode == Mode::train ? config_.dropout : 0.0;
  return s;
}

Var ForwardPass::embed(const Matrix& features, SequenceShape shape) {
  if (features.rows() != shape.rows() || features.cols() != 2) {
    throw ShapeError("embed: features " + shape_string(features) + " do not match " + shape_string(shape.rows(), 2));
  }
  if (shape.nodes != graph_.graph.node_count()) throw ShapeError("embed: node count differs from graph");
  Tape& t = tape();
  Var x = ad::matmul(t.constant(features), bind_(params_.input_features));
  if (config_.embedding_dim > 0) {
    Var per_node = ad::matmul(t.constant_ref(graph_.embeddings.vectors), bind_(params_.input_embedding));
    x = ad::add(x, ad::tile_rows(per_node, shape.batch * shape.steps));
  }
  x = ad::add_row(x, bind_(params_.input_bias));
  const Matrix pe = positional_encoding(shape.steps, config_.d_model);
  Matrix pe_rows(shape.rows(), config_.d_model);
  for (Index b = 0; b < shape.batch; ++b) {
    for (Index s = 0; s < shape.steps; ++s) {
      for (Index n = 0; n < shape.nodes; ++n) pe_rows.row(shape.row(b, s, n)) = pe.row(s);
    }
  }
  return ad::add(x, t.constant(std::move(pe_rows)));
}

Var ForwardPass::ffn(const FfnParams& p, Var x) {
  Var h = ad::gelu(ad::add_row(ad::matmul(x, bind_(p.w1)), bind_(p.b1)));
  return ad::add_row(ad::matmul(h, bind_(p.w2)), bind_(p.b2));
}

Var ForwardPass::sublayer(Var x, Var y, const NormParams& norm) {
  if (options_.mode == Mode::train && config_.dropout > 0) y = ad::dropout(y, config_.dropout, Mode::train, *options_.rng);
  return ad::layer_norm_rows(ad::add(x, y), bind_(norm.gain), bind_(norm.bias));
}

Var ForwardPass::encode(Var x, SequenceShape shape) {
  const SpatialSettings ss = spatial_settings();
  const Real attn_drop = ss.weight_dropout;
  for (std::size_t l = 0; l < params_.encoder.size(); ++l) {
    const auto& p = params_.encoder[l];
    const int li = static_cast<int>(l);
    x = sublayer(x, spatial_attention(bind_, p.spatial, graph_.spatial, x, ss, options_.rng, options_.encoder_records, li),
                 p.norm_spatial);
    x = sublayer(x, temporal_attention(bind_, p.temporal, x, shape, x, shape, attn_drop, options_.rng, nullptr, li),
                 p.norm_temporal);
    x = sublayer(x, ffn(p.ffn, x), p.norm_ffn);
  }
  return x;
}

Var ForwardPass::decode(const Matrix& feedback, SequenceShape shape, Var memory, SequenceShape memory_shape) {
  Var x = embed(feedback, shape);
  std::vector<Index> start_rows;
  for (Index b = 0; b < shape.batch; ++b) {
    for (Index n = 0; n < shape.nodes; ++n) start_rows.push_back(shape.row(b, 0, n));
  }
  x = ad::replace_rows(x, bind_(params_.start_token), start_rows);

  const SpatialSettings ss = spatial_settings();
  const Real attn_drop = ss.weight_dropout;
  for (std::size_t l = 0; l < params_.decoder.size(); ++l) {
    const auto& p = params_.decoder[l];
    const int li = static_cast<int>(l);
    x = sublayer(x, spatial_attention(bind_, p.spatial, graph_.spatial, x, ss, options_.rng, options_.decoder_records, li),
                 p.norm_spatial);
    x = sublayer(x, temporal_attention(bind_, p.masked, x, shape, x, shape, attn_drop, options_.rng, nullptr, li),
                 p.norm_masked);
    x = sublayer(x, temporal_attention(bind_, p.cross, x, shape, memory, memory_shape, attn_drop, options_.rng, nullptr, li),
                 p.norm_cross);
    x = sublayer(x, ffn(p.ffn, x), p.norm_ffn);
  }
  return ad::add_row(ad::matmul(x, bind_(params_.output_weight)), bind_(params_.output_bias));
}

Matrix decoder_feedback(const Matrix& speeds, const Matrix& target_time, SequenceShape target_shape, Index steps) {
  if (steps < 1 || steps > target_shape.steps) throw ContractError("decoder_feedback: invalid step count");
  if (speeds.rows() != target_shape.rows() || target_time.rows() != target_shape.batch * target_shape.steps) {
    throw ShapeError("decoder_feedback: inputs do not match the target shape");
  }
  const SequenceShape shape{target_shape.batch, steps, target_shape.nodes};
  Matrix out = Matrix::Zero(shape.rows(), 2);
  for (Index b = 0; b < shape.batch; ++b) {
    for (Index p = 1; p < steps; ++p) {
      const Real tod = target_time(b * target_shape.steps + p - 1, 0);
      for (Index n = 0; n < shape.nodes; ++n) {
        const Index r = shape.row(b, p, n);
        out(r, 0) = speeds(target_shape.row(b, p - 1, n), 0);
        out(r, 1) = tod;
      }
    }
  }
  return out;
}

Matrix forecast_normalized(const ModelConfig& config, const ModelParams& params, const GraphArtifacts& graph,
                           const SequenceBatch& batch, std::vector<AttentionRecord>* encoder_records) {
  Tape tape(false);
  ParamBinder bind(tape, params.store, nullptr);
  ForwardOptions opt;
  opt.encoder_records = encoder_records;
  ForwardPass pass(bind, config, params, graph, opt);
  const SequenceShape in = batch.input_shape;
  const SequenceShape out = batch.target_shape;
  Var memory = pass.encode(pass.embed(batch.inputs, in), in);

  Matrix predictions = Matrix::Zero(out.rows(), 1);
  for (Index steps = 1; steps <= out.steps; ++steps) {
    // Causal decoding: positions < steps only depend on feedback decided so far.
    const Matrix fb = decoder_feedback(predictions, batch.target_time, out, steps);
    const SequenceShape shape{out.batch, steps, out.nodes};
    const Matrix& y = pass.decode(fb, shape, memory, in).value();
    for (Index b = 0; b < out.batch; ++b) {
      for (Index n = 0; n < out.nodes; ++n) predictions(out.row(b, steps - 1, n), 0) = y(shape.row(b, steps - 1, n), 0);
    }
  }
  return predictions;
}

Matrix forecast(const ModelConfig& config, const ModelParams& params, const GraphArtifacts& graph,
                const SequenceBatch& batch, const NormalizationStats& stats) {
  const Matrix y = forecast_normalized(config, params, graph, batch);
  const SequenceShape out = batch.target_shape;
  Matrix speeds(out.steps, out.nodes);
  for (Index t = 0; t < out.steps; ++t) {
    for (Index n = 0; n < out.nodes; ++n) speeds(t, n) = stats.denormalize(y(out.row(0, t, n), 0));
  }
  return speeds;
}

Matrix teacher_forced_normalized(const ModelConfig& config, const ModelParams& params, const GraphArtifacts& graph,
                                 const SequenceBatch& batch, const Matrix& feedback) {
  Tape tape(false);
  ParamBinder bind(tape, params.store, nullptr);
  ForwardPass pass(bind, config, params, graph);
  Var memory = pass.encode(pass.embed(batch.inputs, batch.input_shape), batch.input_shape);
  return pass.decode(feedback, batch.target_shape, memory, batch.input_shape).value();
}

}  // namespace stgrat
