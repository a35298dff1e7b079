#include <doctest.h>

#include <cmath>

#include "stgrat/model.hpp"
#include "test_util.hpp"

using namespace stgrat;
using stgrat::test::random_matrix;

namespace {

struct Tiny {
  ModelConfig config;
  GraphArtifacts graph;
  ModelParams params;
  WindowedDataset windows;

  explicit Tiny(ModelConfig c, Index nodes = 4, std::uint64_t seed = 3) : config(c) {
    RingScenario sc;
    sc.nodes = nodes;
    sc.days = 1;
    const SpeedTable table = synthetic_ring_speeds(sc, seed);
    auto series = std::make_shared<const NormalizedSeries>(
        normalize_for_training(table, c.input_steps, c.output_steps, 0.7, NormalizationMethod::zscore));
    windows = make_windows(series, c.input_steps, c.output_steps);
    RoadGraph g = build_graph(table.node_ids, synthetic_ring_edges(sc));
    EmbeddingTable emb;
    if (c.embedding_dim > 0) {
      Rng rng(seed + 1);
      emb = {c.embedding_dim, table.node_ids, random_matrix(nodes, c.embedding_dim, rng)};
    }
    graph = GraphArtifacts::build(std::move(g), std::move(emb), c);
    Rng rng(seed);
    params = ModelParams::create(c, rng, -1.0, 1.0);
  }

  SequenceBatch batch(std::vector<std::size_t> w = {0, 40}) const { return make_batch(windows, w); }
};

ModelConfig tiny_config() {
  ModelConfig c;
  c.layers = 1;
  c.d_model = 8;
  c.heads = 2;
  c.K = 1;
  c.range = 2;
  c.input_steps = 3;
  c.output_steps = 3;
  c.dropout = 0;
  c.embedding_dim = 4;
  c.ffn_dim = 6;
  return c;
}

Matrix layer_norm_matrix(const Matrix& x, const Matrix& gain, const Matrix& bias) {
  Matrix out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    out.row(r) = layer_norm(x.row(r).transpose(), gain.row(0).transpose(), bias.row(0).transpose()).transpose();
  }
  return out;
}

Matrix ffn_oracle(const ModelParams& p, const FfnParams& f, const Matrix& x) {
  Matrix h = x * p.store[f.w1].value;
  for (Index r = 0; r < h.rows(); ++r) {
    for (Index c = 0; c < h.cols(); ++c) h(r, c) = gelu(h(r, c) + p.store[f.b1].value(0, c));
  }
  Matrix out = h * p.store[f.w2].value;
  for (Index r = 0; r < out.rows(); ++r) out.row(r) += p.store[f.b2].value.row(0);
  return out;
}

Matrix embed_oracle(const Tiny& t, const Matrix& features, SequenceShape shape) {
  const auto& s = t.params.store;
  const Matrix pe = positional_encoding(shape.steps, t.config.d_model);
  Matrix out(shape.rows(), t.config.d_model);
  for (Index b = 0; b < shape.batch; ++b) {
    for (Index step = 0; step < shape.steps; ++step) {
      for (Index n = 0; n < shape.nodes; ++n) {
        const Index r = shape.row(b, step, n);
        Matrix joined(1, 2 + t.config.embedding_dim);
        joined << features.row(r), t.graph.embeddings.vectors.row(n);
        Matrix w(2 + t.config.embedding_dim, t.config.d_model);
        w << s[t.params.input_features].value, s[t.params.input_embedding].value;
        out.row(r) = joined * w + s[t.params.input_bias].value + pe.row(step);
      }
    }
  }
  return out;
}

SpatialSettings settings_of(const ModelConfig& c) {
  return {.use_sentinel = c.use_sentinel, .use_prior = c.use_prior, .directed = c.directed_heads, .form = c.sentinel_form};
}

Matrix spatial_of(const Tiny& t, const SpatialAttentionLayerParams& layer, const Matrix& x) {
  Tape tape(false);
  ParamBinder bind(tape, t.params.store, nullptr);
  return spatial_attention(bind, layer, t.graph.spatial, tape.constant(x), settings_of(t.config)).value();
}

Matrix temporal_of(const Tiny& t, const TemporalAttentionParams& layer, const Matrix& q, SequenceShape qs,
                   const Matrix* kv, SequenceShape ks) {
  Tape tape(false);
  ParamBinder bind(tape, t.params.store, nullptr);
  Var vq = tape.constant(q);
  Var vk = kv ? tape.constant(*kv) : vq;
  return temporal_attention(bind, layer, vq, qs, vk, ks).value();
}

Matrix norm_of(const Tiny& t, const NormParams& n, const Matrix& x) {
  return layer_norm_matrix(x, t.params.store[n.gain].value, t.params.store[n.bias].value);
}

struct Forward {
  Matrix memory;
  Matrix output;
};

Forward run_model(const Tiny& t, const SequenceBatch& b, const Matrix& feedback) {
  Tape tape(false);
  ParamBinder bind(tape, t.params.store, nullptr);
  ForwardPass pass(bind, t.config, t.params, t.graph);
  Var memory = pass.encode(pass.embed(b.inputs, b.input_shape), b.input_shape);
  Var out = pass.decode(feedback, b.target_shape, memory, b.input_shape);
  return {memory.value(), out.value()};
}

Matrix true_feedback(const SequenceBatch& b) {
  return decoder_feedback(b.targets_normalized, b.target_time, b.target_shape, b.target_shape.steps);
}

std::size_t analytic_parameter_count(const ModelConfig& c) {
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto f = static_cast<std::size_t>(c.ffn_width());
  const auto h = static_cast<std::size_t>(c.heads);
  const auto dh = d / h;
  const auto e = static_cast<std::size_t>(c.embedding_dim);
  const std::size_t spatial = h * (5 * d * dh + static_cast<std::size_t>(c.K + 1)) + d * d;
  const std::size_t temporal = 3 * d * d + d * d;
  const std::size_t ffn = d * f + f + f * d + d;
  const std::size_t norm = 2 * d;
  const std::size_t enc = spatial + temporal + ffn + 3 * norm;
  const std::size_t dec = spatial + 2 * temporal + ffn + 4 * norm;
  const auto L = static_cast<std::size_t>(c.layers);
  return (2 + e) * d + d + L * (enc + dec) + d + d + 1;
}

}  // namespace

TEST_CASE("positional encoding") {
  const Matrix pe = positional_encoding(20, 16);
  for (Index i = 0; i < 16; i += 2) {
    CHECK(pe(0, i) == 0.0);
    CHECK(pe(0, i + 1) == 1.0);
  }
  CHECK(pe(1, 0) == doctest::Approx(std::sin(1.0)).epsilon(1e-15));
  CHECK(pe(1, 0) == doctest::Approx(0.84147).epsilon(1e-5));
  CHECK(pe(3, 5) == doctest::Approx(std::cos(3.0 / std::pow(10000.0, 4.0 / 16))));
  CHECK(pe.cwiseAbs().maxCoeff() <= 1.0);
  CHECK_THROWS_AS(positional_encoding(4, 7), ContractError);
}

TEST_CASE("config validation") {
  ModelConfig c = tiny_config();
  CHECK_NOTHROW(c.validate());
  auto bad = [&](auto mutate) {
    ModelConfig m = tiny_config();
    mutate(m);
    CHECK_THROWS_AS(m.validate(), ContractError);
  };
  bad([](ModelConfig& m) { m.heads = 3; });
  bad([](ModelConfig& m) { m.d_model = 10, m.heads = 4; });
  bad([](ModelConfig& m) { m.input_steps = 0; });
  bad([](ModelConfig& m) { m.output_steps = 0; });
  bad([](ModelConfig& m) { m.dropout = 1.0; });
  bad([](ModelConfig& m) { m.range = 0; });
  bad([](ModelConfig& m) { m.K = -1; });
  c.heads = 1;
  c.directed_heads = false;
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("parameter census") {
  for (int layers : {0, 1, 2}) {
    ModelConfig c = tiny_config();
    c.layers = layers;
    Rng a(1), b(2);
    const ModelParams p = ModelParams::create(c, a);
    CHECK(p.scalar_count() == analytic_parameter_count(c));
    CHECK(ModelParams::create(c, b).scalar_count() == p.scalar_count());
  }
  ModelConfig full_sized;
  full_sized.layers = 4;
  Rng rng(1);
  CHECK(ModelParams::create(full_sized, rng).scalar_count() == analytic_parameter_count(full_sized));

  Rng r1(5), r2(5);
  const ModelParams p1 = ModelParams::create(tiny_config(), r1, 1, 6);
  const ModelParams p2 = ModelParams::create(tiny_config(), r2, 1, 6);
  for (std::size_t i = 0; i < p1.store.size(); ++i) {
    const auto& item = p1.store.items()[i];
    CHECK(item.value == p2.store.items()[i].value);
    if (item.name.ends_with(".prior")) {
      CHECK((item.value.array() >= 1).all());
      CHECK((item.value.array() <= 6).all());
    }
    if (item.name.ends_with(".gain")) CHECK((item.value.array() == 1).all());
    if (item.name.ends_with(".bias") || item.name.ends_with(".b1") || item.name.ends_with(".b2")) {
      CHECK(item.value.isZero());
    }
  }
}

TEST_CASE("embedding layer") {
  Tiny t(tiny_config());
  const SequenceBatch b = t.batch();
  Tape tape(false);
  ParamBinder bind(tape, t.params.store, nullptr);
  ForwardPass pass(bind, t.config, t.params, t.graph);
  const Matrix got = pass.embed(b.inputs, b.input_shape).value();
  CHECK(got.rows() == b.input_shape.rows());
  CHECK(got.cols() == 8);
  CHECK((got - embed_oracle(t, b.inputs, b.input_shape)).cwiseAbs().maxCoeff() < 1e-12);

  // Identical features and identical embedding rows give identical vectors.
  t.graph.embeddings.vectors.row(1) = t.graph.embeddings.vectors.row(0);
  Matrix features = b.inputs;
  for (Index s = 0; s < b.input_shape.steps; ++s) features.row(b.input_shape.row(0, s, 1)) = features.row(b.input_shape.row(0, s, 0));
  Tape t2(false);
  ParamBinder bind2(t2, t.params.store, nullptr);
  ForwardPass pass2(bind2, t.config, t.params, t.graph);
  const Matrix same = pass2.embed(features, b.input_shape).value();
  for (Index s = 0; s < b.input_shape.steps; ++s) CHECK(same.row(b.input_shape.row(0, s, 1)) == same.row(b.input_shape.row(0, s, 0)));

  // Zero everything: output is the positional encoding broadcast.
  for (auto& p : t.params.store.items()) p.value.setZero();
  t.graph.embeddings.vectors.setZero();
  Tape t3(false);
  ParamBinder bind3(t3, t.params.store, nullptr);
  ForwardPass pass3(bind3, t.config, t.params, t.graph);
  const Matrix pe_only = pass3.embed(Matrix::Zero(b.input_shape.rows(), 2), b.input_shape).value();
  const Matrix pe = positional_encoding(3, 8);
  for (Index r = 0; r < b.input_shape.rows(); ++r) CHECK(pe_only.row(r) == pe.row((r / 4) % 3));

  CHECK_THROWS_AS(pass3.embed(Matrix::Zero(5, 2), b.input_shape), ShapeError);
  ModelConfig c = tiny_config();
  CHECK_THROWS_AS(GraphArtifacts::build(t.graph.graph, EmbeddingTable{3, t.graph.graph.node_ids(), Matrix::Zero(4, 3)}, c),
                  ContractError);
}

TEST_CASE("feed-forward block") {
  Tiny t(tiny_config());
  const auto& f = t.params.encoder[0].ffn;
  Rng rng(4);
  const Matrix x = random_matrix(7, 8, rng, 0.3);
  auto run = [&](const Matrix& in) {
    Tape tape(false);
    ParamBinder bind(tape, t.params.store, nullptr);
    ForwardPass pass(bind, t.config, t.params, t.graph);
    return Matrix(pass.ffn(f, tape.constant(in)).value());
  };
  CHECK((run(x) - ffn_oracle(t.params, f, x)).cwiseAbs().maxCoeff() < 1e-12);

  t.params.store[f.w1].value.setZero();
  t.params.store[f.w2].value.setZero();
  t.params.store[f.b2].value.setConstant(0.25);
  CHECK((run(x).array() == 0.25).all());

  ModelConfig sq = tiny_config();
  sq.ffn_dim = 0;
  Tiny id(sq);
  const auto& g = id.params.encoder[0].ffn;
  id.params.store[g.w1].value = Matrix::Identity(8, 8);
  id.params.store[g.w2].value = Matrix::Identity(8, 8);
  Tape tape(false);
  ParamBinder bind(tape, id.params.store, nullptr);
  ForwardPass pass(bind, id.config, id.params, id.graph);
  CHECK(pass.ffn(g, tape.constant(Matrix::Zero(3, 8))).value().isZero());
}

TEST_CASE("encoder matches sub-layer composition") {
  for (bool directed : {false, true}) {
    ModelConfig c = tiny_config();
    c.heads = directed ? 2 : 1;
    c.directed_heads = directed;
    c.layers = directed ? 2 : 1;
    Tiny t(c);
    const SequenceBatch b = t.batch();
    const SequenceShape s = b.input_shape;
    Matrix x = embed_oracle(t, b.inputs, s);
    for (const auto& layer : t.params.encoder) {
      x = norm_of(t, layer.norm_spatial, x + spatial_of(t, layer.spatial, x));
      x = norm_of(t, layer.norm_temporal, x + temporal_of(t, layer.temporal, x, s, nullptr, s));
      x = norm_of(t, layer.norm_ffn, x + ffn_oracle(t.params, layer.ffn, x));
    }
    const Forward got = run_model(t, b, true_feedback(b));
    CHECK((got.memory - x).cwiseAbs().maxCoeff() < 1e-9);
  }

  ModelConfig c = tiny_config();
  c.layers = 0;
  Tiny t(c);
  const SequenceBatch b = t.batch();
  CHECK((run_model(t, b, true_feedback(b)).memory - embed_oracle(t, b.inputs, b.input_shape)).cwiseAbs().maxCoeff() <
        1e-12);
}

TEST_CASE("decoder matches sub-layer composition") {
  ModelConfig c = tiny_config();
  c.range = 1;
  Tiny t(c, 3);
  const SequenceBatch b = t.batch({5});
  const SequenceShape s = b.target_shape;
  const Matrix fb = true_feedback(b);
  const Forward got = run_model(t, b, fb);

  Matrix x = embed_oracle(t, fb, s);
  for (Index n = 0; n < s.nodes; ++n) x.row(s.row(0, 0, n)) = t.params.store[t.params.start_token].value;
  for (const auto& layer : t.params.decoder) {
    x = norm_of(t, layer.norm_spatial, x + spatial_of(t, layer.spatial, x));
    x = norm_of(t, layer.norm_masked, x + temporal_of(t, layer.masked, x, s, nullptr, s));
    x = norm_of(t, layer.norm_cross, x + temporal_of(t, layer.cross, x, s, &got.memory, b.input_shape));
    x = norm_of(t, layer.norm_ffn, x + ffn_oracle(t.params, layer.ffn, x));
  }
  const Matrix y = (x * t.params.store[t.params.output_weight].value).array() +
                   t.params.store[t.params.output_bias].value(0, 0);
  CHECK(got.output.rows() == s.rows());
  CHECK((got.output - y).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("decoder with zero weights returns the output bias") {
  Tiny t(tiny_config());
  for (auto& p : t.params.store.items()) p.value.setZero();
  t.params.store[t.params.output_bias].value(0, 0) = 3.7;
  const SequenceBatch b = t.batch();
  const Forward got = run_model(t, b, true_feedback(b));
  CHECK((got.output.array() == 3.7).all());
}

TEST_CASE("teacher-forced decoder is causal") {
  Tiny t(tiny_config());
  const SequenceBatch b = t.batch();
  const Matrix fb = true_feedback(b);
  const Matrix base = run_model(t, b, fb).output;
  const SequenceShape s = b.target_shape;
  Rng rng(3);
  for (Index p = 1; p < s.steps; ++p) {
    Matrix changed = fb;
    for (Index bb = 0; bb < s.batch; ++bb) {
      for (Index n = 0; n < s.nodes; ++n) changed(s.row(bb, p, n), 0) += rng.normal();
    }
    const Matrix out = run_model(t, b, changed).output;
    for (Index bb = 0; bb < s.batch; ++bb) {
      for (Index q = 0; q < p; ++q) {
        for (Index n = 0; n < s.nodes; ++n) CHECK(out(s.row(bb, q, n), 0) == base(s.row(bb, q, n), 0));
      }
    }
    CHECK((out - base).cwiseAbs().maxCoeff() > 0);
  }
}

TEST_CASE("decoder feedback layout") {
  const SequenceShape s{2, 3, 2};
  Matrix speeds(s.rows(), 1), times(6, 1);
  for (Index r = 0; r < s.rows(); ++r) speeds(r, 0) = static_cast<Real>(r);
  for (Index r = 0; r < 6; ++r) times(r, 0) = 0.1 * static_cast<Real>(r);
  const Matrix fb = decoder_feedback(speeds, times, s, 3);
  CHECK(fb.row(s.row(1, 0, 1)).isZero());
  CHECK(fb(s.row(1, 2, 1), 0) == speeds(s.row(1, 1, 1), 0));
  CHECK(fb(s.row(1, 2, 1), 1) == doctest::Approx(0.4));
  CHECK(decoder_feedback(speeds, times, s, 2).rows() == 8);
  CHECK_THROWS_AS(decoder_feedback(speeds, times, s, 4), ContractError);
}

TEST_CASE("forecast shape and determinism") {
  for (int out_steps : {1, 3, 5}) {
    ModelConfig c = tiny_config();
    c.output_steps = out_steps;
    Tiny t(c);
    const SequenceBatch b = t.batch({2});
    const Matrix f = forecast(c, t.params, t.graph, b, t.windows.series->stats);
    CHECK(f.rows() == out_steps);
    CHECK(f.cols() == 4);
    CHECK(f == forecast(c, t.params, t.graph, b, t.windows.series->stats));
    CHECK(f.allFinite());
  }

  // Free-running decode equals teacher forcing fed with the model's own outputs.
  Tiny t(tiny_config());
  const SequenceBatch b = t.batch();
  const Matrix free = forecast_normalized(t.config, t.params, t.graph, b);
  const Matrix fb = decoder_feedback(free, b.target_time, b.target_shape, b.target_shape.steps);
  CHECK((teacher_forced_normalized(t.config, t.params, t.graph, b, fb) - free).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("end-to-end gradients for every toggle combination") {
  for (int mask = 0; mask < 8; ++mask) {
    ModelConfig c = tiny_config();
    c.directed_heads = mask & 1;
    c.use_prior = mask & 2;
    c.use_sentinel = mask & 4;
    Tiny t(c, 4, static_cast<std::uint64_t>(10 + mask));
    const SequenceBatch b = t.batch({1});
    const Matrix fb = true_feedback(b);
    Rng wr(mask);
    const Matrix weights = random_matrix(b.target_shape.rows(), 1, wr);
    auto loss = [&](const ModelParams& p, std::vector<Matrix>* grads) {
      Tape tape(grads != nullptr);
      ParamBinder bind(tape, p.store, grads);
      ForwardPass pass(bind, c, p, t.graph);
      Var memory = pass.encode(pass.embed(b.inputs, b.input_shape), b.input_shape);
      Var out = ad::sum(ad::hadamard(pass.decode(fb, b.target_shape, memory, b.input_shape), tape.constant(weights)));
      if (grads) tape.backward(out);
      return out.value()(0, 0);
    };
    Real worst = 0;
    for (std::size_t i = 0; i < t.params.store.size(); ++i) {
      GradientFunction fn = [&](const Matrix& at, Matrix* grad) {
        ModelParams copy = t.params;
        copy.store.items()[i].value = at;
        if (!grad) return loss(copy, nullptr);
        std::vector<Matrix> grads = copy.store.zero_gradients();
        const Real v = loss(copy, &grads);
        *grad = grads[i];
        return v;
      };
      worst = std::max(worst, gradient_check(fn, t.params.store.items()[i].value));
    }
    INFO("toggle mask " << mask);
    CHECK(worst < 1e-4);
  }
}
