#include "stgrat/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace stgrat {

namespace {

struct AttendCache {
  std::vector<Real> alpha;       // pre-dropout weight per layout entry
  std::vector<Real> alpha_s;     // sentinel weight per query
  std::vector<Real> mask;        // dropout multiplier per entry (empty = none)
  std::vector<Real> mask_s;      // per query
  std::vector<Real> denominator; // literal form only
};

}  // namespace

Var attend(Var queries, Var keys, Var values, std::shared_ptr<const AttentionLayout> layout,
           const AttendOptions& options, AttentionWeights* record) {
  Tape* t = queries.tape;
  const Matrix& q = queries.value();
  const Matrix& k = keys.value();
  const Matrix& v = values.value();
  const AttentionLayout& lay = *layout;
  const bool sentinel = options.sentinel_key.has_value();
  if (sentinel != options.sentinel_value.has_value()) {
    throw ContractError("attend: sentinel key and value must be given together");
  }
  if (q.rows() != lay.query_count || k.rows() != lay.key_count || v.rows() != lay.key_count) {
    throw ShapeError("attend: layout expects " + std::to_string(lay.query_count) + " queries and " +
                     std::to_string(lay.key_count) + " keys, got Q " + shape_string(q) + ", K " + shape_string(k) +
                     ", V " + shape_string(v));
  }
  if (q.cols() != k.cols()) throw ShapeError("attend: query/key widths differ");
  if (static_cast<Index>(lay.offsets.size()) != lay.query_count + 1) throw ShapeError("attend: malformed layout");
  if (options.bias && lay.bias_slots.size() != lay.keys.size()) {
    throw ContractError("attend: bias requires a bias slot for every layout entry");
  }
  if (options.form == SentinelForm::literal && !sentinel) {
    throw ContractError("attend: literal sentinel form requires sentinel vectors");
  }
  const Matrix* ks = sentinel ? &options.sentinel_key->value() : nullptr;
  const Matrix* vs = sentinel ? &options.sentinel_value->value() : nullptr;
  if (sentinel && (ks->rows() != q.rows() || ks->cols() != q.cols() || vs->rows() != q.rows() || vs->cols() != v.cols())) {
    throw ShapeError("attend: sentinel key/value must align with queries");
  }
  const Matrix* bias = options.bias ? &options.bias->value() : nullptr;
  const bool use_dropout = options.weight_dropout > 0;
  if (use_dropout && !options.rng) throw ContractError("attend: weight dropout requires an rng");
  if (options.weight_dropout < 0 || options.weight_dropout >= 1) throw ContractError("attend: dropout rate must be in [0, 1)");

  auto cache = std::make_shared<AttendCache>();
  cache->alpha.resize(lay.keys.size());
  if (sentinel) cache->alpha_s.resize(static_cast<std::size_t>(lay.query_count));
  if (options.form == SentinelForm::literal) cache->denominator.resize(static_cast<std::size_t>(lay.query_count));
  const Real keep = use_dropout ? 1.0 / (1.0 - options.weight_dropout) : 1.0;
  if (use_dropout) {
    cache->mask.resize(lay.keys.size());
    if (sentinel) cache->mask_s.resize(static_cast<std::size_t>(lay.query_count));
  }

  Matrix out = Matrix::Zero(q.rows(), v.cols());
  std::vector<Real> logits;
  for (Index qi = 0; qi < lay.query_count; ++qi) {
    const auto begin = static_cast<std::size_t>(lay.offsets[static_cast<std::size_t>(qi)]);
    const auto end = static_cast<std::size_t>(lay.offsets[static_cast<std::size_t>(qi) + 1]);
    if (begin == end && !sentinel) throw ContractError("attend: query row " + std::to_string(qi) + " has no keys");
    logits.resize(end - begin);
    const auto qrow = q.row(qi);
    for (std::size_t e = begin; e < end; ++e) {
      Real logit = options.scale * qrow.dot(k.row(lay.keys[e]));
      if (bias) logit += bias->data()[lay.bias_slots[e]];
      logits[e - begin] = logit;
    }
    Real sentinel_logit = sentinel ? options.scale * qrow.dot(ks->row(qi)) : 0.0;
    Real alpha_s = 0;
    if (options.form == SentinelForm::exponential) {
      Real peak = sentinel ? sentinel_logit : -std::numeric_limits<Real>::infinity();
      for (Real l : logits) peak = std::max(peak, l);
      Real total = 0;
      for (std::size_t e = begin; e < end; ++e) {
        cache->alpha[e] = std::exp(logits[e - begin] - peak);
        total += cache->alpha[e];
      }
      if (sentinel) {
        alpha_s = std::exp(sentinel_logit - peak);
        total += alpha_s;
      }
      for (std::size_t e = begin; e < end; ++e) cache->alpha[e] /= total;
      alpha_s /= total;
    } else {
      Real total = sentinel_logit;
      for (std::size_t e = begin; e < end; ++e) {
        cache->alpha[e] = std::exp(logits[e - begin]);
        total += cache->alpha[e];
      }
      Real mass = 0;
      for (std::size_t e = begin; e < end; ++e) {
        cache->alpha[e] /= total;
        mass += cache->alpha[e];
      }
      alpha_s = 1.0 - mass;
      cache->denominator[static_cast<std::size_t>(qi)] = total;
    }
    if (sentinel) cache->alpha_s[static_cast<std::size_t>(qi)] = alpha_s;

    auto orow = out.row(qi);
    for (std::size_t e = begin; e < end; ++e) {
      Real w = cache->alpha[e];
      if (use_dropout) {
        cache->mask[e] = options.rng->uniform() < options.weight_dropout ? 0.0 : keep;
        w *= cache->mask[e];
      }
      if (w != 0) orow += w * v.row(lay.keys[e]);
    }
    if (sentinel) {
      Real w = alpha_s;
      if (use_dropout) {
        cache->mask_s[static_cast<std::size_t>(qi)] = options.rng->uniform() < options.weight_dropout ? 0.0 : keep;
        w *= cache->mask_s[static_cast<std::size_t>(qi)];
      }
      if (w != 0) orow += w * vs->row(qi);
    }
  }
  if (record) {
    record->weights = cache->alpha;
    record->sentinel = cache->alpha_s;
  }

  std::vector<Var> deps{queries, keys, values};
  if (sentinel) {
    deps.push_back(*options.sentinel_key);
    deps.push_back(*options.sentinel_value);
  }
  if (options.bias) deps.push_back(*options.bias);
  bool needs = false;
  for (const auto& d : deps) needs = needs || t->needs_grad(d.id);

  const int out_id = static_cast<int>(t->size());
  const Real scale = options.scale;
  const SentinelForm form = options.form;
  const std::optional<Var> skey = options.sentinel_key;
  const std::optional<Var> sval = options.sentinel_value;
  const std::optional<Var> bvar = options.bias;
  return t->push(std::move(out), needs, [=] {
    const Matrix& g = t->grad(out_id);
    const Matrix& qv = t->value(queries.id);
    const Matrix& kv = t->value(keys.id);
    const Matrix& vv = t->value(values.id);
    const Matrix* ksv = skey ? &t->value(skey->id) : nullptr;
    const Matrix* vsv = sval ? &t->value(sval->id) : nullptr;
    const bool gq_on = t->needs_grad(queries.id);
    const bool gk_on = t->needs_grad(keys.id);
    const bool gv_on = t->needs_grad(values.id);
    const bool gks_on = skey && t->needs_grad(skey->id);
    const bool gvs_on = sval && t->needs_grad(sval->id);
    const bool gb_on = bvar && t->needs_grad(bvar->id);
    Matrix* gq = gq_on ? &t->grad(queries.id) : nullptr;
    Matrix* gk = gk_on ? &t->grad(keys.id) : nullptr;
    Matrix* gv = gv_on ? &t->grad(values.id) : nullptr;
    Matrix* gks = gks_on ? &t->grad(skey->id) : nullptr;
    Matrix* gvs = gvs_on ? &t->grad(sval->id) : nullptr;
    Matrix* gb = gb_on ? &t->grad(bvar->id) : nullptr;
    const AttentionLayout& l = *layout;
    const bool has_sentinel = skey.has_value();
    const bool dropped = !cache->mask.empty();
    std::vector<Real> galpha;
    for (Index qi = 0; qi < l.query_count; ++qi) {
      const auto begin = static_cast<std::size_t>(l.offsets[static_cast<std::size_t>(qi)]);
      const auto end = static_cast<std::size_t>(l.offsets[static_cast<std::size_t>(qi) + 1]);
      const auto go = g.row(qi);
      galpha.resize(end - begin);
      for (std::size_t e = begin; e < end; ++e) {
        const Real m = dropped ? cache->mask[e] : 1.0;
        const auto vrow = vv.row(l.keys[e]);
        galpha[e - begin] = m * go.dot(vrow);
        if (gv) gv->row(l.keys[e]) += (cache->alpha[e] * m) * go;
      }
      Real galpha_s = 0;
      Real alpha_s = 0;
      if (has_sentinel) {
        const auto sq = static_cast<std::size_t>(qi);
        const Real m = dropped ? cache->mask_s[sq] : 1.0;
        alpha_s = cache->alpha_s[sq];
        galpha_s = m * go.dot(vsv->row(qi));
        if (gvs) gvs->row(qi) += (alpha_s * m) * go;
      }

      Real ge_s = 0;
      if (form == SentinelForm::exponential) {
        Real dot = alpha_s * galpha_s;
        for (std::size_t e = begin; e < end; ++e) dot += cache->alpha[e] * galpha[e - begin];
        for (std::size_t e = begin; e < end; ++e) galpha[e - begin] = cache->alpha[e] * (galpha[e - begin] - dot);
        ge_s = alpha_s * (galpha_s - dot);
      } else {
        // alpha_s = 1 - sum alpha_j, so each alpha_j carries (g_j - g_s).
        Real dot = 0;
        for (std::size_t e = begin; e < end; ++e) {
          galpha[e - begin] -= galpha_s;
          dot += cache->alpha[e] * galpha[e - begin];
        }
        for (std::size_t e = begin; e < end; ++e) galpha[e - begin] = cache->alpha[e] * (galpha[e - begin] - dot);
        ge_s = -dot / cache->denominator[static_cast<std::size_t>(qi)];
      }

      const auto qrow = qv.row(qi);
      for (std::size_t e = begin; e < end; ++e) {
        const Real ge = galpha[e - begin];
        if (ge == 0) continue;
        if (gq) gq->row(qi) += (scale * ge) * kv.row(l.keys[e]);
        if (gk) gk->row(l.keys[e]) += (scale * ge) * qrow;
        if (gb) gb->data()[l.bias_slots[e]] += ge;
      }
      if (has_sentinel && ge_s != 0) {
        if (gq) gq->row(qi) += (scale * ge_s) * ksv->row(qi);
        if (gks) gks->row(qi) += (scale * ge_s) * qrow;
      }
    }
  });
}

// ---------------------------------------------------------------- spatial

SpatialStructure SpatialStructure::build(const RoadGraph& g, const TransitionPair& pair, int K, int range) {
  SpatialStructure s;
  s.nodes = g.node_count();
  s.K = K;
  s.range = range;
  for (Index i = 0; i < s.nodes; ++i) {
    s.inflow.push_back(neighborhood(g, i, FlowDirection::inflow, range));
    s.outflow.push_back(neighborhood(g, i, FlowDirection::outflow, range));
    s.both.push_back(neighborhood(g, i, FlowDirection::both, range));
  }
  s.incoming_powers = transition_powers(pair, FlowDirection::inflow, K);
  s.outgoing_powers = transition_powers(pair, FlowDirection::outflow, K);
  return s;
}

const std::vector<std::vector<Index>>& SpatialStructure::neighbors(FlowDirection d) const {
  switch (d) {
    case FlowDirection::inflow:
      return inflow;
    case FlowDirection::outflow:
      return outflow;
    case FlowDirection::both:
      return both;
  }
  return both;
}

const std::vector<Matrix>& SpatialStructure::powers(FlowDirection d) const {
  if (d == FlowDirection::both) throw ContractError("SpatialStructure::powers: direction must be inflow or outflow");
  return d == FlowDirection::inflow ? incoming_powers : outgoing_powers;
}

SpatialAttentionLayerParams make_spatial_layer(ParameterSet& params, const std::string& prefix, Index d_model,
                                               int heads, int K, Rng& rng, Real prior_lo, Real prior_hi) {
  if (heads < 1 || d_model % heads != 0) {
    throw ContractError("spatial attention: d_model " + std::to_string(d_model) + " not divisible by " +
                        std::to_string(heads) + " heads");
  }
  const Index dh = d_model / heads;
  SpatialAttentionLayerParams layer;
  for (int h = 1; h <= heads; ++h) {
    const std::string p = prefix + ".head" + std::to_string(h) + ".";
    SpatialHeadParams head;
    head.query = params.add(p + "query", xavier_init(d_model, dh, rng));
    head.key = params.add(p + "key", xavier_init(d_model, dh, rng));
    head.sentinel_key = params.add(p + "sentinel_key", xavier_init(d_model, dh, rng));
    head.value = params.add(p + "value", xavier_init(d_model, dh, rng));
    head.sentinel_value = params.add(p + "sentinel_value", xavier_init(d_model, dh, rng));
    Matrix beta(1, K + 1);
    for (Index k = 0; k <= K; ++k) beta(0, k) = rng.uniform(prior_lo, prior_hi);
    head.prior = params.add(p + "prior", std::move(beta));
    head.direction = head_direction(h);
    layer.heads.push_back(head);
  }
  layer.output = params.add(prefix + ".output", xavier_init(d_model, d_model, rng));
  return layer;
}

namespace {

std::shared_ptr<const AttentionLayout> spatial_layout(const std::vector<std::vector<Index>>& neighbors, Index nodes,
                                                      Index blocks) {
  auto lay = std::make_shared<AttentionLayout>();
  lay->query_count = blocks * nodes;
  lay->key_count = blocks * nodes;
  lay->offsets.reserve(static_cast<std::size_t>(lay->query_count + 1));
  lay->offsets.push_back(0);
  for (Index b = 0; b < blocks; ++b) {
    for (Index i = 0; i < nodes; ++i) {
      for (Index j : neighbors[static_cast<std::size_t>(i)]) {
        lay->keys.push_back(b * nodes + j);
        lay->bias_slots.push_back(i * nodes + j);
      }
      lay->offsets.push_back(static_cast<Index>(lay->keys.size()));
    }
  }
  return lay;
}

}  // namespace

Var spatial_attention(ParamBinder& bind, const SpatialAttentionLayerParams& layer, const SpatialStructure& structure,
                      Var z, const SpatialSettings& settings, Rng* rng, std::vector<AttentionRecord>* records,
                      int layer_index) {
  const Index n = structure.nodes;
  const int heads = static_cast<int>(layer.heads.size());
  if (heads < 1) throw ContractError("spatial attention: no heads");
  if (settings.directed && heads % 2 != 0) {
    throw ContractError("spatial attention: directed heads need an even head count, got " + std::to_string(heads));
  }
  const Index d_model = z.cols();
  if (d_model % heads != 0) {
    throw ContractError("spatial attention: d_model " + std::to_string(d_model) + " not divisible by " +
                        std::to_string(heads) + " heads");
  }
  if (n < 1 || z.rows() % n != 0) {
    throw ShapeError("spatial attention: " + std::to_string(z.rows()) + " rows is not a multiple of " +
                     std::to_string(n) + " nodes");
  }
  const Index blocks = z.rows() / n;
  const Index dh = d_model / heads;
  const Real scale = 1.0 / std::sqrt(static_cast<Real>(dh));

  std::shared_ptr<const AttentionLayout> layouts[3];
  auto layout_for = [&](FlowDirection d) {
    auto& slot = layouts[static_cast<int>(d)];
    if (!slot) slot = spatial_layout(structure.neighbors(d), n, blocks);
    return slot;
  };

  std::vector<Var> outputs;
  for (int h = 0; h < heads; ++h) {
    const SpatialHeadParams& hp = layer.heads[static_cast<std::size_t>(h)];
    const FlowDirection dir = settings.directed ? hp.direction : FlowDirection::both;
    Var q = ad::matmul(z, bind(hp.query));
    Var k = ad::matmul(z, bind(hp.key));
    Var v = ad::matmul(z, bind(hp.value));
    AttendOptions opt;
    opt.scale = scale;
    opt.form = settings.form;
    opt.weight_dropout = settings.weight_dropout;
    opt.rng = rng;
    if (settings.use_sentinel) {
      opt.sentinel_key = ad::matmul(z, bind(hp.sentinel_key));
      opt.sentinel_value = ad::matmul(z, bind(hp.sentinel_value));
    } else {
      opt.form = SentinelForm::exponential;
    }
    if (settings.use_prior) {
      const auto& powers = structure.powers(hp.direction);
      std::vector<const Matrix*> basis;
      for (const auto& p : powers) basis.push_back(&p);
      opt.bias = ad::linear_combination(bind(hp.prior), basis);
    }
    auto lay = layout_for(dir);
    AttentionWeights weights;
    outputs.push_back(attend(q, k, v, lay, opt, records ? &weights : nullptr));
    if (records) {
      for (Index qi = 0; qi < lay->query_count; ++qi) {
        AttentionRecord r;
        r.layer = layer_index;
        r.head = h + 1;
        r.direction = to_string(dir);
        r.block = qi / n;
        r.query = qi % n;
        const auto b = static_cast<std::size_t>(lay->offsets[static_cast<std::size_t>(qi)]);
        const auto e = static_cast<std::size_t>(lay->offsets[static_cast<std::size_t>(qi) + 1]);
        for (std::size_t x = b; x < e; ++x) {
          r.keys.push_back(lay->keys[x] % n);
          r.weights.push_back(weights.weights[x]);
        }
        r.sentinel_weight = settings.use_sentinel ? weights.sentinel[static_cast<std::size_t>(qi)] : 0.0;
        records->push_back(std::move(r));
      }
    }
  }
  return ad::matmul(ad::concat_cols(outputs), bind(layer.output));
}

// --------------------------------------------------------------- temporal

TemporalAttentionParams make_temporal_layer(ParameterSet& params, const std::string& prefix, Index d_model, int heads,
                                            TemporalMasking masking, TemporalMode mode, Rng& rng) {
  if (heads < 1 || d_model % heads != 0) {
    throw ContractError("temporal attention: d_model " + std::to_string(d_model) + " not divisible by " +
                        std::to_string(heads) + " heads");
  }
  if (masking == TemporalMasking::causal && mode == TemporalMode::encoder_decoder) {
    throw ContractError("temporal attention: causal masking applies only to self attention");
  }
  const Index dh = d_model / heads;
  TemporalAttentionParams layer;
  layer.masking = masking;
  layer.mode = mode;
  for (int h = 1; h <= heads; ++h) {
    const std::string p = prefix + ".head" + std::to_string(h) + ".";
    TemporalHeadParams head;
    head.query = params.add(p + "query", xavier_init(d_model, dh, rng));
    head.key = params.add(p + "key", xavier_init(d_model, dh, rng));
    head.value = params.add(p + "value", xavier_init(d_model, dh, rng));
    layer.heads.push_back(head);
  }
  layer.output = params.add(prefix + ".output", xavier_init(d_model, d_model, rng));
  return layer;
}

std::vector<std::vector<bool>> causal_mask(Index steps) {
  if (steps < 1) throw ContractError("causal_mask: steps must be >= 1");
  std::vector<std::vector<bool>> mask(static_cast<std::size_t>(steps), std::vector<bool>(static_cast<std::size_t>(steps)));
  for (Index q = 0; q < steps; ++q) {
    for (Index k = 0; k < steps; ++k) mask[static_cast<std::size_t>(q)][static_cast<std::size_t>(k)] = k <= q;
  }
  return mask;
}

Var temporal_attention(ParamBinder& bind, const TemporalAttentionParams& layer, Var queries, SequenceShape qs,
                       Var key_source, SequenceShape ks, Real weight_dropout, Rng* rng,
                       std::vector<AttentionRecord>* records, int layer_index) {
  if (layer.mode == TemporalMode::encoder_decoder && layer.masking == TemporalMasking::causal) {
    throw ContractError("temporal attention: causal masking applies only to self attention");
  }
  if (layer.mode == TemporalMode::self &&
      (key_source.id != queries.id || ks.batch != qs.batch || ks.steps != qs.steps || ks.nodes != qs.nodes)) {
    throw ContractError("temporal attention: self mode requires key_source == queries");
  }
  if (qs.batch != ks.batch || qs.nodes != ks.nodes) throw ShapeError("temporal attention: batch/node counts differ");
  if (queries.rows() != qs.rows() || key_source.rows() != ks.rows()) {
    throw ShapeError("temporal attention: row counts do not match sequence shapes");
  }
  const int heads = static_cast<int>(layer.heads.size());
  const Index d_model = queries.cols();
  if (heads < 1 || d_model % heads != 0) throw ContractError("temporal attention: d_model not divisible by heads");
  const Real scale = 1.0 / std::sqrt(static_cast<Real>(d_model / heads));
  const bool causal = layer.masking == TemporalMasking::causal;

  auto lay = std::make_shared<AttentionLayout>();
  lay->query_count = qs.rows();
  lay->key_count = ks.rows();
  lay->offsets.reserve(static_cast<std::size_t>(qs.rows() + 1));
  lay->offsets.push_back(0);
  for (Index b = 0; b < qs.batch; ++b) {
    for (Index tq = 0; tq < qs.steps; ++tq) {
      for (Index n = 0; n < qs.nodes; ++n) {
        const Index last = causal ? tq : ks.steps - 1;
        for (Index tk = 0; tk <= last; ++tk) lay->keys.push_back(ks.row(b, tk, n));
        lay->offsets.push_back(static_cast<Index>(lay->keys.size()));
      }
    }
  }

  const char* direction = layer.mode == TemporalMode::encoder_decoder ? "encoder_decoder" : (causal ? "masked" : "temporal");
  std::vector<Var> outputs;
  for (int h = 0; h < heads; ++h) {
    const auto& hp = layer.heads[static_cast<std::size_t>(h)];
    Var q = ad::matmul(queries, bind(hp.query));
    Var k = ad::matmul(key_source, bind(hp.key));
    Var v = ad::matmul(key_source, bind(hp.value));
    AttendOptions opt;
    opt.scale = scale;
    opt.weight_dropout = weight_dropout;
    opt.rng = rng;
    AttentionWeights weights;
    outputs.push_back(attend(q, k, v, lay, opt, records ? &weights : nullptr));
    if (records) {
      for (Index b = 0; b < qs.batch; ++b) {
        for (Index tq = 0; tq < qs.steps; ++tq) {
          for (Index n = 0; n < qs.nodes; ++n) {
            const Index qi = qs.row(b, tq, n);
            AttentionRecord r;
            r.layer = layer_index;
            r.head = h + 1;
            r.direction = direction;
            r.block = n;
            r.query = tq;
            const auto bgn = static_cast<std::size_t>(lay->offsets[static_cast<std::size_t>(qi)]);
            const auto end = static_cast<std::size_t>(lay->offsets[static_cast<std::size_t>(qi) + 1]);
            for (std::size_t x = bgn; x < end; ++x) {
              r.keys.push_back(static_cast<Index>(x - bgn));
              r.weights.push_back(weights.weights[x]);
            }
            records->push_back(std::move(r));
          }
        }
      }
    }
  }
  return ad::matmul(ad::concat_cols(outputs), bind(layer.output));
}

}  // namespace stgrat
