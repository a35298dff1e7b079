#include "stgrat/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <ostream>

#include "text_util.hpp"

namespace stgrat {

MetricValues metrics(const Matrix& pred, const Matrix& truth, const Matrix& mask) {
  if (pred.rows() != truth.rows() || pred.cols() != truth.cols() || mask.rows() != truth.rows() ||
      mask.cols() != truth.cols()) {
    throw ShapeError("metrics: shapes " + shape_string(pred) + ", " + shape_string(truth) + ", " + shape_string(mask) +
                     " differ");
  }
  MetricValues m;
  Real abs_sum = 0, sq_sum = 0, pct_sum = 0;
  for (Index i = 0; i < pred.size(); ++i) {
    if (mask.data()[i] == 0) continue;
    const Real y = truth.data()[i];
    const Real d = pred.data()[i] - y;
    abs_sum += std::abs(d);
    sq_sum += d * d;
    ++m.count;
    if (y != 0) {
      pct_sum += std::abs(d) / std::abs(y);
      ++m.mape_count;
    }
  }
  if (m.count == 0) throw ContractError("metrics: no observed entries");
  m.mae = abs_sum / static_cast<Real>(m.count);
  m.rmse = std::sqrt(sq_sum / static_cast<Real>(m.count));
  m.mape = m.mape_count > 0 ? 100.0 * pct_sum / static_cast<Real>(m.mape_count) : 0.0;
  return m;
}

const HorizonMetric* MetricReport::find(const std::string& horizon) const {
  for (const auto& h : horizons) {
    if (h.horizon == horizon) return &h;
  }
  return nullptr;
}

Predictions predict_dataset(const ModelConfig& config, const ModelParams& params, const GraphArtifacts& graph,
                            const WindowedDataset& data, Index batch_size) {
  if (data.empty()) throw ContractError("predict_dataset: empty dataset");
  tune_allocator();
  if (batch_size < 1) throw ContractError("predict_dataset: batch_size must be >= 1");
  const NormalizedSeries& s = *data.series;
  Predictions p;
  p.shape = {static_cast<Index>(data.size()), data.output_steps, s.nodes()};
  p.predicted.resize(p.shape.rows(), 1);
  p.truth.resize(p.shape.rows(), 1);
  p.mask.resize(p.shape.rows(), 1);
  Index row = 0;
  for (std::size_t begin = 0; begin < data.size(); begin += static_cast<std::size_t>(batch_size)) {
    std::vector<std::size_t> windows;
    for (std::size_t w = begin; w < std::min(data.size(), begin + static_cast<std::size_t>(batch_size)); ++w) {
      windows.push_back(w);
    }
    const SequenceBatch batch = make_batch(data, windows);
    const Matrix y = forecast_normalized(config, params, graph, batch);
    const Index rows = y.rows();
    for (Index i = 0; i < rows; ++i) p.predicted(row + i, 0) = s.stats.denormalize(y(i, 0));
    p.truth.middleRows(row, rows) = batch.targets;
    p.mask.middleRows(row, rows) = batch.target_mask;
    row += rows;
    for (Index r : batch.target_rows) {
      p.series_rows.push_back(r);
      p.timestamps.push_back(s.timestamps[static_cast<std::size_t>(r)]);
    }
  }
  return p;
}

Predictions persistence_baseline(const WindowedDataset& data) {
  if (data.empty()) throw ContractError("persistence_baseline: empty dataset");
  const NormalizedSeries& s = *data.series;
  Predictions p;
  p.shape = {static_cast<Index>(data.size()), data.output_steps, s.nodes()};
  p.predicted.resize(p.shape.rows(), 1);
  p.truth.resize(p.shape.rows(), 1);
  p.mask.resize(p.shape.rows(), 1);
  for (std::size_t w = 0; w < data.size(); ++w) {
    const auto b = static_cast<Index>(w);
    const Index last = data.starts[w] + data.input_steps - 1;
    for (Index n = 0; n < s.nodes(); ++n) {
      // Last observed value, searching back from the end of the input window.
      Real value = 0;
      for (Index r = last; r >= 0; --r) {
        if (s.observed(r, n) != 0) {
          value = s.raw(r, n);
          break;
        }
      }
      for (Index t = 0; t < data.output_steps; ++t) {
        const Index row = p.shape.row(b, t, n);
        const Index src = data.target_row(w, t);
        p.predicted(row, 0) = value;
        p.truth(row, 0) = s.raw(src, n);
        p.mask(row, 0) = s.observed(src, n);
      }
    }
    for (Index t = 0; t < data.output_steps; ++t) {
      const Index src = data.target_row(w, t);
      p.series_rows.push_back(src);
      p.timestamps.push_back(s.timestamps[static_cast<std::size_t>(src)]);
    }
  }
  return p;
}

namespace {

HorizonMetric horizon_metric(const Predictions& p, const std::string& label, const Matrix& mask) {
  HorizonMetric h;
  h.horizon = label;
  if (mask.sum() > 0) h.values = metrics(p.predicted, p.truth, mask);
  return h;
}

}  // namespace

MetricReport horizon_report(const Predictions& p, const std::string& slice, const std::vector<int>& horizons,
                            const Matrix& selection) {
  if (selection.size() != 0 && (selection.rows() != p.mask.rows() || selection.cols() != 1)) {
    throw ShapeError("horizon_report: selection " + shape_string(selection) + " does not match " + shape_string(p.mask));
  }
  Matrix base = (p.mask.array() != 0.0).cast<Real>().matrix();
  if (selection.size() != 0) base = base.cwiseProduct((selection.array() != 0.0).cast<Real>().matrix());
  MetricReport report;
  report.slice = slice;
  for (int h : horizons) {
    if (h < 1 || h > p.shape.steps) continue;
    Matrix mask = Matrix::Zero(base.rows(), 1);
    for (Index b = 0; b < p.shape.batch; ++b) {
      for (Index n = 0; n < p.shape.nodes; ++n) {
        const Index r = p.shape.row(b, h - 1, n);
        mask(r, 0) = base(r, 0);
      }
    }
    report.horizons.push_back(horizon_metric(p, std::to_string(h), mask));
  }
  report.horizons.push_back(horizon_metric(p, "avg", base));
  return report;
}

std::vector<HourRange> parse_hour_ranges(const std::string& ranges_text) {
  std::vector<HourRange> ranges;
  for (const auto& part : text::split(ranges_text, ',')) {
    const auto bounds = text::split(text::trim(part), '-');
    std::optional<long long> lo, hi;
    if (bounds.size() == 2) {
      lo = text::parse_int(text::trim(bounds[0]));
      hi = text::parse_int(text::trim(bounds[1]));
    }
    if (!lo || !hi) throw ContractError("time ranges: cannot parse '" + part + "' (expected start-end hours)");
    ranges.emplace_back(static_cast<int>(*lo), static_cast<int>(*hi));
  }
  if (ranges.empty()) throw ContractError("time ranges: none given");
  return ranges;
}

std::vector<MetricReport> time_range_metrics(const Predictions& p, const std::vector<HourRange>& ranges,
                                             const std::vector<int>& horizons) {
  for (std::size_t i = 0; i < ranges.size(); ++i) {
    const auto [lo, hi] = ranges[i];
    if (lo < 0 || hi > 24 || lo >= hi) {
      throw ContractError("time ranges: invalid range " + std::to_string(lo) + "-" + std::to_string(hi));
    }
    for (std::size_t j = 0; j < i; ++j) {
      if (lo < ranges[j].second && ranges[j].first < hi) {
        throw ContractError("time ranges: " + std::to_string(lo) + "-" + std::to_string(hi) + " overlaps " +
                            std::to_string(ranges[j].first) + "-" + std::to_string(ranges[j].second));
      }
    }
  }
  std::vector<MetricReport> out;
  for (const auto& [lo, hi] : ranges) {
    Matrix sel = Matrix::Zero(p.mask.rows(), 1);
    for (Index b = 0; b < p.shape.batch; ++b) {
      for (Index t = 0; t < p.shape.steps; ++t) {
        const int hour = hour_of_day(p.timestamps[static_cast<std::size_t>(p.step_index(b, t))]);
        if (hour < lo || hour >= hi) continue;
        for (Index n = 0; n < p.shape.nodes; ++n) sel(p.shape.row(b, t, n), 0) = 1;
      }
    }
    out.push_back(horizon_report(p, std::to_string(lo) + "-" + std::to_string(hi), horizons, sel));
  }
  return out;
}

std::vector<ImpededInterval> impeded_intervals(const SpeedTable& table, Index node, const PeltOptions& options,
                                               Real threshold) {
  if (node < 0 || node >= table.nodes()) throw ContractError("impeded_intervals: node " + std::to_string(node) + " out of range");
  const Index steps = table.steps();
  // Missing cells are forward filled (back filled at the start) for segmentation only.
  std::vector<Real> filled(static_cast<std::size_t>(steps), 0);
  Index first = -1;
  for (Index t = 0; t < steps; ++t) {
    if (table.observed(t, node) != 0) {
      first = t;
      break;
    }
  }
  if (first < 0) return {};
  Real last = table.speeds(first, node);
  for (Index t = 0; t < steps; ++t) {
    if (table.observed(t, node) != 0) last = table.speeds(t, node);
    filled[static_cast<std::size_t>(t)] = last;
  }
  std::vector<Index> bounds{0};
  if (steps >= 2 * options.min_size) {
    for (Index b : pelt_changepoints(filled, options)) bounds.push_back(b);
  }
  bounds.push_back(steps);

  std::vector<ImpededInterval> out;
  for (std::size_t i = 0; i + 1 < bounds.size(); ++i) {
    Real lowest = std::numeric_limits<Real>::infinity();
    for (Index t = bounds[i]; t < bounds[i + 1]; ++t) {
      if (table.observed(t, node) != 0) lowest = std::min(lowest, table.speeds(t, node));
    }
    if (lowest < threshold) {
      out.push_back({table.node_ids[static_cast<std::size_t>(node)], node, bounds[i], bounds[i + 1], lowest});
    }
  }
  return out;
}

std::vector<ImpededInterval> impeded_intervals(const SpeedTable& table, const PeltOptions& options, Real threshold) {
  std::vector<ImpededInterval> all;
  for (Index n = 0; n < table.nodes(); ++n) {
    auto part = impeded_intervals(table, n, options, threshold);
    all.insert(all.end(), part.begin(), part.end());
  }
  return all;
}

MetricReport impeded_metrics(const Predictions& p, const std::vector<ImpededInterval>& intervals,
                             const std::vector<int>& horizons) {
  std::vector<std::vector<std::pair<Index, Index>>> by_node(static_cast<std::size_t>(p.shape.nodes));
  for (const auto& iv : intervals) {
    if (iv.node < 0 || iv.node >= p.shape.nodes) throw ContractError("impeded_metrics: interval node out of range");
    by_node[static_cast<std::size_t>(iv.node)].emplace_back(iv.start, iv.end);
  }
  Matrix sel = Matrix::Zero(p.mask.rows(), 1);
  for (Index b = 0; b < p.shape.batch; ++b) {
    for (Index t = 0; t < p.shape.steps; ++t) {
      const Index src = p.series_rows[static_cast<std::size_t>(p.step_index(b, t))];
      for (Index n = 0; n < p.shape.nodes; ++n) {
        for (const auto& [lo, hi] : by_node[static_cast<std::size_t>(n)]) {
          if (src >= lo && src < hi) {
            sel(p.shape.row(b, t, n), 0) = 1;
            break;
          }
        }
      }
    }
  }
  if (sel.cwiseProduct(p.mask).sum() == 0) throw ContractError("impeded_metrics: no prediction target lies in an impeded interval");
  return horizon_report(p, "impeded", horizons, sel);
}

void write_metric_csv(const std::vector<MetricReport>& reports, std::ostream& out) {
  out << "slice,horizon,metric,value,count\n";
  for (const auto& r : reports) {
    for (const auto& h : r.horizons) {
      const auto& v = h.values;
      out << r.slice << ',' << h.horizon << ",mae," << text::format_real(v.mae) << ',' << v.count << '\n';
      out << r.slice << ',' << h.horizon << ",rmse," << text::format_real(v.rmse) << ',' << v.count << '\n';
      out << r.slice << ',' << h.horizon << ",mape," << text::format_real(v.mape) << ',' << v.mape_count << '\n';
    }
  }
}

void write_metric_csv(const std::vector<MetricReport>& reports, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write metric report " + path);
  write_metric_csv(reports, out);
  if (!out) throw std::runtime_error("failed writing metric report " + path);
}

void write_attention_csv(const std::vector<AttentionRecord>& records, const std::vector<std::string>& node_ids,
                         std::ostream& out) {
  out << "layer,head,direction,time_step,query_node,key_node,weight\n";
  for (const auto& r : records) {
    const std::string prefix = std::to_string(r.layer + 1) + "," + std::to_string(r.head) + "," + r.direction + "," +
                               std::to_string(r.block) + "," + node_ids.at(static_cast<std::size_t>(r.query)) + ",";
    for (std::size_t i = 0; i < r.keys.size(); ++i) {
      if (r.weights[i] == 0) continue;
      out << prefix << node_ids.at(static_cast<std::size_t>(r.keys[i])) << ',' << text::format_real(r.weights[i]) << '\n';
    }
    if (r.sentinel_weight != 0) out << prefix << "__sentinel__," << text::format_real(r.sentinel_weight) << '\n';
  }
}

std::vector<AttentionRecord> export_attention(const ModelConfig& config, const ModelParams& params,
                                              const GraphArtifacts& graph, const SequenceBatch& batch,
                                              const std::string& path) {
  if (batch.input_shape.batch != 1) throw ContractError("export_attention: expected a single window");
  std::vector<AttentionRecord> records;
  forecast_normalized(config, params, graph, batch, &records);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write attention file " + path);
  write_attention_csv(records, graph.graph.node_ids(), out);
  if (!out) throw std::runtime_error("failed writing attention file " + path);
  return records;
}

}  // namespace stgrat
