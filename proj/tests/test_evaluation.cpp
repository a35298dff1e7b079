#include <doctest.h>

#include <cmath>
#include <functional>
#include <map>
#include <sstream>

#include "stgrat/evaluation.hpp"
#include "test_util.hpp"

using namespace stgrat;

namespace {

Real naive_segment_cost(const std::vector<Real>& x, Index a, Index b) {
  Real mean = 0;
  for (Index i = a; i < b; ++i) mean += x[static_cast<std::size_t>(i)];
  mean /= static_cast<Real>(b - a);
  Real c = 0;
  for (Index i = a; i < b; ++i) c += (x[static_cast<std::size_t>(i)] - mean) * (x[static_cast<std::size_t>(i)] - mean);
  return c;
}

// Enumerates every admissible breakpoint set and returns the lowest total cost.
Real exhaustive_optimum(const std::vector<Real>& x, const PeltOptions& o) {
  const auto n = static_cast<Index>(x.size());
  Real best = std::numeric_limits<Real>::infinity();
  std::function<void(Index, Real)> walk = [&](Index start, Real acc) {
    if (n - start >= o.min_size) best = std::min(best, acc + naive_segment_cost(x, start, n));
    for (Index b = start + o.min_size; b + o.min_size <= n; ++b) {
      if (b % o.jump != 0) continue;
      walk(b, acc + naive_segment_cost(x, start, b) + o.penalty);
    }
  };
  walk(0, 0);
  return best;
}

Predictions manual_predictions(Index batch, Index steps, Index nodes) {
  Predictions p;
  p.shape = {batch, steps, nodes};
  p.predicted = Matrix::Zero(p.shape.rows(), 1);
  p.truth = Matrix::Zero(p.shape.rows(), 1);
  p.mask = Matrix::Ones(p.shape.rows(), 1);
  for (Index b = 0; b < batch; ++b) {
    for (Index t = 0; t < steps; ++t) {
      p.series_rows.push_back(b + t);
      p.timestamps.push_back(1483228800 + 300 * (b + t));
    }
  }
  return p;
}

SpeedTable table_of(const std::vector<std::vector<Real>>& columns) {
  SpeedTable t;
  const auto steps = static_cast<Index>(columns[0].size());
  t.speeds.resize(steps, static_cast<Index>(columns.size()));
  for (std::size_t n = 0; n < columns.size(); ++n) {
    t.node_ids.push_back("n" + std::to_string(n));
    for (Index s = 0; s < steps; ++s) t.speeds(s, static_cast<Index>(n)) = columns[n][static_cast<std::size_t>(s)];
  }
  for (Index s = 0; s < steps; ++s) t.timestamps.push_back(300 * s);
  t.observed = Matrix::Ones(steps, static_cast<Index>(columns.size()));
  return t;
}

}  // namespace

TEST_CASE("metric hand example") {
  Matrix pred(3, 1), truth(3, 1);
  pred << 1, 2, 3;
  truth << 1, 3, 5;
  const MetricValues m = metrics(pred, truth, Matrix::Ones(3, 1));
  CHECK(m.mae == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(m.rmse == doctest::Approx(std::sqrt(5.0 / 3.0)).epsilon(1e-15));
  CHECK(m.rmse == doctest::Approx(1.2910).epsilon(1e-4));
  CHECK(m.mape == doctest::Approx(100.0 * (0 + 1.0 / 3 + 2.0 / 5) / 3).epsilon(1e-15));
  CHECK(m.mape == doctest::Approx(24.44).epsilon(1e-3));
  CHECK(m.count == 3);

  const MetricValues perfect = metrics(truth, truth, Matrix::Ones(3, 1));
  CHECK(perfect.mae == 0);
  CHECK(perfect.rmse == 0);
  CHECK(perfect.mape == 0);

  Matrix zero_truth = truth;
  zero_truth(0, 0) = 0;
  const MetricValues z = metrics(pred, zero_truth, Matrix::Ones(3, 1));
  CHECK(z.count == 3);
  CHECK(z.mape_count == 2);
  CHECK(z.mae == doctest::Approx(4.0 / 3));
  CHECK(z.mape == doctest::Approx(100.0 * (1.0 / 3 + 2.0 / 5) / 2));

  CHECK_THROWS_AS(metrics(pred, truth, Matrix::Zero(3, 1)), ContractError);
  CHECK_THROWS_AS(metrics(pred, Matrix::Zero(2, 1), Matrix::Ones(2, 1)), ShapeError);
}

TEST_CASE("metrics agree with a loop oracle") {
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const Index n = 1 + static_cast<Index>(rng.below(10000));
    Matrix pred(n, 1), truth(n, 1), mask(n, 1);
    for (Index i = 0; i < n; ++i) {
      pred(i, 0) = rng.uniform(0, 80);
      truth(i, 0) = rng.uniform(0, 1) < 0.05 ? 0 : rng.uniform(0, 80);
      mask(i, 0) = rng.uniform(0, 1) < 0.8 ? 1 : 0;
    }
    mask(0, 0) = 1;
    Real a = 0, s = 0, pc = 0;
    Index c = 0, pcnt = 0;
    for (Index i = 0; i < n; ++i) {
      if (mask(i, 0) == 0) continue;
      const Real d = pred(i, 0) - truth(i, 0);
      a += std::fabs(d);
      s += d * d;
      ++c;
      if (truth(i, 0) != 0) {
        pc += std::fabs(d / truth(i, 0));
        ++pcnt;
      }
    }
    const MetricValues m = metrics(pred, truth, mask);
    CHECK(std::abs(m.mae - a / c) < 1e-12);
    CHECK(std::abs(m.rmse - std::sqrt(s / c)) < 1e-12);
    if (pcnt > 0) CHECK(std::abs(m.mape - 100 * pc / pcnt) < 1e-12 * std::max<Real>(1, m.mape));
  }
}

TEST_CASE("horizon report") {
  Predictions p = manual_predictions(2, 12, 2);
  for (Index b = 0; b < 2; ++b) {
    for (Index t = 0; t < 12; ++t) {
      for (Index n = 0; n < 2; ++n) {
        const Index r = p.shape.row(b, t, n);
        p.truth(r, 0) = 50;
        p.predicted(r, 0) = 50 + static_cast<Real>(t + 1);
      }
    }
  }
  const MetricReport r = horizon_report(p);
  REQUIRE(r.horizons.size() == 4);
  CHECK(r.find("3")->values.mae == doctest::Approx(3));
  CHECK(r.find("6")->values.mae == doctest::Approx(6));
  CHECK(r.find("12")->values.mae == doctest::Approx(12));
  CHECK(r.find("12")->values.count == 4);
  CHECK(r.find("avg")->values.mae == doctest::Approx(6.5));
  CHECK(r.find("avg")->values.count == 48);
  CHECK(r.find("24") == nullptr);

  std::ostringstream csv;
  write_metric_csv({r}, csv);
  CHECK(csv.str().starts_with("slice,horizon,metric,value,count\nall,3,mae,3,4\n"));
}

TEST_CASE("persistence baseline repeats the last observation") {
  SpeedTable t = table_of({{10, 11, 12, 13, 14, 15, 16}, {5, 6, 7, 8, 9, 10, 11}});
  t.observed(2, 1) = 0;
  NormalizationStats stats;
  auto series = std::make_shared<const NormalizedSeries>(normalize(t, stats));
  const WindowedDataset d = make_windows(series, 3, 2);
  const Predictions p = persistence_baseline(d);
  CHECK(p.shape.batch == 3);
  CHECK(p.predicted(p.shape.row(0, 0, 0), 0) == 12);
  CHECK(p.predicted(p.shape.row(0, 1, 0), 0) == 12);
  CHECK(p.truth(p.shape.row(0, 1, 0), 0) == 14);
  CHECK(p.predicted(p.shape.row(0, 0, 1), 0) == 6);
  CHECK(p.predicted(p.shape.row(2, 1, 1), 0) == 9);
  CHECK(p.series_rows[static_cast<std::size_t>(p.step_index(1, 1))] == 5);
  CHECK(horizon_report(p, "all", {1, 2}).find("1")->values.mae == doctest::Approx(7.0 / 6));
}

TEST_CASE("time range slicing") {
  // One window per 5-minute step over one day, single step, single node.
  const Index steps = 288;
  Predictions p = manual_predictions(steps, 1, 1);
  Real morning_abs = 0, afternoon_abs = 0;
  Index morning = 0, afternoon = 0;
  for (Index b = 0; b < steps; ++b) {
    const int hour = static_cast<int>(b / 12);
    p.truth(b, 0) = 50;
    p.predicted(b, 0) = hour < 12 ? 49 : 50 + 0.1 * hour;
    if (hour < 12) {
      morning_abs += 1;
      ++morning;
    } else {
      afternoon_abs += 0.1 * hour;
      ++afternoon;
    }
  }
  const auto reports = time_range_metrics(p, parse_hour_ranges("0-12, 12-24"), {1});
  REQUIRE(reports.size() == 2);
  CHECK(reports[0].slice == "0-12");
  CHECK(reports[0].find("avg")->values.count == morning);
  CHECK(reports[0].find("avg")->values.mae == doctest::Approx(morning_abs / morning));
  CHECK(reports[1].find("avg")->values.mae == doctest::Approx(afternoon_abs / afternoon));

  const MetricValues whole = horizon_report(p, "all", {1}).find("avg")->values;
  const auto one = time_range_metrics(p, {{0, 24}}, {1});
  CHECK(one[0].find("avg")->values.mae == whole.mae);

  const auto four = time_range_metrics(p, parse_hour_ranges("0-6,6-12,12-18,18-24"), {1});
  CHECK(four.size() == 4);
  Real weighted = 0;
  Index total = 0;
  for (const auto& r : four) {
    weighted += r.find("avg")->values.mae * static_cast<Real>(r.find("avg")->values.count);
    total += r.find("avg")->values.count;
  }
  CHECK(total == whole.count);
  CHECK(std::abs(weighted / static_cast<Real>(total) - whole.mae) < 1e-9);

  Predictions seven = manual_predictions(3, 1, 1);
  for (auto& ts : seven.timestamps) ts = 1483228800 + 7 * 3600;
  const auto split = time_range_metrics(seven, {{0, 6}, {6, 12}}, {1});
  CHECK(split[0].find("avg")->values.count == 0);
  CHECK(split[1].find("avg")->values.count == 3);

  CHECK_THROWS_AS(time_range_metrics(p, {{0, 10}, {8, 12}}), ContractError);
  CHECK_THROWS_AS(time_range_metrics(p, {{5, 5}}), ContractError);
  CHECK_THROWS_AS(parse_hour_ranges("morning"), ContractError);
}

TEST_CASE("pelt examples") {
  CHECK(pelt_changepoints(std::vector<Real>(30, 4.0)).empty());
  std::vector<Real> step(15, 0.0);
  step.resize(30, 10.0);
  CHECK(pelt_changepoints(step) == std::vector<Index>{15});
  CHECK_THROWS_AS(pelt_changepoints(std::vector<Real>(11, 1.0)), ContractError);
  const PeltOptions defaults;
  CHECK(defaults.penalty == 10);
  CHECK(defaults.jump == 1);
  CHECK(defaults.min_size == 6);
}

TEST_CASE("pelt equals the exhaustive optimum") {
  Rng rng(23);
  int cases = 0;
  for (int trial = 0; trial < 400; ++trial) {
    PeltOptions o;
    o.min_size = trial < 200 ? 6 : 1 + static_cast<Index>(rng.below(6));
    o.penalty = trial < 200 ? 10 : rng.uniform(0, 30);
    o.jump = trial % 5 == 4 ? 1 + static_cast<Index>(rng.below(3)) : 1;
    const Index n = 2 * o.min_size + static_cast<Index>(rng.below(static_cast<std::uint64_t>(31 - 2 * o.min_size)));
    std::vector<Real> x(static_cast<std::size_t>(n));
    Real level = rng.uniform(0, 10);
    for (auto& v : x) {
      if (rng.uniform(0, 1) < 0.1) level = rng.uniform(0, 10);
      v = level + rng.normal() * rng.uniform(0.1, 3);
    }
    const std::vector<Index> b = pelt_changepoints(x, o);
    Index prev = 0;
    for (Index k : b) {
      CHECK(k - prev >= o.min_size);
      CHECK(k % o.jump == 0);
      prev = k;
    }
    CHECK(n - prev >= o.min_size);
    const Real oracle = exhaustive_optimum(x, o);
    CHECK(std::abs(segmentation_cost(x, b, o.penalty) - oracle) < 1e-9 * std::max<Real>(1, oracle));
    ++cases;
  }
  CHECK(cases >= 100);
}

TEST_CASE("impeded intervals") {
  std::vector<Real> dip(30, 60.0);
  for (int i = 0; i < 12; ++i) dip.push_back(10.0);
  for (int i = 0; i < 30; ++i) dip.push_back(60.0);
  const SpeedTable t = table_of({dip, std::vector<Real>(72, 45.0)});
  const auto found = impeded_intervals(t, 0);
  REQUIRE(found.size() == 1);
  CHECK(found[0].start == 30);
  CHECK(found[0].end == 42);
  CHECK(found[0].min_speed == 10);
  CHECK(found[0].node_id == "n0");
  CHECK(impeded_intervals(t, 1).empty());
  CHECK(impeded_intervals(t).size() == 1);
  CHECK_THROWS_AS(impeded_intervals(t, 2), ContractError);

  Rng rng(4);
  std::vector<Real> noisy;
  for (int seg = 0; seg < 6; ++seg) {
    const Real level = seg % 2 == 0 ? 55 : 12;
    for (int i = 0; i < 20; ++i) noisy.push_back(level + rng.normal());
  }
  const auto many = impeded_intervals(table_of({noisy}), 0);
  CHECK(many.size() == 3);
  for (std::size_t i = 0; i < many.size(); ++i) {
    CHECK(many[i].end > many[i].start);
    CHECK(many[i].min_speed < 20);
    if (i > 0) CHECK(many[i].start >= many[i - 1].end);
  }
}

TEST_CASE("impeded metrics follow the interval mask") {
  Predictions p = manual_predictions(10, 2, 2);
  Rng rng(9);
  for (Index r = 0; r < p.shape.rows(); ++r) {
    p.truth(r, 0) = rng.uniform(10, 60);
    p.predicted(r, 0) = p.truth(r, 0) + rng.uniform(-5, 5);
  }
  p.mask(3, 0) = 0;
  // Node 0 impeded over series rows [0, 6); node 1 never.
  const std::vector<ImpededInterval> half{{"n0", 0, 0, 6, 5}};
  const MetricReport rep = impeded_metrics(p, half, {1, 2});
  CHECK(rep.slice == "impeded");
  Matrix hand = Matrix::Zero(p.shape.rows(), 1);
  for (Index b = 0; b < 10; ++b) {
    for (Index t = 0; t < 2; ++t) {
      if (b + t < 6) hand(p.shape.row(b, t, 0), 0) = p.mask(p.shape.row(b, t, 0), 0);
    }
  }
  const MetricValues expected = metrics(p.predicted, p.truth, hand);
  CHECK(rep.find("avg")->values.mae == doctest::Approx(expected.mae).epsilon(1e-14));
  CHECK(rep.find("avg")->values.count == expected.count);

  const std::vector<ImpededInterval> all{{"n0", 0, 0, 100, 5}, {"n1", 1, 0, 100, 5}};
  CHECK(impeded_metrics(p, all, {1}).find("avg")->values.mae ==
        doctest::Approx(horizon_report(p, "all", {1}).find("avg")->values.mae).epsilon(1e-14));
  CHECK_THROWS_AS(impeded_metrics(p, {{"n0", 0, 50, 60, 5}}), ContractError);
}

TEST_CASE("attention export") {
  ModelConfig m;
  m.layers = 2;
  m.d_model = 8;
  m.heads = 2;
  m.K = 1;
  m.range = 1;
  m.input_steps = 3;
  m.output_steps = 2;
  m.dropout = 0;
  m.embedding_dim = 0;
  RingScenario sc;
  sc.nodes = 5;
  sc.days = 1;
  const SpeedTable table = synthetic_ring_speeds(sc, 2);
  auto series = std::make_shared<const NormalizedSeries>(normalize_for_training(table, 3, 2, 0.7, NormalizationMethod::zscore));
  const WindowedDataset d = make_windows(series, 3, 2);
  const RoadGraph g = build_graph(table.node_ids, synthetic_ring_edges(sc));
  const GraphArtifacts art = GraphArtifacts::build(g, EmbeddingTable{0, table.node_ids, Matrix(5, 0)}, m);
  Rng rng(3);
  const ModelParams params = ModelParams::create(m, rng);
  const auto dir = test::scratch_dir("attention");
  const auto records = export_attention(m, params, art, make_batch(d, {10}), (dir / "att.csv").string());

  CHECK(static_cast<Index>(records.size()) == m.layers * m.heads * m.input_steps * 5);
  Index expected_rows = 0;
  for (int layer = 0; layer < m.layers; ++layer) {
    for (int h = 1; h <= m.heads; ++h) {
      const FlowDirection dir_h = h % 2 == 1 ? FlowDirection::inflow : FlowDirection::outflow;
      for (Index t = 0; t < m.input_steps; ++t) {
        for (Index n = 0; n < 5; ++n) expected_rows += static_cast<Index>(neighborhood(g, n, dir_h, m.range).size()) + 1;
      }
    }
  }
  std::istringstream in(test::read_text(dir / "att.csv"));
  std::string line;
  std::getline(in, line);
  CHECK(line == "layer,head,direction,time_step,query_node,key_node,weight");
  std::map<std::string, Real> sums;
  Index rows = 0, sentinels = 0;
  while (std::getline(in, line)) {
    ++rows;
    const auto cut = line.rfind(',');
    const auto key_cut = line.rfind(',', cut - 1);
    sums[line.substr(0, key_cut)] += std::stod(line.substr(cut + 1));
    sentinels += line.find(",__sentinel__,") != std::string::npos;
    CHECK(line.substr(0, 2) != "0,");
  }
  CHECK(rows == expected_rows);
  CHECK(sentinels == static_cast<Index>(records.size()));
  CHECK(sums.size() == records.size());
  for (const auto& [k, v] : sums) CHECK(std::abs(v - 1) < 1e-6);
  CHECK_THROWS(export_attention(m, params, art, make_batch(d, {1, 2}), (dir / "x.csv").string()));
}
