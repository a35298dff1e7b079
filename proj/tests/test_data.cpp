#include <doctest.h>

#include <sstream>

#include "stgrat/data.hpp"
#include "test_util.hpp"

using namespace stgrat;

namespace {

SpeedTable parse(const std::string& csv) {
  std::istringstream in(csv);
  return read_speed_table(in, "inline");
}

SpeedTable constant_table(Index steps, Index nodes, Real value = 50) {
  SpeedTable t;
  for (Index n = 0; n < nodes; ++n) t.node_ids.push_back("n" + std::to_string(n));
  for (Index s = 0; s < steps; ++s) t.timestamps.push_back(1'500'000'000 + 300 * s);
  t.speeds = Matrix::Constant(steps, nodes, value);
  t.observed = Matrix::Ones(steps, nodes);
  return t;
}

std::shared_ptr<const NormalizedSeries> series_of(const SpeedTable& t) {
  NormalizationStats stats;
  return std::make_shared<const NormalizedSeries>(normalize(t, stats));
}

}  // namespace

TEST_CASE("timestamps") {
  CHECK(parse_timestamp("1500000000") == 1500000000);
  CHECK(parse_timestamp("2017-01-01T00:00:00") == 1483228800);
  CHECK(parse_timestamp("2017-01-01 00:05") == 1483229100);
  CHECK(parse_timestamp("2017-01-01T00:05:00Z") == 1483229100);
  CHECK(format_timestamp(1483229100) == "2017-01-01T00:05:00");
  CHECK(parse_timestamp(format_timestamp(1234567890)) == 1234567890);
  CHECK_THROWS(parse_timestamp("yesterday"));
  CHECK(time_of_day(1483228800) == 0.0);
  CHECK(time_of_day(1483228800 + 43200) == doctest::Approx(0.5));
  CHECK(time_of_day(1483228800 + 86399) < 1.0);
  CHECK(hour_of_day(1483228800 + 3 * 3600 + 59) == 3);
}

TEST_CASE("speed table parsing") {
  const SpeedTable t = parse("timestamp,a,b\n2017-01-01T00:00:00,60,55.5\n2017-01-01T00:05:00,,40\n2017-01-01T00:10:00,61,0\n");
  CHECK(t.steps() == 3);
  CHECK(t.nodes() == 2);
  CHECK(t.node_ids == std::vector<std::string>{"a", "b"});
  CHECK(t.speeds(0, 1) == 55.5);
  CHECK(t.speeds(1, 0) == 0.0);
  CHECK(t.observed(1, 0) == 0.0);
  CHECK(t.observed(2, 1) == 1.0);
  CHECK_FALSE(t.irregular_spacing);

  try {
    parse("timestamp,a\n2017-01-01T00:00:00,1\n2017-01-01T00:05:00,2\n2017-01-01T00:05:00,3\n");
    FAIL("expected duplicate timestamp error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("row 4") != std::string::npos);
  }
  CHECK_THROWS(parse("timestamp,a,b\n2017-01-01T00:00:00,1\n"));
  CHECK_THROWS(parse("timestamp,a\nnoon,1\n"));
  CHECK_THROWS(parse("timestamp,a\n2017-01-01T00:00:00,fast\n"));
  CHECK(parse("timestamp,a\n0,1\n300,1\n400,1\n").irregular_spacing);

  const auto dir = test::scratch_dir("speeds");
  save_speed_table(t, (dir / "s.csv").string());
  const SpeedTable back = load_speed_table((dir / "s.csv").string());
  CHECK(back.speeds == t.speeds);
  CHECK(back.observed == t.observed);
  CHECK(back.timestamps == t.timestamps);
  CHECK_THROWS(load_speed_table((dir / "absent.csv").string()));
}

TEST_CASE("normalization") {
  SpeedTable t = constant_table(4, 1);
  t.speeds << 50, 70, 1000, 0;
  t.observed(3, 0) = 0;
  const NormalizationStats z = fit_normalization(t, 2, NormalizationMethod::zscore);
  CHECK(z.mean == doctest::Approx(60));
  CHECK(z.std == doctest::Approx(10));
  CHECK(z.normalize(60) == 0.0);
  const NormalizationStats full = fit_normalization(t, 4, NormalizationMethod::zscore);
  CHECK(full.mean != doctest::Approx(z.mean));

  const NormalizationStats m = fit_normalization(t, 2, NormalizationMethod::minmax);
  CHECK(m.normalize(50) == 0.0);
  CHECK(m.normalize(70) == 1.0);

  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    const Real x = rng.uniform(0, 120);
    CHECK(std::abs(z.denormalize(z.normalize(x)) - x) < 1e-9);
    CHECK(std::abs(m.denormalize(m.normalize(x)) - x) < 1e-9);
  }

  const NormalizedSeries s = normalize(t, z);
  CHECK(s.normalized(3, 0) == 0.0);
  CHECK(s.normalized(2, 0) == doctest::Approx(94.0));

  CHECK_THROWS(fit_normalization(constant_table(5, 2), 5, NormalizationMethod::zscore));
  CHECK_THROWS(fit_normalization(constant_table(5, 2), 5, NormalizationMethod::minmax));
}

TEST_CASE("statistics only see training rows") {
  SpeedTable t = constant_table(40, 2);
  for (Index s = 0; s < 40; ++s) t.speeds.row(s).setConstant(s < 22 ? 40.0 + s % 3 : 90.0);
  const Index rows = training_rows(40, 3, 3, 0.5);
  CHECK(rows == 17 - 1 + 6);
  const NormalizedSeries s = normalize_for_training(t, 3, 3, 0.5, NormalizationMethod::zscore);
  CHECK(s.stats.mean == doctest::Approx(fit_normalization(t, rows, NormalizationMethod::zscore).mean));
  CHECK(s.stats.mean < 42);
}

TEST_CASE("windowing") {
  CHECK(make_windows(series_of(constant_table(24, 2)), 12, 12).size() == 1);
  CHECK(make_windows(series_of(constant_table(26, 2)), 12, 12).size() == 3);
  CHECK_THROWS_AS(make_windows(series_of(constant_table(23, 2)), 12, 12), ContractError);
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const Index tin = 1 + static_cast<Index>(rng.below(6));
    const Index tout = 1 + static_cast<Index>(rng.below(6));
    const Index total = tin + tout + static_cast<Index>(rng.below(30));
    const WindowedDataset d = make_windows(series_of(constant_table(total, 1)), tin, tout);
    CHECK(static_cast<Index>(d.size()) == total - tin - tout + 1);
    for (std::size_t w = 0; w < d.size(); ++w) {
      CHECK(d.starts[w] == static_cast<Index>(w));
      CHECK(d.target_row(w, 0) == d.starts[w] + tin);
    }
  }
}

TEST_CASE("chronological split") {
  const WindowedDataset d = make_windows(series_of(constant_table(15, 1)), 3, 3);
  REQUIRE(d.size() == 10);
  const DatasetSplit s = chrono_split(d);
  CHECK(s.train.size() == 7);
  CHECK(s.validation.size() == 1);
  CHECK(s.test.size() == 2);
  const auto& ts = d.series->timestamps;
  CHECK(ts[static_cast<std::size_t>(s.train.starts.back())] < ts[static_cast<std::size_t>(s.validation.starts.front())]);
  CHECK(ts[static_cast<std::size_t>(s.validation.starts.back())] < ts[static_cast<std::size_t>(s.test.starts.front())]);
  CHECK_THROWS_AS(chrono_split(d, 0.5, 0.2, 0.2), ContractError);
  WindowedDataset empty = d;
  empty.starts.clear();
  CHECK_THROWS_AS(chrono_split(empty), ContractError);

  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const Index total = 10 + static_cast<Index>(rng.below(300));
    const WindowedDataset w = make_windows(series_of(constant_table(total, 1)), 2, 2);
    const DatasetSplit p = chrono_split(w, 0.7, 0.1, 0.2);
    CHECK(p.train.size() + p.validation.size() + p.test.size() == w.size());
    CHECK(training_rows(total, 2, 2, 0.7) == p.train.starts.back() + 4);
  }
}

TEST_CASE("batch assembly follows the observed mask") {
  SpeedTable t = constant_table(10, 3);
  for (Index s = 0; s < 10; ++s) {
    for (Index n = 0; n < 3; ++n) t.speeds(s, n) = 40 + s + 10 * n;
  }
  t.observed(6, 1) = 0;
  const NormalizationStats stats = fit_normalization(t, 10, NormalizationMethod::zscore);
  auto series = std::make_shared<const NormalizedSeries>(normalize(t, stats));
  const WindowedDataset d = make_windows(series, 4, 3);
  const SequenceBatch b = make_batch(d, {2, 0});
  CHECK(b.input_shape.rows() == 2 * 4 * 3);
  CHECK(b.inputs(b.input_shape.row(0, 1, 2), 0) == doctest::Approx(stats.normalize(40 + 3 + 20)));
  CHECK(b.inputs(b.input_shape.row(1, 0, 0), 1) == doctest::Approx(time_of_day(t.timestamps[0])));
  for (Index bb = 0; bb < 2; ++bb) {
    const Index start = bb == 0 ? 2 : 0;
    for (Index s = 0; s < 3; ++s) {
      for (Index n = 0; n < 3; ++n) {
        const Index r = b.target_shape.row(bb, s, n);
        const Index src = start + 4 + s;
        CHECK(b.target_mask(r, 0) == t.observed(src, n));
        CHECK(b.targets(r, 0) == (t.observed(src, n) != 0 ? t.speeds(src, n) : 0.0));
      }
    }
  }
  CHECK(b.target_rows == std::vector<Index>{6, 7, 8, 4, 5, 6});

  const SpeedTable window = constant_table(4, 3, 55);
  const SequenceBatch in = make_input_batch(window, stats, 5, 300);
  CHECK(in.target_shape.steps == 5);
  CHECK(in.target_time(0, 0) == doctest::Approx(time_of_day(window.timestamps.back() + 300)));
}

TEST_CASE("synthetic ring") {
  RingScenario sc;
  sc.nodes = 5;
  sc.days = 2;
  const SpeedTable a = synthetic_ring_speeds(sc, 1);
  CHECK(a.steps() == 2 * 288);
  CHECK(a.speeds == synthetic_ring_speeds(sc, 1).speeds);
  CHECK(a.speeds != synthetic_ring_speeds(sc, 2).speeds);
  CHECK((a.speeds.array() >= 0).all());
  const auto edges = synthetic_ring_edges(sc);
  CHECK(edges.size() == 5);
  CHECK(edges.back().from == "s4");
  CHECK(edges.back().to == "s0");

  sc.noise = 0;
  const SpeedTable clean = synthetic_ring_speeds(sc, 1);
  CHECK(clean.speeds(0, 0) == doctest::Approx(50));
  CHECK(clean.speeds(72, 0) == doctest::Approx(65));
}
