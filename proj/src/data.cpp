#include "stgrat/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <set>
#include <sstream>

#include "text_util.hpp"

namespace stgrat {

namespace {

// Howard Hinnant's civil-calendar conversions.
std::int64_t days_from_civil(std::int64_t y, unsigned m, unsigned d) {
  y -= m <= 2;
  const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
  const auto yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

void civil_from_days(std::int64_t z, std::int64_t& y, unsigned& m, unsigned& d) {
  z += 719468;
  const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
  const auto doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  y = static_cast<std::int64_t>(yoe) + era * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  d = doy - (153 * mp + 2) / 5 + 1;
  m = mp < 10 ? mp + 3 : mp - 9;
  y += m <= 2;
}

std::int64_t floor_mod(std::int64_t a, std::int64_t b) {
  const std::int64_t r = a % b;
  return r < 0 ? r + b : r;
}

}  // namespace

std::int64_t parse_timestamp(const std::string& raw) {
  const std::string s(text::trim(raw));
  if (const auto epoch = text::parse_int(s)) return *epoch;
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, sec = 0;
  char sep = 0;
  int consumed = 0;
  const int fields = std::sscanf(s.c_str(), "%4d-%2d-%2d%c%2d:%2d%n", &y, &mo, &d, &sep, &h, &mi, &consumed);
  if (fields < 6 || (sep != 'T' && sep != ' ')) throw std::invalid_argument("unparseable timestamp '" + s + "'");
  std::string_view rest = std::string_view(s).substr(static_cast<std::size_t>(consumed));
  if (!rest.empty() && rest.front() == ':') {
    int more = 0;
    if (std::sscanf(rest.data(), ":%2d%n", &sec, &more) != 1) throw std::invalid_argument("unparseable timestamp '" + s + "'");
    rest.remove_prefix(static_cast<std::size_t>(more));
    if (!rest.empty() && rest.front() == '.') {
      rest.remove_prefix(1);
      while (!rest.empty() && std::isdigit(static_cast<unsigned char>(rest.front()))) rest.remove_prefix(1);
    }
  }
  if (!rest.empty() && rest != "Z" && rest != "+00:00") throw std::invalid_argument("unparseable timestamp '" + s + "'");
  if (mo < 1 || mo > 12 || d < 1 || d > 31 || h > 23 || mi > 59 || sec > 60 || h < 0 || mi < 0 || sec < 0) {
    throw std::invalid_argument("timestamp out of range '" + s + "'");
  }
  return days_from_civil(y, static_cast<unsigned>(mo), static_cast<unsigned>(d)) * 86400 + h * 3600 + mi * 60 + sec;
}

std::string format_timestamp(std::int64_t t) {
  const std::int64_t days = (t - floor_mod(t, 86400)) / 86400;
  const std::int64_t rem = floor_mod(t, 86400);
  std::int64_t y = 0;
  unsigned m = 0, d = 0;
  civil_from_days(days, y, m, d);
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04lld-%02u-%02uT%02lld:%02lld:%02lld", static_cast<long long>(y), m, d,
                static_cast<long long>(rem / 3600), static_cast<long long>((rem / 60) % 60),
                static_cast<long long>(rem % 60));
  return buf;
}

Real time_of_day(std::int64_t t) { return static_cast<Real>(floor_mod(t, 86400)) / 86400.0; }

int hour_of_day(std::int64_t t) { return static_cast<int>(floor_mod(t, 86400) / 3600); }

SpeedTable read_speed_table(std::istream& in, const std::string& source) {
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(source + ": empty speed table");
  const auto header = text::split(line, ',');
  if (header.size() < 2 || header[0] != "timestamp") {
    throw std::runtime_error(source + ": header must be 'timestamp,<node_id>,...'");
  }
  SpeedTable table;
  table.node_ids.assign(header.begin() + 1, header.end());
  {
    std::set<std::string> unique(table.node_ids.begin(), table.node_ids.end());
    if (unique.size() != table.node_ids.size()) throw std::runtime_error(source + ": duplicate node id in header");
  }
  const std::size_t n = table.node_ids.size();
  std::vector<Real> values;
  std::vector<Real> observed;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (text::trim(line).empty()) continue;
    const auto cells = text::split(line, ',');
    if (cells.size() != n + 1) {
      throw std::runtime_error(source + ": row " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                               " columns, expected " + std::to_string(n + 1));
    }
    std::int64_t ts = 0;
    try {
      ts = parse_timestamp(cells[0]);
    } catch (const std::invalid_argument&) {
      throw std::runtime_error(source + ": row " + std::to_string(row) + " has an unparseable timestamp '" + cells[0] + "'");
    }
    if (!table.timestamps.empty()) {
      if (ts == table.timestamps.back()) {
        throw std::runtime_error(source + ": row " + std::to_string(row) + " duplicates timestamp " + cells[0]);
      }
      if (ts < table.timestamps.back()) {
        throw std::runtime_error(source + ": row " + std::to_string(row) + " is out of chronological order");
      }
    }
    table.timestamps.push_back(ts);
    for (std::size_t c = 1; c <= n; ++c) {
      if (cells[c].empty()) {
        values.push_back(0);
        observed.push_back(0);
        continue;
      }
      const auto v = text::parse_real(cells[c]);
      if (!v || !std::isfinite(*v)) {
        throw std::runtime_error(source + ": row " + std::to_string(row) + " column " + std::to_string(c + 1) +
                                 " is not a number");
      }
      if (*v < 0) throw std::runtime_error(source + ": row " + std::to_string(row) + " has a negative speed");
      values.push_back(*v);
      observed.push_back(1);
    }
  }
  const auto steps = static_cast<Index>(table.timestamps.size());
  table.speeds = Eigen::Map<Matrix>(values.data(), steps, static_cast<Index>(n));
  table.observed = Eigen::Map<Matrix>(observed.data(), steps, static_cast<Index>(n));
  for (std::size_t i = 2; i < table.timestamps.size(); ++i) {
    const auto first = table.timestamps[1] - table.timestamps[0];
    if (std::llabs((table.timestamps[i] - table.timestamps[i - 1]) - first) > 1) table.irregular_spacing = true;
  }
  return table;
}

SpeedTable load_speed_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open speed table '" + path + "'");
  return read_speed_table(in, path);
}

void save_speed_table(const SpeedTable& table, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write speed table '" + path + "'");
  out << "timestamp";
  for (const auto& id : table.node_ids) out << ',' << id;
  out << '\n';
  for (Index t = 0; t < table.steps(); ++t) {
    out << format_timestamp(table.timestamps[static_cast<std::size_t>(t)]);
    for (Index n = 0; n < table.nodes(); ++n) {
      out << ',';
      if (table.observed(t, n) != 0) out << text::format_real(table.speeds(t, n));
    }
    out << '\n';
  }
}

Real NormalizationStats::normalize(Real x) const {
  return method == NormalizationMethod::zscore ? (x - mean) / std : (x - min) / (max - min);
}

Real NormalizationStats::denormalize(Real x) const {
  return method == NormalizationMethod::zscore ? x * std + mean : x * (max - min) + min;
}

NormalizationStats fit_normalization(const SpeedTable& table, Index train_steps, NormalizationMethod method) {
  train_steps = std::min(train_steps, table.steps());
  NormalizationStats stats;
  stats.method = method;
  Real sum = 0, sq = 0;
  Index count = 0;
  Real lo = std::numeric_limits<Real>::infinity(), hi = -std::numeric_limits<Real>::infinity();
  for (Index t = 0; t < train_steps; ++t) {
    for (Index n = 0; n < table.nodes(); ++n) {
      if (table.observed(t, n) == 0) continue;
      const Real v = table.speeds(t, n);
      sum += v;
      ++count;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  if (count == 0) throw std::runtime_error("normalize: training portion has no observed entries");
  stats.mean = sum / static_cast<Real>(count);
  for (Index t = 0; t < train_steps; ++t) {
    for (Index n = 0; n < table.nodes(); ++n) {
      if (table.observed(t, n) != 0) sq += (table.speeds(t, n) - stats.mean) * (table.speeds(t, n) - stats.mean);
    }
  }
  stats.std = std::sqrt(sq / static_cast<Real>(count));
  stats.min = lo;
  stats.max = hi;
  if (method == NormalizationMethod::zscore && !(stats.std > 0)) {
    throw std::runtime_error("normalize: training speeds have zero variance");
  }
  if (method == NormalizationMethod::minmax && !(stats.max > stats.min)) {
    throw std::runtime_error("normalize: training speeds have max == min");
  }
  return stats;
}

NormalizedSeries normalize(const SpeedTable& table, const NormalizationStats& stats) {
  NormalizedSeries s;
  s.timestamps = table.timestamps;
  s.node_ids = table.node_ids;
  s.raw = table.speeds.cwiseProduct(table.observed);
  s.observed = table.observed;
  s.stats = stats;
  s.normalized = Matrix::Zero(table.steps(), table.nodes());
  for (Index t = 0; t < table.steps(); ++t) {
    for (Index n = 0; n < table.nodes(); ++n) {
      if (table.observed(t, n) != 0) s.normalized(t, n) = stats.normalize(table.speeds(t, n));
    }
  }
  s.time_of_day.reserve(table.timestamps.size());
  for (auto ts : table.timestamps) s.time_of_day.push_back(time_of_day(ts));
  return s;
}

Index training_rows(Index steps, Index input_steps, Index output_steps, Real train_fraction) {
  const Index windows = steps - input_steps - output_steps + 1;
  if (windows < 1) throw std::runtime_error("normalize: table too short for one window");
  // Same rounding as chrono_split so the statistics cover exactly the training windows.
  const auto train_windows =
      std::max<Index>(1, static_cast<Index>(std::floor(train_fraction * static_cast<Real>(windows) + 1e-9)));
  return train_windows - 1 + input_steps + output_steps;
}

NormalizedSeries normalize_for_training(const SpeedTable& table, Index input_steps, Index output_steps,
                                        Real train_fraction, NormalizationMethod method) {
  const Index train_steps = training_rows(table.steps(), input_steps, output_steps, train_fraction);
  return normalize(table, fit_normalization(table, train_steps, method));
}

WindowedDataset make_windows(std::shared_ptr<const NormalizedSeries> series, Index input_steps, Index output_steps) {
  if (input_steps < 1 || output_steps < 1) throw ContractError("make_windows: window lengths must be >= 1");
  const Index total = series->steps();
  if (total < input_steps + output_steps) {
    throw ContractError("make_windows: table has " + std::to_string(total) + " steps, need at least " +
                        std::to_string(input_steps + output_steps));
  }
  WindowedDataset d;
  d.series = std::move(series);
  d.input_steps = input_steps;
  d.output_steps = output_steps;
  for (Index s = 0; s + input_steps + output_steps <= total; ++s) d.starts.push_back(s);
  return d;
}

DatasetSplit chrono_split(const WindowedDataset& data, Real train, Real validation, Real test) {
  if (std::abs(train + validation + test - 1.0) > 1e-9) throw ContractError("chrono_split: fractions must sum to 1");
  if (train < 0 || validation < 0 || test < 0) throw ContractError("chrono_split: fractions must be nonnegative");
  if (data.empty()) throw ContractError("chrono_split: empty dataset");
  const auto n = static_cast<Real>(data.size());
  // The small epsilon keeps exact products such as 0.7 * 10 from flooring to 6.
  const auto n_train = static_cast<std::size_t>(std::floor(train * n + 1e-9));
  const auto n_val = static_cast<std::size_t>(std::floor(validation * n + 1e-9));
  DatasetSplit out{data, data, data};
  out.train.starts.assign(data.starts.begin(), data.starts.begin() + static_cast<std::ptrdiff_t>(n_train));
  out.validation.starts.assign(data.starts.begin() + static_cast<std::ptrdiff_t>(n_train),
                               data.starts.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  out.test.starts.assign(data.starts.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), data.starts.end());
  return out;
}

SequenceBatch make_batch(const WindowedDataset& data, const std::vector<std::size_t>& windows) {
  const NormalizedSeries& s = *data.series;
  const auto b_count = static_cast<Index>(windows.size());
  const Index n = s.nodes();
  SequenceBatch batch;
  batch.input_shape = {b_count, data.input_steps, n};
  batch.target_shape = {b_count, data.output_steps, n};
  batch.inputs.resize(batch.input_shape.rows(), 2);
  batch.targets.resize(batch.target_shape.rows(), 1);
  batch.targets_normalized.resize(batch.target_shape.rows(), 1);
  batch.target_mask.resize(batch.target_shape.rows(), 1);
  batch.target_time.resize(b_count * data.output_steps, 1);
  for (Index b = 0; b < b_count; ++b) {
    const std::size_t w = windows[static_cast<std::size_t>(b)];
    const Index start = data.starts.at(w);
    for (Index t = 0; t < data.input_steps; ++t) {
      const Index src = start + t;
      for (Index node = 0; node < n; ++node) {
        const Index r = batch.input_shape.row(b, t, node);
        batch.inputs(r, 0) = s.normalized(src, node);
        batch.inputs(r, 1) = s.time_of_day[static_cast<std::size_t>(src)];
      }
    }
    for (Index t = 0; t < data.output_steps; ++t) {
      const Index src = start + data.input_steps + t;
      batch.target_time(b * data.output_steps + t, 0) = s.time_of_day[static_cast<std::size_t>(src)];
      batch.target_rows.push_back(src);
      for (Index node = 0; node < n; ++node) {
        const Index r = batch.target_shape.row(b, t, node);
        batch.targets(r, 0) = s.raw(src, node);
        batch.targets_normalized(r, 0) = s.normalized(src, node);
        batch.target_mask(r, 0) = s.observed(src, node);
      }
    }
  }
  return batch;
}

SequenceBatch make_input_batch(const SpeedTable& window, const NormalizationStats& stats, Index output_steps,
                               std::int64_t step_seconds) {
  if (window.steps() < 1) throw ContractError("make_input_batch: empty window");
  const Index n = window.nodes();
  const Index t_in = window.steps();
  SequenceBatch batch;
  batch.input_shape = {1, t_in, n};
  batch.target_shape = {1, output_steps, n};
  batch.inputs.resize(batch.input_shape.rows(), 2);
  for (Index t = 0; t < t_in; ++t) {
    for (Index node = 0; node < n; ++node) {
      const Index r = batch.input_shape.row(0, t, node);
      batch.inputs(r, 0) = window.observed(t, node) != 0 ? stats.normalize(window.speeds(t, node)) : 0.0;
      batch.inputs(r, 1) = time_of_day(window.timestamps[static_cast<std::size_t>(t)]);
    }
  }
  batch.targets = Matrix::Zero(batch.target_shape.rows(), 1);
  batch.targets_normalized = Matrix::Zero(batch.target_shape.rows(), 1);
  batch.target_mask = Matrix::Zero(batch.target_shape.rows(), 1);
  batch.target_time.resize(output_steps, 1);
  const std::int64_t last = window.timestamps.back();
  for (Index t = 0; t < output_steps; ++t) batch.target_time(t, 0) = time_of_day(last + (t + 1) * step_seconds);
  return batch;
}

SpeedTable synthetic_ring_speeds(const RingScenario& sc, std::uint64_t seed) {
  Rng rng(seed);
  SpeedTable table;
  const Index steps = sc.days * sc.steps_per_day;
  for (Index n = 0; n < sc.nodes; ++n) table.node_ids.push_back("s" + std::to_string(n));
  table.speeds.resize(steps, sc.nodes);
  table.observed = Matrix::Ones(steps, sc.nodes);
  for (Index t = 0; t < steps; ++t) {
    table.timestamps.push_back(sc.start_epoch + t * sc.step_seconds);
    const Real angle = 2.0 * std::numbers::pi * static_cast<Real>(t) / static_cast<Real>(sc.steps_per_day);
    for (Index n = 0; n < sc.nodes; ++n) {
      // Downstream nodes on the ring see the same wave later.
      const Real v = sc.base + sc.amplitude * std::sin(angle - sc.phase_lag * static_cast<Real>(n)) + sc.noise * rng.normal();
      table.speeds(t, n) = std::max<Real>(0.0, v);
    }
  }
  return table;
}

std::vector<EdgeRecord> synthetic_ring_edges(const RingScenario& sc) {
  std::vector<EdgeRecord> edges;
  for (Index n = 0; n < sc.nodes; ++n) {
    edges.push_back({"s" + std::to_string(n), "s" + std::to_string((n + 1) % sc.nodes), sc.ring_distance});
  }
  return edges;
}

}  // namespace stgrat
