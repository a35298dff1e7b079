#include "stgrat/graph.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <sstream>

#include "text_util.hpp"

namespace stgrat {

RoadGraph::RoadGraph(std::vector<std::string> node_ids, Matrix adjacency)
    : node_ids_(std::move(node_ids)), adjacency_(std::move(adjacency)) {
  const auto n = static_cast<Index>(node_ids_.size());
  if (adjacency_.rows() != n || adjacency_.cols() != n) {
    throw ShapeError("RoadGraph: adjacency " + shape_string(adjacency_) + " does not match " + std::to_string(n) +
                     " nodes");
  }
  for (Index i = 0; i < n; ++i) {
    if (!index_.emplace(node_ids_[static_cast<std::size_t>(i)], i).second) {
      throw ContractError("RoadGraph: duplicate node id '" + node_ids_[static_cast<std::size_t>(i)] + "'");
    }
  }
  for (Index i = 0; i < adjacency_.size(); ++i) {
    const Real w = adjacency_.data()[i];
    if (!(w >= 0) || !std::isfinite(w)) throw ContractError("RoadGraph: adjacency must be finite and nonnegative");
  }
  coordinates.resize(node_ids_.size());
}

std::optional<Index> RoadGraph::index_of(const std::string& id) const {
  const auto it = index_.find(id);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

Index RoadGraph::edge_count() const { return (adjacency_.array() > 0).count(); }

RoadGraph build_graph(const std::vector<std::string>& nodes, const std::vector<EdgeRecord>& edges,
                      const GraphBuildOptions& options) {
  RoadGraph skeleton(nodes, Matrix::Zero(static_cast<Index>(nodes.size()), static_cast<Index>(nodes.size())));
  for (const auto& e : edges) {
    if (!skeleton.index_of(e.from)) throw ContractError("build_graph: edge references unknown node '" + e.from + "'");
    if (!skeleton.index_of(e.to)) throw ContractError("build_graph: edge references unknown node '" + e.to + "'");
    if (!(e.distance > 0) || !std::isfinite(e.distance)) {
      throw ContractError("build_graph: nonpositive distance on edge " + e.from + " -> " + e.to);
    }
  }

  Real sigma = 0;
  if (options.weighting != EdgeWeighting::raw && !edges.empty()) {
    if (options.sigma) {
      sigma = *options.sigma;
    } else {
      Real mean = 0;
      for (const auto& e : edges) mean += e.distance;
      mean /= static_cast<Real>(edges.size());
      Real var = 0;
      for (const auto& e : edges) var += (e.distance - mean) * (e.distance - mean);
      sigma = std::sqrt(var / static_cast<Real>(edges.size()));
      // A single distinct distance has no spread; fall back to its magnitude.
      if (sigma <= 0) sigma = mean;
    }
    if (!(sigma > 0)) throw ContractError("build_graph: kernel width must be positive");
  }

  Matrix a = Matrix::Zero(skeleton.node_count(), skeleton.node_count());
  for (const auto& e : edges) {
    const Index i = *skeleton.index_of(e.from);
    const Index j = *skeleton.index_of(e.to);
    Real w = 0;
    if (options.weighting == EdgeWeighting::raw) {
      w = e.distance;
    } else {
      w = std::exp(-(e.distance * e.distance) / (sigma * sigma));
      if (w < options.cutoff) w = 0;
      if (options.weighting == EdgeWeighting::var_augmented) {
        const auto it = options.var_weights.find({e.from, e.to});
        w *= it == options.var_weights.end() ? 0.0 : it->second;
      }
    }
    a(i, j) = w;
  }
  return RoadGraph(nodes, std::move(a));
}

std::vector<EdgeRecord> load_edge_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open graph file '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path + ": empty graph file");
  const auto header = text::split(line, ',');
  if (header.size() != 3 || header[0] != "from" || header[1] != "to" || header[2] != "distance") {
    throw std::runtime_error(path + ": expected header 'from,to,distance'");
  }
  std::vector<EdgeRecord> edges;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (text::trim(line).empty()) continue;
    const auto cells = text::split(line, ',');
    if (cells.size() != 3) throw std::runtime_error(path + ": row " + std::to_string(row) + " must have 3 columns");
    const auto d = text::parse_real(cells[2]);
    if (!d) throw std::runtime_error(path + ": row " + std::to_string(row) + " has an unparseable distance");
    edges.push_back({cells[0], cells[1], *d});
  }
  return edges;
}

std::vector<std::string> nodes_from_edges(const std::vector<EdgeRecord>& edges) {
  std::vector<std::string> nodes;
  std::set<std::string> seen;
  for (const auto& e : edges) {
    for (const auto* id : {&e.from, &e.to}) {
      if (seen.insert(*id).second) nodes.push_back(*id);
    }
  }
  return nodes;
}

namespace {

Matrix row_normalize(const Matrix& m) {
  Matrix out = m;
  for (Index i = 0; i < m.rows(); ++i) {
    const Real s = m.row(i).sum();
    if (s > 0) out.row(i) /= s;
  }
  return out;
}

}  // namespace

TransitionPair transition_matrices(const RoadGraph& g) {
  return {row_normalize(g.adjacency()), row_normalize(g.adjacency().transpose())};
}

const char* to_string(FlowDirection d) {
  switch (d) {
    case FlowDirection::inflow:
      return "inflow";
    case FlowDirection::outflow:
      return "outflow";
    case FlowDirection::both:
      return "both";
  }
  return "?";
}

FlowDirection head_direction(int head_number) {
  if (head_number < 1) throw ContractError("head numbers start at 1");
  return head_number % 2 == 1 ? FlowDirection::inflow : FlowDirection::outflow;
}

std::vector<Matrix> transition_powers(const TransitionPair& pair, FlowDirection direction, int K) {
  if (K < 0) throw ContractError("transition_powers: K must be nonnegative");
  if (direction == FlowDirection::both) throw ContractError("transition_powers: direction must be inflow or outflow");
  const Matrix& t = direction == FlowDirection::inflow ? pair.incoming : pair.outgoing;
  std::vector<Matrix> powers;
  powers.push_back(Matrix::Identity(t.rows(), t.cols()));
  for (int k = 1; k <= K; ++k) powers.push_back(powers.back() * t);
  return powers;
}

Matrix diffusion_prior(const TransitionPair& pair, const std::vector<Real>& beta, int head_number, int K) {
  if (static_cast<int>(beta.size()) != K + 1) {
    throw ContractError("diffusion_prior: expected " + std::to_string(K + 1) + " weights, got " +
                        std::to_string(beta.size()));
  }
  const auto powers = transition_powers(pair, head_direction(head_number), K);
  Matrix out = Matrix::Zero(powers.front().rows(), powers.front().cols());
  for (int k = 0; k <= K; ++k) out += beta[static_cast<std::size_t>(k)] * powers[static_cast<std::size_t>(k)];
  return out;
}

std::vector<Index> neighborhood(const RoadGraph& g, Index node, FlowDirection direction, int range) {
  const Index n = g.node_count();
  if (node < 0 || node >= n) throw ContractError("neighborhood: invalid node index " + std::to_string(node));
  if (range < 1) throw ContractError("neighborhood: range must be >= 1");
  const Matrix& a = g.adjacency();
  std::vector<int> hops(static_cast<std::size_t>(n), -1);
  std::deque<Index> frontier{node};
  hops[static_cast<std::size_t>(node)] = 0;
  while (!frontier.empty()) {
    const Index cur = frontier.front();
    frontier.pop_front();
    const int h = hops[static_cast<std::size_t>(cur)];
    if (h == range) continue;
    for (Index other = 0; other < n; ++other) {
      const bool pred = a(other, cur) > 0;
      const bool succ = a(cur, other) > 0;
      const bool linked = direction == FlowDirection::inflow    ? pred
                          : direction == FlowDirection::outflow ? succ
                                                                : (pred || succ);
      if (linked && hops[static_cast<std::size_t>(other)] < 0) {
        hops[static_cast<std::size_t>(other)] = h + 1;
        frontier.push_back(other);
      }
    }
  }
  std::vector<Index> out;
  for (Index i = 0; i < n; ++i) {
    if (hops[static_cast<std::size_t>(i)] >= 0) out.push_back(i);
  }
  return out;
}

namespace {

Real sigmoid(Real x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const Real e = std::exp(x);
  return e / (1.0 + e);
}

Index sample_cumulative(const std::vector<Real>& cumulative, Rng& rng) {
  const Real r = rng.uniform() * cumulative.back();
  const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), r);
  return std::min<Index>(static_cast<Index>(it - cumulative.begin()), static_cast<Index>(cumulative.size()) - 1);
}

}  // namespace

EmbeddingTable line_embed(const RoadGraph& g, const LineOptions& options, std::uint64_t seed) {
  if (options.dim < 1) throw ContractError("line_embed: dim must be >= 1");
  const Index n = g.node_count();
  const Matrix& a = g.adjacency();

  std::vector<std::pair<Index, Index>> edges;
  std::vector<Real> edge_cumulative;
  Real total = 0;
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      if (a(i, j) > 0) {
        edges.emplace_back(i, j);
        total += a(i, j);
        edge_cumulative.push_back(total);
      }
    }
  }
  if (edges.empty()) throw ContractError("line_embed: graph has no edges");

  std::vector<Real> noise_cumulative;
  Real noise_total = 0;
  for (Index v = 0; v < n; ++v) {
    const Real degree = a.row(v).sum() + a.col(v).sum();
    noise_total += std::pow(degree, 0.75);
    noise_cumulative.push_back(noise_total);
  }

  Rng rng(seed);
  Matrix vertex(n, options.dim);
  for (Index i = 0; i < vertex.size(); ++i) vertex.data()[i] = (rng.uniform() - 0.5) / static_cast<Real>(options.dim);
  Matrix context = Matrix::Zero(n, options.dim);

  const auto total_samples = static_cast<std::int64_t>(std::max(1, options.epochs)) * static_cast<std::int64_t>(edges.size());
  RowVector error(options.dim);
  for (std::int64_t s = 0; s < total_samples; ++s) {
    const Real rate = std::max(options.initial_rate * 1e-4,
                               options.initial_rate * (1.0 - static_cast<Real>(s) / static_cast<Real>(total_samples)));
    const auto [u, v] = edges[static_cast<std::size_t>(sample_cumulative(edge_cumulative, rng))];
    error.setZero();
    for (int d = 0; d <= options.negative_samples; ++d) {
      Index target = v;
      Real label = 1;
      if (d > 0) {
        target = sample_cumulative(noise_cumulative, rng);
        label = 0;
      }
      const Real f = vertex.row(u).dot(context.row(target));
      const Real step = (label - sigmoid(f)) * rate;
      error += step * context.row(target);
      context.row(target) += step * vertex.row(u);
    }
    vertex.row(u) += error;
  }
  return {options.dim, g.node_ids(), std::move(vertex)};
}

void save_embeddings(const EmbeddingTable& table, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write embedding file '" + path + "'");
  out << "#dim=" << table.dim << "\n";
  for (std::size_t i = 0; i < table.node_ids.size(); ++i) {
    out << table.node_ids[i];
    for (Index d = 0; d < table.dim; ++d) out << ' ' << text::format_real(table.vectors(static_cast<Index>(i), d));
    out << "\n";
  }
  if (!out) throw std::runtime_error("failed writing embedding file '" + path + "'");
}

EmbeddingTable load_embeddings(const std::string& path, const std::vector<std::string>& node_ids) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open embedding file '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line.rfind("#dim=", 0) != 0) {
    throw std::runtime_error(path + ": missing '#dim=<d>' header");
  }
  const auto dim = text::parse_int(std::string_view(line).substr(5));
  if (!dim || *dim < 1) throw std::runtime_error(path + ": invalid dimension header");

  std::unordered_map<std::string, Index> wanted;
  for (std::size_t i = 0; i < node_ids.size(); ++i) wanted.emplace(node_ids[i], static_cast<Index>(i));

  EmbeddingTable table{static_cast<Index>(*dim), node_ids, Matrix::Zero(static_cast<Index>(node_ids.size()), *dim)};
  std::vector<bool> filled(node_ids.size(), false);
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (text::trim(line).empty()) continue;
    const auto cells = text::split_whitespace(line);
    const auto it = wanted.find(cells.front());
    if (it == wanted.end()) throw std::runtime_error(path + ": unknown node id '" + cells.front() + "'");
    if (static_cast<Index>(cells.size()) != table.dim + 1) {
      throw std::runtime_error(path + ": row " + std::to_string(row) + " has " + std::to_string(cells.size() - 1) +
                               " values, expected " + std::to_string(table.dim));
    }
    if (filled[static_cast<std::size_t>(it->second)]) {
      throw std::runtime_error(path + ": duplicate node id '" + cells.front() + "'");
    }
    for (Index d = 0; d < table.dim; ++d) {
      const auto v = text::parse_real(cells[static_cast<std::size_t>(d + 1)]);
      if (!v) throw std::runtime_error(path + ": row " + std::to_string(row) + " has an unparseable value");
      table.vectors(it->second, d) = *v;
    }
    filled[static_cast<std::size_t>(it->second)] = true;
  }
  for (std::size_t i = 0; i < node_ids.size(); ++i) {
    if (!filled[i]) throw std::runtime_error(path + ": missing embedding for node '" + node_ids[i] + "'");
  }
  return table;
}

std::vector<VarWeight> var_edge_weights(const Matrix& train_speeds, const std::vector<std::pair<Index, Index>>& pairs,
                                        int lag) {
  if (lag < 1) throw ContractError("var_edge_weights: lag must be >= 1");
  const Index steps = train_speeds.rows();
  if (steps < 10 * lag) {
    throw ContractError("var_edge_weights: need at least " + std::to_string(10 * lag) + " observations, got " +
                        std::to_string(steps));
  }
  std::vector<VarWeight> out;
  out.reserve(pairs.size());
  const Index rows = steps - lag;
  for (const auto& [i, j] : pairs) {
    if (i < 0 || j < 0 || i >= train_speeds.cols() || j >= train_speeds.cols()) {
      throw ContractError("var_edge_weights: node index out of range");
    }
    const auto xi = train_speeds.col(i);
    const auto xj = train_speeds.col(j);
    const auto spread = [](const auto& col) { return col.maxCoeff() - col.minCoeff(); };
    if (spread(xi) <= 1e-12 || spread(xj) <= 1e-12) {
      out.push_back({0.0, true});
      continue;
    }
    Eigen::MatrixXd design(rows, 1 + 2 * lag);
    Eigen::VectorXd target(rows);
    for (Index r = 0; r < rows; ++r) {
      const Index t = r + lag;
      target(r) = xi(t);
      design(r, 0) = 1.0;
      for (int l = 1; l <= lag; ++l) {
        design(r, l) = xi(t - l);
        design(r, lag + l) = xj(t - l);
      }
    }
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
    if (qr.rank() < design.cols()) {
      out.push_back({0.0, true});
      continue;
    }
    const Eigen::VectorXd coef = qr.solve(target);
    Real w = 0;
    for (int l = 1; l <= lag; ++l) w += std::abs(coef(lag + l));
    out.push_back({std::clamp(w, 0.0, 1.0), false});
  }
  return out;
}

}  // namespace stgrat
