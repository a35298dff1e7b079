#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "stgrat/numerics.hpp"

namespace stgrat {

/// Directed weighted sensor graph. adjacency(i, j) > 0 means an edge i -> j.
class RoadGraph {
 public:
  RoadGraph() = default;
  RoadGraph(std::vector<std::string> node_ids, Matrix adjacency);

  Index node_count() const { return static_cast<Index>(node_ids_.size()); }
  const std::vector<std::string>& node_ids() const { return node_ids_; }
  const Matrix& adjacency() const { return adjacency_; }
  std::optional<Index> index_of(const std::string& id) const;
  Index edge_count() const;

  struct Coordinate {
    Real latitude = 0;
    Real longitude = 0;
  };
  std::vector<std::optional<Coordinate>> coordinates;

 private:
  std::vector<std::string> node_ids_;
  std::unordered_map<std::string, Index> index_;
  Matrix adjacency_;
};

struct EdgeRecord {
  std::string from;
  std::string to;
  Real distance = 0;
};

enum class EdgeWeighting { gaussian_kernel, raw, var_augmented };

struct GraphBuildOptions {
  EdgeWeighting weighting = EdgeWeighting::gaussian_kernel;
  /// Kernel width; standard deviation of all distances when unset.
  std::optional<Real> sigma;
  Real cutoff = 0.1;
  /// Per-edge multipliers for var_augmented weighting, keyed by (from, to).
  std::map<std::pair<std::string, std::string>, Real> var_weights;
};

RoadGraph build_graph(const std::vector<std::string>& nodes, const std::vector<EdgeRecord>& edges,
                      const GraphBuildOptions& options = {});

/// Reads a `from,to,distance` CSV.
std::vector<EdgeRecord> load_edge_csv(const std::string& path);
/// Node ids in order of first appearance in the edge list.
std::vector<std::string> nodes_from_edges(const std::vector<EdgeRecord>& edges);

struct TransitionPair {
  Matrix outgoing;  ///< D_O^-1 A
  Matrix incoming;  ///< D_I^-1 A^T
};

TransitionPair transition_matrices(const RoadGraph& g);

enum class FlowDirection { inflow, outflow, both };

const char* to_string(FlowDirection d);

/// Attention heads are numbered from 1. Odd heads look at inflow, even at outflow.
FlowDirection head_direction(int head_number);

/// sum_k beta[k] * T^k where T is the incoming transition for odd heads and
/// the outgoing transition for even heads. `beta` has K+1 entries.
Matrix diffusion_prior(const TransitionPair& pair, const std::vector<Real>& beta, int head_number, int K);

/// Matrix powers T^0 .. T^K of the transition a head uses.
std::vector<Matrix> transition_powers(const TransitionPair& pair, FlowDirection direction, int K);

/// Node i together with nodes within `range` directed hops: predecessors for
/// inflow, successors for outflow, either for both. Sorted ascending.
std::vector<Index> neighborhood(const RoadGraph& g, Index node, FlowDirection direction, int range);

struct EmbeddingTable {
  Index dim = 0;
  std::vector<std::string> node_ids;
  Matrix vectors;  ///< node_count x dim
};

struct LineOptions {
  Index dim = 64;
  int epochs = 200;
  int negative_samples = 5;
  Real initial_rate = 0.025;
};

/// Second-order LINE embedding trained by weighted edge sampling with negative sampling.
EmbeddingTable line_embed(const RoadGraph& g, const LineOptions& options, std::uint64_t seed);

void save_embeddings(const EmbeddingTable& table, const std::string& path);
/// Rows are reordered to follow `node_ids`; every id must be present exactly once.
EmbeddingTable load_embeddings(const std::string& path, const std::vector<std::string>& node_ids);

struct VarWeight {
  Real weight = 0;
  bool degenerate = false;
};

/// Absolute cross-lag coefficient of j's past on i's present from a
/// least-squares bivariate VAR(lag), clipped to [0, 1].
std::vector<VarWeight> var_edge_weights(const Matrix& train_speeds, const std::vector<std::pair<Index, Index>>& pairs,
                                        int lag = 1);

}  // namespace stgrat
