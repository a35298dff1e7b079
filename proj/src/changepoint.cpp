#include <algorithm>
#include <limits>

#include "stgrat/evaluation.hpp"

namespace stgrat {

namespace {

// L2 cost of [a, b) from prefix sums of x and x^2.
struct SegmentCost {
  std::vector<Real> s1, s2;

  explicit SegmentCost(const std::vector<Real>& x) : s1(x.size() + 1, 0), s2(x.size() + 1, 0) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      s1[i + 1] = s1[i] + x[i];
      s2[i + 1] = s2[i] + x[i] * x[i];
    }
  }
  Real operator()(Index a, Index b) const {
    const auto ua = static_cast<std::size_t>(a), ub = static_cast<std::size_t>(b);
    const Real sum = s1[ub] - s1[ua];
    const Real c = s2[ub] - s2[ua] - sum * sum / static_cast<Real>(b - a);
    return std::max<Real>(c, 0);
  }
};

}  // namespace

std::vector<Index> pelt_changepoints(const std::vector<Real>& signal, const PeltOptions& options) {
  if (options.min_size < 1) throw ContractError("pelt: min_size must be >= 1");
  if (options.jump < 1) throw ContractError("pelt: jump must be >= 1");
  if (options.penalty < 0) throw ContractError("pelt: penalty must be >= 0");
  const auto n = static_cast<Index>(signal.size());
  if (n < 2 * options.min_size) {
    throw ContractError("pelt: signal of length " + std::to_string(n) + " is shorter than 2 * min_size = " +
                        std::to_string(2 * options.min_size));
  }
  const SegmentCost cost(signal);
  const Real inf = std::numeric_limits<Real>::infinity();
  const Index m = options.min_size;

  std::vector<Real> best(static_cast<std::size_t>(n + 1), inf);
  std::vector<Index> prev(static_cast<std::size_t>(n + 1), -1);
  best[0] = -options.penalty;

  struct Candidate {
    Index position;
    Index pruned_at;  // candidate is dropped for every end >= pruned_at
  };
  std::vector<Candidate> candidates{{0, std::numeric_limits<Index>::max()}};

  for (Index t = m; t <= n; ++t) {
    if (t % options.jump != 0 && t != n) continue;
    Real f = inf;
    Index arg = -1;
    for (const auto& c : candidates) {
      if (t - c.position < m || t >= c.pruned_at) continue;
      const Real v = best[static_cast<std::size_t>(c.position)] + cost(c.position, t) + options.penalty;
      if (v < f) {
        f = v;
        arg = c.position;
      }
    }
    best[static_cast<std::size_t>(t)] = f;
    prev[static_cast<std::size_t>(t)] = arg;
    if (f == inf) continue;
    // A predecessor s no better than t at t stays dominated for any end T with
    // T - t >= min_size; it remains eligible for the ends in between.
    std::erase_if(candidates, [&](const Candidate& c) { return c.pruned_at <= t; });
    for (auto& c : candidates) {
      if (t - c.position < m || c.pruned_at != std::numeric_limits<Index>::max()) continue;
      if (best[static_cast<std::size_t>(c.position)] + cost(c.position, t) >= f) c.pruned_at = t + m;
    }
    candidates.push_back({t, std::numeric_limits<Index>::max()});
  }

  std::vector<Index> breaks;
  for (Index t = prev[static_cast<std::size_t>(n)]; t > 0; t = prev[static_cast<std::size_t>(t)]) breaks.push_back(t);
  std::reverse(breaks.begin(), breaks.end());
  return breaks;
}

Real segmentation_cost(const std::vector<Real>& signal, const std::vector<Index>& breakpoints, Real penalty) {
  const SegmentCost cost(signal);
  Real total = 0;
  Index start = 0;
  for (Index b : breakpoints) {
    if (b <= start || b >= static_cast<Index>(signal.size())) throw ContractError("segmentation_cost: invalid breakpoints");
    total += cost(start, b) + penalty;
    start = b;
  }
  return total + cost(start, static_cast<Index>(signal.size()));
}

}  // namespace stgrat
