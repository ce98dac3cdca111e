#pragma once

// Binary hidden Markov tree over wavelet detail coefficients and exact
// sum-product inference on it.
//
// The topology is a forest in topological order (parent index < child index);
// roots sit at level 1 and every other node one level below its parent. All
// nodes of a level share one conditional probability table
// theta[l][r] = P(delta = 1 | parent state r).

#include <array>

#include "vbtree/common.hpp"
#include "vbtree/wavelet.hpp"

namespace vbtree {

inline constexpr double kThetaMin = 1e-4;

struct TreeTopology {
  std::vector<int> parent;  // -1 for roots
  std::vector<int> level;   // 1-based
  int levels = 0;

  std::size_t size() const { return parent.size(); }
  bool is_root(std::size_t j) const { return parent[j] < 0; }

  /// Detail coefficient j of the layout becomes node j - scaling_count().
  static TreeTopology from_layout(const WaveletLayout& layout);
  /// Throws ConfigError on a malformed forest.
  void validate() const;
};

struct TreeParams {
  double rho_root = 0.5;
  // theta[l - 1][r]; level-1 entries mirror rho_root.
  std::vector<std::array<double, 2>> theta;

  /// theta_{0,l} = 0.1, theta_{1,l} = 0.9, rho_root = 0.5.
  static TreeParams initial(int levels);

  int levels() const { return static_cast<int>(theta.size()); }
  /// P(delta = 1) for a root (parent_state ignored) or a level-l node.
  double prob_high(int level, int parent_state) const;
  void clamp();
};

/// Per-node log-potentials log t_{0j}(p_j), log t_{1j}(p_j).
struct NodeEvidence {
  Vector low;
  Vector high;

  std::size_t size() const { return low.size(); }
};

struct TreeMarginals {
  Vector q1;
  // qpair[j][2 * k + r] = Q(delta_j = k, delta_parent = r); zero for roots.
  std::vector<std::array<double, 4>> qpair;
  double log_z = 0.0;

  std::size_t size() const { return q1.size(); }
  double q(std::size_t j, int k) const { return k == 1 ? q1[j] : 1.0 - q1[j]; }
};

/// Exact marginals and log partition of Q ∝ P(delta) prod_j exp(evidence_j).
TreeMarginals bp_infer(const TreeTopology& topo, const TreeParams& params, const NodeEvidence& evidence);

/// Largest violation of normalization / pairwise-to-single consistency.
double consistency_error(const TreeTopology& topo, const TreeMarginals& m);

/// D[Q || P] for marginals obtained by bp_infer from the same evidence.
double kl_to_prior(const TreeMarginals& m, const NodeEvidence& evidence);

/// D[Q || P] from the tree-factorized Q alone; valid for any consistent
/// marginals, also after the evidence has moved on.
double kl_from_marginals(const TreeTopology& topo, const TreeParams& params, const TreeMarginals& m);

/// <log P(delta)> under Q.
double expected_log_prior(const TreeTopology& topo, const TreeParams& params, const TreeMarginals& m);

/// Maximizes <log P(delta)>; levels without parent-state mass keep `previous`.
TreeParams update_theta(const TreeTopology& topo, const TreeMarginals& m, const TreeParams& previous);

/// Marginals of the prior alone (flat evidence).
TreeMarginals prior_marginals(const TreeTopology& topo, const TreeParams& params);

}  // namespace vbtree
