#include "vbtree/tree_model.hpp"

#include <algorithm>

namespace vbtree {

namespace {

double log_sum_exp(double a, double b) {
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

double xlogy_ratio(double x, double denom) {
  return x > 0.0 ? x * std::log(x / denom) : 0.0;
}

}  // namespace

TreeTopology TreeTopology::from_layout(const WaveletLayout& layout) {
  TreeTopology t;
  const std::size_t offset = layout.scaling_count();
  const std::size_t n = layout.detail_count();
  t.parent.resize(n);
  t.level.resize(n);
  t.levels = layout.levels();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = offset + i;
    const int p = layout.parent(j);
    t.parent[i] = p < 0 ? -1 : p - static_cast<int>(offset);
    t.level[i] = layout.level(j);
  }
  return t;
}

void TreeTopology::validate() const {
  if (parent.size() != level.size()) throw ConfigError("tree topology: parent/level size mismatch");
  for (std::size_t j = 0; j < parent.size(); ++j) {
    if (level[j] < 1 || level[j] > levels) throw ConfigError("tree topology: level out of range");
    if (parent[j] < 0) {
      if (level[j] != 1) throw ConfigError("tree topology: roots must be at level 1");
      continue;
    }
    if (static_cast<std::size_t>(parent[j]) >= j) throw ConfigError("tree topology: parent must precede child");
    if (level[parent[j]] + 1 != level[j]) throw ConfigError("tree topology: child must be one level below parent");
  }
}

TreeParams TreeParams::initial(int levels) {
  TreeParams p;
  p.rho_root = 0.5;
  p.theta.assign(static_cast<std::size_t>(levels), {0.1, 0.9});
  if (levels > 0) p.theta[0] = {0.5, 0.5};
  return p;
}

double TreeParams::prob_high(int level, int parent_state) const {
  if (level <= 1) return rho_root;
  return theta[static_cast<std::size_t>(level - 1)][static_cast<std::size_t>(parent_state)];
}

void TreeParams::clamp() {
  rho_root = std::clamp(rho_root, kThetaMin, 1.0 - kThetaMin);
  for (auto& row : theta)
    for (double& v : row) v = std::clamp(v, kThetaMin, 1.0 - kThetaMin);
  if (!theta.empty()) theta[0] = {rho_root, rho_root};
}

TreeMarginals bp_infer(const TreeTopology& topo, const TreeParams& params, const NodeEvidence& evidence) {
  const std::size_t n = topo.size();
  if (evidence.low.size() != n || evidence.high.size() != n)
    throw ConfigError("bp_infer: evidence does not cover every node");
  if (params.levels() < topo.levels) throw ConfigError("bp_infer: parameter table too short");

  // log conditional tables per level: lp[l][2*k + r] = log P(k | r)
  std::vector<std::array<double, 4>> lp(static_cast<std::size_t>(topo.levels) + 1);
  for (int l = 1; l <= topo.levels; ++l)
    for (int r = 0; r < 2; ++r) {
      const double p1 = params.prob_high(l, r);
      lp[l][2 + r] = std::log(p1);
      lp[l][r] = std::log1p(-p1);
    }

  // Upward pass. belief[j] = evidence + sum of child messages; msg[j][r] is
  // the log message from j to its parent in parent state r.
  std::vector<std::array<double, 2>> belief(n, {0.0, 0.0});
  std::vector<std::array<double, 2>> msg(n, {0.0, 0.0});
  double log_z = 0.0;
  for (std::size_t jj = n; jj-- > 0;) {
    auto& b = belief[jj];
    b[0] += evidence.low[jj];
    b[1] += evidence.high[jj];
    if (!std::isfinite(b[0]) || !std::isfinite(b[1])) throw NumericalError("bp_infer: non-finite evidence");
    const auto& t = lp[static_cast<std::size_t>(topo.level[jj])];
    if (topo.is_root(jj)) {
      log_z += log_sum_exp(t[0] + b[0], t[2] + b[1]);
    } else {
      for (int r = 0; r < 2; ++r) msg[jj][r] = log_sum_exp(t[r] + b[0], t[2 + r] + b[1]);
      auto& pb = belief[static_cast<std::size_t>(topo.parent[jj])];
      pb[0] += msg[jj][0];
      pb[1] += msg[jj][1];
    }
  }

  // Downward pass.
  TreeMarginals m;
  m.q1.assign(n, 0.0);
  m.qpair.assign(n, {0.0, 0.0, 0.0, 0.0});
  m.log_z = log_z;
  for (std::size_t j = 0; j < n; ++j) {
    const auto& t = lp[static_cast<std::size_t>(topo.level[j])];
    const auto& b = belief[j];
    if (topo.is_root(j)) {
      const double a0 = t[0] + b[0];
      const double a1 = t[2] + b[1];
      m.q1[j] = 1.0 / (1.0 + std::exp(a0 - a1));
      continue;
    }
    const double qp1 = m.q1[static_cast<std::size_t>(topo.parent[j])];
    const double qpar[2] = {1.0 - qp1, qp1};
    auto& pair = m.qpair[j];
    for (int r = 0; r < 2; ++r)
      for (int k = 0; k < 2; ++k) pair[2 * k + r] = qpar[r] * std::exp(t[2 * k + r] + b[k] - msg[j][r]);
    m.q1[j] = pair[2] + pair[3];
  }

  const double err = consistency_error(topo, m);
  if (!(err <= 1e-8)) throw NumericalError("bp_infer: marginal consistency violated (" + std::to_string(err) + ")");
  return m;
}

double consistency_error(const TreeTopology& topo, const TreeMarginals& m) {
  double worst = 0.0;
  for (std::size_t j = 0; j < topo.size(); ++j) {
    if (m.q1[j] < -1e-12 || m.q1[j] > 1.0 + 1e-12) worst = std::max(worst, std::fabs(m.q1[j] - 0.5) - 0.5);
    if (topo.is_root(j)) continue;
    const auto& p = m.qpair[j];
    const double qp1 = m.q1[static_cast<std::size_t>(topo.parent[j])];
    worst = std::max(worst, std::fabs(p[0] + p[1] + p[2] + p[3] - 1.0));
    worst = std::max(worst, std::fabs(p[2] + p[3] - m.q1[j]));
    worst = std::max(worst, std::fabs(p[1] + p[3] - qp1));
  }
  return worst;
}

double kl_to_prior(const TreeMarginals& m, const NodeEvidence& evidence) {
  double acc = 0.0;
  for (std::size_t j = 0; j < m.size(); ++j)
    acc += (1.0 - m.q1[j]) * evidence.low[j] + m.q1[j] * evidence.high[j];
  return acc - m.log_z;
}

double expected_log_prior(const TreeTopology& topo, const TreeParams& params, const TreeMarginals& m) {
  double acc = 0.0;
  for (std::size_t j = 0; j < topo.size(); ++j) {
    const int l = topo.level[j];
    if (topo.is_root(j)) {
      const double p1 = params.prob_high(l, 0);
      acc += m.q1[j] * std::log(p1) + (1.0 - m.q1[j]) * std::log1p(-p1);
      continue;
    }
    const auto& pair = m.qpair[j];
    for (int r = 0; r < 2; ++r) {
      const double p1 = params.prob_high(l, r);
      acc += pair[2 + r] * std::log(p1) + pair[r] * std::log1p(-p1);
    }
  }
  return acc;
}

double kl_from_marginals(const TreeTopology& topo, const TreeParams& params, const TreeMarginals& m) {
  // <log Q> for a tree: sum over roots of q log q plus sum over edges of
  // q(k, r) log q(k | r).
  double neg_entropy = 0.0;
  for (std::size_t j = 0; j < topo.size(); ++j) {
    if (topo.is_root(j)) {
      neg_entropy += xlogy_ratio(m.q1[j], 1.0) + xlogy_ratio(1.0 - m.q1[j], 1.0);
      continue;
    }
    const double qp1 = m.q1[static_cast<std::size_t>(topo.parent[j])];
    const double qpar[2] = {1.0 - qp1, qp1};
    const auto& pair = m.qpair[j];
    for (int r = 0; r < 2; ++r)
      for (int k = 0; k < 2; ++k) neg_entropy += xlogy_ratio(pair[2 * k + r], qpar[r]);
  }
  return neg_entropy - expected_log_prior(topo, params, m);
}

TreeParams update_theta(const TreeTopology& topo, const TreeMarginals& m, const TreeParams& previous) {
  TreeParams out = previous;
  const auto levels = static_cast<std::size_t>(topo.levels);
  std::vector<std::array<double, 2>> num(levels + 1, {0.0, 0.0});
  std::vector<std::array<double, 2>> den(levels + 1, {0.0, 0.0});
  double root_sum = 0.0;
  std::size_t root_count = 0;
  for (std::size_t j = 0; j < topo.size(); ++j) {
    if (topo.is_root(j)) {
      root_sum += m.q1[j];
      ++root_count;
      continue;
    }
    const auto l = static_cast<std::size_t>(topo.level[j]);
    const auto& pair = m.qpair[j];
    for (int r = 0; r < 2; ++r) {
      num[l][r] += pair[2 + r];
      den[l][r] += pair[2 + r] + pair[r];
    }
  }
  if (root_count > 0) out.rho_root = root_sum / static_cast<double>(root_count);
  for (std::size_t l = 2; l <= levels; ++l)
    for (int r = 0; r < 2; ++r)
      if (den[l][r] > 1e-300) out.theta[l - 1][r] = num[l][r] / den[l][r];
  out.clamp();
  return out;
}

TreeMarginals prior_marginals(const TreeTopology& topo, const TreeParams& params) {
  NodeEvidence flat{Vector(topo.size(), 0.0), Vector(topo.size(), 0.0)};
  return bp_infer(topo, params, flat);
}

}  // namespace vbtree
