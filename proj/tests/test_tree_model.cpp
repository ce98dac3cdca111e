#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "vbtree/tree_model.hpp"

using namespace vbtree;
using doctest::Approx;

namespace {

TreeTopology single_root() {
  TreeTopology t;
  t.parent = {-1};
  t.level = {1};
  t.levels = 1;
  return t;
}

TreeParams with_rho(int levels, double rho) {
  TreeParams p = TreeParams::initial(levels);
  p.rho_root = rho;
  p.theta[0] = {rho, rho};
  return p;
}

// Root with a chain of two children and a sibling leaf.
TreeTopology five_nodes() {
  TreeTopology t;
  t.parent = {-1, 0, 0, 1, 1};
  t.level = {1, 2, 2, 3, 3};
  t.levels = 3;
  return t;
}

}  // namespace

TEST_CASE("flat evidence leaves the prior unchanged") {
  const TreeMarginals m = bp_infer(single_root(), with_rho(1, 0.3), NodeEvidence{{0.0}, {0.0}});
  CHECK(m.q1[0] == Approx(0.3));
  CHECK(m.log_z == Approx(0.0));
}

TEST_CASE("single root two-term enumeration") {
  const TreeMarginals m = bp_infer(single_root(), with_rho(1, 0.5), NodeEvidence{{std::log(1.0)}, {std::log(3.0)}});
  CHECK(m.q1[0] == Approx(0.75));
  CHECK(m.log_z == Approx(std::log(2.0)));
}

TEST_CASE("kl to prior") {
  const NodeEvidence ev{{0.0}, {std::log(3.0)}};
  const TreeMarginals m = bp_infer(single_root(), with_rho(1, 0.5), ev);
  CHECK(kl_to_prior(m, ev) == Approx(0.75 * std::log(3.0) - std::log(2.0)));
  CHECK(kl_to_prior(m, ev) == Approx(0.1308).epsilon(1e-3));
  CHECK(kl_from_marginals(single_root(), with_rho(1, 0.5), m) == Approx(kl_to_prior(m, ev)));

  const TreeTopology t = five_nodes();
  const NodeEvidence flat{Vector(5, 0.0), Vector(5, 0.0)};
  const TreeMarginals mf = bp_infer(t, TreeParams::initial(3), flat);
  CHECK(kl_to_prior(mf, flat) == Approx(0.0).epsilon(1e-12));
}

TEST_CASE("flat evidence reproduces prior marginals") {
  const TreeTopology t = five_nodes();
  const TreeParams p = with_rho(3, 0.2);
  const TreeMarginals a = bp_infer(t, p, NodeEvidence{Vector(5, 0.0), Vector(5, 0.0)});
  const TreeMarginals b = prior_marginals(t, p);
  for (std::size_t j = 0; j < 5; ++j) CHECK(a.q1[j] == Approx(b.q1[j]));
  CHECK(a.q1[1] == Approx(0.2 * 0.9 + 0.8 * 0.1));
  CHECK(consistency_error(t, a) <= 1e-12);
}

TEST_CASE("negative high-state evidence at a leaf lowers its marginal") {
  const TreeTopology t = five_nodes();
  const TreeParams p = TreeParams::initial(3);
  NodeEvidence ev{Vector(5, 0.0), Vector(5, 0.0)};
  ev.high[4] = -6.0;
  const TreeMarginals prior = prior_marginals(t, p);
  const TreeMarginals m = bp_infer(t, p, ev);
  CHECK(m.q1[4] < prior.q1[4]);
  CHECK(m.q1[1] < prior.q1[1]);
}

TEST_CASE("theta update") {
  TreeTopology t;
  t.parent = {-1, -1, -1, -1};
  t.level = {1, 1, 1, 1};
  t.levels = 1;
  TreeMarginals m;
  m.q1 = {0.2, 0.4, 0.6, 0.8};
  m.qpair.assign(4, {0.0, 0.0, 0.0, 0.0});
  CHECK(update_theta(t, m, TreeParams::initial(1)).rho_root == Approx(0.5));

  TreeTopology t2;
  t2.parent = {-1, 0, 0};
  t2.level = {1, 2, 2};
  t2.levels = 2;
  TreeMarginals m2;
  m2.q1 = {0.5, 0.5, 0.5};
  m2.qpair = {std::array<double, 4>{0, 0, 0, 0}, {0.25, 0.25, 0.25, 0.25}, {0.25, 0.25, 0.25, 0.25}};
  const TreeParams up = update_theta(t2, m2, TreeParams::initial(2));
  CHECK(up.theta[1][0] == Approx(0.5));
  CHECK(up.theta[1][1] == Approx(0.5));
}

TEST_CASE("theta update keeps levels without parent mass") {
  TreeTopology t;
  t.parent = {-1, 0};
  t.level = {1, 2};
  t.levels = 2;
  TreeMarginals m;
  m.q1 = {0.0, 0.0};
  m.qpair = {std::array<double, 4>{0, 0, 0, 0}, {1.0, 0.0, 0.0, 0.0}};
  TreeParams prev = TreeParams::initial(2);
  prev.theta[1][1] = 0.77;
  const TreeParams up = update_theta(t, m, prev);
  CHECK(up.theta[1][1] == Approx(0.77));
  CHECK(up.theta[1][0] == Approx(kThetaMin));
  CHECK(up.rho_root == Approx(kThetaMin));
}

TEST_CASE("layout topology") {
  const WaveletLayout lay(8, 8, 3);
  const TreeTopology t = TreeTopology::from_layout(lay);
  CHECK(t.size() == 63);
  CHECK(t.levels == 3);
  int roots = 0;
  for (std::size_t j = 0; j < t.size(); ++j) roots += t.is_root(j);
  CHECK(roots == 3);
  CHECK_NOTHROW(t.validate());
}

TEST_CASE("malformed topology and evidence are rejected") {
  TreeTopology t;
  t.parent = {-1, 1};
  t.level = {1, 2};
  t.levels = 2;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t.parent = {-1, -1};
  t.level = {1, 2};
  CHECK_THROWS_AS(t.validate(), ConfigError);
  CHECK_THROWS_AS(bp_infer(five_nodes(), TreeParams::initial(3), NodeEvidence{Vector(4), Vector(4)}), ConfigError);
}

TEST_CASE("extreme evidence stays finite") {
  const TreeTopology t = five_nodes();
  NodeEvidence ev{Vector(5, 0.0), Vector(5, 0.0)};
  ev.high = {800.0, -900.0, 700.0, -750.0, 1000.0};
  const TreeMarginals m = bp_infer(t, TreeParams::initial(3), ev);
  CHECK(all_finite(m.q1));
  CHECK(std::isfinite(m.log_z));
  CHECK(kl_to_prior(m, ev) >= -1e-9);
}
