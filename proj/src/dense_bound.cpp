#include "vbtree/dense_bound.hpp"

#include <numbers>

namespace vbtree {

namespace {

// Dual value h(gamma) of the penalty in use (convexified when tangent > 0).
double dual_in_use(const PotentialSpec& pot, double tangent, double gamma) {
  if (pot.kind == PotentialKind::StudentT && tangent > 0.0) {
    const StudentSplit split = split_h(pot);
    return split.convex(gamma) + tangent * gamma - concave_conjugate(pot.nu, tangent);
  }
  return h_dual(pot, gamma);
}

}  // namespace

DenseModel DenseModel::from_problem(const Problem& problem, const ModelConfig& config, const VariationalState& state) {
  const std::size_t n = problem.n();
  if (n > kMaxSize) throw ConfigError("dense bound: problem too large (" + std::to_string(n) + " pixels)");
  DenseModel dm;
  dm.B.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  Vector unit(n, 0.0), col(n);
  for (std::size_t k = 0; k < n; ++k) {
    unit[k] = 1.0;
    forward(unit, problem.layout, col);
    for (std::size_t j = 0; j < n; ++j) dm.B(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k)) = col[j];
    unit[k] = 0.0;
  }
  const std::size_t m = problem.obs.m();
  dm.X = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
  Vector xcol(m);
  for (std::size_t k = 0; k < n; ++k) {
    unit[k] = 1.0;
    problem.obs.apply(unit, xcol);
    for (std::size_t i = 0; i < m; ++i) dm.X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = xcol[i];
    unit[k] = 0.0;
  }
  dm.y = Eigen::Map<const Eigen::VectorXd>(problem.y.data(), static_cast<Eigen::Index>(m));
  dm.sigma2 = problem.obs.sigma2();

  const std::size_t offset = problem.layout.scaling_count();
  dm.coeffs.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    DenseCoefficient& c = dm.coeffs[j];
    const int l = problem.layout.level(j);
    if (l == 0) {
      c.low = PotentialSpec::gaussian(state.hypers.xi_scaling);
      continue;
    }
    c.low = state.hypers.low[static_cast<std::size_t>(l - 1)];
    c.e_low = state.e_low[j];
    if (config.is_tree()) {
      c.high = state.hypers.high[static_cast<std::size_t>(l - 1)];
      c.e_high = state.e_high[j];
      c.node = static_cast<int>(j - offset);
    }
  }
  if (config.is_tree()) {
    dm.topology = problem.topology;
    dm.tree = state.hypers.tree;
  }
  return dm;
}

double phi_dense(const DenseModel& model, const Eigen::VectorXd& u, const Eigen::VectorXd& z, const TreeMarginals* m) {
  const Eigen::Index n = model.B.rows();
  const Eigen::Index mobs = model.X.rows();
  if (u.size() != n || z.size() != n || static_cast<Eigen::Index>(model.coeffs.size()) != n)
    throw DimensionError("dense bound: size mismatch");
  const bool tree = model.topology.size() > 0;
  if (tree && m == nullptr) throw ConfigError("dense bound: tree model needs marginals");

  const Eigen::VectorXd s = model.B * u;
  Eigen::VectorXd pi(n);
  double quad = 0.0;
  double dual = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    const DenseCoefficient& c = model.coeffs[static_cast<std::size_t>(j)];
    const double p = std::sqrt(z(j) + s(j) * s(j));
    const double q = (c.node >= 0 && m) ? m->q1[static_cast<std::size_t>(c.node)] : 0.0;
    const double g0 = 1.0 / inverse_gamma(c.low, p, c.e_low);
    double pij = (1.0 - q) / g0;
    double hj = (1.0 - q) * dual_in_use(c.low, c.e_low, g0);
    if (c.high && q > 0.0) {
      const double g1 = 1.0 / inverse_gamma(*c.high, p, c.e_high);
      pij += q / g1;
      hj += q * dual_in_use(*c.high, c.e_high, g1);
    }
    pi(j) = pij;
    quad += pij * s(j) * s(j);
    dual += hj;
  }

  const Eigen::MatrixXd A = model.X.transpose() * model.X / model.sigma2 + model.B.transpose() * pi.asDiagonal() * model.B;
  const Eigen::LLT<Eigen::MatrixXd> llt(A);
  if (llt.info() != Eigen::Success) throw NumericalError("dense bound: A(pi) is not positive definite");
  const Eigen::MatrixXd L = llt.matrixL();
  double logdet = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) logdet += 2.0 * std::log(L(i, i));

  const double log2pi = std::log(2.0 * std::numbers::pi);
  const double data = (model.y - model.X * u).squaredNorm() / model.sigma2;
  double value = static_cast<double>(mobs) * (log2pi + std::log(model.sigma2)) - static_cast<double>(n) * log2pi +
                 data + quad + dual + logdet;
  if (tree) value += 2.0 * kl_from_marginals(model.topology, model.tree, *m);
  return value;
}

double phi_dense(const Problem& problem, const ModelConfig& config, const VariationalState& state) {
  const DenseModel dm = DenseModel::from_problem(problem, config, state);
  const Eigen::VectorXd u = Eigen::Map<const Eigen::VectorXd>(state.u.data(), static_cast<Eigen::Index>(state.u.size()));
  const Eigen::VectorXd z = Eigen::Map<const Eigen::VectorXd>(state.z.data(), static_cast<Eigen::Index>(state.z.size()));
  return phi_dense(dm, u, z, config.is_tree() ? &state.marginals : nullptr);
}

}  // namespace vbtree
