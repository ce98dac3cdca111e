#include "vbtree/inference.hpp"

#include <algorithm>
#include <numbers>
#include <numeric>

#include "vbtree/rng.hpp"

namespace vbtree {

namespace {

double clamp_hyper(double v) { return std::clamp(v, kHyperMin, kHyperMax); }

bool low_is_student(const ModelConfig& c) { return c.family == PotentialFamily::StudentT; }
bool high_is_student(const ModelConfig& c) { return c.family == PotentialFamily::StudentGaussianPair; }

double log_2pi() { return std::log(2.0 * std::numbers::pi); }

// psi(p) = -2 log t(p) (or its convexified form) with the p-independent part
// folded into `offset`, which depends on the potential and the tangent.
struct FastPenalty {
  static double offset(const PotentialSpec& pot, double tangent) {
    switch (pot.kind) {
      case PotentialKind::Laplace: return -2.0 * std::log(0.5 * pot.tau);
      case PotentialKind::Gaussian: return -std::log(pot.xi) + log_2pi();
      case PotentialKind::StudentT:
        if (tangent > 0.0) return student_log_const(pot.tau, pot.nu) - concave_conjugate(pot.nu, tangent);
        // (nu+1) log(1 + tau p^2 / nu) - log tau + K0, rewritten around log(p^2 + nu/tau)
        return neg2_log(pot, 0.0) - (pot.nu + 1.0) * std::log(pot.nu / pot.tau);
    }
    return 0.0;
  }

  // Returns psi(p); writes psi'(p) / (2 p) to inv_gamma.
  static double eval(const PotentialSpec& pot, double tangent, double off, double p, double& inv_gamma) {
    switch (pot.kind) {
      case PotentialKind::Laplace:
        inv_gamma = pot.tau / p;
        return 2.0 * pot.tau * p + off;
      case PotentialKind::Gaussian:
        inv_gamma = pot.xi;
        return pot.xi * p * p + off;
      case PotentialKind::StudentT: {
        const double x = p * p + pot.nu / pot.tau;
        if (tangent > 0.0) {
          const double root = std::sqrt(tangent * x);
          inv_gamma = root / x;
          return 2.0 * root + off;
        }
        inv_gamma = (pot.nu + 1.0) / x;
        return (pot.nu + 1.0) * std::log(x) + off;
      }
    }
    inv_gamma = 0.0;
    return 0.0;
  }
};

std::vector<double> level_offsets(const std::vector<PotentialSpec>& pots) {
  std::vector<double> out(pots.size());
  for (std::size_t i = 0; i < pots.size(); ++i) out[i] = FastPenalty::offset(pots[i], 0.0);
  return out;
}

template <typename Fn>
void run_stage(const char* name, Fn&& fn) {
  try {
    fn();
  } catch (const std::exception& ex) {
    throw Error(std::string(name) + ": " + ex.what());
  }
}

struct LevelSums {
  double w = 0.0;
  double wp = 0.0;
  double wp2 = 0.0;
};

}  // namespace

// ---------------------------------------------------------------------------
// configuration

ModelConfig ModelConfig::from_model_name(const std::string& model) {
  ModelConfig c;
  if (model == "lap-fact") {
    c.structure = PriorStructure::Factorial;
    c.family = PotentialFamily::Laplace;
  } else if (model == "t-fact") {
    c.structure = PriorStructure::Factorial;
    c.family = PotentialFamily::StudentT;
  } else if (model == "lap-tree") {
    c.structure = PriorStructure::Tree;
    c.family = PotentialFamily::LaplacePair;
  } else if (model == "t-tree") {
    c.structure = PriorStructure::Tree;
    c.family = PotentialFamily::StudentGaussianPair;
  } else {
    throw ConfigError("unknown model '" + model + "' (expected lap-fact, t-fact, lap-tree or t-tree)");
  }
  return c;
}

std::string ModelConfig::model_name() const {
  switch (family) {
    case PotentialFamily::Laplace: return "lap-fact";
    case PotentialFamily::StudentT: return "t-fact";
    case PotentialFamily::LaplacePair: return "lap-tree";
    case PotentialFamily::StudentGaussianPair: return "t-tree";
  }
  return "?";
}

void ModelConfig::validate() const {
  const bool pair = family == PotentialFamily::LaplacePair || family == PotentialFamily::StudentGaussianPair;
  if (is_tree() != pair) throw ConfigError("tree priors need pair potentials and factorial priors single ones");
  if (levels < 1) throw ConfigError("levels must be >= 1");
  if (!(sigma2 > 0.0)) throw ConfigError("sigma2 must be positive");
  if (!(nu > 0.0)) throw ConfigError("nu must be positive");
  if (budgets.outer < 1 || budgets.inner_rounds < 1 || budgets.pls_iters < 1 || budgets.pm_samples < 1 ||
      budgets.pm_cg_iters < 1)
    throw ConfigError("iteration budgets must be positive");
  if (init_em_iters < 0) throw ConfigError("init_em_iters must be >= 0");
  if (!(z_smooth > 0.0)) throw ConfigError("z_smooth must be positive");
  if (threads < 1) throw ConfigError("threads must be >= 1");
}

// ---------------------------------------------------------------------------
// problem and state

Problem::Problem(WaveletLayout layout_in, ObservationOp obs_in, Vector y_in)
    : layout(std::move(layout_in)), obs(std::move(obs_in)), y(std::move(y_in)) {
  if (obs.n() != layout.size()) throw DimensionError("problem: operator size does not match the image");
  if (y.size() != obs.m()) throw DimensionError("problem: observation length does not match the operator");
  topology = TreeTopology::from_layout(layout);
}

Vector Problem::filled_observation() const {
  if (obs.kind() == ObservationOp::Kind::Identity) return y;
  const double mean = y.empty() ? 0.0 : std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
  Vector u(n(), mean);
  const auto& idx = obs.observed();
  for (std::size_t i = 0; i < idx.size(); ++i) u[idx[i]] = y[i];
  return u;
}

double q_high(const Problem& problem, const ModelConfig& config, const VariationalState& state, std::size_t j) {
  if (!config.is_tree() || problem.layout.is_scaling(j)) return 0.0;
  return state.marginals.q1[j - problem.layout.scaling_count()];
}

PenaltyValue coefficient_penalty(const Problem& problem, const ModelConfig& config, const VariationalState& state,
                                 std::size_t j, double p) {
  const int l = problem.layout.level(j);
  if (l == 0) return penalty_value_and_slope(PotentialSpec::gaussian(state.hypers.xi_scaling), p);
  const auto lv = static_cast<std::size_t>(l - 1);
  const double q = q_high(problem, config, state, j);
  const PenaltyValue lo = penalty_value_and_slope(state.hypers.low[lv], p, state.e_low[j]);
  if (q == 0.0) return lo;
  const PenaltyValue hi = penalty_value_and_slope(state.hypers.high[lv], p, state.e_high[j]);
  return {(1.0 - q) * lo.value + q * hi.value, (1.0 - q) * lo.slope + q * hi.slope};
}

void refit_tangents(const Problem& problem, const ModelConfig& config, VariationalState& state) {
  const std::size_t n = problem.n();
  state.e_low.assign(n, 0.0);
  state.e_high.assign(n, 0.0);
  const bool lo = low_is_student(config);
  const bool hi = high_is_student(config);
  if (!lo && !hi) return;
  for (std::size_t j = problem.layout.scaling_count(); j < n; ++j) {
    const auto lv = static_cast<std::size_t>(problem.layout.level(j) - 1);
    const double p = state.p(j);
    if (lo) state.e_low[j] = refit_tangent(state.hypers.low[lv], p);
    if (hi) state.e_high[j] = refit_tangent(state.hypers.high[lv], p);
  }
}

VariationalState make_initial_state(const Problem& problem, const ModelConfig& config, Hypers hypers) {
  config.validate();
  if (hypers.low.size() != static_cast<std::size_t>(problem.layout.levels()))
    throw ConfigError("hyperparameters do not match the wavelet depth");
  if (config.is_tree() && hypers.high.size() != hypers.low.size())
    throw ConfigError("tree models need a high-state potential per level");
  VariationalState st;
  st.hypers = std::move(hypers);
  st.u = problem.filled_observation();
  st.s.resize(problem.n());
  forward(st.u, problem.layout, st.s);
  st.z.assign(problem.n(), config.estimator == Estimator::VB ? config.sigma2 : config.z_smooth);
  refit_tangents(problem, config, st);
  if (config.is_tree()) update_q_delta(problem, config, st);
  return st;
}

Vector effective_pi(const Problem& problem, const ModelConfig& config, const VariationalState& state) {
  const std::size_t n = problem.n();
  Vector pi(n);
  for (std::size_t j = 0; j < n; ++j) {
    const int l = problem.layout.level(j);
    if (l == 0) {
      pi[j] = state.hypers.xi_scaling;
      continue;
    }
    const auto lv = static_cast<std::size_t>(l - 1);
    const double p = state.p(j);
    const double q = q_high(problem, config, state, j);
    double v = (1.0 - q) / gamma_min(state.hypers.low[lv], p);
    if (q > 0.0) v += q / gamma_min(state.hypers.high[lv], p);
    pi[j] = v;
  }
  return pi;
}

// ---------------------------------------------------------------------------
// penalized least squares

PlsObjective::PlsObjective(const Problem& problem, const ModelConfig& config, const VariationalState& state)
    : problem_(&problem), z_(state.z) {
  const std::size_t n = problem.n();
  const int levels = problem.layout.levels();
  low_.reserve(static_cast<std::size_t>(levels) + 1);
  low_.push_back(PotentialSpec::gaussian(state.hypers.xi_scaling));
  low_.insert(low_.end(), state.hypers.low.begin(), state.hypers.low.end());
  if (config.is_tree()) {
    high_.push_back(PotentialSpec::gaussian(1.0));
    high_.insert(high_.end(), state.hypers.high.begin(), state.hypers.high.end());
  }
  terms_.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    Term& t = terms_[j];
    t.level = problem.layout.level(j);
    t.q_high = q_high(problem, config, state, j);
    t.e_low = state.e_low[j];
    t.e_high = state.e_high[j];
  }
  offsets_low_ = level_offsets(low_);
  offsets_high_ = level_offsets(high_);
  // Student's t tangents shift the offset per coefficient.
  per_coeff_offset_ = low_is_student(config) || high_is_student(config);
  if (per_coeff_offset_) {
    coeff_offset_low_.assign(n, 0.0);
    coeff_offset_high_.assign(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      const auto l = static_cast<std::size_t>(terms_[j].level);
      coeff_offset_low_[j] = FastPenalty::offset(low_[l], terms_[j].e_low);
      if (!high_.empty()) coeff_offset_high_[j] = FastPenalty::offset(high_[l], terms_[j].e_high);
    }
  }
}

double PlsObjective::penalty_sum(std::span<const double> s, std::span<double> inv_gamma) const {
  const std::size_t n = terms_.size();
  if (s.size() != n) throw DimensionError("penalty_sum: coefficient length mismatch");
  const bool want = !inv_gamma.empty();
  if (want && inv_gamma.size() != n) throw DimensionError("penalty_sum: output length mismatch");
  double acc = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const Term& t = terms_[j];
    const double p = std::sqrt(z_[j] + s[j] * s[j]);
    const auto l = static_cast<std::size_t>(t.level);
    const double off_lo = per_coeff_offset_ ? coeff_offset_low_[j] : offsets_low_[l];
    double ig_lo = 0.0;
    double v = FastPenalty::eval(low_[l], t.e_low, off_lo, p, ig_lo);
    double ig = ig_lo;
    if (t.q_high > 0.0) {
      const double off_hi = per_coeff_offset_ ? coeff_offset_high_[j] : offsets_high_[l];
      double ig_hi = 0.0;
      const double vh = FastPenalty::eval(high_[l], t.e_high, off_hi, p, ig_hi);
      v = (1.0 - t.q_high) * v + t.q_high * vh;
      ig = (1.0 - t.q_high) * ig_lo + t.q_high * ig_hi;
    }
    acc += v;
    if (want) inv_gamma[j] = ig;
  }
  return acc;
}

double PlsObjective::value(std::span<const double> u) const {
  const Problem& pr = *problem_;
  Vector s(pr.n());
  forward(u, pr.layout, s);
  Vector xu(pr.obs.m());
  pr.obs.apply(u, xu);
  double data = 0.0;
  for (std::size_t i = 0; i < xu.size(); ++i) data += (pr.y[i] - xu[i]) * (pr.y[i] - xu[i]);
  return data / pr.obs.sigma2() + penalty_sum(s);
}

double PlsObjective::value_and_gradient(std::span<const double> u, std::span<double> grad) const {
  const Problem& pr = *problem_;
  const std::size_t n = pr.n();
  if (grad.size() != n) throw DimensionError("gradient length mismatch");
  Vector s(n);
  forward(u, pr.layout, s);
  Vector ig(n);
  const double pen = penalty_sum(s, ig);
  Vector xu(pr.obs.m());
  pr.obs.apply(u, xu);
  double data = 0.0;
  for (std::size_t i = 0; i < xu.size(); ++i) {
    xu[i] = pr.y[i] - xu[i];
    data += xu[i] * xu[i];
  }
  for (std::size_t j = 0; j < n; ++j) s[j] *= 2.0 * ig[j];
  inverse(s, pr.layout, grad);
  Vector xt(n);
  pr.obs.apply_transpose(xu, xt);
  const double c = 2.0 / pr.obs.sigma2();
  for (std::size_t i = 0; i < n; ++i) grad[i] -= c * xt[i];
  return data / pr.obs.sigma2() + pen;
}

PlsReport inner_pls(const Problem& problem, const ModelConfig& config, VariationalState& state) {
  const PlsObjective obj(problem, config, state);
  const std::size_t n = problem.n();
  const std::size_t m = problem.obs.m();
  const double inv_s2 = 1.0 / problem.obs.sigma2();

  Vector u = state.u;
  Vector s(n);
  forward(u, problem.layout, s);
  Vector resid(m);
  problem.obs.apply(u, resid);
  for (std::size_t i = 0; i < m; ++i) resid[i] = problem.y[i] - resid[i];

  Vector ig(n), grad(n), grad_old(n), dir(n), bd(n), xd(m), s_trial(n), tmp(n), xt(n);

  auto data_term = [&](double alpha) {
    double acc = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      const double r = resid[i] - alpha * xd[i];
      acc += r * r;
    }
    return acc * inv_s2;
  };
  // f at the current point; fills ig and grad.
  auto evaluate = [&]() {
    const double pen = obj.penalty_sum(s, ig);
    for (std::size_t j = 0; j < n; ++j) tmp[j] = 2.0 * ig[j] * s[j];
    inverse(tmp, problem.layout, grad);
    problem.obs.apply_transpose(resid, xt);
    for (std::size_t i = 0; i < n; ++i) grad[i] -= 2.0 * inv_s2 * xt[i];
    double data = 0.0;
    for (double r : resid) data += r * r;
    return data * inv_s2 + pen;
  };

  PlsReport rep;
  double f = evaluate();
  if (!std::isfinite(f)) throw NumericalError("penalized least squares: non-finite objective");
  rep.objective_before = f;
  const double g0 = norm2(grad);
  double gnorm = g0;
  for (std::size_t i = 0; i < n; ++i) dir[i] = -grad[i];
  int stalls = 0;

  while (rep.iterations < config.budgets.pls_iters && gnorm > config.pls_grad_tol * g0 && gnorm > 0.0) {
    forward(dir, problem.layout, bd);
    problem.obs.apply(dir, xd);
    double rx = 0.0, xx = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      rx += resid[i] * xd[i];
      xx += xd[i] * xd[i];
    }

    // Majorize-minimize along the line: every penalty is concave in p^2, so
    // the quadratic built from 1/gamma at the current trial step upper-bounds
    // it and its minimizer never increases f.
    double alpha = 0.0;
    double f_trial = f;
    for (int mm = 0; mm < 8; ++mm) {
      for (std::size_t j = 0; j < n; ++j) s_trial[j] = s[j] + alpha * bd[j];
      if (mm == 0) {
        std::copy(ig.begin(), ig.end(), tmp.begin());
      } else {
        obj.penalty_sum(s_trial, tmp);
      }
      double num = inv_s2 * rx;
      double den = inv_s2 * xx;
      for (std::size_t j = 0; j < n; ++j) {
        num -= tmp[j] * s[j] * bd[j];
        den += tmp[j] * bd[j] * bd[j];
      }
      if (!(den > 0.0)) break;
      const double next = num / den;
      const bool settled = std::fabs(next - alpha) <= 1e-6 * std::fabs(next);
      alpha = next;
      if (settled) break;
    }
    for (std::size_t j = 0; j < n; ++j) s_trial[j] = s[j] + alpha * bd[j];
    f_trial = data_term(alpha) + obj.penalty_sum(s_trial);
    if (!std::isfinite(f_trial)) throw NumericalError("penalized least squares: non-finite objective in line search");
    if (!(f_trial <= f)) {
      // Direction failed to descend; restart from steepest descent once.
      if (stalls++ > 0) break;
      for (std::size_t i = 0; i < n; ++i) dir[i] = -grad[i];
      continue;
    }

    for (std::size_t i = 0; i < n; ++i) u[i] += alpha * dir[i];
    s.swap(s_trial);
    for (std::size_t i = 0; i < m; ++i) resid[i] -= alpha * xd[i];
    grad_old.swap(grad);
    const double f_prev = f;
    f = evaluate();
    ++rep.iterations;
    gnorm = norm2(grad);

    if (f_prev - f <= 1e-15 * std::fabs(f)) {
      if (++stalls >= 3) break;
    } else {
      stalls = 0;
    }

    const double gg_old = dot(grad_old, grad_old);
    double beta = 0.0;
    if (gg_old > 0.0) {
      double num = 0.0;
      for (std::size_t i = 0; i < n; ++i) num += grad[i] * (grad[i] - grad_old[i]);
      beta = std::max(0.0, num / gg_old);
    }
    double slope = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      dir[i] = -grad[i] + beta * dir[i];
      slope += dir[i] * grad[i];
    }
    if (slope >= 0.0)
      for (std::size_t i = 0; i < n; ++i) dir[i] = -grad[i];
  }

  state.u = std::move(u);
  forward(state.u, problem.layout, state.s);
  rep.objective_after = obj.value(state.u);
  rep.gradient_norm = gnorm;
  return rep;
}

// ---------------------------------------------------------------------------
// Q(delta | y)

NodeEvidence node_evidence(const Problem& problem, const ModelConfig& config, const VariationalState& state) {
  if (!config.is_tree()) throw ConfigError("node evidence is only defined for tree models");
  const std::size_t offset = problem.layout.scaling_count();
  const std::size_t nodes = problem.layout.detail_count();
  NodeEvidence ev{Vector(nodes), Vector(nodes)};
  std::vector<double> off_lo = level_offsets(state.hypers.low);
  std::vector<double> off_hi = level_offsets(state.hypers.high);
  double ig = 0.0;
  for (std::size_t i = 0; i < nodes; ++i) {
    const std::size_t j = offset + i;
    const auto lv = static_cast<std::size_t>(problem.layout.level(j) - 1);
    const double p = state.p(j);
    const PotentialSpec& lo = state.hypers.low[lv];
    const PotentialSpec& hi = state.hypers.high[lv];
    const double olo = state.e_low[j] > 0.0 ? FastPenalty::offset(lo, state.e_low[j]) : off_lo[lv];
    const double ohi = state.e_high[j] > 0.0 ? FastPenalty::offset(hi, state.e_high[j]) : off_hi[lv];
    ev.low[i] = -0.5 * FastPenalty::eval(lo, state.e_low[j], olo, p, ig);
    ev.high[i] = -0.5 * FastPenalty::eval(hi, state.e_high[j], ohi, p, ig);
  }
  return ev;
}

void update_q_delta(const Problem& problem, const ModelConfig& config, VariationalState& state) {
  if (!config.is_tree()) return;
  state.marginals = bp_infer(problem.topology, state.hypers.tree, node_evidence(problem, config, state));
}

// ---------------------------------------------------------------------------
// hyperparameters

namespace {

std::optional<double> laplace_from_sums(const LevelSums& s) {
  if (!(s.w > 1e-300) || !(s.wp > 0.0)) return std::nullopt;
  return clamp_hyper(s.w / s.wp);
}

std::optional<double> gaussian_from_sums(const LevelSums& s) {
  if (!(s.w > 1e-300) || !(s.wp2 > 0.0)) return std::nullopt;
  return clamp_hyper(s.w / s.wp2);
}

LevelSums sums_of(std::span<const double> q, std::span<const double> p) {
  if (q.size() != p.size()) throw DimensionError("hyperparameter fit: weight/value length mismatch");
  LevelSums s;
  for (std::size_t i = 0; i < q.size(); ++i) {
    s.w += q[i];
    s.wp += q[i] * p[i];
    s.wp2 += q[i] * p[i] * p[i];
  }
  return s;
}

void apply_closed_form(PotentialSpec& pot, const LevelSums& sums) {
  std::optional<double> v;
  if (pot.kind == PotentialKind::Laplace) v = laplace_from_sums(sums);
  if (pot.kind == PotentialKind::Gaussian) v = gaussian_from_sums(sums);
  if (v) pot.set_rate(*v);
}

// Per-level weights and p values for the low (r = 0) or high (r = 1) state.
struct LevelData {
  std::vector<Vector> q;
  std::vector<Vector> p;
};

LevelData collect_levels(const Problem& problem, const ModelConfig& config, const VariationalState& state, int r,
                         bool raw_magnitudes) {
  const int levels = problem.layout.levels();
  LevelData d;
  d.q.resize(static_cast<std::size_t>(levels));
  d.p.resize(static_cast<std::size_t>(levels));
  for (int l = 1; l <= levels; ++l) {
    d.q[l - 1].reserve(problem.layout.level_count(l));
    d.p[l - 1].reserve(problem.layout.level_count(l));
  }
  for (std::size_t j = problem.layout.scaling_count(); j < problem.n(); ++j) {
    const auto lv = static_cast<std::size_t>(problem.layout.level(j) - 1);
    const double q1 = q_high(problem, config, state, j);
    d.q[lv].push_back(r == 1 ? q1 : 1.0 - q1);
    d.p[lv].push_back(raw_magnitudes ? std::fabs(state.s[j]) : state.p(j));
  }
  return d;
}

}  // namespace

std::optional<double> fit_laplace_rate(std::span<const double> q, std::span<const double> p) {
  return laplace_from_sums(sums_of(q, p));
}

std::optional<double> fit_gaussian_precision(std::span<const double> q, std::span<const double> p) {
  return gaussian_from_sums(sums_of(q, p));
}

std::optional<StudentTauFit> fit_student_tau(std::span<const double> q, std::span<const double> p, double nu,
                                             double tau0) {
  if (q.size() != p.size()) throw DimensionError("Student's t fit: weight/value length mismatch");
  double mass = 0.0;
  double data = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    mass += q[i];
    data += q[i] * p[i] * p[i];
  }
  if (!(mass > 1e-300) || !(data > 0.0)) return std::nullopt;

  const double lo = std::log(kHyperMin);
  const double hi = std::log(kHyperMax);
  auto derivs = [&](double lt, double& g, double& h) {
    const double t = std::exp(lt);
    g = 0.0;
    h = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) {
      if (q[i] == 0.0) continue;
      const double a = t * p[i] * p[i] / nu;
      const double frac = a / (1.0 + a);
      g += q[i] * ((nu + 1.0) * frac - 1.0);
      h += q[i] * (nu + 1.0) * frac / (1.0 + a);
    }
  };

  // Newton on log tau inside a shrinking bracket.
  double lt = std::clamp(std::log(tau0 > 0.0 ? tau0 : 1.0), lo, hi);
  double a = lo, b = hi;
  double g = 0.0, h = 0.0;
  int it = 0;
  for (; it < 200; ++it) {
    derivs(lt, g, h);
    if (std::fabs(g) <= 1e-14 * mass) break;
    (g < 0.0 ? a : b) = lt;
    double cand = h > 0.0 ? lt - g / h : 0.5 * (a + b);
    if (!(cand > a && cand < b)) cand = 0.5 * (a + b);
    if (cand == lt || b - a <= 1e-15 * (1.0 + std::fabs(lt))) break;
    lt = cand;
  }
  derivs(lt, g, h);
  return StudentTauFit{std::exp(lt), g / mass, it};
}

void update_hypers_closed_form(const Problem& problem, const ModelConfig& config, VariationalState& state) {
  const int levels = problem.layout.levels();
  std::vector<LevelSums> lo(static_cast<std::size_t>(levels)), hi(static_cast<std::size_t>(levels));
  double scal_w = 0.0, scal_p2 = 0.0;
  for (std::size_t j = 0; j < problem.n(); ++j) {
    const double p = state.p(j);
    const int l = problem.layout.level(j);
    if (l == 0) {
      scal_w += 1.0;
      scal_p2 += p * p;
      continue;
    }
    const double q1 = q_high(problem, config, state, j);
    LevelSums& a = lo[static_cast<std::size_t>(l - 1)];
    a.w += 1.0 - q1;
    a.wp += (1.0 - q1) * p;
    a.wp2 += (1.0 - q1) * p * p;
    if (config.is_tree()) {
      LevelSums& b = hi[static_cast<std::size_t>(l - 1)];
      b.w += q1;
      b.wp += q1 * p;
      b.wp2 += q1 * p * p;
    }
  }
  for (int l = 0; l < levels; ++l) {
    apply_closed_form(state.hypers.low[l], lo[l]);
    if (config.is_tree()) apply_closed_form(state.hypers.high[l], hi[l]);
  }
  if (scal_p2 > 0.0) state.hypers.xi_scaling = clamp_hyper(scal_w / scal_p2);
  if (config.is_tree()) state.hypers.tree = update_theta(problem.topology, state.marginals, state.hypers.tree);
}

void update_student_tau(const Problem& problem, const ModelConfig& config, VariationalState& state) {
  const bool lo = low_is_student(config);
  const bool hi = high_is_student(config);
  if (!lo && !hi) return;
  const LevelData d = collect_levels(problem, config, state, hi ? 1 : 0, false);
  for (std::size_t l = 0; l < d.q.size(); ++l) {
    PotentialSpec& pot = hi ? state.hypers.high[l] : state.hypers.low[l];
    if (auto fit = fit_student_tau(d.q[l], d.p[l], pot.nu, pot.tau)) pot.tau = clamp_hyper(fit->tau);
  }
}

Hypers init_hypers(const Problem& problem, const ModelConfig& config, InitReport* report) {
  config.validate();
  const WaveletLayout& layout = problem.layout;
  const int levels = layout.levels();
  if (config.levels != levels) throw ConfigError("configured depth does not match the problem layout");

  VariationalState raw;
  raw.u = problem.filled_observation();
  raw.s.resize(problem.n());
  forward(raw.u, layout, raw.s);
  raw.z.assign(problem.n(), 0.0);

  Hypers h;
  double scal_p2 = 0.0;
  for (std::size_t j = 0; j < layout.scaling_count(); ++j) scal_p2 += raw.s[j] * raw.s[j];
  h.xi_scaling = scal_p2 > 0.0 ? clamp_hyper(static_cast<double>(layout.scaling_count()) / scal_p2) : 1.0;

  // Moment fits of a single potential per level on |s| (q = 1).
  std::vector<double> lap(static_cast<std::size_t>(levels), 1.0);
  std::vector<double> gau(static_cast<std::size_t>(levels), 1.0);
  std::vector<double> stu(static_cast<std::size_t>(levels), 1.0);
  for (int l = 1; l <= levels; ++l) {
    Vector p;
    p.reserve(layout.level_count(l));
    const std::size_t begin = layout.band_offset(l, Orientation::H);
    for (std::size_t j = begin; j < begin + layout.level_count(l); ++j) p.push_back(std::fabs(raw.s[j]));
    const Vector q(p.size(), 1.0);
    if (auto v = fit_laplace_rate(q, p)) lap[l - 1] = *v;
    if (auto v = fit_gaussian_precision(q, p)) gau[l - 1] = *v;
    if (auto v = fit_student_tau(q, p, config.nu, 1.0)) stu[l - 1] = clamp_hyper(v->tau);
  }

  for (int l = 0; l < levels; ++l) {
    switch (config.family) {
      case PotentialFamily::Laplace:
        h.low.push_back(PotentialSpec::laplace(lap[l]));
        break;
      case PotentialFamily::StudentT:
        h.low.push_back(PotentialSpec::student_t(stu[l], config.nu));
        break;
      case PotentialFamily::LaplacePair:
        h.low.push_back(PotentialSpec::laplace(clamp_hyper(4.0 * lap[l])));
        h.high.push_back(PotentialSpec::laplace(clamp_hyper(0.5 * lap[l])));
        break;
      case PotentialFamily::StudentGaussianPair:
        h.low.push_back(PotentialSpec::gaussian(clamp_hyper(4.0 * gau[l])));
        h.high.push_back(PotentialSpec::student_t(stu[l], config.nu));
        break;
    }
  }
  if (!config.is_tree()) return h;

  // EM on the raw coefficients: E-step by BP with evidence log t_r(|s_j|),
  // M-step by the closed-form / Newton fits weighted with Q(delta_j = r).
  h.tree = TreeParams::initial(levels);
  ModelConfig em = config;
  em.learn_hypers = true;
  raw.hypers = h;
  raw.e_low.assign(problem.n(), 0.0);
  raw.e_high.assign(problem.n(), 0.0);

  double scaling_term = 0.0;
  for (std::size_t j = 0; j < layout.scaling_count(); ++j)
    scaling_term -= 0.5 * neg2_log(PotentialSpec::gaussian(h.xi_scaling), raw.s[j]);

  auto e_step = [&] {
    const std::size_t offset = layout.scaling_count();
    NodeEvidence ev{Vector(layout.detail_count()), Vector(layout.detail_count())};
    for (std::size_t i = 0; i < ev.size(); ++i) {
      const std::size_t j = offset + i;
      const auto lv = static_cast<std::size_t>(layout.level(j) - 1);
      ev.low[i] = -0.5 * neg2_log(raw.hypers.low[lv], raw.s[j]);
      ev.high[i] = -0.5 * neg2_log(raw.hypers.high[lv], raw.s[j]);
    }
    raw.marginals = bp_infer(problem.topology, raw.hypers.tree, ev);
    if (report) report->log_prior_trace.push_back(raw.marginals.log_z + scaling_term);
  };

  e_step();
  for (int it = 0; it < config.init_em_iters; ++it) {
    for (int r = 0; r < 2; ++r) {
      const LevelData d = collect_levels(problem, em, raw, r, true);
      for (int l = 0; l < levels; ++l) {
        PotentialSpec& pot = r == 0 ? raw.hypers.low[l] : raw.hypers.high[l];
        if (pot.kind == PotentialKind::StudentT) {
          if (auto v = fit_student_tau(d.q[l], d.p[l], pot.nu, pot.tau)) pot.tau = clamp_hyper(v->tau);
        } else {
          apply_closed_form(pot, sums_of(d.q[l], d.p[l]));
        }
      }
    }
    raw.hypers.tree = update_theta(problem.topology, raw.marginals, raw.hypers.tree);
    e_step();
  }
  return raw.hypers;
}

// ---------------------------------------------------------------------------
// bound and outer loop

double phi_inner(const Problem& problem, const ModelConfig& config, const VariationalState& state) {
  const PlsObjective obj(problem, config, state);
  Vector xu(problem.obs.m());
  problem.obs.apply(state.u, xu);
  double data = 0.0;
  for (std::size_t i = 0; i < xu.size(); ++i) data += (problem.y[i] - xu[i]) * (problem.y[i] - xu[i]);
  double value = data / problem.obs.sigma2() + obj.penalty_sum(state.s);
  if (config.is_tree()) value += 2.0 * kl_from_marginals(problem.topology, state.hypers.tree, state.marginals);
  return value;
}

RefitReport outer_refit(const Problem& problem, const ModelConfig& config, VariationalState& state,
                        VarianceSource source, int outer_index) {
  RefitReport rep;
  const PrecisionOp op(problem.obs, problem.layout, effective_pi(problem, config, state));
  if (source == VarianceSource::ExactDenoising) {
    state.z = exact_variances_denoising(op);
  } else {
    const std::uint64_t seed = RngStream::derive_key(config.seed, "outer", static_cast<std::uint64_t>(outer_index));
    VarianceEstimate est =
        sample_variances(op, config.budgets.pm_samples, config.budgets.pm_cg_iters, seed, config.threads);
    state.z = std::move(est.z);
    rep.worst_cg_residual = est.worst_residual;
    rep.cg_iterations = est.total_cg_iterations;
  }
  for (double& v : state.z) v = std::max(v, kVarianceFloor);
  if (config.learn_hypers) update_student_tau(problem, config, state);
  refit_tangents(problem, config, state);
  return rep;
}

RunResult run(const Problem& problem, const ModelConfig& config, std::optional<Hypers> hypers) {
  run_stage("config", [&] { config.validate(); });
  if (config.levels != problem.layout.levels()) throw ConfigError("config: depth does not match the problem layout");

  RunResult res;
  Hypers h;
  if (hypers) {
    h = std::move(*hypers);
  } else {
    run_stage("init_hypers", [&] { h = init_hypers(problem, config); });
  }
  VariationalState& st = res.state;
  run_stage("init_state", [&] { st = make_initial_state(problem, config, std::move(h)); });

  const bool vb = config.estimator == Estimator::VB;
  const VarianceSource source =
      problem.obs.kind() == ObservationOp::Kind::Identity && !config.force_sampling ? VarianceSource::ExactDenoising
                                                                                      : VarianceSource::PerturbAndMap;
  const int outer_budget = vb ? config.budgets.outer : 1;
  auto record = [&](int outer, int round, const char* stage, double grad = 0.0, double cg = 0.0) {
    const double phi = phi_inner(problem, config, st);
    res.trace.push_back(TraceEntry{outer, round, stage, phi, grad, cg});
    return phi;
  };

  for (int t = 0; t < outer_budget; ++t) {
    double cg_res = 0.0;
    if (vb) {
      run_stage("outer_refit", [&] {
        const RefitReport rr = outer_refit(problem, config, st, source, t);
        cg_res = rr.worst_cg_residual;
        res.cg_iterations += rr.cg_iterations;
        res.worst_cg_residual = std::max(res.worst_cg_residual, rr.worst_cg_residual);
      });
    } else {
      run_stage("map_refit", [&] {
        if (config.learn_hypers) update_student_tau(problem, config, st);
        refit_tangents(problem, config, st);
      });
    }
    double phi_prev = record(t, 0, "outer_refit", 0.0, cg_res);

    for (int round = 0; round < config.budgets.inner_rounds; ++round) {
      PlsReport pls;
      run_stage("inner_pls", [&] { pls = inner_pls(problem, config, st); });
      res.pls_iterations += pls.iterations;
      double phi = record(t, round, "pls", pls.gradient_norm);
      if (config.is_tree()) {
        run_stage("update_q_delta", [&] { update_q_delta(problem, config, st); });
        phi = record(t, round, "bp");
      }
      if (config.learn_hypers) {
        run_stage("update_hypers", [&] { update_hypers_closed_form(problem, config, st); });
        phi = record(t, round, "hypers");
      }
      st.phi_inner_trace.push_back(phi);
      const bool converged = std::fabs(phi_prev - phi) <= config.early_exit_tol * std::fabs(phi);
      phi_prev = phi;
      if (converged) break;
    }
    res.outer_iterations = t + 1;
  }

  res.phi_final = res.trace.empty() ? 0.0 : res.trace.back().phi_inner;
  res.estimate = Image(problem.layout.height(), problem.layout.width());
  res.estimate.pixels = st.u;
  return res;
}

}  // namespace vbtree
