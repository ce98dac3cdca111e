#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <functional>
#include <random>

#include "vbtree/dense_bound.hpp"
#include "vbtree/inference.hpp"

using namespace vbtree;
using doctest::Approx;

namespace {

Vector smooth_image(int h, int w, std::uint64_t seed, double noise) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  Vector u(static_cast<std::size_t>(h * w));
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      u[static_cast<std::size_t>(r * w + c)] = 0.2 + 0.5 * (r > h / 3 && c < 2 * w / 3) + 0.01 * c + noise * n01(rng);
  return u;
}

Problem denoise_problem(int h, int w, int levels, double sigma2, std::uint64_t seed) {
  return Problem(WaveletLayout(h, w, levels), ObservationOp::identity(static_cast<std::size_t>(h * w), sigma2),
                 smooth_image(h, w, seed, std::sqrt(sigma2)));
}

Problem inpaint_problem(int h, int w, int levels, double sigma2, std::uint64_t seed) {
  const std::size_t n = static_cast<std::size_t>(h * w);
  std::vector<std::size_t> kept;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < n; ++i)
    if (rng() % 3 == 0) kept.push_back(i);
  const Vector full = smooth_image(h, w, seed, 0.0);
  Vector y;
  for (std::size_t i : kept) y.push_back(full[i]);
  return Problem(WaveletLayout(h, w, levels), ObservationOp::mask(n, kept, sigma2), y);
}

ModelConfig config_for(const std::string& model, int levels, double sigma2) {
  ModelConfig c = ModelConfig::from_model_name(model);
  c.levels = levels;
  c.sigma2 = sigma2;
  return c;
}

// 1-D minimization of a convex function by golden-section search.
double argmin_convex(const std::function<double(double)>& f, double a, double b) {
  const double g = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = b - g * (b - a), d = a + g * (b - a);
  while (b - a > 1e-14 * (1.0 + std::fabs(a) + std::fabs(b))) {
    if (f(c) < f(d)) b = d;
    else a = c;
    c = b - g * (b - a);
    d = a + g * (b - a);
  }
  return 0.5 * (a + b);
}

}  // namespace

TEST_CASE("model names") {
  for (const char* m : {"lap-fact", "t-fact", "lap-tree", "t-tree"})
    CHECK(ModelConfig::from_model_name(m).model_name() == m);
  CHECK(ModelConfig::from_model_name("lap-tree").is_tree());
  CHECK_FALSE(ModelConfig::from_model_name("t-fact").is_tree());
  CHECK_THROWS_AS(ModelConfig::from_model_name("gauss"), ConfigError);
  ModelConfig bad = ModelConfig::from_model_name("lap-fact");
  bad.family = PotentialFamily::LaplacePair;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = ModelConfig::from_model_name("lap-fact");
  bad.budgets.outer = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("missing pixels are filled with the observed mean") {
  const ObservationOp mk = ObservationOp::mask(4, {0, 3}, 1.0);
  const Problem p(WaveletLayout(2, 2, 1), mk, Vector{1.0, 3.0});
  CHECK(p.filled_observation() == Vector{1.0, 2.0, 2.0, 3.0});
  CHECK_THROWS_AS(Problem(WaveletLayout(2, 2, 1), mk, Vector{1.0}), DimensionError);
}

TEST_CASE("effective precision") {
  const Problem prob = denoise_problem(8, 8, 2, 0.01, 1);
  ModelConfig cfg = config_for("lap-fact", 2, 0.01);
  Hypers h;
  h.low = {PotentialSpec::gaussian(3.0), PotentialSpec::gaussian(3.0)};
  h.xi_scaling = 3.0;
  VariationalState st = make_initial_state(prob, cfg, h);
  for (double v : effective_pi(prob, cfg, st)) CHECK(v == Approx(3.0));

  ModelConfig tree = config_for("lap-tree", 2, 0.01);
  Hypers ht;
  ht.low = {PotentialSpec::laplace(10.0), PotentialSpec::laplace(10.0)};
  ht.high = {PotentialSpec::laplace(0.5), PotentialSpec::laplace(0.7)};
  ht.tree = TreeParams::initial(2);
  VariationalState s2 = make_initial_state(prob, tree, ht);
  std::fill(s2.marginals.q1.begin(), s2.marginals.q1.end(), 1.0);
  const Vector pi = effective_pi(prob, tree, s2);
  for (std::size_t j = prob.layout.scaling_count(); j < prob.n(); ++j) {
    const double tau = prob.layout.level(j) == 1 ? 0.5 : 0.7;
    CHECK(pi[j] == Approx(tau / s2.p(j)));
  }
  // Equal potentials in both states collapse to the single-potential value.
  ht.high = ht.low;
  VariationalState s3 = make_initial_state(prob, tree, ht);
  std::fill(s3.marginals.q1.begin(), s3.marginals.q1.end(), 0.5);
  const Vector pi3 = effective_pi(prob, tree, s3);
  for (std::size_t j = prob.layout.scaling_count(); j < prob.n(); ++j) CHECK(pi3[j] == Approx(10.0 / s3.p(j)));
}

TEST_CASE("gaussian potentials shrink every pixel uniformly") {
  const double sigma2 = 0.2, xi = 3.0;
  const Problem prob(WaveletLayout(2, 2, 1), ObservationOp::identity(4, sigma2), Vector{0.3, -1.0, 2.0, 0.5});
  ModelConfig cfg = config_for("lap-fact", 1, sigma2);
  Hypers h;
  h.low = {PotentialSpec::gaussian(xi)};
  h.xi_scaling = xi;
  VariationalState st = make_initial_state(prob, cfg, h);
  inner_pls(prob, cfg, st);
  for (std::size_t i = 0; i < 4; ++i) CHECK(st.u[i] == Approx(prob.y[i] / (1.0 + sigma2 * xi)).epsilon(1e-8));
}

TEST_CASE("flat potentials leave the data untouched") {
  const Problem prob = denoise_problem(8, 8, 3, 0.01, 2);
  ModelConfig cfg = config_for("lap-fact", 3, 0.01);
  Hypers h;
  h.low.assign(3, PotentialSpec::laplace(1e-6));
  h.xi_scaling = 1e-6;
  VariationalState st = make_initial_state(prob, cfg, h);
  for (double& v : st.u) v = 0.0;
  forward(st.u, prob.layout, st.s);
  inner_pls(prob, cfg, st);
  for (std::size_t i = 0; i < prob.n(); ++i) CHECK(st.u[i] == Approx(prob.y[i]).epsilon(1e-5));
}

TEST_CASE("pls gradient matches finite differences") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n01;
  for (const char* model : {"lap-fact", "t-fact", "lap-tree", "t-tree"}) {
    const Problem prob = inpaint_problem(8, 8, 3, 1e-3, 5);
    const ModelConfig cfg = config_for(model, 3, 1e-3);
    VariationalState st = make_initial_state(prob, cfg, init_hypers(prob, cfg));
    for (double& v : st.z) v = 0.01 * std::exp(n01(rng));
    refit_tangents(prob, cfg, st);
    const PlsObjective obj(prob, cfg, st);
    Vector u = st.u, g(prob.n());
    for (double& v : u) v += 0.1 * n01(rng);
    obj.value_and_gradient(u, g);
    double err = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
      Vector a = u, b = u;
      a[i] += 1e-5;
      b[i] -= 1e-5;
      const double fd = (obj.value(a) - obj.value(b)) / 2e-5;
      err += (fd - g[i]) * (fd - g[i]);
    }
    CHECK(std::sqrt(err) / norm2(g) <= 1e-5);
  }
}

TEST_CASE("phi_inner matches a direct evaluation") {
  const Problem prob = inpaint_problem(8, 8, 3, 1e-3, 6);
  for (const char* model : {"lap-fact", "t-tree", "lap-tree"}) {
    const ModelConfig cfg = config_for(model, 3, 1e-3);
    VariationalState st = make_initial_state(prob, cfg, init_hypers(prob, cfg));
    outer_refit(prob, cfg, st, VarianceSource::PerturbAndMap);
    inner_pls(prob, cfg, st);
    if (cfg.is_tree()) update_q_delta(prob, cfg, st);
    Vector xu(prob.obs.m());
    prob.obs.apply(st.u, xu);
    double direct = 0.0;
    for (std::size_t i = 0; i < xu.size(); ++i) direct += (prob.y[i] - xu[i]) * (prob.y[i] - xu[i]);
    direct /= prob.obs.sigma2();
    for (std::size_t j = 0; j < prob.n(); ++j) {
      const double p = st.p(j);
      const int l = prob.layout.level(j);
      if (l == 0) {
        direct += neg2_log(PotentialSpec::gaussian(st.hypers.xi_scaling), p);
        continue;
      }
      auto psi = [&](const PotentialSpec& pot, double e) {
        return pot.kind == PotentialKind::StudentT && e > 0.0 ? convexified_neg2_log(pot, e, p) : neg2_log(pot, p);
      };
      const double q = q_high(prob, cfg, st, j);
      direct += (1.0 - q) * psi(st.hypers.low[l - 1], st.e_low[j]);
      if (cfg.is_tree()) direct += q * psi(st.hypers.high[l - 1], st.e_high[j]);
    }
    if (cfg.is_tree()) direct += 2.0 * kl_to_prior(st.marginals, node_evidence(prob, cfg, st));
    CHECK(phi_inner(prob, cfg, st) == Approx(direct).epsilon(1e-10));
  }
}

TEST_CASE("update_q_delta does not increase phi_inner") {
  const Problem prob = denoise_problem(16, 16, 4, 0.01, 7);
  for (const char* model : {"lap-tree", "t-tree"}) {
    const ModelConfig cfg = config_for(model, 4, 0.01);
    VariationalState st = make_initial_state(prob, cfg, init_hypers(prob, cfg));
    outer_refit(prob, cfg, st, VarianceSource::ExactDenoising);
    inner_pls(prob, cfg, st);
    const double before = phi_inner(prob, cfg, st);
    update_q_delta(prob, cfg, st);
    CHECK(phi_inner(prob, cfg, st) <= before + 1e-8 * std::fabs(before));
  }
}

TEST_CASE("closed-form scale updates") {
  CHECK(*fit_laplace_rate(Vector(10, 1.0), Vector(10, 2.0)) == Approx(0.5));
  CHECK(*fit_gaussian_precision(Vector(10, 1.0), Vector(10, 2.0)) == Approx(0.25));
  CHECK_FALSE(fit_laplace_rate(Vector(3, 0.0), Vector(3, 1.0)).has_value());
  CHECK_FALSE(fit_student_tau(Vector(3, 0.0), Vector(3, 1.0), 2.1, 1.0).has_value());
}

TEST_CASE("student scale newton") {
  const double nu = 2.1;
  const auto one = fit_student_tau(Vector{1.0}, Vector{std::sqrt(nu)}, nu, 1.0);
  REQUIRE(one.has_value());
  CHECK(std::fabs(one->gradient) <= 1e-10);
  // Stationarity (nu + 1) a / (1 + a) = 1 with a = tau p^2 / nu.
  CHECK(one->tau == Approx(1.0 / nu).epsilon(1e-10));

  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u01(0.05, 1.0);
  Vector q(40), p(40), p2(40);
  for (std::size_t i = 0; i < 40; ++i) {
    q[i] = u01(rng);
    p[i] = 3.0 * u01(rng);
    p2[i] = 2.0 * p[i];
  }
  const auto a = fit_student_tau(q, p, nu, 1.0), b = fit_student_tau(q, p2, nu, 1.0);
  REQUIRE(a.has_value());
  REQUIRE(b.has_value());
  CHECK(b->tau == Approx(a->tau / 4.0).epsilon(1e-10));
  CHECK(std::fabs(a->gradient) <= 1e-10);
}

TEST_CASE("factorial init recovers unit laplace rates") {
  const WaveletLayout lay(16, 16, 4);
  std::mt19937_64 rng(9);
  Vector s(lay.size(), 1.0);
  for (double& v : s) v = rng() % 2 ? 1.0 : -1.0;
  Vector y(lay.size());
  inverse(s, lay, y);
  const Problem prob(lay, ObservationOp::identity(lay.size(), 0.01), y);
  const Hypers h = init_hypers(prob, config_for("lap-fact", 4, 0.01));
  for (const PotentialSpec& pot : h.low) CHECK(pot.tau == Approx(1.0));
}

TEST_CASE("constant data falls back to unit scales") {
  const Problem prob(WaveletLayout(8, 8, 3), ObservationOp::identity(64, 0.01), Vector(64, 0.5));
  for (const PotentialSpec& pot : init_hypers(prob, config_for("lap-fact", 3, 0.01)).low) CHECK(pot.tau == 1.0);
}

TEST_CASE("tree EM increases the data log-prior") {
  const Problem prob = denoise_problem(32, 32, 5, 0.01, 10);
  for (const char* model : {"lap-tree", "t-tree"}) {
    InitReport rep;
    init_hypers(prob, config_for(model, 5, 0.01), &rep);
    REQUIRE(rep.log_prior_trace.size() == 6);
    for (std::size_t i = 1; i < rep.log_prior_trace.size(); ++i)
      CHECK(rep.log_prior_trace[i] >= rep.log_prior_trace[i - 1] - 1e-8 * std::fabs(rep.log_prior_trace[i - 1]));
  }
}

TEST_CASE("outer refit") {
  const Problem prob = denoise_problem(16, 16, 4, 0.01, 11);
  const ModelConfig cfg = config_for("t-tree", 4, 0.01);
  VariationalState st = make_initial_state(prob, cfg, init_hypers(prob, cfg));
  inner_pls(prob, cfg, st);
  const Vector pi = effective_pi(prob, cfg, st);
  outer_refit(prob, cfg, st, VarianceSource::ExactDenoising);
  const Vector exact = exact_variances_denoising(pi, 0.01);
  for (std::size_t j = 0; j < prob.n(); ++j) CHECK(st.z[j] == Approx(exact[j]));
  for (std::size_t j = prob.layout.scaling_count(); j < prob.n(); ++j) {
    const PotentialSpec& hi = st.hypers.high[static_cast<std::size_t>(prob.layout.level(j) - 1)];
    CHECK(std::fabs(convexified_neg2_log(hi, st.e_high[j], st.p(j)) - neg2_log(hi, st.p(j))) <= 1e-8);
  }
}

TEST_CASE("noiseless full observation is reproduced") {
  const double sigma2 = 1e-8;
  const Problem prob(WaveletLayout(16, 16, 4), ObservationOp::identity(256, sigma2), smooth_image(16, 16, 12, 0.0));
  ModelConfig cfg = config_for("lap-tree", 4, sigma2);
  cfg.budgets.outer = 3;
  const RunResult res = run(prob, cfg);
  double mse = 0.0;
  for (std::size_t i = 0; i < prob.n(); ++i) mse += std::pow(res.estimate.pixels[i] - prob.y[i], 2);
  CHECK(10.0 * std::log10(256.0 / mse) >= 60.0);
}

TEST_CASE("runs are deterministic") {
  const Problem prob = inpaint_problem(16, 16, 4, 1e-4, 13);
  ModelConfig cfg = config_for("t-tree", 4, 1e-4);
  cfg.budgets.outer = 3;
  cfg.threads = 2;
  const RunResult a = run(prob, cfg);
  cfg.threads = 1;
  const RunResult b = run(prob, cfg);
  CHECK(a.estimate.pixels == b.estimate.pixels);
  CHECK(a.phi_final == b.phi_final);
}

TEST_CASE("MAP factorial Laplace equals a per-coefficient minimizer") {
  const double sigma2 = 0.01;
  const Problem prob = denoise_problem(16, 16, 4, sigma2, 14);
  ModelConfig cfg = config_for("lap-fact", 4, sigma2);
  cfg.estimator = Estimator::MAP;
  cfg.learn_hypers = false;
  cfg.budgets.pls_iters = 2000;
  const Hypers h = init_hypers(prob, cfg);
  const RunResult res = run(prob, cfg, h);

  // With X = I the objective separates over wavelet coefficients.
  Vector b(prob.n());
  forward(prob.y, prob.layout, b);
  double ref = 0.0, got = 0.0;
  for (std::size_t j = 0; j < prob.n(); ++j) {
    const int l = prob.layout.level(j);
    const PotentialSpec pot = l == 0 ? PotentialSpec::gaussian(h.xi_scaling) : h.low[static_cast<std::size_t>(l - 1)];
    auto f = [&](double s) { return (b[j] - s) * (b[j] - s) / sigma2 + neg2_log(pot, std::sqrt(cfg.z_smooth + s * s)); };
    ref += f(argmin_convex(f, -std::fabs(b[j]) - 1.0, std::fabs(b[j]) + 1.0));
    got += f(res.state.s[j]);
  }
  CHECK(got - ref <= 1e-4);
  CHECK(got - ref >= -1e-9);
}

TEST_CASE("tree with identical state potentials degenerates to factorial") {
  const Problem prob = denoise_problem(16, 16, 4, 0.01, 15);
  ModelConfig fact = config_for("lap-fact", 4, 0.01);
  fact.learn_hypers = false;
  fact.budgets.outer = 4;
  ModelConfig tree = config_for("lap-tree", 4, 0.01);
  tree.learn_hypers = false;
  tree.budgets = fact.budgets;
  Hypers hf = init_hypers(prob, fact);
  Hypers ht = hf;
  ht.high = hf.low;
  ht.tree = TreeParams::initial(4);
  ht.tree.rho_root = 1.0 - kThetaMin;
  for (auto& row : ht.tree.theta) row = {1.0 - kThetaMin, 1.0 - kThetaMin};
  const RunResult a = run(prob, fact, hf);
  const RunResult b = run(prob, tree, ht);
  for (std::size_t i = 0; i < prob.n(); ++i) CHECK(a.estimate.pixels[i] == Approx(b.estimate.pixels[i]).epsilon(1e-6));
}

TEST_CASE("halving the MAP smoothing barely moves the estimate") {
  const Problem prob = denoise_problem(32, 32, 5, 0.01, 16);
  ModelConfig cfg = config_for("lap-tree", 5, 0.01);
  cfg.estimator = Estimator::MAP;
  const RunResult a = run(prob, cfg);
  cfg.z_smooth *= 0.5;
  const RunResult b = run(prob, cfg);
  const Vector truth = smooth_image(32, 32, 16, 0.0);
  auto mse = [&](const Vector& u) {
    double acc = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) acc += std::pow(std::clamp(u[i], 0.0, 1.0) - truth[i], 2);
    return acc / static_cast<double>(u.size());
  };
  CHECK(std::fabs(10.0 * std::log10(mse(a.estimate.pixels) / mse(b.estimate.pixels))) <= 0.05);
}

TEST_CASE("inner loop never increases phi_inner") {
  const Problem prob = inpaint_problem(16, 16, 4, 1e-3, 17);
  for (const char* model : {"lap-fact", "t-fact", "lap-tree", "t-tree"}) {
    ModelConfig cfg = config_for(model, 4, 1e-3);
    cfg.budgets.outer = 3;
    const RunResult res = run(prob, cfg);
    for (std::size_t i = 1; i < res.trace.size(); ++i) {
      if (res.trace[i].stage == "outer_refit" || res.trace[i].stage == "map_refit") continue;
      CHECK(res.trace[i].phi_inner <= res.trace[i - 1].phi_inner + 1e-8 * std::fabs(res.trace[i - 1].phi_inner));
    }
  }
}

TEST_CASE("dense bound decreases across outer iterations") {
  const Problem prob = denoise_problem(8, 8, 3, 0.05, 18);
  for (const char* model : {"lap-fact", "lap-tree"}) {
    ModelConfig cfg = config_for(model, 3, 0.05);
    cfg.learn_hypers = false;
    VariationalState st = make_initial_state(prob, cfg, init_hypers(prob, cfg));
    double prev = 1e300;
    for (int t = 0; t < 6; ++t) {
      outer_refit(prob, cfg, st, VarianceSource::ExactDenoising, t);
      const double bound = phi_dense(prob, cfg, st);
      CHECK(bound <= prev + 1e-8 * std::fabs(bound));
      prev = bound;
      for (int r = 0; r < 3; ++r) {
        inner_pls(prob, cfg, st);
        if (cfg.is_tree()) update_q_delta(prob, cfg, st);
      }
    }
  }
}

TEST_CASE("configuration errors name the failing stage") {
  const Problem prob = denoise_problem(8, 8, 3, 0.01, 19);
  ModelConfig cfg = config_for("lap-tree", 3, 0.01);
  Hypers h = init_hypers(prob, cfg);
  h.high.pop_back();
  try {
    run(prob, cfg, h);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("init_state") != std::string::npos);
  }
  cfg.levels = 2;
  CHECK_THROWS_AS(run(prob, cfg), ConfigError);
  const Problem big = denoise_problem(32, 32, 3, 0.01, 1);
  const ModelConfig fact = config_for("lap-fact", 3, 0.01);
  const VariationalState st = make_initial_state(big, fact, init_hypers(big, fact));
  CHECK_THROWS_AS(phi_dense(big, fact, st), ConfigError);
}
