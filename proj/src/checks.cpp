#include "vbtree/checks.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <numbers>
#include <random>
#include <sstream>

#include "vbtree/dense_bound.hpp"
#include "vbtree/inference.hpp"
#include "vbtree/linear_gauss.hpp"
#include "vbtree/potentials.hpp"
#include "vbtree/tree_model.hpp"
#include "vbtree/wavelet.hpp"

namespace vbtree {

namespace {

using Rng = std::mt19937_64;
using Clock = std::chrono::steady_clock;

double uniform(Rng& rng, double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); }
double log_uniform(Rng& rng, double a, double b) { return std::exp(uniform(rng, std::log(a), std::log(b))); }
int uniform_int(Rng& rng, int a, int b) { return std::uniform_int_distribution<int>(a, b)(rng); }
double gauss(Rng& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }

// Collects failed sub-checks and worst-case numbers for the detail line.
class Tally {
 public:
  void expect(bool ok, const std::string& what) {
    if (!ok && failures_.size() < 5) failures_.push_back(what);
    if (!ok) ++failed_;
  }
  void note(const std::string& key, double value) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%s=%.3g", key.c_str(), value);
    notes_.push_back(buf);
  }
  bool ok() const { return failed_ == 0; }
  std::string detail() const {
    std::ostringstream os;
    for (std::size_t i = 0; i < notes_.size(); ++i) os << (i ? " " : "") << notes_[i];
    if (failed_ > 0) {
      os << " | " << failed_ << " failed:";
      for (const std::string& f : failures_) os << " [" << f << "]";
    }
    return os.str();
  }

 private:
  int failed_ = 0;
  std::vector<std::string> failures_;
  std::vector<std::string> notes_;
};

CheckResult finish(int id, const char* name, const Tally& t, Clock::time_point t0) {
  CheckResult r;
  r.id = id;
  r.name = name;
  r.passed = t.ok();
  r.detail = t.detail();
  r.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  return r;
}

// Golden-section minimization of a unimodal function on [a, b].
double golden_min(const std::function<double(double)>& f, double a, double b, double tol = 1e-13) {
  const double g = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = b - g * (b - a), d = a + g * (b - a);
  double fc = f(c), fd = f(d);
  while (b - a > tol * (1.0 + std::fabs(a) + std::fabs(b))) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - g * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + g * (b - a);
      fd = f(d);
    }
  }
  return 0.5 * (a + b);
}

// Grid search over log gamma followed by golden refinement around the best
// grid point.
double brute_min_over_gamma(const std::function<double(double)>& f, double lo = 1e-14, double hi = 1e8) {
  const int n = 4000;
  const double a = std::log(lo), b = std::log(hi);
  int best = 0;
  double fbest = f(lo);
  for (int i = 1; i <= n; ++i) {
    const double v = f(std::exp(a + (b - a) * i / n));
    if (v < fbest) {
      fbest = v;
      best = i;
    }
  }
  const double left = a + (b - a) * std::max(best - 1, 0) / n;
  const double right = a + (b - a) * std::min(best + 1, n) / n;
  const double x = golden_min([&](double t) { return f(std::exp(t)); }, left, right, 1e-15);
  return std::min(fbest, f(std::exp(x)));
}

double adaptive_simpson(const std::function<double(double)>& f, double a, double b, double eps) {
  std::function<double(double, double, double, double, double, double, double, int)> rec =
      [&](double a0, double b0, double fa, double fm, double fb, double whole, double e, int depth) {
        const double m = 0.5 * (a0 + b0);
        const double lm = 0.5 * (a0 + m), rm = 0.5 * (m + b0);
        const double flm = f(lm), frm = f(rm);
        const double left = (m - a0) / 6.0 * (fa + 4.0 * flm + fm);
        const double right = (b0 - m) / 6.0 * (fm + 4.0 * frm + fb);
        if (depth <= 0 || std::fabs(left + right - whole) <= 15.0 * e)
          return left + right + (left + right - whole) / 15.0;
        return rec(a0, m, fa, flm, fm, left, 0.5 * e, depth - 1) + rec(m, b0, fm, frm, fb, right, 0.5 * e, depth - 1);
      };
  const double fa = f(a), fb = f(b), fm = f(0.5 * (a + b));
  return rec(a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4.0 * fm + fb), eps, 50);
}

Eigen::MatrixXd dense_transform(const WaveletLayout& layout) {
  const std::size_t n = layout.size();
  Eigen::MatrixXd B(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  Vector unit(n, 0.0), col(n);
  for (std::size_t k = 0; k < n; ++k) {
    unit[k] = 1.0;
    forward(unit, layout, col);
    for (std::size_t j = 0; j < n; ++j) B(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k)) = col[j];
    unit[k] = 0.0;
  }
  return B;
}

Eigen::MatrixXd dense_precision(const ObservationOp& obs, const Eigen::MatrixXd& B, const Vector& pi) {
  const auto n = B.rows();
  Eigen::VectorXd g(n), p(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    g(i) = obs.gram_diagonal()[static_cast<std::size_t>(i)] / obs.sigma2();
    p(i) = pi[static_cast<std::size_t>(i)];
  }
  Eigen::MatrixXd A = B.transpose() * p.asDiagonal() * B;
  A.diagonal() += g;
  return A;
}

Eigen::VectorXd to_eigen(const Vector& v) { return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())); }

ObservationOp random_mask(Rng& rng, std::size_t n, double keep, double sigma2) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < n; ++i)
    if (uniform(rng, 0.0, 1.0) < keep) idx.push_back(i);
  if (idx.empty()) idx.push_back(0);
  return ObservationOp::mask(n, std::move(idx), sigma2);
}

// ---------------------------------------------------------------- trees

TreeTopology random_forest(Rng& rng, int nodes, int max_level) {
  TreeTopology t;
  for (int i = 0; i < nodes; ++i) {
    std::vector<int> eligible;
    for (int j = 0; j < i; ++j)
      if (t.level[j] < max_level) eligible.push_back(j);
    if (eligible.empty() || uniform(rng, 0.0, 1.0) < 0.25) {
      t.parent.push_back(-1);
      t.level.push_back(1);
    } else {
      const int p = eligible[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(eligible.size()) - 1))];
      t.parent.push_back(p);
      t.level.push_back(t.level[p] + 1);
    }
  }
  t.levels = *std::max_element(t.level.begin(), t.level.end());
  return t;
}

TreeParams random_params(Rng& rng, int levels) {
  TreeParams p;
  p.rho_root = uniform(rng, 0.05, 0.95);
  p.theta.assign(static_cast<std::size_t>(levels), {0.5, 0.5});
  for (auto& row : p.theta) row = {uniform(rng, 0.02, 0.98), uniform(rng, 0.02, 0.98)};
  p.theta[0] = {p.rho_root, p.rho_root};
  return p;
}

NodeEvidence random_evidence(Rng& rng, std::size_t n, double scale) {
  NodeEvidence ev{Vector(n), Vector(n)};
  for (std::size_t j = 0; j < n; ++j) {
    ev.low[j] = scale * gauss(rng);
    ev.high[j] = scale * gauss(rng);
  }
  return ev;
}

struct Enumerated {
  Vector q1;
  std::vector<std::array<double, 4>> qpair;
  double log_z = 0.0;
  double kl = 0.0;
};

Enumerated enumerate_tree(const TreeTopology& t, const TreeParams& p, const NodeEvidence& ev) {
  const std::size_t n = t.size();
  const std::size_t total = std::size_t{1} << n;
  Vector logw(total), logprior(total);
  double mx = -1e300;
  for (std::size_t cfg = 0; cfg < total; ++cfg) {
    double lp = 0.0, le = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const int k = static_cast<int>((cfg >> j) & 1u);
      const int r = t.parent[j] < 0 ? 0 : static_cast<int>((cfg >> t.parent[j]) & 1u);
      const double p1 = p.prob_high(t.level[j], r);
      lp += std::log(k ? p1 : 1.0 - p1);
      le += k ? ev.high[j] : ev.low[j];
    }
    logprior[cfg] = lp;
    logw[cfg] = lp + le;
    mx = std::max(mx, logw[cfg]);
  }
  double z = 0.0;
  for (double v : logw) z += std::exp(v - mx);
  Enumerated e;
  e.log_z = mx + std::log(z);
  e.q1.assign(n, 0.0);
  e.qpair.assign(n, {0.0, 0.0, 0.0, 0.0});
  for (std::size_t cfg = 0; cfg < total; ++cfg) {
    const double q = std::exp(logw[cfg] - e.log_z);
    e.kl += q * (logw[cfg] - e.log_z - logprior[cfg]);
    for (std::size_t j = 0; j < n; ++j) {
      const int k = static_cast<int>((cfg >> j) & 1u);
      if (k) e.q1[j] += q;
      if (t.parent[j] >= 0) {
        const int r = static_cast<int>((cfg >> t.parent[j]) & 1u);
        e.qpair[j][static_cast<std::size_t>(2 * k + r)] += q;
      }
    }
  }
  return e;
}

// ------------------------------------------------------------ problems

Problem random_problem(Rng& rng, int h, int w, int levels, bool inpaint, double sigma2) {
  const std::size_t n = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  WaveletLayout layout(h, w, levels);
  // Piecewise-smooth test image plus noise.
  Image img(h, w);
  const double cx = uniform(rng, 0.2, 0.8) * w, cy = uniform(rng, 0.2, 0.8) * h, rad = uniform(rng, 0.2, 0.4) * h;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      img.at(r, c) = 0.3 + 0.4 * ((r - cy) * (r - cy) + (c - cx) * (c - cx) < rad * rad) + 0.1 * c / w;
  ObservationOp obs = inpaint ? random_mask(rng, n, 0.5, sigma2) : ObservationOp::identity(n, sigma2);
  Vector y(obs.m());
  obs.apply(img.pixels, y);
  const double sd = std::sqrt(inpaint ? 1e-3 : sigma2);
  for (double& v : y) v += sd * gauss(rng);
  return Problem(std::move(layout), std::move(obs), std::move(y));
}

}  // namespace

std::string format_check(const CheckResult& r) {
  char head[128];
  std::snprintf(head, sizeof head, "[%s] criterion %d %s (%.2f s): ", r.passed ? "PASS" : "FAIL", r.id, r.name.c_str(),
                r.seconds);
  return head + r.detail;
}

// 1. Perfect reconstruction and orthonormality of the transform.
CheckResult check_wavelet() {
  const auto t0 = Clock::now();
  Tally t;
  Rng rng(101);
  double worst_recon = 0.0, worst_norm = 0.0, worst_adj = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const int levels = uniform_int(rng, 1, 6);
    const int unit = 1 << levels;
    const int h = unit * uniform_int(rng, 1, 64 / unit);
    const int w = unit * uniform_int(rng, 1, 64 / unit);
    const WaveletLayout layout(h, w, levels);
    Image u(h, w), v(h, w);
    for (double& x : u.pixels) x = gauss(rng);
    for (double& x : v.pixels) x = gauss(rng);
    const Vector su = forward(u, layout);
    const Vector sv = forward(v, layout);
    const Image back = inverse(su, layout);
    double err = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
      err = std::max(err, std::fabs(back.pixels[i] - u.pixels[i]));
      scale = std::max(scale, std::fabs(u.pixels[i]));
    }
    worst_recon = std::max(worst_recon, err / scale);
    const double inner = dot(u.pixels, v.pixels);
    const double norm_err = std::fabs(norm2(su) - norm2(u.pixels)) / norm2(u.pixels);
    const double ip_err = std::fabs(dot(su, sv) - inner) / (norm2(u.pixels) * norm2(v.pixels));
    worst_norm = std::max({worst_norm, norm_err, ip_err});
    const Image bt = inverse(sv, layout);
    worst_adj = std::max(worst_adj, std::fabs(dot(su, sv) - dot(u.pixels, bt.pixels)) /
                                        (norm2(u.pixels) * norm2(v.pixels)));
  }
  t.expect(worst_recon <= 1e-10, "reconstruction");
  t.expect(worst_norm <= 1e-10, "inner products");
  t.expect(worst_adj <= 1e-10, "adjoint");
  // Dense B B^T = I on small layouts.
  double worst_gram = 0.0;
  for (auto [h, w, l] : {std::array<int, 3>{8, 8, 3}, {16, 8, 2}, {4, 16, 2}, {32, 32, 5}}) {
    const Eigen::MatrixXd B = dense_transform(WaveletLayout(h, w, l));
    worst_gram = std::max(worst_gram, (B * B.transpose() - Eigen::MatrixXd::Identity(B.rows(), B.cols())).cwiseAbs().maxCoeff());
  }
  t.expect(worst_gram <= 1e-10, "dense orthonormality");
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  t.expect(secs < 5.0, "runtime");
  t.note("recon", worst_recon);
  t.note("inner", worst_norm);
  t.note("gram", worst_gram);
  return finish(1, "wavelet", t, t0);
}

// 2. Scale-mixture tightness, Student's t convexification.
CheckResult check_potentials() {
  const auto t0 = Clock::now();
  Tally t;
  const std::vector<PotentialSpec> pots = {PotentialSpec::laplace(2.0), PotentialSpec::laplace(0.3),
                                           PotentialSpec::gaussian(1.5), PotentialSpec::student_t(1.0, 2.1),
                                           PotentialSpec::student_t(7.0, 2.1)};
  double worst_tight = 0.0;
  for (const PotentialSpec& pot : pots) {
    for (int i = 0; i <= 200; ++i) {
      const double s = -10.0 + 0.1 * i;
      const double target = neg2_log(pot, s);
      double best;
      if (pot.kind == PotentialKind::Gaussian) {
        // h is finite only at gamma = 1/xi; scan a grid containing it.
        best = std::numeric_limits<double>::infinity();
        for (int k = -200; k <= 200; ++k) {
          const double g = std::exp(0.05 * k) / pot.xi;
          best = std::min(best, s * s / g + h_dual(pot, g));
        }
      } else {
        best = brute_min_over_gamma([&](double g) { return s * s / g + h_dual(pot, g); });
      }
      worst_tight = std::max(worst_tight, std::fabs(best - target));
    }
  }
  t.expect(worst_tight <= 1e-6, "grid-min tightness");

  Rng rng(202);
  double worst_conv = 0.0, worst_major = 0.0, worst_tangent = 0.0;
  for (const PotentialSpec& pot : {PotentialSpec::student_t(1.0, 2.1), PotentialSpec::student_t(0.2, 2.1),
                                   PotentialSpec::student_t(12.0, 2.1)}) {
    const StudentSplit split = split_h(pot);
    for (int trial = 0; trial < 12; ++trial) {
      const double p0 = trial == 0 ? 0.0 : log_uniform(rng, 1e-3, 20.0);
      const double e = refit_tangent(pot, p0);
      worst_tangent = std::max(worst_tangent, std::fabs(convexified_neg2_log(pot, e, p0) - neg2_log(pot, p0)));
      for (int i = 0; i <= 200; ++i) {
        const double s = -10.0 + 0.1 * i;
        const double closed = convexified_neg2_log(pot, e, s);
        const double brute = brute_min_over_gamma(
            [&](double g) { return s * s / g + split.convex(g) + e * g - concave_conjugate(pot.nu, e); });
        worst_conv = std::max(worst_conv, std::fabs(closed - brute));
        worst_major = std::max(worst_major, neg2_log(pot, s) - closed);
      }
    }
  }
  t.expect(worst_conv <= 1e-6, "convexified closed form");
  t.expect(worst_major <= 1e-12, "majorization");
  t.expect(worst_tangent <= 1e-8, "tangency");
  t.note("tight", worst_tight);
  t.note("convex", worst_conv);
  t.note("major", std::max(worst_major, 0.0));
  t.note("tangent", worst_tangent);
  return finish(2, "potentials", t, t0);
}

// 3. Belief propagation against exhaustive enumeration.
CheckResult check_tree_bp() {
  const auto t0 = Clock::now();
  Tally t;
  Rng rng(303);
  double worst_q = 0.0, worst_z = 0.0, worst_kl = 0.0;
  int max_nodes = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int nodes = trial < 3 ? 1 : uniform_int(rng, 2, 18);
    max_nodes = std::max(max_nodes, nodes);
    const TreeTopology topo = random_forest(rng, nodes, 5);
    const TreeParams params = random_params(rng, topo.levels);
    const NodeEvidence ev = random_evidence(rng, topo.size(), trial % 2 ? 3.0 : 0.7);
    const TreeMarginals m = bp_infer(topo, params, ev);
    const Enumerated ex = enumerate_tree(topo, params, ev);
    for (std::size_t j = 0; j < topo.size(); ++j) {
      worst_q = std::max(worst_q, std::fabs(m.q1[j] - ex.q1[j]));
      if (!topo.is_root(j))
        for (int c = 0; c < 4; ++c) worst_q = std::max(worst_q, std::fabs(m.qpair[j][c] - ex.qpair[j][c]));
    }
    worst_z = std::max(worst_z, std::fabs(m.log_z - ex.log_z));
    worst_kl = std::max({worst_kl, std::fabs(kl_to_prior(m, ev) - ex.kl),
                         std::fabs(kl_from_marginals(topo, params, m) - ex.kl)});
  }
  t.expect(worst_q <= 1e-10, "marginals");
  t.expect(worst_z <= 1e-10, "log partition");
  t.expect(worst_kl <= 1e-9, "KL");
  t.note("q", worst_q);
  t.note("logZ", worst_z);
  t.note("kl", worst_kl);
  t.note("max_nodes", max_nodes);
  return finish(3, "tree-bp", t, t0);
}

// 4. PCG, exact variances and the Perturb&MAP sampler against dense algebra.
CheckResult check_linear_algebra() {
  const auto t0 = Clock::now();
  Tally t;
  Rng rng(404);

  double worst_cg = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const int h = 8 << uniform_int(rng, 0, 2);
    const int w = 8 << uniform_int(rng, 0, 2);
    const int levels = uniform_int(rng, 1, 3);
    const WaveletLayout layout(h, w, levels);
    const std::size_t n = layout.size();
    const ObservationOp obs = random_mask(rng, n, uniform(rng, 0.2, 0.8), log_uniform(rng, 1e-3, 1.0));
    Vector pi(n), rhs(n);
    for (double& v : pi) v = log_uniform(rng, 0.1, 100.0);
    for (double& v : rhs) v = gauss(rng);
    const PrecisionOp op(obs, layout, pi);
    const CgResult cg = pcg_solve(op, rhs, 1e-13, 20000);
    const Eigen::MatrixXd A = dense_precision(obs, dense_transform(layout), pi);
    const Eigen::VectorXd xd = A.llt().solve(to_eigen(rhs));
    worst_cg = std::max(worst_cg, (to_eigen(cg.x) - xd).norm() / xd.norm());
  }
  t.expect(worst_cg <= 1e-6, "pcg vs dense");

  double worst_var = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const WaveletLayout layout(8, 8, uniform_int(rng, 1, 3));
    const double sigma2 = log_uniform(rng, 1e-3, 1.0);
    const ObservationOp obs = ObservationOp::identity(64, sigma2);
    Vector pi(64);
    for (double& v : pi) v = log_uniform(rng, 1e-3, 1e4);
    const Eigen::MatrixXd B = dense_transform(layout);
    const Eigen::MatrixXd A = dense_precision(obs, B, pi);
    const Eigen::MatrixXd cov = B * A.inverse() * B.transpose();
    const Vector z = exact_variances_denoising(PrecisionOp(obs, layout, pi));
    for (Eigen::Index j = 0; j < 64; ++j)
      worst_var = std::max(worst_var, std::fabs(z[static_cast<std::size_t>(j)] - cov(j, j)) / cov(j, j));
  }
  t.expect(worst_var <= 1e-10, "exact variances");

  // Sampler bias with dense solves.
  const WaveletLayout layout(8, 8, 3);
  const ObservationOp obs = random_mask(rng, 64, 0.5, 0.05);
  Vector pi(64);
  for (double& v : pi) v = log_uniform(rng, 0.1, 50.0);
  const PrecisionOp op(obs, layout, pi);
  const Eigen::MatrixXd B = dense_transform(layout);
  const Eigen::MatrixXd A = dense_precision(obs, B, pi);
  const Eigen::LLT<Eigen::MatrixXd> llt(A);
  const Eigen::MatrixXd cov = B * A.inverse() * B.transpose();
  const int K = 10000;
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(64), sum_sq = Eigen::VectorXd::Zero(64);
  for (int k = 0; k < K; ++k) {
    const Vector r = perturbation_rhs(op, 77, static_cast<std::uint64_t>(k));
    const Eigen::VectorXd s = B * llt.solve(to_eigen(r));
    const Eigen::VectorXd s2 = s.cwiseProduct(s);
    sum += s2;
    sum_sq += s2.cwiseProduct(s2);
  }
  double worst_z = 0.0;
  for (Eigen::Index j = 0; j < 64; ++j) {
    const double mean = sum(j) / K;
    const double var = sum_sq(j) / K - mean * mean;
    const double se = std::sqrt(var / K);
    worst_z = std::max(worst_z, std::fabs(mean - cov(j, j)) / se);
  }
  t.expect(worst_z <= 5.0, "perturb-and-map bias");
  t.note("cg", worst_cg);
  t.note("var", worst_var);
  t.note("pm_max_se", worst_z);
  return finish(4, "linear-algebra", t, t0);
}

// 5. PLS gradient and inner-loop monotonicity.
CheckResult check_optimization() {
  const auto t0 = Clock::now();
  Tally t;
  Rng rng(505);
  const std::vector<std::string> models = {"lap-fact", "t-fact", "lap-tree", "t-tree"};

  double worst_grad = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    ModelConfig config = ModelConfig::from_model_name(models[static_cast<std::size_t>(trial % 4)]);
    config.levels = 3;
    config.sigma2 = 0.01;
    const Problem problem = random_problem(rng, 8, 8, 3, trial % 3 == 2, config.sigma2);
    VariationalState st = make_initial_state(problem, config, init_hypers(problem, config));
    for (double& v : st.u) v += 0.2 * gauss(rng);
    forward(st.u, problem.layout, st.s);
    for (double& v : st.z) v = log_uniform(rng, 1e-4, 1e-1);
    refit_tangents(problem, config, st);
    if (config.is_tree()) update_q_delta(problem, config, st);
    const PlsObjective obj(problem, config, st);
    Vector u(problem.n());
    for (double& v : u) v = uniform(rng, 0.0, 1.0);
    Vector g(problem.n());
    obj.value_and_gradient(u, g);
    Vector fd(problem.n());
    const double step = 1e-5;
    for (std::size_t i = 0; i < u.size(); ++i) {
      Vector up = u, um = u;
      up[i] += step;
      um[i] -= step;
      fd[i] = (obj.value(up) - obj.value(um)) / (2.0 * step);
    }
    double diff = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) diff += (g[i] - fd[i]) * (g[i] - fd[i]);
    worst_grad = std::max(worst_grad, std::sqrt(diff) / norm2(g));
  }
  t.expect(worst_grad <= 1e-5, "gradient");

  double worst_rise = 0.0;
  int steps = 0;
  for (const std::string& model : models) {
    for (bool inpaint : {false, true}) {
      ModelConfig config = ModelConfig::from_model_name(model);
      config.levels = 4;
      config.sigma2 = inpaint ? 1e-3 : 0.01;
      config.budgets.pm_samples = 20;
      config.budgets.pm_cg_iters = 60;
      const Problem problem = random_problem(rng, 16, 16, 4, inpaint, config.sigma2);
      VariationalState st = make_initial_state(problem, config, init_hypers(problem, config));
      const VarianceSource src = inpaint ? VarianceSource::PerturbAndMap : VarianceSource::ExactDenoising;
      for (int outer = 0; outer < 3; ++outer) {
        outer_refit(problem, config, st, src, outer);
        double prev = phi_inner(problem, config, st);
        auto step_check = [&](const char* stage) {
          const double cur = phi_inner(problem, config, st);
          const double rise = (cur - prev) / std::fabs(prev);
          worst_rise = std::max(worst_rise, rise);
          t.expect(rise <= 1e-8, model + (inpaint ? "/inpaint/" : "/denoise/") + stage);
          prev = cur;
          ++steps;
        };
        for (int round = 0; round < 3; ++round) {
          inner_pls(problem, config, st);
          step_check("pls");
          if (config.is_tree()) {
            update_q_delta(problem, config, st);
            step_check("bp");
          }
          update_hypers_closed_form(problem, config, st);
          step_check("hypers");
        }
      }
    }
  }
  t.note("grad_rel", worst_grad);
  t.note("max_rel_rise", worst_rise);
  t.note("steps", steps);
  return finish(5, "optimization", t, t0);
}

// 6. Hyperparameter updates against numeric minimizers; tree EM recovery.
CheckResult check_hyperparameters() {
  const auto t0 = Clock::now();
  Tally t;
  Rng rng(606);

  double worst_closed = 0.0, worst_stat = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 50;
    Vector q(n), p(n);
    for (double& v : q) v = uniform(rng, 0.0, 1.0);
    for (double& v : p) v = log_uniform(rng, 1e-2, 3.0);
    auto frag = [&](auto&& term) {
      return [&, term](double logx) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += q[j] * term(std::exp(logx), p[j]);
        return acc;
      };
    };
    const double tau = *fit_laplace_rate(q, p);
    const double tau_num = std::exp(golden_min(
        frag([](double x, double pj) { return neg2_log(PotentialSpec::laplace(x), pj); }), -15.0, 15.0));
    const double xi = *fit_gaussian_precision(q, p);
    const double xi_num = std::exp(golden_min(
        frag([](double x, double pj) { return neg2_log(PotentialSpec::gaussian(x), pj); }), -15.0, 15.0));
    worst_closed = std::max({worst_closed, std::fabs(tau - tau_num) / tau, std::fabs(xi - xi_num) / xi});

    const double nu = 2.1;
    const auto fit = fit_student_tau(q, p, nu, log_uniform(rng, 1e-2, 1e2));
    if (!fit) {
      t.expect(false, "student fit returned nothing");
      continue;
    }
    double grad = 0.0, mass = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double a = fit->tau * p[j] * p[j] / nu;
      grad += q[j] * ((nu + 1.0) * a / (1.0 + a) - 1.0);
      mass += q[j];
    }
    worst_stat = std::max(worst_stat, std::fabs(grad / mass));
  }
  t.expect(worst_closed <= 1e-6, "closed-form scales");
  t.expect(worst_stat <= 1e-10, "student stationarity");

  // Transition tables against 1-D minimization of -<log P(delta)>.
  double worst_theta = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    const TreeTopology topo = TreeTopology::from_layout(WaveletLayout(16, 16, 4));
    const TreeParams truth = random_params(rng, topo.levels);
    const TreeMarginals m = bp_infer(topo, truth, random_evidence(rng, topo.size(), 1.5));
    const TreeParams up = update_theta(topo, m, TreeParams::initial(topo.levels));
    TreeParams probe = up;
    const double rho = golden_min(
        [&](double x) {
          probe.rho_root = x;
          probe.theta[0] = {x, x};
          return -expected_log_prior(topo, probe, m);
        },
        kThetaMin, 1.0 - kThetaMin);
    probe = up;
    worst_theta = std::max(worst_theta, std::fabs(rho - up.rho_root));
    for (int l = 2; l <= topo.levels; ++l)
      for (int r = 0; r < 2; ++r) {
        const double v = golden_min(
            [&](double x) {
              probe.theta[static_cast<std::size_t>(l - 1)][static_cast<std::size_t>(r)] = x;
              return -expected_log_prior(topo, probe, m);
            },
            kThetaMin, 1.0 - kThetaMin);
        probe = up;
        worst_theta = std::max(worst_theta, std::fabs(v - up.theta[static_cast<std::size_t>(l - 1)][static_cast<std::size_t>(r)]));
      }
  }
  t.expect(worst_theta <= 1e-6, "theta update");

  // Tree EM on coefficients drawn from a known depth-6 model.
  const int levels = 6;
  const WaveletLayout layout(512, 512, levels);
  const TreeTopology topo = TreeTopology::from_layout(layout);
  TreeParams truth;
  truth.rho_root = 0.35;
  truth.theta.assign(levels, {0.15, 0.75});
  truth.theta[0] = {truth.rho_root, truth.rho_root};
  const double tau_low = 40.0, tau_high = 4.0;
  Vector s(layout.size());
  std::vector<int> state(topo.size());
  for (std::size_t j = 0; j < layout.scaling_count(); ++j) s[j] = 4.0 + gauss(rng);
  for (std::size_t i = 0; i < topo.size(); ++i) {
    const int r = topo.is_root(i) ? 0 : state[static_cast<std::size_t>(topo.parent[i])];
    state[i] = uniform(rng, 0.0, 1.0) < truth.prob_high(topo.level[i], r) ? 1 : 0;
    const double rate = state[i] ? tau_high : tau_low;
    const double mag = std::exponential_distribution<double>(rate)(rng);
    s[layout.scaling_count() + i] = uniform(rng, 0.0, 1.0) < 0.5 ? -mag : mag;
  }
  Vector y(layout.size());
  inverse(s, layout, y);
  const Problem problem(layout, ObservationOp::identity(layout.size(), 1e-4), y);
  ModelConfig config = ModelConfig::from_model_name("lap-tree");
  config.levels = levels;
  InitReport report;
  const Hypers h = init_hypers(problem, config, &report);
  double worst_em = std::fabs(h.tree.rho_root - truth.rho_root);
  for (int l = 2; l <= levels; ++l)
    for (int r = 0; r < 2; ++r)
      worst_em = std::max(worst_em, std::fabs(h.tree.theta[l - 1][r] - truth.theta[l - 1][r]));
  t.expect(worst_em <= 0.1, "tree EM recovery");
  double worst_drop = 0.0;
  for (std::size_t i = 1; i < report.log_prior_trace.size(); ++i)
    worst_drop = std::max(worst_drop, report.log_prior_trace[i - 1] - report.log_prior_trace[i]);
  t.expect(worst_drop <= 1e-8 * std::fabs(report.log_prior_trace.back()), "EM monotonicity");

  t.note("closed", worst_closed);
  t.note("student_grad", worst_stat);
  t.note("theta", worst_theta);
  t.note("em_theta_err", worst_em);
  return finish(6, "hyperparameters", t, t0);
}

namespace {

// -2 log P(y) for a model with n <= 2 built by hand. With n = 2, coefficient
// 0 is Gaussian and is integrated in closed form.
struct ToyModel {
  DenseModel dm;
  Vector tree_prior;  // P(delta = 1) of the single tree node, empty if none
};

double log_potential(const DenseCoefficient& c, int state, double s) {
  const PotentialSpec& pot = state == 1 ? *c.high : c.low;
  return -0.5 * neg2_log(pot, s);
}

double exact_neg2_log_evidence(const ToyModel& toy) {
  const DenseModel& dm = toy.dm;
  const auto n = dm.B.rows();
  const auto m = dm.X.rows();
  const double s2 = dm.sigma2;
  const std::size_t detail = n == 1 ? 0 : 1;
  const DenseCoefficient& c = dm.coeffs[detail];

  // Log marginal likelihood of y given the detail coefficient value.
  auto log_lik = [&](double sd) -> double {
    const Eigen::MatrixXd Bt = dm.B.transpose();
    const Eigen::VectorXd r0 = dm.y - dm.X * Bt.col(static_cast<Eigen::Index>(detail)) * sd;
    if (n == 1) return -0.5 * (static_cast<double>(m) * std::log(2.0 * std::numbers::pi * s2) + r0.squaredNorm() / s2);
    const double xi = dm.coeffs[0].low.xi;
    const Eigen::VectorXd a = dm.X * Bt.col(0);
    const double denom = 1.0 + a.squaredNorm() / (xi * s2);
    const double quad = r0.squaredNorm() / s2 - std::pow(a.dot(r0) / s2, 2) / (xi * denom);
    return -0.5 * (static_cast<double>(m) * std::log(2.0 * std::numbers::pi * s2) + std::log(denom) + quad);
  };

  std::vector<std::pair<double, int>> mix;  // (weight, state)
  if (toy.tree_prior.empty()) {
    mix.push_back({1.0, 0});
  } else {
    mix.push_back({1.0 - toy.tree_prior[0], 0});
    mix.push_back({toy.tree_prior[0], 1});
  }
  // Reference point for scaling the integrand.
  double ref = -1e300;
  for (int i = -400; i <= 400; ++i) {
    const double sd = 0.05 * i;
    for (auto [wt, st] : mix) ref = std::max(ref, log_lik(sd) + log_potential(c, st, sd));
  }
  double total = 0.0;
  for (auto [wt, st] : mix) {
    auto f = [&, st = st](double sd) { return std::exp(log_lik(sd) + log_potential(c, st, sd) - ref); };
    const double R = 200.0;
    double acc = 0.0;
    // Panels split at the Laplace cusp; finer near the origin.
    const std::vector<double> edges = {-R, -20.0, -5.0, -1.0, 0.0, 1.0, 5.0, 20.0, R};
    for (std::size_t k = 0; k + 1 < edges.size(); ++k) acc += adaptive_simpson(f, edges[k], edges[k + 1], 1e-15);
    total += wt * acc;
  }
  return -2.0 * (std::log(total) + ref);
}

// Dense double loop on the toy model; returns bound values along the way.
std::vector<double> toy_bound_trace(const ToyModel& toy, Rng& rng) {
  DenseModel dm = toy.dm;
  const auto n = dm.B.rows();
  const bool tree = dm.topology.size() > 0;
  Eigen::VectorXd u = dm.X.transpose() * dm.y;
  Eigen::VectorXd z = Eigen::VectorXd::Constant(n, dm.sigma2);
  std::vector<double> out;
  TreeMarginals m;
  auto refresh_q = [&] {
    if (!tree) return;
    const Eigen::VectorXd s = dm.B * u;
    NodeEvidence ev{Vector(1), Vector(1)};
    for (std::size_t j = 0; j < dm.coeffs.size(); ++j) {
      const DenseCoefficient& c = dm.coeffs[j];
      if (c.node < 0) continue;
      const double p = std::sqrt(z(static_cast<Eigen::Index>(j)) + s(static_cast<Eigen::Index>(j)) * s(static_cast<Eigen::Index>(j)));
      ev.low[0] = -0.5 * penalty_value_and_slope(c.low, p, c.e_low).value;
      ev.high[0] = -0.5 * penalty_value_and_slope(*c.high, p, c.e_high).value;
    }
    m = bp_infer(dm.topology, dm.tree, ev);
  };
  auto refit = [&] {
    const Eigen::VectorXd s = dm.B * u;
    for (std::size_t j = 0; j < dm.coeffs.size(); ++j) {
      DenseCoefficient& c = dm.coeffs[j];
      const double p = std::sqrt(z(static_cast<Eigen::Index>(j)) + s(static_cast<Eigen::Index>(j)) * s(static_cast<Eigen::Index>(j)));
      if (c.low.kind == PotentialKind::StudentT) c.e_low = refit_tangent(c.low, p);
      if (c.high && c.high->kind == PotentialKind::StudentT) c.e_high = refit_tangent(*c.high, p);
    }
  };
  refit();
  refresh_q();
  for (int it = 0; it < 40; ++it) {
    out.push_back(phi_dense(dm, u, z, tree ? &m : nullptr));
    const Eigen::VectorXd s = dm.B * u;
    Eigen::VectorXd pi(n);
    for (Eigen::Index j = 0; j < n; ++j) {
      const DenseCoefficient& c = dm.coeffs[static_cast<std::size_t>(j)];
      const double p = std::sqrt(z(j) + s(j) * s(j));
      const double q = (tree && c.node >= 0) ? m.q1[static_cast<std::size_t>(c.node)] : 0.0;
      pi(j) = (1.0 - q) * inverse_gamma(c.low, p, c.e_low) + (c.high ? q * inverse_gamma(*c.high, p, c.e_high) : 0.0);
    }
    const Eigen::MatrixXd A =
        dm.X.transpose() * dm.X / dm.sigma2 + dm.B.transpose() * pi.asDiagonal() * dm.B;
    const Eigen::MatrixXd Ainv = A.inverse();
    u = Ainv * dm.X.transpose() * dm.y / dm.sigma2;
    z = (dm.B * Ainv * dm.B.transpose()).diagonal();
    refit();
    refresh_q();
  }
  out.push_back(phi_dense(dm, u, z, tree ? &m : nullptr));
  // Random states: any (u, z, Q) yields an upper bound.
  for (int k = 0; k < 30; ++k) {
    Eigen::VectorXd ur(n), zr(n);
    for (Eigen::Index j = 0; j < n; ++j) {
      ur(j) = u(j) + gauss(rng);
      zr(j) = log_uniform(rng, 1e-6, 10.0);
    }
    if (tree) {
      NodeEvidence ev = random_evidence(rng, 1, 2.0);
      m = bp_infer(dm.topology, dm.tree, ev);
    }
    out.push_back(phi_dense(dm, ur, zr, tree ? &m : nullptr));
  }
  return out;
}

ToyModel toy_model(int n, bool masked, const std::vector<DenseCoefficient>& coeffs, double rho, double sigma2,
                   std::vector<double> y) {
  ToyModel toy;
  DenseModel& dm = toy.dm;
  if (n == 1) {
    dm.B = Eigen::MatrixXd::Identity(1, 1);
  } else {
    dm.B.resize(2, 2);
    dm.B << 1.0, 1.0, 1.0, -1.0;
    dm.B /= std::sqrt(2.0);
  }
  if (masked) {
    dm.X = Eigen::MatrixXd::Zero(1, n);
    dm.X(0, 0) = 1.0;
  } else {
    dm.X = Eigen::MatrixXd::Identity(n, n);
  }
  dm.y = Eigen::Map<Eigen::VectorXd>(y.data(), static_cast<Eigen::Index>(y.size()));
  dm.sigma2 = sigma2;
  dm.coeffs = coeffs;
  bool tree = false;
  for (const DenseCoefficient& c : coeffs) tree = tree || c.node >= 0;
  if (tree) {
    dm.topology.parent = {-1};
    dm.topology.level = {1};
    dm.topology.levels = 1;
    dm.tree = TreeParams::initial(1);
    dm.tree.rho_root = rho;
    dm.tree.theta[0] = {rho, rho};
    toy.tree_prior = {rho};
  }
  return toy;
}

}  // namespace

// 7. Bound validity on toy models with quadrature ground truth.
CheckResult check_bound() {
  const auto t0 = Clock::now();
  Tally t;
  Rng rng(707);

  // All-Gaussian: equality at the exact posterior.
  double worst_eq = 0.0;
  for (int n : {1, 2})
    for (bool masked : {false, true}) {
      if (n == 1 && masked) continue;
      std::vector<DenseCoefficient> cs(static_cast<std::size_t>(n));
      for (auto& c : cs) c.low = PotentialSpec::gaussian(log_uniform(rng, 0.3, 5.0));
      const double sigma2 = log_uniform(rng, 0.05, 1.0);
      std::vector<double> y;
      for (int i = 0; i < (masked ? 1 : n); ++i) y.push_back(gauss(rng));
      const ToyModel toy = toy_model(n, masked, cs, 0.5, sigma2, y);
      const DenseModel& dm = toy.dm;
      Eigen::VectorXd xi(n);
      for (int j = 0; j < n; ++j) xi(j) = cs[static_cast<std::size_t>(j)].low.xi;
      const Eigen::MatrixXd A = dm.X.transpose() * dm.X / sigma2 + dm.B.transpose() * xi.asDiagonal() * dm.B;
      const Eigen::MatrixXd Ainv = A.inverse();
      const Eigen::VectorXd u = Ainv * dm.X.transpose() * dm.y / sigma2;
      const Eigen::VectorXd z = (dm.B * Ainv * dm.B.transpose()).diagonal();
      const Eigen::MatrixXd C = dm.X * dm.B.transpose() * xi.cwiseInverse().asDiagonal() * dm.B * dm.X.transpose() +
                                sigma2 * Eigen::MatrixXd::Identity(dm.X.rows(), dm.X.rows());
      const double exact = static_cast<double>(dm.X.rows()) * std::log(2.0 * std::numbers::pi) +
                           std::log(C.determinant()) + dm.y.dot(C.inverse() * dm.y);
      worst_eq = std::max(worst_eq, std::fabs(phi_dense(dm, u, z, nullptr) - exact));
      worst_eq = std::max(worst_eq, std::fabs(exact_neg2_log_evidence(toy) - exact));
    }
  t.expect(worst_eq <= 1e-8, "gaussian equality");

  // Non-Gaussian toy models: bound never below the quadrature value.
  double worst_margin = 1e300;
  int cases = 0;
  auto lap = [](double tau) { DenseCoefficient c; c.low = PotentialSpec::laplace(tau); return c; };
  auto stu = [](double tau) { DenseCoefficient c; c.low = PotentialSpec::student_t(tau, 2.1); return c; };
  auto pair = [](PotentialSpec lo, PotentialSpec hi) {
    DenseCoefficient c;
    c.low = lo;
    c.high = hi;
    c.node = 0;
    return c;
  };
  DenseCoefficient scaling;
  scaling.low = PotentialSpec::gaussian(0.5);
  for (int rep = 0; rep < 3; ++rep) {
    const double sigma2 = log_uniform(rng, 0.02, 0.5);
    const double y1 = 2.0 * gauss(rng);
    const std::vector<double> y2 = {gauss(rng), 2.0 * gauss(rng)};
    const double rho = uniform(rng, 0.1, 0.9);
    std::vector<ToyModel> toys = {
        toy_model(1, false, {lap(log_uniform(rng, 0.5, 5.0))}, rho, sigma2, {y1}),
        toy_model(1, false, {stu(log_uniform(rng, 0.5, 5.0))}, rho, sigma2, {y1}),
        toy_model(1, false, {pair(PotentialSpec::laplace(8.0), PotentialSpec::laplace(0.7))}, rho, sigma2, {y1}),
        toy_model(2, false, {scaling, pair(PotentialSpec::laplace(6.0), PotentialSpec::laplace(0.5))}, rho, sigma2,
                  y2),
        toy_model(2, true, {scaling, pair(PotentialSpec::laplace(6.0), PotentialSpec::laplace(0.5))}, rho, sigma2,
                  {y2[0]}),
        toy_model(2, false, {scaling, pair(PotentialSpec::gaussian(20.0), PotentialSpec::student_t(1.0, 2.1))}, rho,
                  sigma2, y2),
        toy_model(2, false, {scaling, stu(2.0)}, rho, sigma2, y2),
    };
    for (const ToyModel& toy : toys) {
      const double exact = exact_neg2_log_evidence(toy);
      for (double b : toy_bound_trace(toy, rng)) worst_margin = std::min(worst_margin, b - exact);
      ++cases;
    }
  }
  t.expect(worst_margin >= -1e-6, "bound below evidence");
  t.note("gauss_eq", worst_eq);
  t.note("min_margin", worst_margin);
  t.note("models", cases);
  return finish(7, "bound", t, t0);
}

std::vector<CheckResult> run_core_checks(const std::vector<int>& ids) {
  const std::vector<std::function<CheckResult()>> all = {check_wavelet,     check_potentials,       check_tree_bp,
                                                         check_linear_algebra, check_optimization, check_hyperparameters,
                                                         check_bound};
  std::vector<CheckResult> out;
  for (std::size_t i = 0; i < all.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!ids.empty() && std::find(ids.begin(), ids.end(), id) == ids.end()) continue;
    try {
      out.push_back(all[i]());
    } catch (const std::exception& ex) {
      out.push_back(CheckResult{id, "check " + std::to_string(id), false, std::string("exception: ") + ex.what(), 0.0});
    }
  }
  return out;
}

}  // namespace vbtree
