#include "vbtree/linear_gauss.hpp"

#include <algorithm>
#include <numeric>
#include <thread>

#include "vbtree/rng.hpp"

namespace vbtree {

ObservationOp ObservationOp::identity(std::size_t n, double sigma2) {
  if (!(sigma2 > 0.0)) throw ConfigError("noise variance must be positive");
  ObservationOp op;
  op.kind_ = Kind::Identity;
  op.n_ = n;
  op.sigma2_ = sigma2;
  op.gram_diag_.assign(n, 1.0);
  return op;
}

ObservationOp ObservationOp::mask(std::size_t n, std::vector<std::size_t> observed, double sigma2) {
  if (!(sigma2 > 0.0)) throw ConfigError("noise variance must be positive");
  std::sort(observed.begin(), observed.end());
  if (std::adjacent_find(observed.begin(), observed.end()) != observed.end())
    throw ConfigError("mask: duplicate observed index");
  if (!observed.empty() && observed.back() >= n) throw ConfigError("mask: observed index out of range");
  ObservationOp op;
  op.kind_ = Kind::Mask;
  op.n_ = n;
  op.sigma2_ = sigma2;
  op.observed_ = std::move(observed);
  op.gram_diag_.assign(n, 0.0);
  for (std::size_t i : op.observed_) op.gram_diag_[i] = 1.0;
  return op;
}

void ObservationOp::apply(std::span<const double> u, std::span<double> out) const {
  if (u.size() != n_ || out.size() != m()) throw DimensionError("observation apply: size mismatch");
  if (kind_ == Kind::Identity) {
    std::copy(u.begin(), u.end(), out.begin());
    return;
  }
  for (std::size_t i = 0; i < observed_.size(); ++i) out[i] = u[observed_[i]];
}

void ObservationOp::apply_transpose(std::span<const double> v, std::span<double> out) const {
  if (v.size() != m() || out.size() != n_) throw DimensionError("observation transpose: size mismatch");
  if (kind_ == Kind::Identity) {
    std::copy(v.begin(), v.end(), out.begin());
    return;
  }
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t i = 0; i < observed_.size(); ++i) out[observed_[i]] = v[i];
}

PrecisionOp::PrecisionOp(const ObservationOp& obs, const WaveletLayout& layout, Vector pi)
    : obs_(&obs), layout_(&layout), pi_(std::move(pi)) {
  if (obs.n() != layout.size() || pi_.size() != layout.size())
    throw DimensionError("precision operator: inconsistent sizes");
  for (double v : pi_)
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("precision operator: pi must be finite and >= 0");
}

void PrecisionOp::apply(std::span<const double> x, std::span<double> out) const {
  const std::size_t n = size();
  if (x.size() != n || out.size() != n) throw DimensionError("precision apply: size mismatch");
  Vector s(n);
  forward(x, *layout_, s);
  for (std::size_t j = 0; j < n; ++j) s[j] *= pi_[j];
  inverse(s, *layout_, out);
  const double inv_s2 = 1.0 / obs_->sigma2();
  const Vector& g = obs_->gram_diagonal();
  for (std::size_t i = 0; i < n; ++i) out[i] += inv_s2 * g[i] * x[i];
}

Vector PrecisionOp::apply(std::span<const double> x) const {
  Vector out(size());
  apply(x, out);
  return out;
}

Vector PrecisionOp::jacobi_diagonal() const {
  const double mean_pi = std::accumulate(pi_.begin(), pi_.end(), 0.0) / static_cast<double>(pi_.size());
  Vector d(size());
  const double inv_s2 = 1.0 / obs_->sigma2();
  const Vector& g = obs_->gram_diagonal();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = inv_s2 * g[i] + mean_pi;
  return d;
}

CgResult pcg_solve(const PrecisionOp& op, std::span<const double> rhs, double tol, int max_iters,
                   std::optional<std::span<const double>> x0) {
  const std::size_t n = op.size();
  if (rhs.size() != n) throw DimensionError("pcg: rhs length mismatch");
  if (!(tol > 0.0)) throw ConfigError("pcg: tolerance must be positive");

  CgResult res;
  res.x.assign(n, 0.0);
  const double rhs_norm = norm2(rhs);
  if (rhs_norm == 0.0) return res;

  Vector r(rhs.begin(), rhs.end());
  if (x0) {
    if (x0->size() != n) throw DimensionError("pcg: initial guess length mismatch");
    std::copy(x0->begin(), x0->end(), res.x.begin());
    const Vector ax = op.apply(res.x);
    for (std::size_t i = 0; i < n; ++i) r[i] -= ax[i];
  }
  const Vector diag = op.jacobi_diagonal();
  Vector zv(n), p(n), ap(n);
  for (std::size_t i = 0; i < n; ++i) zv[i] = r[i] / diag[i];
  p = zv;
  double rho = dot(r, zv);
  double rnorm = norm2(r);

  while (rnorm > tol * rhs_norm && res.iterations < max_iters) {
    op.apply(p, ap);
    const double curvature = dot(p, ap);
    if (!std::isfinite(curvature) || curvature <= 0.0)
      throw NumericalError("pcg: non-positive or non-finite curvature " + std::to_string(curvature));
    const double alpha = rho / curvature;
    for (std::size_t i = 0; i < n; ++i) {
      res.x[i] += alpha * p[i];
      r[i] -= alpha * ap[i];
      zv[i] = r[i] / diag[i];
    }
    const double rho_next = dot(r, zv);
    const double beta = rho_next / rho;
    rho = rho_next;
    for (std::size_t i = 0; i < n; ++i) p[i] = zv[i] + beta * p[i];
    rnorm = norm2(r);
    ++res.iterations;
    if (!std::isfinite(rnorm)) throw NumericalError("pcg: residual became non-finite");
  }
  res.relative_residual = rnorm / rhs_norm;
  return res;
}

Vector perturbation_rhs(const PrecisionOp& op, std::uint64_t seed, std::uint64_t k) {
  const ObservationOp& obs = op.observation();
  const std::size_t n = op.size();
  RngStream rng(seed, "pm", k);
  Vector e1(obs.m());
  for (double& v : e1) v = rng.normal();
  Vector e2(n);
  for (std::size_t j = 0; j < n; ++j) e2[j] = std::sqrt(op.pi()[j]) * rng.normal();

  Vector r(n);
  inverse(e2, op.layout(), r);
  Vector xt(n);
  obs.apply_transpose(e1, xt);
  const double inv_sigma = 1.0 / std::sqrt(obs.sigma2());
  for (std::size_t i = 0; i < n; ++i) r[i] += inv_sigma * xt[i];
  return r;
}

VarianceEstimate sample_variances(const PrecisionOp& op, int samples, int cg_iters, std::uint64_t seed,
                                  int threads, double cg_tol) {
  if (samples < 1) throw ConfigError("sample_variances: need at least one sample");
  if (cg_iters < 1) throw ConfigError("sample_variances: need at least one CG iteration");
  const std::size_t n = op.size();
  const int workers = std::max(1, std::min(threads, samples));

  VarianceEstimate est;
  est.z.assign(n, 0.0);

  struct Slot {
    Vector s;
    double residual = 0.0;
    int iterations = 0;
  };
  std::vector<Slot> batch(static_cast<std::size_t>(workers));
  auto run_one = [&](int k, Slot& slot) {
    const Vector r = perturbation_rhs(op, seed, static_cast<std::uint64_t>(k));
    CgResult cg = pcg_solve(op, r, cg_tol, cg_iters);
    slot.s.resize(n);
    forward(cg.x, op.layout(), slot.s);
    slot.residual = cg.relative_residual;
    slot.iterations = cg.iterations;
  };

  for (int base = 0; base < samples; base += workers) {
    const int count = std::min(workers, samples - base);
    if (count == 1) {
      run_one(base, batch[0]);
    } else {
      std::vector<std::jthread> pool;
      for (int w = 0; w < count; ++w) pool.emplace_back([&, w] { run_one(base + w, batch[w]); });
    }
    for (int w = 0; w < count; ++w) {
      const Slot& slot = batch[static_cast<std::size_t>(w)];
      for (std::size_t j = 0; j < n; ++j) est.z[j] += slot.s[j] * slot.s[j];
      est.worst_residual = std::max(est.worst_residual, slot.residual);
      est.total_cg_iterations += slot.iterations;
    }
  }
  const double inv_k = 1.0 / samples;
  for (double& v : est.z) v = std::max(v * inv_k, kVarianceFloor);
  return est;
}

Vector exact_variances_denoising(std::span<const double> pi, double sigma2) {
  if (!(sigma2 > 0.0)) throw ConfigError("noise variance must be positive");
  Vector z(pi.size());
  for (std::size_t j = 0; j < z.size(); ++j) z[j] = 1.0 / (1.0 / sigma2 + pi[j]);
  return z;
}

Vector exact_variances_denoising(const PrecisionOp& op) {
  if (op.observation().kind() != ObservationOp::Kind::Identity)
    throw ConfigError("exact variances require an identity observation operator");
  return exact_variances_denoising(op.pi(), op.observation().sigma2());
}

}  // namespace vbtree
