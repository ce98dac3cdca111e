#include "vbtree/potentials.hpp"

#include <limits>
#include <numbers>

namespace vbtree {

namespace {

double log_2pi() { return std::log(2.0 * std::numbers::pi); }

// -2 log of the Student's t normalizer without its tau dependence.
double student_k0(double nu) {
  return -2.0 * std::lgamma(0.5 * (nu + 1.0)) + 2.0 * std::lgamma(0.5 * nu) + std::log(nu * std::numbers::pi);
}

}  // namespace

const char* to_string(PotentialKind k) {
  switch (k) {
    case PotentialKind::Laplace: return "laplace";
    case PotentialKind::StudentT: return "student_t";
    case PotentialKind::Gaussian: return "gaussian";
  }
  return "?";
}

PotentialSpec PotentialSpec::laplace(double tau) {
  PotentialSpec p;
  p.kind = PotentialKind::Laplace;
  p.tau = tau;
  p.validate();
  return p;
}

PotentialSpec PotentialSpec::student_t(double tau, double nu) {
  PotentialSpec p;
  p.kind = PotentialKind::StudentT;
  p.tau = tau;
  p.nu = nu;
  p.validate();
  return p;
}

PotentialSpec PotentialSpec::gaussian(double xi) {
  PotentialSpec p;
  p.kind = PotentialKind::Gaussian;
  p.xi = xi;
  p.validate();
  return p;
}

void PotentialSpec::validate() const {
  auto positive = [](double v) { return std::isfinite(v) && v > 0.0; };
  switch (kind) {
    case PotentialKind::Laplace:
      if (!positive(tau)) throw ConfigError("Laplace potential needs tau > 0");
      break;
    case PotentialKind::StudentT:
      if (!positive(tau)) throw ConfigError("Student's t potential needs tau > 0");
      if (!positive(nu)) throw ConfigError("Student's t potential needs nu > 0");
      break;
    case PotentialKind::Gaussian:
      if (!positive(xi)) throw ConfigError("Gaussian potential needs xi > 0");
      break;
  }
}

void PotentialSpec::set_rate(double value) {
  if (kind == PotentialKind::Gaussian)
    xi = value;
  else
    tau = value;
}

double student_log_const(double tau, double nu) {
  return student_k0(nu) - (nu + 1.0) * std::log(nu / tau) - std::log(tau) - (nu + 1.0) +
         (nu + 1.0) * std::log(nu + 1.0);
}

double neg2_log(const PotentialSpec& pot, double s) {
  switch (pot.kind) {
    case PotentialKind::Laplace:
      return 2.0 * pot.tau * std::fabs(s) - 2.0 * std::log(0.5 * pot.tau);
    case PotentialKind::StudentT:
      return (pot.nu + 1.0) * std::log1p(pot.tau * s * s / pot.nu) - std::log(pot.tau) + student_k0(pot.nu);
    case PotentialKind::Gaussian:
      return pot.xi * s * s - std::log(pot.xi) + log_2pi();
  }
  return std::numeric_limits<double>::quiet_NaN();
}

double gamma_min(const PotentialSpec& pot, double s) {
  switch (pot.kind) {
    case PotentialKind::Laplace:
      return std::max(std::fabs(s) / pot.tau, kGammaFloor);
    case PotentialKind::StudentT:
      return (pot.nu / pot.tau + s * s) / (pot.nu + 1.0);
    case PotentialKind::Gaussian:
      return 1.0 / pot.xi;
  }
  return std::numeric_limits<double>::quiet_NaN();
}

double h_dual(const PotentialSpec& pot, double gamma) {
  if (!(gamma > 0.0)) throw ConfigError("h_dual: gamma must be positive");
  switch (pot.kind) {
    case PotentialKind::Laplace:
      return pot.tau * pot.tau * gamma - 2.0 * std::log(0.5 * pot.tau);
    case PotentialKind::StudentT:
      return pot.nu / (pot.tau * gamma) + (pot.nu + 1.0) * std::log(gamma) + student_log_const(pot.tau, pot.nu);
    case PotentialKind::Gaussian: {
      const double g0 = 1.0 / pot.xi;
      if (std::fabs(gamma - g0) > 1e-12 * g0) return std::numeric_limits<double>::infinity();
      return -std::log(pot.xi) + log_2pi();
    }
  }
  return std::numeric_limits<double>::quiet_NaN();
}

double StudentSplit::convex(double gamma) const { return nu / (tau * gamma) + student_log_const(tau, nu); }

double StudentSplit::concave(double gamma) const { return (nu + 1.0) * std::log(gamma); }

StudentSplit split_h(const PotentialSpec& pot) {
  if (pot.kind != PotentialKind::StudentT) throw ConfigError("split_h requires a Student's t potential");
  return StudentSplit{pot.tau, pot.nu};
}

double concave_conjugate(double nu, double e) {
  return (nu + 1.0) - (nu + 1.0) * std::log((nu + 1.0) / e);
}

double refit_tangent(const PotentialSpec& pot, double p) {
  if (pot.kind != PotentialKind::StudentT) throw ConfigError("refit_tangent requires a Student's t potential");
  return (pot.nu + 1.0) / gamma_min(pot, p);
}

double convexified_neg2_log(const PotentialSpec& pot, double e, double s) {
  if (pot.kind != PotentialKind::StudentT) throw ConfigError("convexified penalty requires a Student's t potential");
  if (!(e > 0.0)) throw ConfigError("convexified penalty needs a positive tangent");
  return 2.0 * std::sqrt(e * (s * s + pot.nu / pot.tau)) + student_log_const(pot.tau, pot.nu) -
         concave_conjugate(pot.nu, e);
}

PenaltyValue penalty_value_and_slope(const PotentialSpec& pot, double p, double tangent) {
  if (!(p > 0.0)) throw ConfigError("penalty evaluation needs p > 0");
  switch (pot.kind) {
    case PotentialKind::Laplace:
      return {neg2_log(pot, p), 2.0 * pot.tau};
    case PotentialKind::Gaussian:
      return {neg2_log(pot, p), 2.0 * pot.xi * p};
    case PotentialKind::StudentT: {
      const double x = p * p + pot.nu / pot.tau;
      if (tangent > 0.0) return {convexified_neg2_log(pot, tangent, p), 2.0 * std::sqrt(tangent) * p / std::sqrt(x)};
      return {neg2_log(pot, p), 2.0 * (pot.nu + 1.0) * p / x};
    }
  }
  return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
}

double inverse_gamma(const PotentialSpec& pot, double p, double tangent) {
  switch (pot.kind) {
    case PotentialKind::Laplace:
      return 1.0 / gamma_min(pot, p);
    case PotentialKind::Gaussian:
      return pot.xi;
    case PotentialKind::StudentT: {
      const double x = p * p + pot.nu / pot.tau;
      if (tangent > 0.0) return std::sqrt(tangent / x);
      return (pot.nu + 1.0) / x;
    }
  }
  return std::numeric_limits<double>::quiet_NaN();
}

}  // namespace vbtree
