#pragma once

// Super-Gaussian potentials t(s) written as
//   -2 log t(s) = min_{gamma >= 0} s^2 / gamma + h(gamma),
// together with the convex/concave split of the Student's t dual that keeps
// the inner penalized least squares problem convex.
//
// All densities are normalized: Laplace (tau/2) exp(-tau |s|), Gaussian
// N(0, 1/xi), Student's t with precision-like tau and shape nu.

#include <utility>

#include "vbtree/common.hpp"

namespace vbtree {

enum class PotentialKind { Laplace, StudentT, Gaussian };

const char* to_string(PotentialKind k);

struct PotentialSpec {
  PotentialKind kind = PotentialKind::Laplace;
  double tau = 1.0;  // Laplace rate or Student's t scale precision
  double nu = 2.1;   // Student's t shape
  double xi = 1.0;   // Gaussian precision

  static PotentialSpec laplace(double tau);
  static PotentialSpec student_t(double tau, double nu);
  static PotentialSpec gaussian(double xi);

  /// Throws ConfigError if a parameter is out of range.
  void validate() const;

  /// The single scale parameter that hyperparameter learning moves.
  double rate() const { return kind == PotentialKind::Gaussian ? xi : tau; }
  void set_rate(double value);
};

/// Smallest gamma returned by gamma_min (keeps 1/gamma finite at s = 0).
inline constexpr double kGammaFloor = 1e-12;

double neg2_log(const PotentialSpec& pot, double s);
double gamma_min(const PotentialSpec& pot, double s);
/// Throws ConfigError for gamma <= 0. Gaussian returns +inf away from 1/xi.
double h_dual(const PotentialSpec& pot, double gamma);

/// Student's t constant C(nu, tau) shared by h and its convex part.
double student_log_const(double tau, double nu);

struct StudentSplit {
  double tau;
  double nu;
  double convex(double gamma) const;   // nu / (tau gamma) + C
  double concave(double gamma) const;  // (nu + 1) log gamma
};

/// Throws ConfigError unless kind is StudentT.
StudentSplit split_h(const PotentialSpec& pot);

/// Concave conjugate g*(e) of (nu + 1) log gamma.
double concave_conjugate(double nu, double e);

/// Tangent slope e touching the concave part at gamma_min(pot, p).
double refit_tangent(const PotentialSpec& pot, double p);

/// min_gamma s^2/gamma + h_convex(gamma) + e gamma - g*(e); majorizes
/// neg2_log and touches it where e was refit.
double convexified_neg2_log(const PotentialSpec& pot, double e, double s);

struct PenaltyValue {
  double value;
  double slope;  // d value / dp
};

/// Penalty psi(p) and its derivative for p > 0. A positive `tangent` selects
/// the convexified Student's t form; it is ignored for other kinds.
PenaltyValue penalty_value_and_slope(const PotentialSpec& pot, double p, double tangent = 0.0);

/// 1 / gamma* at p, i.e. psi'(p) / (2 p), for the penalty actually in use.
/// The p -> 0 limit of Laplace is clamped via kGammaFloor.
double inverse_gamma(const PotentialSpec& pot, double p, double tangent = 0.0);

}  // namespace vbtree
