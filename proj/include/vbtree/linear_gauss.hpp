#pragma once

// Gaussian machinery of the model: the observation operator X, the
// matrix-free posterior precision A(pi) = X^T X / sigma^2 + B^T diag(pi) B,
// conjugate-gradient solves with A, and marginal variance estimates of the
// wavelet coefficients under N(u*, A^-1).

#include <cstdint>
#include <optional>

#include "vbtree/common.hpp"
#include "vbtree/wavelet.hpp"

namespace vbtree {

class ObservationOp {
 public:
  enum class Kind { Identity, Mask };

  static ObservationOp identity(std::size_t n, double sigma2);
  /// `observed` must hold distinct indices < n; they are stored sorted.
  static ObservationOp mask(std::size_t n, std::vector<std::size_t> observed, double sigma2);

  Kind kind() const { return kind_; }
  std::size_t n() const { return n_; }
  std::size_t m() const { return kind_ == Kind::Identity ? n_ : observed_.size(); }
  double sigma2() const { return sigma2_; }
  const std::vector<std::size_t>& observed() const { return observed_; }
  /// Diagonal of X^T X (0/1 entries).
  const Vector& gram_diagonal() const { return gram_diag_; }

  /// X u (length m).
  void apply(std::span<const double> u, std::span<double> out) const;
  /// X^T v (length n, zero at unobserved pixels).
  void apply_transpose(std::span<const double> v, std::span<double> out) const;

 private:
  Kind kind_ = Kind::Identity;
  std::size_t n_ = 0;
  double sigma2_ = 1.0;
  std::vector<std::size_t> observed_;
  Vector gram_diag_;
};

class PrecisionOp {
 public:
  PrecisionOp(const ObservationOp& obs, const WaveletLayout& layout, Vector pi);

  const ObservationOp& observation() const { return *obs_; }
  const WaveletLayout& layout() const { return *layout_; }
  const Vector& pi() const { return pi_; }
  std::size_t size() const { return layout_->size(); }

  void apply(std::span<const double> x, std::span<double> out) const;
  Vector apply(std::span<const double> x) const;

  /// Jacobi preconditioner: exact diagonal of X^T X / sigma^2 plus mean(pi).
  Vector jacobi_diagonal() const;

 private:
  const ObservationOp* obs_;
  const WaveletLayout* layout_;
  Vector pi_;
};

struct CgResult {
  Vector x;
  double relative_residual = 0.0;
  int iterations = 0;
};

/// Preconditioned CG. Stops at ||A x - rhs|| <= tol ||rhs|| or after
/// max_iters, reporting the residual either way. Throws NumericalError on
/// non-finite iterates.
CgResult pcg_solve(const PrecisionOp& op, std::span<const double> rhs, double tol, int max_iters,
                   std::optional<std::span<const double>> x0 = std::nullopt);

inline constexpr double kVarianceFloor = 1e-10;

struct VarianceEstimate {
  Vector z;
  double worst_residual = 0.0;
  long total_cg_iterations = 0;
};

/// Right-hand side r = X^T e1 / sigma + B^T (sqrt(pi) .* e2) with covariance
/// A(pi), drawn from the stream (seed, "pm", k).
Vector perturbation_rhs(const PrecisionOp& op, std::uint64_t seed, std::uint64_t k);

/// Perturb-and-MAP estimate of diag(B A^-1 B^T) from `samples` draws. Sample
/// k uses the stream (seed, "pm", k); the reduction runs in sample order, so
/// the result does not depend on `threads`.
VarianceEstimate sample_variances(const PrecisionOp& op, int samples, int cg_iters, std::uint64_t seed,
                                  int threads = 1, double cg_tol = 1e-10);

/// diag(B A^-1 B^T) = 1 / (1/sigma^2 + pi) when X = I.
Vector exact_variances_denoising(std::span<const double> pi, double sigma2);
Vector exact_variances_denoising(const PrecisionOp& op);

}  // namespace vbtree
