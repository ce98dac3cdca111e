#pragma once

// Full variational bound on -2 log P(y) with an exact log-determinant, for
// problems small enough to hold A(pi) densely. Used to validate the bound
// and the double loop on toy instances.

#include <Eigen/Dense>
#include <optional>

#include "vbtree/inference.hpp"

namespace vbtree {

struct DenseCoefficient {
  PotentialSpec low;
  std::optional<PotentialSpec> high;
  double e_low = 0.0;   // Student's t tangents; 0 = true potential
  double e_high = 0.0;
  int node = -1;        // tree node carrying delta_j, -1 if none
};

struct DenseModel {
  Eigen::MatrixXd B;  // n x n orthonormal, row j maps the image to s_j
  Eigen::MatrixXd X;  // m x n
  Eigen::VectorXd y;
  double sigma2 = 1.0;
  std::vector<DenseCoefficient> coeffs;
  TreeTopology topology;  // empty for factorial models
  TreeParams tree;

  static constexpr std::size_t kMaxSize = 256;

  /// Throws ConfigError when the image has more than kMaxSize pixels.
  static DenseModel from_problem(const Problem& problem, const ModelConfig& config, const VariationalState& state);
};

/// Bound at mean u, variance surrogate z (which fixes gamma through
/// p = sqrt(z + s^2)) and tree marginals m (ignored without a topology).
double phi_dense(const DenseModel& model, const Eigen::VectorXd& u, const Eigen::VectorXd& z,
                 const TreeMarginals* m);

double phi_dense(const Problem& problem, const ModelConfig& config, const VariationalState& state);

}  // namespace vbtree
