#pragma once

// Double-loop variational inference (and its MAP / factorial degenerations)
// for linear models with a wavelet-domain scale-mixture prior whose mixture
// indicators follow a hidden Markov quad-tree.
//
// Inner loop (z fixed): penalized least squares for u*, belief propagation
// for Q(delta | y), closed-form hyperparameter updates. Outer loop: refit the
// variance surrogate z, Student's t scales and their concave tangents e.

#include <cstdint>
#include <optional>
#include <string>

#include "vbtree/linear_gauss.hpp"
#include "vbtree/potentials.hpp"
#include "vbtree/tree_model.hpp"
#include "vbtree/wavelet.hpp"

namespace vbtree {

enum class PriorStructure { Factorial, Tree };
enum class PotentialFamily { LaplacePair, StudentGaussianPair, Laplace, StudentT };
enum class Estimator { VB, MAP };

/// Hyperparameters are clamped to this range after every update.
inline constexpr double kHyperMin = 1e-6;
inline constexpr double kHyperMax = 1e8;

struct Budgets {
  int outer = 15;
  int inner_rounds = 3;
  int pls_iters = 150;
  int pm_samples = 30;
  int pm_cg_iters = 70;
};

struct ModelConfig {
  PriorStructure structure = PriorStructure::Tree;
  PotentialFamily family = PotentialFamily::LaplacePair;
  Estimator estimator = Estimator::VB;
  bool learn_hypers = true;
  int levels = 8;
  double sigma2 = 0.01;
  double nu = 2.1;
  Budgets budgets;
  std::uint64_t seed = 1;
  int threads = 1;
  int init_em_iters = 5;
  double z_smooth = 1e-6;         // MAP-mode variance surrogate
  double early_exit_tol = 1e-6;   // relative phi change over an inner round
  double pls_grad_tol = 1e-7;     // relative to the initial gradient norm
  bool force_sampling = false;    // Perturb&MAP variances even when X = I

  /// Short model names: lap-fact, t-fact, lap-tree, t-tree.
  static ModelConfig from_model_name(const std::string& model);
  std::string model_name() const;
  bool is_tree() const { return structure == PriorStructure::Tree; }
  void validate() const;
};

struct Hypers {
  // Per-level potentials, index l - 1. `low` is the only potential of a
  // factorial model; `high` is empty there.
  std::vector<PotentialSpec> low;
  std::vector<PotentialSpec> high;
  double xi_scaling = 1.0;  // Gaussian precision of the scaling coefficients
  TreeParams tree;          // tree models only

  /// Number of learned potential scales (L factorial, 2L tree).
  std::size_t potential_count() const { return low.size() + high.size(); }
};

/// Everything fixed for one reconstruction: layout, operator, data.
struct Problem {
  WaveletLayout layout;
  ObservationOp obs;
  Vector y;  // length obs.m()
  TreeTopology topology;

  Problem(WaveletLayout layout, ObservationOp obs, Vector y);

  std::size_t n() const { return layout.size(); }
  /// y scattered to the pixel grid, missing pixels set to mean(y).
  Vector filled_observation() const;
};

struct VariationalState {
  Vector u;       // posterior mean (VB) or mode (MAP) estimate, pixel domain
  Vector s;       // B u
  Vector z;       // per-coefficient variance surrogate
  Vector e_low;   // Student's t tangents per coefficient and state; 0 = unused
  Vector e_high;
  TreeMarginals marginals;  // tree models; indexed by detail node
  Hypers hypers;
  std::vector<double> phi_inner_trace;

  double p(std::size_t j) const { return std::sqrt(z[j] + s[j] * s[j]); }
};

/// Fresh state: u = filled observation, z = sigma^2 (VB) or z_smooth (MAP),
/// tangents refit, tree marginals from one BP pass.
VariationalState make_initial_state(const Problem& problem, const ModelConfig& config, Hypers hypers);

/// Q(delta_j = 1 | y); zero for factorial models and scaling coefficients.
double q_high(const Problem& problem, const ModelConfig& config, const VariationalState& state, std::size_t j);

/// Weighted per-coefficient penalty sum_r q_rj psi_rj(p) and its p-slope.
PenaltyValue coefficient_penalty(const Problem& problem, const ModelConfig& config, const VariationalState& state,
                                 std::size_t j, double p);

/// <pi>_j = sum_r q_rj / gamma_rj at the current p_j.
Vector effective_pi(const Problem& problem, const ModelConfig& config, const VariationalState& state);

/// sigma^-2 ||y - X u||^2 + sum_j <psi_j(sqrt(z_j + s_j^2))> with z, e, Q and
/// hyperparameters frozen at construction.
class PlsObjective {
 public:
  PlsObjective(const Problem& problem, const ModelConfig& config, const VariationalState& state);

  double value(std::span<const double> u) const;
  double value_and_gradient(std::span<const double> u, std::span<double> grad) const;

  /// Sum of penalties at coefficients s; optionally writes 1/gamma_j
  /// (= psi_j'(p_j) / (2 p_j)) into inv_gamma.
  double penalty_sum(std::span<const double> s, std::span<double> inv_gamma = {}) const;

  const Problem& problem() const { return *problem_; }

 private:
  struct Term {
    int level;      // 0 for scaling coefficients
    double q_high;  // weight of the high-state potential
    double e_low;
    double e_high;
  };

  const Problem* problem_;
  Vector z_;
  std::vector<Term> terms_;
  std::vector<PotentialSpec> low_;   // index = level, entry 0 is the scaling Gaussian
  std::vector<PotentialSpec> high_;  // empty for factorial models
  std::vector<double> offsets_low_;
  std::vector<double> offsets_high_;
  bool per_coeff_offset_ = false;    // Student's t tangents make offsets per coefficient
  Vector coeff_offset_low_;
  Vector coeff_offset_high_;
};

struct PlsReport {
  double objective_before = 0.0;
  double objective_after = 0.0;
  double gradient_norm = 0.0;
  int iterations = 0;
};

/// Nonlinear conjugate gradients (Polak-Ribiere+, restarts) with a
/// majorize-minimize line search; updates state.u and state.s.
PlsReport inner_pls(const Problem& problem, const ModelConfig& config, VariationalState& state);

/// Evidence (log t_0, log t_1) at the current p for every detail node.
NodeEvidence node_evidence(const Problem& problem, const ModelConfig& config, const VariationalState& state);

/// Replaces Q(delta | y) by the BP minimizer for the current p (tree models).
void update_q_delta(const Problem& problem, const ModelConfig& config, VariationalState& state);

enum class VarianceSource { ExactDenoising, PerturbAndMap };

struct RefitReport {
  double worst_cg_residual = 0.0;
  long cg_iterations = 0;
};

/// z <- Var_Q[s | y] under <pi>, then Student's t scales (when learning),
/// then fresh tangents at the current p.
RefitReport outer_refit(const Problem& problem, const ModelConfig& config, VariationalState& state,
                        VarianceSource source, int outer_index = 0);

/// Sets every Student's t tangent to touch the true penalty at the current p.
void refit_tangents(const Problem& problem, const ModelConfig& config, VariationalState& state);

// One-dimensional hyperparameter fits. They return nullopt when the weights
// carry no mass, in which case callers keep the previous value.
std::optional<double> fit_laplace_rate(std::span<const double> q, std::span<const double> p);
std::optional<double> fit_gaussian_precision(std::span<const double> q, std::span<const double> p);

struct StudentTauFit {
  double tau;
  double gradient;  // d objective / d log tau at tau, divided by sum(q)
  int iterations;
};

/// Minimizes sum_j q_j ((nu+1) log(1 + tau p_j^2 / nu) - log tau) by Newton's
/// method in log tau with backtracking.
std::optional<StudentTauFit> fit_student_tau(std::span<const double> q, std::span<const double> p, double nu,
                                             double tau0);

/// Laplace/Gaussian scales, scaling-band precision and the tree CPTs.
void update_hypers_closed_form(const Problem& problem, const ModelConfig& config, VariationalState& state);

/// Student's t scales (run once per outer iteration).
void update_student_tau(const Problem& problem, const ModelConfig& config, VariationalState& state);

struct InitReport {
  std::vector<double> log_prior_trace;  // tree EM: log P(s) after each E-step
};

/// Hyperparameters maximizing the prior probability of the raw data (missing
/// pixels filled with mean(y)); tree models run init_em_iters EM steps.
Hypers init_hypers(const Problem& problem, const ModelConfig& config, InitReport* report = nullptr);

/// sigma^-2 ||y - X u*||^2 + sum_j <psi_j(p_j)> + 2 D[Q || P]: the bound up to
/// terms that are constant while z is fixed.
double phi_inner(const Problem& problem, const ModelConfig& config, const VariationalState& state);

struct TraceEntry {
  int outer = 0;
  int round = 0;
  std::string stage;
  double phi_inner = 0.0;
  double pls_grad_norm = 0.0;
  double cg_residual = 0.0;
};

struct RunResult {
  Image estimate;
  VariationalState state;
  std::vector<TraceEntry> trace;
  int outer_iterations = 0;
  long pls_iterations = 0;
  long cg_iterations = 0;
  double worst_cg_residual = 0.0;
  double phi_final = 0.0;
};

/// Full reconstruction. Hyperparameters default to init_hypers. Any failing
/// stage is rethrown with the stage name prefixed.
RunResult run(const Problem& problem, const ModelConfig& config, std::optional<Hypers> hypers = std::nullopt);

}  // namespace vbtree
