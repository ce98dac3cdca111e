#pragma once

// Experiment harness: observation synthesis, PSNR, and the image x method
// matrix with CSV reporting.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>

#include "vbtree/inference.hpp"

namespace vbtree {

enum class Task { Denoise, Inpaint };

const char* to_string(Task t);

struct Observation {
  Vector y;
  ObservationOp op;
};

/// Denoise: y = u + N(0, noise_var) drawn from stream (seed, "noise",
/// image_index). Inpaint: y = u on a kept set of ceil((1 - mask_fraction) n)
/// pixels drawn once per seed from stream (seed, "mask", 0), so every image
/// of a run shares the mask. `likelihood_sigma2` parameterizes the operator.
Observation synthesize_observation(const Image& truth, Task task, double noise_var, double mask_fraction,
                                   double likelihood_sigma2, std::uint64_t seed, std::uint64_t image_index);

/// Kept pixel indices (sorted) of the shared inpainting mask.
std::vector<std::size_t> draw_mask(std::size_t n, double mask_fraction, std::uint64_t seed);

inline constexpr double kPsnrCap = 99.0;

/// 10 log10(1 / MSE) with the estimate clipped to [0, 1]; +inf when exact.
double psnr(std::span<const double> estimate, std::span<const double> truth);

struct MethodSpec {
  std::string model;  // lap-fact, t-fact, lap-tree, t-tree
  Estimator estimator = Estimator::VB;
  bool learned = true;

  std::string id() const;  // e.g. "VB-lap-tree-learned"
};

/// The 8 model x estimator combinations, each with the given learned flag.
std::vector<MethodSpec> all_methods(bool learned);

struct ExperimentSpec {
  Task task = Task::Denoise;
  double sigma2 = 0.01;
  double mask_fraction = 0.75;
  std::vector<MethodSpec> methods;
  std::vector<std::string> images;
  std::string out_dir;  // empty: no files written
  std::uint64_t seed = 1;
  int levels = 8;
  Budgets budgets;
  int jobs = 1;
  int pm_threads = 1;
  bool dump_f32 = false;
  bool dump_marginals = false;

  /// Task defaults: denoise sigma2 = 0.01, inpaint sigma2 = 1e-5.
  static ExperimentSpec defaults(Task task);
  void validate() const;
};

struct ReportRow {
  std::string image;
  std::string method;  // model name
  std::string mode;    // vb / map
  bool learned = false;
  double psnr_db = 0.0;
  double phi_final = 0.0;
  int outer_iters = 0;
  double wall_s = 0.0;
  std::uint64_t seed = 0;
  std::string error;  // non-empty when the run failed
};

struct SummaryRow {
  std::string method;
  std::string mode;
  bool learned = false;
  int count = 0;
  double psnr_mean = 0.0;
  double psnr_std = 0.0;
};

struct ExperimentReport {
  std::vector<ReportRow> rows;  // ordered by (image, method)
  std::vector<SummaryRow> summary;
};

inline constexpr const char* kReportHeader = "image,method,mode,learned,psnr_db,phi_final,outer_iters,wall_s,seed";

void write_report_csv(std::ostream& os, const std::vector<ReportRow>& rows);
void write_summary_csv(std::ostream& os, const std::vector<SummaryRow>& rows);
std::vector<SummaryRow> summarize(const std::vector<ReportRow>& rows, const std::vector<MethodSpec>& methods);

/// Runs every (image, method) pair. Failures are recorded per row and never
/// affect other pairs. With out_dir set, writes report.csv, summary.csv,
/// reconstructions and optional dumps.
ExperimentReport run_experiment(const ExperimentSpec& spec,
                                const std::function<void(const ReportRow&)>& on_row = nullptr);

/// Configuration used for one method within an experiment.
ModelConfig method_config(const ExperimentSpec& spec, const MethodSpec& method);

}  // namespace vbtree
