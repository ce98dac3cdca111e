#include "vbtree/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numeric>
#include <ostream>
#include <thread>

#include "vbtree/image_io.hpp"
#include "vbtree/rng.hpp"

namespace vbtree {

namespace fs = std::filesystem;

const char* to_string(Task t) { return t == Task::Denoise ? "denoise" : "inpaint"; }

std::vector<std::size_t> draw_mask(std::size_t n, double mask_fraction, std::uint64_t seed) {
  if (!(mask_fraction >= 0.0 && mask_fraction < 1.0)) throw ConfigError("mask fraction must be in [0, 1)");
  const auto kept = static_cast<std::size_t>(std::ceil((1.0 - mask_fraction) * static_cast<double>(n) - 1e-9));
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  RngStream rng(seed, "mask", 0);
  // Partial Fisher-Yates with a multiply-shift range map.
  for (std::size_t i = 0; i < kept; ++i) {
    const std::uint64_t span = n - i;
    const auto r = static_cast<std::size_t>((static_cast<unsigned __int128>(rng.engine()()) * span) >> 64);
    std::swap(perm[i], perm[i + r]);
  }
  perm.resize(kept);
  std::sort(perm.begin(), perm.end());
  return perm;
}

Observation synthesize_observation(const Image& truth, Task task, double noise_var, double mask_fraction,
                                   double likelihood_sigma2, std::uint64_t seed, std::uint64_t image_index) {
  if (noise_var < 0.0) throw ConfigError("noise variance must be >= 0");
  const std::size_t n = truth.size();
  if (task == Task::Denoise) {
    Vector y = truth.pixels;
    if (noise_var > 0.0) {
      RngStream rng(seed, "noise", image_index);
      const double sd = std::sqrt(noise_var);
      for (double& v : y) v += sd * rng.normal();
    }
    return {std::move(y), ObservationOp::identity(n, likelihood_sigma2)};
  }
  std::vector<std::size_t> kept = draw_mask(n, mask_fraction, seed);
  Vector y(kept.size());
  for (std::size_t i = 0; i < kept.size(); ++i) y[i] = truth.pixels[kept[i]];
  if (noise_var > 0.0) {
    RngStream rng(seed, "noise", image_index);
    const double sd = std::sqrt(noise_var);
    for (double& v : y) v += sd * rng.normal();
  }
  return {std::move(y), ObservationOp::mask(n, std::move(kept), likelihood_sigma2)};
}

double psnr(std::span<const double> estimate, std::span<const double> truth) {
  if (estimate.size() != truth.size() || truth.empty()) throw DimensionError("psnr: size mismatch");
  double mse = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const double d = std::clamp(estimate[i], 0.0, 1.0) - truth[i];
    mse += d * d;
  }
  mse /= static_cast<double>(truth.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

std::string MethodSpec::id() const {
  return std::string(estimator == Estimator::VB ? "VB-" : "MAP-") + model + (learned ? "-learned" : "-init");
}

std::vector<MethodSpec> all_methods(bool learned) {
  std::vector<MethodSpec> out;
  for (Estimator e : {Estimator::VB, Estimator::MAP})
    for (const char* m : {"lap-fact", "t-fact", "lap-tree", "t-tree"}) out.push_back({m, e, learned});
  return out;
}

ExperimentSpec ExperimentSpec::defaults(Task task) {
  ExperimentSpec s;
  s.task = task;
  s.sigma2 = task == Task::Denoise ? 0.01 : 1e-5;
  return s;
}

void ExperimentSpec::validate() const {
  if (!(sigma2 > 0.0)) throw ConfigError("sigma2 must be positive");
  if (!(mask_fraction >= 0.0 && mask_fraction < 1.0)) throw ConfigError("mask fraction must be in [0, 1)");
  if (levels < 1) throw ConfigError("levels must be >= 1");
  if (jobs < 1) throw ConfigError("jobs must be >= 1");
  for (const MethodSpec& m : methods) ModelConfig::from_model_name(m.model);
}

ModelConfig method_config(const ExperimentSpec& spec, const MethodSpec& method) {
  ModelConfig c = ModelConfig::from_model_name(method.model);
  c.estimator = method.estimator;
  c.learn_hypers = method.learned;
  c.levels = spec.levels;
  c.sigma2 = spec.sigma2;
  c.budgets = spec.budgets;
  c.seed = spec.seed;
  c.threads = spec.pm_threads;
  return c;
}

namespace {

std::string fmt_double(double v, const char* format) {
  char buf[64];
  std::snprintf(buf, sizeof buf, format, v);
  return buf;
}

std::string image_id(const std::string& path) { return fs::path(path).stem().string(); }

}  // namespace

void write_report_csv(std::ostream& os, const std::vector<ReportRow>& rows) {
  os << kReportHeader << '\n';
  for (const ReportRow& r : rows) {
    const bool ok = r.error.empty();
    const double p = std::min(r.psnr_db, kPsnrCap);
    os << r.image << ',' << r.method << ',' << r.mode << ',' << (r.learned ? 1 : 0) << ','
       << (ok ? fmt_double(p, "%.4f") : "nan") << ',' << (ok ? fmt_double(r.phi_final, "%.10g") : "nan") << ','
       << r.outer_iters << ',' << fmt_double(r.wall_s, "%.3f") << ',' << r.seed << '\n';
  }
}

void write_summary_csv(std::ostream& os, const std::vector<SummaryRow>& rows) {
  os << "method,mode,learned,count,psnr_mean,psnr_std\n";
  for (const SummaryRow& r : rows)
    os << r.method << ',' << r.mode << ',' << (r.learned ? 1 : 0) << ',' << r.count << ','
       << fmt_double(r.psnr_mean, "%.4f") << ',' << fmt_double(r.psnr_std, "%.4f") << '\n';
}

std::vector<SummaryRow> summarize(const std::vector<ReportRow>& rows, const std::vector<MethodSpec>& methods) {
  std::vector<SummaryRow> out;
  for (const MethodSpec& m : methods) {
    const std::string mode = m.estimator == Estimator::VB ? "vb" : "map";
    std::vector<double> vals;
    for (const ReportRow& r : rows)
      if (r.error.empty() && r.method == m.model && r.mode == mode && r.learned == m.learned)
        vals.push_back(std::min(r.psnr_db, kPsnrCap));
    SummaryRow s{m.model, mode, m.learned, static_cast<int>(vals.size()), 0.0, 0.0};
    if (!vals.empty()) {
      s.psnr_mean = std::accumulate(vals.begin(), vals.end(), 0.0) / static_cast<double>(vals.size());
      double var = 0.0;
      for (double v : vals) var += (v - s.psnr_mean) * (v - s.psnr_mean);
      s.psnr_std = std::sqrt(var / static_cast<double>(vals.size()));
    }
    out.push_back(s);
  }
  return out;
}

ExperimentReport run_experiment(const ExperimentSpec& spec, const std::function<void(const ReportRow&)>& on_row) {
  spec.validate();
  const bool write = !spec.out_dir.empty();
  if (write) fs::create_directories(spec.out_dir);

  struct Job {
    std::size_t image;
    std::size_t method;
  };
  std::vector<Job> jobs;
  for (std::size_t i = 0; i < spec.images.size(); ++i)
    for (std::size_t k = 0; k < spec.methods.size(); ++k) jobs.push_back({i, k});

  ExperimentReport report;
  report.rows.resize(jobs.size());
  std::mutex callback_mutex;

  auto run_job = [&](std::size_t idx) {
    const Job& job = jobs[idx];
    const MethodSpec& method = spec.methods[job.method];
    ReportRow& row = report.rows[idx];
    row.image = image_id(spec.images[job.image]);
    row.method = method.model;
    row.mode = method.estimator == Estimator::VB ? "vb" : "map";
    row.learned = method.learned;
    row.seed = spec.seed;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      const Image truth = load_image(spec.images[job.image], spec.levels);
      const double noise = spec.task == Task::Denoise ? spec.sigma2 : 0.0;
      Observation obs = synthesize_observation(truth, spec.task, noise, spec.mask_fraction, spec.sigma2, spec.seed,
                                               job.image);
      const Problem problem(WaveletLayout(truth.height, truth.width, spec.levels), std::move(obs.op),
                            std::move(obs.y));
      const ModelConfig config = method_config(spec, method);
      const RunResult res = run(problem, config);
      row.psnr_db = psnr(res.estimate.pixels, truth.pixels);
      row.phi_final = res.phi_final;
      row.outer_iters = res.outer_iterations;
      if (write) {
        const std::string stem = (fs::path(spec.out_dir) / (row.image + "__" + method.id())).string();
        save_pgm(stem + ".pgm", res.estimate);
        if (spec.dump_f32) save_f32(stem + ".f32", res.estimate);
        if (spec.dump_marginals && config.is_tree()) {
          save_marginal_heatmaps(stem, problem.layout, res.state.marginals);
          save_marginal_csv(stem + "_q1.csv", problem.layout, res.state.marginals);
        }
      }
    } catch (const std::exception& ex) {
      row.error = ex.what();
    }
    row.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (on_row) {
      std::lock_guard<std::mutex> lock(callback_mutex);
      on_row(row);
    }
  };

  const int workers = std::max(1, std::min<int>(spec.jobs, static_cast<int>(jobs.size())));
  if (workers == 1) {
    for (std::size_t i = 0; i < jobs.size(); ++i) run_job(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < jobs.size(); i = next++) run_job(i);
      });
  }

  report.summary = summarize(report.rows, spec.methods);
  if (write) {
    std::ofstream csv(fs::path(spec.out_dir) / "report.csv");
    write_report_csv(csv, report.rows);
    std::ofstream sum(fs::path(spec.out_dir) / "summary.csv");
    write_summary_csv(sum, report.summary);
    std::ofstream err(fs::path(spec.out_dir) / "failures.log");
    for (const ReportRow& r : report.rows)
      if (!r.error.empty()) err << r.image << ',' << r.mode << ',' << r.method << ": " << r.error << '\n';
  }
  return report;
}

}  // namespace vbtree
