#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "vbtree/checks.hpp"
#include "vbtree/experiment.hpp"

namespace fs = std::filesystem;
using namespace vbtree;

namespace {

struct CliOptions {
  std::vector<std::string> images;
  std::vector<std::string> models{"lap-tree"};
  std::vector<std::string> modes{"vb"};
  bool learn = false;
  bool both_learned = false;
  int levels = 8;
  double sigma2 = -1.0;
  double mask_frac = 0.75;
  std::uint64_t seed = 1;
  Budgets budgets;
  int jobs = 1;
  int pm_threads = 1;
  std::string out_dir = "out";
  std::string config_file;
  bool dump_f32 = false;
  bool dump_marginals = false;
};

std::map<std::string, std::string> read_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key=value");
    auto trim = [](std::string s) {
      const auto first = s.find_first_not_of(" \t\r");
      const auto last = s.find_last_not_of(" \t\r");
      return first == std::string::npos ? std::string() : s.substr(first, last - first + 1);
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

// Values from the file fill only options not given on the command line.
void apply_config(CLI::App& sub, const std::string& path) {
  for (const auto& [key, value] : read_config(path)) {
    CLI::Option* opt = nullptr;
    try {
      opt = sub.get_option("--" + key);
    } catch (const CLI::OptionNotFound&) {
      throw ConfigError("unknown config key: " + key);
    }
    if (opt->count() > 0) continue;
    if (opt->get_expected_min() == 0) {
      if (value == "true" || value == "1") opt->add_result("true");
      else if (value != "false" && value != "0") throw ConfigError("bad boolean for " + key + ": " + value);
      else opt->add_result("false");
    } else {
      std::istringstream ss(value);
      std::string tok;
      while (ss >> tok) opt->add_result(tok);
    }
    opt->run_callback();
  }
}

void add_run_options(CLI::App& sub, CliOptions& o) {
  sub.add_option("images", o.images, "Greyscale PGM/PNG images")->required()->check(CLI::ExistingFile);
  sub.add_option("--model", o.models, "lap-fact, t-fact, lap-tree, t-tree or all")->delimiter(',');
  sub.add_option("--mode", o.modes, "vb, map or all")->delimiter(',');
  sub.add_flag("--learn-hypers", o.learn, "Learn hyperparameters during inference");
  sub.add_flag("--both", o.both_learned, "Run every method with and without learning");
  sub.add_option("--levels", o.levels, "Wavelet depth")->check(CLI::PositiveNumber);
  sub.add_option("--sigma2", o.sigma2, "Noise / likelihood variance");
  sub.add_option("--mask-frac", o.mask_frac, "Fraction of pixels removed (inpaint)");
  sub.add_option("--seed", o.seed);
  sub.add_option("--outer", o.budgets.outer)->check(CLI::PositiveNumber);
  sub.add_option("--inner-rounds", o.budgets.inner_rounds)->check(CLI::PositiveNumber);
  sub.add_option("--pls-iters", o.budgets.pls_iters)->check(CLI::PositiveNumber);
  sub.add_option("--pm-samples", o.budgets.pm_samples)->check(CLI::PositiveNumber);
  sub.add_option("--pm-cg-iters", o.budgets.pm_cg_iters)->check(CLI::PositiveNumber);
  sub.add_option("--jobs", o.jobs, "Concurrent (image, method) runs")->check(CLI::PositiveNumber);
  sub.add_option("--pm-threads", o.pm_threads, "Threads per Perturb&MAP batch")->check(CLI::PositiveNumber);
  sub.add_option("--out-dir", o.out_dir);
  sub.add_flag("--dump-f32", o.dump_f32, "Also write float32 reconstructions");
  sub.add_flag("--dump-marginals", o.dump_marginals, "Write Q(delta=1|y) heatmaps for tree models");
  sub.add_option("--config", o.config_file, "key=value file; command-line flags take precedence");
}

ExperimentSpec build_spec(Task task, const CliOptions& o) {
  ExperimentSpec spec = ExperimentSpec::defaults(task);
  if (o.sigma2 >= 0.0) spec.sigma2 = o.sigma2;
  spec.mask_fraction = o.mask_frac;
  spec.images = o.images;
  spec.out_dir = o.out_dir;
  spec.seed = o.seed;
  spec.levels = o.levels;
  spec.budgets = o.budgets;
  spec.jobs = o.jobs;
  spec.pm_threads = o.pm_threads;
  spec.dump_f32 = o.dump_f32;
  spec.dump_marginals = o.dump_marginals;

  std::vector<std::string> models = o.models;
  if (models.size() == 1 && models[0] == "all") models = {"lap-fact", "t-fact", "lap-tree", "t-tree"};
  std::vector<std::string> modes = o.modes;
  if (modes.size() == 1 && modes[0] == "all") modes = {"vb", "map"};
  std::vector<bool> learned{o.learn};
  if (o.both_learned) learned = {false, true};
  for (const std::string& mode : modes) {
    if (mode != "vb" && mode != "map") throw ConfigError("unknown mode: " + mode);
    for (const std::string& model : models)
      for (bool l : learned) spec.methods.push_back({model, mode == "vb" ? Estimator::VB : Estimator::MAP, l});
  }
  spec.validate();
  return spec;
}

void echo_config(const ExperimentSpec& spec, std::ostream& os) {
  os << "task=" << to_string(spec.task) << '\n'
     << "sigma2=" << spec.sigma2 << '\n'
     << "mask-frac=" << spec.mask_fraction << '\n'
     << "levels=" << spec.levels << '\n'
     << "seed=" << spec.seed << '\n'
     << "outer=" << spec.budgets.outer << '\n'
     << "inner-rounds=" << spec.budgets.inner_rounds << '\n'
     << "pls-iters=" << spec.budgets.pls_iters << '\n'
     << "pm-samples=" << spec.budgets.pm_samples << '\n'
     << "pm-cg-iters=" << spec.budgets.pm_cg_iters << '\n'
     << "methods=";
  for (std::size_t i = 0; i < spec.methods.size(); ++i) os << (i ? "," : "") << spec.methods[i].id();
  os << "\nimages=";
  for (std::size_t i = 0; i < spec.images.size(); ++i) os << (i ? "," : "") << spec.images[i];
  os << '\n';
}

int run_task(Task task, CLI::App& sub, const CliOptions& opts) {
  CliOptions o = opts;
  if (!o.config_file.empty()) {
    apply_config(sub, o.config_file);
    o = opts;
  }
  const ExperimentSpec spec = build_spec(task, o);
  fs::create_directories(spec.out_dir);
  {
    std::ofstream cfg(fs::path(spec.out_dir) / "effective_config.txt");
    echo_config(spec, cfg);
  }
  const ExperimentReport report = run_experiment(spec, [](const ReportRow& r) {
    std::cerr << r.image << ' ' << r.mode << '-' << r.method << (r.learned ? "-learned" : "-init") << ": ";
    if (r.error.empty())
      std::cerr << r.psnr_db << " dB, " << r.outer_iters << " outer, " << r.wall_s << " s\n";
    else
      std::cerr << "FAILED: " << r.error << '\n';
  });
  write_summary_csv(std::cout, report.summary);
  for (const ReportRow& r : report.rows)
    if (!r.error.empty()) return 2;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Variational wavelet-tree image reconstruction"};
  app.require_subcommand(1);

  CliOptions denoise_opts;
  CliOptions inpaint_opts;
  CLI::App* denoise = app.add_subcommand("denoise", "Denoise images corrupted by synthetic Gaussian noise");
  add_run_options(*denoise, denoise_opts);
  CLI::App* inpaint = app.add_subcommand("inpaint", "Reconstruct images from a random pixel subset");
  add_run_options(*inpaint, inpaint_opts);
  CLI::App* selftest = app.add_subcommand("selftest", "Run the property and oracle checks");
  std::string only;
  selftest->add_option("--only", only, "Comma-separated check numbers");

  CLI11_PARSE(app, argc, argv);

  try {
    if (denoise->parsed()) return run_task(Task::Denoise, *denoise, denoise_opts);
    if (inpaint->parsed()) return run_task(Task::Inpaint, *inpaint, inpaint_opts);
    std::vector<int> ids;
    std::stringstream ss(only);
    for (std::string tok; std::getline(ss, tok, ',');)
      if (!tok.empty()) ids.push_back(std::stoi(tok));
    const std::vector<CheckResult> results = run_core_checks(ids);
    bool ok = true;
    for (const CheckResult& r : results) {
      std::cout << format_check(r) << '\n';
      ok = ok && r.passed;
    }
    return ok ? 0 : 1;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return 1;
  }
}
