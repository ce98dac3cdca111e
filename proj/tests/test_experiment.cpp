#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "vbtree/experiment.hpp"
#include "vbtree/image_io.hpp"

using namespace vbtree;
using doctest::Approx;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "vbtree_test_experiment";
  fs::create_directories(dir);
  return dir / name;
}

Image gradient_image(int h, int w) {
  Image img(h, w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) img.at(r, c) = ((r * 7 + c * 3) % 256) / 255.0;
  return img;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

TEST_CASE("psnr arithmetic") {
  const Vector truth(16, 0.5);
  Vector shifted(16, 0.6);
  CHECK(psnr(shifted, truth) == Approx(20.0));
  CHECK(std::isinf(psnr(truth, truth)));
  CHECK(psnr(Vector(4, 0.5), Vector(4, 1.0)) == Approx(6.0206).epsilon(1e-4));
  CHECK_THROWS_AS(psnr(Vector(3), Vector(4)), DimensionError);
}

TEST_CASE("estimates are clipped before scoring") {
  CHECK(std::isinf(psnr(Vector{1.4, -0.2}, Vector{1.0, 0.0})));
}

TEST_CASE("inpainting keeps the stated fraction") {
  const Image img = gradient_image(256, 256);
  const Observation obs = synthesize_observation(img, Task::Inpaint, 0.0, 0.75, 1e-5, 3, 0);
  CHECK(obs.op.m() == 16384);
  for (std::size_t i = 0; i < obs.y.size(); ++i) CHECK(obs.y[i] == img.pixels[obs.op.observed()[i]]);
  const Observation other = synthesize_observation(gradient_image(256, 256), Task::Inpaint, 0.0, 0.75, 1e-5, 3, 4);
  CHECK(other.op.observed() == obs.op.observed());
  CHECK(draw_mask(100, 0.75, 4) != draw_mask(100, 0.75, 5));
  CHECK(draw_mask(10, 0.0, 1).size() == 10);
  CHECK_THROWS_AS(draw_mask(10, 1.0, 1), ConfigError);
}

TEST_CASE("noise synthesis") {
  const Image img = gradient_image(32, 32);
  CHECK(synthesize_observation(img, Task::Denoise, 0.0, 0.0, 0.01, 1, 0).y == img.pixels);
  const Observation a = synthesize_observation(img, Task::Denoise, 0.01, 0.0, 0.01, 1, 2);
  const Observation b = synthesize_observation(img, Task::Denoise, 0.01, 0.0, 0.01, 1, 2);
  const Observation c = synthesize_observation(img, Task::Denoise, 0.01, 0.0, 0.01, 1, 3);
  CHECK(a.y == b.y);
  CHECK(a.y != c.y);
  double var = 0.0;
  for (std::size_t i = 0; i < img.size(); ++i) var += std::pow(a.y[i] - img.pixels[i], 2);
  CHECK(var / static_cast<double>(img.size()) == Approx(0.01).epsilon(0.1));
}

TEST_CASE("pgm round trip is byte exact") {
  const Image img = gradient_image(16, 8);
  const fs::path p = scratch("rt.pgm");
  save_pgm(p.string(), img);
  const Image back = load_image(p.string());
  CHECK(back.height == 16);
  CHECK(back.width == 8);
  for (std::size_t i = 0; i < img.size(); ++i) CHECK(back.pixels[i] == Approx(img.pixels[i]));
  const fs::path q = scratch("rt2.pgm");
  save_pgm(q.string(), back);
  CHECK(slurp(p) == slurp(q));
}

TEST_CASE("pgm intensities") {
  const fs::path p = scratch("two.pgm");
  {
    std::ofstream out(p, std::ios::binary);
    out << "P5\n# comment\n2 1\n255\n";
    out.put(static_cast<char>(255));
    out.put(static_cast<char>(0));
  }
  const Image img = load_image(p.string());
  CHECK(img.pixels == Vector{1.0, 0.0});
  const fs::path a = scratch("ascii.pgm");
  {
    std::ofstream out(a);
    out << "P2\n2 2\n255\n0 51\n102 255\n";
  }
  CHECK(load_image(a.string()).pixels[1] == Approx(0.2));
}

TEST_CASE("image loading errors") {
  CHECK_THROWS_AS(load_image(scratch("missing.pgm").string()), IoError);
  const fs::path c = scratch("colour.ppm");
  {
    std::ofstream out(c, std::ios::binary);
    out << "P6\n1 1\n255\n" << "abc";
  }
  CHECK_THROWS_AS(load_image(c.string()), IoError);
  const fs::path p = scratch("odd.pgm");
  save_pgm(p.string(), gradient_image(12, 16));
  CHECK_THROWS_AS(load_image(p.string(), 3), DimensionError);
  CHECK_NOTHROW(load_image(p.string(), 2));
}

TEST_CASE("float dump") {
  const fs::path p = scratch("img.f32");
  save_f32(p.string(), gradient_image(4, 2));
  CHECK(fs::file_size(p) == 32);
  std::ifstream dims(p.string() + ".dims");
  int h = 0, w = 0;
  dims >> h >> w;
  CHECK(h == 4);
  CHECK(w == 2);
}

TEST_CASE("report csv") {
  ReportRow r;
  r.image = "cam";
  r.method = "lap-tree";
  r.mode = "vb";
  r.learned = true;
  r.psnr_db = std::numeric_limits<double>::infinity();
  r.phi_final = 1.5;
  r.outer_iters = 15;
  r.seed = 9;
  std::ostringstream os;
  write_report_csv(os, {r});
  std::istringstream in(os.str());
  std::string header, line;
  std::getline(in, header);
  std::getline(in, line);
  CHECK(header == "image,method,mode,learned,psnr_db,phi_final,outer_iters,wall_s,seed");
  CHECK(line.rfind("cam,lap-tree,vb,1,99.0000,1.5,15,", 0) == 0);
}

TEST_CASE("empty method list gives a header-only report") {
  ExperimentSpec spec = ExperimentSpec::defaults(Task::Denoise);
  const fs::path img = scratch("e.pgm");
  save_pgm(img.string(), gradient_image(16, 16));
  spec.images = {img.string()};
  spec.out_dir = scratch("empty_run").string();
  spec.levels = 4;
  const ExperimentReport rep = run_experiment(spec);
  CHECK(rep.rows.empty());
  CHECK(slurp(fs::path(spec.out_dir) / "report.csv") == std::string(kReportHeader) + "\n");
}

TEST_CASE("a failing image does not disturb the others") {
  ExperimentSpec spec = ExperimentSpec::defaults(Task::Inpaint);
  const fs::path good = scratch("good.pgm");
  save_pgm(good.string(), gradient_image(16, 16));
  spec.images = {scratch("nope.pgm").string(), good.string()};
  spec.methods = {{"lap-fact", Estimator::VB, false}, {"lap-tree", Estimator::MAP, true}};
  spec.levels = 4;
  spec.budgets.outer = 2;
  spec.jobs = 2;
  spec.dump_marginals = true;
  spec.out_dir = scratch("isolation").string();
  const ExperimentReport rep = run_experiment(spec);
  REQUIRE(rep.rows.size() == 4);
  CHECK(rep.rows[0].image == "nope");
  CHECK_FALSE(rep.rows[0].error.empty());
  CHECK_FALSE(rep.rows[1].error.empty());
  CHECK(rep.rows[2].error.empty());
  CHECK(rep.rows[3].error.empty());
  CHECK(std::isfinite(rep.rows[2].psnr_db));

  spec.images = {good.string()};
  spec.jobs = 1;
  const ExperimentReport alone = run_experiment(spec);
  CHECK(alone.rows[0].psnr_db == rep.rows[2].psnr_db);
  CHECK(alone.rows[1].psnr_db == rep.rows[3].psnr_db);
  CHECK(fs::exists(fs::path(spec.out_dir) / "good__MAP-lap-tree-learned_q1_level1.pgm"));
  CHECK(rep.summary.size() == 2);
  CHECK(rep.summary[0].count == 1);
}

TEST_CASE("spec validation") {
  ExperimentSpec spec = ExperimentSpec::defaults(Task::Inpaint);
  CHECK(spec.sigma2 == 1e-5);
  spec.mask_fraction = 1.0;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec = ExperimentSpec::defaults(Task::Denoise);
  CHECK(spec.sigma2 == 0.01);
  spec.methods = {{"bogus", Estimator::VB, true}};
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  CHECK(all_methods(true).size() == 8);
  CHECK(MethodSpec{"t-tree", Estimator::MAP, false}.id() == "MAP-t-tree-init");
}
