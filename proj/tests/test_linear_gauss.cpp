#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <random>

#include "vbtree/linear_gauss.hpp"

using namespace vbtree;
using doctest::Approx;

namespace {

Vector random_vector(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  Vector v(n);
  for (double& x : v) x = n01(rng);
  return v;
}

Eigen::MatrixXd dense_op(const PrecisionOp& op) {
  const std::size_t n = op.size();
  Eigen::MatrixXd A(n, n);
  Vector e(n, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    e[k] = 1.0;
    const Vector col = op.apply(e);
    for (std::size_t j = 0; j < n; ++j) A(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k)) = col[j];
    e[k] = 0.0;
  }
  return A;
}

}  // namespace

TEST_CASE("observation operators") {
  const ObservationOp id = ObservationOp::identity(4, 0.5);
  CHECK(id.m() == 4);
  const ObservationOp mk = ObservationOp::mask(5, {4, 1}, 1.0);
  CHECK(mk.m() == 2);
  CHECK(mk.observed() == std::vector<std::size_t>{1, 4});
  Vector u = {10, 11, 12, 13, 14}, xu(2), back(5);
  mk.apply(u, xu);
  CHECK(xu == Vector{11, 14});
  mk.apply_transpose(xu, back);
  CHECK(back == Vector{0, 11, 0, 0, 14});
  CHECK_THROWS_AS(ObservationOp::mask(5, {1, 1}, 1.0), ConfigError);
  CHECK_THROWS_AS(ObservationOp::mask(5, {5}, 1.0), ConfigError);
  CHECK_THROWS_AS(ObservationOp::identity(4, 0.0), ConfigError);
}

TEST_CASE("precision operator special cases") {
  const WaveletLayout lay(4, 4, 2);
  const ObservationOp id = ObservationOp::identity(16, 1.0);
  const Vector x = random_vector(16, 1);
  const Vector ax0 = PrecisionOp(id, lay, Vector(16, 0.0)).apply(x);
  for (std::size_t i = 0; i < 16; ++i) CHECK(ax0[i] == Approx(x[i]));
  const Vector ax = PrecisionOp(id, lay, Vector(16, 2.5)).apply(x);
  for (std::size_t i = 0; i < 16; ++i) CHECK(ax[i] == Approx(3.5 * x[i]));
  const ObservationOp empty = ObservationOp::mask(16, {}, 1.0);
  const Vector ae = PrecisionOp(empty, lay, Vector(16, 1.0)).apply(x);
  for (std::size_t i = 0; i < 16; ++i) CHECK(ae[i] == Approx(x[i]));
}

TEST_CASE("precision operator is symmetric") {
  const WaveletLayout lay(8, 8, 3);
  const ObservationOp mk = ObservationOp::mask(64, {0, 3, 9, 17, 40, 41, 63}, 0.1);
  Vector pi = random_vector(64, 2);
  for (double& v : pi) v = std::exp(v);
  const PrecisionOp op(mk, lay, pi);
  const Vector a = random_vector(64, 3), b = random_vector(64, 4);
  CHECK(dot(op.apply(a), b) == Approx(dot(a, op.apply(b))).epsilon(1e-9));
  CHECK_THROWS_AS(PrecisionOp(mk, lay, Vector(10, 1.0)), DimensionError);
}

TEST_CASE("pcg closed forms") {
  const WaveletLayout lay(4, 4, 2);
  const ObservationOp id = ObservationOp::identity(16, 1.0);
  const Vector r = random_vector(16, 5);
  const CgResult a = pcg_solve(PrecisionOp(id, lay, Vector(16, 0.0)), r, 1e-12, 10);
  CHECK(a.iterations == 1);
  for (std::size_t i = 0; i < 16; ++i) CHECK(a.x[i] == Approx(r[i]));
  const CgResult b = pcg_solve(PrecisionOp(id, lay, Vector(16, 3.0)), r, 1e-12, 10);
  for (std::size_t i = 0; i < 16; ++i) CHECK(b.x[i] == Approx(r[i] / 4.0));
}

TEST_CASE("pcg matches a dense solve on an inpainting system") {
  const WaveletLayout lay(16, 16, 4);
  std::vector<std::size_t> kept;
  std::mt19937_64 rng(9);
  for (std::size_t i = 0; i < 256; ++i)
    if (rng() % 2) kept.push_back(i);
  const ObservationOp mk = ObservationOp::mask(256, kept, 0.01);
  Vector pi = random_vector(256, 6);
  for (double& v : pi) v = std::exp(v);
  const PrecisionOp op(mk, lay, pi);
  const Vector r = random_vector(256, 7);
  const CgResult cg = pcg_solve(op, r, 1e-12, 2000);
  const Eigen::VectorXd xd = dense_op(op).llt().solve(Eigen::Map<const Eigen::VectorXd>(r.data(), 256));
  const Eigen::VectorXd xc = Eigen::Map<const Eigen::VectorXd>(cg.x.data(), 256);
  CHECK((xc - xd).norm() / xd.norm() <= 1e-6);
  CHECK(cg.relative_residual <= 1e-12);
}

TEST_CASE("pcg reports the residual at the iteration cap") {
  const WaveletLayout lay(16, 16, 4);
  const ObservationOp mk = ObservationOp::mask(256, {0, 5, 77}, 1e-4);
  Vector pi = random_vector(256, 8);
  for (double& v : pi) v = std::exp(2.0 * v);
  const CgResult cg = pcg_solve(PrecisionOp(mk, lay, pi), random_vector(256, 9), 1e-14, 2);
  CHECK(cg.iterations == 2);
  CHECK(cg.relative_residual > 0.0);
}

TEST_CASE("exact denoising variances") {
  CHECK(exact_variances_denoising(Vector{0.0}, 0.01)[0] == Approx(0.01));
  CHECK(exact_variances_denoising(Vector{1.0}, 1.0)[0] == Approx(0.5));
  const WaveletLayout lay(4, 4, 2);
  const ObservationOp mk = ObservationOp::mask(16, {1, 2}, 1.0);
  CHECK_THROWS_AS(exact_variances_denoising(PrecisionOp(mk, lay, Vector(16, 1.0))), ConfigError);
}

TEST_CASE("perturb-and-map variances on a denoising problem") {
  const WaveletLayout lay(8, 8, 3);
  const ObservationOp id = ObservationOp::identity(64, 0.1);
  Vector pi = random_vector(64, 10);
  for (double& v : pi) v = std::exp(v);
  const PrecisionOp op(id, lay, pi);
  const int K = 1000;
  const VarianceEstimate est = sample_variances(op, K, 200, 42);
  const Vector exact = exact_variances_denoising(op);
  double rel = 0.0;
  for (std::size_t j = 0; j < 64; ++j) rel += std::fabs(est.z[j] - exact[j]) / exact[j];
  CHECK(rel / 64.0 <= 3.0 / std::sqrt(K));
}

TEST_CASE("a huge precision entry pins its variance") {
  const WaveletLayout lay(4, 4, 2);
  const ObservationOp mk = ObservationOp::mask(16, {0, 1, 2, 3, 4, 5, 6, 7}, 0.5);
  Vector pi(16, 1.0);
  pi[5] = 1e8;
  const PrecisionOp op(mk, lay, pi);
  const VarianceEstimate est = sample_variances(op, 200, 100, 1);
  CHECK(est.z[5] <= 1e-7);
  const Eigen::MatrixXd A = dense_op(op);
  Eigen::MatrixXd B(16, 16);
  Vector e(16, 0.0), col(16);
  for (std::size_t k = 0; k < 16; ++k) {
    e[k] = 1.0;
    forward(e, lay, col);
    for (std::size_t j = 0; j < 16; ++j) B(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k)) = col[j];
    e[k] = 0.0;
  }
  const double z5 = (B * A.inverse() * B.transpose())(5, 5);
  CHECK(z5 == Approx(1e-8).epsilon(1e-3));
}

TEST_CASE("sampler is deterministic across thread counts") {
  const WaveletLayout lay(8, 8, 2);
  const ObservationOp mk = ObservationOp::mask(64, {0, 9, 18, 27, 36, 45, 54, 63}, 0.05);
  const PrecisionOp op(mk, lay, Vector(64, 2.0));
  const VarianceEstimate a = sample_variances(op, 13, 30, 5, 1);
  const VarianceEstimate b = sample_variances(op, 13, 30, 5, 3);
  const VarianceEstimate c = sample_variances(op, 13, 30, 5, 1);
  CHECK(a.z == b.z);
  CHECK(a.z == c.z);
  for (double v : a.z) CHECK(v >= kVarianceFloor);
  CHECK_THROWS_AS(sample_variances(op, 0, 30, 5), ConfigError);
}
