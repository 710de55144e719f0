#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "ntklab/kernels.hpp"
#include "oracles.hpp"

using namespace ntklab;

namespace {
double erf_fn(double x) { return std::erf(x); }
double erf_deriv_fn(double x) { return 2.0 / std::sqrt(M_PI) * std::exp(-x * x); }
}  // namespace

TEST_CASE("erf pair moments match Monte-Carlo oracles", "[kernels]") {
  // The closed forms under test:
  //   E[erf(u) erf(v)]   = (2/pi) asin(2c / sqrt((1+2a)(1+2b)))
  //   E[erf'(u) erf'(v)] = (4/pi) / sqrt((1+2a)(1+2b) - 4c^2)
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> var(0.2, 3.0);
  std::uniform_real_distribution<double> corr(-0.95, 0.95);
  for (int trial = 0; trial < 8; ++trial) {
    const double a = var(rng), b = var(rng);
    const double c = corr(rng) * std::sqrt(a * b);
    const auto mom = oracles::mc_pair_moment(a, c, b, erf_fn, 400000, 1000 + trial);
    const auto momd = oracles::mc_pair_moment(a, c, b, erf_deriv_fn, 400000, 2000 + trial);
    INFO("a=" << a << " b=" << b << " c=" << c);
    CHECK(std::abs(erf_pair_moment(a, c, b) - mom.mean) <= 3.5 * mom.se);
    CHECK(std::abs(erf_deriv_pair_moment(a, c, b) - momd.mean) <= 3.5 * momd.se);
  }
}

TEST_CASE("nngp kernel basics", "[kernels]") {
  SECTION("zero input with zero bias gives zero at any depth") {
    for (int depth : {1, 2, 4}) {
      ArchSpec arch = ArchSpec::analytic(depth, 2, 1, 1.3, 0.0);
          const Eigen::VectorXd x = Eigen::VectorXd::Zero(2);
      CHECK(nngp_kernel(arch, x, x) == 0.0);
    }
  }

  SECTION("depth one, unit sigma_w, no bias, x = x' = 1 equals E[erf(u)^2]") {
    ArchSpec arch = ArchSpec::analytic(1, 1, 1, 1.0, 0.0);
      Eigen::VectorXd x(1);
    x << 1.0;
    const auto mom = oracles::mc_pair_moment(1.0, 1.0, 1.0, erf_fn, 1000000, 99);
    CHECK(std::abs(nngp_kernel(arch, x, x) - mom.mean) <= 3.0 * mom.se);
  }

  SECTION("symmetry in the arguments is exact") {
    ArchSpec arch = ArchSpec::analytic(2, 3, 1);
      std::mt19937_64 rng(7);
    for (int i = 0; i < 100; ++i) {
      const auto pts = oracles::random_points(2, 3, rng);
      CHECK(nngp_kernel(arch, pts[0], pts[1]) == nngp_kernel(arch, pts[1], pts[0]));
    }
  }

  SECTION("dimension mismatch throws") {
    ArchSpec arch = ArchSpec::analytic(1, 3, 1);
      CHECK_THROWS(nngp_kernel(arch, Eigen::VectorXd::Zero(3), Eigen::VectorXd::Zero(2)));
  }
}

TEST_CASE("ntk kernel recursion against composed Monte-Carlo moments", "[kernels]") {
  // Depth 1: Theta = Sigma_out + sigma_w^2 * Sigma_in * E[erf'(u) erf'(v)],
  // with both expectations replaced by their Monte-Carlo estimates.
  ArchSpec arch = ArchSpec::analytic(1, 2, 1, 1.4, 0.3);
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 4; ++trial) {
    const auto pts = oracles::random_points(2, 2, rng);
    const double sw2 = 1.4 * 1.4, sb2 = 0.3 * 0.3;
    const double a = sw2 * pts[0].dot(pts[0]) / 2.0 + sb2;
    const double b = sw2 * pts[1].dot(pts[1]) / 2.0 + sb2;
    const double c = sw2 * pts[0].dot(pts[1]) / 2.0 + sb2;
    const auto mom = oracles::mc_pair_moment(a, c, b, erf_fn, 400000, 300 + trial);
    const auto momd = oracles::mc_pair_moment(a, c, b, erf_deriv_fn, 400000, 400 + trial);
    const double sigma_out = sw2 * mom.mean + sb2;
    const double composed = sigma_out + sw2 * momd.mean * c;
    const double se = sw2 * (mom.se + momd.se * std::abs(c));
    CHECK(std::abs(ntk_kernel(arch, pts[0], pts[1]) - composed) <= 3.0 * se + 1e-12);
  }
}

TEST_CASE("ntk dominates nngp on the diagonal", "[kernels]") {
  std::mt19937_64 rng(13);
  std::uniform_int_distribution<int> depth_pick(1, 3);
  for (int trial = 0; trial < 1000; ++trial) {
    ArchSpec arch = ArchSpec::analytic(depth_pick(rng), 3, 1, 1.2, 0.2);
    const auto pts = oracles::random_points(1, 3, rng);
    CHECK(ntk_kernel(arch, pts[0], pts[0]) >= nngp_kernel(arch, pts[0], pts[0]));
  }
}

TEST_CASE("assemble_pack structure", "[kernels]") {
  ArchSpec arch = ArchSpec::analytic(2, 3, 2);
  std::mt19937_64 rng(17);

  SECTION("single point gives 1x1 matrices") {
    const KernelPack pack = assemble_pack(arch, oracles::random_points(1, 3, rng));
    CHECK(pack.nngp.rows() == 1);
    CHECK(pack.ntk.rows() == 1);
  }

  SECTION("duplicated points give identical rows") {
    auto pts = oracles::random_points(3, 3, rng);
    pts.push_back(pts[1]);
    const KernelPack pack = assemble_pack(arch, pts);
    CHECK((pack.ntk.row(1) - pack.ntk.row(3)).lpNorm<Eigen::Infinity>() == 0.0);
    CHECK((pack.nngp.col(1) - pack.nngp.col(3)).lpNorm<Eigen::Infinity>() == 0.0);
  }

  SECTION("entries match element-wise kernel calls") {
    const auto pts = oracles::random_points(5, 3, rng);
    const KernelPack pack = assemble_pack(arch, pts);
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 5; ++j) {
        CHECK(pack.nngp(i, j) == nngp_kernel(arch, pts[i], pts[j]));
        CHECK(pack.ntk(i, j) == ntk_kernel(arch, pts[i], pts[j]));
      }
  }

  SECTION("symmetry, PSD floor, and kernel Cauchy-Schwarz") {
    const auto pts = oracles::random_points(8, 3, rng);
    const KernelPack pack = assemble_pack(arch, pts);
    CHECK((pack.ntk - pack.ntk.transpose()).lpNorm<Eigen::Infinity>() == 0.0);
    CHECK((pack.nngp - pack.nngp.transpose()).lpNorm<Eigen::Infinity>() == 0.0);
    for (const Eigen::MatrixXd* m : {&pack.nngp, &pack.ntk}) {
      const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(*m);
      CHECK(eig.eigenvalues().minCoeff() >= -1e-10 * m->trace());
    }
    for (int i = 0; i < 8; ++i)
      for (int j = 0; j < 8; ++j)
        CHECK(pack.ntk(i, i) * pack.ntk(j, j) >= pack.ntk(i, j) * pack.ntk(i, j) - 1e-10);
  }

  SECTION("strictly positive definite on distinct points") {
    const auto pts = oracles::random_points(20, 3, rng);
    const KernelPack pack = assemble_pack(arch, pts);
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(pack.ntk);
    CHECK(eig.eigenvalues().minCoeff() > 0.0);
  }

  SECTION("empty point list throws") { CHECK_THROWS(assemble_pack(arch, {})); }
}

TEST_CASE("kron_identity expands the class-diagonal block form", "[kernels]") {
  Eigen::MatrixXd m(2, 2);
  m << 1.0, 2.0, 3.0, 4.0;
  const Eigen::MatrixXd big = kron_identity(m, 3);
  REQUIRE(big.rows() == 6);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b)
          CHECK(big(i * 3 + a, j * 3 + b) == (a == b ? m(i, j) : 0.0));
}

TEST_CASE("empirical_ntk_error normalization", "[kernels]") {
  ArchSpec arch = ArchSpec::analytic(1, 2, 1);
  std::mt19937_64 rng(23);
  const KernelPack pack = assemble_pack(arch, oracles::random_points(4, 2, rng));
  CHECK(empirical_ntk_error(pack, pack.ntk) == 0.0);
  CHECK(empirical_ntk_error(pack, 2.0 * pack.ntk) == Catch::Approx(1.0).margin(1e-14));
}

TEST_CASE("cross kernels agree with element-wise calls", "[kernels]") {
  ArchSpec arch = ArchSpec::analytic(2, 2, 1);
  std::mt19937_64 rng(29);
  const auto train = oracles::random_points(4, 2, rng);
  const auto test = oracles::random_points(3, 2, rng);
  const CrossKernels cross = assemble_cross(arch, train, test);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 4; ++j)
      CHECK(cross.ntk_test_train(i, j) == ntk_kernel(arch, test[i], train[j]));
    for (int j = 0; j < 3; ++j)
      CHECK(cross.nngp_test_test(i, j) == nngp_kernel(arch, test[i], test[j]));
  }
}
