#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <vector>

#include "ntklab/ensemble.hpp"
#include "ntklab/flow.hpp"
#include "ntklab/kernels.hpp"
#include "oracles.hpp"

using namespace ntklab;

namespace {

Eigen::VectorXd rows_to_coords(const Eigen::MatrixXd& rows) {
  const Eigen::MatrixXd t = rows.transpose();
  return Eigen::Map<const Eigen::VectorXd>(t.data(), t.size());
}

struct Setup {
  KernelPack pack;
  CrossKernels cross;
  std::vector<Eigen::VectorXd> train;
  std::vector<Eigen::VectorXd> test;
};

Setup analytic_setup(std::uint64_t seed, int n_train = 3, int n_test = 2) {
  ArchSpec arch = ArchSpec::analytic(2, 2, 2);
  std::mt19937_64 rng(seed);
  Setup s;
  s.train = oracles::random_points(n_train, 2, rng);
  s.test = oracles::random_points(n_test, 2, rng);
  s.pack = assemble_pack(arch, s.train);
  s.cross = assemble_cross(arch, s.train, s.test);
  return s;
}

}  // namespace

TEST_CASE("Gaussian sampler moments and determinism", "[ensemble]") {
  std::mt19937_64 rng(13);
  Eigen::MatrixXd a = Eigen::MatrixXd::Random(3, 3);
  const Eigen::MatrixXd cov = a * a.transpose() + Eigen::MatrixXd::Identity(3, 3);

  const int s = 20000;
  const Eigen::MatrixXd draws = sample_gaussian(cov, s, 99);
  REQUIRE(draws.rows() == s);
  const Eigen::VectorXd mean = draws.colwise().mean().transpose();
  for (int i = 0; i < 3; ++i)
    CHECK(std::abs(mean(i)) <= 4.0 * std::sqrt(cov(i, i) / s));
  const Eigen::MatrixXd centered = draws.rowwise() - mean.transpose();
  const Eigen::MatrixXd emp = centered.transpose() * centered / (s - 1);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      const double se = std::sqrt((cov(i, i) * cov(j, j) + cov(i, j) * cov(i, j)) / s);
      CHECK(std::abs(emp(i, j) - cov(i, j)) <= 5.0 * se);
    }

  const Eigen::MatrixXd again = sample_gaussian(cov, 50, 12345);
  const Eigen::MatrixXd again2 = sample_gaussian(cov, 50, 12345);
  CHECK((again.array() == again2.array()).all());
  CHECK_THROWS(sample_gaussian(Eigen::MatrixXd::Zero(2, 3), 1, 1));
}

TEST_CASE("prior draws follow the output covariance blockwise", "[ensemble]") {
  const Setup s = analytic_setup(17);
  const Eigen::MatrixXd draws = sample_prior(s.pack, 20000, 5);
  REQUIRE(draws.cols() == 6);  // 3 points x 2 classes
  const Eigen::MatrixXd centered = draws.rowwise() - draws.colwise().mean();
  const Eigen::MatrixXd emp = centered.transpose() * centered / (draws.rows() - 1);
  const Eigen::MatrixXd expect = kron_identity(s.pack.nngp, 2);
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j) {
      const double se =
          std::sqrt((expect(i, i) * expect(j, j) + expect(i, j) * expect(i, j)) / draws.rows());
      CHECK(std::abs(emp(i, j) - expect(i, j)) <= 5.0 * se);
    }
}

TEST_CASE("push-through on squared error is the exact affine map", "[ensemble]") {
  const Setup s = analytic_setup(19);
  std::mt19937_64 rng(20);
  const Eigen::MatrixXd rows = oracles::random_simplex_rows(3, 2, rng);
  const LossSpec spec = make_loss(LossKind::Mse, TargetSet::from_rows(rows, false));
  const double beta = 0.7;
  const FlowProblem pb = make_flow_problem(s.pack, s.cross, spec, beta, 1.0,
                                           Eigen::VectorXd::Zero(6), Eigen::VectorXd::Zero(4));

  const Eigen::VectorXd d_train = oracles::random_vector(6, rng);
  const Eigen::VectorXd d_test = oracles::random_vector(4, rng);
  const PushThroughResult res = push_through(pb, d_train, d_test);
  REQUIRE(res.converged);

  Eigen::MatrixXd m = pb.theta_xx;
  m.diagonal().array() += beta;
  const Eigen::VectorXd y = rows_to_coords(rows);
  const Eigen::VectorXd z = m.ldlt().solve(pb.theta_xx * y + beta * d_train);
  CHECK((res.g_train - z).lpNorm<Eigen::Infinity>() <= 1e-8);
  const Eigen::VectorXd gs = d_test + pb.theta_sx * m.ldlt().solve(y - d_train);
  CHECK((res.g_test - gs).lpNorm<Eigen::Infinity>() <= 1e-7);

  SECTION("draw size mismatch throws") {
    CHECK_THROWS(push_through(pb, d_train.head(5), d_test));
  }
}

TEST_CASE("a huge ridge freezes every draw in place", "[ensemble]") {
  const Setup s = analytic_setup(23);
  std::mt19937_64 rng(24);
  const Eigen::MatrixXd rows = oracles::random_simplex_rows(3, 2, rng);
  const LossSpec spec = make_loss(LossKind::CrossEntropy, TargetSet::from_rows(rows, false));
  const double beta = 1e4;
  const FlowProblem pb = make_flow_problem(s.pack, s.cross, spec, beta, 1.0,
                                           Eigen::VectorXd::Zero(6), Eigen::VectorXd::Zero(4));
  const Eigen::VectorXd d_train = oracles::random_vector(6, rng);
  const Eigen::VectorXd d_test = oracles::random_vector(4, rng);
  const PushThroughResult res = push_through(pb, d_train, d_test);
  REQUIRE(res.converged);
  // Phi(z) = beta d gives z - d = -Theta grad C(z) / beta with |grad C| <= 1
  // per coordinate for cross entropy.
  const double row_norm = pb.theta_xx.cwiseAbs().rowwise().sum().maxCoeff();
  CHECK((res.g_train - d_train).lpNorm<Eigen::Infinity>() <= 2.0 * row_norm / beta);
  const double row_norm_sx = pb.theta_sx.cwiseAbs().rowwise().sum().maxCoeff();
  CHECK((res.g_test - d_test).lpNorm<Eigen::Infinity>() <= 2.0 * row_norm_sx / beta);
}

TEST_CASE("anchor operator identities", "[ensemble]") {
  const Setup s = analytic_setup(29);
  std::mt19937_64 rng(30);
  const Eigen::MatrixXd rows = oracles::random_simplex_rows(3, 2, rng);
  const LossSpec spec = make_loss(LossKind::CrossEntropy, TargetSet::from_rows(rows, false));
  const FlowProblem pb = make_flow_problem(s.pack, s.cross, spec, 0.5, 1.0,
                                           Eigen::VectorXd::Zero(6), Eigen::VectorXd::Zero(4));
  const MapAnchor anchor = map_anchor(pb);
  CHECK((phi_apply(pb, anchor.g_star)).lpNorm<Eigen::Infinity>() <= 1e-9);
  CHECK(anchor.asymmetry <= 1e-8);
  const Eigen::MatrixXd want_a =
      pb.theta_xx * loss_hessian(pb.spec, anchor.g_star) + 0.5 * Eigen::MatrixXd::Identity(6, 6);
  CHECK((anchor.a_matrix - want_a).lpNorm<Eigen::Infinity>() <= 1e-12);

  SECTION("the anchor is a local minimum of the flow objective") {
    const double base = map_objective(pb, anchor.g_star);
    std::mt19937_64 prng(31);
    for (int trial = 0; trial < 100; ++trial) {
      Eigen::VectorXd delta = oracles::random_vector(6, prng);
      delta *= 1e-2 / delta.norm();
      CHECK(map_objective(pb, anchor.g_star + delta) >= base - 1e-10);
    }
  }
}

TEST_CASE("ensemble covariance closed forms", "[ensemble]") {
  const Setup s = analytic_setup(37);
  std::mt19937_64 rng(38);
  const Eigen::MatrixXd rows = oracles::random_simplex_rows(3, 2, rng);
  const LossSpec spec = make_loss(LossKind::Mse, TargetSet::from_rows(rows, false));
  const double beta = 0.9;
  const FlowProblem pb = make_flow_problem(s.pack, s.cross, spec, beta, 1.0,
                                           Eigen::VectorXd::Zero(6), Eigen::VectorXd::Zero(4), true);
  const MapAnchor anchor = map_anchor(pb);
  const GaussianApprox approx = gaussian_approx(pb, anchor);

  SECTION("reduced matched-kernel form against direct dense algebra") {
    const Eigen::MatrixXd id = Eigen::MatrixXd::Identity(6, 6);
    const Eigen::MatrixXd a_inv = anchor.a_matrix.partialPivLu().solve(id);
    const Eigen::MatrixXd middle =
        anchor.h_star * a_inv + beta * a_inv.transpose() * anchor.h_star * a_inv;
    const Eigen::MatrixXd direct =
        pb.theta_ss - pb.theta_sx * middle * pb.theta_sx.transpose();
    CHECK((approx.sigma - direct).lpNorm<Eigen::Infinity>() <= 1e-10);
  }

  SECTION("general four-term path agrees when the blocks happen to match") {
    FlowProblem general = pb;
    general.kernels_equal = false;  // same blocks, long formula
    const GaussianApprox other = gaussian_approx(general, anchor);
    CHECK((approx.sigma - other.sigma).lpNorm<Eigen::Infinity>() <= 1e-10);
    CHECK((approx.mu - other.mu).lpNorm<Eigen::Infinity>() == 0.0);
  }

  SECTION("covariance is linear in the prior output covariance") {
    FlowProblem scaled = pb;
    scaled.kernels_equal = false;
    scaled.nngp_xx *= 0.5;
    scaled.nngp_sx *= 0.5;
    scaled.nngp_ss *= 0.5;
    const GaussianApprox half = gaussian_approx(scaled, anchor);
    CHECK((half.sigma - 0.5 * approx.sigma).lpNorm<Eigen::Infinity>() <= 1e-10);
  }
}

TEST_CASE("empirical push-through ensemble matches the analytic law", "[ensemble][slow]") {
  // Squared error makes the push-through map affine in the draw, so the
  // sample mean and covariance must land on mu and Sigma up to Monte-Carlo
  // error with zero failures.
  const Setup s = analytic_setup(41, 2, 2);
  std::mt19937_64 rng(42);
  const Eigen::MatrixXd rows = oracles::random_simplex_rows(2, 2, rng);
  const LossSpec spec = make_loss(LossKind::Mse, TargetSet::from_rows(rows, false));
  const FlowProblem pb = make_flow_problem(s.pack, s.cross, spec, 0.6, 1.0,
                                           Eigen::VectorXd::Zero(4), Eigen::VectorXd::Zero(4), true);
  const int n_draws = 4000;
  const EnsembleSummary summary = ensemble_summary(pb, n_draws, 7);
  CHECK(summary.failures == 0);
  CHECK(summary.failure_rate() == 0.0);
  REQUIRE(summary.draws_test.rows() == n_draws);

  for (int i = 0; i < 4; ++i) {
    const double se = std::sqrt(summary.sigma_ens(i, i) / n_draws);
    CHECK(std::abs(summary.mean_test(i) - summary.mu_ens(i)) <= 5.0 * se);
  }
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      const double se = std::sqrt((summary.sigma_ens(i, i) * summary.sigma_ens(j, j) +
                                   summary.sigma_ens(i, j) * summary.sigma_ens(i, j)) /
                                  n_draws);
      CHECK(std::abs(summary.cov_test(i, j) - summary.sigma_ens(i, j)) <= 5.0 * se);
    }
  CHECK(summary.has_gap);
  CHECK(summary.gap_closed_form_diff <= 1e-8);
}

TEST_CASE("interpolation kills the ensemble variance on the train set", "[ensemble]") {
  // Test points placed on the train points, no ridge: every draw is pushed
  // to the same interpolant there, so both covariances collapse to zero.
  ArchSpec arch = ArchSpec::analytic(2, 2, 1);
  std::mt19937_64 rng(43);
  const auto train = oracles::random_points(3, 2, rng);
  const KernelPack pack = assemble_pack(arch, train);
  const CrossKernels cross = assemble_cross(arch, train, train);
  Eigen::MatrixXd rows(3, 2);
  rows << 0.3, 0.7, 0.5, 0.5, 0.8, 0.2;
  const LossSpec spec = make_loss(LossKind::CrossEntropyRef, TargetSet::from_rows(rows, true));
  const FlowProblem pb = make_flow_problem(pack, cross, spec, 0.0, 1.0,
                                           Eigen::VectorXd::Zero(3), Eigen::VectorXd::Zero(3), true);
  const MapAnchor anchor = map_anchor(pb);
  const double scale = pb.theta_xx.lpNorm<Eigen::Infinity>();
  const GaussianApprox approx = gaussian_approx(pb, anchor);
  CHECK(approx.sigma.lpNorm<Eigen::Infinity>() <= 1e-7 * scale);
  CHECK(laplace_cov(pb, anchor).lpNorm<Eigen::Infinity>() <= 1e-7 * scale);
  const GapCertificate cert = gap_certificate(pb, anchor);
  CHECK(cert.gap.lpNorm<Eigen::Infinity>() <= 1e-8 * scale);
  CHECK(cert.max_closed_form_diff <= 1e-8 * scale);
}

TEST_CASE("Laplace covariance limits and closed form", "[ensemble]") {
  const Setup s = analytic_setup(47);
  std::mt19937_64 rng(48);
  const Eigen::MatrixXd rows = oracles::random_simplex_rows(3, 2, rng);

  SECTION("squared error at beta 1 is the Gaussian-process posterior") {
    const LossSpec spec = make_loss(LossKind::Mse, TargetSet::from_rows(rows, false));
    const FlowProblem pb = make_flow_problem(s.pack, s.cross, spec, 1.0, 1.0,
                                             Eigen::VectorXd::Zero(6), Eigen::VectorXd::Zero(4), true);
    const MapAnchor anchor = map_anchor(pb);
    const Eigen::MatrixXd lap = laplace_cov(pb, anchor);
    Eigen::MatrixXd m = pb.theta_xx;
    m.diagonal().array() += 1.0;
    const Eigen::MatrixXd posterior =
        pb.theta_ss - pb.theta_sx * m.ldlt().solve(pb.theta_sx.transpose());
    CHECK((lap - posterior).lpNorm<Eigen::Infinity>() <= 1e-9);

    const GapCertificate cert = gap_certificate(pb, anchor);
    const Eigen::MatrixXd direct = m.ldlt().solve(pb.theta_sx.transpose());
    const Eigen::MatrixXd closed = direct.transpose() * direct;  // beta = 1, H = I
    CHECK((cert.gap - closed).lpNorm<Eigen::Infinity>() <= 1e-8);
    CHECK(cert.min_eigenvalue >= -1e-10 * closed.trace());
  }

  SECTION("a huge ridge returns the prior covariance at the test points") {
    const LossSpec spec = make_loss(LossKind::CrossEntropy, TargetSet::from_rows(rows, false));
    const FlowProblem pb = make_flow_problem(s.pack, s.cross, spec, 1e4, 1.0,
                                             Eigen::VectorXd::Zero(6), Eigen::VectorXd::Zero(4), true);
    const MapAnchor anchor = map_anchor(pb);
    const Eigen::MatrixXd lap = laplace_cov(pb, anchor);
    const double scale = pb.theta_ss.lpNorm<Eigen::Infinity>();
    CHECK((lap - pb.theta_ss).lpNorm<Eigen::Infinity>() <= 1e-2 * scale);
  }

  SECTION("the matched-kernel requirement is enforced") {
    const LossSpec spec = make_loss(LossKind::Mse, TargetSet::from_rows(rows, false));
    const FlowProblem pb = make_flow_problem(s.pack, s.cross, spec, 1.0, 1.0,
                                             Eigen::VectorXd::Zero(6), Eigen::VectorXd::Zero(4));
    const MapAnchor anchor = map_anchor(pb);
    CHECK_THROWS(gap_certificate(pb, anchor));
  }
}
