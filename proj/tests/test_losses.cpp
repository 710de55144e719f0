#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "ntklab/losses.hpp"
#include "oracles.hpp"

using namespace ntklab;

namespace {

std::vector<LossSpec> random_specs(std::mt19937_64& rng, int count) {
  std::uniform_int_distribution<int> n_pick(1, 4), k_pick(1, 3);
  std::vector<LossSpec> specs;
  for (int i = 0; i < count; ++i) {
    const int n = n_pick(rng), k = k_pick(rng);
    switch (i % 4) {
      case 0:
        specs.push_back(make_loss(LossKind::Mse, TargetSet::from_rows(
                                                     oracles::random_simplex_rows(n, k, rng), false)));
        break;
      case 1:
        specs.push_back(make_loss(LossKind::CrossEntropy,
                                  TargetSet::from_rows(oracles::random_simplex_rows(n, k, rng), false)));
        break;
      case 2:
        specs.push_back(make_loss(LossKind::CrossEntropyRef,
                                  TargetSet::from_rows(oracles::random_simplex_rows(n, k + 1, rng), true)));
        break;
      default:
        specs.push_back(make_loss(LossKind::BrierRef,
                                  TargetSet::from_rows(oracles::random_simplex_rows(n, 2, rng), true)));
        break;
    }
  }
  return specs;
}

}  // namespace

TEST_CASE("loss values at pinned points", "[losses]") {
  SECTION("MSE vanishes at the target") {
    Eigen::MatrixXd rows(2, 2);
    rows << 0.3, 0.7, 0.9, 0.1;
    const LossSpec spec = make_loss(LossKind::Mse, TargetSet::from_rows(rows, false));
    Eigen::VectorXd z(4);
    z << 0.3, 0.7, 0.9, 0.1;  // point-major, class-minor
    CHECK(loss_value(spec, z) == Catch::Approx(0.0).margin(1e-15));
  }

  SECTION("uniform binary cross entropy at zero logits is log 2") {
    Eigen::MatrixXd rows(1, 2);
    rows << 0.5, 0.5;
    const LossSpec spec = make_loss(LossKind::CrossEntropy, TargetSet::from_rows(rows, false));
    CHECK(loss_value(spec, Eigen::VectorXd::Zero(2)) == Catch::Approx(std::log(2.0)).epsilon(1e-12));
  }

  SECTION("Brier with y = 1/2 vanishes at z = 0") {
    Eigen::MatrixXd rows(1, 2);
    rows << 0.5, 0.5;
    const LossSpec spec = make_loss(LossKind::BrierRef, TargetSet::from_rows(rows, true));
    CHECK(loss_value(spec, Eigen::VectorXd::Zero(1)) == Catch::Approx(0.0).margin(1e-15));
  }

  SECTION("wrong length throws") {
    Eigen::MatrixXd rows(1, 2);
    rows << 0.5, 0.5;
    const LossSpec spec = make_loss(LossKind::CrossEntropy, TargetSet::from_rows(rows, false));
    CHECK_THROWS(loss_value(spec, Eigen::VectorXd::Zero(3)));
  }
}

TEST_CASE("loss gradients", "[losses]") {
  std::mt19937_64 rng(5);

  SECTION("cross entropy with uniform targets is stationary at zero") {
    Eigen::MatrixXd rows = Eigen::MatrixXd::Constant(3, 4, 0.25);
    const LossSpec spec = make_loss(LossKind::CrossEntropy, TargetSet::from_rows(rows, false));
    CHECK(loss_gradient(spec, Eigen::VectorXd::Zero(12)).lpNorm<Eigen::Infinity>() <= 1e-15);
  }

  SECTION("MSE gradient norm identity: |grad C|^2 = 2 C") {
    const LossSpec spec = make_loss(
        LossKind::Mse, TargetSet::from_rows(oracles::random_simplex_rows(3, 2, rng), false));
    for (int i = 0; i < 20; ++i) {
      const Eigen::VectorXd z = oracles::random_vector(6, rng, 2.0);
      const double g2 = loss_gradient(spec, z).squaredNorm();
      const double c = loss_value(spec, z);
      CHECK(std::abs(g2 - 2.0 * c) <= 1e-12 * (1.0 + g2));
    }
  }

  SECTION("all kinds match central finite differences") {
    for (const LossSpec& spec : random_specs(rng, 100)) {
      const Eigen::VectorXd z = oracles::random_vector(spec.coords(), rng, 1.5);
      const Eigen::VectorXd fd = oracles::fd_gradient(
          [&](const Eigen::VectorXd& v) { return loss_value(spec, v); }, z, 1e-5);
      const Eigen::VectorXd g = loss_gradient(spec, z);
      CHECK((g - fd).norm() <= 1e-6 * (1.0 + g.norm()));
    }
  }
}

TEST_CASE("loss Hessians", "[losses]") {
  std::mt19937_64 rng(6);

  SECTION("MSE Hessian is the identity") {
    const LossSpec spec = make_loss(
        LossKind::Mse, TargetSet::from_rows(oracles::random_simplex_rows(2, 3, rng), false));
    const Eigen::MatrixXd h = loss_hessian(spec, oracles::random_vector(6, rng));
    CHECK((h - Eigen::MatrixXd::Identity(6, 6)).lpNorm<Eigen::Infinity>() == 0.0);
  }

  SECTION("cross-entropy block spectral norm stays at or below one half") {
    const LossSpec spec = make_loss(
        LossKind::CrossEntropy, TargetSet::from_rows(oracles::random_simplex_rows(1, 3, rng), false));
    for (int i = 0; i < 1000; ++i) {
      const Eigen::VectorXd z = oracles::random_vector(3, rng, 1.0 + (i % 4));
      for (const Eigen::MatrixXd& block : hessian_blocks(spec, z)) {
        const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(block);
        CHECK(eig.eigenvalues().cwiseAbs().maxCoeff() <= 0.5 + 1e-12);
      }
    }
  }

  SECTION("reference-class cross-entropy blocks are strictly positive definite") {
    const LossSpec spec = make_loss(
        LossKind::CrossEntropyRef, TargetSet::from_rows(oracles::random_simplex_rows(1, 3, rng), true));
    for (int i = 0; i < 1000; ++i) {
      const Eigen::VectorXd z = oracles::random_vector(2, rng, 1.0 + (i % 4));
      for (const Eigen::MatrixXd& block : hessian_blocks(spec, z)) {
        const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(block);
        CHECK(eig.eigenvalues().minCoeff() > 0.0);
      }
    }
  }

  SECTION("all kinds match finite differences of the gradient") {
    for (const LossSpec& spec : random_specs(rng, 50)) {
      const Eigen::VectorXd z = oracles::random_vector(spec.coords(), rng, 1.5);
      const Eigen::MatrixXd fd = oracles::fd_hessian(
          [&](const Eigen::VectorXd& v) { return loss_gradient(spec, v); }, z, 1e-5);
      const Eigen::MatrixXd h = loss_hessian(spec, z);
      CHECK((h - fd).norm() <= 1e-4 * (1.0 + h.norm()));
    }
  }
}

TEST_CASE("softmax with a reference class", "[losses]") {
  SECTION("one logit at zero splits evenly") {
    Eigen::VectorXd z(1);
    z << 0.0;
    const SoftmaxRef s = softmax_ref(z);
    CHECK(s.probs(0) == Catch::Approx(0.5).epsilon(1e-14));
    CHECK(s.ref == Catch::Approx(0.5).epsilon(1e-14));
  }

  SECTION("zero logits split as 1/(K+1)") {
    const SoftmaxRef s = softmax_ref(Eigen::VectorXd::Zero(4));
    for (int i = 0; i < 4; ++i) CHECK(s.probs(i) == Catch::Approx(0.2).epsilon(1e-14));
    CHECK(s.ref == Catch::Approx(0.2).epsilon(1e-14));
  }

  SECTION("a dominant logit saturates while the sum stays one") {
    Eigen::VectorXd z(3);
    z << 30.0, 0.0, -1.0;
    const SoftmaxRef s = softmax_ref(z);
    CHECK(s.probs(0) > 1.0 - 1e-12);
    CHECK(s.ref < 1e-12);
    CHECK(std::abs(s.probs.sum() + s.ref - 1.0) <= 1e-12);
  }
}

TEST_CASE("block centering projection", "[losses]") {
  std::mt19937_64 rng(8);

  SECTION("constant blocks vanish") {
    Eigen::VectorXd z(6);
    z << 2.0, 2.0, 2.0, -1.0, -1.0, -1.0;
    CHECK(center_project(z, 3).lpNorm<Eigen::Infinity>() <= 1e-15);
  }

  SECTION("idempotence is exact") {
    const Eigen::VectorXd z = oracles::random_vector(12, rng);
    const Eigen::VectorXd p = center_project(z, 3);
    CHECK((center_project(p, 3) - p).lpNorm<Eigen::Infinity>() <= 1e-15);
  }

  SECTION("cross entropy is invariant to per-block shifts") {
    const LossSpec spec = make_loss(
        LossKind::CrossEntropy, TargetSet::from_rows(oracles::random_simplex_rows(3, 3, rng), false));
    for (int i = 0; i < 50; ++i) {
      Eigen::VectorXd z = oracles::random_vector(9, rng, 2.0);
      Eigen::VectorXd shifted = z;
      for (int b = 0; b < 3; ++b) shifted.segment(3 * b, 3).array() += oracles::random_vector(1, rng)(0);
      CHECK(std::abs(loss_value(spec, z) - loss_value(spec, shifted)) <= 1e-10);
      const Eigen::VectorXd g = loss_gradient(spec, z);
      CHECK((g - center_project(g, 3)).lpNorm<Eigen::Infinity>() <= 1e-12);
      CHECK((g - loss_gradient(spec, center_project(z, 3))).lpNorm<Eigen::Infinity>() <= 1e-12);
    }
  }

  SECTION("softmax is a 1/2-contraction through the centering") {
    std::normal_distribution<double> gauss(0.0, 2.0);
    for (int i = 0; i < 10000; ++i) {
      Eigen::VectorXd a(4), b(4);
      for (int j = 0; j < 4; ++j) {
        a(j) = gauss(rng);
        b(j) = gauss(rng);
      }
      const double lhs = (stable_softmax(a) - stable_softmax(b)).norm();
      CHECK(lhs <= 0.5 * center_project(a - b, 4).norm() + 1e-12);
    }
  }

  SECTION("length not divisible by K throws") {
    CHECK_THROWS(center_project(Eigen::VectorXd::Zero(7), 3));
  }
}

TEST_CASE("infimum bookkeeping", "[losses]") {
  std::mt19937_64 rng(9);

  SECTION("entropy infimum for the cross entropies") {
    const Eigen::MatrixXd rows = oracles::random_simplex_rows(3, 4, rng);
    const LossSpec spec = make_loss(LossKind::CrossEntropy, TargetSet::from_rows(rows, false));
    double h = 0.0;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 4; ++j) h -= rows(i, j) * std::log(rows(i, j));
    CHECK(spec.inf_value == Catch::Approx(h).epsilon(1e-12));
    // The infimum really is a lower bound on probed values.
    for (int i = 0; i < 200; ++i)
      CHECK(loss_value(spec, oracles::random_vector(12, rng, 3.0)) >= spec.inf_value - 1e-9);
  }

  SECTION("one-hot targets have zero infimum") {
    const LossSpec spec = make_loss(LossKind::CrossEntropy, TargetSet::one_hot({0, 2}, 3));
    CHECK(spec.inf_value == 0.0);
    CHECK_FALSE(spec.targets.full_support());
  }
}

TEST_CASE("target set validation", "[losses]") {
  SECTION("rows must sum to one") {
    Eigen::MatrixXd bad(1, 2);
    bad << 0.6, 0.6;
    CHECK_THROWS(TargetSet::from_rows(bad, false));
  }
  SECTION("smoothing produces full support") {
    const TargetSet t = TargetSet::smoothed({0, 1, 2}, 3, 0.1);
    CHECK(t.full_support());
    CHECK(t.probs(0, 0) == Catch::Approx(0.9 + 0.1 / 3).epsilon(1e-14));
  }
  SECTION("loss kind and reference entries must agree") {
    CHECK_THROWS(make_loss(LossKind::CrossEntropyRef, TargetSet::one_hot({0}, 2)));
    CHECK_THROWS(make_loss(LossKind::CrossEntropy, TargetSet::one_hot_ref({0}, 2)));
  }
  SECTION("Brier kind is restricted to one logit") {
    CHECK_THROWS(make_loss(LossKind::BrierRef,
                           TargetSet::from_rows(Eigen::MatrixXd::Constant(1, 3, 1.0 / 3), true)));
  }
}

TEST_CASE("assumption audits", "[losses]") {
  SECTION("MSE has K2 = mu_C = 1 within 1e-9") {
    const LossSpec spec = make_loss(LossKind::Mse, TargetSet::one_hot({0, 1}, 2));
    const SublevelProbe probe = audit_assumptions(spec, 2.0, 500, 77);
    CHECK(std::abs(probe.k2 - 1.0) <= 1e-9);
    CHECK(std::abs(probe.mu_c - 1.0) <= 1e-9);
  }

  SECTION("cross-entropy gradient norm stays within sqrt(2N)") {
    const int n = 4;
    const LossSpec spec = make_loss(LossKind::CrossEntropy, TargetSet::one_hot({0, 1, 2, 0}, 3));
    const SublevelProbe probe = audit_assumptions(spec, spec.inf_value + 3.0, 1000, 78);
    CHECK(probe.k1 <= std::sqrt(2.0 * n) + 1e-12);
  }

  SECTION("full-support cross entropy satisfies the analytic PL floor") {
    const LossSpec spec =
        make_loss(LossKind::CrossEntropy, TargetSet::smoothed({0, 1, 2}, 3, 0.2));
    const SublevelProbe probe = audit_assumptions(spec, spec.inf_value + 1.0, 1000, 79);
    REQUIRE(probe.has_analytic_mu);
    CHECK(probe.mu_c >= probe.analytic_mu);
    // The same constant certifies the quadratic-growth side on every sample:
    // C - inf C <= |grad C|^2 / (2 mu) is k2 <= ... rearranged; probing k2
    // against the analytic floor is vacuous, so check mu directly above.
  }

  SECTION("K0 below the infimum is rejected") {
    const LossSpec spec = make_loss(LossKind::CrossEntropy, TargetSet::smoothed({0}, 2, 0.2));
    CHECK_THROWS(audit_assumptions(spec, 0.5 * spec.inf_value, 10, 80));
  }
}
