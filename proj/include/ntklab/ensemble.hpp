#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

#include "ntklab/flow.hpp"
#include "ntklab/kernels.hpp"
#include "ntklab/losses.hpp"

namespace ntklab {

/// Draws from the centered Gaussian with the given covariance, one draw per
/// row.  Cholesky with diagonal jitter 1e-8 tr/N, escalated once to 1e-6
/// before giving up.  Fixed seed gives a bit-identical draw matrix.
inline Eigen::MatrixXd sample_gaussian(const Eigen::MatrixXd& cov, int n_samples,
                                       std::uint64_t seed) {
  if (cov.rows() != cov.cols()) throw std::invalid_argument("sample_gaussian: covariance not square");
  const Eigen::Index d = cov.rows();
  Eigen::MatrixXd reg = cov;
  reg.diagonal().array() += kernel_jitter(cov, 1e-8);
  Eigen::LLT<Eigen::MatrixXd> llt(reg);
  if (llt.info() != Eigen::Success) {
    reg = cov;
    reg.diagonal().array() += kernel_jitter(cov, 1e-6);
    llt.compute(reg);
    if (llt.info() != Eigen::Success)
      throw std::runtime_error("sample_gaussian: factorization failed after jitter escalation");
  }
  const Eigen::MatrixXd l = llt.matrixL();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Eigen::MatrixXd out(n_samples, d);
  Eigen::VectorXd u(d);
  for (int s = 0; s < n_samples; ++s) {
    for (Eigen::Index i = 0; i < d; ++i) u(i) = gauss(rng);
    out.row(s) = (l * u).transpose();
  }
  return out;
}

/// Prior function draws on the pack's points: each of the K output
/// coordinates is an independent Gaussian with the scalar output covariance.
/// Rows are draws laid out point-major, class-minor.
inline Eigen::MatrixXd sample_prior(const KernelPack& pack, int n_samples, std::uint64_t seed) {
  return sample_gaussian(kron_identity(pack.nngp, pack.output_dim), n_samples, seed);
}

struct PushThroughResult {
  Eigen::VectorXd g_train;  // stationary train solution for this draw
  Eigen::VectorXd g_test;   // its interpolation at the test points
  bool converged = false;
  double residual = 0.0;
};

/// Maps one prior draw through training: solves Phi(z) = beta * draw on the
/// train coordinates and interpolates to the test points.  The problem's own
/// g0 fields are ignored; the draw is the initialization.
inline PushThroughResult push_through(const FlowProblem& pb, const Eigen::VectorXd& draw_train,
                                      const Eigen::VectorXd& draw_test,
                                      const NewtonOptions& base_opts = {}) {
  if (draw_train.size() != pb.n_train_coords() || draw_test.size() != pb.n_test_coords())
    throw std::invalid_argument("push_through: draw does not match the problem");
  NewtonOptions opts = base_opts;
  if (!opts.init) opts.init = draw_train;
  const NewtonResult res = phi_inverse(pb, pb.beta * draw_train, opts);
  PushThroughResult out;
  out.converged = res.converged;
  out.residual = res.residual;
  out.g_train = res.z;
  if (!res.converged) return out;
  out.g_test = draw_test + pb.theta_sx * pb.solve_theta(res.z - draw_train);
  if (pb.beta > 0.0) {
    const Eigen::VectorXd alt =
        draw_test - (1.0 / pb.beta) * (pb.theta_sx * loss_gradient(pb.spec, res.z));
    const double diff = (out.g_test - alt).lpNorm<Eigen::Infinity>();
    if (diff > 1e-6 * (1.0 + out.g_test.lpNorm<Eigen::Infinity>())) {
      out.converged = false;
      out.residual = diff;
    }
  }
  return out;
}

/// Deterministic anchor of the ensemble distribution: the zero-initialization
/// stationary solution g* = Phi^-1(0), the loss curvature there, and the
/// response operator A = Theta H* + beta I.
struct MapAnchor {
  Eigen::VectorXd g_star;
  Eigen::MatrixXd h_star;
  Eigen::MatrixXd a_matrix;
  Eigen::MatrixXd h_a_inv;  // H* A^-1, symmetric by the push-through identity
  double residual = 0.0;
  double asymmetry = 0.0;
};

inline MapAnchor map_anchor(const FlowProblem& pb, const NewtonOptions& opts = {}) {
  const int nk = pb.n_train_coords();
  const NewtonResult res = phi_inverse(pb, Eigen::VectorXd::Zero(nk), opts);
  if (!res.converged)
    throw std::runtime_error("map_anchor: stationary solve failed: " + res.message);
  MapAnchor anchor;
  anchor.g_star = res.z;
  anchor.residual = res.residual;
  anchor.h_star = loss_hessian(pb.spec, res.z);
  anchor.a_matrix = pb.theta_xx * anchor.h_star + pb.beta * Eigen::MatrixXd::Identity(nk, nk);
  const Eigen::MatrixXd a_inv = anchor.a_matrix.partialPivLu().inverse();
  anchor.h_a_inv = anchor.h_star * a_inv;
  anchor.asymmetry = (anchor.h_a_inv - anchor.h_a_inv.transpose()).lpNorm<Eigen::Infinity>();
  if (anchor.asymmetry > 1e-8)
    throw std::runtime_error("map_anchor: H* A^-1 lost symmetry beyond tolerance");
  return anchor;
}

struct GaussianApprox {
  Eigen::VectorXd mu;     // Theta_sx Theta^-1 g*
  Eigen::MatrixXd sigma;  // ensemble covariance at the test points
};

/// First-order ensemble law at the test points.  The general form uses the
/// output covariance blocks; when the problem was built with the output
/// covariance set equal to the tangent kernel the reduced expression
/// Theta_ss - Theta_sx (H A^-1 + beta A^-T H A^-1) Theta_xs is used and the
/// two agree to roundoff.
inline GaussianApprox gaussian_approx(const FlowProblem& pb, const MapAnchor& anchor) {
  if (pb.nngp_ss.size() == 0)
    throw std::invalid_argument("gaussian_approx: problem carries no output covariance blocks");
  GaussianApprox out;
  out.mu = pb.theta_sx * pb.solve_theta(anchor.g_star);
  const Eigen::MatrixXd& ha = anchor.h_a_inv;
  if (pb.kernels_equal) {
    const Eigen::MatrixXd a_inv_t =
        anchor.a_matrix.transpose().partialPivLu().solve(Eigen::MatrixXd::Identity(ha.rows(), ha.cols()));
    const Eigen::MatrixXd middle = ha + pb.beta * (a_inv_t * ha);
    out.sigma = pb.theta_ss - pb.theta_sx * middle * pb.theta_sx.transpose();
  } else {
    const Eigen::MatrixXd m = pb.theta_sx * ha;  // response of the test prediction to the draw
    out.sigma = pb.nngp_ss - pb.nngp_sx * ha.transpose() * pb.theta_sx.transpose() -
                m * pb.nngp_sx.transpose() + m * pb.nngp_xx * m.transpose();
  }
  out.sigma = 0.5 * (out.sigma + out.sigma.transpose());
  return out;
}

/// Kernel Laplace covariance at the test points:
/// Theta_ss - Theta_sx H* A^-1 Theta_xs, symmetrized after checking that the
/// asymmetry is below 1e-8.
inline Eigen::MatrixXd laplace_cov(const FlowProblem& pb, const MapAnchor& anchor) {
  Eigen::MatrixXd sigma = pb.theta_ss - pb.theta_sx * anchor.h_a_inv * pb.theta_sx.transpose();
  const double asym = (sigma - sigma.transpose()).lpNorm<Eigen::Infinity>();
  if (asym > 1e-8)
    throw std::runtime_error("laplace_cov: covariance asymmetry beyond tolerance");
  return 0.5 * (sigma + sigma.transpose());
}

struct GapCertificate {
  double min_eigenvalue = 0.0;   // of Sigma_Lap - Sigma_Ens
  double max_closed_form_diff = 0.0;
  Eigen::MatrixXd gap;
};

/// Laplace-minus-ensemble covariance gap, valid when the output covariance
/// equals the tangent kernel.  The difference has the closed form
/// beta Theta_sx A^-T H* A^-1 Theta_xs, manifestly PSD and zero at beta = 0.
inline GapCertificate gap_certificate(const FlowProblem& pb, const MapAnchor& anchor) {
  if (!pb.kernels_equal)
    throw std::invalid_argument("gap_certificate: needs the matched-kernel configuration");
  const GaussianApprox ens = gaussian_approx(pb, anchor);
  const Eigen::MatrixXd lap = laplace_cov(pb, anchor);
  GapCertificate cert;
  cert.gap = lap - ens.sigma;
  const Eigen::Index mk = cert.gap.rows();
  const Eigen::MatrixXd a_inv_times =
      anchor.a_matrix.partialPivLu().solve(pb.theta_sx.transpose());  // A^-1 Theta_xs
  const Eigen::MatrixXd closed = pb.beta * a_inv_times.transpose() * anchor.h_star * a_inv_times;
  cert.max_closed_form_diff = (cert.gap - closed).lpNorm<Eigen::Infinity>();
  if (mk > 0) {
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (cert.gap + cert.gap.transpose()));
    cert.min_eigenvalue = eig.eigenvalues().minCoeff();
  }
  return cert;
}

/// Finite ensemble of push-through solutions plus the matching analytic
/// summaries.  Covariances are over the test coordinates; per-class marginal
/// variances are the diagonal.
struct EnsembleSummary {
  int n_draws = 0;
  int failures = 0;
  Eigen::MatrixXd draws_test;  // successes x (M K)
  Eigen::VectorXd mean_test;
  Eigen::MatrixXd cov_test;
  Eigen::VectorXd mu_ens;
  Eigen::MatrixXd sigma_ens;
  Eigen::MatrixXd sigma_lap;
  double gap_min_eig = 0.0;
  double gap_closed_form_diff = 0.0;
  bool has_gap = false;

  double failure_rate() const { return n_draws ? double(failures) / n_draws : 0.0; }
};

inline EnsembleSummary ensemble_summary(const FlowProblem& pb, int n_draws, std::uint64_t seed) {
  if (pb.nngp_xx.size() == 0)
    throw std::invalid_argument("ensemble_summary: problem carries no output covariance blocks");
  const int nk = pb.n_train_coords();
  const int mk = pb.n_test_coords();
  Eigen::MatrixXd joint(nk + mk, nk + mk);
  joint.topLeftCorner(nk, nk) = pb.nngp_xx;
  joint.bottomLeftCorner(mk, nk) = pb.nngp_sx;
  joint.topRightCorner(nk, mk) = pb.nngp_sx.transpose();
  joint.bottomRightCorner(mk, mk) = pb.nngp_ss;
  const Eigen::MatrixXd draws = sample_gaussian(joint, n_draws, seed);

  EnsembleSummary summary;
  summary.n_draws = n_draws;
  std::vector<Eigen::VectorXd> outputs;
  outputs.reserve(static_cast<size_t>(n_draws));
  for (int s = 0; s < n_draws; ++s) {
    const Eigen::VectorXd d_train = draws.row(s).head(nk).transpose();
    const Eigen::VectorXd d_test = draws.row(s).tail(mk).transpose();
    const PushThroughResult res = push_through(pb, d_train, d_test);
    if (res.converged)
      outputs.push_back(res.g_test);
    else
      ++summary.failures;
  }
  const int ok = static_cast<int>(outputs.size());
  if (ok == 0) throw std::runtime_error("ensemble_summary: every push-through draw failed");
  summary.draws_test.resize(ok, mk);
  for (int s = 0; s < ok; ++s) summary.draws_test.row(s) = outputs[static_cast<size_t>(s)].transpose();
  summary.mean_test = summary.draws_test.colwise().mean().transpose();
  Eigen::MatrixXd centered = summary.draws_test.rowwise() - summary.mean_test.transpose();
  summary.cov_test = centered.transpose() * centered / std::max(1, ok - 1);

  const MapAnchor anchor = map_anchor(pb);
  const GaussianApprox approx = gaussian_approx(pb, anchor);
  summary.mu_ens = approx.mu;
  summary.sigma_ens = approx.sigma;
  summary.sigma_lap = laplace_cov(pb, anchor);
  if (pb.kernels_equal) {
    const GapCertificate cert = gap_certificate(pb, anchor);
    summary.gap_min_eig = cert.min_eigenvalue;
    summary.gap_closed_form_diff = cert.max_closed_form_diff;
    summary.has_gap = true;
  }
  return summary;
}

}  // namespace ntklab
