#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ntklab/kernels.hpp"
#include "ntklab/losses.hpp"
#include "ntklab/ode.hpp"

namespace ntklab {

/// Kernel training problem in function space.  All operators are stored
/// densely over the NK class coordinates; when built from analytic packs the
/// scalar NxN kernel is kept as well and drives the structured fast paths.
/// Kernel matrices may come from analytic recursions or from an empirical
/// tangent kernel, the dynamics do not care.
struct FlowProblem {
  Eigen::MatrixXd theta_xx;  // train x train tangent kernel, NK x NK
  Eigen::MatrixXd theta_sx;  // test x train
  Eigen::MatrixXd theta_ss;  // test x test
  Eigen::MatrixXd nngp_xx;   // output covariances, empty unless supplied
  Eigen::MatrixXd nngp_sx;
  Eigen::MatrixXd nngp_ss;
  Eigen::MatrixXd theta_scalar;  // N x N form behind theta_xx, when analytic
  bool has_scalar = false;
  bool kernels_equal = false;  // nngp blocks were set equal to the tangent blocks

  LossSpec spec;
  double beta = 0.0;
  double eta0 = 1.0;
  Eigen::VectorXd g0_train;
  Eigen::VectorXd g0_test;

  std::vector<Eigen::VectorXd> train_points;  // metadata for serialization
  std::vector<Eigen::VectorXd> test_points;
  std::uint64_t arch_hash = 0;

  // Eigendecomposition of theta_xx + jitter, shared by solves and quadratics.
  Eigen::MatrixXd theta_evec;
  Eigen::VectorXd theta_eval;
  double jitter_used = 0.0;

  int n_train_coords() const { return static_cast<int>(theta_xx.rows()); }
  int n_test_coords() const { return static_cast<int>(theta_sx.rows()); }
  int classes() const { return spec.targets.k; }

  double theta_lambda_max() const { return theta_eval.maxCoeff(); }
  double theta_cond() const { return theta_eval.maxCoeff() / theta_eval.minCoeff(); }

  Eigen::VectorXd solve_theta(const Eigen::VectorXd& v) const {
    return theta_evec * (theta_eval.cwiseInverse().asDiagonal() * (theta_evec.transpose() * v));
  }
  double theta_quadratic(const Eigen::VectorXd& v) const {
    const Eigen::VectorXd w = theta_evec.transpose() * v;
    return (w.array().square() / theta_eval.array()).sum();
  }

  void finalize() {
    spec.targets.validate();
    const int nk = spec.coords();
    if (theta_xx.rows() != nk || theta_xx.cols() != nk)
      throw std::invalid_argument("FlowProblem: train kernel does not match the targets");
    if (g0_train.size() != nk) throw std::invalid_argument("FlowProblem: g0_train size mismatch");
    if (theta_sx.rows() != g0_test.size() || theta_sx.cols() != nk)
      throw std::invalid_argument("FlowProblem: test kernel blocks mismatch");
    if (beta < 0) throw std::invalid_argument("FlowProblem: beta must be >= 0");
    if (!(eta0 > 0)) throw std::invalid_argument("FlowProblem: eta0 must be > 0");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(theta_xx);
    if (eig.info() != Eigen::Success)
      throw std::runtime_error("FlowProblem: kernel eigendecomposition failed");
    jitter_used = 0.0;
    // Jitter only a numerically singular kernel; an unconditional bump would
    // perturb solve_theta past the accuracy the stationary formulas rely on.
    if (eig.eigenvalues().minCoeff() <= 1e-12 * std::max(eig.eigenvalues().maxCoeff(), 0.0)) {
      Eigen::MatrixXd reg = theta_xx;
      jitter_used = kernel_jitter(theta_xx);
      reg.diagonal().array() += jitter_used;
      eig.compute(reg);
      if (eig.info() != Eigen::Success)
        throw std::runtime_error("FlowProblem: kernel eigendecomposition failed");
      if (eig.eigenvalues().minCoeff() <= 0)
        throw std::runtime_error("FlowProblem: train kernel is not positive definite after jitter");
    }
    theta_evec = eig.eigenvectors();
    theta_eval = eig.eigenvalues();
  }
};

/// Builds the problem from analytic kernel packs; class structure enters as
/// kron with the identity.  g0_test may be empty when there are no test points.
inline FlowProblem make_flow_problem(const KernelPack& pack, const CrossKernels& cross,
                                     const LossSpec& spec, double beta, double eta0,
                                     const Eigen::VectorXd& g0_train,
                                     const Eigen::VectorXd& g0_test,
                                     bool kernels_equal = false) {
  FlowProblem pb;
  const int k = spec.targets.k;
  pb.theta_scalar = pack.ntk;
  pb.has_scalar = true;
  pb.theta_xx = kron_identity(pack.ntk, k);
  pb.theta_sx = kron_identity(cross.ntk_test_train, k);
  pb.theta_ss = kron_identity(cross.ntk_test_test, k);
  pb.kernels_equal = kernels_equal;
  if (kernels_equal) {
    pb.nngp_xx = pb.theta_xx;
    pb.nngp_sx = pb.theta_sx;
    pb.nngp_ss = pb.theta_ss;
  } else {
    pb.nngp_xx = kron_identity(pack.nngp, k);
    pb.nngp_sx = kron_identity(cross.nngp_test_train, k);
    pb.nngp_ss = kron_identity(cross.nngp_test_test, k);
  }
  pb.spec = spec;
  pb.beta = beta;
  pb.eta0 = eta0;
  pb.g0_train = g0_train;
  pb.g0_test = g0_test.size() ? g0_test : Eigen::VectorXd::Zero(pb.theta_sx.rows());
  pb.train_points = pack.points;
  pb.finalize();
  return pb;
}

/// Same, but with dense kernel blocks supplied directly (e.g. an empirical
/// tangent kernel of a finite net).  Output-covariance blocks stay empty.
inline FlowProblem make_flow_problem_dense(const Eigen::MatrixXd& theta_xx,
                                           const Eigen::MatrixXd& theta_sx,
                                           const Eigen::MatrixXd& theta_ss, const LossSpec& spec,
                                           double beta, double eta0,
                                           const Eigen::VectorXd& g0_train,
                                           const Eigen::VectorXd& g0_test) {
  FlowProblem pb;
  pb.theta_xx = theta_xx;
  pb.theta_sx = theta_sx;
  pb.theta_ss = theta_ss;
  pb.spec = spec;
  pb.beta = beta;
  pb.eta0 = eta0;
  pb.g0_train = g0_train;
  pb.g0_test = g0_test;
  pb.finalize();
  return pb;
}

/// Phi(z) = Theta grad C(z) + beta z, the stationarity operator: solutions of
/// Phi(z) = beta g0 are the rest points of the regularized flow.  Uses the
/// scalar kron structure when available.
inline Eigen::VectorXd phi_apply(const FlowProblem& pb, const Eigen::VectorXd& z) {
  if (z.size() != pb.n_train_coords()) throw std::invalid_argument("phi_apply: size mismatch");
  const Eigen::VectorXd g = loss_gradient(pb.spec, z);
  if (pb.has_scalar) {
    const int k = pb.classes();
    const int n = pb.spec.targets.n;
    const Eigen::Map<const Eigen::MatrixXd> gm(g.data(), k, n);
    const Eigen::MatrixXd prod = gm * pb.theta_scalar;  // symmetric scalar kernel
    return Eigen::Map<const Eigen::VectorXd>(prod.data(), n * k) + pb.beta * z;
  }
  return pb.theta_xx * g + pb.beta * z;
}

struct NewtonOptions {
  int max_iter = 100;
  double tol = 1e-10;  // on ||Phi(z) - rhs|| relative to 1 + ||rhs||
  int max_backtrack = 40;
  int precondition_steps = 200;
  std::optional<Eigen::VectorXd> init;
};

struct NewtonResult {
  Eigen::VectorXd z;
  bool converged = false;
  double residual = 0.0;
  int iterations = 0;
  std::string message;
};

/// Damped Newton solve of Phi(z) = rhs.  Steps use the exact Jacobian
/// Theta hess C + beta I with residual backtracking; if the very first step
/// cannot reduce the residual a short explicit gradient-flow run
/// preconditions the iterate and Newton restarts from there.
inline NewtonResult phi_inverse(const FlowProblem& pb, const Eigen::VectorXd& rhs,
                                const NewtonOptions& opts = {}) {
  const int nk = pb.n_train_coords();
  if (rhs.size() != nk) throw std::invalid_argument("phi_inverse: rhs size mismatch");
  if (pb.beta == 0.0 && pb.spec.kind == LossKind::CrossEntropy)
    throw std::invalid_argument(
        "phi_inverse: plain cross entropy at beta = 0 has a flat direction per point; use the "
        "centered flow");

  NewtonResult res;
  res.z = opts.init ? *opts.init
                    : (pb.beta > 0.0 ? Eigen::VectorXd(rhs / pb.beta) : Eigen::VectorXd::Zero(nk));
  const double tol_abs = opts.tol * (1.0 + rhs.norm());
  Eigen::VectorXd f = phi_apply(pb, res.z) - rhs;
  double r = f.norm();
  bool preconditioned = false;

  for (res.iterations = 0; res.iterations < opts.max_iter; ++res.iterations) {
    if (r <= tol_abs) {
      res.converged = true;
      res.residual = r;
      return res;
    }
    const Eigen::MatrixXd m =
        pb.theta_xx * loss_hessian(pb.spec, res.z) +
        pb.beta * Eigen::MatrixXd::Identity(nk, nk);
    Eigen::VectorXd step = m.partialPivLu().solve(-f);
    if (!step.allFinite()) {
      res.residual = r;
      res.message = "singular Newton system";
      return res;
    }
    // A full step can land in loss saturation where the Hessian underflows
    // and the next system is singular; cap the step so the iterate approaches
    // such regions gradually.  Scaling the direction keeps it a descent
    // direction for the residual norm, and the cap grows with the iterate,
    // so distant roots stay reachable in logarithmically many steps.
    const double cap = 2.0 * (1.0 + res.z.norm());
    if (step.norm() > cap) step *= cap / step.norm();

    double lambda = 1.0;
    bool accepted = false;
    Eigen::VectorXd z_try, f_try;
    double r_try = r;
    for (int bt = 0; bt < opts.max_backtrack; ++bt) {
      z_try = res.z + lambda * step;
      f_try = phi_apply(pb, z_try) - rhs;
      r_try = f_try.norm();
      if (r_try < r * (1.0 - 1e-4 * lambda)) {
        accepted = true;
        break;
      }
      lambda *= 0.5;
    }

    if (!accepted) {
      if (!preconditioned && opts.precondition_steps > 0) {
        preconditioned = true;
        const double tau = 1.0 / (pb.eta0 * (pb.theta_lambda_max() + pb.beta));
        for (int it = 0; it < opts.precondition_steps; ++it)
          res.z -= tau * (phi_apply(pb, res.z) - rhs);
        f = phi_apply(pb, res.z) - rhs;
        r = f.norm();
        continue;
      }
      res.residual = r;
      res.message = "Newton stagnation: backtracking found no descent";
      return res;
    }

    if (lambda * step.norm() <= 1e-14 * (1.0 + res.z.norm()) && r_try > tol_abs) {
      res.z = z_try;
      res.residual = r_try;
      res.message = "Newton stagnation: step size underflow";
      return res;
    }
    res.z = z_try;
    f = f_try;
    r = r_try;
  }
  res.residual = r;
  res.converged = r <= tol_abs;
  if (!res.converged) res.message = "Newton iteration budget exhausted";
  return res;
}

struct FlowState {
  double t = 0.0;
  Eigen::VectorXd g_train;
  Eigen::VectorXd g_test;
};

struct FlowTrajectory {
  std::vector<FlowState> states;
  bool objective_monotone = true;
  bool step_underflow = false;
  long steps_accepted = 0;
  long steps_rejected = 0;
  double final_grad_norm = 0.0;
  double max_identity_residual = 0.0;  // test increments vs Theta_sx Theta^-1 train increments
};

struct FlowOptions {
  double record_every = 0.0;  // 0: only endpoints
  OdeOptions ode;
  bool check_identity = true;
};

/// Kernel objective whose gradient flow this is: C(g) + beta/2 |g - g0|^2
/// in the kernel metric.
inline double map_objective(const FlowProblem& pb, const Eigen::VectorXd& g_train) {
  double val = loss_value(pb.spec, g_train);
  if (pb.beta != 0.0) val += 0.5 * pb.beta * pb.theta_quadratic(g_train - pb.g0_train);
  return val;
}

/// Integrates dg/dt = -eta0 (Theta grad C(g_X) + beta (g - g0)) jointly over
/// train and test coordinates.  Along the exact flow the test increments are
/// the kernel interpolation of the train increments; that identity is checked
/// at every recorded state.
inline FlowTrajectory integrate_flow(const FlowProblem& pb, double t_end,
                                     const FlowOptions& opts = {}) {
  const int nk = pb.n_train_coords();
  const int mk = pb.n_test_coords();
  Eigen::VectorXd y(nk + mk);
  y.head(nk) = pb.g0_train;
  if (mk > 0) y.tail(mk) = pb.g0_test;

  auto rhs = [&](const Eigen::VectorXd& state, Eigen::VectorXd& dy) {
    const Eigen::VectorXd gc = loss_gradient(pb.spec, state.head(nk));
    dy.head(nk) = -pb.eta0 * (pb.theta_xx * gc + pb.beta * (state.head(nk) - pb.g0_train));
    if (mk > 0)
      dy.tail(mk) = -pb.eta0 * (pb.theta_sx * gc + pb.beta * (state.tail(mk) - pb.g0_test));
  };
  auto objective = [&](const Eigen::VectorXd& state) { return map_objective(pb, state.head(nk)); };
  auto grad_norm = [&](const Eigen::VectorXd& state) {
    return (pb.theta_xx * loss_gradient(pb.spec, state.head(nk)) +
            pb.beta * (state.head(nk) - pb.g0_train))
        .norm();
  };

  FlowTrajectory traj;
  auto recorder = [&](double t, const Eigen::VectorXd& state) {
    FlowState fs;
    fs.t = t;
    fs.g_train = state.head(nk);
    if (mk > 0) fs.g_test = state.tail(mk);
    if (opts.check_identity && mk > 0) {
      const Eigen::VectorXd expected =
          pb.g0_test + pb.theta_sx * pb.solve_theta(fs.g_train - pb.g0_train);
      const double resid = (fs.g_test - expected).norm() / (1.0 + fs.g_test.norm());
      traj.max_identity_residual = std::max(traj.max_identity_residual, resid);
    }
    traj.states.push_back(std::move(fs));
  };

  const double rec = opts.record_every > 0 ? opts.record_every : t_end;
  const OdeStatus status =
      integrate_rkf45(rhs, y, 0.0, t_end, rec, opts.ode, recorder, objective, grad_norm);
  traj.step_underflow = status.step_underflow;
  traj.objective_monotone = !status.monotone_violation;
  traj.steps_accepted = status.steps_accepted;
  traj.steps_rejected = status.steps_rejected;
  traj.final_grad_norm = grad_norm(y);
  if (opts.check_identity && traj.max_identity_residual > 1e-6)
    throw std::runtime_error("integrate_flow: kernel interpolation identity violated");
  return traj;
}

struct TestPrediction {
  Eigen::VectorXd value;                    // interpolation formula
  std::optional<Eigen::VectorXd> gradient_form;  // -1/beta response formula, beta > 0
  double max_abs_diff = 0.0;
};

/// Stationary prediction at the test points from a train-set solution.
/// Two algebraically equal routes are evaluated and cross-checked:
///   g0(x') + Theta_sx Theta^-1 (g_inf - g0(X))
///   g0(x') - 1/beta Theta_sx grad C(g_inf)        (beta > 0 only)
inline TestPrediction predict_test(const FlowProblem& pb, const Eigen::VectorXd& g_inf,
                                   double tol = 1e-6) {
  if (g_inf.size() != pb.n_train_coords())
    throw std::invalid_argument("predict_test: train solution size mismatch");
  TestPrediction out;
  out.value = pb.g0_test + pb.theta_sx * pb.solve_theta(g_inf - pb.g0_train);
  if (pb.beta > 0.0) {
    out.gradient_form =
        pb.g0_test - (1.0 / pb.beta) * (pb.theta_sx * loss_gradient(pb.spec, g_inf));
    out.max_abs_diff = (out.value - *out.gradient_form).lpNorm<Eigen::Infinity>();
    const double scale = 1.0 + out.value.lpNorm<Eigen::Infinity>();
    if (out.max_abs_diff > tol * scale)
      throw std::runtime_error(
          "predict_test: the two stationary formulas disagree, train solution likely unconverged");
  }
  return out;
}

/// Centered view of the flow for plain cross entropy: the per-point class
/// mean is invisible to the loss, so trajectories are reported through the
/// centering projector.  Requires K >= 2 (with one logit the reference-class
/// losses already fix the gauge and centering would erase the signal).
inline FlowTrajectory centered_flow(const FlowProblem& pb, double t_end,
                                    const FlowOptions& opts = {}) {
  if (pb.spec.kind != LossKind::CrossEntropy)
    throw std::invalid_argument("centered_flow: defined for plain cross entropy");
  if (pb.classes() < 2)
    throw std::invalid_argument("centered_flow: needs K >= 2; one-logit problems use the "
                                "reference-class losses");
  if (pb.beta == 0.0 && !pb.spec.targets.full_support())
    throw std::invalid_argument("centered_flow: beta = 0 needs full-support targets");
  FlowTrajectory traj = integrate_flow(pb, t_end, opts);
  const int k = pb.classes();
  for (auto& st : traj.states) {
    st.g_train = center_project(st.g_train, k);
    if (st.g_test.size()) st.g_test = center_project(st.g_test, k);
  }
  return traj;
}

struct StationaryPoint {
  Eigen::VectorXd z;
  std::string kind;  // "min", "max", "saddle"
  double objective = 0.0;
};

/// Multi-start Newton root finding for Phi(z) = beta g0, classifying each
/// root by the Hessian of the kernel objective, hess C + beta Theta^-1.
/// Exists because losses without convex function-space shape (the Brier
/// variant) can hold several rest points.
inline std::vector<StationaryPoint> find_stationary_points(
    const FlowProblem& pb, const std::vector<Eigen::VectorXd>& starts,
    const NewtonOptions& base_opts = {}) {
  const int nk = pb.n_train_coords();
  const Eigen::VectorXd rhs = pb.beta * pb.g0_train;
  std::vector<StationaryPoint> found;
  Eigen::MatrixXd theta_inv =
      pb.theta_evec * pb.theta_eval.cwiseInverse().asDiagonal() * pb.theta_evec.transpose();
  for (const auto& s : starts) {
    NewtonOptions opts = base_opts;
    opts.init = s;
    opts.precondition_steps = 0;  // failures are expected away from basins
    const NewtonResult res = phi_inverse(pb, rhs, opts);
    if (!res.converged) continue;
    // A vanishing-gradient tail can pass the residual tolerance far from any
    // rest point; demand that a full Newton increment is negligible there.
    Eigen::MatrixXd jac = pb.theta_xx * loss_hessian(pb.spec, res.z);
    jac.diagonal().array() += pb.beta;
    const Eigen::VectorXd increment = jac.partialPivLu().solve(phi_apply(pb, res.z) - rhs);
    if (!increment.allFinite() ||
        increment.lpNorm<Eigen::Infinity>() > 1e-6 * (1.0 + res.z.lpNorm<Eigen::Infinity>()))
      continue;
    bool dup = false;
    for (const auto& q : found)
      if ((q.z - res.z).lpNorm<Eigen::Infinity>() < 1e-6) dup = true;
    if (dup) continue;
    StationaryPoint sp;
    sp.z = res.z;
    sp.objective = map_objective(pb, res.z);
    Eigen::MatrixXd hobj = loss_hessian(pb.spec, res.z);
    if (pb.beta != 0.0) hobj += pb.beta * theta_inv;
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(hobj);
    const double lo = eig.eigenvalues().minCoeff(), hi = eig.eigenvalues().maxCoeff();
    const double scale = std::max(1.0, std::abs(hi));
    if (lo > 1e-10 * scale)
      sp.kind = "min";
    else if (hi < -1e-10 * scale)
      sp.kind = "max";
    else
      sp.kind = "saddle";
    found.push_back(std::move(sp));
  }
  std::sort(found.begin(), found.end(),
            [](const StationaryPoint& a, const StationaryPoint& b) { return a.z(0) < b.z(0); });
  return found;
}

}  // namespace ntklab
