#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

#include "ntklab/arch.hpp"
#include "ntklab/kernels.hpp"
#include "ntklab/losses.hpp"
#include "ntklab/ode.hpp"

namespace ntklab {

inline constexpr double kTwoOverSqrtPi = 1.1283791670955125738961589031215452;

/// Finite net in NTK parametrization.  theta stores all parameters flat,
/// per affine map first the weight matrix (column major) then the bias:
/// layer l computes sigma_w[l] * W_l x / sqrt(fan_in) + sigma_b[l] * b_l.
/// Parameters are unit Gaussians at initialization; the sigmas live in the
/// layer map so the analytic kernels describe this exact net.
struct NetSnapshot {
  ArchSpec arch;
  Eigen::VectorXd theta;
  Eigen::VectorXd theta0;
  std::vector<long> w_off, b_off;

  long weight_offset(int l) const { return w_off[static_cast<size_t>(l)]; }
  long bias_offset(int l) const { return b_off[static_cast<size_t>(l)]; }

  Eigen::Map<const Eigen::MatrixXd> weight(const Eigen::VectorXd& th, int l) const {
    return {th.data() + weight_offset(l), arch.fan_out(l), arch.fan_in(l)};
  }
  Eigen::Map<const Eigen::VectorXd> bias(const Eigen::VectorXd& th, int l) const {
    return {th.data() + bias_offset(l), arch.fan_out(l)};
  }
};

inline NetSnapshot init_net(const ArchSpec& arch, std::uint64_t seed) {
  arch.validate();
  if (!arch.has_widths()) throw std::invalid_argument("init_net: arch needs explicit widths");
  NetSnapshot net;
  net.arch = arch;
  const long p = arch.param_count();
  net.w_off.resize(static_cast<size_t>(arch.depth) + 1);
  net.b_off.resize(static_cast<size_t>(arch.depth) + 1);
  long off = 0;
  for (int l = 0; l <= arch.depth; ++l) {
    net.w_off[static_cast<size_t>(l)] = off;
    off += static_cast<long>(arch.fan_out(l)) * arch.fan_in(l);
    net.b_off[static_cast<size_t>(l)] = off;
    off += arch.fan_out(l);
  }
  net.theta.resize(p);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (long i = 0; i < p; ++i) net.theta(i) = gauss(rng);
  net.theta0 = net.theta;
  return net;
}

/// Per-layer weight/bias matrices; unflatten(flatten(theta)) round-trips
/// exactly because both sides are straight copies in the same layout.
inline std::vector<Eigen::MatrixXd> unflatten(const NetSnapshot& net, const Eigen::VectorXd& th) {
  std::vector<Eigen::MatrixXd> out;
  for (int l = 0; l <= net.arch.depth; ++l) {
    out.emplace_back(net.weight(th, l));
    out.emplace_back(net.bias(th, l));
  }
  return out;
}

inline Eigen::VectorXd flatten(const NetSnapshot& net, const std::vector<Eigen::MatrixXd>& mats) {
  Eigen::VectorXd th(net.arch.param_count());
  size_t idx = 0;
  for (int l = 0; l <= net.arch.depth; ++l) {
    const auto& w = mats.at(idx++);
    const auto& b = mats.at(idx++);
    th.segment(net.weight_offset(l), w.size()) = Eigen::Map<const Eigen::VectorXd>(w.data(), w.size());
    th.segment(net.bias_offset(l), b.size()) = Eigen::Map<const Eigen::VectorXd>(b.data(), b.size());
  }
  return th;
}

struct ForwardCache {
  std::vector<Eigen::MatrixXd> pre;  // pre-activations per affine map
  std::vector<Eigen::MatrixXd> act;  // act[0] = input batch, act[l] = erf(pre[l-1])
};

inline Eigen::MatrixXd pack_points(const std::vector<Eigen::VectorXd>& pts) {
  if (pts.empty()) throw std::invalid_argument("pack_points: empty set");
  Eigen::MatrixXd x(pts[0].size(), static_cast<Eigen::Index>(pts.size()));
  for (size_t i = 0; i < pts.size(); ++i) x.col(static_cast<Eigen::Index>(i)) = pts[i];
  return x;
}

/// Batched forward pass; columns of x are inputs, returns K x N outputs.
inline Eigen::MatrixXd forward_batch(const NetSnapshot& net, const Eigen::VectorXd& th,
                                     const Eigen::MatrixXd& x, ForwardCache* cache = nullptr) {
  if (x.rows() != net.arch.input_dim) throw std::invalid_argument("forward_batch: input dim mismatch");
  const int depth = net.arch.depth;
  if (cache) {
    cache->pre.assign(static_cast<size_t>(depth) + 1, {});
    cache->act.assign(static_cast<size_t>(depth) + 1, {});
    cache->act[0] = x;
  }
  Eigen::MatrixXd a = x;
  for (int l = 0; l <= depth; ++l) {
    const double scale = net.arch.sigma_w[static_cast<size_t>(l)] / std::sqrt(double(net.arch.fan_in(l)));
    Eigen::MatrixXd h = scale * (net.weight(th, l) * a);
    h.colwise() += (net.arch.sigma_b[static_cast<size_t>(l)] * net.bias(th, l)).eval();
    if (cache) cache->pre[static_cast<size_t>(l)] = h;
    if (l == depth) return h;
    a = h.unaryExpr([](double v) { return std::erf(v); });
    if (cache) cache->act[static_cast<size_t>(l) + 1] = a;
  }
  return a;  // unreachable
}

inline Eigen::VectorXd forward_point(const NetSnapshot& net, const Eigen::VectorXd& th,
                                     const Eigen::VectorXd& x) {
  return forward_batch(net, th, x);
}

inline Eigen::MatrixXd erf_deriv(const Eigen::MatrixXd& h) {
  return kTwoOverSqrtPi * (-h.array().square()).exp();
}

/// Parameter gradient of sum_i <gbar_i, f(x_i)> by reverse accumulation;
/// gbar carries d(loss)/d(output) columnwise.
inline Eigen::VectorXd backprop_params(const NetSnapshot& net, const Eigen::VectorXd& th,
                                       const ForwardCache& cache, const Eigen::MatrixXd& gbar) {
  const int depth = net.arch.depth;
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(th.size());
  Eigen::MatrixXd d = gbar;
  for (int l = depth; l >= 0; --l) {
    const double sw = net.arch.sigma_w[static_cast<size_t>(l)];
    const double sb = net.arch.sigma_b[static_cast<size_t>(l)];
    const double scale = sw / std::sqrt(double(net.arch.fan_in(l)));
    auto gw = Eigen::Map<Eigen::MatrixXd>(grad.data() + net.weight_offset(l), net.arch.fan_out(l),
                                          net.arch.fan_in(l));
    gw.noalias() = scale * (d * cache.act[static_cast<size_t>(l)].transpose());
    grad.segment(net.bias_offset(l), net.arch.fan_out(l)) = sb * d.rowwise().sum();
    if (l > 0) {
      Eigen::MatrixXd back = scale * (net.weight(th, l).transpose() * d);
      d = back.array() * erf_deriv(cache.pre[static_cast<size_t>(l) - 1]).array();
    }
  }
  return grad;
}

/// Dense Jacobian of outputs w.r.t. parameters, rows in point-major,
/// class-minor order.  Only for small parameter counts; wide nets go through
/// the factorized products in empirical_ntk instead.
inline Eigen::MatrixXd jacobian(const NetSnapshot& net, const Eigen::VectorXd& th,
                                const std::vector<Eigen::VectorXd>& points) {
  const long p = net.arch.param_count();
  if (p > 8'000'000)
    throw std::runtime_error("jacobian: parameter count too large to materialize, use matrix-free products");
  const int k = net.arch.output_dim;
  const int n = static_cast<int>(points.size());
  Eigen::MatrixXd j(static_cast<long>(n) * k, p);
  for (int i = 0; i < n; ++i) {
    ForwardCache cache;
    forward_batch(net, th, points[static_cast<size_t>(i)], &cache);
    for (int c = 0; c < k; ++c) {
      Eigen::MatrixXd e = Eigen::MatrixXd::Zero(k, 1);
      e(c, 0) = 1.0;
      j.row(static_cast<long>(i) * k + c) = backprop_params(net, th, cache, e).transpose();
    }
  }
  return j;
}

struct EmpiricalNtk {
  Eigen::MatrixXd full;       // (N K) x (N K)
  Eigen::MatrixXd class_avg;  // N x N, mean over matching-class diagonal entries
};

/// Empirical tangent kernel J J^T without materializing J: per layer the
/// Gram factorizes into (backprop deltas) x (feed activations), so the
/// cost stays O(width^2) per point pair.
inline EmpiricalNtk empirical_ntk(const NetSnapshot& net, const Eigen::VectorXd& th,
                                  const std::vector<Eigen::VectorXd>& points) {
  const int depth = net.arch.depth;
  const int k = net.arch.output_dim;
  const int n = static_cast<int>(points.size());
  const int nk = n * k;
  const Eigen::MatrixXd x = pack_points(points);
  ForwardCache cache;
  forward_batch(net, th, x, &cache);

  // delta columns (point i, class c) at the current affine map, walked from
  // the readout towards the input.
  Eigen::MatrixXd delta(k, nk);
  delta.setZero();
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < k; ++c) delta(c, i * k + c) = 1.0;

  Eigen::MatrixXd full = Eigen::MatrixXd::Zero(nk, nk);
  for (int l = depth; l >= 0; --l) {
    const double sw = net.arch.sigma_w[static_cast<size_t>(l)];
    const double sb = net.arch.sigma_b[static_cast<size_t>(l)];
    const Eigen::MatrixXd& act = cache.act[static_cast<size_t>(l)];
    const Eigen::MatrixXd feed =
        (sw * sw / double(net.arch.fan_in(l))) * (act.transpose() * act).eval() +
        sb * sb * Eigen::MatrixXd::Ones(n, n);
    Eigen::MatrixXd dgram = delta.transpose() * delta;  // nk x nk
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        dgram.block(i * k, j * k, k, k) *= feed(i, j);
    full += dgram;
    if (l > 0) {
      const double scale = sw / std::sqrt(double(net.arch.fan_in(l)));
      Eigen::MatrixXd back = scale * (net.weight(th, l).transpose() * delta);
      const Eigen::MatrixXd dphi = erf_deriv(cache.pre[static_cast<size_t>(l) - 1]);
      for (int i = 0; i < n; ++i)
        back.middleCols(i * k, k).array().colwise() *= dphi.col(i).array();
      delta.swap(back);
    }
  }

  EmpiricalNtk out;
  out.full = std::move(full);
  out.class_avg.resize(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int c = 0; c < k; ++c) s += out.full(i * k + c, j * k + c);
      out.class_avg(i, j) = s / k;
    }
  return out;
}

struct TrainOptions {
  double record_every = 1.0;
  bool post_softmax_probes = false;  // also track the softmax-output kernel at probes
  OdeOptions ode;
};

/// Recorded gradient-flow trajectory of the regularized objective
/// L(theta) = C(f_theta(X)) + beta/2 ||theta - theta0||^2 together with a
/// linearized companion trained from the same initialization.
struct TrainTrace {
  std::vector<double> times;
  std::vector<double> loss;              // L(theta_t)
  std::vector<double> theta_dist;        // ||theta_t - theta0||
  std::vector<double> lin_gap;           // sup over test points of ||f - f_lin||_2
  std::vector<double> lin_gap_centered;  // same after per-point class centering
  Eigen::MatrixXd ntk_probes;            // record x probe: trace of the KxK tangent block
  Eigen::MatrixXd post_probes;           // record x probe: trace of the softmax-output block
  bool loss_monotone = true;
  bool step_underflow = false;
  long steps_accepted = 0;
  long steps_rejected = 0;
  double final_grad_norm = 0.0;
  Eigen::MatrixXd f_test_final;      // K x n_test, finite net at t_end
  Eigen::MatrixXd g_lin_test_final;  // K x n_test, linearized companion at t_end
  double sup_lin_gap = 0.0;
  double sup_lin_gap_centered = 0.0;

  double ntk_drift(int probe) const {
    double base = ntk_probes(0, probe), worst = 0.0;
    for (Eigen::Index r = 0; r < ntk_probes.rows(); ++r)
      worst = std::max(worst, std::abs(ntk_probes(r, probe) - base));
    return worst / std::abs(base);
  }
  double post_drift(int probe) const {
    double base = post_probes(0, probe), worst = 0.0;
    for (Eigen::Index r = 0; r < post_probes.rows(); ++r)
      worst = std::max(worst, std::abs(post_probes(r, probe) - base));
    return worst / std::abs(base);
  }
  double max_ntk_drift() const {
    double worst = 0.0;
    for (int p = 0; p < ntk_probes.cols(); ++p) worst = std::max(worst, ntk_drift(p));
    return worst;
  }
  double max_post_drift() const {
    double worst = 0.0;
    for (int p = 0; p < post_probes.cols(); ++p) worst = std::max(worst, post_drift(p));
    return worst;
  }
};

namespace detail {

inline double softmax_kernel_trace(const Eigen::VectorXd& f, const Eigen::MatrixXd& block) {
  const Eigen::VectorXd s = stable_softmax(f);
  const Eigen::MatrixXd sj = Eigen::MatrixXd(s.asDiagonal()) - s * s.transpose();
  return (sj * block * sj.transpose()).trace();
}

}  // namespace detail

/// Gradient flow of the finite net with a jointly integrated linearized
/// companion.  The companion evolves in function space under the empirical
/// tangent kernel frozen at theta0, which is exactly the linearized-network
/// training dynamic, so lin_gap measures the true linearization error along
/// synchronized times.
inline TrainTrace train_flow(NetSnapshot& net, const LossSpec& spec,
                             const std::vector<Eigen::VectorXd>& train_points, double beta,
                             double eta0, double t_end,
                             const std::vector<Eigen::VectorXd>& probe_points,
                             const std::vector<Eigen::VectorXd>& test_points,
                             const TrainOptions& opts = {}) {
  const int k = net.arch.output_dim;
  const int n = static_cast<int>(train_points.size());
  const int nt = static_cast<int>(test_points.size());
  const int nk = n * k, ntk_c = nt * k;
  if (spec.targets.n != n || spec.targets.k != k)
    throw std::invalid_argument("train_flow: loss targets do not match data and architecture");
  const long p = net.arch.param_count();
  const Eigen::MatrixXd x = pack_points(train_points);
  Eigen::MatrixXd xs;
  if (nt > 0) xs = pack_points(test_points);

  // Frozen empirical kernel over train + test for the companion.
  std::vector<Eigen::VectorXd> joint = train_points;
  joint.insert(joint.end(), test_points.begin(), test_points.end());
  const EmpiricalNtk ent = empirical_ntk(net, net.theta0, joint);
  const Eigen::MatrixXd t_xx = ent.full.topLeftCorner(nk, nk);
  const Eigen::MatrixXd t_sx = ent.full.bottomLeftCorner(ntk_c, nk);

  const Eigen::MatrixXd f0_train = forward_batch(net, net.theta0, x);
  Eigen::MatrixXd f0_test(k, std::max(nt, 1));
  if (nt > 0) f0_test = forward_batch(net, net.theta0, xs);
  const Eigen::VectorXd g0_train = Eigen::Map<const Eigen::VectorXd>(f0_train.data(), nk);
  Eigen::VectorXd g0_test(ntk_c);
  if (nt > 0) g0_test = Eigen::Map<const Eigen::VectorXd>(f0_test.data(), ntk_c);

  Eigen::VectorXd y(p + nk + ntk_c);
  y.head(p) = net.theta0;
  y.segment(p, nk) = g0_train;
  if (ntk_c > 0) y.tail(ntk_c) = g0_test;

  auto rhs = [&](const Eigen::VectorXd& state, Eigen::VectorXd& dy) {
    const Eigen::VectorXd th = state.head(p);
    ForwardCache cache;
    const Eigen::MatrixXd f = forward_batch(net, th, x, &cache);
    const Eigen::VectorXd z = Eigen::Map<const Eigen::VectorXd>(f.data(), nk);
    const Eigen::VectorXd gz = loss_gradient(spec, z);
    const Eigen::MatrixXd gbar = Eigen::Map<const Eigen::MatrixXd>(gz.data(), k, n);
    Eigen::VectorXd gtheta = backprop_params(net, th, cache, gbar);
    if (beta != 0.0) gtheta += beta * (th - net.theta0);
    dy.head(p) = -eta0 * gtheta;

    const Eigen::VectorXd glin = state.segment(p, nk);
    const Eigen::VectorXd gc = loss_gradient(spec, glin);
    dy.segment(p, nk) = -eta0 * (t_xx * gc + beta * (glin - g0_train));
    if (ntk_c > 0)
      dy.tail(ntk_c) = -eta0 * (t_sx * gc + beta * (state.tail(ntk_c) - g0_test));
  };

  auto objective = [&](const Eigen::VectorXd& state) {
    const Eigen::VectorXd th = state.head(p);
    const Eigen::MatrixXd f = forward_batch(net, th, x);
    const Eigen::VectorXd z = Eigen::Map<const Eigen::VectorXd>(f.data(), nk);
    return loss_value(spec, z) + 0.5 * beta * (th - net.theta0).squaredNorm();
  };

  TrainTrace trace;
  const int n_probes = static_cast<int>(probe_points.size());
  std::vector<double> probe_row(static_cast<size_t>(n_probes)), post_row(static_cast<size_t>(n_probes));
  std::vector<std::vector<double>> probe_rows, post_rows;

  auto recorder = [&](double t, const Eigen::VectorXd& state) {
    const Eigen::VectorXd th = state.head(p);
    trace.times.push_back(t);
    trace.loss.push_back(objective(state));
    trace.theta_dist.push_back((th - net.theta0).norm());
    for (int q = 0; q < n_probes; ++q) {
      const EmpiricalNtk single = empirical_ntk(net, th, {probe_points[static_cast<size_t>(q)]});
      probe_row[static_cast<size_t>(q)] = single.full.trace();
      if (opts.post_softmax_probes) {
        const Eigen::VectorXd fq = forward_point(net, th, probe_points[static_cast<size_t>(q)]);
        post_row[static_cast<size_t>(q)] = detail::softmax_kernel_trace(fq, single.full);
      }
    }
    probe_rows.push_back(probe_row);
    if (opts.post_softmax_probes) post_rows.push_back(post_row);
    if (nt > 0) {
      const Eigen::MatrixXd fs = forward_batch(net, th, xs);
      const Eigen::VectorXd gs = state.tail(ntk_c);
      double gap = 0.0, gap_c = 0.0;
      for (int j = 0; j < nt; ++j) {
        const Eigen::VectorXd diff = fs.col(j) - gs.segment(static_cast<long>(j) * k, k);
        gap = std::max(gap, diff.norm());
        gap_c = std::max(gap_c, center_project(diff, k).norm());
      }
      trace.lin_gap.push_back(gap);
      trace.lin_gap_centered.push_back(gap_c);
      trace.sup_lin_gap = std::max(trace.sup_lin_gap, gap);
      trace.sup_lin_gap_centered = std::max(trace.sup_lin_gap_centered, gap_c);
    }
  };

  OdeOptions ode = opts.ode;
  const OdeStatus status = integrate_rkf45(rhs, y, 0.0, t_end, opts.record_every, ode, recorder,
                                           objective);

  trace.step_underflow = status.step_underflow;
  trace.loss_monotone = !status.monotone_violation;
  trace.steps_accepted = status.steps_accepted;
  trace.steps_rejected = status.steps_rejected;
  for (size_t r = 1; r < trace.loss.size(); ++r)
    if (trace.loss[r] > trace.loss[r - 1] + ode.monotone_tol) trace.loss_monotone = false;

  trace.ntk_probes.resize(static_cast<Eigen::Index>(probe_rows.size()), n_probes);
  for (size_t r = 0; r < probe_rows.size(); ++r)
    for (int q = 0; q < n_probes; ++q)
      trace.ntk_probes(static_cast<Eigen::Index>(r), q) = probe_rows[r][static_cast<size_t>(q)];
  if (opts.post_softmax_probes) {
    trace.post_probes.resize(static_cast<Eigen::Index>(post_rows.size()), n_probes);
    for (size_t r = 0; r < post_rows.size(); ++r)
      for (int q = 0; q < n_probes; ++q)
        trace.post_probes(static_cast<Eigen::Index>(r), q) = post_rows[r][static_cast<size_t>(q)];
  }

  net.theta = y.head(p);
  {
    ForwardCache cache;
    const Eigen::MatrixXd f = forward_batch(net, net.theta, x, &cache);
    const Eigen::VectorXd z = Eigen::Map<const Eigen::VectorXd>(f.data(), nk);
    const Eigen::MatrixXd gbar =
        Eigen::Map<const Eigen::MatrixXd>(loss_gradient(spec, z).eval().data(), k, n);
    Eigen::VectorXd gtheta = backprop_params(net, net.theta, cache, gbar);
    if (beta != 0.0) gtheta += beta * (net.theta - net.theta0);
    trace.final_grad_norm = gtheta.norm();
  }
  if (nt > 0) {
    trace.f_test_final = forward_batch(net, net.theta, xs);
    trace.g_lin_test_final = Eigen::Map<const Eigen::MatrixXd>(y.tail(ntk_c).eval().data(), k, nt);
  }
  return trace;
}

/// Function-space training of the linearized net alone: the state is the
/// output vector on train + test points driven by the frozen empirical
/// kernel.  theta_dist reports the kernel-metric distance
/// sqrt((g-g0)^T K^-1 (g-g0)), the function-space analogue of the parameter
/// distance.
inline TrainTrace train_linearized(const NetSnapshot& net, const LossSpec& spec,
                                   const std::vector<Eigen::VectorXd>& train_points, double beta,
                                   double eta0, double t_end,
                                   const std::vector<Eigen::VectorXd>& test_points,
                                   const TrainOptions& opts = {}) {
  const int k = net.arch.output_dim;
  const int n = static_cast<int>(train_points.size());
  const int nt = static_cast<int>(test_points.size());
  const int nk = n * k, ntk_c = nt * k;
  const Eigen::MatrixXd x = pack_points(train_points);

  std::vector<Eigen::VectorXd> joint = train_points;
  joint.insert(joint.end(), test_points.begin(), test_points.end());
  const EmpiricalNtk ent = empirical_ntk(net, net.theta0, joint);
  const Eigen::MatrixXd t_xx = ent.full.topLeftCorner(nk, nk);
  const Eigen::MatrixXd t_sx = ent.full.bottomLeftCorner(ntk_c, nk);
  Eigen::MatrixXd t_reg = t_xx;
  t_reg.diagonal().array() += kernel_jitter(t_xx);
  const Eigen::LLT<Eigen::MatrixXd> llt(t_reg);

  const Eigen::MatrixXd f0_train = forward_batch(net, net.theta0, x);
  const Eigen::VectorXd g0_train = Eigen::Map<const Eigen::VectorXd>(f0_train.data(), nk);
  Eigen::VectorXd g0_test(ntk_c);
  if (nt > 0) {
    const Eigen::MatrixXd f0_test = forward_batch(net, net.theta0, pack_points(test_points));
    g0_test = Eigen::Map<const Eigen::VectorXd>(f0_test.data(), ntk_c);
  }

  Eigen::VectorXd y(nk + ntk_c);
  y.head(nk) = g0_train;
  if (ntk_c > 0) y.tail(ntk_c) = g0_test;

  auto rhs = [&](const Eigen::VectorXd& state, Eigen::VectorXd& dy) {
    const Eigen::VectorXd gc = loss_gradient(spec, state.head(nk));
    dy.head(nk) = -eta0 * (t_xx * gc + beta * (state.head(nk) - g0_train));
    if (ntk_c > 0) dy.tail(ntk_c) = -eta0 * (t_sx * gc + beta * (state.tail(ntk_c) - g0_test));
  };
  auto objective = [&](const Eigen::VectorXd& state) {
    const Eigen::VectorXd d = state.head(nk) - g0_train;
    return loss_value(spec, state.head(nk)) + 0.5 * beta * d.dot(llt.solve(d));
  };

  TrainTrace trace;
  auto recorder = [&](double t, const Eigen::VectorXd& state) {
    trace.times.push_back(t);
    trace.loss.push_back(objective(state));
    const Eigen::VectorXd d = state.head(nk) - g0_train;
    trace.theta_dist.push_back(std::sqrt(std::max(0.0, d.dot(llt.solve(d)))));
  };

  const OdeStatus status =
      integrate_rkf45(rhs, y, 0.0, t_end, opts.record_every, opts.ode, recorder, objective);
  trace.step_underflow = status.step_underflow;
  trace.loss_monotone = !status.monotone_violation;
  trace.steps_accepted = status.steps_accepted;
  trace.steps_rejected = status.steps_rejected;
  trace.final_grad_norm =
      (t_xx * loss_gradient(spec, y.head(nk)) + beta * (y.head(nk) - g0_train)).norm();
  if (nt > 0)
    trace.g_lin_test_final = Eigen::Map<const Eigen::MatrixXd>(y.tail(ntk_c).eval().data(), k, nt);
  trace.f_test_final = trace.g_lin_test_final;
  return trace;
}

struct HessianProbe {
  double value = 0.0;  // largest singular value estimate, maximized over outputs
  bool converged = false;
  int iterations = 0;
};

/// Matrix-free power iteration on the parameter Hessian of each output
/// coordinate; Hessian-vector products are central differences of the
/// output gradient with step 1e-4 ||theta|| / ||v||.
inline HessianProbe hessian_opnorm_probe(const NetSnapshot& net, const Eigen::VectorXd& x,
                                         int iters, std::uint64_t seed = 7771) {
  const long p = net.arch.param_count();
  const int k = net.arch.output_dim;
  const double thn = net.theta.norm();

  auto output_grad = [&](const Eigen::VectorXd& th, int c) {
    ForwardCache cache;
    forward_batch(net, th, x, &cache);
    Eigen::MatrixXd e = Eigen::MatrixXd::Zero(k, 1);
    e(c, 0) = 1.0;
    return backprop_params(net, th, cache, e);
  };

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  HessianProbe probe;
  probe.converged = true;
  for (int c = 0; c < k; ++c) {
    Eigen::VectorXd v(p);
    for (long i = 0; i < p; ++i) v(i) = gauss(rng);
    v.normalize();
    double sigma = 0.0;
    bool ok = false;
    int used = 0;
    for (int it = 0; it < iters; ++it) {
      const double eps = 1e-4 * thn / v.norm();
      const Eigen::VectorXd hv =
          (output_grad(net.theta + eps * v, c) - output_grad(net.theta - eps * v, c)) / (2.0 * eps);
      const double s = hv.norm();
      ++used;
      if (s == 0.0) {
        sigma = 0.0;
        ok = true;
        break;
      }
      if (it > 0 && std::abs(s - sigma) <= 1e-3 * s) {
        sigma = s;
        ok = true;
        break;
      }
      sigma = s;
      v = hv / s;
    }
    probe.value = std::max(probe.value, sigma);
    probe.iterations = std::max(probe.iterations, used);
    if (!ok) probe.converged = false;
  }
  return probe;
}

}  // namespace ntklab
