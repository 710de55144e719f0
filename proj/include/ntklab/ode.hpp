#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>

namespace ntklab {

/// Adaptive Runge-Kutta-Fehlberg 4(5) driver for gradient flows.
///
/// Steps are error controlled against atol + rtol * |y| componentwise and
/// propagated with the fifth-order solution.  An optional Lyapunov functional
/// adds a descent safeguard: candidate steps that raise it by more than
/// monotone_tol are rejected and retried with a smaller step, which keeps the
/// numerical trajectory as monotone as the exact flow.  Step-size underflow
/// is reported through the status, not thrown, since it usually just means
/// the problem is stiffer than the explicit pair likes.
struct OdeOptions {
  double rtol = 1e-6;
  double atol = 1e-9;
  double h_init = 0.0;          // 0: heuristic from the first slope
  double monotone_tol = 1e-8;
  long max_steps = 4000000;
  // Total monotone rejections allowed before the run is declared ascending.
  // A descending flow trips the safeguard only through discretization error,
  // a handful of times at most; an ascending flow trips it on every retry.
  long max_monotone_rejects = 1000;
  double stop_grad_norm = 0.0;  // 0: integrate to t_end
};

struct OdeStatus {
  bool step_underflow = false;
  bool monotone_violation = false;
  bool hit_max_steps = false;
  bool stopped_early = false;   // stop_grad_norm reached
  long steps_accepted = 0;
  long steps_rejected = 0;
  double t_final = 0.0;
};

namespace detail {

// Fehlberg tableau.
inline constexpr double kB21 = 1.0 / 4.0;
inline constexpr double kB31 = 3.0 / 32.0, kB32 = 9.0 / 32.0;
inline constexpr double kB41 = 1932.0 / 2197.0, kB42 = -7200.0 / 2197.0, kB43 = 7296.0 / 2197.0;
inline constexpr double kB51 = 439.0 / 216.0, kB52 = -8.0, kB53 = 3680.0 / 513.0,
                        kB54 = -845.0 / 4104.0;
inline constexpr double kB61 = -8.0 / 27.0, kB62 = 2.0, kB63 = -3544.0 / 2565.0,
                        kB64 = 1859.0 / 4104.0, kB65 = -11.0 / 40.0;
inline constexpr double k41 = 25.0 / 216.0, k43 = 1408.0 / 2565.0, k44 = 2197.0 / 4104.0,
                        k45 = -1.0 / 5.0;
inline constexpr double k51 = 16.0 / 135.0, k53 = 6656.0 / 12825.0, k54 = 28561.0 / 56430.0,
                        k55 = -9.0 / 50.0, k56 = 2.0 / 55.0;

}  // namespace detail

/// rhs(y, dy): writes the vector field.  record(t, y): called at t0, at every
/// multiple of record_every, and at the final time.  lyapunov: optional
/// descent functional; grad_norm: optional scalar used for early stopping.
template <class Rhs, class Recorder>
OdeStatus integrate_rkf45(Rhs&& rhs, Eigen::VectorXd& y, double t0, double t_end,
                          double record_every, const OdeOptions& opt, Recorder&& record,
                          const std::function<double(const Eigen::VectorXd&)>& lyapunov = nullptr,
                          const std::function<double(const Eigen::VectorXd&)>& grad_norm = nullptr) {
  if (!(t_end > t0)) throw std::invalid_argument("integrate_rkf45: empty time interval");
  if (!(record_every > 0)) record_every = t_end - t0;

  const Eigen::Index n = y.size();
  Eigen::VectorXd k1(n), k2(n), k3(n), k4(n), k5(n), k6(n), ytmp(n), y5(n), err(n);

  OdeStatus status;
  double t = t0;
  record(t, y);
  double next_record = t0 + record_every;
  double last_recorded = t0;

  rhs(y, k1);
  if (grad_norm && grad_norm(y) <= opt.stop_grad_norm && opt.stop_grad_norm > 0) {
    status.stopped_early = true;
    status.t_final = t;
    return status;
  }

  double h = opt.h_init;
  if (h <= 0) {
    const double slope = k1.norm();
    h = 0.01 * (1.0 + y.norm()) / (1.0 + slope);
    h = std::min(h, (t_end - t0) / 10.0);
  }
  const double h_floor = 1e-14 * std::max(1.0, std::abs(t_end));
  double lyap_prev = lyapunov ? lyapunov(y) : 0.0;
  long monotone_rejects = 0;
  bool fresh_k1 = true;

  const double t_eps = 1e-12 * std::max(1.0, std::abs(t_end));
  while (t < t_end - t_eps && !status.step_underflow) {
    if (status.steps_accepted + status.steps_rejected >= opt.max_steps) {
      status.hit_max_steps = true;
      break;
    }
    const double t_cap = std::min(t_end, next_record);
    h = std::min(h, t_cap - t);
    if (!fresh_k1) rhs(y, k1);

    ytmp = y + h * detail::kB21 * k1;
    rhs(ytmp, k2);
    ytmp = y + h * (detail::kB31 * k1 + detail::kB32 * k2);
    rhs(ytmp, k3);
    ytmp = y + h * (detail::kB41 * k1 + detail::kB42 * k2 + detail::kB43 * k3);
    rhs(ytmp, k4);
    ytmp = y + h * (detail::kB51 * k1 + detail::kB52 * k2 + detail::kB53 * k3 + detail::kB54 * k4);
    rhs(ytmp, k5);
    ytmp = y + h * (detail::kB61 * k1 + detail::kB62 * k2 + detail::kB63 * k3 + detail::kB64 * k4 +
                    detail::kB65 * k5);
    rhs(ytmp, k6);

    y5 = y + h * (detail::k51 * k1 + detail::k53 * k3 + detail::k54 * k4 + detail::k55 * k5 +
                  detail::k56 * k6);
    err = h * ((detail::k51 - detail::k41) * k1 + (detail::k53 - detail::k43) * k3 +
               (detail::k54 - detail::k44) * k4 + (detail::k55 - detail::k45) * k5 +
               detail::k56 * k6);

    double err_norm = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double scale = opt.atol + opt.rtol * std::max(std::abs(y(i)), std::abs(y5(i)));
      const double e = err(i) / scale;
      err_norm += e * e;
    }
    err_norm = std::sqrt(err_norm / static_cast<double>(n));

    bool accept = err_norm <= 1.0;
    bool monotone_reject = false;
    double lyap_new = lyap_prev;
    if (accept && lyapunov) {
      lyap_new = lyapunov(y5);
      if (lyap_new > lyap_prev + opt.monotone_tol) {
        accept = false;
        monotone_reject = true;
      }
    }

    if (accept) {
      y.swap(y5);
      t += h;
      lyap_prev = lyap_new;
      ++status.steps_accepted;
      fresh_k1 = false;
      while (t >= next_record - 1e-12 * std::max(1.0, std::abs(t)) && next_record <= t_end + 1e-12) {
        record(next_record, y);
        last_recorded = next_record;
        next_record += record_every;
      }
      if (grad_norm && opt.stop_grad_norm > 0 && grad_norm(y) <= opt.stop_grad_norm) {
        status.stopped_early = true;
        break;
      }
      const double grow = 0.9 * std::pow(std::max(err_norm, 1e-12), -0.2);
      h *= std::clamp(grow, 0.2, 5.0);
    } else {
      ++status.steps_rejected;
      fresh_k1 = true;
      if (monotone_reject) {
        h *= 0.5;
        if (++monotone_rejects >= opt.max_monotone_rejects) {
          status.step_underflow = true;
          status.monotone_violation = true;
        }
      } else {
        h *= std::clamp(0.9 * std::pow(err_norm, -0.2), 0.1, 0.5);
      }
      if (h < h_floor) {
        status.step_underflow = true;
        if (monotone_reject) status.monotone_violation = true;
      }
    }
  }

  if (t > last_recorded + 1e-12 * std::max(1.0, std::abs(t))) record(t, y);
  status.t_final = t;
  return status;
}

}  // namespace ntklab
