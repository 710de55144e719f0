#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "ntklab/arch.hpp"

namespace ntklab {

inline constexpr double kPi = 3.141592653589793238462643383279502884;

// Gaussian moments of the erf nonlinearity.  For (u,v) ~ N(0, [[a,c],[c,b]]):
//   E[erf(u) erf(v)]   = (2/pi) asin( 2c / sqrt((1+2a)(1+2b)) )
//   E[erf'(u) erf'(v)] = (4/pi) / sqrt((1+2a)(1+2b) - 4c^2)
// Cauchy-Schwarz keeps both arguments in range for any valid covariance;
// the clamp only absorbs roundoff at c^2 == a*b.
inline double erf_pair_moment(double a, double c, double b) {
  const double r = 2.0 * c / std::sqrt((1.0 + 2.0 * a) * (1.0 + 2.0 * b));
  return (2.0 / kPi) * std::asin(std::clamp(r, -1.0, 1.0));
}

inline double erf_deriv_pair_moment(double a, double c, double b) {
  const double det = (1.0 + 2.0 * a) * (1.0 + 2.0 * b) - 4.0 * c * c;
  return (4.0 / kPi) / std::sqrt(std::max(det, 0.0));
}

namespace detail {

struct PairKernels {
  double nngp = 0;
  double ntk = 0;
};

// Runs the layer recursion for one input pair.  Tracks the three covariance
// entries (xx, xx', x'x') and the tangent value at (x, x').
inline PairKernels kernel_pair(const ArchSpec& arch, const Eigen::VectorXd& x,
                               const Eigen::VectorXd& xp) {
  if (x.size() != arch.input_dim || xp.size() != arch.input_dim)
    throw std::invalid_argument("kernel_pair: input dimension mismatch");
  if (arch.activation != Activation::Erf)
    throw std::invalid_argument("kernel_pair: unsupported activation");
  const double d = static_cast<double>(arch.input_dim);
  double sw2 = arch.sigma_w[0] * arch.sigma_w[0];
  double sb2 = arch.sigma_b[0] * arch.sigma_b[0];
  double s11 = sw2 * x.dot(x) / d + sb2;
  double s12 = sw2 * x.dot(xp) / d + sb2;
  double s22 = sw2 * xp.dot(xp) / d + sb2;
  double t12 = s12;
  for (int l = 1; l <= arch.depth; ++l) {
    sw2 = arch.sigma_w[l] * arch.sigma_w[l];
    sb2 = arch.sigma_b[l] * arch.sigma_b[l];
    const double dphi = erf_deriv_pair_moment(s11, s12, s22);
    const double n11 = sw2 * erf_pair_moment(s11, s11, s11) + sb2;
    const double n12 = sw2 * erf_pair_moment(s11, s12, s22) + sb2;
    const double n22 = sw2 * erf_pair_moment(s22, s22, s22) + sb2;
    t12 = n12 + sw2 * dphi * t12;
    s11 = n11;
    s12 = n12;
    s22 = n22;
  }
  return {s12, t12};
}

}  // namespace detail

/// Infinite-width output covariance (NNGP) of the erf net at (x, x').
inline double nngp_kernel(const ArchSpec& arch, const Eigen::VectorXd& x,
                          const Eigen::VectorXd& xp) {
  arch.validate();
  return detail::kernel_pair(arch, x, xp).nngp;
}

/// Analytic neural tangent kernel at (x, x').  Layer recursion:
/// Theta^1 = Sigma^1, Theta^{l+1} = Sigma^{l+1} + sigma_w^2 E[phi'phi'] Theta^l.
inline double ntk_kernel(const ArchSpec& arch, const Eigen::VectorXd& x,
                         const Eigen::VectorXd& xp) {
  arch.validate();
  return detail::kernel_pair(arch, x, xp).ntk;
}

/// Both kernels on a point set.  Matrices are scalar valued; the full
/// (N*K)x(N*K) operator is the Kronecker product with the identity on the
/// class index and is expanded on demand (kron_identity below).
struct KernelPack {
  std::vector<Eigen::VectorXd> points;
  Eigen::MatrixXd nngp;
  Eigen::MatrixXd ntk;
  int output_dim = 1;
};

/// Deterministic pairwise assembly: every entry computed independently,
/// upper triangle mirrored, so results are bit-identical for a given input
/// order regardless of scheduling.
inline KernelPack assemble_pack(const ArchSpec& arch,
                                const std::vector<Eigen::VectorXd>& points) {
  arch.validate();
  if (points.empty()) throw std::invalid_argument("assemble_pack: empty point set");
  const int n = static_cast<int>(points.size());
  KernelPack pack;
  pack.points = points;
  pack.output_dim = arch.output_dim;
  pack.nngp.resize(n, n);
  pack.ntk.resize(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = i; j < n; ++j) {
      const auto kv = detail::kernel_pair(arch, points[i], points[j]);
      pack.nngp(i, j) = kv.nngp;
      pack.nngp(j, i) = kv.nngp;
      pack.ntk(i, j) = kv.ntk;
      pack.ntk(j, i) = kv.ntk;
    }
  }
  return pack;
}

/// Rectangular kernel blocks between a test set and a train set, plus the
/// square test-test blocks.  Row index runs over test points.
struct CrossKernels {
  Eigen::MatrixXd ntk_test_train;
  Eigen::MatrixXd ntk_test_test;
  Eigen::MatrixXd nngp_test_train;
  Eigen::MatrixXd nngp_test_test;
};

inline CrossKernels assemble_cross(const ArchSpec& arch,
                                   const std::vector<Eigen::VectorXd>& train_points,
                                   const std::vector<Eigen::VectorXd>& test_points) {
  arch.validate();
  const int m = static_cast<int>(test_points.size());
  const int n = static_cast<int>(train_points.size());
  CrossKernels ck;
  ck.ntk_test_train.resize(m, n);
  ck.nngp_test_train.resize(m, n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      const auto kv = detail::kernel_pair(arch, test_points[i], train_points[j]);
      ck.nngp_test_train(i, j) = kv.nngp;
      ck.ntk_test_train(i, j) = kv.ntk;
    }
  ck.ntk_test_test.resize(m, m);
  ck.nngp_test_test.resize(m, m);
  for (int i = 0; i < m; ++i)
    for (int j = i; j < m; ++j) {
      const auto kv = detail::kernel_pair(arch, test_points[i], test_points[j]);
      ck.nngp_test_test(i, j) = kv.nngp;
      ck.nngp_test_test(j, i) = kv.nngp;
      ck.ntk_test_test(i, j) = kv.ntk;
      ck.ntk_test_test(j, i) = kv.ntk;
    }
  return ck;
}

/// kron(M, I_K) for the point-major, class-minor coordinate layout
/// z[(i*K)+k]: entry ((i,k),(j,k')) = M(i,j) * [k == k'].
inline Eigen::MatrixXd kron_identity(const Eigen::MatrixXd& m, int k) {
  if (k < 1) throw std::invalid_argument("kron_identity: class count must be >= 1");
  Eigen::MatrixXd big = Eigen::MatrixXd::Zero(m.rows() * k, m.cols() * k);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (int c = 0; c < k; ++c) big(i * k + c, j * k + c) = m(i, j);
  return big;
}

/// Relative Frobenius error of an empirical tangent kernel against the
/// analytic one stored in the pack.
inline double empirical_ntk_error(const KernelPack& pack, const Eigen::MatrixXd& emp) {
  if (emp.rows() != pack.ntk.rows() || emp.cols() != pack.ntk.cols())
    throw std::invalid_argument("empirical_ntk_error: shape mismatch");
  const double denom = pack.ntk.norm();
  if (denom == 0.0) throw std::invalid_argument("empirical_ntk_error: analytic kernel has zero norm");
  return (emp - pack.ntk).norm() / denom;
}

/// Diagonal jitter used before factorizing kernel matrices: 1e-8 * trace/N.
inline double kernel_jitter(const Eigen::MatrixXd& m, double scale = 1e-8) {
  return scale * m.trace() / static_cast<double>(m.rows());
}

}  // namespace ntklab
