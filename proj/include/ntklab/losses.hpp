#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace ntklab {

enum class LossKind { Mse, CrossEntropy, CrossEntropyRef, BrierRef };

inline std::string loss_kind_name(LossKind k) {
  switch (k) {
    case LossKind::Mse: return "mse";
    case LossKind::CrossEntropy: return "ce";
    case LossKind::CrossEntropyRef: return "ce_ref";
    case LossKind::BrierRef: return "brier_ref";
  }
  return "?";
}

inline LossKind loss_kind_from_name(const std::string& s) {
  if (s == "mse") return LossKind::Mse;
  if (s == "ce") return LossKind::CrossEntropy;
  if (s == "ce_ref") return LossKind::CrossEntropyRef;
  if (s == "brier_ref") return LossKind::BrierRef;
  throw std::invalid_argument("unknown loss kind: " + s);
}

inline double log_sum_exp(const Eigen::VectorXd& z) {
  const double m = z.maxCoeff();
  return m + std::log((z.array() - m).exp().sum());
}

/// log(1 + sum_k exp(z_k)), the reference-class partition function.
inline double log_sum_exp_ref(const Eigen::VectorXd& z) {
  const double m = std::max(0.0, z.maxCoeff());
  return m + std::log(std::exp(-m) + (z.array() - m).exp().sum());
}

inline Eigen::VectorXd stable_softmax(const Eigen::VectorXd& z) {
  const double m = z.maxCoeff();
  Eigen::VectorXd e = (z.array() - m).exp();
  return e / e.sum();
}

struct SoftmaxRef {
  Eigen::VectorXd probs;  // classes 1..K
  double ref;             // reference class probability
};

/// Softmax over (0, z_1, ..., z_K): probs_k = e^{z_k} / (1 + sum e^{z_j}).
inline SoftmaxRef softmax_ref(const Eigen::VectorXd& z) {
  const double m = std::max(0.0, z.maxCoeff());
  Eigen::VectorXd e = (z.array() - m).exp();
  const double denom = std::exp(-m) + e.sum();
  return {e / denom, std::exp(-m) / denom};
}

/// Per-point probability targets, laid out one row per training point.
/// Rows live on the simplex; reference-class kinds carry the extra entry
/// p_{i0} separately so probs keeps K columns in every mode.
struct TargetSet {
  int n = 0;
  int k = 0;
  Eigen::MatrixXd probs;     // n x k
  Eigen::VectorXd ref_prob;  // n (reference entries, only when has_ref)
  bool has_ref = false;

  void validate() const {
    if (n < 1 || k < 1) throw std::invalid_argument("TargetSet: empty");
    if (probs.rows() != n || probs.cols() != k)
      throw std::invalid_argument("TargetSet: probs shape mismatch");
    if (has_ref && ref_prob.size() != n)
      throw std::invalid_argument("TargetSet: ref_prob size mismatch");
    for (int i = 0; i < n; ++i) {
      double s = probs.row(i).sum() + (has_ref ? ref_prob(i) : 0.0);
      if (std::abs(s - 1.0) > 1e-12)
        throw std::invalid_argument("TargetSet: row " + std::to_string(i) + " does not sum to 1");
      for (int j = 0; j < k; ++j)
        if (probs(i, j) < 0.0 || probs(i, j) > 1.0)
          throw std::invalid_argument("TargetSet: entry out of [0,1]");
      if (has_ref && (ref_prob(i) < 0.0 || ref_prob(i) > 1.0))
        throw std::invalid_argument("TargetSet: reference entry out of [0,1]");
    }
  }

  bool full_support() const {
    if ((probs.array() <= 0.0).any()) return false;
    if (has_ref && (ref_prob.array() <= 0.0).any()) return false;
    return true;
  }

  /// One-hot rows over K classes (labels in 0..K-1).
  static TargetSet one_hot(const std::vector<int>& labels, int k) {
    TargetSet t;
    t.n = static_cast<int>(labels.size());
    t.k = k;
    t.probs = Eigen::MatrixXd::Zero(t.n, k);
    for (int i = 0; i < t.n; ++i) t.probs(i, labels[i]) = 1.0;
    t.validate();
    return t;
  }

  /// Uniform label smoothing: (1-eps) one_hot + eps/K.
  static TargetSet smoothed(const std::vector<int>& labels, int k, double eps) {
    TargetSet t = one_hot(labels, k);
    t.probs = (1.0 - eps) * t.probs.array() + eps / k;
    t.validate();
    return t;
  }

  /// Reference-class targets over K+1 classes; label 0 means the reference.
  static TargetSet one_hot_ref(const std::vector<int>& labels, int k) {
    TargetSet t;
    t.n = static_cast<int>(labels.size());
    t.k = k;
    t.has_ref = true;
    t.probs = Eigen::MatrixXd::Zero(t.n, k);
    t.ref_prob = Eigen::VectorXd::Zero(t.n);
    for (int i = 0; i < t.n; ++i) {
      if (labels[i] == 0)
        t.ref_prob(i) = 1.0;
      else
        t.probs(i, labels[i] - 1) = 1.0;
    }
    t.validate();
    return t;
  }

  static TargetSet smoothed_ref(const std::vector<int>& labels, int k, double eps) {
    TargetSet t = one_hot_ref(labels, k);
    t.probs = (1.0 - eps) * t.probs.array() + eps / (k + 1);
    t.ref_prob = (1.0 - eps) * t.ref_prob.array() + eps / (k + 1);
    t.validate();
    return t;
  }

  /// Rows as given; with_ref treats column 0 as the reference entry.
  static TargetSet from_rows(const Eigen::MatrixXd& rows, bool with_ref) {
    TargetSet t;
    t.n = static_cast<int>(rows.rows());
    t.has_ref = with_ref;
    if (with_ref) {
      if (rows.cols() < 2) throw std::invalid_argument("TargetSet: need >= 2 columns with a reference");
      t.k = static_cast<int>(rows.cols()) - 1;
      t.ref_prob = rows.col(0);
      t.probs = rows.rightCols(t.k);
    } else {
      t.k = static_cast<int>(rows.cols());
      t.probs = rows;
    }
    t.validate();
    return t;
  }
};

inline double entropy_term(double p) { return p > 0.0 ? -p * std::log(p) : 0.0; }

/// Loss selector bound to a target set.  inf_value is the exact infimum of
/// the function-space loss: 0 for squared error and the Brier variant, the
/// summed target entropy for the cross entropies (0, unattained, when any
/// target entry vanishes).
struct LossSpec {
  LossKind kind = LossKind::Mse;
  TargetSet targets;
  double inf_value = 0.0;

  int coords() const { return targets.n * targets.k; }
};

inline LossSpec make_loss(LossKind kind, const TargetSet& targets) {
  targets.validate();
  const bool needs_ref = (kind == LossKind::CrossEntropyRef || kind == LossKind::BrierRef);
  if (needs_ref != targets.has_ref)
    throw std::invalid_argument("make_loss: target reference entries do not match the loss kind");
  if (kind == LossKind::BrierRef && targets.k != 1)
    throw std::invalid_argument("make_loss: the Brier variant is defined for one logit only");
  LossSpec spec;
  spec.kind = kind;
  spec.targets = targets;
  switch (kind) {
    case LossKind::Mse:
    case LossKind::BrierRef:
      spec.inf_value = 0.0;
      break;
    case LossKind::CrossEntropy:
    case LossKind::CrossEntropyRef: {
      double h = 0.0;
      for (int i = 0; i < targets.n; ++i) {
        for (int j = 0; j < targets.k; ++j) h += entropy_term(targets.probs(i, j));
        if (targets.has_ref) h += entropy_term(targets.ref_prob(i));
      }
      spec.inf_value = h;
      break;
    }
  }
  return spec;
}

namespace detail {
inline void check_coords(const LossSpec& spec, const Eigen::VectorXd& z) {
  if (z.size() != spec.coords())
    throw std::invalid_argument("loss: z has wrong length");
}
inline double sigmoid(double z) {
  return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}
}  // namespace detail

/// Function-space loss C(z) with z in point-major, class-minor layout.
inline double loss_value(const LossSpec& spec, const Eigen::VectorXd& z) {
  detail::check_coords(spec, z);
  const int n = spec.targets.n, k = spec.targets.k;
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const Eigen::VectorXd zi = z.segment(i * k, k);
    switch (spec.kind) {
      case LossKind::Mse:
        total += 0.5 * (zi - spec.targets.probs.row(i).transpose()).squaredNorm();
        break;
      case LossKind::CrossEntropy:
        total += -spec.targets.probs.row(i).dot(zi) + log_sum_exp(zi);
        break;
      case LossKind::CrossEntropyRef:
        total += -spec.targets.probs.row(i).dot(zi) + log_sum_exp_ref(zi);
        break;
      case LossKind::BrierRef: {
        const double s = detail::sigmoid(zi(0));
        const double r = s - spec.targets.probs(i, 0);
        total += 0.5 * r * r;
        break;
      }
    }
  }
  return total;
}

inline Eigen::VectorXd loss_gradient(const LossSpec& spec, const Eigen::VectorXd& z) {
  detail::check_coords(spec, z);
  const int n = spec.targets.n, k = spec.targets.k;
  Eigen::VectorXd g(n * k);
  for (int i = 0; i < n; ++i) {
    const Eigen::VectorXd zi = z.segment(i * k, k);
    switch (spec.kind) {
      case LossKind::Mse:
        g.segment(i * k, k) = zi - spec.targets.probs.row(i).transpose();
        break;
      case LossKind::CrossEntropy:
        g.segment(i * k, k) = stable_softmax(zi) - spec.targets.probs.row(i).transpose();
        break;
      case LossKind::CrossEntropyRef:
        g.segment(i * k, k) = softmax_ref(zi).probs - spec.targets.probs.row(i).transpose();
        break;
      case LossKind::BrierRef: {
        const double s = detail::sigmoid(zi(0));
        g(i * k) = (s - spec.targets.probs(i, 0)) * s * (1.0 - s);
        break;
      }
    }
  }
  return g;
}

/// Per-point KxK Hessian blocks of C at z.
inline std::vector<Eigen::MatrixXd> hessian_blocks(const LossSpec& spec,
                                                   const Eigen::VectorXd& z) {
  detail::check_coords(spec, z);
  const int n = spec.targets.n, k = spec.targets.k;
  std::vector<Eigen::MatrixXd> blocks;
  blocks.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const Eigen::VectorXd zi = z.segment(i * k, k);
    switch (spec.kind) {
      case LossKind::Mse:
        blocks.push_back(Eigen::MatrixXd::Identity(k, k));
        break;
      case LossKind::CrossEntropy: {
        const Eigen::VectorXd s = stable_softmax(zi);
        blocks.push_back(Eigen::MatrixXd(s.asDiagonal()) - s * s.transpose());
        break;
      }
      case LossKind::CrossEntropyRef: {
        const Eigen::VectorXd s = softmax_ref(zi).probs;
        blocks.push_back(Eigen::MatrixXd(s.asDiagonal()) - s * s.transpose());
        break;
      }
      case LossKind::BrierRef: {
        const double s = detail::sigmoid(zi(0));
        const double sp = s * (1.0 - s);           // sigma'
        const double spp = sp * (1.0 - 2.0 * s);   // sigma''
        Eigen::MatrixXd b(1, 1);
        b(0, 0) = spp * (s - spec.targets.probs(i, 0)) + sp * sp;
        blocks.push_back(b);
      }
    }
  }
  return blocks;
}

/// Dense block-diagonal (NK)x(NK) Hessian.
inline Eigen::MatrixXd loss_hessian(const LossSpec& spec, const Eigen::VectorXd& z) {
  const int n = spec.targets.n, k = spec.targets.k;
  const auto blocks = hessian_blocks(spec, z);
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(n * k, n * k);
  for (int i = 0; i < n; ++i) h.block(i * k, i * k, k, k) = blocks[static_cast<size_t>(i)];
  return h;
}

/// Block centering: subtracts the per-point mean over classes, the projector
/// P = I - (1/K) 11^T applied to every point block.
inline Eigen::VectorXd center_project(const Eigen::VectorXd& z, int k) {
  if (k < 1 || z.size() % k != 0) throw std::invalid_argument("center_project: bad layout");
  Eigen::VectorXd out(z.size());
  const int n = static_cast<int>(z.size()) / k;
  for (int i = 0; i < n; ++i) {
    const auto zi = z.segment(i * k, k);
    out.segment(i * k, k) = zi.array() - zi.mean();
  }
  return out;
}

/// Empirical constants of C on the sublevel set {C <= K0}, estimated by
/// rejection sampling from centered Gaussians of spread {0.5, 1, 2, 4}.
///   k1   = max ||grad C||
///   k2   = max ||grad C||^2 / (2 (C - inf C))   (quadratic upper shape)
///   mu_c = min of the same ratio                (Polyak-Lojasiewicz lower shape)
/// Samples with C - inf C < 1e-12 are excluded from the ratios.  For full
/// support cross entropy the analytic floor mu_c >= 0.5 * min_ik e^{-K0/p_ik}
/// is filled in as well.
struct SublevelProbe {
  double k0 = 0.0;
  double k1 = 0.0;
  double k2 = 0.0;
  double mu_c = 0.0;
  double analytic_mu = 0.0;
  bool has_analytic_mu = false;
  int accepted = 0;
  int proposals = 0;
  int ratio_samples = 0;
};

inline SublevelProbe audit_assumptions(const LossSpec& spec, double k0, int n_samples,
                                       std::uint64_t seed) {
  if (n_samples < 1) throw std::invalid_argument("audit_assumptions: need samples");
  if (!(k0 > spec.inf_value))
    throw std::invalid_argument("audit_assumptions: K0 must exceed the loss infimum");
  const int dim = spec.coords();
  const double spreads[4] = {0.5, 1.0, 2.0, 4.0};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  SublevelProbe probe;
  probe.k0 = k0;
  probe.k2 = 0.0;
  probe.mu_c = std::numeric_limits<double>::infinity();
  const int max_proposals = 1000 * n_samples;
  Eigen::VectorXd z(dim);
  while (probe.accepted < n_samples && probe.proposals < max_proposals) {
    const double s = spreads[probe.proposals % 4];
    for (int j = 0; j < dim; ++j) z(j) = s * gauss(rng);
    ++probe.proposals;
    const double c = loss_value(spec, z);
    if (c > k0) continue;
    ++probe.accepted;
    const double gn = loss_gradient(spec, z).norm();
    probe.k1 = std::max(probe.k1, gn);
    const double excess = c - spec.inf_value;
    if (excess >= 1e-12) {
      const double ratio = gn * gn / (2.0 * excess);
      probe.k2 = std::max(probe.k2, ratio);
      probe.mu_c = std::min(probe.mu_c, ratio);
      ++probe.ratio_samples;
    }
  }
  if (probe.accepted == 0)
    throw std::runtime_error("audit_assumptions: no proposal landed in the sublevel set");
  if (probe.ratio_samples == 0) probe.mu_c = 0.0;
  if (spec.kind == LossKind::CrossEntropy && spec.targets.full_support()) {
    double pmin = spec.targets.probs.minCoeff();
    probe.analytic_mu = 0.5 * std::exp(-k0 / pmin);
    probe.has_analytic_mu = true;
  }
  return probe;
}

}  // namespace ntklab
