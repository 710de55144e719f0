#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace ntklab {

enum class Activation { Erf };

/// Architecture of a fully connected net in NTK parametrization.
///
/// depth hidden layers, each followed by the activation, then a linear
/// readout; layer l maps through sigma_w[l] * W x / sqrt(fan_in) + sigma_b[l] * b
/// with unit-Gaussian W, b at initialization.  The analytic kernels depend
/// only on (depth, input_dim, sigma_w, sigma_b, activation); widths matter
/// for finite nets only and may be left empty otherwise.
struct ArchSpec {
  int depth = 1;                  // number of hidden layers
  std::vector<int> widths;        // hidden widths n_1..n_depth (finite nets)
  int input_dim = 1;
  int output_dim = 1;
  std::vector<double> sigma_w;    // depth+1 scales, one per affine map
  std::vector<double> sigma_b;
  Activation activation = Activation::Erf;

  static ArchSpec mlp(int depth, int width, int input_dim, int output_dim,
                      double sw = 1.5, double sb = 0.1) {
    ArchSpec a;
    a.depth = depth;
    a.widths.assign(static_cast<size_t>(depth), width);
    a.input_dim = input_dim;
    a.output_dim = output_dim;
    a.sigma_w.assign(static_cast<size_t>(depth) + 1, sw);
    a.sigma_b.assign(static_cast<size_t>(depth) + 1, sb);
    return a;
  }

  /// Width-free spec for the analytic kernels; widths stay empty, so the
  /// finite-net helpers refuse it until with_width fills them in.
  static ArchSpec analytic(int depth, int input_dim, int output_dim, double sw = 1.5,
                           double sb = 0.1) {
    ArchSpec a;
    a.depth = depth;
    a.input_dim = input_dim;
    a.output_dim = output_dim;
    a.sigma_w.assign(static_cast<size_t>(depth) + 1, sw);
    a.sigma_b.assign(static_cast<size_t>(depth) + 1, sb);
    return a;
  }

  /// Same spec with every hidden width replaced by n.
  ArchSpec with_width(int n) const {
    ArchSpec a = *this;
    a.widths.assign(static_cast<size_t>(depth), n);
    return a;
  }

  bool has_widths() const { return widths.size() == static_cast<size_t>(depth); }

  /// Fan-in of affine map l (0-based; map depth is the readout).
  int fan_in(int l) const {
    if (l == 0) return input_dim;
    return widths.at(static_cast<size_t>(l) - 1);
  }
  int fan_out(int l) const {
    if (l == depth) return output_dim;
    return widths.at(static_cast<size_t>(l));
  }

  /// Total parameter count of the finite net.
  long param_count() const {
    long p = 0;
    for (int l = 0; l <= depth; ++l)
      p += static_cast<long>(fan_out(l)) * fan_in(l) + fan_out(l);
    return p;
  }

  void validate() const {
    if (depth < 1) throw std::invalid_argument("ArchSpec: depth must be >= 1");
    if (input_dim < 1 || output_dim < 1)
      throw std::invalid_argument("ArchSpec: dimensions must be >= 1");
    if (sigma_w.size() != static_cast<size_t>(depth) + 1 ||
        sigma_b.size() != static_cast<size_t>(depth) + 1)
      throw std::invalid_argument("ArchSpec: need depth+1 sigma_w and sigma_b entries");
    for (double s : sigma_w)
      if (!(s > 0)) throw std::invalid_argument("ArchSpec: sigma_w entries must be positive");
    for (double s : sigma_b)
      if (!(s >= 0)) throw std::invalid_argument("ArchSpec: sigma_b entries must be nonnegative");
    if (!widths.empty()) {
      if (widths.size() != static_cast<size_t>(depth))
        throw std::invalid_argument("ArchSpec: widths must be empty or have depth entries");
      for (int n : widths)
        if (n < 1) throw std::invalid_argument("ArchSpec: widths must be >= 1");
    }
  }

  /// FNV-1a fingerprint of all fields, used when serializing problems.
  std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const void* data, size_t n) {
      const unsigned char* b = static_cast<const unsigned char*>(data);
      for (size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 1099511628211ULL;
      }
    };
    auto mix_int = [&](long long v) { mix(&v, sizeof v); };
    auto mix_dbl = [&](double v) { mix(&v, sizeof v); };
    mix_int(depth);
    mix_int(input_dim);
    mix_int(output_dim);
    mix_int(static_cast<long long>(activation));
    for (int n : widths) mix_int(n);
    for (double s : sigma_w) mix_dbl(s);
    for (double s : sigma_b) mix_dbl(s);
    return h;
  }
};

}  // namespace ntklab
