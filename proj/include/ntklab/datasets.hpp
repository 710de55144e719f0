#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "ntklab/io.hpp"

namespace ntklab {

struct Dataset {
  std::vector<Eigen::VectorXd> train_x;
  std::vector<int> train_labels;
  std::vector<Eigen::VectorXd> test_x;
  std::vector<int> test_labels;
  std::string source;
};

/// One-dimensional three-class toy problem: clusters at -2, 0, +2 labeled by
/// cluster, test inputs on a uniform grid.
inline Dataset three_class_toy(int n_train, int n_test, std::uint64_t seed) {
  if (n_train < 3 || n_test < 2) throw std::invalid_argument("three_class_toy: too few points");
  Dataset ds;
  ds.source = "toy_1d_three_class";
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> jitter(-0.5, 0.5);
  const double centers[3] = {-2.0, 0.0, 2.0};
  for (int i = 0; i < n_train; ++i) {
    const int c = i % 3;
    Eigen::VectorXd x(1);
    x(0) = centers[c] + jitter(rng);
    ds.train_x.push_back(x);
    ds.train_labels.push_back(c);
  }
  for (int i = 0; i < n_test; ++i) {
    Eigen::VectorXd x(1);
    x(0) = -3.5 + 7.0 * i / (n_test - 1);
    ds.test_x.push_back(x);
    const double v = x(0);
    ds.test_labels.push_back(v < -1.0 ? 0 : (v <= 1.0 ? 1 : 2));
  }
  return ds;
}

/// Two Gaussian blobs in dimension d, projected to the unit sphere, labels
/// 0/1.  Stands in for image data when no IDX files are configured.
inline Dataset two_blob_synthetic(int d, int n_train, int n_test, std::uint64_t seed) {
  Dataset ds;
  ds.source = "synthetic_two_blob_d" + std::to_string(d);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Eigen::VectorXd mu0(d), mu1(d);
  for (int j = 0; j < d; ++j) mu0(j) = gauss(rng);
  for (int j = 0; j < d; ++j) mu1(j) = gauss(rng);
  mu0.normalize();
  mu1.normalize();
  auto draw = [&](int label) {
    Eigen::VectorXd x(d);
    const Eigen::VectorXd& mu = label == 0 ? mu0 : mu1;
    for (int j = 0; j < d; ++j) x(j) = 2.0 * mu(j) + 0.6 * gauss(rng);
    x.normalize();
    return x;
  };
  for (int i = 0; i < n_train; ++i) {
    const int c = i % 2;
    ds.train_x.push_back(draw(c));
    ds.train_labels.push_back(c);
  }
  for (int i = 0; i < n_test; ++i) {
    const int c = i % 2;
    ds.test_x.push_back(draw(c));
    ds.test_labels.push_back(c);
  }
  return ds;
}

/// IDX images with odd/even digit labels, subsampled deterministically; unit
/// norm columns so the kernels see comparable scales.
inline Dataset idx_two_class(const std::filesystem::path& images,
                             const std::filesystem::path& labels, int n_train, int n_test) {
  const Eigen::MatrixXd x = load_idx_images(images);
  const std::vector<int> y = load_idx_labels(labels);
  if (static_cast<Eigen::Index>(y.size()) != x.cols())
    throw std::runtime_error("idx_two_class: image and label counts differ");
  if (x.cols() < n_train + n_test)
    throw std::runtime_error("idx_two_class: not enough records");
  Dataset ds;
  ds.source = "idx:" + images.string();
  for (int i = 0; i < n_train + n_test; ++i) {
    Eigen::VectorXd col = x.col(i);
    const double nrm = col.norm();
    if (nrm > 0) col /= nrm;
    const int label = y[static_cast<size_t>(i)] % 2;
    if (i < n_train) {
      ds.train_x.push_back(col);
      ds.train_labels.push_back(label);
    } else {
      ds.test_x.push_back(col);
      ds.test_labels.push_back(label);
    }
  }
  return ds;
}

/// Two-class data from IDX files when both paths are set and readable,
/// otherwise the synthetic stand-in; the source string records which.
inline Dataset two_class_data(const std::string& images, const std::string& labels, int d,
                              int n_train, int n_test, std::uint64_t seed) {
  namespace fs = std::filesystem;
  if (!images.empty() && !labels.empty() && fs::exists(images) && fs::exists(labels))
    return idx_two_class(images, labels, n_train, n_test);
  return two_blob_synthetic(d, n_train, n_test, seed);
}

}  // namespace ntklab
