#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ntklab/flow.hpp"
#include "ntklab/losses.hpp"
#include "ntklab/mlp.hpp"

namespace ntklab {

using json = nlohmann::json;

/// Doubles printed with 17 significant digits so identical runs produce
/// byte-identical files.
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header)
      : out_(path), columns_(header.size()) {
    if (!out_) throw std::runtime_error("CsvWriter: cannot open " + path.string());
    for (size_t i = 0; i < header.size(); ++i) out_ << (i ? "," : "") << header[i];
    out_ << "\n";
  }

  void row(const std::vector<double>& values) {
    if (values.size() != columns_) throw std::invalid_argument("CsvWriter: column count mismatch");
    for (size_t i = 0; i < values.size(); ++i) out_ << (i ? "," : "") << format_double(values[i]);
    out_ << "\n";
  }

  void raw_row(const std::vector<std::string>& values) {
    if (values.size() != columns_) throw std::invalid_argument("CsvWriter: column count mismatch");
    for (size_t i = 0; i < values.size(); ++i) out_ << (i ? "," : "") << values[i];
    out_ << "\n";
  }

 private:
  std::ofstream out_;
  size_t columns_;
};

inline std::vector<std::vector<double>> read_csv_numeric(const std::filesystem::path& path,
                                                         bool skip_header = true) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_csv_numeric: cannot open " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (first && skip_header) {
      first = false;
      continue;
    }
    first = false;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    rows.push_back(std::move(row));
  }
  return rows;
}

/// Targets from CSV, one row per point: K probability columns, or K+1 with
/// the reference-class entry first.
inline TargetSet load_targets_csv(const std::filesystem::path& path, bool with_ref) {
  const auto rows = read_csv_numeric(path);
  if (rows.empty()) throw std::runtime_error("load_targets_csv: no rows in " + path.string());
  const size_t cols = rows[0].size();
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols));
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != cols) throw std::runtime_error("load_targets_csv: ragged rows");
    for (size_t j = 0; j < cols; ++j)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }
  return TargetSet::from_rows(m, with_ref);
}

/// Trace CSV with the columns (t, loss, theta_dist, ntk_probe_1..3, lin_gap).
/// Missing probes or gaps are written as 0.
inline void write_trace_csv(const std::filesystem::path& path, const TrainTrace& trace) {
  CsvWriter csv(path, {"t", "loss", "theta_dist", "ntk_probe_1", "ntk_probe_2", "ntk_probe_3",
                       "lin_gap"});
  const int probes = static_cast<int>(trace.ntk_probes.cols());
  for (size_t r = 0; r < trace.times.size(); ++r) {
    std::vector<double> row{trace.times[r], trace.loss[r], trace.theta_dist[r]};
    for (int q = 0; q < 3; ++q)
      row.push_back(q < probes && static_cast<Eigen::Index>(r) < trace.ntk_probes.rows()
                        ? trace.ntk_probes(static_cast<Eigen::Index>(r), q)
                        : 0.0);
    row.push_back(r < trace.lin_gap.size() ? trace.lin_gap[r] : 0.0);
    csv.row(row);
  }
}

// ---- IDX image/label container ----

namespace detail {
inline std::uint32_t read_be32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw std::runtime_error("idx: truncated header");
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
         std::uint32_t(b[3]);
}
}  // namespace detail

/// Images from an IDX file (magic 0x00000803), columns scaled to [0, 1].
inline Eigen::MatrixXd load_idx_images(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_idx_images: cannot open " + path.string());
  if (detail::read_be32(in) != 0x00000803u)
    throw std::runtime_error("load_idx_images: bad magic in " + path.string());
  const std::uint32_t n = detail::read_be32(in);
  const std::uint32_t rows = detail::read_be32(in);
  const std::uint32_t cols = detail::read_be32(in);
  const size_t d = size_t(rows) * cols;
  std::vector<unsigned char> buf(d);
  Eigen::MatrixXd x(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(n));
  for (std::uint32_t i = 0; i < n; ++i) {
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(d));
    if (!in) throw std::runtime_error("load_idx_images: truncated data");
    for (size_t j = 0; j < d; ++j)
      x(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = buf[j] / 255.0;
  }
  return x;
}

/// Labels from an IDX file (magic 0x00000801).
inline std::vector<int> load_idx_labels(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_idx_labels: cannot open " + path.string());
  if (detail::read_be32(in) != 0x00000801u)
    throw std::runtime_error("load_idx_labels: bad magic in " + path.string());
  const std::uint32_t n = detail::read_be32(in);
  std::vector<unsigned char> buf(n);
  in.read(reinterpret_cast<char*>(buf.data()), n);
  if (!in) throw std::runtime_error("load_idx_labels: truncated data");
  return {buf.begin(), buf.end()};
}

// ---- JSON glue ----

inline json vector_to_json(const Eigen::VectorXd& v) {
  json arr = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v(i));
  return arr;
}

inline Eigen::VectorXd vector_from_json(const json& arr) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(arr.size()));
  for (size_t i = 0; i < arr.size(); ++i) v(static_cast<Eigen::Index>(i)) = arr[i].get<double>();
  return v;
}

inline json matrix_to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) rows.push_back(vector_to_json(m.row(i).transpose()));
  return rows;
}

inline Eigen::MatrixXd matrix_from_json(const json& rows) {
  if (rows.empty()) return {};
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()),
                    static_cast<Eigen::Index>(rows[0].size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      m(i, j) = rows[static_cast<size_t>(i)][static_cast<size_t>(j)].get<double>();
  return m;
}

inline json targets_to_json(const TargetSet& t) {
  json j;
  j["n"] = t.n;
  j["k"] = t.k;
  j["probs"] = matrix_to_json(t.probs);
  j["has_ref"] = t.has_ref;
  if (t.has_ref) j["ref_prob"] = vector_to_json(t.ref_prob);
  return j;
}

inline TargetSet targets_from_json(const json& j) {
  TargetSet t;
  t.n = j.at("n").get<int>();
  t.k = j.at("k").get<int>();
  t.probs = matrix_from_json(j.at("probs"));
  t.has_ref = j.at("has_ref").get<bool>();
  if (t.has_ref) t.ref_prob = vector_from_json(j.at("ref_prob"));
  t.validate();
  return t;
}

/// Problem description: points, targets, loss kind, rates and the arch
/// fingerprint.  Kernel matrices are rebuilt from the arch on load rather
/// than shipped around.
inline json flow_problem_to_json(const FlowProblem& pb) {
  json j;
  j["loss_kind"] = loss_kind_name(pb.spec.kind);
  j["targets"] = targets_to_json(pb.spec.targets);
  j["beta"] = pb.beta;
  j["eta0"] = pb.eta0;
  j["g0_train"] = vector_to_json(pb.g0_train);
  j["g0_test"] = vector_to_json(pb.g0_test);
  j["arch_hash"] = pb.arch_hash;
  json train = json::array(), test = json::array();
  for (const auto& p : pb.train_points) train.push_back(vector_to_json(p));
  for (const auto& p : pb.test_points) test.push_back(vector_to_json(p));
  j["train_points"] = train;
  j["test_points"] = test;
  return j;
}

inline json newton_report_json(const NewtonResult& res, const FlowProblem& pb) {
  json j;
  j["converged"] = res.converged;
  j["residual"] = res.residual;
  j["iterations"] = res.iterations;
  j["message"] = res.message;
  j["kernel_condition"] = pb.theta_cond();
  j["kernel_jitter"] = pb.jitter_used;
  return j;
}

inline void save_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_json: cannot open " + path.string());
  out << j.dump(2) << "\n";
}

inline json load_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_json: cannot open " + path.string());
  json j;
  in >> j;
  return j;
}

/// Sets a dot-separated path inside a JSON document, parsing the value as
/// JSON when possible and as a string otherwise (CLI override plumbing).
inline void json_set_path(json& root, const std::string& dotted, const std::string& value) {
  json* node = &root;
  size_t start = 0;
  while (true) {
    const size_t dot = dotted.find('.', start);
    const std::string key = dotted.substr(start, dot == std::string::npos ? dot : dot - start);
    if (key.empty()) throw std::invalid_argument("json_set_path: empty key in " + dotted);
    if (dot == std::string::npos) {
      json parsed = json::parse(value, nullptr, false);
      (*node)[key] = parsed.is_discarded() ? json(value) : parsed;
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

}  // namespace ntklab
