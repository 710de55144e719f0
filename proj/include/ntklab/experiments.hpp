#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "ntklab/datasets.hpp"
#include "ntklab/ensemble.hpp"
#include "ntklab/flow.hpp"
#include "ntklab/io.hpp"
#include "ntklab/kernels.hpp"
#include "ntklab/losses.hpp"
#include "ntklab/mlp.hpp"

namespace ntklab {

inline const std::vector<std::string>& experiment_names() {
  static const std::vector<std::string> names = {
      "toy_ensemble",   "ntk_prepost",         "ntk_tracking", "width_sweep",
      "ensemble_vs_laplace", "brier_counterexample", "assumption_audit"};
  return names;
}

/// Fully resolved run description.  parse_config fills every field from a
/// JSON document (missing keys take the defaults below) and validates; the
/// resolved form is echoed into the run directory so artifacts are
/// self-describing.
struct ExperimentConfig {
  std::string experiment;

  int depth = 2;
  int width = 512;
  int input_dim = 1;
  int output_dim = 3;
  double sigma_w = 1.5;
  double sigma_b = 0.1;

  std::string loss = "ce";               // mse | ce | ce_ref | brier_ref
  std::string targets_source = "synthetic";  // inline | csv | idx | synthetic
  double smoothing = 0.1;
  std::string targets_csv;
  json targets_inline;

  int n_train = 12;
  int n_test = 24;
  std::uint64_t data_seed = 20240513;
  std::string idx_images;
  std::string idx_labels;

  double beta = 0.0;
  double eta0 = 1.0;
  double t_end = 10.0;
  double record_every = 0.5;

  std::vector<int> widths;
  std::vector<std::uint64_t> seeds;
  int draws = 64;

  // Pilot-calibrated drift thresholds; negative disables the assertion.
  double drift_onehot_min = -1.0;
  double drift_ridge_max = -1.0;

  double brier_z_init = 5.5;
  double brier_target = 0.5;
  double brier_start_lo = -2.0;
  double brier_start_hi = 8.0;
  int brier_starts = 41;

  std::string out_dir = "out";
  json raw;  // the normalized document, echoed verbatim

  ArchSpec arch() const {
    return ArchSpec::mlp(depth, width, input_dim, output_dim, sigma_w, sigma_b);
  }
};

namespace detail {

inline const json& sub_object(const json& j, const char* key) {
  static const json empty = json::object();
  if (!j.contains(key)) return empty;
  if (!j.at(key).is_object()) throw std::invalid_argument(std::string("config: '") + key + "' must be an object");
  return j.at(key);
}

template <class T>
inline std::vector<T> int_list(const json& j, const char* key, std::vector<T> fallback) {
  if (!j.contains(key)) return fallback;
  std::vector<T> out;
  for (const auto& v : j.at(key)) out.push_back(v.get<T>());
  return out;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median: empty");
  const size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + mid, v.end());
  double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  std::nth_element(v.begin(), v.begin() + mid - 1, v.end());
  return 0.5 * (v[mid - 1] + hi);
}

inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) throw std::invalid_argument("quantile: empty");
  std::sort(v.begin(), v.end());
  const double pos = q * (static_cast<double>(v.size()) - 1.0);
  const size_t lo = static_cast<size_t>(pos);
  const size_t hi = std::min(lo + 1, v.size() - 1);
  const double w = pos - static_cast<double>(lo);
  return (1.0 - w) * v[lo] + w * v[hi];
}

}  // namespace detail

inline ExperimentConfig parse_config(const json& j) {
  ExperimentConfig c;
  if (!j.contains("experiment")) throw std::invalid_argument("config: missing 'experiment'");
  c.experiment = j.at("experiment").get<std::string>();
  const auto& names = experiment_names();
  if (std::find(names.begin(), names.end(), c.experiment) == names.end())
    throw std::invalid_argument("config: unknown experiment '" + c.experiment + "'");

  const json& arch = detail::sub_object(j, "arch");
  c.depth = arch.value("depth", c.depth);
  c.width = arch.value("width", c.width);
  c.input_dim = arch.value("input_dim", c.input_dim);
  c.output_dim = arch.value("output_dim", c.output_dim);
  c.sigma_w = arch.value("sigma_w", c.sigma_w);
  c.sigma_b = arch.value("sigma_b", c.sigma_b);

  c.loss = j.value("loss", c.loss);
  loss_kind_from_name(c.loss);  // validates the name

  const json& tg = detail::sub_object(j, "targets");
  c.targets_source = tg.value("source", c.targets_source);
  c.smoothing = tg.value("smoothing", c.smoothing);
  c.targets_csv = tg.value("csv", c.targets_csv);
  if (tg.contains("inline")) c.targets_inline = tg.at("inline");

  const json& data = detail::sub_object(j, "data");
  c.n_train = data.value("n_train", c.n_train);
  c.n_test = data.value("n_test", c.n_test);
  c.data_seed = data.value("seed", c.data_seed);
  c.idx_images = data.value("idx_images", c.idx_images);
  c.idx_labels = data.value("idx_labels", c.idx_labels);

  const json& train = detail::sub_object(j, "train");
  c.beta = train.value("beta", c.beta);
  c.eta0 = train.value("eta0", c.eta0);
  c.t_end = train.value("t_end", c.t_end);
  c.record_every = train.value("record_every", c.record_every);

  c.widths = detail::int_list<int>(j, "widths", c.widths);
  c.seeds = detail::int_list<std::uint64_t>(j, "seeds", {1, 2, 3, 4, 5});
  c.draws = j.value("draws", c.draws);

  const json& th = detail::sub_object(j, "thresholds");
  c.drift_onehot_min = th.value("drift_onehot_min", c.drift_onehot_min);
  c.drift_ridge_max = th.value("drift_ridge_max", c.drift_ridge_max);

  const json& br = detail::sub_object(j, "brier");
  c.brier_z_init = br.value("z_init", c.brier_z_init);
  c.brier_target = br.value("target_prob", c.brier_target);
  c.brier_start_lo = br.value("start_lo", c.brier_start_lo);
  c.brier_start_hi = br.value("start_hi", c.brier_start_hi);
  c.brier_starts = br.value("starts", c.brier_starts);

  c.out_dir = j.value("out_dir", c.out_dir);

  if (c.depth < 1) throw std::invalid_argument("config: arch.depth must be >= 1");
  if (c.width < 1) throw std::invalid_argument("config: arch.width must be >= 1");
  if (c.input_dim < 1 || c.output_dim < 1)
    throw std::invalid_argument("config: arch dimensions must be >= 1");
  if (!(c.sigma_w > 0)) throw std::invalid_argument("config: arch.sigma_w must be > 0");
  if (c.sigma_b < 0) throw std::invalid_argument("config: arch.sigma_b must be >= 0");
  const std::vector<std::string> sources = {"inline", "csv", "idx", "synthetic"};
  if (std::find(sources.begin(), sources.end(), c.targets_source) == sources.end())
    throw std::invalid_argument("config: targets.source must be inline|csv|idx|synthetic");
  if (c.targets_source == "csv" && c.targets_csv.empty())
    throw std::invalid_argument("config: targets.source=csv needs targets.csv");
  if (c.targets_source == "inline" && c.targets_inline.is_null())
    throw std::invalid_argument("config: targets.source=inline needs targets.inline");
  if (c.smoothing < 0 || c.smoothing >= 1)
    throw std::invalid_argument("config: targets.smoothing must lie in [0, 1)");
  if (c.n_train < 1) throw std::invalid_argument("config: data.n_train must be >= 1");
  if (c.n_test < 0) throw std::invalid_argument("config: data.n_test must be >= 0");
  if (c.beta < 0) throw std::invalid_argument("config: train.beta must be >= 0");
  if (!(c.eta0 > 0)) throw std::invalid_argument("config: train.eta0 must be > 0");
  if (!(c.t_end > 0)) throw std::invalid_argument("config: train.t_end must be > 0");
  if (c.seeds.empty()) throw std::invalid_argument("config: seeds must be non-empty");
  if (c.draws < 2) throw std::invalid_argument("config: draws must be >= 2");
  if (c.experiment == "width_sweep" && c.widths.size() < 2)
    throw std::invalid_argument("config: width_sweep needs at least two widths");
  for (int w : c.widths)
    if (w < 1) throw std::invalid_argument("config: widths entries must be >= 1");
  if (c.brier_starts < 2) throw std::invalid_argument("config: brier.starts must be >= 2");

  // Normalized echo: every field the run will use, no more.
  json raw;
  raw["experiment"] = c.experiment;
  raw["arch"] = {{"depth", c.depth},     {"width", c.width},       {"input_dim", c.input_dim},
                 {"output_dim", c.output_dim}, {"sigma_w", c.sigma_w}, {"sigma_b", c.sigma_b}};
  raw["loss"] = c.loss;
  raw["targets"] = {{"source", c.targets_source}, {"smoothing", c.smoothing}, {"csv", c.targets_csv}};
  if (!c.targets_inline.is_null()) raw["targets"]["inline"] = c.targets_inline;
  raw["data"] = {{"n_train", c.n_train},   {"n_test", c.n_test},       {"seed", c.data_seed},
                 {"idx_images", c.idx_images}, {"idx_labels", c.idx_labels}};
  raw["train"] = {{"beta", c.beta}, {"eta0", c.eta0}, {"t_end", c.t_end},
                  {"record_every", c.record_every}};
  raw["widths"] = c.widths;
  raw["seeds"] = c.seeds;
  raw["draws"] = c.draws;
  raw["thresholds"] = {{"drift_onehot_min", c.drift_onehot_min},
                       {"drift_ridge_max", c.drift_ridge_max}};
  raw["brier"] = {{"z_init", c.brier_z_init},   {"target_prob", c.brier_target},
                  {"start_lo", c.brier_start_lo}, {"start_hi", c.brier_start_hi},
                  {"starts", c.brier_starts}};
  raw["out_dir"] = c.out_dir;
  // Provenance strings ride along untouched so pilot-calibrated numbers keep
  // their origin note in the echoed config.
  for (auto it = j.begin(); it != j.end(); ++it)
    if (it.key().rfind("_", 0) == 0) raw[it.key()] = it.value();
  c.raw = raw;
  return c;
}

/// Accumulates named pass/fail checks for the machine-readable summary.
class AssertionLog {
 public:
  void check(const std::string& name, bool ok, json detail = json::object()) {
    detail["name"] = name;
    detail["pass"] = ok;
    items_.push_back(std::move(detail));
    pass_ = pass_ && ok;
  }
  void note(const std::string& key, const json& value) { notes_[key] = value; }
  bool pass() const { return pass_; }
  json to_json() const {
    json j;
    j["pass"] = pass_;
    j["assertions"] = items_;
    j["notes"] = notes_;
    return j;
  }

 private:
  json items_ = json::array();
  json notes_ = json::object();
  bool pass_ = true;
};

namespace detail {

inline void write_run_preamble(const ExperimentConfig& cfg) {
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);
  save_json(fs::path(cfg.out_dir) / "resolved_config.json", cfg.raw);
  json env;
  env["eigen"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
                 "." + std::to_string(EIGEN_MINOR_VERSION);
#ifdef __VERSION__
  env["compiler"] = __VERSION__;
#endif
  env["seeds"] = cfg.seeds;
  env["data_seed"] = cfg.data_seed;
  save_json(fs::path(cfg.out_dir) / "env.json", env);
}

/// Targets for a labeled dataset under the configured loss and smoothing.
/// Reference-class losses expect labels where 0 denotes the reference.
inline TargetSet targets_for(const ExperimentConfig& cfg, const std::vector<int>& labels, int k) {
  const LossKind kind = loss_kind_from_name(cfg.loss);
  const bool ref = (kind == LossKind::CrossEntropyRef || kind == LossKind::BrierRef);
  if (cfg.targets_source == "csv") return load_targets_csv(cfg.targets_csv, ref);
  if (cfg.targets_source == "inline") return targets_from_json(cfg.targets_inline);
  if (ref)
    return cfg.smoothing > 0 ? TargetSet::smoothed_ref(labels, k, cfg.smoothing)
                             : TargetSet::one_hot_ref(labels, k);
  return cfg.smoothing > 0 ? TargetSet::smoothed(labels, k, cfg.smoothing)
                           : TargetSet::one_hot(labels, k);
}

inline std::vector<Eigen::VectorXd> first_probes(const std::vector<Eigen::VectorXd>& pts) {
  std::vector<Eigen::VectorXd> probes;
  for (size_t i = 0; i < pts.size() && i < 3; ++i) probes.push_back(pts[i]);
  return probes;
}

inline void write_band_csv(const std::filesystem::path& path,
                           const std::vector<Eigen::VectorXd>& grid,
                           const std::vector<std::vector<std::vector<double>>>& probs, int k) {
  CsvWriter csv(path, {"x", "class", "q10", "q50", "q90"});
  for (size_t i = 0; i < grid.size(); ++i)
    for (int c = 0; c < k; ++c)
      csv.row({grid[i](0), static_cast<double>(c), quantile(probs[i][static_cast<size_t>(c)], 0.10),
               quantile(probs[i][static_cast<size_t>(c)], 0.50),
               quantile(probs[i][static_cast<size_t>(c)], 0.90)});
}

}  // namespace detail

/// Finite-net ensemble over seeds next to the infinite-width ensemble of
/// prior draws pushed through the function-space flow, both summarized as
/// per-input softmax-probability quantile bands.
inline AssertionLog run_toy_ensemble(const ExperimentConfig& cfg) {
  namespace fs = std::filesystem;
  if (cfg.n_test < 1) throw std::invalid_argument("empty test grid");
  detail::write_run_preamble(cfg);
  AssertionLog log;

  const Dataset ds = three_class_toy(cfg.n_train, cfg.n_test, cfg.data_seed);
  const ArchSpec arch = cfg.arch();
  const LossKind kind = loss_kind_from_name(cfg.loss);
  const TargetSet targets = detail::targets_for(cfg, ds.train_labels, cfg.output_dim);
  const LossSpec spec = make_loss(kind, targets);
  const int k = cfg.output_dim;
  const size_t m = ds.test_x.size();

  // probs[test point][class][sample]
  std::vector<std::vector<std::vector<double>>> finite(m), infinite(m);
  for (auto& per : finite) per.resize(static_cast<size_t>(k));
  for (auto& per : infinite) per.resize(static_cast<size_t>(k));

  for (std::uint64_t seed : cfg.seeds) {
    NetSnapshot net = init_net(arch, seed);
    TrainOptions opts;
    opts.record_every = cfg.t_end;  // endpoints only
    const TrainTrace trace = train_flow(net, spec, ds.train_x, cfg.beta, cfg.eta0, cfg.t_end, {},
                                        ds.test_x, opts);
    for (size_t i = 0; i < m; ++i) {
      const Eigen::VectorXd p = stable_softmax(trace.f_test_final.col(static_cast<Eigen::Index>(i)));
      for (int c = 0; c < k; ++c) finite[i][static_cast<size_t>(c)].push_back(p(c));
    }
  }

  const KernelPack pack = assemble_pack(arch, ds.train_x);
  const CrossKernels cross = assemble_cross(arch, ds.train_x, ds.test_x);
  const int nk = cfg.n_train * k;
  const int mk = static_cast<int>(m) * k;
  FlowProblem pb = make_flow_problem(pack, cross, spec, cfg.beta, cfg.eta0,
                                     Eigen::VectorXd::Zero(nk), Eigen::VectorXd::Zero(mk));

  Eigen::MatrixXd joint(nk + mk, nk + mk);
  joint.topLeftCorner(nk, nk) = pb.nngp_xx;
  joint.bottomLeftCorner(mk, nk) = pb.nngp_sx;
  joint.topRightCorner(nk, mk) = pb.nngp_sx.transpose();
  joint.bottomRightCorner(mk, mk) = pb.nngp_ss;
  const Eigen::MatrixXd draws = sample_gaussian(joint, cfg.draws, cfg.data_seed + 17);

  int flow_failures = 0;
  FlowOptions fopts;
  fopts.record_every = 0.0;
  for (int s = 0; s < cfg.draws; ++s) {
    pb.g0_train = draws.row(s).head(nk).transpose();
    pb.g0_test = draws.row(s).tail(mk).transpose();
    const FlowTrajectory traj = integrate_flow(pb, cfg.t_end, fopts);
    if (traj.step_underflow || traj.states.empty()) {
      ++flow_failures;
      continue;
    }
    const Eigen::VectorXd& g = traj.states.back().g_test;
    for (size_t i = 0; i < m; ++i) {
      const Eigen::VectorXd p = stable_softmax(g.segment(static_cast<Eigen::Index>(i) * k, k));
      for (int c = 0; c < k; ++c) infinite[i][static_cast<size_t>(c)].push_back(p(c));
    }
  }

  detail::write_band_csv(fs::path(cfg.out_dir) / "finite_band.csv", ds.test_x, finite, k);
  detail::write_band_csv(fs::path(cfg.out_dir) / "infinite_band.csv", ds.test_x, infinite, k);

  log.check("flow_draws_converged", flow_failures == 0, {{"failures", flow_failures}});
  bool ordered = true;
  for (size_t i = 0; i < m; ++i)
    for (int c = 0; c < k; ++c) {
      auto& v = infinite[i][static_cast<size_t>(c)];
      if (v.empty()) continue;
      if (detail::quantile(v, 0.10) > detail::quantile(v, 0.90)) ordered = false;
    }
  log.check("quantiles_ordered", ordered);
  const auto fin = read_csv_numeric(fs::path(cfg.out_dir) / "finite_band.csv");
  const auto inf = read_csv_numeric(fs::path(cfg.out_dir) / "infinite_band.csv");
  bool grids_match = fin.size() == inf.size();
  for (size_t r = 0; grids_match && r < fin.size(); ++r)
    grids_match = fin[r][0] == inf[r][0] && fin[r][1] == inf[r][1];
  log.check("band_grids_match", grids_match);
  return log;
}

/// Tracks the tangent-kernel probe and the softmax-output kernel probe along
/// finite-net training; the former is the lazy-regime constant, the latter is
/// not.
inline AssertionLog run_ntk_prepost(const ExperimentConfig& cfg) {
  namespace fs = std::filesystem;
  detail::write_run_preamble(cfg);
  AssertionLog log;

  const Dataset ds = three_class_toy(cfg.n_train, std::max(cfg.n_test, 2), cfg.data_seed);
  const ArchSpec arch = cfg.arch();
  const LossSpec spec =
      make_loss(loss_kind_from_name(cfg.loss), detail::targets_for(cfg, ds.train_labels, cfg.output_dim));
  const std::vector<Eigen::VectorXd> probes = detail::first_probes(ds.train_x);

  std::vector<double> pre_drift, post_drift;
  CsvWriter drift_csv(fs::path(cfg.out_dir) / "prepost_drift.csv",
                      {"seed", "pre_drift", "post_drift"});
  for (std::uint64_t seed : cfg.seeds) {
    NetSnapshot net = init_net(arch, seed);
    TrainOptions opts;
    opts.record_every = cfg.record_every;
    opts.post_softmax_probes = true;
    const TrainTrace trace =
        train_flow(net, spec, ds.train_x, cfg.beta, cfg.eta0, cfg.t_end, probes, {}, opts);
    pre_drift.push_back(trace.max_ntk_drift());
    post_drift.push_back(trace.max_post_drift());
    drift_csv.row({static_cast<double>(seed), pre_drift.back(), post_drift.back()});

    CsvWriter tr(fs::path(cfg.out_dir) / ("prepost_trace_seed" + std::to_string(seed) + ".csv"),
                 {"t", "pre_probe_1", "pre_probe_2", "pre_probe_3", "post_probe_1", "post_probe_2",
                  "post_probe_3"});
    for (size_t r = 0; r < trace.times.size(); ++r) {
      std::vector<double> row{trace.times[r]};
      for (int q = 0; q < 3; ++q)
        row.push_back(q < trace.ntk_probes.cols() ? trace.ntk_probes(static_cast<Eigen::Index>(r), q) : 0.0);
      for (int q = 0; q < 3; ++q)
        row.push_back(q < trace.post_probes.cols() ? trace.post_probes(static_cast<Eigen::Index>(r), q) : 0.0);
      tr.row(row);
    }
  }
  const double pre_med = detail::median(pre_drift);
  const double post_med = detail::median(post_drift);
  log.note("pre_drift_median", pre_med);
  log.note("post_drift_median", post_med);
  log.check("pre_drift_below_post_drift", pre_med < post_med,
            {{"pre", pre_med}, {"post", post_med}});
  return log;
}

/// Three training regimes on the two-class problem: one-hot targets without
/// ridge, smoothed targets without ridge, one-hot targets with ridge.  The
/// tangent-kernel drift ordering across them is the headline assertion.
inline AssertionLog run_ntk_tracking(const ExperimentConfig& cfg) {
  namespace fs = std::filesystem;
  detail::write_run_preamble(cfg);
  AssertionLog log;
  if (cfg.loss != "ce_ref")
    throw std::invalid_argument("ntk_tracking: configured for the reference-class cross entropy");
  if (!(cfg.beta > 0)) throw std::invalid_argument("ntk_tracking: train.beta must be > 0 (ridge arm)");
  if (!(cfg.smoothing > 0))
    throw std::invalid_argument("ntk_tracking: targets.smoothing must be > 0 (smoothed arm)");

  const Dataset ds = two_class_data(cfg.idx_images, cfg.idx_labels, cfg.input_dim, cfg.n_train,
                                    cfg.n_test, cfg.data_seed);
  log.note("data_source", ds.source);
  const ArchSpec arch = cfg.arch();
  const std::vector<Eigen::VectorXd> probes = detail::first_probes(ds.train_x);
  const int k = cfg.output_dim;
  if (k != 1) throw std::invalid_argument("ntk_tracking: one logit expected with ce_ref");

  struct Variant {
    std::string name;
    TargetSet targets;
    double beta;
  };
  const std::vector<Variant> variants = {
      {"onehot_beta0", TargetSet::one_hot_ref(ds.train_labels, k), 0.0},
      {"smoothed_beta0", TargetSet::smoothed_ref(ds.train_labels, k, cfg.smoothing), 0.0},
      {"onehot_ridge", TargetSet::one_hot_ref(ds.train_labels, k), cfg.beta},
  };

  CsvWriter drift_csv(fs::path(cfg.out_dir) / "tracking_drift.csv", {"variant", "seed", "drift"});
  std::map<std::string, double> medians;
  for (const Variant& var : variants) {
    const LossSpec spec = make_loss(LossKind::CrossEntropyRef, var.targets);
    std::vector<double> drifts;
    for (std::uint64_t seed : cfg.seeds) {
      NetSnapshot net = init_net(arch, seed);
      TrainOptions opts;
      opts.record_every = cfg.record_every;
      const TrainTrace trace =
          train_flow(net, spec, ds.train_x, var.beta, cfg.eta0, cfg.t_end, probes, {}, opts);
      drifts.push_back(trace.max_ntk_drift());
      drift_csv.raw_row({var.name, std::to_string(seed), format_double(drifts.back())});
      write_trace_csv(
          fs::path(cfg.out_dir) / ("tracking_" + var.name + "_seed" + std::to_string(seed) + ".csv"),
          trace);
    }
    medians[var.name] = detail::median(drifts);
    log.note("drift_median_" + var.name, medians[var.name]);
  }

  log.check("drift_ordering",
            medians["onehot_beta0"] > medians["smoothed_beta0"] &&
                medians["smoothed_beta0"] > medians["onehot_ridge"],
            {{"onehot_beta0", medians["onehot_beta0"]},
             {"smoothed_beta0", medians["smoothed_beta0"]},
             {"onehot_ridge", medians["onehot_ridge"]}});
  if (cfg.drift_onehot_min >= 0)
    log.check("onehot_beta0_drift_exceeds_threshold", medians["onehot_beta0"] > cfg.drift_onehot_min,
              {{"median", medians["onehot_beta0"]}, {"threshold", cfg.drift_onehot_min}});
  if (cfg.drift_ridge_max >= 0)
    log.check("ridge_drift_below_threshold", medians["onehot_ridge"] < cfg.drift_ridge_max,
              {{"median", medians["onehot_ridge"]}, {"threshold", cfg.drift_ridge_max}});
  return log;
}

/// Width sweep of the linearization gap, the parameter-Hessian probe, and the
/// Jacobian scale.  The first two shrink with width, the last stays bounded.
inline AssertionLog run_width_sweep(const ExperimentConfig& cfg) {
  namespace fs = std::filesystem;
  detail::write_run_preamble(cfg);
  AssertionLog log;

  const Dataset ds = three_class_toy(cfg.n_train, std::max(cfg.n_test, 2), cfg.data_seed);
  const LossSpec spec =
      make_loss(loss_kind_from_name(cfg.loss), detail::targets_for(cfg, ds.train_labels, cfg.output_dim));

  CsvWriter csv(fs::path(cfg.out_dir) / "width_sweep.csv",
                {"width", "seed", "sup_lin_gap", "sup_lin_gap_centered", "hess_opnorm", "jac_frob"});
  std::map<int, std::vector<double>> gaps, hess, jac;
  for (int w : cfg.widths) {
    const ArchSpec arch = cfg.arch().with_width(w);
    for (std::uint64_t seed : cfg.seeds) {
      NetSnapshot net = init_net(arch, seed);
      const HessianProbe hp = hessian_opnorm_probe(net, ds.train_x[0], 40, seed + 101);
      const EmpiricalNtk single = empirical_ntk(net, net.theta0, {ds.train_x[0]});
      const double jfrob = std::sqrt(single.full.trace());
      TrainOptions opts;
      opts.record_every = cfg.record_every;
      const TrainTrace trace =
          train_flow(net, spec, ds.train_x, cfg.beta, cfg.eta0, cfg.t_end, {}, ds.test_x, opts);
      csv.row({static_cast<double>(w), static_cast<double>(seed), trace.sup_lin_gap,
               trace.sup_lin_gap_centered, hp.value, jfrob});
      gaps[w].push_back(trace.sup_lin_gap);
      hess[w].push_back(hp.value);
      jac[w].push_back(jfrob);
    }
  }

  CsvWriter med_csv(fs::path(cfg.out_dir) / "width_sweep_medians.csv",
                    {"width", "lin_gap_median", "hess_median", "jac_median"});
  std::vector<double> gap_med, hess_med, jac_med;
  for (int w : cfg.widths) {
    gap_med.push_back(detail::median(gaps[w]));
    hess_med.push_back(detail::median(hess[w]));
    jac_med.push_back(detail::median(jac[w]));
    med_csv.row({static_cast<double>(w), gap_med.back(), hess_med.back(), jac_med.back()});
  }

  bool hess_decreasing = true;
  for (size_t i = 1; i < hess_med.size(); ++i)
    if (!(hess_med[i] < hess_med[i - 1])) hess_decreasing = false;
  log.check("hessian_probe_decreasing", hess_decreasing, {{"medians", hess_med}});

  for (size_t i = 0; i + 1 < cfg.widths.size(); ++i)
    if (cfg.widths[i + 1] == 4 * cfg.widths[i]) {
      const double ratio = gap_med[i] / gap_med[i + 1];
      log.check("lin_gap_ratio_" + std::to_string(cfg.widths[i]) + "_to_" +
                    std::to_string(cfg.widths[i + 1]),
                ratio >= 1.5, {{"ratio", ratio}});
    }

  const double jac_hi = *std::max_element(jac_med.begin(), jac_med.end());
  const double jac_lo = *std::min_element(jac_med.begin(), jac_med.end());
  log.check("jacobian_scale_bounded", jac_hi <= 1.5 * jac_lo, {{"max", jac_hi}, {"min", jac_lo}});
  return log;
}

/// Ensemble law against the kernel Laplace law in the matched-kernel setting:
/// spectra of both covariances and the positive semidefinite gap between them.
inline AssertionLog run_ensemble_vs_laplace(const ExperimentConfig& cfg) {
  namespace fs = std::filesystem;
  if (cfg.n_test < 1) throw std::invalid_argument("empty test grid");
  detail::write_run_preamble(cfg);
  AssertionLog log;

  const Dataset ds = three_class_toy(cfg.n_train, cfg.n_test, cfg.data_seed);
  const ArchSpec arch = cfg.arch();
  const LossSpec spec =
      make_loss(loss_kind_from_name(cfg.loss), detail::targets_for(cfg, ds.train_labels, cfg.output_dim));
  const KernelPack pack = assemble_pack(arch, ds.train_x);
  const CrossKernels cross = assemble_cross(arch, ds.train_x, ds.test_x);
  const int nk = cfg.n_train * cfg.output_dim;
  const int mk = static_cast<int>(ds.test_x.size()) * cfg.output_dim;
  const FlowProblem pb =
      make_flow_problem(pack, cross, spec, cfg.beta, cfg.eta0, Eigen::VectorXd::Zero(nk),
                        Eigen::VectorXd::Zero(mk), /*kernels_equal=*/true);

  const EnsembleSummary summary = ensemble_summary(pb, cfg.draws, cfg.data_seed + 29);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ens_eig(summary.sigma_ens);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> lap_eig(summary.sigma_lap);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> emp_eig(summary.cov_test);
  CsvWriter spec_csv(fs::path(cfg.out_dir) / "covariance_spectra.csv",
                     {"index", "sigma_ens", "sigma_lap", "empirical"});
  for (int i = 0; i < mk; ++i)
    spec_csv.row({static_cast<double>(i), ens_eig.eigenvalues()(i), lap_eig.eigenvalues()(i),
                  emp_eig.eigenvalues()(i)});

  json gap;
  gap["min_eigenvalue"] = summary.gap_min_eig;
  gap["closed_form_max_diff"] = summary.gap_closed_form_diff;
  gap["laplace_trace"] = summary.sigma_lap.trace();
  gap["push_through_failures"] = summary.failures;
  save_json(fs::path(cfg.out_dir) / "gap_certificate.json", gap);

  log.note("empirical_vs_ensemble_cov_rel",
           (summary.cov_test - summary.sigma_ens).norm() / summary.sigma_ens.norm());
  log.check("push_through_converged", summary.failures == 0, {{"failures", summary.failures}});
  log.check("gap_psd", summary.gap_min_eig >= -1e-8 * summary.sigma_lap.trace(),
            {{"min_eig", summary.gap_min_eig}});
  log.check("gap_closed_form", summary.gap_closed_form_diff <= 1e-8,
            {{"max_diff", summary.gap_closed_form_diff}});
  if (cfg.beta == 0.0) {
    const double gap_norm = (summary.sigma_lap - summary.sigma_ens).lpNorm<Eigen::Infinity>();
    log.check("gap_vanishes_at_beta_zero", gap_norm <= 1e-10, {{"gap_norm", gap_norm}});
  }
  return log;
}

/// Stationary-point census of the one-logit Brier landscape with a ridge
/// anchor: the regime with several rest points.
inline AssertionLog run_brier_counterexample(const ExperimentConfig& cfg) {
  namespace fs = std::filesystem;
  detail::write_run_preamble(cfg);
  AssertionLog log;

  Eigen::MatrixXd rows(1, 2);
  rows << 1.0 - cfg.brier_target, cfg.brier_target;
  const LossSpec spec = make_loss(LossKind::BrierRef, TargetSet::from_rows(rows, true));
  Eigen::MatrixXd theta_xx(1, 1), theta_sx(0, 1), theta_ss(0, 0);
  theta_xx << 1.0;
  Eigen::VectorXd g0(1);
  g0 << cfg.brier_z_init;
  const FlowProblem pb = make_flow_problem_dense(theta_xx, theta_sx, theta_ss, spec, cfg.beta,
                                                 cfg.eta0, g0, Eigen::VectorXd(0));

  std::vector<Eigen::VectorXd> starts;
  for (int i = 0; i < cfg.brier_starts; ++i) {
    Eigen::VectorXd s(1);
    s(0) = cfg.brier_start_lo +
           (cfg.brier_start_hi - cfg.brier_start_lo) * i / (cfg.brier_starts - 1);
    starts.push_back(s);
  }
  const std::vector<StationaryPoint> points = find_stationary_points(pb, starts);

  CsvWriter roots_csv(fs::path(cfg.out_dir) / "stationary_points.csv", {"z", "kind", "objective"});
  for (const auto& p : points)
    roots_csv.raw_row({format_double(p.z(0)), p.kind, format_double(p.objective)});
  CsvWriter land_csv(fs::path(cfg.out_dir) / "landscape.csv", {"z", "objective"});
  for (int i = 0; i <= 400; ++i) {
    Eigen::VectorXd z(1);
    z(0) = cfg.brier_start_lo + (cfg.brier_start_hi - cfg.brier_start_lo) * i / 400.0;
    land_csv.row({z(0), map_objective(pb, z)});
  }

  log.note("n_stationary", static_cast<int>(points.size()));
  bool all_stationary = true;
  for (const auto& p : points)
    if ((phi_apply(pb, p.z) - cfg.beta * g0).norm() > 1e-8) all_stationary = false;
  log.check("roots_satisfy_stationarity", all_stationary);
  log.check("found_at_least_one", !points.empty());

  const bool canonical = std::abs(cfg.brier_target - 0.5) < 1e-12 &&
                         std::abs(cfg.brier_z_init - 5.5) < 1e-12;
  if (canonical && std::abs(cfg.beta - 0.01) < 1e-12) {
    const double expect[3] = {0.98, 2.47, 5.24};
    const char* kinds[3] = {"min", "max", "min"};
    bool ok = points.size() == 3;
    json found = json::array();
    for (size_t i = 0; i < points.size(); ++i) {
      found.push_back({{"z", points[i].z(0)}, {"kind", points[i].kind}});
      if (i < 3)
        ok = ok && std::abs(points[i].z(0) - expect[i]) <= 0.01 && points[i].kind == kinds[i];
    }
    log.check("three_points_min_max_min", ok, {{"found", found}});
  }
  if (canonical && cfg.beta == 0.0) {
    const bool ok = points.size() == 1 && std::abs(points[0].z(0)) <= 1e-8;
    log.check("unique_root_at_zero", ok,
              {{"count", static_cast<int>(points.size())},
               {"z", points.empty() ? 0.0 : points[0].z(0)}});
  }
  return log;
}

/// Sublevel-set audits of the growth and flatness constants behind the
/// convergence statements, one row per loss kind.
inline AssertionLog run_assumption_audit(const ExperimentConfig& cfg) {
  namespace fs = std::filesystem;
  detail::write_run_preamble(cfg);
  AssertionLog log;

  const int n = 4, k = 3, samples = 1000;
  const std::vector<int> labels = {0, 1, 2, 0};
  struct Row {
    std::string name;
    LossSpec spec;
  };
  const std::vector<Row> rows = {
      {"mse", make_loss(LossKind::Mse, TargetSet::one_hot(labels, k))},
      {"ce_onehot", make_loss(LossKind::CrossEntropy, TargetSet::one_hot(labels, k))},
      {"ce_smoothed", make_loss(LossKind::CrossEntropy, TargetSet::smoothed(labels, k, cfg.smoothing))},
      {"ce_ref", make_loss(LossKind::CrossEntropyRef, TargetSet::one_hot_ref(labels, k))},
      {"brier_ref", make_loss(LossKind::BrierRef, TargetSet::from_rows(
                                                      [] {
                                                        Eigen::MatrixXd r(4, 2);
                                                        r << 0.5, 0.5, 0.7, 0.3, 0.2, 0.8, 0.4, 0.6;
                                                        return r;
                                                      }(),
                                                      true))},
  };

  CsvWriter csv(fs::path(cfg.out_dir) / "assumption_audit.csv",
                {"loss", "k0", "k1", "k2", "mu_c", "analytic_mu", "hess_opnorm_max",
                 "hess_min_eig", "accepted", "ratio_samples"});
  std::mt19937_64 rng(cfg.data_seed + 404);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double spreads[4] = {0.5, 1.0, 2.0, 4.0};

  for (const Row& row : rows) {
    const double k0 = row.spec.inf_value + 2.0;
    const SublevelProbe probe = audit_assumptions(row.spec, k0, samples, cfg.data_seed + 7);

    // Curvature extremes without the sublevel restriction: the spectral bound
    // and strict definiteness claims are pointwise in z.
    double op_max = 0.0, min_eig = std::numeric_limits<double>::infinity();
    const int dim = row.spec.coords();
    Eigen::VectorXd z(dim);
    for (int s = 0; s < samples; ++s) {
      const double spread = spreads[s % 4];
      for (int j = 0; j < dim; ++j) z(j) = spread * gauss(rng);
      for (const Eigen::MatrixXd& block : hessian_blocks(row.spec, z)) {
        const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(block);
        op_max = std::max(op_max, eig.eigenvalues().cwiseAbs().maxCoeff());
        min_eig = std::min(min_eig, eig.eigenvalues().minCoeff());
      }
    }

    csv.raw_row({row.name, format_double(probe.k0), format_double(probe.k1),
                 format_double(probe.k2), format_double(probe.mu_c),
                 format_double(probe.has_analytic_mu ? probe.analytic_mu : 0.0),
                 format_double(op_max), format_double(min_eig), std::to_string(probe.accepted),
                 std::to_string(probe.ratio_samples)});

    if (row.name == "mse") {
      log.check("mse_k2_is_one", std::abs(probe.k2 - 1.0) <= 1e-9, {{"k2", probe.k2}});
      log.check("mse_mu_is_one", std::abs(probe.mu_c - 1.0) <= 1e-9, {{"mu", probe.mu_c}});
    }
    if (row.name == "ce_onehot" || row.name == "ce_smoothed") {
      const double bound = std::sqrt(2.0 * n);
      log.check(row.name + "_k1_bound", probe.k1 <= bound + 1e-12,
                {{"k1", probe.k1}, {"bound", bound}});
      log.check(row.name + "_hessian_opnorm_half", op_max <= 0.5 + 1e-12, {{"max", op_max}});
    }
    if (row.name == "ce_smoothed")
      log.check("ce_smoothed_mu_above_floor", probe.has_analytic_mu && probe.mu_c >= probe.analytic_mu,
                {{"mu", probe.mu_c}, {"floor", probe.analytic_mu}});
    if (row.name == "ce_ref")
      log.check("ce_ref_hessian_pd", min_eig > 0.0, {{"min_eig", min_eig}});
  }
  return log;
}

/// Dispatch plus the common summary artifact.  Returns the log; the summary
/// file carries the same verdict for downstream tooling.
inline AssertionLog run_experiment(const ExperimentConfig& cfg) {
  AssertionLog log;
  if (cfg.experiment == "toy_ensemble")
    log = run_toy_ensemble(cfg);
  else if (cfg.experiment == "ntk_prepost")
    log = run_ntk_prepost(cfg);
  else if (cfg.experiment == "ntk_tracking")
    log = run_ntk_tracking(cfg);
  else if (cfg.experiment == "width_sweep")
    log = run_width_sweep(cfg);
  else if (cfg.experiment == "ensemble_vs_laplace")
    log = run_ensemble_vs_laplace(cfg);
  else if (cfg.experiment == "brier_counterexample")
    log = run_brier_counterexample(cfg);
  else if (cfg.experiment == "assumption_audit")
    log = run_assumption_audit(cfg);
  else
    throw std::invalid_argument("run_experiment: unknown experiment " + cfg.experiment);
  json summary = log.to_json();
  summary["experiment"] = cfg.experiment;
  save_json(std::filesystem::path(cfg.out_dir) / "summary.json", summary);
  return log;
}

}  // namespace ntklab
