// Command-line front end: `ntklab run <config.json>` executes one experiment
// and reports its assertions; `ntklab audit <config.json>` validates and
// echoes the resolved configuration without running anything.

#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ntklab/experiments.hpp"

namespace {

ntklab::ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& sets,
                                     const std::string& out_override) {
  ntklab::json doc = ntklab::load_json(path);
  for (const std::string& kv : sets) {
    const size_t eq = kv.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
    ntklab::json_set_path(doc, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (!out_override.empty()) doc["out_dir"] = out_override;
  return ntklab::parse_config(doc);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Numerical laboratory for wide-network training in function space"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> sets;
  std::string out_dir;

  CLI::App* run = app.add_subcommand("run", "Execute an experiment and check its assertions");
  run->add_option("config", config_path, "JSON experiment configuration")
      ->required()
      ->check(CLI::ExistingFile);
  run->add_option("--set", sets, "Override a config key, dot-path syntax (e.g. train.beta=0.01)");
  run->add_option("--out", out_dir, "Output directory (overrides out_dir in the config)");

  CLI::App* audit = app.add_subcommand("audit", "Validate a configuration and echo its resolved form");
  audit->add_option("config", config_path, "JSON experiment configuration")
      ->required()
      ->check(CLI::ExistingFile);
  audit->add_option("--set", sets, "Override a config key, dot-path syntax");
  audit->add_option("--out", out_dir, "Output directory (overrides out_dir in the config)");

  CLI11_PARSE(app, argc, argv);

  try {
    const ntklab::ExperimentConfig cfg = load_config(config_path, sets, out_dir);
    if (audit->parsed()) {
      std::printf("%s\n", cfg.raw.dump(2).c_str());
      return 0;
    }
    const ntklab::AssertionLog log = ntklab::run_experiment(cfg);
    const ntklab::json summary = log.to_json();
    for (const auto& item : summary.at("assertions"))
      std::printf("[%s] %s\n", item.at("pass").get<bool>() ? "PASS" : "FAIL",
                  item.at("name").get<std::string>().c_str());
    std::printf("%s: %s (artifacts in %s)\n", cfg.experiment.c_str(),
                log.pass() ? "all assertions passed" : "ASSERTIONS FAILED", cfg.out_dir.c_str());
    return log.pass() ? 0 : 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
