#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "biomass/config.hpp"
#include "biomass/runner.hpp"

namespace fs = std::filesystem;

namespace {

// --out wins, then the config value under $BIOMASS_OUT_ROOT (if set)
std::string resolve_out(const std::string& cli_out, const std::string& cfg_out) {
  if (!cli_out.empty()) return cli_out;
  const char* root = std::getenv("BIOMASS_OUT_ROOT");
  if (root && *root && fs::path(cfg_out).is_relative()) {
    return (fs::path(root) / cfg_out).string();
  }
  return cfg_out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dual-view pasture biomass regression toolkit"};
  app.require_subcommand(1);

  std::string config_path, manifest_path, out_path, precision;
  std::uint64_t seed = 17;
  bool seed_given = false;
  int workers = 1;

  auto* sc_splits = app.add_subcommand("splits", "stratified group 5-fold split of a manifest");
  sc_splits->add_option("--manifest", manifest_path, "manifest CSV")->required();
  sc_splits->add_option("--seed", seed, "split seed (default 17)");
  sc_splits->add_option("--out", out_path, "output CSV path (default splits.csv)");

  int audit_d_model = 1024, audit_hidden = 512, audit_depth = 2;
  auto* sc_params = app.add_subcommand("params", "parameter accounting audit");
  sc_params->add_option("--d-model", audit_d_model, "model width (default 1024)");
  sc_params->add_option("--head-hidden", audit_hidden, "head hidden width (default 512)");
  sc_params->add_option("--depth", audit_depth, "fusion depth (default 2)");

  auto* sc_run = app.add_subcommand("run", "run a cross-validated experiment");
  sc_run->add_option("--config", config_path, "experiment config file")->required();
  sc_run->add_option("--seed", seed, "override config seed")->trigger_on_parse();
  sc_run->add_option("--out", out_path, "override output directory");
  sc_run->add_option("--workers", workers, "parallel fold workers (default 1)");
  sc_run->add_option("--precision", precision, "f32 or f64 (overrides config)");

  auto* sc_features = app.add_subcommand("features", "color indices and rank correlations");
  sc_features->add_option("--manifest", manifest_path, "manifest CSV")->required();
  sc_features->add_option("--out", out_path, "output directory (default features/)");

  auto* sc_synth = app.add_subcommand("synth", "generate a synthetic dual-view dataset");
  sc_synth->add_option("--config", config_path, "config file with dataset.synth.* keys");
  sc_synth->add_option("--seed", seed, "generator seed (default 17)");
  sc_synth->add_option("--out", out_path, "output directory")->required();

  auto* sc_grad = app.add_subcommand("grad-check", "finite-difference gradient suite");

  sc_run->callback([&] { seed_given = sc_run->count("--seed") > 0; });

  CLI11_PARSE(app, argc, argv);

  try {
    if (sc_splits->parsed()) {
      const std::string out = out_path.empty() ? "splits.csv" : out_path;
      return biomass::cmd_splits(manifest_path, seed, out, std::cout);
    }
    if (sc_params->parsed()) {
      return biomass::cmd_params(audit_d_model, audit_hidden, audit_depth, std::cout);
    }
    if (sc_run->parsed()) {
      biomass::ExperimentConfig cfg = biomass::ExperimentConfig::from_file(config_path);
      if (seed_given) cfg.seed = seed;
      if (!precision.empty()) {
        cfg.precision = precision;
        cfg.validate();
      }
      const std::string out = resolve_out(out_path, cfg.output_dir);
      return biomass::cmd_run(cfg, workers, out, std::cout);
    }
    if (sc_features->parsed()) {
      const std::string out = out_path.empty() ? "features" : out_path;
      return biomass::cmd_features(manifest_path, out, std::cout, std::cerr);
    }
    if (sc_synth->parsed()) {
      biomass::SynthSpec spec;
      if (!config_path.empty()) {
        biomass::ExperimentConfig cfg = biomass::ExperimentConfig::from_file(config_path);
        spec = cfg.synth;
        if (sc_synth->count("--seed") == 0) seed = cfg.seed;
      }
      return biomass::cmd_synth(spec, seed, out_path, std::cout);
    }
    if (sc_grad->parsed()) {
      return biomass::cmd_grad_check(std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
