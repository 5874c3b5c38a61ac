// Apache License, Version 2.0, refer to LICENSE.txt

#include <CLI11.hpp>
#include <cstdint>
#include <iostream>
#include <string>

#include "wxrisk/pipeline.hpp"

namespace {

const char* stage_blurb(const std::string& name) {
  if (name == "synth") return "Generate synthetic measurement data";
  if (name == "ingest") return "Normalize a raw measurement csv";
  if (name == "preprocess") return "Bin measurements and split train/test";
  if (name == "featsel") return "Cluster parameters and pick representatives";
  if (name == "train-dspp") return "Train the deep sigma point process";
  if (name == "train-bayes") return "Sample the Bayesian regression posterior";
  if (name == "evaluate") return "Score both models on held-out bins";
  if (name == "ablate") return "Rank parameter importance by knockout";
  if (name == "retrain-reduced") return "Retrain models on reduced parameter sets";
  if (name == "triggers") return "Extract trigger regions above the threshold";
  if (name == "report") return "Emit summary table, map data, and figure grids";
  return "";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weather-conditioned dropout risk pipeline"};
  app.set_version_flag("--version", "wxrisk 0.1.0");
  app.require_subcommand(1);

  std::string config_path;
  std::string state;
  std::string out_dir;
  std::string input;
  std::uint64_t seed = 0;
  int jobs = 1;
  double threshold = 0.5;

  app.add_option("--config", config_path,
                 "Key-value config file; flags override file values")
      ->check(CLI::ExistingFile);
  auto* opt_state =
      app.add_option("--state", state, "Restrict the run to one state code");
  auto* opt_seed = app.add_option(
      "--seed", seed, "Root seed; every stage stream derives from it");
  auto* opt_out =
      app.add_option("--out", out_dir, "Output directory for artifacts");
  auto* opt_input =
      app.add_option("--input", input, "Raw measurement csv for ingest");
  auto* opt_jobs =
      app.add_option("--jobs", jobs, "Worker threads for per-state fan-out");
  auto* opt_threshold = app.add_option("--threshold", threshold,
                                       "Trigger probability threshold");

  for (const auto& name : wxrisk::stage_names())
    app.add_subcommand(name, stage_blurb(name))->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    wxrisk::PipelineConfig cfg;
    if (!config_path.empty()) cfg = wxrisk::load_config(config_path);
    if (opt_state->count() > 0) cfg.state = state;
    if (opt_seed->count() > 0) cfg.seed = seed;
    if (opt_out->count() > 0) cfg.out_dir = out_dir;
    if (opt_input->count() > 0) cfg.input = input;
    if (opt_jobs->count() > 0) cfg.jobs = jobs;
    if (opt_threshold->count() > 0) cfg.threshold = threshold;

    wxrisk::run_stage(cfg, app.get_subcommands().front()->get_name());
  } catch (const std::exception& e) {
    std::cerr << "wxrisk: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
