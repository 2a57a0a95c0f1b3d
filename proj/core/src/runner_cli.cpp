#include <cstdio>
#include <iostream>
#include <iterator>

#include <CLI11.hpp>

#include "frboost/errors.hpp"
#include "frboost/runner.hpp"

namespace frboost::run {

namespace {

struct StageCli {
  CLI::App* sub = nullptr;
  std::string config;
  uint64_t seed = 0;
  std::string preset;
  std::string out;
  bool verbose = false;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* preset_opt = nullptr;
  CLI::Option* out_opt = nullptr;
};

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"frboost: boosting face recognition with a GAN-trained prior", "frboost"};
  app.require_subcommand(1);

  std::vector<StageCli> stages(std::size(kStageNames));
  for (size_t i = 0; i < std::size(kStageNames); ++i) {
    StageCli& s = stages[i];
    s.sub = app.add_subcommand(kStageNames[i], std::string("run stage ") + kStageNames[i]);
    s.sub->add_option("--config", s.config, "experiment config file (JSON)")
        ->required()
        ->check(CLI::ExistingFile);
    s.seed_opt = s.sub->add_option("--seed", s.seed, "master seed override");
    s.preset_opt = s.sub->add_option("--preset", s.preset, "scale preset override")
                       ->check(CLI::IsMember({"desk", "paper"}));
    s.out_opt = s.sub->add_option("--out", s.out, "experiment directory override");
    s.sub->add_flag("--verbose", s.verbose, "stream training logs to stderr");
  }

  std::string baseline_path, candidate_path;
  CLI::App* compare =
      app.add_subcommand("compare", "print the metric delta table between two report.json files");
  compare->add_option("--baseline", baseline_path, "baseline report.json")
      ->required()
      ->check(CLI::ExistingFile);
  compare->add_option("--candidate", candidate_path, "candidate report.json")
      ->required()
      ->check(CLI::ExistingFile);

  try {
    // CLI11's vector interface consumes the arguments back to front.
    app.parse(std::vector<std::string>(args.rbegin(), args.rend()));
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // a malformed command line is a config error
  }

  try {
    if (compare->parsed()) {
      const std::vector<DeltaRow> rows =
          compare_runs(load_report_json(baseline_path), load_report_json(candidate_path));
      std::cout << render_delta_table(rows);
      return 0;
    }
    for (size_t i = 0; i < stages.size(); ++i) {
      const StageCli& s = stages[i];
      if (!s.sub->parsed()) continue;
      CliOverrides overrides;
      if (s.seed_opt->count() > 0) overrides.seed = s.seed;
      if (s.preset_opt->count() > 0) overrides.preset = s.preset;
      if (s.out_opt->count() > 0) overrides.out_dir = s.out;
      const ExperimentConfig cfg = load_experiment_config(s.config, overrides);
      StageOptions opts;
      if (s.verbose)
        opts.log_sink = [](const std::string& line) { std::cerr << line << '\n'; };
      const StageResult res = run_stage(kStageNames[i], cfg, opts);
      std::printf("frboost: %s done in %.1fs (out: %s)\n", res.stage.c_str(), res.wall_seconds,
                  cfg.paths.out_dir.string().c_str());
      for (const std::string& a : res.artifacts) std::printf("  artifact: %s\n", a.c_str());
      std::printf("  metrics: %s\n", res.metrics_json.c_str());
      return 0;
    }
    return 2;  // unreachable: require_subcommand(1)
  } catch (const ConfigError& e) {
    std::cerr << "frboost: config error: " << e.what() << '\n';
    return 2;
  } catch (const PrerequisiteError& e) {
    std::cerr << "frboost: prerequisite error: " << e.what() << '\n';
    return 3;
  } catch (const NumericalError& e) {
    std::cerr << "frboost: numerical abort: " << e.what() << '\n';
    return 4;
  } catch (const std::invalid_argument& e) {
    std::cerr << "frboost: argument error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "frboost: error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace frboost::run
