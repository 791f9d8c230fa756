#include <exception>
#include <functional>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "misty/commands.hpp"

namespace {

using misty::CliOptions;
using misty::RunConfig;

struct SubSpec {
  CLI::App* app = nullptr;
  std::function<int(const RunConfig&, const CliOptions&)> run;
};

void add_common(CLI::App* sub, CliOptions& opts) {
  sub->add_option("--config", opts.config_path, "run configuration JSON")
      ->check(CLI::ExistingFile);
  sub->add_option("--seed", opts.seed, "override the config seed");
  sub->add_option("--out", opts.out_dir, "artifact directory")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"single-pass generative motion planner"};
  app.require_subcommand(1);

  CliOptions opts;
  std::vector<SubSpec> subs;

  auto* synth = app.add_subcommand("synth", "generate the trajectory corpus and scenario set");
  add_common(synth, opts);
  subs.push_back({synth, misty::cmd_synth});

  auto* train_vae = app.add_subcommand("train-vae", "train the trajectory latent manifold");
  add_common(train_vae, opts);
  subs.push_back({train_vae, misty::cmd_train_vae});

  auto* build_dict = app.add_subcommand("build-dict", "cluster the corpus into behavior classes");
  add_common(build_dict, opts);
  subs.push_back({build_dict, misty::cmd_build_dict});

  auto* fit_pca = app.add_subcommand("fit-pca", "fit the linear trajectory basis");
  add_common(fit_pca, opts);
  subs.push_back({fit_pca, misty::cmd_fit_pca});

  auto* train_planner = app.add_subcommand("train-planner", "train the scene-conditioned planner");
  add_common(train_planner, opts);
  subs.push_back({train_planner, misty::cmd_train_planner});

  auto* infer = app.add_subcommand("infer", "generate proposals for one scenario");
  add_common(infer, opts);
  infer->add_option("scenario", opts.scenario_path, "scenario JSON")->required();
  infer->add_option("--alpha", opts.alpha, "guidance scale");
  infer->add_option("--k", opts.k, "number of proposals");
  subs.push_back({infer, misty::cmd_infer});

  auto* bench = app.add_subcommand("bench", "latency comparison against a 10-step baseline");
  add_common(bench, opts);
  bench->add_option("--alpha", opts.alpha, "guidance scale");
  bench->add_option("--k", opts.k, "number of proposals");
  bench->add_option("--repeats", opts.repeats, "timing repeats")->capture_default_str();
  subs.push_back({bench, misty::cmd_bench});

  auto* simulate = app.add_subcommand("simulate", "closed-loop episodes over a scenario set");
  add_common(simulate, opts);
  simulate->add_option("scenarios", opts.scenario_path,
                       "scenario file or directory (default: <out>/scenarios)");
  simulate->add_option("--alpha", opts.alpha, "guidance scale");
  simulate->add_option("--k", opts.k, "proposals per replan");
  simulate->add_option("--mode", opts.mode, "agent model: nr (log replay) or r (reactive)")
      ->check(CLI::IsMember({"nr", "r"}))
      ->capture_default_str();
  subs.push_back({simulate, misty::cmd_simulate});

  auto* metrics = app.add_subcommand("metrics", "latent separation and guidance sweep tables");
  add_common(metrics, opts);
  metrics->add_option("--k", opts.k, "proposals per sweep point");
  subs.push_back({metrics, misty::cmd_metrics});

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    const RunConfig cfg = misty::load_cli_config(opts);
    for (const auto& sub : subs)
      if (sub.app->parsed()) return sub.run(cfg, opts);
    std::cerr << "error: no subcommand\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
