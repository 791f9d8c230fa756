#pragma once

#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "misty/closed_loop.hpp"
#include "misty/drift.hpp"

namespace misty {

// Parsed command-line state shared by every subcommand.
struct CliOptions {
  std::string config_path;            // empty: built-in defaults
  std::string out_dir = "out";
  std::optional<std::uint64_t> seed;  // overrides the config seed
  std::optional<double> alpha;
  std::optional<int> k;
  std::string mode = "nr";     // nr: log replay, r: reactive agents
  std::string scenario_path;   // infer / simulate input
  int repeats = 50;            // bench
};

// Loads --config (or defaults) and applies the --seed override. The seed is
// part of the config hash, so overriding it starts a distinct artifact line.
RunConfig load_cli_config(const CliOptions& opts);

// Each command returns a process exit code: 0 only when the work and its
// post-write self-checks all succeeded.
int cmd_synth(const RunConfig& cfg, const CliOptions& opts);
int cmd_train_vae(const RunConfig& cfg, const CliOptions& opts);
int cmd_build_dict(const RunConfig& cfg, const CliOptions& opts);
int cmd_fit_pca(const RunConfig& cfg, const CliOptions& opts);
int cmd_train_planner(const RunConfig& cfg, const CliOptions& opts);
int cmd_infer(const RunConfig& cfg, const CliOptions& opts);
int cmd_bench(const RunConfig& cfg, const CliOptions& opts);
int cmd_simulate(const RunConfig& cfg, const CliOptions& opts);
int cmd_metrics(const RunConfig& cfg, const CliOptions& opts);

// ---- artifact plumbing, shared with the test suites ----

std::string artifact_path(const std::string& out_dir, const std::string& name);

// Creates the out dir, then writes manifest.json on first use or refuses to
// proceed when the stored config hash disagrees with the current one.
void check_manifest(const RunConfig& cfg, const std::string& out_dir);

// Throws StateError naming the missing artifact and the command producing it.
void require_artifact(const std::string& path, const std::string& what,
                      const std::string& producer);

TrajVae load_vae(const RunConfig& cfg, const std::string& out_dir);
PcaHead load_pca_head(const RunConfig& cfg, const std::string& out_dir);

// Scenario files under a directory (sorted), or the single file itself.
std::vector<std::string> scenario_files(const std::string& path);

// ---- pipeline pieces the commands and the acceptance suite share ----

struct VaeTrainResult {
  VaeLosses final;  // mean losses of the last epoch
  SeparationReport separation;
  int epochs = 0;
};

VaeTrainResult train_vae_on_corpus(TrajVae& vae, const Corpus& corpus, const RunConfig& cfg,
                                   std::uint64_t seed);

struct PlannerTrainResult {
  double loss_initial = 0.0;  // mean loss of the first up-to-10 live steps
  double loss_final = 0.0;    // mean loss of the last up-to-10 live steps
  double loss_min = 0.0;
  int steps = 0;
  int skipped = 0;
  std::vector<DriftStepReport> log;
};

// lr_override > 0 replaces the configured learning rate for this call, so a
// caller can run a multi-phase schedule against one planner.
PlannerTrainResult train_planner_on_scenarios(Planner& planner,
                                              const std::vector<Scenario>& scenarios,
                                              const TrajVae& vae, const Dictionary& dict,
                                              const std::vector<Trajectory>& corpus_trajs,
                                              std::uint64_t seed, int steps,
                                              std::ostream* log_out = nullptr,
                                              double lr_override = 0.0);

struct AlphaSweepRow {
  double alpha = 0.0;
  double mean_dist_to_cond = 0.0;  // mean latent distance to the compliant-set mean
  double dispersion = 0.0;         // mean pairwise latent distance within the set
};

std::vector<AlphaSweepRow> alpha_sweep(const Planner& planner, const TrajVae& vae,
                                       const Scenario& s, const std::vector<double>& alphas,
                                       int k, std::uint64_t seed);

double trimmed_mean(std::vector<double> xs, double trim_frac = 0.05);

}  // namespace misty
