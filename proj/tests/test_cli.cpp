#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"
#include "json.hpp"
#include "misty/commands.hpp"

using namespace misty;
namespace fs = std::filesystem;

namespace {

RunConfig small_config() {
  RunConfig cfg;
  cfg.hidden = 32;
  cfg.heads = 2;
  cfg.enc_depth_map = 1;
  cfg.enc_depth_agent = 1;
  cfg.enc_depth_global = 1;
  cfg.point_extra_blocks = 0;
  cfg.mixer_depth = 2;
  cfg.mixer_token_hidden = 8;
  cfg.d_pca = 8;
  cfg.latent = 16;
  cfg.vae_hidden = 32;
  cfg.vae_blocks = 1;
  cfg.vae_epochs = 3;
  cfg.vae_batch = 32;
  cfg.k_train = 4;
  cfg.train_steps = 8;
  cfg.unc_per_class = 1;
  cfg.n_fine = 24;
  cfg.n_macro = 8;
  cfg.corpus_size = 200;
  cfg.n_scenarios = 4;
  cfg.k_infer = 32;
  cfg.episode_ticks = 30;
  cfg.k_episode = 16;
  return cfg;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("misty_cli_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

std::string slurp(const std::string& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

CliOptions opts_for(const TempDir& dir) {
  CliOptions o;
  o.out_dir = dir.str();
  return o;
}

}  // namespace

TEST_CASE("synth writes deterministic artifacts") {
  RunConfig cfg = small_config();
  TempDir a("synth_a"), b("synth_b");
  REQUIRE(cmd_synth(cfg, opts_for(a)) == 0);
  REQUIRE(cmd_synth(cfg, opts_for(b)) == 0);
  CHECK(slurp(a.str() + "/corpus.json") == slurp(b.str() + "/corpus.json"));
  CHECK(slurp(a.str() + "/scenarios/scenario_000.json") ==
        slurp(b.str() + "/scenarios/scenario_000.json"));
  CHECK(slurp(a.str() + "/manifest.json") == slurp(b.str() + "/manifest.json"));
}

TEST_CASE("artifacts survive a read-write cycle byte for byte") {
  RunConfig cfg = small_config();
  TempDir dir("rw");
  REQUIRE(cmd_synth(cfg, opts_for(dir)) == 0);

  const std::string corpus_path = dir.str() + "/corpus.json";
  Corpus::load(corpus_path).save(dir.str() + "/corpus2.json");
  CHECK(slurp(corpus_path) == slurp(dir.str() + "/corpus2.json"));

  const std::string scen_path = dir.str() + "/scenarios/scenario_001.json";
  Scenario::load(scen_path).save(dir.str() + "/scen2.json");
  CHECK(slurp(scen_path) == slurp(dir.str() + "/scen2.json"));
}

TEST_CASE("full pipeline completes with self-checks green") {
  RunConfig cfg = small_config();
  TempDir dir("pipe");
  CliOptions o = opts_for(dir);
  REQUIRE(cmd_synth(cfg, o) == 0);
  REQUIRE(cmd_train_vae(cfg, o) == 0);
  REQUIRE(cmd_build_dict(cfg, o) == 0);
  REQUIRE(cmd_fit_pca(cfg, o) == 0);
  REQUIRE(cmd_train_planner(cfg, o) == 0);

  CliOptions infer_o = o;
  infer_o.scenario_path = dir.str() + "/scenarios/scenario_000.json";
  infer_o.alpha = 0.5;
  REQUIRE(cmd_infer(cfg, infer_o) == 0);
  CHECK(fs::exists(dir.str() + "/proposals_a+0.50.json"));

  CliOptions bench_o = o;
  bench_o.repeats = 5;
  REQUIRE(cmd_bench(cfg, bench_o) == 0);
  CHECK(fs::exists(dir.str() + "/latency.csv"));

  REQUIRE(cmd_simulate(cfg, o) == 0);
  CHECK(fs::exists(dir.str() + "/episodes.jsonl"));
  CHECK(fs::exists(dir.str() + "/episodes.csv"));
  CHECK(fs::exists(dir.str() + "/traces/episode_000.jsonl"));

  REQUIRE(cmd_metrics(cfg, o) == 0);
  CHECK(fs::exists(dir.str() + "/separation.csv"));
  CHECK(fs::exists(dir.str() + "/alpha_sweep.csv"));

  auto rep = nlohmann::json::parse(slurp(dir.str() + "/vae_report.json"));
  CHECK(rep.contains("intra"));
  CHECK(rep.contains("inter"));
  CHECK(rep.contains("ratio"));
  CHECK(rep["ratio"].get<double>() > 0.0);

  auto bench_rep = nlohmann::json::parse(slurp(dir.str() + "/bench_report.json"));
  CHECK(bench_rep["speedup_vs_decoder"].get<double>() > 1.0);

  auto sim_rep = nlohmann::json::parse(slurp(dir.str() + "/simulate_report.json"));
  CHECK(sim_rep["failures"].get<int>() == 0);
  CHECK(sim_rep["completed"].get<int>() == cfg.n_scenarios);
}

TEST_CASE("vae training is reproducible across runs") {
  RunConfig cfg = small_config();
  TempDir a("vae_a"), b("vae_b");
  REQUIRE(cmd_synth(cfg, opts_for(a)) == 0);
  REQUIRE(cmd_synth(cfg, opts_for(b)) == 0);
  REQUIRE(cmd_train_vae(cfg, opts_for(a)) == 0);
  REQUIRE(cmd_train_vae(cfg, opts_for(b)) == 0);
  CHECK(slurp(a.str() + "/vae.ckpt") == slurp(b.str() + "/vae.ckpt"));
  auto ra = nlohmann::json::parse(slurp(a.str() + "/vae_report.json"));
  auto rb = nlohmann::json::parse(slurp(b.str() + "/vae_report.json"));
  CHECK(ra["final_losses"] == rb["final_losses"]);
  CHECK(ra["ratio"] == rb["ratio"]);
}

TEST_CASE("a config change is refused against an existing output directory") {
  RunConfig cfg = small_config();
  TempDir dir("refuse");
  REQUIRE(cmd_synth(cfg, opts_for(dir)) == 0);
  RunConfig other = cfg;
  other.seed = cfg.seed + 1;
  CHECK_THROWS_AS(cmd_synth(other, opts_for(dir)), IoError);
  CHECK_THROWS_AS(cmd_train_vae(other, opts_for(dir)), IoError);
}

TEST_CASE("train-planner without a vae names the missing checkpoint") {
  RunConfig cfg = small_config();
  TempDir dir("novae");
  REQUIRE(cmd_synth(cfg, opts_for(dir)) == 0);
  try {
    cmd_train_planner(cfg, opts_for(dir));
    FAIL("expected StateError");
  } catch (const StateError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("vae.ckpt") != std::string::npos);
    CHECK(msg.find("train-vae") != std::string::npos);
  }
}

TEST_CASE("infer requires a trained planner") {
  RunConfig cfg = small_config();
  TempDir dir("noplan");
  REQUIRE(cmd_synth(cfg, opts_for(dir)) == 0);
  CliOptions o = opts_for(dir);
  o.scenario_path = dir.str() + "/scenarios/scenario_000.json";
  CHECK_THROWS_AS(cmd_infer(cfg, o), StateError);
}

TEST_CASE("simulate isolates a broken scenario file") {
  RunConfig cfg = small_config();
  TempDir dir("broken");
  CliOptions o = opts_for(dir);
  REQUIRE(cmd_synth(cfg, o) == 0);
  REQUIRE(cmd_train_vae(cfg, o) == 0);
  REQUIRE(cmd_build_dict(cfg, o) == 0);
  REQUIRE(cmd_fit_pca(cfg, o) == 0);
  REQUIRE(cmd_train_planner(cfg, o) == 0);
  {
    std::ofstream bad(dir.str() + "/scenarios/scenario_zzz.json");
    bad << "{this is not a scenario";
  }
  CHECK(cmd_simulate(cfg, o) == 1);
  auto rep = nlohmann::json::parse(slurp(dir.str() + "/simulate_report.json"));
  CHECK(rep["failures"].get<int>() == 1);
  CHECK(rep["completed"].get<int>() == cfg.n_scenarios);

  bool saw_error_row = false;
  std::ifstream lines(dir.str() + "/episodes.jsonl");
  std::string line;
  while (std::getline(lines, line))
    if (line.find("error") != std::string::npos) saw_error_row = true;
  CHECK(saw_error_row);
}
