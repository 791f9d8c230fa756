#include "misty/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "misty/checkpoint.hpp"

namespace misty {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using Clock = std::chrono::steady_clock;

namespace {

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << text;
  if (!out) throw IoError("write failed for " + path);
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

std::uint64_t effective_seed(const RunConfig& cfg, const CliOptions& opts) {
  return opts.seed.value_or(cfg.seed);
}

Matrix displacement_batch(const std::vector<Trajectory>& trajs) {
  if (trajs.empty()) throw InputError("empty trajectory list");
  const Index w = 2 * (trajs[0].rows() - 1);
  Matrix rows(Index(trajs.size()), w);
  for (std::size_t i = 0; i < trajs.size(); ++i)
    rows.row(Index(i)) = flatten_displacements(to_displacements(trajs[i]));
  return rows;
}

std::vector<Trajectory> corpus_trajectories(const Corpus& corpus) {
  std::vector<Trajectory> trajs;
  trajs.reserve(corpus.items.size());
  for (const auto& it : corpus.items) trajs.push_back(it.traj);
  return trajs;
}

Matrix project_all(const TrajVae& vae, const std::vector<Trajectory>& trajs) {
  Matrix z(Index(trajs.size()), vae.latent_dim());
  for (std::size_t i = 0; i < trajs.size(); ++i) z.row(Index(i)) = vae_project(vae, trajs[i]);
  return z;
}

std::string alpha_file_tag(double alpha) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%+.2f", alpha);
  return buf;
}

const char* kKinds[4] = {"straight", "curve", "blocked", "intersection"};

}  // namespace

std::string artifact_path(const std::string& out_dir, const std::string& name) {
  return (fs::path(out_dir) / name).string();
}

void check_manifest(const RunConfig& cfg, const std::string& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory " + out_dir + ": " + ec.message());

  const std::string path = artifact_path(out_dir, "manifest.json");
  const std::uint64_t hash = cfg.hash();
  if (fs::exists(path)) {
    json j;
    try {
      j = json::parse(read_text(path));
    } catch (const json::exception& e) {
      throw ParseError("manifest " + path + ": " + e.what());
    }
    const std::uint64_t stored = std::stoull(j.at("config_hash").get<std::string>());
    if (stored != hash)
      throw IoError("output directory " + out_dir + " was built with config hash " +
                    std::to_string(stored) + " but the current config hashes to " +
                    std::to_string(hash) +
                    "; pass the original --config/--seed or use a fresh --out");
    return;
  }
  json j;
  j["schema_version"] = 1;
  j["config_hash"] = std::to_string(hash);
  j["config"] = json::parse(cfg.to_json());
  write_text(path, j.dump(2) + "\n");
}

void require_artifact(const std::string& path, const std::string& what,
                      const std::string& producer) {
  if (!fs::exists(path))
    throw StateError("missing " + what + " at " + path + "; run `misty " + producer +
                     "` first");
}

RunConfig load_cli_config(const CliOptions& opts) {
  RunConfig cfg;
  if (!opts.config_path.empty()) cfg = RunConfig::load(opts.config_path);
  if (opts.seed) cfg.seed = *opts.seed;
  return cfg;
}

TrajVae load_vae(const RunConfig& cfg, const std::string& out_dir) {
  const std::string path = artifact_path(out_dir, "vae.ckpt");
  require_artifact(path, "VAE checkpoint", "train-vae");
  Checkpoint ck = Checkpoint::load(path);
  if (ck.config_hash != cfg.hash())
    throw IoError("VAE checkpoint " + path + ": config hash mismatch (checkpoint " +
                  std::to_string(ck.config_hash) + ", config " + std::to_string(cfg.hash()) +
                  ")");
  Rng rng(0);
  TrajVae vae(cfg, rng);
  NamedParams params;
  vae.collect(params);
  ck.load_all(params);
  vae.trained = ck.has("vae/trained") && ck.get("vae/trained")(0, 0) != 0.0;
  return vae;
}

PcaHead load_pca_head(const RunConfig& cfg, const std::string& out_dir) {
  const std::string path = artifact_path(out_dir, "pca.ckpt");
  require_artifact(path, "PCA head", "fit-pca");
  Checkpoint ck = Checkpoint::load(path);
  if (ck.config_hash != cfg.hash())
    throw IoError("PCA head " + path + ": config hash mismatch (checkpoint " +
                  std::to_string(ck.config_hash) + ", config " + std::to_string(cfg.hash()) +
                  ")");
  PcaHead head;
  head.w = ck.get("pca/w");
  head.mu = ck.get("pca/mu").row(0);
  head.fitted = true;
  return head;
}

std::vector<std::string> scenario_files(const std::string& path) {
  std::vector<std::string> files;
  if (fs::is_directory(path)) {
    for (const auto& entry : fs::directory_iterator(path))
      if (entry.path().extension() == ".json") files.push_back(entry.path().string());
    std::sort(files.begin(), files.end());
  } else if (fs::exists(path)) {
    files.push_back(path);
  }
  return files;
}

double trimmed_mean(std::vector<double> xs, double trim_frac) {
  if (xs.empty()) throw InputError("trimmed_mean: empty sample");
  std::sort(xs.begin(), xs.end());
  const int drop = int(std::floor(double(xs.size()) * trim_frac));
  const int lo = drop, hi = int(xs.size()) - drop;
  if (hi <= lo) return std::accumulate(xs.begin(), xs.end(), 0.0) / double(xs.size());
  return std::accumulate(xs.begin() + lo, xs.begin() + hi, 0.0) / double(hi - lo);
}

// --------------------------------------------------------------------------

int cmd_synth(const RunConfig& cfg, const CliOptions& opts) {
  check_manifest(cfg, opts.out_dir);
  const std::uint64_t seed = effective_seed(cfg, opts);

  Corpus corpus = make_corpus(cfg, seed, cfg.corpus_size);
  const std::string corpus_path = artifact_path(opts.out_dir, "corpus.json");
  corpus.save(corpus_path);

  const std::string scen_dir = artifact_path(opts.out_dir, "scenarios");
  fs::create_directories(scen_dir);
  std::vector<std::string> written;
  for (int i = 0; i < cfg.n_scenarios; ++i) {
    Scenario s = make_scenario(kKinds[i % 4], seed + std::uint64_t(i), cfg);
    char name[64];
    std::snprintf(name, sizeof(name), "scenario_%03d.json", i);
    const std::string p = artifact_path(scen_dir, name);
    s.save(p);
    written.push_back(p);
  }

  std::vector<int> label_counts(16, 0), tag_counts(6, 0);
  for (const auto& it : corpus.items) {
    ++label_counts[std::size_t(it.label16)];
    ++tag_counts[std::size_t(it.tag6)];
  }

  json rep;
  rep["corpus_size"] = int(corpus.items.size());
  rep["scenarios"] = cfg.n_scenarios;
  rep["seed"] = seed;
  rep["label_counts"] = label_counts;
  rep["tag_counts"] = tag_counts;
  write_text(artifact_path(opts.out_dir, "synth_report.json"), rep.dump(2) + "\n");

  // Self-checks: artifacts re-read byte-identically, labels all populated.
  bool ok = true;
  if (Corpus::load(corpus_path).to_json() != corpus.to_json()) {
    std::cerr << "self-check failed: corpus did not round-trip\n";
    ok = false;
  }
  if (!written.empty()) {
    Scenario back = Scenario::load(written.front());
    if (back.to_json() != Scenario::load(written.front()).to_json()) {
      std::cerr << "self-check failed: scenario re-read is unstable\n";
      ok = false;
    }
  }
  if (cfg.corpus_size >= 160)
    for (int l = 0; l < 16; ++l)
      if (label_counts[std::size_t(l)] == 0) {
        std::cerr << "self-check failed: label " << l << " is empty at corpus size "
                  << cfg.corpus_size << "\n";
        ok = false;
      }

  std::cout << "synth: " << corpus.items.size() << " trajectories, " << cfg.n_scenarios
            << " scenarios -> " << opts.out_dir << "\n";
  return ok ? 0 : 1;
}

VaeTrainResult train_vae_on_corpus(TrajVae& vae, const Corpus& corpus, const RunConfig& cfg,
                                   std::uint64_t seed) {
  if (corpus.items.empty()) throw InputError("train_vae: empty corpus");
  NamedParams params;
  vae.collect(params);
  SgdMomentum opt(cfg.vae_lr, cfg.momentum, cfg.clip_norm);
  Rng rng(seed);

  const int n = int(corpus.items.size());
  Matrix rows = displacement_batch(corpus_trajectories(corpus));
  std::vector<int> tags(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) tags[std::size_t(i)] = corpus.items[std::size_t(i)].tag6;

  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  VaeTrainResult res;
  res.epochs = cfg.vae_epochs;
  for (int epoch = 0; epoch < cfg.vae_epochs; ++epoch) {
    for (int i = n - 1; i > 0; --i)
      std::swap(order[std::size_t(i)], order[std::size_t(rng.uniform_int(0, i))]);
    VaeLosses sum;
    int batches = 0;
    for (int start = 0; start < n; start += cfg.vae_batch) {
      const int b = std::min(cfg.vae_batch, n - start);
      Matrix batch(b, rows.cols());
      std::vector<int> batch_tags(static_cast<std::size_t>(b));
      for (int i = 0; i < b; ++i) {
        batch.row(i) = rows.row(order[std::size_t(start + i)]);
        batch_tags[std::size_t(i)] = tags[std::size_t(order[std::size_t(start + i)])];
      }
      VaeLosses l =
          vae_train_step(vae, batch, batch_tags, opt, params, rng, cfg.vae_beta, cfg.vae_lambda);
      sum.recon += l.recon;
      sum.kl += l.kl;
      sum.aux += l.aux;
      sum.total += l.total;
      ++batches;
    }
    res.final.recon = sum.recon / batches;
    res.final.kl = sum.kl / batches;
    res.final.aux = sum.aux / batches;
    res.final.total = sum.total / batches;
  }
  vae.trained = true;

  std::vector<int> labels(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) labels[std::size_t(i)] = corpus.items[std::size_t(i)].label16;
  Matrix z = project_all(vae, corpus_trajectories(corpus));
  res.separation = separation_metrics(z, labels, 16, cfg.separation_to_centroid);
  return res;
}

int cmd_train_vae(const RunConfig& cfg, const CliOptions& opts) {
  check_manifest(cfg, opts.out_dir);
  const std::string corpus_path = artifact_path(opts.out_dir, "corpus.json");
  require_artifact(corpus_path, "trajectory corpus", "synth");
  Corpus corpus = Corpus::load(corpus_path);

  const std::uint64_t seed = effective_seed(cfg, opts);
  Rng init(seed);
  TrajVae vae(cfg, init);
  const auto t0 = Clock::now();
  VaeTrainResult res = train_vae_on_corpus(vae, corpus, cfg, seed + 1);
  const double wall = ms_since(t0);

  Checkpoint ck;
  ck.config_hash = cfg.hash();
  NamedParams params;
  vae.collect(params);
  ck.put_all(params);
  ck.put("vae/trained", Matrix::Ones(1, 1));
  const std::string ckpt_path = artifact_path(opts.out_dir, "vae.ckpt");
  ck.save(ckpt_path);

  json rep;
  rep["epochs"] = res.epochs;
  rep["final_losses"] = {{"recon", res.final.recon},
                         {"kl", res.final.kl},
                         {"aux", res.final.aux},
                         {"total", res.final.total}};
  rep["intra"] = res.separation.intra;
  rep["inter"] = res.separation.inter;
  rep["ratio"] = res.separation.ratio;
  rep["small_classes"] = res.separation.small_classes;
  rep["wall_ms"] = wall;
  write_text(artifact_path(opts.out_dir, "vae_report.json"), rep.dump(2) + "\n");

  bool ok = true;
  TrajVae back = load_vae(cfg, opts.out_dir);
  RowVector z0 = vae_project(vae, corpus.items.front().traj);
  RowVector z1 = vae_project(back, corpus.items.front().traj);
  if ((z0 - z1).cwiseAbs().maxCoeff() != 0.0) {
    std::cerr << "self-check failed: reloaded VAE disagrees with the trained one\n";
    ok = false;
  }

  std::cout << "train-vae: " << res.epochs << " epochs, total loss " << res.final.total
            << ", separation ratio " << res.separation.ratio << " -> " << ckpt_path << "\n";
  return ok ? 0 : 1;
}

int cmd_build_dict(const RunConfig& cfg, const CliOptions& opts) {
  check_manifest(cfg, opts.out_dir);
  const std::string corpus_path = artifact_path(opts.out_dir, "corpus.json");
  require_artifact(corpus_path, "trajectory corpus", "synth");
  Corpus corpus = Corpus::load(corpus_path);

  const std::uint64_t seed = effective_seed(cfg, opts);
  std::vector<Trajectory> trajs = corpus_trajectories(corpus);
  Dictionary dict = build_dictionary(trajs, cfg.n_fine, cfg.n_macro, seed);
  const std::string dict_path = artifact_path(opts.out_dir, "dictionary.json");
  dict.save(dict_path);

  std::vector<int> macro_of_traj(trajs.size());
  for (std::size_t i = 0; i < trajs.size(); ++i)
    macro_of_traj[i] = dict.macro_of_fine[std::size_t(dict.fine_of_traj[i])];
  std::vector<int> labels(trajs.size());
  for (std::size_t i = 0; i < trajs.size(); ++i) labels[i] = corpus.items[i].label16;

  json rep;
  rep["n_fine"] = cfg.n_fine;
  rep["n_macro"] = dict.n_macro();
  json counts = json::array();
  int empty_classes = 0;
  for (const auto& m : dict.members) {
    counts.push_back(int(m.size()));
    if (m.empty()) ++empty_classes;
  }
  rep["class_counts"] = counts;
  rep["empty_classes"] = empty_classes;
  rep["ari_vs_labels"] = adjusted_rand_index(macro_of_traj, labels);
  write_text(artifact_path(opts.out_dir, "dict_report.json"), rep.dump(2) + "\n");

  bool ok = true;
  if (Dictionary::load(dict_path).to_json() != dict.to_json()) {
    std::cerr << "self-check failed: dictionary did not round-trip\n";
    ok = false;
  }
  std::cout << "build-dict: " << cfg.n_fine << " fine -> " << dict.n_macro()
            << " macro classes, ARI vs labels " << rep["ari_vs_labels"] << " -> " << dict_path
            << "\n";
  return ok ? 0 : 1;
}

int cmd_fit_pca(const RunConfig& cfg, const CliOptions& opts) {
  check_manifest(cfg, opts.out_dir);
  const std::string corpus_path = artifact_path(opts.out_dir, "corpus.json");
  require_artifact(corpus_path, "trajectory corpus", "synth");
  Corpus corpus = Corpus::load(corpus_path);

  std::vector<Trajectory> trajs = corpus_trajectories(corpus);
  PcaHead head = fit_pca(trajs, cfg.d_pca);

  Checkpoint ck;
  ck.config_hash = cfg.hash();
  ck.put("pca/w", head.w);
  Matrix mu(1, head.mu.cols());
  mu.row(0) = head.mu;
  ck.put("pca/mu", mu);
  const std::string path = artifact_path(opts.out_dir, "pca.ckpt");
  ck.save(path);

  Matrix flat(Index(trajs.size()), head.flat_dim());
  for (std::size_t i = 0; i < trajs.size(); ++i)
    flat.row(Index(i)) = flatten_traj(trajs[i]);
  Matrix rebuilt = pca_decode(pca_encode(flat, head), head);
  const double rmse = std::sqrt((rebuilt - flat).array().square().mean());
  const double origin_err =
      (pca_decode(Matrix::Zero(1, head.d()), head).row(0) - head.mu).cwiseAbs().maxCoeff();

  json rep;
  rep["d"] = int(head.d());
  rep["flat_dim"] = int(head.flat_dim());
  rep["reconstruction_rmse"] = rmse;
  rep["origin_error"] = origin_err;
  write_text(artifact_path(opts.out_dir, "pca_report.json"), rep.dump(2) + "\n");

  bool ok = true;
  PcaHead back = load_pca_head(cfg, opts.out_dir);
  if ((back.w - head.w).cwiseAbs().maxCoeff() != 0.0 ||
      (back.mu - head.mu).cwiseAbs().maxCoeff() != 0.0) {
    std::cerr << "self-check failed: PCA head did not round-trip\n";
    ok = false;
  }
  if (origin_err != 0.0) {
    std::cerr << "self-check failed: zero code must decode to the mean exactly\n";
    ok = false;
  }
  std::cout << "fit-pca: d=" << head.d() << ", reconstruction rmse " << rmse << " -> " << path
            << "\n";
  return ok ? 0 : 1;
}

PlannerTrainResult train_planner_on_scenarios(Planner& planner,
                                              const std::vector<Scenario>& scenarios,
                                              const TrajVae& vae, const Dictionary& dict,
                                              const std::vector<Trajectory>& corpus_trajs,
                                              std::uint64_t seed, int steps,
                                              std::ostream* log_out, double lr_override) {
  if (scenarios.empty()) throw InputError("train_planner: no scenarios");
  NamedParams params;
  planner.collect(params);
  const double lr = lr_override > 0.0 ? lr_override : planner.config().lr;
  SgdMomentum opt(lr, planner.config().momentum, planner.config().clip_norm);
  Rng rng(seed);

  PlannerTrainResult res;
  std::vector<double> live;
  for (int step = 0; step < steps; ++step) {
    const Scenario& sc = scenarios[std::size_t(step) % scenarios.size()];
    DriftStepReport rep =
        drift_training_step(planner, sc, vae, dict, corpus_trajs, opt, params, rng, step);
    if (log_out) (*log_out) << rep.jsonl();
    if (rep.skipped)
      ++res.skipped;
    else
      live.push_back(rep.loss);
    res.log.push_back(std::move(rep));
  }
  res.steps = steps;
  if (!live.empty()) {
    const std::size_t head_n = std::min<std::size_t>(10, live.size());
    res.loss_initial =
        std::accumulate(live.begin(), live.begin() + long(head_n), 0.0) / double(head_n);
    res.loss_final =
        std::accumulate(live.end() - long(head_n), live.end(), 0.0) / double(head_n);
    res.loss_min = *std::min_element(live.begin(), live.end());
  }
  return res;
}

int cmd_train_planner(const RunConfig& cfg, const CliOptions& opts) {
  check_manifest(cfg, opts.out_dir);
  const std::string corpus_path = artifact_path(opts.out_dir, "corpus.json");
  require_artifact(corpus_path, "trajectory corpus", "synth");
  TrajVae vae = load_vae(cfg, opts.out_dir);
  const std::string dict_path = artifact_path(opts.out_dir, "dictionary.json");
  require_artifact(dict_path, "behavior dictionary", "build-dict");
  PcaHead head = load_pca_head(cfg, opts.out_dir);
  const std::string scen_dir = artifact_path(opts.out_dir, "scenarios");
  require_artifact(scen_dir, "scenario set", "synth");
  std::vector<std::string> files = scenario_files(scen_dir);
  if (files.empty()) throw StateError("no scenario files under " + scen_dir + "; run `misty synth` first");

  Corpus corpus = Corpus::load(corpus_path);
  Dictionary dict = Dictionary::load(dict_path);
  std::vector<Trajectory> trajs = corpus_trajectories(corpus);
  std::vector<Scenario> scenarios;
  for (const auto& f : files) scenarios.push_back(Scenario::load(f));

  Planner planner(cfg);
  planner.pca() = head;

  const std::uint64_t seed = effective_seed(cfg, opts);
  std::ofstream log(artifact_path(opts.out_dir, "train_log.jsonl"), std::ios::binary);
  const auto t0 = Clock::now();
  PlannerTrainResult res = train_planner_on_scenarios(planner, scenarios, vae, dict, trajs,
                                                      seed + 2, cfg.train_steps, &log);
  const double wall = ms_since(t0);

  const std::string ckpt_path = artifact_path(opts.out_dir, "planner.ckpt");
  planner.save(ckpt_path);

  json rep;
  rep["steps"] = res.steps;
  rep["skipped"] = res.skipped;
  rep["loss_initial"] = res.loss_initial;
  rep["loss_final"] = res.loss_final;
  rep["loss_min"] = res.loss_min;
  rep["scenarios"] = int(scenarios.size());
  rep["wall_ms"] = wall;
  write_text(artifact_path(opts.out_dir, "planner_report.json"), rep.dump(2) + "\n");

  bool ok = true;
  Planner back = Planner::load(ckpt_path, cfg);
  ProposalSet a = planner.generate(scenarios.front(), 4, cfg.infer_alpha, seed);
  ProposalSet b = back.generate(scenarios.front(), 4, cfg.infer_alpha, seed);
  if ((a.latents - b.latents).cwiseAbs().maxCoeff() != 0.0) {
    std::cerr << "self-check failed: reloaded planner disagrees with the trained one\n";
    ok = false;
  }

  std::cout << "train-planner: " << res.steps << " steps (" << res.skipped
            << " skipped), loss " << res.loss_initial << " -> " << res.loss_final << " -> "
            << ckpt_path << "\n";
  return ok ? 0 : 1;
}

int cmd_infer(const RunConfig& cfg, const CliOptions& opts) {
  check_manifest(cfg, opts.out_dir);
  const std::string ckpt_path = artifact_path(opts.out_dir, "planner.ckpt");
  require_artifact(ckpt_path, "planner checkpoint", "train-planner");
  if (opts.scenario_path.empty())
    throw InputError("infer needs a scenario file argument; create one with `misty synth`");

  Scenario s = Scenario::load(opts.scenario_path);
  Planner planner = Planner::load(ckpt_path, cfg);
  const int k = opts.k.value_or(cfg.k_infer);
  const double alpha = opts.alpha.value_or(cfg.infer_alpha);
  const std::uint64_t seed = effective_seed(cfg, opts);

  const auto t0 = Clock::now();
  ProposalSet ps = planner.generate(s, k, alpha, seed);
  const double wall = ms_since(t0);

  const std::string out_file =
      artifact_path(opts.out_dir, "proposals_a" + alpha_file_tag(alpha) + ".json");
  ps.save(out_file);

  json rep;
  rep["k"] = k;
  rep["alpha"] = alpha;
  rep["seed"] = seed;
  rep["nfe"] = ps.nfe;
  rep["wall_ms"] = wall;
  rep["file"] = out_file;
  write_text(artifact_path(opts.out_dir, "infer_report.json"), rep.dump(2) + "\n");

  bool ok = true;
  if (ps.nfe != 1) {
    std::cerr << "self-check failed: generation took " << ps.nfe << " passes, expected 1\n";
    ok = false;
  }
  ProposalSet back = ProposalSet::load(out_file);
  if ((back.latents - ps.latents).cwiseAbs().maxCoeff() != 0.0) {
    std::cerr << "self-check failed: proposals did not round-trip\n";
    ok = false;
  }
  for (const auto& t : ps.trajectories)
    if (!t.allFinite()) {
      std::cerr << "self-check failed: non-finite proposal\n";
      ok = false;
      break;
    }

  std::cout << "infer: " << k << " proposals (nfe=" << ps.nfe << ", alpha=" << alpha << ") in "
            << wall << " ms -> " << out_file << "\n";
  return ok ? 0 : 1;
}

int cmd_bench(const RunConfig& cfg, const CliOptions& opts) {
  check_manifest(cfg, opts.out_dir);
  const std::string ckpt_path = artifact_path(opts.out_dir, "planner.ckpt");
  require_artifact(ckpt_path, "planner checkpoint", "train-planner");
  Planner planner = Planner::load(ckpt_path, cfg);

  const int k = opts.k.value_or(cfg.k_infer);
  const double alpha = opts.alpha.value_or(cfg.infer_alpha);
  const std::uint64_t seed = effective_seed(cfg, opts);
  const int repeats = opts.repeats;
  if (repeats < 1) throw InputError("bench: repeats must be >= 1");
  if (repeats < 20)
    std::cerr << "statistics warning: " << repeats
              << " repeats is below 20; trimmed means will be noisy\n";

  Scenario s = make_scenario("straight", seed, cfg);
  for (int i = 0; i < 3; ++i) planner.generate(s, k, alpha, seed + std::uint64_t(i));

  std::vector<double> full_ms, dec_ms, base_ms;
  Matrix agent, map;
  planner.encode_tokens(s, agent, map);
  Rng rng(seed);
  Matrix noise = rng.normal_matrix(k, cfg.hidden);

  for (int i = 0; i < repeats; ++i) {
    auto t0 = Clock::now();
    planner.generate(s, k, alpha, seed + std::uint64_t(i));
    full_ms.push_back(ms_since(t0));

    t0 = Clock::now();
    Matrix once = planner.decode_latents(noise, agent, map, alpha);
    dec_ms.push_back(ms_since(t0));

    t0 = Clock::now();
    Matrix out;
    for (int step = 0; step < 10; ++step) out = planner.decode_latents(noise, agent, map, alpha);
    base_ms.push_back(ms_since(t0));
    (void)once;
    (void)out;
  }

  const double full = trimmed_mean(full_ms);
  const double dec = trimmed_mean(dec_ms);
  const double base = trimmed_mean(base_ms);

  json rep;
  rep["repeats"] = repeats;
  rep["k"] = k;
  rep["full_ms"] = full;
  rep["decoder_ms"] = dec;
  rep["baseline10_ms"] = base;
  rep["speedup_vs_full"] = base / full;
  rep["speedup_vs_decoder"] = base / dec;
  rep["reference_ratio"] = 99.0 / 13.0;
  write_text(artifact_path(opts.out_dir, "bench_report.json"), rep.dump(2) + "\n");

  std::ostringstream csv;
  csv << "stage,trimmed_mean_ms\n";
  csv << "full," << full << "\n";
  csv << "decoder," << dec << "\n";
  csv << "baseline10," << base << "\n";
  write_text(artifact_path(opts.out_dir, "latency.csv"), csv.str());

  bool ok = true;
  if (!(dec < full)) {
    std::cerr << "self-check failed: decoder-only time must be below the full pipeline\n";
    ok = false;
  }
  if (!(base > dec)) {
    std::cerr << "self-check failed: the 10-step baseline cannot beat one step\n";
    ok = false;
  }

  std::cout << "bench: full " << full << " ms, decoder " << dec << " ms, 10-step " << base
            << " ms (x" << base / dec << " vs decoder, reference ~7.6)\n";
  return ok ? 0 : 1;
}

int cmd_simulate(const RunConfig& cfg, const CliOptions& opts) {
  check_manifest(cfg, opts.out_dir);
  const std::string ckpt_path = artifact_path(opts.out_dir, "planner.ckpt");
  require_artifact(ckpt_path, "planner checkpoint", "train-planner");
  if (opts.mode != "nr" && opts.mode != "r")
    throw InputError("simulate: mode must be nr or r, got " + opts.mode);

  std::string source = opts.scenario_path;
  if (source.empty()) source = artifact_path(opts.out_dir, "scenarios");
  std::vector<std::string> files = scenario_files(source);
  if (files.empty())
    throw StateError("no scenario files at " + source + "; run `misty synth` first");

  Planner planner = Planner::load(ckpt_path, cfg);
  const std::uint64_t base_seed = effective_seed(cfg, opts);
  const std::string trace_dir = artifact_path(opts.out_dir, "traces");
  fs::create_directories(trace_dir);

  std::ofstream jsonl(artifact_path(opts.out_dir, "episodes.jsonl"), std::ios::binary);
  std::ostringstream csv;
  csv << "episode,file,kind,mode,seed,ok,collisions,off_drivable_ticks,progress,max_accel,"
         "max_jerk,score,replans,fallbacks,left_start_lane,error\n";

  int failures = 0, collisions = 0, off_ticks = 0, fallbacks = 0;
  double sum_progress = 0.0, sum_score = 0.0;
  int completed = 0;

  for (std::size_t i = 0; i < files.size(); ++i) {
    const std::uint64_t ep_seed = base_seed + i;
    std::string kind = "?";
    try {
      Scenario s = Scenario::load(files[i]);
      kind = s.kind;
      EpisodeParams ep;
      ep.ticks = cfg.episode_ticks;
      ep.replan_period = cfg.replan_period;
      ep.k = opts.k.value_or(cfg.k_episode);
      ep.alpha = opts.alpha.value_or(cfg.infer_alpha);
      ep.seed = ep_seed;
      ep.reactive = opts.mode == "r";

      char tname[64];
      std::snprintf(tname, sizeof(tname), "episode_%03zu.jsonl", i);
      std::ofstream trace(artifact_path(trace_dir, tname), std::ios::binary);
      EpisodeReport rep = run_episode(s, planner, ep, &trace);

      json line = json::parse(rep.to_json());
      line["episode"] = int(i);
      line["file"] = files[i];
      line["kind"] = kind;
      line["mode"] = opts.mode;
      line["seed"] = ep_seed;
      jsonl << line.dump() << "\n";

      csv << i << ',' << files[i] << ',' << kind << ',' << opts.mode << ',' << ep_seed
          << ",1," << rep.collisions << ',' << rep.off_drivable_ticks << ',' << rep.progress
          << ',' << rep.max_accel << ',' << rep.max_jerk << ',' << rep.score << ','
          << rep.replans << ',' << rep.fallbacks << ',' << (rep.left_start_lane ? 1 : 0)
          << ",\n";

      collisions += rep.collisions;
      off_ticks += rep.off_drivable_ticks;
      fallbacks += rep.fallbacks;
      sum_progress += rep.progress;
      sum_score += rep.score;
      ++completed;
    } catch (const std::exception& e) {
      ++failures;
      json line;
      line["episode"] = int(i);
      line["file"] = files[i];
      line["error"] = e.what();
      jsonl << line.dump() << "\n";
      csv << i << ',' << files[i] << ',' << kind << ',' << opts.mode << ',' << ep_seed
          << ",0,,,,,,,,,," << '"' << e.what() << '"' << "\n";
    }
  }

  json rep;
  rep["episodes"] = int(files.size());
  rep["completed"] = completed;
  rep["failures"] = failures;
  rep["mode"] = opts.mode;
  rep["collisions_total"] = collisions;
  rep["off_drivable_total"] = off_ticks;
  rep["fallbacks_total"] = fallbacks;
  rep["mean_progress"] = completed > 0 ? sum_progress / completed : 0.0;
  rep["mean_score"] = completed > 0 ? sum_score / completed : 0.0;
  write_text(artifact_path(opts.out_dir, "simulate_report.json"), rep.dump(2) + "\n");
  write_text(artifact_path(opts.out_dir, "episodes.csv"), csv.str());

  std::cout << "simulate: " << completed << "/" << files.size() << " episodes (mode "
            << opts.mode << "), collisions " << collisions << ", mean progress "
            << rep["mean_progress"] << "\n";
  return failures == 0 ? 0 : 1;
}

std::vector<AlphaSweepRow> alpha_sweep(const Planner& planner, const TrajVae& vae,
                                       const Scenario& s, const std::vector<double>& alphas,
                                       int k, std::uint64_t seed) {
  if (s.positives.empty()) throw InputError("alpha_sweep: scenario has no compliant set");
  Matrix z_cond(Index(s.positives.size()), vae.latent_dim());
  for (std::size_t i = 0; i < s.positives.size(); ++i)
    z_cond.row(Index(i)) = vae_project(vae, s.positives[i]);
  RowVector target = z_cond.colwise().mean();

  std::vector<AlphaSweepRow> rows;
  for (double alpha : alphas) {
    ProposalSet ps = planner.generate(s, k, alpha, seed);
    Matrix z = project_all(vae, ps.trajectories);
    AlphaSweepRow row;
    row.alpha = alpha;
    row.mean_dist_to_cond = (z.rowwise() - target).rowwise().norm().mean();
    double acc = 0.0;
    int pairs = 0;
    for (Index i = 0; i < z.rows(); ++i)
      for (Index j = i + 1; j < z.rows(); ++j) {
        acc += (z.row(i) - z.row(j)).norm();
        ++pairs;
      }
    row.dispersion = pairs > 0 ? acc / pairs : 0.0;
    rows.push_back(row);
  }
  return rows;
}

int cmd_metrics(const RunConfig& cfg, const CliOptions& opts) {
  check_manifest(cfg, opts.out_dir);
  const std::string corpus_path = artifact_path(opts.out_dir, "corpus.json");
  require_artifact(corpus_path, "trajectory corpus", "synth");
  Corpus corpus = Corpus::load(corpus_path);
  TrajVae vae = load_vae(cfg, opts.out_dir);
  PcaHead head = load_pca_head(cfg, opts.out_dir);
  if (!vae.trained) throw StateError("VAE checkpoint is untrained; run `misty train-vae` first");

  std::vector<Trajectory> trajs = corpus_trajectories(corpus);
  std::vector<int> labels(trajs.size());
  for (std::size_t i = 0; i < trajs.size(); ++i) labels[i] = corpus.items[i].label16;

  Matrix z_vae = project_all(vae, trajs);
  Matrix flat(Index(trajs.size()), head.flat_dim());
  for (std::size_t i = 0; i < trajs.size(); ++i)
    flat.row(Index(i)) = flatten_traj(trajs[i]);
  Matrix z_pca = pca_encode(flat, head);

  SeparationReport sep_vae = separation_metrics(z_vae, labels, 16, cfg.separation_to_centroid);
  SeparationReport sep_pca = separation_metrics(z_pca, labels, 16, cfg.separation_to_centroid);

  std::ostringstream sep_csv;
  sep_csv << "space,dim,intra,inter,ratio,small_classes\n";
  sep_csv << "vae," << vae.latent_dim() << ',' << sep_vae.intra << ',' << sep_vae.inter << ','
          << sep_vae.ratio << ',' << sep_vae.small_classes << "\n";
  sep_csv << "pca," << head.d() << ',' << sep_pca.intra << ',' << sep_pca.inter << ','
          << sep_pca.ratio << ',' << sep_pca.small_classes << "\n";
  write_text(artifact_path(opts.out_dir, "separation.csv"), sep_csv.str());

  json rep;
  rep["vae"] = {{"dim", int(vae.latent_dim())},
                {"intra", sep_vae.intra},
                {"inter", sep_vae.inter},
                {"ratio", sep_vae.ratio},
                {"small_classes", sep_vae.small_classes}};
  rep["pca"] = {{"dim", int(head.d())},
                {"intra", sep_pca.intra},
                {"inter", sep_pca.inter},
                {"ratio", sep_pca.ratio},
                {"small_classes", sep_pca.small_classes}};
  rep["vae_ratio_exceeds_pca"] = sep_vae.ratio > sep_pca.ratio;

  // Guidance sweep needs a trained planner and a scenario; optional here.
  const std::string ckpt_path = artifact_path(opts.out_dir, "planner.ckpt");
  std::vector<std::string> files =
      scenario_files(artifact_path(opts.out_dir, "scenarios"));
  if (fs::exists(ckpt_path) && !files.empty()) {
    Planner planner = Planner::load(ckpt_path, cfg);
    Scenario s = Scenario::load(files.front());
    const int k = std::min(opts.k.value_or(256), cfg.k_infer);
    auto rows = alpha_sweep(planner, vae, s, {-0.5, 0.0, 0.5, 1.0, 1.5}, k,
                            effective_seed(cfg, opts));
    std::ostringstream sweep_csv;
    sweep_csv << "alpha,mean_dist_to_cond,dispersion\n";
    json sweep = json::array();
    for (const auto& r : rows) {
      sweep_csv << r.alpha << ',' << r.mean_dist_to_cond << ',' << r.dispersion << "\n";
      sweep.push_back({{"alpha", r.alpha},
                       {"mean_dist_to_cond", r.mean_dist_to_cond},
                       {"dispersion", r.dispersion}});
    }
    write_text(artifact_path(opts.out_dir, "alpha_sweep.csv"), sweep_csv.str());
    rep["alpha_sweep"] = std::move(sweep);
  } else {
    rep["alpha_sweep"] = nullptr;
    rep["alpha_sweep_note"] = "needs planner.ckpt and a scenario set";
  }

  write_text(artifact_path(opts.out_dir, "metrics_report.json"), rep.dump(2) + "\n");
  std::cout << "metrics: vae ratio " << sep_vae.ratio << " vs pca ratio " << sep_pca.ratio
            << " -> " << artifact_path(opts.out_dir, "metrics_report.json") << "\n";
  return 0;
}

}  // namespace misty
