#include "misty/planner.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

namespace misty {

using json = nlohmann::ordered_json;

std::string ProposalSet::to_json() const {
  json j;
  j["schema_version"] = schema_version;
  j["alpha"] = alpha;
  j["seed"] = seed;
  j["nfe"] = nfe;
  json lat = json::array();
  for (Index i = 0; i < latents.rows(); ++i) {
    json row = json::array();
    for (Index c = 0; c < latents.cols(); ++c) row.push_back(latents(i, c));
    lat.push_back(std::move(row));
  }
  j["latents"] = std::move(lat);
  json trs = json::array();
  for (const auto& t : trajectories) {
    json tr = json::array();
    for (Index i = 0; i < t.rows(); ++i) tr.push_back({t(i, 0), t(i, 1)});
    trs.push_back(std::move(tr));
  }
  j["trajectories"] = std::move(trs);
  return j.dump(2) + "\n";
}

ProposalSet ProposalSet::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("proposals: ") + e.what());
  }
  try {
    ProposalSet p;
    p.schema_version = j.at("schema_version").get<int>();
    if (p.schema_version != 1) throw ParseError("proposals: unsupported schema_version");
    p.alpha = j.at("alpha").get<double>();
    p.seed = j.at("seed").get<std::uint64_t>();
    p.nfe = j.at("nfe").get<int>();
    const auto& lat = j.at("latents");
    if (!lat.empty()) {
      p.latents.resize(Index(lat.size()), Index(lat[0].size()));
      for (std::size_t i = 0; i < lat.size(); ++i)
        for (std::size_t c = 0; c < lat[i].size(); ++c)
          p.latents(Index(i), Index(c)) = lat[i][c].get<double>();
    }
    for (const auto& tr : j.at("trajectories")) {
      Trajectory t(Index(tr.size()), 2);
      for (std::size_t i = 0; i < tr.size(); ++i) {
        t(Index(i), 0) = tr[i].at(0).get<double>();
        t(Index(i), 1) = tr[i].at(1).get<double>();
      }
      p.trajectories.push_back(std::move(t));
    }
    return p;
  } catch (const json::exception& e) {
    throw ParseError(std::string("proposals: ") + e.what());
  }
}

ProposalSet ProposalSet::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("proposals: cannot read " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return from_json(ss.str());
}

void ProposalSet::save(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw IoError("proposals: cannot write " + path);
  os << to_json();
}

Planner::Planner(const RunConfig& cfg) : cfg_(cfg) {
  Rng rng(cfg.seed);
  encoder_ = SceneEncoder(cfg, rng);
  decoder_ = Decoder(cfg, rng);
}

void Planner::encode_tokens(const Scenario& s, Matrix& agent, Matrix& map) const {
  VectorizedScene scene = vectorize(s, cfg_);
  Tape t(false);
  SceneTokens tokens = encoder_.encode(t, scene);
  agent = t.value(tokens.agent);
  map = t.value(tokens.map);
}

Matrix Planner::decode_latents(const Matrix& noise, const Matrix& agent, const Matrix& map,
                               double alpha) const {
  return decoder_.forward_plain(noise, agent, map, alpha);
}

namespace {

ProposalSet package(const Matrix& y, const PcaHead& pca, double alpha, std::uint64_t seed,
                    int nfe) {
  Matrix flat = pca_decode(y, pca);
  for (Index i = 0; i < flat.rows(); ++i)
    if (!flat.row(i).allFinite())
      throw GenerationError("generate: non-finite trajectory at proposal " + std::to_string(i));
  ProposalSet out;
  out.alpha = alpha;
  out.seed = seed;
  out.nfe = nfe;
  out.latents = y;
  out.trajectories.reserve(std::size_t(flat.rows()));
  for (Index i = 0; i < flat.rows(); ++i)
    out.trajectories.push_back(unflatten_traj(flat.row(i)));
  return out;
}

}  // namespace

ProposalSet Planner::generate(const Scenario& s, int k, double alpha, std::uint64_t seed) const {
  if (k < 1) throw InputError("generate: k must be >= 1");
  if (!pca_.fitted) throw StateError("generate: PCA head not fitted");
  Matrix agent, map;
  encode_tokens(s, agent, map);
  Rng rng(seed);
  Matrix noise = rng.normal_matrix(k, cfg_.hidden);
  Matrix y = decoder_.forward_plain(noise, agent, map, alpha);
  last_nfe_ = 1;
  return package(y, pca_, alpha, seed, 1);
}

ProposalSet Planner::generate_iterative(const Scenario& s, int k, double alpha,
                                        std::uint64_t seed, int steps) const {
  if (k < 1) throw InputError("generate: k must be >= 1");
  if (steps < 1) throw InputError("generate: steps must be >= 1");
  if (!pca_.fitted) throw StateError("generate: PCA head not fitted");
  Matrix agent, map;
  encode_tokens(s, agent, map);
  Rng rng(seed);
  Matrix noise = rng.normal_matrix(k, cfg_.hidden);
  Matrix y;
  for (int i = 0; i < steps; ++i) {
    y = decoder_.forward_plain(noise, agent, map, alpha);
    if (i + 1 < steps) {
      // Variance-preserving re-mix, standing in for one solver step.
      Matrix fresh = rng.normal_matrix(k, cfg_.hidden);
      noise = 0.9 * noise + std::sqrt(1.0 - 0.81) * fresh;
    }
  }
  last_nfe_ = steps;
  return package(y, pca_, alpha, seed, steps);
}

void Planner::collect(NamedParams& out) {
  encoder_.collect(out);
  decoder_.collect(out);
}

void Planner::save(const std::string& path) const {
  Checkpoint ck;
  ck.config_hash = cfg_.hash();
  NamedParams params;
  const_cast<Planner*>(this)->collect(params);
  ck.put_all(params);
  Matrix fitted(1, 1);
  fitted(0, 0) = pca_.fitted ? 1.0 : 0.0;
  ck.put("pca/fitted", fitted);
  if (pca_.fitted) {
    ck.put("pca/w", pca_.w);
    Matrix mu = pca_.mu;
    ck.put("pca/mu", mu);
  }
  ck.save(path);
}

Planner Planner::load(const std::string& path, const RunConfig& cfg) {
  Checkpoint ck = Checkpoint::load(path);
  if (ck.config_hash != cfg.hash())
    throw IoError("planner checkpoint " + path + ": config hash mismatch (checkpoint " +
                  std::to_string(ck.config_hash) + ", config " + std::to_string(cfg.hash()) +
                  ")");
  Planner p(cfg);
  NamedParams params;
  p.collect(params);
  ck.load_all(params);
  if (ck.get("pca/fitted")(0, 0) != 0.0) {
    p.pca_.w = ck.get("pca/w");
    p.pca_.mu = ck.get("pca/mu").row(0);
    p.pca_.fitted = true;
  }
  return p;
}

}  // namespace misty
