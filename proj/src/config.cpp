#include "misty/config.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"
#include "misty/checkpoint.hpp"
#include "misty/scenario.hpp"

namespace misty {

using json = nlohmann::ordered_json;

namespace {

// Field list shared by writer and reader so they cannot drift apart.
template <typename Cfg, typename Fn>
void for_each_field(Cfg& c, Fn&& fn) {
  fn("schema_version", c.schema_version);
  fn("hidden", c.hidden);
  fn("heads", c.heads);
  fn("ffn_mult", c.ffn_mult);
  fn("enc_depth_map", c.enc_depth_map);
  fn("enc_depth_agent", c.enc_depth_agent);
  fn("enc_depth_global", c.enc_depth_global);
  fn("point_extra_blocks", c.point_extra_blocks);
  fn("mixer_depth", c.mixer_depth);
  fn("mixer_token_hidden", c.mixer_token_hidden);
  fn("mixer_channel_mult", c.mixer_channel_mult);
  fn("d_pca", c.d_pca);
  fn("latent", c.latent);
  fn("context_modulation", c.context_modulation);
  fn("max_map_polylines", c.max_map_polylines);
  fn("max_agent_polylines", c.max_agent_polylines);
  fn("max_vectors_per_polyline", c.max_vectors_per_polyline);
  fn("horizon", c.horizon);
  fn("dt", c.dt);
  fn("alpha_min", c.alpha_min);
  fn("alpha_max", c.alpha_max);
  fn("k_train", c.k_train);
  fn("train_steps", c.train_steps);
  fn("lr", c.lr);
  fn("momentum", c.momentum);
  fn("clip_norm", c.clip_norm);
  fn("drift_temperature", c.drift_temperature);
  fn("drift_norm_scale", c.drift_norm_scale);
  fn("drift_norm_cap", c.drift_norm_cap);
  fn("unc_per_class", c.unc_per_class);
  fn("vae_hidden", c.vae_hidden);
  fn("vae_blocks", c.vae_blocks);
  fn("vae_beta", c.vae_beta);
  fn("vae_lambda", c.vae_lambda);
  fn("vae_lr", c.vae_lr);
  fn("vae_epochs", c.vae_epochs);
  fn("vae_batch", c.vae_batch);
  fn("n_fine", c.n_fine);
  fn("n_macro", c.n_macro);
  fn("corpus_size", c.corpus_size);
  fn("n_scenarios", c.n_scenarios);
  fn("k_infer", c.k_infer);
  fn("infer_alpha", c.infer_alpha);
  fn("episode_ticks", c.episode_ticks);
  fn("replan_period", c.replan_period);
  fn("k_episode", c.k_episode);
  fn("lane_width", c.lane_width);
  fn("corridor_margin", c.corridor_margin);
  fn("ego_length", c.ego_length);
  fn("ego_width", c.ego_width);
  fn("idm_v0", c.idm_v0);
  fn("idm_t_headway", c.idm_t_headway);
  fn("idm_s0", c.idm_s0);
  fn("idm_a_max", c.idm_a_max);
  fn("idm_b_comf", c.idm_b_comf);
  fn("idm_b_max", c.idm_b_max);
  fn("idm_delta", c.idm_delta);
  fn("score_w_progress", c.score_w_progress);
  fn("score_w_safety", c.score_w_safety);
  fn("score_w_comfort", c.score_w_comfort);
  fn("score_progress_ref", c.score_progress_ref);
  fn("score_safety_ref", c.score_safety_ref);
  fn("score_accel_ref", c.score_accel_ref);
  fn("score_jerk_ref", c.score_jerk_ref);
  fn("separation_to_centroid", c.separation_to_centroid);
  fn("seed", c.seed);
}

}  // namespace

std::string RunConfig::to_json() const {
  json j;
  for_each_field(*this, [&j](const char* name, const auto& v) { j[name] = v; });
  return j.dump(2) + "\n";
}

RunConfig RunConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("config: ") + e.what());
  }
  RunConfig c;
  for_each_field(c, [&j](const char* name, auto& v) {
    if (!j.contains(name)) throw ParseError(std::string("config: missing field '") + name + "'");
    v = j.at(name).get<std::decay_t<decltype(v)>>();
  });
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("config: cannot read " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return from_json(ss.str());
}

void RunConfig::save(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw IoError("config: cannot write " + path);
  os << to_json();
}

std::uint64_t RunConfig::hash() const { return fnv1a64(to_json()); }

int RunConfig::vector_width() const { return 4 + kVectorAttrDim; }

bool operator==(const RunConfig& a, const RunConfig& b) {
  return a.to_json() == b.to_json();
}

}  // namespace misty
