#pragma once

#include <cstdint>
#include <string>

#include "misty/types.hpp"

namespace misty {

// Every tunable in one place. Values here are defaults for desk-scale CPU
// runs; all of them round-trip through JSON losslessly and feed the config
// hash embedded in output artifacts.
struct RunConfig {
  int schema_version = 1;

  // model dims
  int hidden = 128;        // token width D
  int heads = 4;           // attention heads
  int ffn_mult = 2;        // transformer FFN expansion
  int enc_depth_map = 2;   // self-attention layers per encoder stage
  int enc_depth_agent = 2;
  int enc_depth_global = 2;
  int point_extra_blocks = 1;  // residual MLP blocks after the point lift
  int mixer_depth = 4;
  int mixer_token_hidden = 16;
  int mixer_channel_mult = 2;
  int d_pca = 12;
  int latent = 32;
  bool context_modulation = false;  // also feed scene tokens into adaLN

  // input bounds; farthest-from-ego polylines are dropped first
  int max_map_polylines = 32;
  int max_agent_polylines = 16;
  int max_vectors_per_polyline = 40;

  // trajectory geometry
  int horizon = 80;   // waypoints H
  double dt = 0.1;    // seconds per step

  // guidance
  double alpha_min = -0.5;
  double alpha_max = 1.5;

  // planner training
  int k_train = 16;       // negatives per scenario per step
  int train_steps = 1500;
  double lr = 0.02;
  double momentum = 0.9;
  double clip_norm = 1.0;
  double drift_temperature = 1.0;
  double drift_norm_scale = 1.0;   // c: target mean row norm
  double drift_norm_cap = 5.0;     // c_max: per-row norm ceiling
  int unc_per_class = 2;           // dictionary draws per macro class

  // VAE
  int vae_hidden = 128;
  int vae_blocks = 4;
  double vae_beta = 0.05;    // KL weight
  double vae_lambda = 0.1;   // auxiliary classification weight
  double vae_lr = 0.05;
  int vae_epochs = 40;
  int vae_batch = 64;

  // dictionary
  int n_fine = 200;
  int n_macro = 16;

  // corpus synthesis
  int corpus_size = 3200;
  int n_scenarios = 40;

  // inference
  int k_infer = 1024;
  double infer_alpha = 1.0;

  // closed loop
  int episode_ticks = 80;
  int replan_period = 40;
  int k_episode = 1024;
  double lane_width = 3.5;
  double corridor_margin = 0.2;
  double ego_length = 4.8;
  double ego_width = 2.0;

  // IDM
  double idm_v0 = 13.0;      // desired speed m/s
  double idm_t_headway = 1.5;
  double idm_s0 = 2.0;
  double idm_a_max = 2.5;
  double idm_b_comf = 2.5;
  double idm_b_max = 5.0;
  double idm_delta = 4.0;

  // proposal scoring
  double score_w_progress = 0.5;
  double score_w_safety = 0.3;
  double score_w_comfort = 0.2;
  double score_progress_ref = 80.0;  // meters over the horizon
  double score_safety_ref = 5.0;     // clearance saturation, meters
  double score_accel_ref = 4.0;      // m/s^2
  double score_jerk_ref = 10.0;      // m/s^3

  // metrics
  bool separation_to_centroid = false;  // pairwise means by default

  // seeds
  std::uint64_t seed = 7;

  std::string to_json() const;
  static RunConfig from_json(const std::string& text);
  static RunConfig load(const std::string& path);
  void save(const std::string& path) const;

  std::uint64_t hash() const;

  // Number of input channels per polyline vector: start, end, attributes.
  int vector_width() const;
};

bool operator==(const RunConfig& a, const RunConfig& b);

}  // namespace misty
