#pragma once

#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "misty/planner.hpp"

namespace misty {

// Maps any angle into (-pi, pi].
double wrap_angle(double a);

struct EgoState {
  double x = 0.0, y = 0.0;
  double heading = 0.0;  // wrapped
  double speed = 0.0;    // >= 0
};

struct OrientedBox {
  Point2 center = Point2::Zero();
  double heading = 0.0;
  double length = 1.0, width = 1.0;
};

// Separating-axis test; touching boxes count as overlapping.
bool boxes_overlap(const OrientedBox& a, const OrientedBox& b);

struct IdmParams {
  double t_headway = 1.5;
  double s0 = 2.0;
  double a_max = 2.5;
  double b_comf = 2.5;
  double b_max = 5.0;
  double delta = 4.0;
};

IdmParams idm_from_config(const RunConfig& cfg);

// Car-following acceleration, clamped to [-b_max, a_max]. `gap` may be
// +infinity for a free road; a nonpositive gap returns emergency braking.
// dv is closing speed (own speed minus leader speed).
double idm_accel(double v, double v0, double gap, double dv, const IdmParams& p);

// Per agent, one predicted state per future tick, aligned with s.agents.
using AgentPredictions = std::vector<std::vector<AgentState>>;

// Predictions straight from the recorded logs, starting at future index
// `first_tick`, holding the last state once a log runs out.
AgentPredictions log_predictions(const Scenario& s, int first_tick, int ticks);

// Indices of world-frame trajectories that keep every waypoint inside the
// drivable corridor and whose ego footprint never overlaps a predicted
// agent footprint. Ties of any kind preserve input order.
std::vector<int> hard_filter(const std::vector<Trajectory>& world_trajs, const Scenario& s,
                             const AgentPredictions& preds, const RunConfig& cfg);

// Weighted progress / safety / comfort score in [0, 1].
//   progress: corridor arc-length gain over the horizon / score_progress_ref
//   safety:   minimal center clearance to predicted agents (half-diagonals
//             subtracted), saturated at score_safety_ref
//   comfort:  1 - max |accel| / accel_ref and 1 - max |jerk| / jerk_ref,
//             averaged; accelerations from the waypoint speed profile
// Each term clamped to [0, 1] before weighting.
double score_proposal(const Trajectory& world_traj, const Scenario& s,
                      const AgentPredictions& preds, const RunConfig& cfg);

// Argmax of score_proposal over hard_filter survivors, lowest index on
// ties; nullopt when nothing survives.
std::optional<int> select_trajectory(const std::vector<Trajectory>& world_trajs,
                                     const Scenario& s, const AgentPredictions& preds,
                                     const RunConfig& cfg);

// Synthesizes a deterministic desk-scale scenario. Kinds: straight, curve,
// blocked (stationary vehicle in the ego lane), intersection. Every planted
// positive and the expert are verified through hard_filter at generation.
Scenario make_scenario(const std::string& kind, std::uint64_t seed, const RunConfig& cfg);

struct EpisodeParams {
  int ticks = 80;
  int replan_period = 10;
  int k = 64;
  double alpha = 1.0;
  std::uint64_t seed = 0;
  bool reactive = false;
};

struct EpisodeReport {
  int collisions = 0;          // ticks with footprint overlap
  int off_drivable_ticks = 0;  // ticks outside the corridor bound
  double progress = 0.0;       // meters along the corridor center
  double max_accel = 0.0;
  double max_jerk = 0.0;
  double score = 0.0;  // in [0, 1], non-increasing in collisions
  int replans = 0;
  int fallbacks = 0;  // replans resolved by the braking profile
  bool generation_failed = false;
  bool left_start_lane = false;  // ego departed its starting lane
  int ticks = 0;

  std::string to_json() const;
};

// Proposer contract: ego-frame scene snapshot in, ego-frame trajectories
// out. The planner overload wraps generate() and turns generation errors
// into the braking fallback.
using ProposeFn =
    std::function<std::vector<Trajectory>(const Scenario& ego_frame_scene, std::uint64_t seed)>;

EpisodeReport run_episode(const Scenario& world, const ProposeFn& propose, const RunConfig& cfg,
                          const EpisodeParams& ep, std::ostream* trace = nullptr);
EpisodeReport run_episode(const Scenario& world, const Planner& planner, const EpisodeParams& ep,
                          std::ostream* trace = nullptr);

}  // namespace misty
