#pragma once

#include <string>
#include <vector>

#include "misty/config.hpp"
#include "misty/scenario.hpp"

namespace misty {

// One synthetic expert trajectory with both label granularities:
// tag6 is the coarse intent tag used as VAE supervision, label16 the
// kinematic class used for dictionary evaluation and separation metrics.
struct CorpusItem {
  int tag6 = 0;
  int label16 = 0;
  Trajectory traj;  // H x 2, ego frame, starts at the origin heading +x
};

struct Corpus {
  int schema_version = 1;
  std::uint64_t seed = 0;
  int horizon = 80;
  double dt = 0.1;
  std::vector<CorpusItem> items;

  std::string to_json() const;
  static Corpus from_json(const std::string& text);
  static Corpus load(const std::string& path);
  void save(const std::string& path) const;
};

// 16 kinematic classes: 0-3 cruise speed tiers, 4-6 left turns, 7-9 right
// turns, 10/11 lane changes, 12 stationary, 13 braking, 14 accelerating,
// 15 swerve. `jitter` scales all within-class variation; 1.0 is the
// training default, small values give well-separated planted clusters.
Trajectory make_class_trajectory(int label16, int horizon, double dt, Rng& rng, double jitter);

int tag_of_label(int label16);

Corpus make_corpus(const RunConfig& cfg, std::uint64_t seed, int size, double jitter = 1.0);

}  // namespace misty
