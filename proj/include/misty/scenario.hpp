#pragma once

#include <string>
#include <vector>

#include "misty/types.hpp"

namespace misty {

struct RunConfig;

// Planned ego path: H waypoints (x, y) in meters, ego frame, one per dt.
using Trajectory = Matrix;  // H x 2

using Point2 = Eigen::Vector2d;

// Attribute channels of a polyline vector:
//   [is_map, is_agent, speed_limit, vx, vy, heading]
// Unused channels stay zero for the other kind.
constexpr int kVectorAttrDim = 6;

struct PolylineVector {
  Point2 start = Point2::Zero();
  Point2 end = Point2::Zero();
  RowVector attr = RowVector::Zero(kVectorAttrDim);
};

struct Polyline {
  enum class Kind { Map, Agent };
  Kind kind = Kind::Map;
  std::vector<PolylineVector> vectors;
};

struct AgentState {
  double t = 0.0;  // seconds relative to the scenario anchor
  double x = 0.0, y = 0.0;
  double heading = 0.0;
  double vx = 0.0, vy = 0.0;
};

struct AgentTrack {
  int id = 0;
  double length = 4.5, width = 1.9;
  std::vector<AgentState> history;  // t <= 0, oldest first
  std::vector<AgentState> future;   // t > 0, the recorded log
};

struct MapPolyline {
  std::string kind = "lane";  // lane | boundary
  double speed_limit = 13.0;  // m/s
  std::vector<Point2> points;
};

// Drivable region: everything within half_width of the center path.
struct Corridor {
  std::vector<Point2> center;
  double half_width = 3.5;
};

struct EgoInfo {
  double length = 4.8, width = 2.0;
  std::vector<AgentState> history;
};

struct Scenario {
  int schema_version = 1;
  std::string kind = "straight";
  std::uint64_t seed = 0;
  double dt = 0.1;
  std::vector<MapPolyline> map_polylines;
  std::vector<AgentTrack> agents;
  EgoInfo ego;
  Trajectory expert;                   // H x 2
  std::vector<Trajectory> positives;   // compliant alternatives, expert excluded
  Corridor corridor;
  std::vector<Point2> ego_lane_center; // the lane ego starts in

  std::string to_json() const;
  static Scenario from_json(const std::string& text);
  static Scenario load(const std::string& path);
  void save(const std::string& path) const;
};

// Directional-vector form consumed by the encoder. Polylines beyond the
// config bounds are dropped farthest-from-origin first; vectors beyond the
// per-polyline bound are truncated from the far end.
struct VectorizedScene {
  std::vector<Polyline> agent_polylines;  // ego history first
  std::vector<Polyline> map_polylines;
};

VectorizedScene vectorize(const Scenario& s, const RunConfig& cfg);

// Geometry helpers shared by vectorization, the filter and the simulator.
struct PathProjection {
  double s = 0.0;        // arc length along the polyline
  double lateral = 0.0;  // signed offset, left of travel positive
  std::size_t segment = 0;
};
PathProjection project_onto_path(const std::vector<Point2>& path, const Point2& p);
double path_length(const std::vector<Point2>& path);

}  // namespace misty
