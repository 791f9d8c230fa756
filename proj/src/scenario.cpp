#include "misty/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "misty/config.hpp"

namespace misty {

using json = nlohmann::ordered_json;

namespace {

json points_to_json(const std::vector<Point2>& pts) {
  json a = json::array();
  for (const auto& p : pts) a.push_back({p.x(), p.y()});
  return a;
}

std::vector<Point2> points_from_json(const json& a) {
  std::vector<Point2> pts;
  for (const auto& e : a) pts.emplace_back(e.at(0).get<double>(), e.at(1).get<double>());
  return pts;
}

json traj_to_json(const Trajectory& t) {
  json a = json::array();
  for (Index i = 0; i < t.rows(); ++i) a.push_back({t(i, 0), t(i, 1)});
  return a;
}

Trajectory traj_from_json(const json& a) {
  Trajectory t(Index(a.size()), 2);
  for (std::size_t i = 0; i < a.size(); ++i) {
    t(Index(i), 0) = a[i].at(0).get<double>();
    t(Index(i), 1) = a[i].at(1).get<double>();
  }
  return t;
}

json state_to_json(const AgentState& s) {
  return json{{"t", s.t},   {"x", s.x},   {"y", s.y},
              {"heading", s.heading}, {"vx", s.vx}, {"vy", s.vy}};
}

AgentState state_from_json(const json& j) {
  AgentState s;
  s.t = j.at("t").get<double>();
  s.x = j.at("x").get<double>();
  s.y = j.at("y").get<double>();
  s.heading = j.at("heading").get<double>();
  s.vx = j.at("vx").get<double>();
  s.vy = j.at("vy").get<double>();
  return s;
}

}  // namespace

std::string Scenario::to_json() const {
  json j;
  j["schema_version"] = schema_version;
  j["kind"] = kind;
  j["seed"] = seed;
  j["dt"] = dt;
  json maps = json::array();
  for (const auto& m : map_polylines)
    maps.push_back({{"kind", m.kind}, {"speed_limit", m.speed_limit},
                    {"points", points_to_json(m.points)}});
  j["map_polylines"] = maps;
  json ags = json::array();
  for (const auto& a : agents) {
    json hist = json::array(), fut = json::array();
    for (const auto& s : a.history) hist.push_back(state_to_json(s));
    for (const auto& s : a.future) fut.push_back(state_to_json(s));
    ags.push_back({{"id", a.id}, {"length", a.length}, {"width", a.width},
                   {"history", hist}, {"future", fut}});
  }
  j["agents"] = ags;
  json eh = json::array();
  for (const auto& s : ego.history) eh.push_back(state_to_json(s));
  j["ego"] = {{"length", ego.length}, {"width", ego.width}, {"history", eh}};
  j["expert"] = traj_to_json(expert);
  json pos = json::array();
  for (const auto& p : positives) pos.push_back(traj_to_json(p));
  j["positives"] = pos;
  j["corridor"] = {{"center", points_to_json(corridor.center)},
                   {"half_width", corridor.half_width}};
  j["ego_lane_center"] = points_to_json(ego_lane_center);
  return j.dump(2) + "\n";
}

Scenario Scenario::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("scenario: ") + e.what());
  }
  try {
    Scenario s;
    s.schema_version = j.at("schema_version").get<int>();
    if (s.schema_version != 1) throw ParseError("scenario: unsupported schema_version");
    s.kind = j.at("kind").get<std::string>();
    s.seed = j.at("seed").get<std::uint64_t>();
    s.dt = j.at("dt").get<double>();
    for (const auto& m : j.at("map_polylines")) {
      MapPolyline mp;
      mp.kind = m.at("kind").get<std::string>();
      mp.speed_limit = m.at("speed_limit").get<double>();
      mp.points = points_from_json(m.at("points"));
      s.map_polylines.push_back(std::move(mp));
    }
    for (const auto& a : j.at("agents")) {
      AgentTrack t;
      t.id = a.at("id").get<int>();
      t.length = a.at("length").get<double>();
      t.width = a.at("width").get<double>();
      for (const auto& st : a.at("history")) t.history.push_back(state_from_json(st));
      for (const auto& st : a.at("future")) t.future.push_back(state_from_json(st));
      s.agents.push_back(std::move(t));
    }
    const auto& e = j.at("ego");
    s.ego.length = e.at("length").get<double>();
    s.ego.width = e.at("width").get<double>();
    for (const auto& st : e.at("history")) s.ego.history.push_back(state_from_json(st));
    s.expert = traj_from_json(j.at("expert"));
    for (const auto& p : j.at("positives")) s.positives.push_back(traj_from_json(p));
    s.corridor.center = points_from_json(j.at("corridor").at("center"));
    s.corridor.half_width = j.at("corridor").at("half_width").get<double>();
    s.ego_lane_center = points_from_json(j.at("ego_lane_center"));
    return s;
  } catch (const json::exception& e) {
    throw ParseError(std::string("scenario: ") + e.what());
  }
}

Scenario Scenario::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("scenario: cannot read " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return from_json(ss.str());
}

void Scenario::save(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw IoError("scenario: cannot write " + path);
  os << to_json();
}

namespace {

double nearest_distance_to_origin(const std::vector<Point2>& pts) {
  double best = std::numeric_limits<double>::max();
  for (const auto& p : pts) best = std::min(best, p.norm());
  return best;
}

Polyline map_to_polyline(const MapPolyline& m, int max_vectors) {
  Polyline pl;
  pl.kind = Polyline::Kind::Map;
  int n = int(m.points.size()) - 1;
  n = std::min(n, max_vectors);
  for (int i = 0; i < n; ++i) {
    PolylineVector v;
    v.start = m.points[std::size_t(i)];
    v.end = m.points[std::size_t(i) + 1];
    v.attr.setZero();
    v.attr(0) = 1.0;
    v.attr(2) = m.speed_limit;
    pl.vectors.push_back(std::move(v));
  }
  return pl;
}

Polyline history_to_polyline(const std::vector<AgentState>& hist, int max_vectors) {
  Polyline pl;
  pl.kind = Polyline::Kind::Agent;
  int n = int(hist.size()) - 1;
  int first = std::max(0, n - max_vectors);
  for (int i = first; i < n; ++i) {
    const AgentState& a = hist[std::size_t(i)];
    const AgentState& b = hist[std::size_t(i) + 1];
    PolylineVector v;
    v.start = Point2(a.x, a.y);
    v.end = Point2(b.x, b.y);
    v.attr.setZero();
    v.attr(1) = 1.0;
    v.attr(3) = b.vx;
    v.attr(4) = b.vy;
    v.attr(5) = b.heading;
    pl.vectors.push_back(std::move(v));
  }
  return pl;
}

}  // namespace

VectorizedScene vectorize(const Scenario& s, const RunConfig& cfg) {
  if (s.ego.history.size() < 2) throw InputError("vectorize: ego history too short");
  VectorizedScene out;

  out.agent_polylines.push_back(history_to_polyline(s.ego.history, cfg.max_vectors_per_polyline));
  std::vector<const AgentTrack*> agents;
  for (const auto& a : s.agents)
    if (a.history.size() >= 2) agents.push_back(&a);
  std::sort(agents.begin(), agents.end(), [](const AgentTrack* a, const AgentTrack* b) {
    double da = Point2(a->history.back().x, a->history.back().y).norm();
    double db = Point2(b->history.back().x, b->history.back().y).norm();
    if (da != db) return da < db;
    return a->id < b->id;
  });
  for (const AgentTrack* a : agents) {
    if (int(out.agent_polylines.size()) >= cfg.max_agent_polylines) break;
    out.agent_polylines.push_back(history_to_polyline(a->history, cfg.max_vectors_per_polyline));
  }

  std::vector<const MapPolyline*> maps;
  for (const auto& m : s.map_polylines)
    if (m.points.size() >= 2) maps.push_back(&m);
  std::sort(maps.begin(), maps.end(), [](const MapPolyline* a, const MapPolyline* b) {
    double da = nearest_distance_to_origin(a->points);
    double db = nearest_distance_to_origin(b->points);
    return da < db;
  });
  for (const MapPolyline* m : maps) {
    if (int(out.map_polylines.size()) >= cfg.max_map_polylines) break;
    out.map_polylines.push_back(map_to_polyline(*m, cfg.max_vectors_per_polyline));
  }
  return out;
}

PathProjection project_onto_path(const std::vector<Point2>& path, const Point2& p) {
  if (path.size() < 2) throw InputError("project_onto_path: need >= 2 points");
  PathProjection best;
  double best_d2 = std::numeric_limits<double>::max();
  double s_accum = 0.0;
  for (std::size_t i = 0; i + 1 < path.size(); ++i) {
    Point2 a = path[i], b = path[i + 1];
    Point2 ab = b - a;
    double len2 = ab.squaredNorm();
    double t = len2 > 0.0 ? std::clamp((p - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
    Point2 q = a + t * ab;
    double d2 = (p - q).squaredNorm();
    if (d2 < best_d2) {
      best_d2 = d2;
      double len = std::sqrt(len2);
      double cross = ab.x() * (p.y() - a.y()) - ab.y() * (p.x() - a.x());
      best.s = s_accum + t * len;
      best.lateral = len > 0.0 ? cross / len : (p - a).norm();
      best.segment = i;
    }
    s_accum += ab.norm();
  }
  return best;
}

double path_length(const std::vector<Point2>& path) {
  double s = 0.0;
  for (std::size_t i = 0; i + 1 < path.size(); ++i) s += (path[i + 1] - path[i]).norm();
  return s;
}

}  // namespace misty
