#include "misty/closed_loop.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include "json.hpp"
#include "misty/checkpoint.hpp"

namespace misty {

using json = nlohmann::ordered_json;

double wrap_angle(double a) {
  double r = std::remainder(a, 2.0 * M_PI);
  if (r <= -M_PI) r += 2.0 * M_PI;
  return r;
}

namespace {

std::array<Point2, 4> box_corners(const OrientedBox& o) {
  const double c = std::cos(o.heading), s = std::sin(o.heading);
  const Point2 ex(c * o.length * 0.5, s * o.length * 0.5);
  const Point2 ey(-s * o.width * 0.5, c * o.width * 0.5);
  return {o.center + ex + ey, o.center + ex - ey, o.center - ex - ey, o.center - ex + ey};
}

void project_corners(const std::array<Point2, 4>& corners, const Point2& axis, double& lo,
                     double& hi) {
  lo = std::numeric_limits<double>::max();
  hi = std::numeric_limits<double>::lowest();
  for (const auto& p : corners) {
    double d = p.dot(axis);
    lo = std::min(lo, d);
    hi = std::max(hi, d);
  }
}

double smoothstep01(double u) {
  u = std::clamp(u, 0.0, 1.0);
  return u * u * (3.0 - 2.0 * u);
}

}  // namespace

bool boxes_overlap(const OrientedBox& a, const OrientedBox& b) {
  const auto ca = box_corners(a), cb = box_corners(b);
  const std::array<Point2, 4> axes = {
      Point2(std::cos(a.heading), std::sin(a.heading)),
      Point2(-std::sin(a.heading), std::cos(a.heading)),
      Point2(std::cos(b.heading), std::sin(b.heading)),
      Point2(-std::sin(b.heading), std::cos(b.heading))};
  for (const auto& axis : axes) {
    double alo, ahi, blo, bhi;
    project_corners(ca, axis, alo, ahi);
    project_corners(cb, axis, blo, bhi);
    if (ahi < blo || bhi < alo) return false;
  }
  return true;
}

IdmParams idm_from_config(const RunConfig& cfg) {
  IdmParams p;
  p.t_headway = cfg.idm_t_headway;
  p.s0 = cfg.idm_s0;
  p.a_max = cfg.idm_a_max;
  p.b_comf = cfg.idm_b_comf;
  p.b_max = cfg.idm_b_max;
  p.delta = cfg.idm_delta;
  return p;
}

double idm_accel(double v, double v0, double gap, double dv, const IdmParams& p) {
  if (v0 <= 0.0) throw InputError("idm_accel: v0 must be > 0");
  if (gap <= 0.0) return -p.b_max;
  v = std::max(0.0, v);
  const double s_star = p.s0 + v * p.t_headway + v * dv / (2.0 * std::sqrt(p.a_max * p.b_comf));
  const double ratio = s_star / gap;  // 0 for infinite gap
  const double a = p.a_max * (1.0 - std::pow(v / v0, p.delta) - ratio * ratio);
  return std::clamp(a, -p.b_max, p.a_max);
}

AgentPredictions log_predictions(const Scenario& s, int first_tick, int ticks) {
  AgentPredictions out(s.agents.size());
  for (std::size_t a = 0; a < s.agents.size(); ++a) {
    const auto& fut = s.agents[a].future;
    out[a].reserve(std::size_t(ticks));
    for (int j = 0; j < ticks; ++j) {
      if (fut.empty()) {
        out[a].push_back(s.agents[a].history.back());
        continue;
      }
      int idx = std::min(first_tick + j, int(fut.size()) - 1);
      out[a].push_back(fut[std::size_t(idx)]);
    }
  }
  return out;
}

namespace {

std::vector<double> waypoint_headings(const Trajectory& t) {
  std::vector<double> h(std::size_t(t.rows()), 0.0);
  double overall = 0.0;
  if (t.rows() >= 2) {
    Point2 d(t(t.rows() - 1, 0) - t(0, 0), t(t.rows() - 1, 1) - t(0, 1));
    if (d.norm() > 1e-9) overall = std::atan2(d.y(), d.x());
  }
  double cur = overall;
  for (Index j = 0; j < t.rows(); ++j) {
    if (j + 1 < t.rows()) {
      Point2 d(t(j + 1, 0) - t(j, 0), t(j + 1, 1) - t(j, 1));
      if (d.norm() > 1e-9) cur = std::atan2(d.y(), d.x());
    }
    h[std::size_t(j)] = cur;
  }
  return h;
}

OrientedBox agent_box(const AgentState& st, const AgentTrack& track) {
  OrientedBox b;
  b.center = Point2(st.x, st.y);
  b.heading = st.heading;
  b.length = track.length;
  b.width = track.width;
  return b;
}

}  // namespace

std::vector<int> hard_filter(const std::vector<Trajectory>& world_trajs, const Scenario& s,
                             const AgentPredictions& preds, const RunConfig& cfg) {
  if (world_trajs.empty()) throw InputError("hard_filter: no proposals");
  if (preds.size() != s.agents.size())
    throw DimensionError("hard_filter: predictions do not match agents");
  const double bound = s.corridor.half_width + cfg.corridor_margin;

  std::vector<int> survivors;
  for (std::size_t k = 0; k < world_trajs.size(); ++k) {
    const Trajectory& t = world_trajs[k];
    const auto headings = waypoint_headings(t);
    bool ok = true;
    for (Index j = 0; ok && j < t.rows(); ++j) {
      const Point2 p(t(j, 0), t(j, 1));
      if (std::abs(project_onto_path(s.corridor.center, p).lateral) > bound) {
        ok = false;
        break;
      }
      OrientedBox ego;
      ego.center = p;
      ego.heading = headings[std::size_t(j)];
      ego.length = cfg.ego_length;
      ego.width = cfg.ego_width;
      for (std::size_t a = 0; a < preds.size(); ++a) {
        if (preds[a].empty()) continue;
        int idx = std::min(int(j), int(preds[a].size()) - 1);
        if (boxes_overlap(ego, agent_box(preds[a][std::size_t(idx)], s.agents[a]))) {
          ok = false;
          break;
        }
      }
    }
    if (ok) survivors.push_back(int(k));
  }
  return survivors;
}

double score_proposal(const Trajectory& world_traj, const Scenario& s,
                      const AgentPredictions& preds, const RunConfig& cfg) {
  const Index h = world_traj.rows();
  if (h < 2) throw InputError("score_proposal: trajectory too short");
  const double dt = s.dt;

  const Point2 first(world_traj(0, 0), world_traj(0, 1));
  const Point2 last(world_traj(h - 1, 0), world_traj(h - 1, 1));
  const double gain = project_onto_path(s.corridor.center, last).s -
                      project_onto_path(s.corridor.center, first).s;
  const double progress_norm = std::clamp(gain / cfg.score_progress_ref, 0.0, 1.0);

  double clearance = cfg.score_safety_ref;
  const double ego_rad = 0.5 * std::hypot(cfg.ego_length, cfg.ego_width);
  for (std::size_t a = 0; a < preds.size(); ++a) {
    if (preds[a].empty()) continue;
    const double agent_rad = 0.5 * std::hypot(s.agents[a].length, s.agents[a].width);
    for (Index j = 0; j < h; ++j) {
      int idx = std::min(int(j), int(preds[a].size()) - 1);
      const AgentState& st = preds[a][std::size_t(idx)];
      double d = (Point2(world_traj(j, 0), world_traj(j, 1)) - Point2(st.x, st.y)).norm() -
                 ego_rad - agent_rad;
      clearance = std::min(clearance, std::max(0.0, d));
    }
  }
  const double safety_norm = std::clamp(clearance / cfg.score_safety_ref, 0.0, 1.0);

  double max_a = 0.0, max_j = 0.0, prev_v = -1.0, prev_a = 0.0;
  bool have_a = false;
  for (Index j = 0; j + 1 < h; ++j) {
    double v = (world_traj.row(j + 1) - world_traj.row(j)).norm() / dt;
    if (prev_v >= 0.0) {
      double acc = (v - prev_v) / dt;
      max_a = std::max(max_a, std::abs(acc));
      if (have_a) max_j = std::max(max_j, std::abs(acc - prev_a) / dt);
      prev_a = acc;
      have_a = true;
    }
    prev_v = v;
  }
  const double comfort_norm = 0.5 * std::clamp(1.0 - max_a / cfg.score_accel_ref, 0.0, 1.0) +
                              0.5 * std::clamp(1.0 - max_j / cfg.score_jerk_ref, 0.0, 1.0);

  return cfg.score_w_progress * progress_norm + cfg.score_w_safety * safety_norm +
         cfg.score_w_comfort * comfort_norm;
}

std::optional<int> select_trajectory(const std::vector<Trajectory>& world_trajs,
                                     const Scenario& s, const AgentPredictions& preds,
                                     const RunConfig& cfg) {
  if (world_trajs.empty()) return std::nullopt;
  const auto survivors = hard_filter(world_trajs, s, preds, cfg);
  std::optional<int> best;
  double best_score = -1.0;
  for (int idx : survivors) {
    double sc = score_proposal(world_trajs[std::size_t(idx)], s, preds, cfg);
    if (sc > best_score) {
      best_score = sc;
      best = idx;
    }
  }
  return best;
}

// --------------------------------------------------------------------------
// Scenario synthesis.

namespace {

constexpr int kHistoryLen = 20;

std::vector<Point2> line_pts(double x0, double y0, double x1, double y1, double step) {
  std::vector<Point2> pts;
  const Point2 a(x0, y0), b(x1, y1);
  const double len = (b - a).norm();
  const int n = std::max(2, int(std::ceil(len / step)) + 1);
  for (int i = 0; i < n; ++i) pts.push_back(a + (b - a) * (double(i) / (n - 1)));
  return pts;
}

MapPolyline make_map_line(const std::string& kind, double speed_limit,
                          std::vector<Point2> pts) {
  MapPolyline m;
  m.kind = kind;
  m.speed_limit = speed_limit;
  m.points = std::move(pts);
  return m;
}

AgentState state_at(double t, const Point2& p, double heading, double speed) {
  AgentState s;
  s.t = t;
  s.x = p.x();
  s.y = p.y();
  s.heading = heading;
  s.vx = speed * std::cos(heading);
  s.vy = speed * std::sin(heading);
  return s;
}

// Straight-line motion ending at (or starting from) the anchor pose.
std::vector<AgentState> straight_history(const Point2& at, double heading, double speed,
                                         double dt) {
  std::vector<AgentState> h;
  const Point2 dir(std::cos(heading), std::sin(heading));
  for (int i = kHistoryLen - 1; i >= 0; --i) {
    double t = -dt * i;
    h.push_back(state_at(t, at + dir * (speed * t), heading, speed));
  }
  return h;
}

std::vector<AgentState> straight_future(const Point2& at, double heading, double speed,
                                        double dt, int n) {
  std::vector<AgentState> f;
  const Point2 dir(std::cos(heading), std::sin(heading));
  for (int i = 1; i <= n; ++i)
    f.push_back(state_at(dt * i, at + dir * (speed * dt * i), heading, speed));
  return f;
}

struct Arc {
  double radius = 50.0;
  double dir = 1.0;  // +1 left, -1 right

  Point2 at(double s) const {
    double phi = s / radius;
    return Point2(radius * std::sin(phi), dir * radius * (1.0 - std::cos(phi)));
  }
  double heading(double s) const { return dir * s / radius; }
  Point2 left_normal(double s) const {
    double h = heading(s);
    return Point2(-std::sin(h), std::cos(h));
  }
};

std::vector<Point2> arc_pts(const Arc& arc, double s0, double s1, double step, double lateral) {
  std::vector<Point2> pts;
  const int n = std::max(2, int(std::ceil((s1 - s0) / step)) + 1);
  for (int i = 0; i < n; ++i) {
    double s = s0 + (s1 - s0) * double(i) / (n - 1);
    pts.push_back(arc.at(s) + lateral * arc.left_normal(s));
  }
  return pts;
}

std::vector<AgentState> arc_history(const Arc& arc, double s_now, double speed, double dt) {
  std::vector<AgentState> h;
  for (int i = kHistoryLen - 1; i >= 0; --i) {
    double t = -dt * i;
    double s = s_now + speed * t;
    h.push_back(state_at(t, arc.at(s), arc.heading(s), speed));
  }
  return h;
}

std::vector<AgentState> arc_future(const Arc& arc, double s_now, double speed, double dt,
                                   int n) {
  std::vector<AgentState> f;
  for (int i = 1; i <= n; ++i) {
    double s = s_now + speed * dt * i;
    f.push_back(state_at(dt * i, arc.at(s), arc.heading(s), speed));
  }
  return f;
}

Trajectory ramp_traj(int h, double dt, double speed, double off, double ramp_from,
                     double ramp_to) {
  Trajectory t(h, 2);
  for (int j = 0; j < h; ++j) {
    double x = speed * dt * (j + 1);
    double u = ramp_to > ramp_from ? (x - ramp_from) / (ramp_to - ramp_from) : 1.0;
    t(j, 0) = x;
    t(j, 1) = off * smoothstep01(u);
  }
  return t;
}

Trajectory stop_traj(int h, double dt, double v0, double x_stop) {
  Trajectory t(h, 2);
  const double a = v0 * v0 / (2.0 * x_stop);
  const double t_stop = v0 / a;
  for (int j = 0; j < h; ++j) {
    double tt = dt * (j + 1);
    t(j, 0) = tt < t_stop ? v0 * tt - 0.5 * a * tt * tt : x_stop;
    t(j, 1) = 0.0;
  }
  return t;
}

void self_check(const Scenario& s, const RunConfig& cfg) {
  if (s.positives.size() < 2 || s.positives.size() > 8)
    throw StateError("make_scenario: positive count out of range");
  std::vector<Trajectory> all = s.positives;
  all.push_back(s.expert);
  const auto preds = log_predictions(s, 0, cfg.horizon);
  const auto survivors = hard_filter(all, s, preds, cfg);
  if (survivors.size() != all.size())
    throw StateError("make_scenario: planted trajectory failed the hard filter (kind " +
                     s.kind + ", seed " + std::to_string(s.seed) + ")");
}

Scenario make_straight(const RunConfig& cfg, Rng& rng) {
  Scenario s;
  const int h = cfg.horizon;
  const int n_fut = 2 * h + 16;
  const double v_e = rng.uniform(8.0, 12.0);

  s.map_polylines.push_back(make_map_line("lane", 13.0, line_pts(-20, 0, 150, 0, 5.0)));
  s.map_polylines.push_back(make_map_line("boundary", 13.0, line_pts(-20, -3.5, 150, -3.5, 5.0)));
  s.map_polylines.push_back(make_map_line("boundary", 13.0, line_pts(-20, 3.5, 150, 3.5, 5.0)));
  s.corridor.center = line_pts(-20, 0, 150, 0, 5.0);
  s.corridor.half_width = cfg.lane_width;
  s.ego_lane_center = s.corridor.center;

  s.ego.length = cfg.ego_length;
  s.ego.width = cfg.ego_width;
  s.ego.history = straight_history(Point2(0, 0), 0.0, v_e, cfg.dt);

  AgentTrack lead;
  lead.id = 1;
  const Point2 lead_at(rng.uniform(45.0, 60.0), 0.0);
  lead.history = straight_history(lead_at, 0.0, v_e, cfg.dt);
  lead.future = straight_future(lead_at, 0.0, v_e, cfg.dt, n_fut);
  s.agents.push_back(std::move(lead));

  s.expert = ramp_traj(h, cfg.dt, v_e, 0.0, 0.0, 1.0);
  const int n_pos = rng.uniform_int(3, 6);
  for (int i = 0; i < n_pos; ++i) {
    double f = rng.uniform(0.85, 1.1);
    double off = rng.uniform(-0.6, 0.6);
    s.positives.push_back(ramp_traj(h, cfg.dt, f * v_e, off, 5.0, 35.0));
  }
  return s;
}

Scenario make_curve(const RunConfig& cfg, Rng& rng) {
  Scenario s;
  const int h = cfg.horizon;
  const int n_fut = 2 * h + 16;
  Arc arc;
  arc.radius = rng.uniform(40.0, 80.0);
  arc.dir = rng.uniform_int(0, 1) == 0 ? 1.0 : -1.0;
  const double v_e = rng.uniform(6.0, 9.0);

  s.map_polylines.push_back(make_map_line("lane", 13.0, arc_pts(arc, -20, 140, 2.5, 0.0)));
  s.map_polylines.push_back(make_map_line("boundary", 13.0, arc_pts(arc, -20, 140, 2.5, 3.5)));
  s.map_polylines.push_back(make_map_line("boundary", 13.0, arc_pts(arc, -20, 140, 2.5, -3.5)));
  s.corridor.center = arc_pts(arc, -20, 140, 2.5, 0.0);
  s.corridor.half_width = cfg.lane_width;
  s.ego_lane_center = s.corridor.center;

  s.ego.length = cfg.ego_length;
  s.ego.width = cfg.ego_width;
  s.ego.history = arc_history(arc, 0.0, v_e, cfg.dt);

  AgentTrack lead;
  lead.id = 1;
  const double lead_s = rng.uniform(40.0, 55.0);
  lead.history = arc_history(arc, lead_s, v_e, cfg.dt);
  lead.future = arc_future(arc, lead_s, v_e, cfg.dt, n_fut);
  s.agents.push_back(std::move(lead));

  Trajectory expert(h, 2);
  for (int j = 0; j < h; ++j) {
    Point2 p = arc.at(v_e * cfg.dt * (j + 1));
    expert(j, 0) = p.x();
    expert(j, 1) = p.y();
  }
  s.expert = expert;

  const int n_pos = rng.uniform_int(3, 6);
  for (int i = 0; i < n_pos; ++i) {
    double f = rng.uniform(0.85, 1.1);
    double off = rng.uniform(-0.5, 0.5);
    Trajectory t(h, 2);
    for (int j = 0; j < h; ++j) {
      double sj = f * v_e * cfg.dt * (j + 1);
      Point2 p = arc.at(sj) + off * smoothstep01(double(j + 1) / h) * arc.left_normal(sj);
      t(j, 0) = p.x();
      t(j, 1) = p.y();
    }
    s.positives.push_back(std::move(t));
  }
  return s;
}

Scenario make_blocked(const RunConfig& cfg, Rng& rng) {
  Scenario s;
  const int h = cfg.horizon;
  const int n_fut = 2 * h + 16;
  const double v_e = rng.uniform(6.0, 9.0);
  const double x_b = rng.uniform(22.0, 30.0);
  const double lane_w = cfg.lane_width;

  s.map_polylines.push_back(make_map_line("lane", 13.0, line_pts(-20, 0, 150, 0, 5.0)));
  s.map_polylines.push_back(make_map_line("lane", 13.0, line_pts(-20, lane_w, 150, lane_w, 5.0)));
  s.map_polylines.push_back(
      make_map_line("boundary", 13.0, line_pts(-20, -lane_w / 2, 150, -lane_w / 2, 5.0)));
  s.map_polylines.push_back(
      make_map_line("boundary", 13.0, line_pts(-20, lane_w / 2, 150, lane_w / 2, 5.0)));
  s.map_polylines.push_back(
      make_map_line("boundary", 13.0, line_pts(-20, 1.5 * lane_w, 150, 1.5 * lane_w, 5.0)));
  s.corridor.center = line_pts(-20, lane_w / 2, 150, lane_w / 2, 5.0);
  s.corridor.half_width = lane_w;
  s.ego_lane_center = line_pts(-20, 0, 150, 0, 5.0);

  s.ego.length = cfg.ego_length;
  s.ego.width = cfg.ego_width;
  s.ego.history = straight_history(Point2(0, 0), 0.0, v_e, cfg.dt);

  AgentTrack blocker;
  blocker.id = 1;
  const Point2 block_at(x_b, 0.0);
  for (int i = kHistoryLen - 1; i >= 0; --i)
    blocker.history.push_back(state_at(-cfg.dt * i, block_at, 0.0, 0.0));
  for (int i = 1; i <= n_fut; ++i)
    blocker.future.push_back(state_at(cfg.dt * i, block_at, 0.0, 0.0));
  s.agents.push_back(std::move(blocker));

  AgentTrack pass_lead;
  pass_lead.id = 2;
  const Point2 lead_at(rng.uniform(60.0, 75.0), lane_w);
  const double v_l = rng.uniform(8.0, 10.0);
  pass_lead.history = straight_history(lead_at, 0.0, v_l, cfg.dt);
  pass_lead.future = straight_future(lead_at, 0.0, v_l, cfg.dt, n_fut);
  s.agents.push_back(std::move(pass_lead));

  const double x_s = rng.uniform(4.0, 7.0);
  const double x_e = x_b - rng.uniform(6.0, 9.0);
  s.expert = ramp_traj(h, cfg.dt, v_e, lane_w, x_s, x_e);

  const int n_lane = rng.uniform_int(2, 5);
  for (int i = 0; i < n_lane; ++i) {
    double xs = std::max(2.0, x_s + rng.uniform(-2.0, 2.0));
    double xe = std::min(xs + rng.uniform(10.0, 16.0), x_b - 5.5);
    double yf = rng.uniform(3.2, 3.6);
    double f = rng.uniform(0.9, 1.08);
    s.positives.push_back(ramp_traj(h, cfg.dt, f * v_e, yf, xs, xe));
  }
  s.positives.push_back(stop_traj(h, cfg.dt, v_e, x_b - rng.uniform(5.5, 7.0)));
  return s;
}

Scenario make_intersection(const RunConfig& cfg, Rng& rng) {
  Scenario s;
  const int h = cfg.horizon;
  const int n_fut = 2 * h + 16;
  const double v_e = rng.uniform(7.0, 10.0);
  const double x_i = rng.uniform(40.0, 55.0);

  s.map_polylines.push_back(make_map_line("lane", 13.0, line_pts(-20, 0, 150, 0, 5.0)));
  s.map_polylines.push_back(make_map_line("boundary", 13.0, line_pts(-20, -3.5, 150, -3.5, 5.0)));
  s.map_polylines.push_back(make_map_line("boundary", 13.0, line_pts(-20, 3.5, 150, 3.5, 5.0)));
  s.map_polylines.push_back(make_map_line("lane", 13.0, line_pts(x_i, -30, x_i, 40, 5.0)));
  s.map_polylines.push_back(
      make_map_line("boundary", 13.0, line_pts(x_i - 1.75, -30, x_i - 1.75, 40, 5.0)));
  s.map_polylines.push_back(
      make_map_line("boundary", 13.0, line_pts(x_i + 1.75, -30, x_i + 1.75, 40, 5.0)));
  s.corridor.center = line_pts(-20, 0, 150, 0, 5.0);
  s.corridor.half_width = cfg.lane_width;
  s.ego_lane_center = s.corridor.center;

  s.ego.length = cfg.ego_length;
  s.ego.width = cfg.ego_width;
  s.ego.history = straight_history(Point2(0, 0), 0.0, v_e, cfg.dt);

  AgentTrack crosser;
  crosser.id = 1;
  const double y0 = -(12.0 + rng.uniform(0.0, 4.0));
  const Point2 cross_at(x_i, y0);
  crosser.history = straight_history(cross_at, M_PI / 2.0, 8.0, cfg.dt);
  crosser.future = straight_future(cross_at, M_PI / 2.0, 8.0, cfg.dt, n_fut);
  s.agents.push_back(std::move(crosser));

  s.expert = ramp_traj(h, cfg.dt, v_e, 0.0, 0.0, 1.0);
  const int n_pos = rng.uniform_int(3, 6);
  for (int i = 0; i < n_pos; ++i) {
    double f = rng.uniform(0.88, 1.08);
    double off = rng.uniform(-0.4, 0.4);
    s.positives.push_back(ramp_traj(h, cfg.dt, f * v_e, off, 5.0, 35.0));
  }
  return s;
}

}  // namespace

Scenario make_scenario(const std::string& kind, std::uint64_t seed, const RunConfig& cfg) {
  Rng rng(fnv1a64(kind + ":" + std::to_string(seed)));
  Scenario s;
  if (kind == "straight")
    s = make_straight(cfg, rng);
  else if (kind == "curve")
    s = make_curve(cfg, rng);
  else if (kind == "blocked")
    s = make_blocked(cfg, rng);
  else if (kind == "intersection")
    s = make_intersection(cfg, rng);
  else
    throw InputError("make_scenario: unknown kind " + kind);
  s.kind = kind;
  s.seed = seed;
  s.dt = cfg.dt;
  self_check(s, cfg);
  return s;
}

// --------------------------------------------------------------------------
// Episode simulation.

std::string EpisodeReport::to_json() const {
  json j;
  j["collisions"] = collisions;
  j["off_drivable_ticks"] = off_drivable_ticks;
  j["progress"] = progress;
  j["max_accel"] = max_accel;
  j["max_jerk"] = max_jerk;
  j["score"] = score;
  j["replans"] = replans;
  j["fallbacks"] = fallbacks;
  j["generation_failed"] = generation_failed;
  j["left_start_lane"] = left_start_lane;
  j["ticks"] = ticks;
  return j.dump();
}

namespace {

AgentState transform_state(const AgentState& st, const Point2& c, double theta, double dt_shift) {
  const double co = std::cos(-theta), si = std::sin(-theta);
  AgentState out;
  out.t = st.t - dt_shift;
  const double dx = st.x - c.x(), dy = st.y - c.y();
  out.x = co * dx - si * dy;
  out.y = si * dx + co * dy;
  out.heading = wrap_angle(st.heading - theta);
  out.vx = co * st.vx - si * st.vy;
  out.vy = si * st.vx + co * st.vy;
  return out;
}

Point2 to_world(const Point2& p, const Point2& c, double theta) {
  const double co = std::cos(theta), si = std::sin(theta);
  return Point2(c.x() + co * p.x() - si * p.y(), c.y() + si * p.x() + co * p.y());
}

struct SimAgent {
  const AgentTrack* log = nullptr;
  std::vector<AgentState> realized;  // history then simulated, last = current
  // reactive bookkeeping
  std::vector<Point2> path;
  std::vector<double> cum;
  double s = 0.0, v = 0.0, v0 = 0.0;
  bool parked = false;
  double last_accel = 0.0;
};

Point2 path_point(const std::vector<Point2>& path, const std::vector<double>& cum, double s,
                  double* heading) {
  if (s <= 0.0) s = 0.0;
  std::size_t i = 1;
  while (i + 1 < path.size() && cum[i] < s) ++i;
  const Point2 a = path[i - 1], b = path[i];
  const double seg = cum[i] - cum[i - 1];
  const double u = seg > 1e-12 ? std::clamp((s - cum[i - 1]) / seg, 0.0, 1.0) : 0.0;
  if (heading) {
    Point2 d = b - a;
    *heading = d.norm() > 1e-12 ? std::atan2(d.y(), d.x()) : 0.0;
  }
  return a + u * (b - a);
}

Trajectory braking_trajectory(const EgoState& e, int h, double dt, double decel) {
  Trajectory t(h, 2);
  const double t_stop = e.speed / std::max(decel, 1e-9);
  const double d_stop = 0.5 * e.speed * e.speed / std::max(decel, 1e-9);
  const Point2 dir(std::cos(e.heading), std::sin(e.heading));
  for (int j = 0; j < h; ++j) {
    double tt = dt * (j + 1);
    double d = tt < t_stop ? e.speed * tt - 0.5 * decel * tt * tt : d_stop;
    t(j, 0) = e.x + d * dir.x();
    t(j, 1) = e.y + d * dir.y();
  }
  return t;
}

}  // namespace

EpisodeReport run_episode(const Scenario& world, const ProposeFn& propose, const RunConfig& cfg,
                          const EpisodeParams& ep, std::ostream* trace) {
  if (world.ego.history.empty()) throw InputError("run_episode: empty ego history");
  const int h = cfg.horizon;
  const double dt = world.dt;
  const IdmParams idm = idm_from_config(cfg);

  EgoState ego;
  {
    const AgentState& st = world.ego.history.back();
    ego.x = st.x;
    ego.y = st.y;
    ego.heading = st.heading;
    ego.speed = std::hypot(st.vx, st.vy);
  }
  std::vector<AgentState> ego_realized = world.ego.history;

  std::vector<SimAgent> agents(world.agents.size());
  for (std::size_t a = 0; a < world.agents.size(); ++a) {
    SimAgent& sa = agents[a];
    sa.log = &world.agents[a];
    sa.realized = sa.log->history;
    if (ep.reactive) {
      const AgentState& cur = sa.realized.back();
      sa.path.push_back(Point2(cur.x, cur.y));
      for (const auto& st : sa.log->future) {
        Point2 p(st.x, st.y);
        if ((p - sa.path.back()).norm() > 1e-9) sa.path.push_back(p);
      }
      sa.cum.resize(sa.path.size(), 0.0);
      for (std::size_t i = 1; i < sa.path.size(); ++i)
        sa.cum[i] = sa.cum[i - 1] + (sa.path[i] - sa.path[i - 1]).norm();
      double vs = 0.0;
      int n = 0;
      for (const auto& st : sa.log->future) {
        vs += std::hypot(st.vx, st.vy);
        if (++n >= 10) break;
      }
      sa.v0 = n > 0 ? vs / n : 0.0;
      sa.parked = sa.v0 < 0.5 || sa.path.size() < 2;
      sa.v = std::hypot(sa.realized.back().vx, sa.realized.back().vy);
    }
  }

  EpisodeReport rep;
  rep.ticks = ep.ticks;
  const double s_start = project_onto_path(world.corridor.center, Point2(ego.x, ego.y)).s;
  const double bound = world.corridor.half_width + cfg.corridor_margin;

  Trajectory plan;
  Point2 plan_origin(ego.x, ego.y);
  int plan_tick = 0;
  int chosen_idx = -1;
  bool plan_is_fallback = false;
  double prev_accel = 0.0;
  bool have_accel = false;

  for (int tick = 0; tick < ep.ticks; ++tick) {
    if (tick % ep.replan_period == 0) {
      ++rep.replans;
      // Scene snapshot centered on the ego but aligned with the corridor
      // tangent, so mid-maneuver poses stay close to the pose distribution
      // the planner was trained on.
      const Point2 c(ego.x, ego.y);
      double th = ego.heading;
      {
        const auto& cc = world.corridor.center;
        const PathProjection pc = project_onto_path(cc, c);
        const std::size_t si = std::min(pc.segment, cc.size() - 2);
        const Point2 tang = cc[si + 1] - cc[si];
        if (tang.norm() > 1e-9) th = std::atan2(tang.y(), tang.x());
      }
      Scenario snap;
      snap.kind = world.kind;
      snap.seed = world.seed;
      snap.dt = dt;
      snap.map_polylines = world.map_polylines;
      for (auto& m : snap.map_polylines)
        for (auto& p : m.points) {
          AgentState tmp = transform_state(state_at(0.0, p, 0.0, 0.0), c, th, 0.0);
          p = Point2(tmp.x, tmp.y);
        }
      for (const auto& sa : agents) {
        AgentTrack at;
        at.id = sa.log->id;
        at.length = sa.log->length;
        at.width = sa.log->width;
        std::size_t first = sa.realized.size() > kHistoryLen
                                ? sa.realized.size() - kHistoryLen
                                : 0;
        for (std::size_t i = first; i < sa.realized.size(); ++i)
          at.history.push_back(transform_state(sa.realized[i], c, th, tick * dt));
        snap.agents.push_back(std::move(at));
      }
      snap.ego.length = world.ego.length;
      snap.ego.width = world.ego.width;
      {
        std::size_t first =
            ego_realized.size() > kHistoryLen ? ego_realized.size() - kHistoryLen : 0;
        for (std::size_t i = first; i < ego_realized.size(); ++i)
          snap.ego.history.push_back(transform_state(ego_realized[i], c, th, tick * dt));
      }

      // Predictions for the horizon starting next tick.
      AgentPredictions preds(agents.size());
      for (std::size_t a = 0; a < agents.size(); ++a) {
        if (!ep.reactive) {
          const auto& fut = world.agents[a].future;
          for (int j = 0; j < h; ++j) {
            int idx = std::min(tick + j, int(fut.size()) - 1);
            preds[a].push_back(idx >= 0 ? fut[std::size_t(idx)]
                                        : world.agents[a].history.back());
          }
        } else {
          const AgentState& cur = agents[a].realized.back();
          const double sp = agents[a].parked ? 0.0 : agents[a].v;
          for (int j = 0; j < h; ++j) {
            AgentState st = cur;
            st.t = cur.t + dt * (j + 1);
            st.x += sp * std::cos(cur.heading) * dt * (j + 1);
            st.y += sp * std::sin(cur.heading) * dt * (j + 1);
            preds[a].push_back(st);
          }
        }
      }

      std::vector<Trajectory> world_trajs;
      bool gen_failed = false;
      try {
        const std::uint64_t replan_seed = ep.seed + 1000003ull * std::uint64_t(rep.replans);
        for (const auto& t : propose(snap, replan_seed)) {
          Trajectory w(t.rows(), 2);
          for (Index j = 0; j < t.rows(); ++j) {
            Point2 p = to_world(Point2(t(j, 0), t(j, 1)), c, th);
            w(j, 0) = p.x();
            w(j, 1) = p.y();
          }
          world_trajs.push_back(std::move(w));
        }
      } catch (const std::exception&) {
        gen_failed = true;
        rep.generation_failed = true;
      }

      std::optional<int> pick;
      if (!gen_failed && !world_trajs.empty())
        pick = select_trajectory(world_trajs, world, preds, cfg);
      if (pick) {
        plan = world_trajs[std::size_t(*pick)];
        chosen_idx = *pick;
        plan_is_fallback = false;
      } else {
        plan = braking_trajectory(ego, h, dt, cfg.idm_b_comf);
        chosen_idx = -1;
        plan_is_fallback = true;
        ++rep.fallbacks;
      }
      plan_origin = Point2(ego.x, ego.y);
      plan_tick = tick;
    }

    // Ego tracking step.
    const int j_plan = std::min(tick - plan_tick, h - 1);
    const Point2 prev_wp = j_plan == 0 ? plan_origin
                                       : Point2(plan(j_plan - 1, 0), plan(j_plan - 1, 1));
    const Point2 cur_wp(plan(j_plan, 0), plan(j_plan, 1));
    const double v_ref = (cur_wp - prev_wp).norm() / dt;
    const double a_cmd = std::clamp((v_ref - ego.speed) / dt, -cfg.idm_b_max, 4.0);
    const double v_new = std::max(0.0, ego.speed + a_cmd * dt);

    const double lookahead = std::clamp(1.0 + 0.5 * v_new, 2.0, 6.0);
    Index nearest = 0;
    double best_d = std::numeric_limits<double>::max();
    for (Index j = 0; j < plan.rows(); ++j) {
      double d = (Point2(plan(j, 0), plan(j, 1)) - Point2(ego.x, ego.y)).norm();
      if (d < best_d) {
        best_d = d;
        nearest = j;
      }
    }
    Index target = nearest;
    while (target + 1 < plan.rows() &&
           (Point2(plan(target, 0), plan(target, 1)) - Point2(ego.x, ego.y)).norm() < lookahead)
      ++target;
    const Point2 tp(plan(target, 0), plan(target, 1));
    const double dist = std::max((tp - Point2(ego.x, ego.y)).norm(), 0.5);
    const double bearing = std::atan2(tp.y() - ego.y, tp.x() - ego.x);
    const double dpsi = wrap_angle(bearing - ego.heading);
    double kappa = 2.0 * std::sin(dpsi) / dist;
    kappa = std::clamp(kappa, -0.35, 0.35);
    if (v_new > 1e-6) ego.heading = wrap_angle(ego.heading + v_new * kappa * dt);
    ego.x += v_new * std::cos(ego.heading) * dt;
    ego.y += v_new * std::sin(ego.heading) * dt;
    const double realized_accel = (v_new - ego.speed) / dt;
    ego.speed = v_new;
    ego_realized.push_back(
        state_at(dt * (tick + 1), Point2(ego.x, ego.y), ego.heading, ego.speed));
    ego_realized.back().t = dt * (tick + 1);

    // Agent step.
    for (std::size_t a = 0; a < agents.size(); ++a) {
      SimAgent& sa = agents[a];
      if (!ep.reactive) {
        const auto& fut = world.agents[a].future;
        AgentState st = fut.empty() ? sa.realized.back()
                                    : fut[std::size_t(std::min(tick, int(fut.size()) - 1))];
        sa.last_accel = 0.0;
        sa.realized.push_back(st);
      } else if (sa.parked) {
        AgentState st = sa.realized.back();
        st.t += dt;
        sa.last_accel = 0.0;
        sa.realized.push_back(st);
      } else {
        double gap = std::numeric_limits<double>::infinity();
        double dv = 0.0;
        const PathProjection pe = project_onto_path(sa.path, Point2(ego.x, ego.y));
        if (std::abs(pe.lateral) < 2.0 && pe.s > sa.s) {
          gap = pe.s - sa.s - 0.5 * (sa.log->length + cfg.ego_length);
          dv = sa.v - ego.speed;
        }
        const double acc = idm_accel(sa.v, std::max(sa.v0, 0.5), gap, dv, idm);
        sa.last_accel = acc;
        sa.v = std::max(0.0, sa.v + acc * dt);
        sa.s = std::min(sa.s + sa.v * dt, sa.cum.back());
        double heading = sa.realized.back().heading;
        const Point2 p = path_point(sa.path, sa.cum, sa.s, &heading);
        sa.realized.push_back(state_at(dt * (tick + 1), p, heading, sa.v));
      }
    }

    // Metrics on the post-step state.
    OrientedBox ego_box;
    ego_box.center = Point2(ego.x, ego.y);
    ego_box.heading = ego.heading;
    ego_box.length = cfg.ego_length;
    ego_box.width = cfg.ego_width;
    bool hit = false;
    for (const auto& sa : agents)
      if (boxes_overlap(ego_box, agent_box(sa.realized.back(), *sa.log))) hit = true;
    if (hit) ++rep.collisions;
    if (std::abs(project_onto_path(world.corridor.center, ego_box.center).lateral) > bound)
      ++rep.off_drivable_ticks;
    if (!world.ego_lane_center.empty() &&
        std::abs(project_onto_path(world.ego_lane_center, ego_box.center).lateral) >
            cfg.lane_width / 2.0)
      rep.left_start_lane = true;
    rep.max_accel = std::max(rep.max_accel, std::abs(realized_accel));
    if (have_accel)
      rep.max_jerk = std::max(rep.max_jerk, std::abs(realized_accel - prev_accel) / dt);
    prev_accel = realized_accel;
    have_accel = true;

    if (trace) {
      json line;
      line["tick"] = tick + 1;
      line["ego"] = {ego.x, ego.y, ego.heading, ego.speed};
      line["chosen"] = chosen_idx;
      line["fallback"] = plan_is_fallback;
      json ags = json::array();
      for (const auto& sa : agents) {
        const AgentState& st = sa.realized.back();
        ags.push_back({st.x, st.y, st.heading, sa.last_accel});
      }
      line["agents"] = std::move(ags);
      (*trace) << line.dump() << "\n";
    }
  }

  rep.progress = project_onto_path(world.corridor.center, Point2(ego.x, ego.y)).s - s_start;
  const double progress_norm = std::clamp(rep.progress / cfg.score_progress_ref, 0.0, 1.0);
  const double drivable_frac =
      1.0 - double(rep.off_drivable_ticks) / std::max(1, rep.ticks);
  const double comfort_norm =
      0.5 * std::clamp(1.0 - rep.max_accel / cfg.score_accel_ref, 0.0, 1.0) +
      0.5 * std::clamp(1.0 - rep.max_jerk / cfg.score_jerk_ref, 0.0, 1.0);
  const double inner = cfg.score_w_progress * progress_norm + cfg.score_w_safety * drivable_frac +
                       cfg.score_w_comfort * comfort_norm;
  rep.score = inner / (1.0 + rep.collisions);
  return rep;
}

EpisodeReport run_episode(const Scenario& world, const Planner& planner, const EpisodeParams& ep,
                          std::ostream* trace) {
  ProposeFn propose = [&planner, &ep](const Scenario& snap, std::uint64_t seed) {
    return planner.generate(snap, ep.k, ep.alpha, seed).trajectories;
  };
  return run_episode(world, propose, planner.config(), ep, trace);
}

}  // namespace misty
