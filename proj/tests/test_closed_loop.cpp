#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <limits>
#include <sstream>

#include "misty/closed_loop.hpp"

using namespace misty;

namespace {

RunConfig small_cfg() {
  RunConfig cfg;
  return cfg;
}

Trajectory straight_line(int h, double dt, double speed, double y = 0.0) {
  Trajectory t(h, 2);
  for (int j = 0; j < h; ++j) {
    t(j, 0) = speed * dt * (j + 1);
    t(j, 1) = y;
  }
  return t;
}

}  // namespace

TEST_CASE("wrap_angle maps into (-pi, pi]") {
  CHECK(wrap_angle(0.0) == 0.0);
  CHECK(wrap_angle(M_PI) == doctest::Approx(M_PI));
  CHECK(wrap_angle(-M_PI) == doctest::Approx(M_PI));
  CHECK(wrap_angle(3.0 * M_PI) == doctest::Approx(M_PI));
  CHECK(wrap_angle(2.0 * M_PI + 0.25) == doctest::Approx(0.25));
  CHECK(wrap_angle(-7.5 * M_PI) == doctest::Approx(0.5 * M_PI));
}

TEST_CASE("idm free flow at set speed is numerically zero") {
  IdmParams p;
  Rng rng(41);
  for (int i = 0; i < 100; ++i) {
    double v0 = rng.uniform(1.0, 30.0);
    double a = idm_accel(v0, v0, std::numeric_limits<double>::infinity(), 0.0, p);
    CHECK(std::abs(a) < 1e-9);
  }
}

TEST_CASE("idm standstill on a free road accelerates at a_max") {
  IdmParams p;
  double a = idm_accel(0.0, 13.0, std::numeric_limits<double>::infinity(), 0.0, p);
  CHECK(a == doctest::Approx(p.a_max));
}

TEST_CASE("idm closing fast on a stopped leader brakes") {
  IdmParams p;
  double a = idm_accel(12.0, 13.0, 15.0, 12.0, p);
  CHECK(a < 0.0);
  CHECK(a >= -p.b_max);
}

TEST_CASE("idm nonpositive gap gives emergency braking") {
  IdmParams p;
  CHECK(idm_accel(5.0, 13.0, 0.0, 0.0, p) == -p.b_max);
  CHECK(idm_accel(5.0, 13.0, -2.0, 3.0, p) == -p.b_max);
}

TEST_CASE("idm below set speed on a free road accelerates") {
  IdmParams p;
  double a = idm_accel(6.0, 13.0, std::numeric_limits<double>::infinity(), 0.0, p);
  CHECK(a > 0.0);
  CHECK(a < p.a_max);
}

TEST_CASE("idm rejects nonpositive set speed") {
  IdmParams p;
  CHECK_THROWS_AS(idm_accel(5.0, 0.0, 10.0, 0.0, p), InputError);
}

TEST_CASE("boxes_overlap axis-aligned cases") {
  OrientedBox a;
  a.center = Point2(0, 0);
  a.length = 4.0;
  a.width = 2.0;
  OrientedBox b = a;

  b.center = Point2(3.0, 0.0);
  CHECK(boxes_overlap(a, b));
  b.center = Point2(4.1, 0.0);
  CHECK_FALSE(boxes_overlap(a, b));
  b.center = Point2(4.0, 0.0);  // touching edges count
  CHECK(boxes_overlap(a, b));
  b.center = Point2(0.0, 2.1);
  CHECK_FALSE(boxes_overlap(a, b));
}

TEST_CASE("boxes_overlap rotated cases") {
  OrientedBox a;
  a.center = Point2(0, 0);
  a.length = 4.0;
  a.width = 2.0;

  OrientedBox b = a;
  b.heading = M_PI / 2.0;  // long side now vertical, half-extent along x is 1
  b.center = Point2(3.1, 0.0);  // 2 + 1 = 3 < 3.1: separated along x
  CHECK_FALSE(boxes_overlap(a, b));
  b.center = Point2(2.9, 0.0);
  CHECK(boxes_overlap(a, b));
  b.center = Point2(2.5, 0.0);
  CHECK(boxes_overlap(a, b));

  // Diagonal box whose corner pokes into a.
  b.heading = M_PI / 4.0;
  b.center = Point2(2.5, 1.8);
  CHECK(boxes_overlap(a, b));
  b.center = Point2(4.5, 3.8);
  CHECK_FALSE(boxes_overlap(a, b));
}

TEST_CASE("log_predictions replays futures and holds the last state") {
  RunConfig cfg = small_cfg();
  Scenario s = make_scenario("straight", 3, cfg);
  const auto& fut = s.agents[0].future;
  auto preds = log_predictions(s, 0, cfg.horizon);
  REQUIRE(preds.size() == s.agents.size());
  REQUIRE(int(preds[0].size()) == cfg.horizon);
  CHECK(preds[0][0].x == fut[0].x);
  CHECK(preds[0][5].x == fut[5].x);

  auto late = log_predictions(s, int(fut.size()) + 10, 4);
  CHECK(late[0][0].x == fut.back().x);
  CHECK(late[0][3].x == fut.back().x);
}

TEST_CASE("hard_filter removes the trajectory through a blocker and keeps the expert") {
  RunConfig cfg = small_cfg();
  Scenario s = make_scenario("blocked", 11, cfg);
  auto preds = log_predictions(s, 0, cfg.horizon);

  double v_e = std::hypot(s.ego.history.back().vx, s.ego.history.back().vy);
  std::vector<Trajectory> cand;
  cand.push_back(straight_line(cfg.horizon, cfg.dt, v_e));  // plows into the blocker
  cand.push_back(s.expert);
  auto kept = hard_filter(cand, s, preds, cfg);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0] == 1);
}

TEST_CASE("hard_filter rejects waypoints outside the corridor") {
  RunConfig cfg = small_cfg();
  Scenario s = make_scenario("straight", 5, cfg);
  auto preds = log_predictions(s, 0, cfg.horizon);

  std::vector<Trajectory> cand;
  cand.push_back(s.expert);
  cand.push_back(straight_line(cfg.horizon, cfg.dt, 8.0,
                               s.corridor.half_width + cfg.corridor_margin + 0.2));
  auto kept = hard_filter(cand, s, preds, cfg);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0] == 0);
}

TEST_CASE("hard_filter agrees with a brute-force tick replay") {
  RunConfig cfg = small_cfg();
  Scenario s = make_scenario("blocked", 21, cfg);
  auto preds = log_predictions(s, 0, cfg.horizon);

  std::vector<Trajectory> cand = s.positives;
  double v_e = std::hypot(s.ego.history.back().vx, s.ego.history.back().vy);
  cand.push_back(straight_line(cfg.horizon, cfg.dt, v_e));
  cand.push_back(straight_line(cfg.horizon, cfg.dt, v_e, 9.0));

  auto kept = hard_filter(cand, s, preds, cfg);

  // Brute force: per candidate, replay every tick and re-derive validity.
  const double bound = s.corridor.half_width + cfg.corridor_margin;
  std::vector<int> expect;
  for (std::size_t k = 0; k < cand.size(); ++k) {
    bool ok = true;
    double heading = 0.0;
    {
      Point2 d(cand[k](cfg.horizon - 1, 0) - cand[k](0, 0),
               cand[k](cfg.horizon - 1, 1) - cand[k](0, 1));
      if (d.norm() > 1e-9) heading = std::atan2(d.y(), d.x());
    }
    for (int j = 0; ok && j < cfg.horizon; ++j) {
      Point2 p(cand[k](j, 0), cand[k](j, 1));
      if (j + 1 < cfg.horizon) {
        Point2 d(cand[k](j + 1, 0) - p.x(), cand[k](j + 1, 1) - p.y());
        if (d.norm() > 1e-9) heading = std::atan2(d.y(), d.x());
      }
      if (std::abs(project_onto_path(s.corridor.center, p).lateral) > bound) ok = false;
      OrientedBox ego{p, heading, cfg.ego_length, cfg.ego_width};
      for (std::size_t a = 0; ok && a < preds.size(); ++a) {
        const AgentState& st = preds[a][std::size_t(j)];
        OrientedBox ab{Point2(st.x, st.y), st.heading, s.agents[a].length, s.agents[a].width};
        if (boxes_overlap(ego, ab)) ok = false;
      }
    }
    if (ok) expect.push_back(int(k));
  }
  CHECK(kept == expect);
}

TEST_CASE("score rewards longer progress, all else equal") {
  RunConfig cfg = small_cfg();
  Scenario s = make_scenario("straight", 9, cfg);
  auto preds = log_predictions(s, 0, cfg.horizon);
  double slow = score_proposal(straight_line(cfg.horizon, cfg.dt, 5.0), s, preds, cfg);
  double fast = score_proposal(straight_line(cfg.horizon, cfg.dt, 8.0), s, preds, cfg);
  CHECK(fast > slow);
}

TEST_CASE("score matches a hand-computed fixture") {
  RunConfig cfg = small_cfg();
  Scenario s = make_scenario("straight", 2, cfg);
  // Constant speed along the corridor: zero accel and jerk, comfort = 1.
  const double v = 6.0;
  Trajectory t = straight_line(cfg.horizon, cfg.dt, v);
  AgentPredictions no_agents(s.agents.size());  // empty per-agent lists
  double got = score_proposal(t, s, no_agents, cfg);

  double progress = v * cfg.dt * cfg.horizon - v * cfg.dt;  // first to last waypoint
  double expect = cfg.score_w_progress * std::clamp(progress / cfg.score_progress_ref, 0.0, 1.0) +
                  cfg.score_w_safety * 1.0 + cfg.score_w_comfort * 1.0;
  CHECK(got == doctest::Approx(expect).epsilon(1e-9));
}

TEST_CASE("select picks the single survivor and reports none when empty") {
  RunConfig cfg = small_cfg();
  Scenario s = make_scenario("blocked", 13, cfg);
  auto preds = log_predictions(s, 0, cfg.horizon);
  double v_e = std::hypot(s.ego.history.back().vx, s.ego.history.back().vy);

  std::vector<Trajectory> cand;
  cand.push_back(straight_line(cfg.horizon, cfg.dt, v_e));  // blocked
  cand.push_back(s.expert);
  auto pick = select_trajectory(cand, s, preds, cfg);
  REQUIRE(pick.has_value());
  CHECK(*pick == 1);

  std::vector<Trajectory> doomed;
  doomed.push_back(straight_line(cfg.horizon, cfg.dt, v_e));
  CHECK_FALSE(select_trajectory(doomed, s, preds, cfg).has_value());
}

TEST_CASE("select is the argmax over survivors") {
  RunConfig cfg = small_cfg();
  Scenario s = make_scenario("straight", 17, cfg);
  auto preds = log_predictions(s, 0, cfg.horizon);
  std::vector<Trajectory> cand = s.positives;
  cand.push_back(s.expert);
  auto pick = select_trajectory(cand, s, preds, cfg);
  REQUIRE(pick.has_value());
  auto kept = hard_filter(cand, s, preds, cfg);
  double best = -1.0;
  int best_idx = -1;
  for (int idx : kept) {
    double sc = score_proposal(cand[std::size_t(idx)], s, preds, cfg);
    if (sc > best) {
      best = sc;
      best_idx = idx;
    }
  }
  CHECK(*pick == best_idx);
}

TEST_CASE("make_scenario is deterministic and planted sets are valid") {
  RunConfig cfg = small_cfg();
  for (const char* kind : {"straight", "curve", "blocked", "intersection"}) {
    for (std::uint64_t seed : {1ull, 7ull, 23ull}) {
      Scenario a = make_scenario(kind, seed, cfg);
      Scenario b = make_scenario(kind, seed, cfg);
      CHECK((a.expert - b.expert).cwiseAbs().maxCoeff() == 0.0);
      REQUIRE(a.positives.size() == b.positives.size());
      for (std::size_t i = 0; i < a.positives.size(); ++i)
        CHECK((a.positives[i] - b.positives[i]).cwiseAbs().maxCoeff() == 0.0);
      CHECK(a.positives.size() >= 2);
      CHECK(a.positives.size() <= 8);
      CHECK(a.ego.history.size() >= 2);
      // Positives and expert already pass the hard filter (generation
      // self-check); re-verify here.
      std::vector<Trajectory> all = a.positives;
      all.push_back(a.expert);
      auto kept = hard_filter(all, a, log_predictions(a, 0, cfg.horizon), cfg);
      CHECK(kept.size() == all.size());
    }
  }
  CHECK_THROWS_AS(make_scenario("zigzag", 1, small_cfg()), InputError);
}

TEST_CASE("blocked scenario has a stationary vehicle ahead in the ego lane") {
  RunConfig cfg = small_cfg();
  Scenario s = make_scenario("blocked", 33, cfg);
  bool found = false;
  for (const auto& a : s.agents) {
    const AgentState& st = a.history.back();
    if (std::hypot(st.vx, st.vy) < 1e-9 && st.x > 5.0 && std::abs(st.y) < 0.5) found = true;
  }
  CHECK(found);
}

TEST_CASE("scripted proposer tracks a straight plan without incident") {
  RunConfig cfg = small_cfg();
  Scenario s = make_scenario("straight", 4, cfg);
  s.agents.clear();  // empty road

  ProposeFn propose = [&cfg](const Scenario& snap, std::uint64_t) {
    double v = std::hypot(snap.ego.history.back().vx, snap.ego.history.back().vy);
    if (v < 1.0) v = 8.0;
    return std::vector<Trajectory>{straight_line(cfg.horizon, cfg.dt, v)};
  };

  EpisodeParams ep;
  ep.ticks = 80;
  EpisodeReport rep = run_episode(s, propose, cfg, ep);
  CHECK(rep.collisions == 0);
  CHECK(rep.off_drivable_ticks == 0);
  CHECK(rep.fallbacks == 0);
  CHECK(rep.progress > 30.0);
  CHECK(rep.score > 0.5);
  CHECK(rep.replans == 8);
  CHECK_FALSE(rep.left_start_lane);
}

TEST_CASE("proposer failure falls back to braking and stops the ego") {
  RunConfig cfg = small_cfg();
  Scenario s = make_scenario("straight", 4, cfg);
  s.agents.clear();

  ProposeFn propose = [](const Scenario&, std::uint64_t) -> std::vector<Trajectory> {
    throw GenerationError("scripted failure");
  };
  EpisodeParams ep;
  ep.ticks = 60;
  EpisodeReport rep = run_episode(s, propose, cfg, ep);
  CHECK(rep.generation_failed);
  CHECK(rep.fallbacks == rep.replans);
  CHECK(rep.collisions == 0);
  // Initial speed is at most 12 m/s; comfortable braking stops within 5 s.
  CHECK(rep.progress < 12.0 * 12.0 / (2.0 * cfg.idm_b_comf) + 2.0);
}

TEST_CASE("reactive slow leader keeps a positive gap to the braking ego") {
  RunConfig cfg = small_cfg();
  Scenario s = make_scenario("straight", 8, cfg);
  // Re-seat the lead close and slow so the ego must interact with it.
  REQUIRE(s.agents.size() == 1);
  {
    AgentTrack slow;
    slow.id = 1;
    for (int i = 19; i >= 0; --i) {
      AgentState st;
      st.t = -cfg.dt * i;
      st.x = 25.0 + 3.0 * st.t;
      st.y = 0.0;
      st.vx = 3.0;
      st.vy = 0.0;
      slow.history.push_back(st);
    }
    for (int i = 1; i <= 2 * cfg.horizon + 16; ++i) {
      AgentState st;
      st.t = cfg.dt * i;
      st.x = 25.0 + 3.0 * st.t;
      st.y = 0.0;
      st.vx = 3.0;
      st.vy = 0.0;
      slow.future.push_back(st);
    }
    s.agents[0] = slow;
  }

  // Proposer follows at the leader-matched IDM speed: decelerate toward the
  // predicted gap each replan.
  ProposeFn propose = [&cfg](const Scenario& snap, std::uint64_t) {
    double v = std::hypot(snap.ego.history.back().vx, snap.ego.history.back().vy);
    double gap = std::numeric_limits<double>::infinity();
    double v_lead = 0.0;
    for (const auto& a : snap.agents) {
      const AgentState& st = a.history.back();
      if (std::abs(st.y) < 2.0 && st.x > 0.0 && st.x < gap) {
        gap = st.x - 0.5 * (a.length + cfg.ego_length);
        v_lead = std::hypot(st.vx, st.vy);
      }
    }
    IdmParams p = idm_from_config(cfg);
    Trajectory t(cfg.horizon, 2);
    double x = 0.0, vv = v;
    for (int j = 0; j < cfg.horizon; ++j) {
      double a = idm_accel(vv, 13.0, gap - x + v_lead * cfg.dt * j, vv - v_lead, p);
      vv = std::max(0.0, vv + a * cfg.dt);
      x += vv * cfg.dt;
      t(j, 0) = x;
      t(j, 1) = 0.0;
    }
    return std::vector<Trajectory>{t};
  };

  EpisodeParams ep;
  ep.ticks = 80;
  ep.reactive = true;
  EpisodeReport rep = run_episode(s, propose, cfg, ep);
  CHECK(rep.collisions == 0);
  CHECK(rep.progress > 10.0);
}

TEST_CASE("episodes are deterministic for fixed seeds and mode") {
  RunConfig cfg = small_cfg();
  Scenario s = make_scenario("curve", 6, cfg);

  ProposeFn propose = [&cfg](const Scenario& snap, std::uint64_t seed) {
    Rng r(seed);
    double v = std::hypot(snap.ego.history.back().vx, snap.ego.history.back().vy);
    std::vector<Trajectory> out;
    for (int k = 0; k < 4; ++k)
      out.push_back(straight_line(cfg.horizon, cfg.dt, v * r.uniform(0.8, 1.0)));
    return out;
  };

  EpisodeParams ep;
  ep.ticks = 40;
  ep.seed = 123;
  std::ostringstream t1, t2;
  EpisodeReport a = run_episode(s, propose, cfg, ep, &t1);
  EpisodeReport b = run_episode(s, propose, cfg, ep, &t2);
  CHECK(a.to_json() == b.to_json());
  CHECK(t1.str() == t2.str());

  EpisodeParams ep2 = ep;
  ep2.seed = 124;
  std::ostringstream t3;
  run_episode(s, propose, cfg, ep2, &t3);
  CHECK(t1.str() != t3.str());
}

TEST_CASE("episode report serializes every field") {
  EpisodeReport rep;
  rep.collisions = 1;
  rep.progress = 12.5;
  rep.left_start_lane = true;
  std::string j = rep.to_json();
  CHECK(j.find("\"collisions\":1") != std::string::npos);
  CHECK(j.find("\"progress\":12.5") != std::string::npos);
  CHECK(j.find("\"left_start_lane\":true") != std::string::npos);
}
