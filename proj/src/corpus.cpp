#include "misty/corpus.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace misty {

namespace {

double smoothstep01(double u) {
  u = std::clamp(u, 0.0, 1.0);
  return u * u * (3.0 - 2.0 * u);
}

// Smooth low-frequency noise curve evaluated at normalized time u in [0,1].
struct WobbleNoise {
  double a1, a2, a3, p1, p2, p3;
  WobbleNoise(Rng& rng, double amp) {
    a1 = amp * rng.uniform(0.4, 1.0);
    a2 = 0.55 * amp * rng.uniform(0.4, 1.0);
    a3 = 0.3 * amp * rng.uniform(0.4, 1.0);
    p1 = rng.uniform(0.0, 2.0 * M_PI);
    p2 = rng.uniform(0.0, 2.0 * M_PI);
    p3 = rng.uniform(0.0, 2.0 * M_PI);
  }
  double operator()(double u) const {
    return a1 * std::sin(2.0 * M_PI * u + p1) + a2 * std::sin(4.0 * M_PI * u + p2) +
           a3 * std::sin(6.0 * M_PI * u + p3);
  }
};

}  // namespace

int tag_of_label(int label16) {
  switch (label16) {
    case 12:
    case 13:
      return 0;  // stopping / stationary
    case 0:
    case 1:
    case 2:
    case 3:
      return 1;  // cruising
    case 10:
    case 11:
      return 2;  // lane change
    case 4:
    case 5:
    case 6:
      return 3;  // left turn
    case 7:
    case 8:
    case 9:
      return 4;  // right turn
    case 14:
    case 15:
      return 5;  // accelerate / evasive
    default:
      throw InputError("tag_of_label: label16 out of range");
  }
}

Trajectory make_class_trajectory(int label16, int horizon, double dt, Rng& rng, double jitter) {
  if (label16 < 0 || label16 > 15) throw InputError("make_class_trajectory: bad label");
  if (horizon < 2) throw InputError("make_class_trajectory: horizon too short");

  const double spd_jit = 1.0 + 0.18 * jitter * rng.uniform(-1.0, 1.0);
  const double geo_jit = 1.0 + 0.15 * jitter * rng.uniform(-1.0, 1.0);
  WobbleNoise lat_noise(rng, 0.12 * jitter);

  Trajectory out(horizon, 2);
  const double tf = horizon * dt;

  auto fill_straight = [&](auto speed_at, auto lateral_at) {
    double x = 0.0;
    for (int t = 0; t < horizon; ++t) {
      const double tt = (t + 1) * dt;
      x += speed_at(tt) * dt;
      const double u = tt / tf;
      out(t, 0) = x;
      out(t, 1) = lateral_at(tt) + lat_noise(u);
    }
  };

  switch (label16) {
    case 0:
    case 1:
    case 2:
    case 3: {
      const double v = (3.0 + 3.0 * label16) * spd_jit;
      fill_straight([&](double) { return v; }, [](double) { return 0.0; });
      break;
    }
    case 4:
    case 5:
    case 6:
    case 7:
    case 8:
    case 9: {
      const bool left = label16 <= 6;
      const int tier = left ? label16 - 4 : label16 - 7;
      const double radius = (tier == 0 ? 12.0 : tier == 1 ? 25.0 : 45.0) * geo_jit;
      const double v = 6.0 * spd_jit;
      const double sign = left ? 1.0 : -1.0;
      for (int t = 0; t < horizon; ++t) {
        const double tt = (t + 1) * dt;
        const double th = v * tt / radius;
        const double u = tt / tf;
        out(t, 0) = radius * std::sin(th);
        out(t, 1) = sign * radius * (1.0 - std::cos(th)) + lat_noise(u);
      }
      break;
    }
    case 10:
    case 11: {
      const double v = 8.0 * spd_jit;
      const double shift = (label16 == 10 ? 3.5 : -3.5) * geo_jit;
      const double t0 = 1.5, t1 = 5.5;
      fill_straight([&](double) { return v; },
                    [&](double tt) { return shift * smoothstep01((tt - t0) / (t1 - t0)); });
      break;
    }
    case 12: {
      WobbleNoise creep(rng, 0.03 * jitter);
      for (int t = 0; t < horizon; ++t) {
        const double u = (t + 1) * dt / tf;
        out(t, 0) = creep(u);
        out(t, 1) = lat_noise(u) * 0.25;
      }
      break;
    }
    case 13: {
      const double v0 = 8.0 * spd_jit;
      const double t_stop = 5.0 * geo_jit;
      fill_straight(
          [&](double tt) { return tt >= t_stop ? 0.0 : v0 * (1.0 - tt / t_stop); },
          [](double) { return 0.0; });
      break;
    }
    case 14: {
      const double v1 = 10.0 * spd_jit;
      fill_straight([&](double tt) { return 0.5 + (v1 - 0.5) * tt / tf; },
                    [](double) { return 0.0; });
      break;
    }
    case 15: {
      const double v = 8.0 * spd_jit;
      const double amp = 2.2 * geo_jit;
      const double tc = 0.45 * tf, w = 0.16 * tf;
      fill_straight([&](double) { return v; }, [&](double tt) {
        const double d = (tt - tc) / w;
        return amp * std::exp(-d * d);
      });
      break;
    }
    default:
      throw InputError("make_class_trajectory: bad label");
  }
  return out;
}

Corpus make_corpus(const RunConfig& cfg, std::uint64_t seed, int size, double jitter) {
  if (size <= 0) throw InputError("make_corpus: size must be positive");
  Corpus c;
  c.seed = seed;
  c.horizon = cfg.horizon;
  c.dt = cfg.dt;
  Rng rng(seed);
  c.items.reserve(static_cast<std::size_t>(size));
  for (int i = 0; i < size; ++i) {
    CorpusItem item;
    item.label16 = i % 16;
    item.tag6 = tag_of_label(item.label16);
    item.traj = make_class_trajectory(item.label16, cfg.horizon, cfg.dt, rng, jitter);
    c.items.push_back(std::move(item));
  }
  return c;
}

std::string Corpus::to_json() const {
  nlohmann::ordered_json j;
  j["schema_version"] = schema_version;
  j["seed"] = seed;
  j["horizon"] = horizon;
  j["dt"] = dt;
  auto arr = nlohmann::ordered_json::array();
  for (const auto& item : items) {
    nlohmann::ordered_json ji;
    ji["tag6"] = item.tag6;
    ji["label16"] = item.label16;
    auto pts = nlohmann::ordered_json::array();
    for (Index t = 0; t < item.traj.rows(); ++t)
      pts.push_back({item.traj(t, 0), item.traj(t, 1)});
    ji["traj"] = std::move(pts);
    arr.push_back(std::move(ji));
  }
  j["items"] = std::move(arr);
  return j.dump() + "\n";
}

Corpus Corpus::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("corpus parse: ") + e.what());
  }
  Corpus c;
  try {
    c.schema_version = j.at("schema_version").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.horizon = j.at("horizon").get<int>();
    c.dt = j.at("dt").get<double>();
    for (const auto& ji : j.at("items")) {
      CorpusItem item;
      item.tag6 = ji.at("tag6").get<int>();
      item.label16 = ji.at("label16").get<int>();
      const auto& pts = ji.at("traj");
      item.traj.resize(static_cast<Index>(pts.size()), 2);
      for (Index t = 0; t < item.traj.rows(); ++t) {
        item.traj(t, 0) = pts[t][0].get<double>();
        item.traj(t, 1) = pts[t][1].get<double>();
      }
      if (item.traj.rows() != c.horizon)
        throw ParseError("corpus item horizon mismatch");
      c.items.push_back(std::move(item));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("corpus field: ") + e.what());
  }
  return c;
}

Corpus Corpus::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("corpus load: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

void Corpus::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("corpus save: cannot open " + path);
  out << to_json();
  if (!out) throw IoError("corpus save: write failed " + path);
}

}  // namespace misty
