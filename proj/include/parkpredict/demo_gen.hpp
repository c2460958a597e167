#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "parkpredict/errors.hpp"
#include "parkpredict/geometry.hpp"
#include "parkpredict/lot.hpp"

namespace parkpredict {

/// One Euler step of the unicycle model shared by the simulator and the EKF.
inline Pose unicycle_step(const Pose& p, double v, double omega, double dt) {
  return {p.x + v * std::cos(p.theta) * dt, p.y + v * std::sin(p.theta) * dt, wrap_angle(p.theta + omega * dt)};
}

enum class Maneuver { kForward, kReverse };

inline std::string to_string(Maneuver m) { return m == Maneuver::kForward ? "forward" : "reverse"; }

inline Maneuver maneuver_from_string(const std::string& s) {
  if (s == "forward") return Maneuver::kForward;
  if (s == "reverse") return Maneuver::kReverse;
  throw DataError("unknown maneuver '" + s + "'");
}

struct TimedPose {
  double t = 0.0;
  Pose pose;
  friend bool operator==(const TimedPose&, const TimedPose&) = default;
};

struct Demonstration {
  std::string id;
  double dt = 0.1;
  LotConfig lot;
  OccupancyMatrix occupancy;
  std::vector<TimedPose> poses;
  std::optional<double> intent_time;
  int chosen_spot = 0;  // 1..G
  Maneuver maneuver = Maneuver::kForward;

  friend bool operator==(const Demonstration&, const Demonstration&) = default;
};

inline void to_json(nlohmann::json& j, const Demonstration& d) {
  nlohmann::json poses = nlohmann::json::array();
  for (const auto& p : d.poses) poses.push_back({p.t, p.pose.x, p.pose.y, p.pose.theta});
  j = nlohmann::json{{"id", d.id},
                     {"dt", d.dt},
                     {"lot", d.lot},
                     {"occupancy", d.occupancy},
                     {"poses", std::move(poses)},
                     {"intent_time", d.intent_time ? nlohmann::json(*d.intent_time) : nlohmann::json(nullptr)},
                     {"chosen_spot", d.chosen_spot},
                     {"maneuver", to_string(d.maneuver)}};
}

inline void from_json(const nlohmann::json& j, Demonstration& d) {
  try {
    d.id = j.at("id").get<std::string>();
    d.dt = j.at("dt").get<double>();
    d.lot = j.at("lot").get<LotConfig>();
    d.occupancy = j.at("occupancy").get<OccupancyMatrix>();
    d.poses.clear();
    for (const auto& p : j.at("poses")) {
      if (!p.is_array() || p.size() != 4) throw DataError("poses entries must be [t, x, y, theta]");
      d.poses.push_back({p[0].get<double>(), {p[1].get<double>(), p[2].get<double>(), p[3].get<double>()}});
    }
    if (j.contains("intent_time") && !j.at("intent_time").is_null())
      d.intent_time = j.at("intent_time").get<double>();
    else
      d.intent_time.reset();
    d.chosen_spot = j.at("chosen_spot").get<int>();
    d.maneuver = maneuver_from_string(j.at("maneuver").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed demonstration: ") + e.what());
  }
}

// ---------------------------------------------------------------------------------------------
// Path planning

/// curvature is heading change per signed displacement along the heading (omega / v), so a
/// reversing arc that swings the nose left has negative curvature.
struct PathSegment {
  double length = 0.0;  // unsigned arc length
  double curvature = 0.0;
  int gear = 1;  // +1 forward, -1 reverse
  double speed_limit = 1.0;
};

struct PathWaypoint {
  Pose pose;
  double s = 0.0;  // cumulative unsigned arc length
  double curvature = 0.0;
  int gear = 1;
  double speed_limit = 1.0;
  double speed = 1.0;  // planned speed magnitude, filled by apply_speed_profile
};

struct SpeedProfile {
  double cruise = 3.0;  // lane travel
  double turn = 1.0;    // turn-in arcs
  double entry = 1.0;   // inside the spot
  double accel = 1.0;   // m/s^2, both directions
  double floor = 0.2;   // minimum creeping speed at starts, stops and cusps
};

struct PlannerConfig {
  double min_turn_radius = 4.5;
  double spacing = 0.1;  // waypoint spacing along the path
  SpeedProfile speeds;
};

/// Samples the exact geometry of the segment chain every `spacing` meters (plus every segment end).
inline std::vector<PathWaypoint> sample_path(const Pose& start, const std::vector<PathSegment>& segments,
                                             double spacing = 0.1) {
  std::vector<PathWaypoint> out;
  Pose p = start;
  double s_total = 0.0;
  for (const auto& seg : segments) {
    if (seg.length <= 0.0) continue;
    const int n = std::max(1, static_cast<int>(std::ceil(seg.length / spacing - 1e-9)));
    const Pose p0 = p;
    for (int k = 0; k < n; ++k) {
      const double s = seg.length * k / n;
      const double d = seg.gear * s;
      Pose q;
      if (std::abs(seg.curvature) < 1e-12) {
        q = {p0.x + d * std::cos(p0.theta), p0.y + d * std::sin(p0.theta), p0.theta};
      } else {
        const double th = p0.theta + seg.curvature * d;
        q = {p0.x + (std::sin(th) - std::sin(p0.theta)) / seg.curvature,
             p0.y - (std::cos(th) - std::cos(p0.theta)) / seg.curvature, wrap_angle(th)};
      }
      out.push_back({q, s_total + s, seg.curvature, seg.gear, seg.speed_limit, seg.speed_limit});
    }
    const double d = seg.gear * seg.length;
    if (std::abs(seg.curvature) < 1e-12) {
      p = {p0.x + d * std::cos(p0.theta), p0.y + d * std::sin(p0.theta), p0.theta};
    } else {
      const double th = p0.theta + seg.curvature * d;
      p = {p0.x + (std::sin(th) - std::sin(p0.theta)) / seg.curvature,
           p0.y - (std::cos(th) - std::cos(p0.theta)) / seg.curvature, wrap_angle(th)};
    }
    s_total += seg.length;
  }
  if (!out.empty()) {
    const auto& last = out.back();
    out.push_back({p, s_total, last.curvature, last.gear, last.speed_limit, last.speed_limit});
  }
  return out;
}

/// Trapezoidal speed profile: accelerate from `floor` at the start of every gear run, respect each
/// waypoint's limit, and decelerate back to `floor` at cusps and at the end.
inline void apply_speed_profile(std::vector<PathWaypoint>& path, const SpeedProfile& sp) {
  const std::size_t n = path.size();
  if (n == 0) return;
  auto run_boundary = [&](std::size_t i) { return i + 1 < n && path[i + 1].gear != path[i].gear; };
  // A waypoint where the gear flips ends the previous run; the sample there belongs to the new run,
  // so the stop happens at the last sample of the old run.
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = std::max(sp.floor, path[i].speed_limit);
  v[n - 1] = sp.floor;
  for (std::size_t i = n - 1; i-- > 0;) {
    if (run_boundary(i)) {
      v[i] = sp.floor;
      continue;
    }
    const double ds = path[i + 1].s - path[i].s;
    v[i] = std::min(v[i], std::sqrt(v[i + 1] * v[i + 1] + 2.0 * sp.accel * ds));
  }
  v[0] = std::min(v[0], sp.floor);
  for (std::size_t i = 1; i < n; ++i) {
    if (path[i].gear != path[i - 1].gear) {
      v[i] = std::min(v[i], sp.floor);
      continue;
    }
    const double ds = path[i].s - path[i - 1].s;
    v[i] = std::min(v[i], std::sqrt(v[i - 1] * v[i - 1] + 2.0 * sp.accel * ds));
  }
  for (std::size_t i = 0; i < n; ++i) path[i].speed = std::max(sp.floor, v[i]);
}

/// Lane-following turn-in path from `start` to the centre of `spot`.
///
/// Forward: lane travel, quarter arc of radius r_min, straight into the spot.
/// Reverse: lane travel past the spot by r_min, reversing quarter arc, straight back into the spot.
/// A start pose already on the spot axis facing into it yields a single straight segment.
inline std::vector<PathWaypoint> plan_parking_path(const Pose& start, const Spot& spot, Maneuver maneuver,
                                                   const PlannerConfig& cfg = {}) {
  const double r = cfg.min_turn_radius;
  const auto& sp = cfg.speeds;
  const Vec2 to_spot = spot.center - start.position();

  // Degenerate case: already nose-in on the spot axis.
  const Vec2 spot_dir{std::cos(spot.heading), std::sin(spot.heading)};
  const double along = dot(to_spot, spot_dir);
  const double across = std::abs(to_spot.x * spot_dir.y - to_spot.y * spot_dir.x);
  if (maneuver == Maneuver::kForward && std::abs(wrap_angle(start.theta - spot.heading)) < 1e-6 &&
      across < 1e-6 && along > 0.0) {
    auto path = sample_path(start, {{along, 0.0, 1, sp.entry}}, cfg.spacing);
    apply_speed_profile(path, sp);
    return path;
  }

  if (std::abs(std::sin(start.theta)) > 1e-6)
    throw InfeasiblePathError("start heading must run along the lane (+x or -x)");
  const int travel = std::cos(start.theta) > 0.0 ? 1 : -1;
  const int side = spot.center.y < start.y ? -1 : 1;  // spot below or above the lane line
  const double lateral = std::abs(spot.center.y - start.y);
  const double ahead = travel * to_spot.x;
  if (lateral < r) throw InfeasiblePathError("spot too close to the lane line for the turning radius");

  // In the canonical frame (travel +x, spot below) both arcs have curvature -1/r; mirroring once
  // flips the sign.
  const bool mirrored = (travel < 0) != (side > 0);
  const double k = (mirrored ? 1.0 : -1.0) / r;
  const double quarter = 0.5 * std::numbers::pi * r;

  std::vector<PathSegment> segments;
  if (maneuver == Maneuver::kForward) {
    if (ahead < r) throw InfeasiblePathError("spot is behind the forward turn-in point");
    segments = {{ahead - r, 0.0, 1, sp.cruise}, {quarter, k, 1, sp.turn}, {lateral - r, 0.0, 1, sp.entry}};
  } else {
    if (ahead < -r) throw InfeasiblePathError("spot is behind the reverse pull-past point");
    segments = {{ahead + r, 0.0, 1, sp.cruise}, {quarter, k, -1, sp.turn}, {lateral - r, 0.0, -1, sp.entry}};
  }
  auto path = sample_path(start, segments, cfg.spacing);
  apply_speed_profile(path, sp);
  return path;
}

// ---------------------------------------------------------------------------------------------
// Simulation

struct DriveNoise {
  double speed_std = 0.05;  // m/s added to v each step
  double yaw_rate_std = 0.02;  // rad/s added to omega each step
};

struct TrackingGains {
  double heading = 1.5;
  double lateral = 0.5;
};

/// Tracks `path` with a reference-following controller and integrates the unicycle model.
///
/// A reference vehicle rides the path curvature with the same Euler model and the same noisy speed,
/// so with zero noise the tracked pose equals the reference bit for bit. Heading and lateral errors
/// against the reference are fed back into omega.
inline std::vector<TimedPose> simulate_drive(const std::vector<PathWaypoint>& path, double dt, const DriveNoise& noise,
                                             std::uint64_t rng_seed, const TrackingGains& gains = {},
                                             std::size_t max_steps = 20000) {
  if (path.empty()) throw DataError("simulate_drive: empty path");
  std::mt19937_64 rng(rng_seed);
  std::normal_distribution<double> unit(0.0, 1.0);

  Pose ego = path.front().pose;
  Pose ref = ego;
  double s = 0.0;
  const double s_end = path.back().s;
  std::size_t idx = 0;

  std::vector<TimedPose> out;
  out.push_back({0.0, ego});
  for (std::size_t step = 1; step <= max_steps && s < s_end - 1e-9; ++step) {
    while (idx + 1 < path.size() && path[idx + 1].s <= s + 1e-12) ++idx;
    // Remaining distance in this gear run.
    std::size_t run_end = idx;
    while (run_end + 1 < path.size() && path[run_end + 1].gear == path[idx].gear) ++run_end;
    if (run_end + 1 < path.size()) ++run_end;  // the flip waypoint closes the run
    const double remaining = path[run_end].s - s;

    const auto& a = path[idx];
    const auto& b = path[std::min(idx + 1, path.size() - 1)];
    const double span = b.s - a.s;
    const double w = span > 0.0 ? std::clamp((s - a.s) / span, 0.0, 1.0) : 0.0;
    double speed = a.speed + w * (b.speed - a.speed);
    if (speed * dt > remaining) speed = remaining / dt;

    const double nv = noise.speed_std > 0.0 ? noise.speed_std * unit(rng) : 0.0;
    const double nw = noise.yaw_rate_std > 0.0 ? noise.yaw_rate_std * unit(rng) : 0.0;
    const double v = a.gear * speed + nv;
    const double omega_ref = v * a.curvature;

    const double ex = ego.x - ref.x;
    const double ey = ego.y - ref.y;
    const double e_lat = -std::sin(ref.theta) * ex + std::cos(ref.theta) * ey;
    const double e_th = wrap_angle(ego.theta - ref.theta);
    const double omega = omega_ref - gains.heading * e_th - gains.lateral * v * e_lat + nw;

    ego = unicycle_step(ego, v, omega, dt);
    ref = unicycle_step(ref, v, omega_ref, dt);
    s += a.gear * v * dt;
    out.push_back({step * dt, ego});
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Demonstrations

struct DemoGenConfig {
  PlannerConfig planner;
  DriveNoise noise;
  TrackingGains gains;
  VehicleFootprint footprint;
  double dt = 0.1;
  double spot_choice_temperature = 3.0;  // meters; softmax over -distance / T
  double intent_window_lo = 0.2;
  double intent_window_hi = 0.6;
  int idle_min = 3;
  int idle_max = 10;
  int max_retries = 25;
  int free_spots = 8;
};

/// Checks every Demonstration invariant; throws ValidationError naming the first violation.
inline void validate_demonstration(const Demonstration& d, const VehicleFootprint& footprint = {},
                                   bool check_collisions = true) {
  if (!(d.dt > 0.0)) throw ValidationError("dt_positive", "dt must be positive");
  const int g = d.lot.spot_count();
  if (static_cast<int>(d.occupancy.size()) != g)
    throw ValidationError("occupancy_size", "occupancy must have G rows");
  if (d.poses.size() < 2) throw ValidationError("poses_nonempty", "need at least two poses");
  for (std::size_t k = 1; k < d.poses.size(); ++k) {
    const double step = d.poses[k].t - d.poses[k - 1].t;
    if (!(step > 0.0) || std::abs(step - d.dt) > 1e-6)
      throw ValidationError("uniform_time", "poses must be spaced exactly dt apart");
  }
  if (!d.intent_time) throw ValidationError("intent_signaled", "intent_time missing");
  if (*d.intent_time < d.poses.front().t || *d.intent_time > d.poses.back().t)
    throw ValidationError("intent_time_range", "intent_time outside the recording");
  if (d.chosen_spot < 1 || d.chosen_spot > g) throw ValidationError("chosen_spot_range", "chosen_spot not in 1..G");
  if (!d.occupancy.entries[static_cast<std::size_t>(d.chosen_spot - 1)].free)
    throw ValidationError("chosen_spot_free", "chosen spot is occupied");

  const auto lot = build_lot(d.lot);
  const Spot& spot = lot[static_cast<std::size_t>(d.chosen_spot - 1)];
  const Pose& last = d.poses.back().pose;
  const double target = d.maneuver == Maneuver::kForward ? spot.heading : spot.heading + std::numbers::pi;
  if (norm(last.position() - spot.center) > 0.5 || std::abs(wrap_angle(last.theta - target)) > 0.2)
    throw ValidationError("parked_in_spot", "final pose is not parked in the chosen spot");

  if (check_collisions) {
    const auto parked = parked_footprints(lot, d.occupancy, footprint);
    for (const auto& tp : d.poses) {
      const auto ego = footprint.at(tp.pose);
      for (const auto& box : parked)
        if (boxes_overlap(ego, box)) throw ValidationError("collision_free", "ego overlaps a parked vehicle");
    }
  }
}

/// Synthetic demonstration: sampled occupancy, entrance, spot (nearer spots favoured), maneuver,
/// planned and simulated drive padded with idle frames, and a mid-drive intent signal.
inline Demonstration generate_demo(const LotConfig& lot_config, std::uint64_t rng_seed, const DemoGenConfig& cfg = {}) {
  const auto lot = build_lot(lot_config);
  std::mt19937_64 rng(rng_seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  const int lane = lot_config.access_lane(lot_config.rows / 2 - 1);
  const double lane_y = lot_config.lane_center_y(lane);

  for (int attempt = 0; attempt < cfg.max_retries; ++attempt) {
    const auto occ = sample_free_configuration(lot, rng(), cfg.free_spots);
    const bool from_left = unif(rng) < 0.5;
    const Pose start = from_left ? Pose{lot_config.lane_x_min() + 1.0, lane_y, 0.0}
                                 : Pose{lot_config.lane_x_max() - 1.0, lane_y, std::numbers::pi};
    const Maneuver maneuver = unif(rng) < 0.5 ? Maneuver::kForward : Maneuver::kReverse;

    std::vector<std::size_t> free_idx;
    std::vector<double> weight;
    for (std::size_t i = 0; i < lot.size(); ++i) {
      if (!occ.entries[i].free) continue;
      free_idx.push_back(i);
      weight.push_back(-norm(lot[i].center - start.position()) / cfg.spot_choice_temperature);
    }
    const double wmax = *std::max_element(weight.begin(), weight.end());
    double total = 0.0;
    for (double& w : weight) total += (w = std::exp(w - wmax));
    double u = unif(rng) * total;
    std::size_t pick = free_idx.size() - 1;
    for (std::size_t k = 0; k < weight.size(); ++k) {
      if (u < weight[k]) {
        pick = k;
        break;
      }
      u -= weight[k];
    }
    const Spot& spot = lot[free_idx[pick]];

    std::vector<PathWaypoint> path;
    try {
      path = plan_parking_path(start, spot, maneuver, cfg.planner);
    } catch (const InfeasiblePathError&) {
      continue;
    }
    const auto drive = simulate_drive(path, cfg.dt, cfg.noise, rng(), cfg.gains);

    std::uniform_int_distribution<int> idle(cfg.idle_min, cfg.idle_max);
    const int lead = idle(rng);
    const int trail = idle(rng);

    Demonstration d;
    d.id = "demo-" + std::to_string(rng_seed);
    d.dt = cfg.dt;
    d.lot = lot_config;
    d.occupancy = occ;
    d.chosen_spot = spot.id;
    d.maneuver = maneuver;
    std::size_t k = 0;
    for (int i = 0; i < lead; ++i, ++k) d.poses.push_back({k * cfg.dt, drive.front().pose});
    const double t_move_start = k * cfg.dt;
    for (const auto& tp : drive) d.poses.push_back({(k++) * cfg.dt, tp.pose});
    const double t_move_end = (k - 1) * cfg.dt;
    for (int i = 0; i < trail; ++i, ++k) d.poses.push_back({k * cfg.dt, drive.back().pose});
    const double frac = cfg.intent_window_lo + (cfg.intent_window_hi - cfg.intent_window_lo) * unif(rng);
    d.intent_time = t_move_start + frac * (t_move_end - t_move_start);

    try {
      validate_demonstration(d, cfg.footprint);
    } catch (const ValidationError&) {
      continue;
    }
    return d;
  }
  throw InfeasiblePathError("generate_demo: no valid demonstration after " + std::to_string(cfg.max_retries) +
                            " attempts");
}

}  // namespace parkpredict
