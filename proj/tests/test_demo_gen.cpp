#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "parkpredict/demo_gen.hpp"

using namespace parkpredict;

namespace {

std::vector<PathWaypoint> constant_path(double length, double curvature, double speed) {
  auto path = sample_path({0.0, 0.0, 0.0}, {{length, curvature, 1, speed}}, 0.1);
  for (auto& w : path) w.speed = speed;
  return path;
}

const Spot& spot_by_id(const std::vector<Spot>& lot, int id) { return lot[static_cast<std::size_t>(id - 1)]; }

}  // namespace

TEST(UnicycleStep, EulerArithmetic) {
  const Pose p = unicycle_step({1.0, 2.0, 0.0}, 2.0, 0.5, 0.1);
  EXPECT_DOUBLE_EQ(p.x, 1.2);
  EXPECT_DOUBLE_EQ(p.y, 2.0);
  EXPECT_DOUBLE_EQ(p.theta, 0.05);
}

TEST(SamplePath, ArcEndsWhereClosedFormSays) {
  const double r = 4.5;
  const auto path = sample_path({0, 0, 0}, {{0.5 * std::numbers::pi * r, 1.0 / r, 1, 1.0}}, 0.1);
  const auto& end = path.back().pose;
  EXPECT_NEAR(end.x, r, 1e-9);
  EXPECT_NEAR(end.y, r, 1e-9);
  EXPECT_NEAR(end.theta, 0.5 * std::numbers::pi, 1e-12);
  for (std::size_t i = 1; i < path.size(); ++i) EXPECT_LE(norm(path[i].pose.position() - path[i - 1].pose.position()), 0.1 + 1e-9);
}

TEST(PlanParkingPath, NoseInStartIsOneStraightSegment) {
  LotConfig cfg;
  const auto lot = build_lot(cfg);
  const Spot& s = spot_by_id(lot, 20);
  const Vec2 dir{std::cos(s.heading), std::sin(s.heading)};
  const Vec2 p = s.center - (0.5 * cfg.spot_depth + 1.0) * dir;
  const auto path = plan_parking_path({p.x, p.y, s.heading}, s, Maneuver::kForward);
  ASSERT_GE(path.size(), 2u);
  double prev = 1e300;
  for (const auto& w : path) {
    EXPECT_EQ(w.curvature, 0.0);
    EXPECT_EQ(w.gear, 1);
    const double d = norm(w.pose.position() - s.center);
    EXPECT_LT(d, prev);
    prev = d;
  }
  EXPECT_LT(prev, 1e-9);
}

TEST(PlanParkingPath, ReverseChangesDirectionExactlyOnce) {
  LotConfig cfg;
  const auto lot = build_lot(cfg);
  const double lane_y = cfg.lane_center_y(cfg.access_lane(1));
  for (int id : {17, 24, 33, 40, 47}) {
    for (bool from_left : {true, false}) {
      const Pose start = from_left ? Pose{cfg.lane_x_min() + 1.0, lane_y, 0.0}
                                   : Pose{cfg.lane_x_max() - 1.0, lane_y, std::numbers::pi};
      const auto path = plan_parking_path(start, spot_by_id(lot, id), Maneuver::kReverse);
      int changes = 0, last_sign = 0;
      for (std::size_t i = 1; i < path.size(); ++i) {
        const Pose& a = path[i - 1].pose;
        const double proj = (path[i].pose.x - a.x) * std::cos(a.theta) + (path[i].pose.y - a.y) * std::sin(a.theta);
        if (std::abs(proj) < 1e-9) continue;
        const int sign = proj > 0 ? 1 : -1;
        if (last_sign != 0 && sign != last_sign) ++changes;
        last_sign = sign;
      }
      EXPECT_EQ(changes, 1) << "spot " << id;
      EXPECT_EQ(last_sign, -1);
    }
  }
}

TEST(PlanParkingPath, CurvatureBoundedAndEndsInSpot) {
  LotConfig cfg;
  PlannerConfig pc;
  const auto lot = build_lot(cfg);
  const double lane_y = cfg.lane_center_y(cfg.access_lane(1));
  for (const auto& s : lot) {
    if (s.row != 1 && s.row != 2) continue;
    for (auto m : {Maneuver::kForward, Maneuver::kReverse}) {
      const auto path = plan_parking_path({cfg.lane_x_min() + 1.0, lane_y, 0.0}, s, m, pc);
      for (const auto& w : path) EXPECT_LE(std::abs(w.curvature), 1.0 / pc.min_turn_radius + 1e-12);
      EXPECT_LT(norm(path.back().pose.position() - s.center), 1e-9);
      const double target = m == Maneuver::kForward ? s.heading : s.heading + std::numbers::pi;
      EXPECT_LT(std::abs(wrap_angle(path.back().pose.theta - target)), 1e-9);
    }
  }
}

TEST(PlanParkingPath, AvoidsParkedCars) {
  LotConfig cfg;
  const auto lot = build_lot(cfg);
  const VehicleFootprint fp;
  const double lane_y = cfg.lane_center_y(cfg.access_lane(1));
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto occ = sample_free_configuration(lot, seed);
    const auto parked = parked_footprints(lot, occ, fp);
    for (std::size_t i = 0; i < lot.size(); ++i) {
      if (!occ.entries[i].free) continue;
      for (auto m : {Maneuver::kForward, Maneuver::kReverse}) {
        std::vector<PathWaypoint> path;
        try {
          path = plan_parking_path({cfg.lane_x_min() + 1.0, lane_y, 0.0}, lot[i], m);
        } catch (const InfeasiblePathError&) {
          continue;
        }
        for (const auto& w : path)
          for (const auto& b : parked) ASSERT_FALSE(boxes_overlap(fp.at(w.pose), b)) << "spot " << lot[i].id;
      }
    }
  }
}

TEST(PlanParkingPath, InfeasibleRequestsThrow) {
  LotConfig cfg;
  const auto lot = build_lot(cfg);
  const double lane_y = cfg.lane_center_y(cfg.access_lane(1));
  // Spot 17 is at the left end; a car heading +x from the right end cannot reach it forward.
  EXPECT_THROW(plan_parking_path({cfg.lane_x_max() - 1.0, lane_y, 0.0}, spot_by_id(lot, 17), Maneuver::kForward),
               InfeasiblePathError);
  // Heading across the lane.
  EXPECT_THROW(plan_parking_path({5.0, lane_y, 0.5 * std::numbers::pi}, spot_by_id(lot, 20), Maneuver::kForward),
               InfeasiblePathError);
}

TEST(ApplySpeedProfile, RespectsLimitsAndFloor) {
  LotConfig cfg;
  const auto lot = build_lot(cfg);
  SpeedProfile sp;
  const auto path = plan_parking_path({cfg.lane_x_min() + 1.0, cfg.lane_center_y(cfg.access_lane(1)), 0.0},
                                      spot_by_id(lot, 25), Maneuver::kReverse);
  EXPECT_DOUBLE_EQ(path.front().speed, sp.floor);
  EXPECT_DOUBLE_EQ(path.back().speed, sp.floor);
  for (std::size_t i = 0; i < path.size(); ++i) {
    EXPECT_GE(path[i].speed, sp.floor);
    EXPECT_LE(path[i].speed, std::max(sp.floor, path[i].speed_limit) + 1e-12);
    if (i > 0) {
      const double ds = path[i].s - path[i - 1].s;
      const double dv2 = std::abs(path[i].speed * path[i].speed - path[i - 1].speed * path[i - 1].speed);
      EXPECT_LE(dv2, 2.0 * sp.accel * ds + sp.floor * sp.floor + 1e-9);
    }
  }
}

TEST(SimulateDrive, StraightConstantSpeedAdvancesExactly) {
  const auto path = constant_path(30.0, 0.0, 2.0);
  const auto poses = simulate_drive(path, 0.1, {0.0, 0.0}, 1);
  ASSERT_GT(poses.size(), 100u);
  for (std::size_t k = 1; k + 1 < poses.size(); ++k) {
    EXPECT_NEAR(poses[k].pose.x - poses[k - 1].pose.x, 0.2, 1e-12);
    EXPECT_EQ(poses[k].pose.y, 0.0);
    EXPECT_NEAR(poses[k].t, 0.1 * static_cast<double>(k), 1e-12);
  }
}

TEST(SimulateDrive, ConstantCurvatureTurnsAtOmegaDt) {
  const double kappa = 0.2, v = 1.5, dt = 0.1;
  const auto path = constant_path(20.0, kappa, v);
  const auto poses = simulate_drive(path, dt, {0.0, 0.0}, 1);
  ASSERT_GT(poses.size(), 50u);
  for (std::size_t k = 1; k + 1 < poses.size(); ++k)
    EXPECT_NEAR(wrap_angle(poses[k].pose.theta - poses[k - 1].pose.theta), kappa * v * dt, 1e-12);
}

TEST(SimulateDrive, SpeedNoiseShowsUpInLongitudinalResiduals) {
  const double dt = 0.1, sigma = 0.1, v = 2.0;
  const auto path = constant_path(2200.0, 0.0, v);
  const auto poses = simulate_drive(path, dt, {sigma, 0.0}, 77);
  ASSERT_GT(poses.size(), 10001u);
  double sum = 0.0, sum2 = 0.0;
  const int n = 10000;
  for (int k = 1; k <= n; ++k) {
    const Pose& a = poses[static_cast<std::size_t>(k - 1)].pose;
    const Pose& b = poses[static_cast<std::size_t>(k)].pose;
    const double r = (b.x - a.x) * std::cos(a.theta) + (b.y - a.y) * std::sin(a.theta) - v * dt;
    sum += r;
    sum2 += r * r;
  }
  const double mean = sum / n;
  const double sd = std::sqrt((sum2 - n * mean * mean) / (n - 1));
  EXPECT_NEAR(sd, sigma * dt, 0.1 * sigma * dt);
}

TEST(SimulateDrive, DeterministicForSeed) {
  const auto path = constant_path(15.0, 0.1, 1.0);
  EXPECT_EQ(simulate_drive(path, 0.1, {}, 5), simulate_drive(path, 0.1, {}, 5));
  EXPECT_NE(simulate_drive(path, 0.1, {}, 5), simulate_drive(path, 0.1, {}, 6));
  EXPECT_THROW(simulate_drive({}, 0.1, {}, 1), DataError);
}

TEST(GenerateDemo, BitIdenticalForSeed) {
  LotConfig cfg;
  const auto a = generate_demo(cfg, 123);
  const auto b = generate_demo(cfg, 123);
  EXPECT_EQ(a, b);
  EXPECT_EQ(nlohmann::json(a).dump(), nlohmann::json(b).dump());
}

TEST(GenerateDemo, BothManeuversBalanced) {
  LotConfig cfg;
  int forward = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) forward += generate_demo(cfg, seed).maneuver == Maneuver::kForward;
  EXPECT_GE(forward, 70);
  EXPECT_LE(forward, 130);
}

TEST(GenerateDemo, EveryDemoSatisfiesInvariants) {
  LotConfig cfg;
  DemoGenConfig gen;
  const auto lot = build_lot(cfg);
  for (std::uint64_t seed = 1000; seed < 1200; ++seed) {
    const auto d = generate_demo(cfg, seed, gen);
    EXPECT_NO_THROW(validate_demonstration(d, gen.footprint)) << "seed " << seed;
    // Intent signal falls inside the moving part of the drive, between 20% and 60%.
    std::size_t first = 0, last = d.poses.size() - 1;
    while (first + 1 < d.poses.size() && d.poses[first + 1].pose == d.poses[first].pose) ++first;
    while (last > 0 && d.poses[last - 1].pose == d.poses[last].pose) --last;
    const double t0 = d.poses[first].t, t1 = d.poses[last].t;
    EXPECT_GE(*d.intent_time, t0 + 0.2 * (t1 - t0) - 0.15);
    EXPECT_LE(*d.intent_time, t0 + 0.6 * (t1 - t0) + 0.15);
    for (const auto& tp : d.poses) {
      EXPECT_GT(tp.pose.theta, -std::numbers::pi);
      EXPECT_LE(tp.pose.theta, std::numbers::pi);
    }
    EXPECT_EQ(d.occupancy.free_count(), 8);
    (void)lot;
  }
}

TEST(GenerateDemo, NearerSpotsArePreferred) {
  LotConfig cfg;
  const auto lot = build_lot(cfg);
  // Compare the chosen spot's distance rank from the entrance among the free spots.
  double rank_sum = 0.0;
  const int n = 200;
  for (std::uint64_t seed = 0; seed < n; ++seed) {
    const auto d = generate_demo(cfg, seed);
    const Vec2 start = d.poses.front().pose.position();
    const double chosen = norm(lot[static_cast<std::size_t>(d.chosen_spot - 1)].center - start);
    int closer = 0;
    for (std::size_t i = 0; i < lot.size(); ++i)
      if (d.occupancy.entries[i].free && norm(lot[i].center - start) < chosen) ++closer;
    rank_sum += closer;
  }
  EXPECT_LT(rank_sum / n, 3.5);  // uniform choice would average 3.5
}

TEST(DemonstrationJson, RoundTripAndFieldNames) {
  const auto d = generate_demo(LotConfig{}, 9);
  const nlohmann::json j = d;
  for (const char* key : {"id", "dt", "lot", "occupancy", "poses", "intent_time", "chosen_spot", "maneuver"})
    EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_EQ(j.at("poses").at(0).size(), 4u);
  const auto back = nlohmann::json::parse(j.dump()).get<Demonstration>();
  EXPECT_EQ(back, d);
}

TEST(DemonstrationJson, MalformedRecordsAreRejected) {
  auto j = nlohmann::json(generate_demo(LotConfig{}, 9));
  auto bad = j;
  bad["maneuver"] = "sideways";
  EXPECT_THROW(bad.get<Demonstration>(), DataError);
  bad = j;
  bad["poses"][0] = {0.0, 1.0};
  EXPECT_THROW(bad.get<Demonstration>(), DataError);
  bad = j;
  bad.erase("lot");
  EXPECT_THROW(bad.get<Demonstration>(), DataError);
}

TEST(ValidateDemonstration, NamesTheBrokenInvariant) {
  const auto d = generate_demo(LotConfig{}, 21);
  auto expect_invariant = [](const Demonstration& bad, const std::string& name) {
    try {
      validate_demonstration(bad);
      ADD_FAILURE() << "expected " << name;
    } catch (const ValidationError& e) {
      EXPECT_EQ(e.invariant(), name);
    }
  };
  auto bad = d;
  bad.poses[3].t += 0.05;
  expect_invariant(bad, "uniform_time");
  bad = d;
  bad.intent_time = d.poses.back().t + 1.0;
  expect_invariant(bad, "intent_time_range");
  bad = d;
  bad.occupancy.entries[static_cast<std::size_t>(d.chosen_spot - 1)].free = false;
  expect_invariant(bad, "chosen_spot_free");
  bad = d;
  bad.poses.back().pose.x += 3.0;
  expect_invariant(bad, "parked_in_spot");
  bad = d;
  bad.intent_time.reset();
  expect_invariant(bad, "intent_signaled");
}
