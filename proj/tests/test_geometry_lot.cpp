#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <set>

#include "parkpredict/lot.hpp"

using namespace parkpredict;

TEST(WrapAngle, StaysInHalfOpenInterval) {
  EXPECT_DOUBLE_EQ(wrap_angle(std::numbers::pi), std::numbers::pi);
  EXPECT_DOUBLE_EQ(wrap_angle(-std::numbers::pi), std::numbers::pi);
  EXPECT_NEAR(wrap_angle(3 * std::numbers::pi), std::numbers::pi, 1e-12);
  EXPECT_NEAR(wrap_angle(0.5 + 4 * std::numbers::pi), 0.5, 1e-12);
  for (int i = -1000; i <= 1000; ++i) {
    const double a = wrap_angle(0.037 * i);
    EXPECT_GT(a, -std::numbers::pi);
    EXPECT_LE(a, std::numbers::pi);
    EXPECT_NEAR(std::sin(a), std::sin(0.037 * i), 1e-9);
    EXPECT_NEAR(std::cos(a), std::cos(0.037 * i), 1e-9);
  }
}

TEST(BoxesOverlap, SeparatingAxis) {
  OrientedBox a{{0, 0}, 0.0, 2.0, 1.0};
  EXPECT_TRUE(boxes_overlap(a, {{3.9, 0}, 0.0, 2.0, 1.0}));
  EXPECT_FALSE(boxes_overlap(a, {{4.0, 0}, 0.0, 2.0, 1.0}));  // touching
  EXPECT_FALSE(boxes_overlap(a, {{4.1, 0}, 0.0, 2.0, 1.0}));
  // Rotated 45 degrees: corner pokes into a.
  EXPECT_TRUE(boxes_overlap(a, {{2.0 + std::sqrt(2.0) - 0.1, 0}, std::numbers::pi / 4, 1.0, 1.0}));
  EXPECT_FALSE(boxes_overlap(a, {{2.0 + std::sqrt(2.0) + 0.1, 0}, std::numbers::pi / 4, 1.0, 1.0}));
}

TEST(BuildLot, DefaultHas64Spots) {
  LotConfig cfg;
  EXPECT_EQ(cfg.spot_count(), 64);
  const auto lot = build_lot(cfg);
  ASSERT_EQ(lot.size(), 64u);
  std::set<int> ids;
  for (const auto& s : lot) ids.insert(s.id);
  EXPECT_EQ(ids.size(), 64u);
  EXPECT_EQ(*ids.begin(), 1);
  EXPECT_EQ(*ids.rbegin(), 64);
}

TEST(BuildLot, SingleSpotSitsAtFirstSlot) {
  LotConfig cfg;
  cfg.rows = 1;
  cfg.spots_per_row = 1;
  const auto lot = build_lot(cfg);
  ASSERT_EQ(lot.size(), 1u);
  EXPECT_EQ(lot[0].id, 1);
  EXPECT_DOUBLE_EQ(lot[0].center.x, cfg.column_center_x(0));
  EXPECT_DOUBLE_EQ(lot[0].center.y, cfg.row_bottom(0) + 0.5 * cfg.spot_depth);
}

TEST(BuildLot, AdjacentCentersAreOneSpotWidthApart) {
  LotConfig cfg;
  const auto lot = build_lot(cfg);
  for (std::size_t i = 0; i < lot.size(); ++i) {
    for (std::size_t k = 0; k < lot.size(); ++k) {
      if (lot[i].row != lot[k].row) continue;
      EXPECT_DOUBLE_EQ(lot[i].center.y, lot[k].center.y);  // collinear rows
      if (lot[k].column == lot[i].column + 1) { EXPECT_NEAR(lot[k].center.x - lot[i].center.x, cfg.spot_width, 1e-12); }
    }
  }
}

TEST(BuildLot, HeadingsPointAwayFromAccessLane) {
  LotConfig cfg;
  for (const auto& s : build_lot(cfg)) {
    const double lane_y = cfg.lane_center_y(cfg.access_lane(s.row));
    // Driving forward into the spot moves from the lane toward the spot centre.
    const double dir = std::sin(s.heading);
    EXPECT_GT(dir * (s.center.y - lane_y), 0.0) << "spot " << s.id;
  }
}

TEST(BuildLot, SpotsDoNotOverlapEachOtherOrLanes) {
  LotConfig cfg;
  const auto lot = build_lot(cfg);
  // Neighbours share an edge; shrink by a micron so rounding on rotated boxes is not counted.
  auto shrunk = [&](const Spot& s) {
    OrientedBox b = spot_box(s, cfg);
    b.half_length -= 1e-6;
    b.half_width -= 1e-6;
    return b;
  };
  for (std::size_t i = 0; i < lot.size(); ++i)
    for (std::size_t k = i + 1; k < lot.size(); ++k) EXPECT_FALSE(boxes_overlap(shrunk(lot[i]), shrunk(lot[k])));
  for (int lane = 0; lane < cfg.lane_count(); ++lane) {
    const double y0 = cfg.lane_bottom(lane);
    const OrientedBox lane_box{{0.5 * (cfg.lane_x_min() + cfg.lane_x_max()), y0 + 0.5 * cfg.lane_width}, 0.0,
                               0.5 * cfg.extent_width(), 0.5 * cfg.lane_width};
    for (const auto& s : lot) EXPECT_FALSE(boxes_overlap(shrunk(s), lane_box));
  }
}

TEST(BuildLot, PureFunction) {
  LotConfig cfg;
  cfg.origin = {3.25, -1.5};
  const auto a = build_lot(cfg);
  const auto b = build_lot(cfg);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].center, b[i].center);
    EXPECT_EQ(a[i].heading, b[i].heading);
  }
}

TEST(BuildLot, RejectsInvalidConfig) {
  LotConfig cfg;
  cfg.rows = 0;
  EXPECT_THROW(build_lot(cfg), DataError);
  cfg = {};
  cfg.spots_per_row = 0;
  EXPECT_THROW(build_lot(cfg), DataError);
  cfg = {};
  cfg.lane_width = 0.0;
  EXPECT_THROW(build_lot(cfg), DataError);
  cfg = {};
  cfg.spot_width = -1.0;
  EXPECT_THROW(build_lot(cfg), DataError);
}

TEST(LotConfigJson, RoundTripAndGCheck) {
  LotConfig cfg;
  cfg.origin = {1.0, 2.0};
  nlohmann::json j = cfg;
  EXPECT_EQ(j.at("G").get<int>(), 64);
  EXPECT_EQ(j.get<LotConfig>(), cfg);
  j["G"] = 63;
  EXPECT_THROW(j.get<LotConfig>(), DataError);
}

TEST(SampleFreeConfiguration, EightFreeSpots) {
  const auto lot = build_lot({});
  for (std::uint64_t seed = 0; seed < 50; ++seed) EXPECT_EQ(sample_free_configuration(lot, seed).free_count(), 8);
}

TEST(SampleFreeConfiguration, SameSeedSameMatrix) {
  const auto lot = build_lot({});
  EXPECT_EQ(sample_free_configuration(lot, 42), sample_free_configuration(lot, 42));
}

TEST(SampleFreeConfiguration, FreeSpotsOnlyInMiddleRows) {
  const auto lot = build_lot({});
  std::set<int> seen;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto occ = sample_free_configuration(lot, seed);
    for (std::size_t i = 0; i < lot.size(); ++i) {
      if (!occ.entries[i].free) continue;
      EXPECT_TRUE(lot[i].row == 1 || lot[i].row == 2) << "seed " << seed << " spot " << lot[i].id;
      seen.insert(lot[i].id);
    }
  }
  EXPECT_EQ(seen.size(), 32u);  // every middle-row spot shows up eventually
}

TEST(SampleFreeConfiguration, OccupancyRowsCarrySpotCenters) {
  const auto lot = build_lot({});
  const auto occ = sample_free_configuration(lot, 7);
  ASSERT_EQ(occ.size(), lot.size());
  for (std::size_t i = 0; i < lot.size(); ++i) {
    EXPECT_EQ(occ.entries[i].x, lot[i].center.x);
    EXPECT_EQ(occ.entries[i].y, lot[i].center.y);
  }
}

TEST(SampleFreeConfiguration, RejectsTooFewMiddleSpots) {
  LotConfig cfg;
  cfg.spots_per_row = 3;  // 6 middle-row spots
  EXPECT_THROW(sample_free_configuration(build_lot(cfg), 1), DataError);
}

TEST(OccupancyJson, RoundTripAndBadFlag) {
  const auto occ = sample_free_configuration(build_lot({}), 3);
  nlohmann::json j = occ;
  EXPECT_EQ(j.get<OccupancyMatrix>(), occ);
  j[0][2] = 0.5;
  EXPECT_THROW(j.get<OccupancyMatrix>(), DataError);
}

TEST(VehicleFootprint, DefaultIsLongerThanWide) {
  VehicleFootprint f;
  EXPECT_GT(f.length, f.width);
  EXPECT_GT(f.width, 0.0);
  const auto box = f.at({1.0, 2.0, 0.3});
  EXPECT_DOUBLE_EQ(box.half_length, 2.4);
  EXPECT_DOUBLE_EQ(box.half_width, 1.0);
  EXPECT_TRUE(box.contains({1.0, 2.0}));
}

TEST(ParkedFootprints, FitInsideTheirSpots) {
  LotConfig cfg;
  const auto lot = build_lot(cfg);
  const auto occ = sample_free_configuration(lot, 11);
  const auto boxes = parked_footprints(lot, occ, {});
  EXPECT_EQ(boxes.size(), 56u);
  for (std::size_t i = 0; i < boxes.size(); ++i)
    for (std::size_t k = i + 1; k < boxes.size(); ++k) EXPECT_FALSE(boxes_overlap(boxes[i], boxes[k]));
}
