#pragma once

#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "parkpredict/errors.hpp"
#include "parkpredict/geometry.hpp"

namespace parkpredict {

// Rows are paired back to back. Every pair has a lane below it and the last pair a lane above,
// and each lane extends one lane_width past the spot columns on both ends (the entrances).
//
//   y ^   lane 2
//     |   row 4  (faces -y, entered from lane 2)
//     |   row 3  (faces +y, entered from lane 1)
//     |   lane 1
//     |   row 2  (faces -y, entered from lane 1)
//     |   row 1  (faces +y, entered from lane 0)
//     |   lane 0
//     +-----------------> x
struct LotConfig {
  int rows = 4;
  int spots_per_row = 16;
  double spot_width = 2.8;
  double spot_depth = 5.5;
  double lane_width = 7.0;
  Vec2 origin{0.0, 0.0};

  int spot_count() const { return rows * spots_per_row; }
  int pair_count() const { return (rows + 1) / 2; }
  int lane_count() const { return pair_count() + 1; }

  void validate() const {
    if (rows <= 0 || spots_per_row <= 0) throw DataError("LotConfig: rows and spots_per_row must be positive");
    if (!(spot_width > 0.0) || !(spot_depth > 0.0) || !(lane_width > 0.0))
      throw DataError("LotConfig: spot_width, spot_depth and lane_width must be positive");
  }

  double extent_width() const { return 2.0 * lane_width + spots_per_row * spot_width; }
  double extent_height() const { return lane_count() * lane_width + rows * spot_depth; }

  double row_bottom(int row) const {
    const int pair = row / 2;
    return origin.y + (pair + 1) * lane_width + spot_depth * row;
  }

  double lane_bottom(int lane) const {
    return origin.y + lane * lane_width + spot_depth * std::min(2 * lane, rows);
  }
  double lane_center_y(int lane) const { return lane_bottom(lane) + 0.5 * lane_width; }

  /// Lane a car uses to enter a spot of this row.
  int access_lane(int row) const { return row / 2 + row % 2; }

  double column_center_x(int column) const {
    return origin.x + lane_width + (column + 0.5) * spot_width;
  }

  /// x range of the drivable lanes including the entrance aprons.
  double lane_x_min() const { return origin.x; }
  double lane_x_max() const { return origin.x + extent_width(); }

  friend bool operator==(const LotConfig&, const LotConfig&) = default;
};

inline void to_json(nlohmann::json& j, const LotConfig& c) {
  j = nlohmann::json{{"rows", c.rows},
                     {"spots_per_row", c.spots_per_row},
                     {"spot_width", c.spot_width},
                     {"spot_depth", c.spot_depth},
                     {"lane_width", c.lane_width},
                     {"origin", {c.origin.x, c.origin.y}},
                     {"G", c.spot_count()}};
}

inline void from_json(const nlohmann::json& j, LotConfig& c) {
  LotConfig d;
  c.rows = j.value("rows", d.rows);
  c.spots_per_row = j.value("spots_per_row", d.spots_per_row);
  c.spot_width = j.value("spot_width", d.spot_width);
  c.spot_depth = j.value("spot_depth", d.spot_depth);
  c.lane_width = j.value("lane_width", d.lane_width);
  if (j.contains("origin")) {
    const auto& o = j.at("origin");
    c.origin = {o.at(0).get<double>(), o.at(1).get<double>()};
  } else {
    c.origin = d.origin;
  }
  if (j.contains("G") && j.at("G").get<int>() != c.spot_count())
    throw DataError("LotConfig: G does not equal rows * spots_per_row");
}

struct Spot {
  int id = 0;      // 1..G
  int row = 0;     // 0-based
  int column = 0;  // 0-based
  Vec2 center;
  double heading = 0.0;  // direction a forward-parked car faces
};

struct VehicleFootprint {
  double length = 4.8;
  double width = 2.0;

  OrientedBox at(const Pose& p) const { return {{p.x, p.y}, p.theta, 0.5 * length, 0.5 * width}; }
};

struct OccupancyEntry {
  double x = 0.0;
  double y = 0.0;
  bool free = false;

  friend bool operator==(const OccupancyEntry&, const OccupancyEntry&) = default;
};

/// G rows of (spot x, spot y, free flag), indexed by spot id - 1.
struct OccupancyMatrix {
  std::vector<OccupancyEntry> entries;

  std::size_t size() const { return entries.size(); }
  int free_count() const {
    int n = 0;
    for (const auto& e : entries) n += e.free ? 1 : 0;
    return n;
  }
  friend bool operator==(const OccupancyMatrix&, const OccupancyMatrix&) = default;
};

inline void to_json(nlohmann::json& j, const OccupancyMatrix& o) {
  j = nlohmann::json::array();
  for (const auto& e : o.entries) j.push_back({e.x, e.y, e.free ? 1 : 0});
}

inline void from_json(const nlohmann::json& j, OccupancyMatrix& o) {
  o.entries.clear();
  for (const auto& row : j) {
    if (!row.is_array() || row.size() != 3) throw DataError("occupancy rows must be [x, y, free]");
    const double f = row.at(2).get<double>();
    if (f != 0.0 && f != 1.0) throw DataError("occupancy free flag must be 0 or 1");
    o.entries.push_back({row.at(0).get<double>(), row.at(1).get<double>(), f == 1.0});
  }
}

inline std::vector<Spot> build_lot(const LotConfig& config) {
  config.validate();
  std::vector<Spot> spots;
  spots.reserve(static_cast<std::size_t>(config.spot_count()));
  for (int r = 0; r < config.rows; ++r) {
    const double y = config.row_bottom(r) + 0.5 * config.spot_depth;
    const double heading = (r % 2 == 0) ? 0.5 * std::numbers::pi : -0.5 * std::numbers::pi;
    for (int c = 0; c < config.spots_per_row; ++c) {
      spots.push_back({r * config.spots_per_row + c + 1, r, c, {config.column_center_x(c), y}, heading});
    }
  }
  return spots;
}

/// Painted rectangle of a spot.
inline OrientedBox spot_box(const Spot& s, const LotConfig& config) {
  return {s.center, s.heading, 0.5 * config.spot_depth, 0.5 * config.spot_width};
}

/// Occupancy with every spot free.
inline OccupancyMatrix all_free(const std::vector<Spot>& lot) {
  OccupancyMatrix o;
  for (const auto& s : lot) o.entries.push_back({s.center.x, s.center.y, true});
  return o;
}

/// Marks exactly `free_spots` spots of the two middle rows as free; everything else is occupied.
inline OccupancyMatrix sample_free_configuration(const std::vector<Spot>& lot, std::uint64_t rng_seed,
                                                 int free_spots = 8) {
  int rows = 0;
  for (const auto& s : lot) rows = std::max(rows, s.row + 1);
  if (rows < 2 || rows % 2 != 0) throw DataError("sample_free_configuration: lot needs an even number of rows");
  const int lower_middle = rows / 2 - 1;
  const int upper_middle = rows / 2;

  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < lot.size(); ++i) {
    if (lot[i].row == lower_middle || lot[i].row == upper_middle) candidates.push_back(i);
  }
  if (static_cast<int>(candidates.size()) < free_spots)
    throw DataError("sample_free_configuration: fewer middle-row spots than free spots requested");

  std::mt19937_64 rng(rng_seed);
  for (int k = 0; k < free_spots; ++k) {
    std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(k), candidates.size() - 1);
    std::swap(candidates[static_cast<std::size_t>(k)], candidates[pick(rng)]);
  }

  OccupancyMatrix occ;
  occ.entries.reserve(lot.size());
  for (const auto& s : lot) occ.entries.push_back({s.center.x, s.center.y, false});
  for (int k = 0; k < free_spots; ++k) occ.entries[candidates[static_cast<std::size_t>(k)]].free = true;
  return occ;
}

/// Footprints of the parked cars: one per occupied spot, posed at the spot centre and heading.
inline std::vector<OrientedBox> parked_footprints(const std::vector<Spot>& lot, const OccupancyMatrix& occ,
                                                  const VehicleFootprint& footprint) {
  std::vector<OrientedBox> boxes;
  for (std::size_t i = 0; i < lot.size() && i < occ.size(); ++i) {
    if (!occ.entries[i].free) boxes.push_back(footprint.at({lot[i].center.x, lot[i].center.y, lot[i].heading}));
  }
  return boxes;
}

}  // namespace parkpredict
