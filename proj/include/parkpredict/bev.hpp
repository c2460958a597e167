#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "parkpredict/lot.hpp"

namespace parkpredict {

/// Fixed global raster frame: row 0 is the top (max y), column 0 the left (min x).
struct RasterFrame {
  int height = 96;
  int width = 96;
  double meters_per_pixel = 1.0;
  double x_min = 0.0;
  double y_max = 0.0;

  Vec2 pixel_center(int row, int col) const {
    return {x_min + (col + 0.5) * meters_per_pixel, y_max - (row + 0.5) * meters_per_pixel};
  }
  double col_of(double x) const { return (x - x_min) / meters_per_pixel - 0.5; }
  double row_of(double y) const { return (y_max - y) / meters_per_pixel - 0.5; }
};

/// Frame covering the whole lot plus `margin` meters on every side, centred on the lot.
inline RasterFrame make_raster_frame(const LotConfig& config, int height = 96, int width = 96,
                                     double margin = 2.0) {
  if (height <= 0 || width <= 0) throw DataError("raster size must be positive");
  RasterFrame f;
  f.height = height;
  f.width = width;
  const double ew = config.extent_width() + 2.0 * margin;
  const double eh = config.extent_height() + 2.0 * margin;
  f.meters_per_pixel = std::max(ew / width, eh / height);
  const double cx = config.origin.x + 0.5 * config.extent_width();
  const double cy = config.origin.y + 0.5 * config.extent_height();
  f.x_min = cx - 0.5 * width * f.meters_per_pixel;
  f.y_max = cy + 0.5 * height * f.meters_per_pixel;
  return f;
}

enum BevChannel : int { kMarkings = 0, kStaticVehicles = 1, kEgo = 2 };

/// H x W x 3 semantic raster, interleaved channels, binary 0/255.
struct BevImage {
  int height = 0;
  int width = 0;
  double meters_per_pixel = 0.0;
  std::vector<std::uint8_t> data;

  BevImage() = default;
  BevImage(int h, int w, double mpp)
      : height(h), width(w), meters_per_pixel(mpp), data(static_cast<std::size_t>(h) * w * 3, 0) {}

  std::uint8_t& at(int row, int col, int ch) {
    return data[(static_cast<std::size_t>(row) * width + col) * 3 + ch];
  }
  std::uint8_t at(int row, int col, int ch) const {
    return data[(static_cast<std::size_t>(row) * width + col) * 3 + ch];
  }
  std::size_t count(int ch) const {
    std::size_t n = 0;
    for (std::size_t i = static_cast<std::size_t>(ch); i < data.size(); i += 3) n += data[i] != 0;
    return n;
  }
};

namespace detail {

struct PixelRange {
  int r0, r1, c0, c1;  // inclusive; empty when r0 > r1 or c0 > c1
};

inline PixelRange covering_pixels(const RasterFrame& f, double xlo, double xhi, double ylo, double yhi) {
  PixelRange p;
  p.c0 = std::max(0, static_cast<int>(std::floor(f.col_of(xlo))));
  p.c1 = std::min(f.width - 1, static_cast<int>(std::ceil(f.col_of(xhi))));
  p.r0 = std::max(0, static_cast<int>(std::floor(f.row_of(yhi))));
  p.r1 = std::min(f.height - 1, static_cast<int>(std::ceil(f.row_of(ylo))));
  return p;
}

inline void fill_box(BevImage& img, const RasterFrame& f, const OrientedBox& box, int ch) {
  double xlo = 1e300, xhi = -1e300, ylo = 1e300, yhi = -1e300;
  for (Vec2 c : box.corners()) {
    xlo = std::min(xlo, c.x);
    xhi = std::max(xhi, c.x);
    ylo = std::min(ylo, c.y);
    yhi = std::max(yhi, c.y);
  }
  const auto p = covering_pixels(f, xlo, xhi, ylo, yhi);
  for (int r = p.r0; r <= p.r1; ++r)
    for (int c = p.c0; c <= p.c1; ++c)
      if (box.contains(f.pixel_center(r, c))) img.at(r, c, ch) = 255;
}

inline void draw_segment(BevImage& img, const RasterFrame& f, Vec2 a, Vec2 b, int ch) {
  const double half = 0.5 * f.meters_per_pixel;
  const auto p = covering_pixels(f, std::min(a.x, b.x) - half, std::max(a.x, b.x) + half,
                                 std::min(a.y, b.y) - half, std::max(a.y, b.y) + half);
  for (int r = p.r0; r <= p.r1; ++r)
    for (int c = p.c0; c <= p.c1; ++c)
      if (point_segment_distance(f.pixel_center(r, c), a, b) <= half) img.at(r, c, ch) = 255;
}

}  // namespace detail

/// Renders spot outlines, parked cars (one per occupied spot) and the ego footprint.
/// Anything outside the frame is clipped. Pass std::nullopt for `ego` to leave channel 2 empty.
inline BevImage rasterize_bev(const RasterFrame& frame, const LotConfig& config, const std::vector<Spot>& lot,
                              const OccupancyMatrix& occ, const std::optional<Pose>& ego,
                              const VehicleFootprint& footprint = {}) {
  BevImage img(frame.height, frame.width, frame.meters_per_pixel);
  for (const auto& s : lot) {
    const auto corners = spot_box(s, config).corners();
    for (int k = 0; k < 4; ++k) detail::draw_segment(img, frame, corners[k], corners[(k + 1) % 4], kMarkings);
  }
  for (const auto& box : parked_footprints(lot, occ, footprint)) detail::fill_box(img, frame, box, kStaticVehicles);
  if (ego) detail::fill_box(img, frame, footprint.at(*ego), kEgo);
  return img;
}

}  // namespace parkpredict
