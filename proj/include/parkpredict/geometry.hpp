#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

namespace parkpredict {

/// Wraps an angle into (-pi, pi].
inline double wrap_angle(double a) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  a = std::fmod(a, two_pi);
  if (a <= -std::numbers::pi) a += two_pi;
  if (a > std::numbers::pi) a -= two_pi;
  return a;
}

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
  friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
  friend Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
  friend bool operator==(const Vec2&, const Vec2&) = default;
};

inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline double norm(Vec2 a) { return std::hypot(a.x, a.y); }

/// Planar vehicle pose. theta is kept in (-pi, pi] by every producer in this library.
struct Pose {
  double x = 0.0;
  double y = 0.0;
  double theta = 0.0;

  Vec2 position() const { return {x, y}; }
  friend bool operator==(const Pose&, const Pose&) = default;
};

/// Oriented rectangle centred on `center`, long axis along `heading`.
struct OrientedBox {
  Vec2 center;
  double heading = 0.0;
  double half_length = 0.0;
  double half_width = 0.0;

  Vec2 axis_u() const { return {std::cos(heading), std::sin(heading)}; }
  Vec2 axis_v() const { return {-std::sin(heading), std::cos(heading)}; }

  std::array<Vec2, 4> corners() const {
    const Vec2 u = half_length * axis_u();
    const Vec2 v = half_width * axis_v();
    return {center + u + v, center - u + v, center - u - v, center + u - v};
  }

  bool contains(Vec2 p) const {
    const Vec2 d = p - center;
    return std::abs(dot(d, axis_u())) <= half_length && std::abs(dot(d, axis_v())) <= half_width;
  }
};

namespace detail {
inline void project(const std::array<Vec2, 4>& pts, Vec2 axis, double& lo, double& hi) {
  lo = hi = dot(pts[0], axis);
  for (int i = 1; i < 4; ++i) {
    const double p = dot(pts[i], axis);
    lo = std::min(lo, p);
    hi = std::max(hi, p);
  }
}
}  // namespace detail

/// Separating-axis overlap test. Touching boxes do not overlap.
inline bool boxes_overlap(const OrientedBox& a, const OrientedBox& b) {
  const auto ca = a.corners();
  const auto cb = b.corners();
  for (Vec2 axis : {a.axis_u(), a.axis_v(), b.axis_u(), b.axis_v()}) {
    double alo, ahi, blo, bhi;
    detail::project(ca, axis, alo, ahi);
    detail::project(cb, axis, blo, bhi);
    if (ahi <= blo || bhi <= alo) return false;
  }
  return true;
}

/// Distance from point p to segment [a, b].
inline double point_segment_distance(Vec2 p, Vec2 a, Vec2 b) {
  const Vec2 ab = b - a;
  const double len2 = dot(ab, ab);
  double t = len2 > 0.0 ? dot(p - a, ab) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return norm(p - (a + t * ab));
}

}  // namespace parkpredict
