#pragma once

#include <cmath>

namespace mrn {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  constexpr Vec2() = default;
  constexpr Vec2(double x_, double y_) : x(x_), y(y_) {}

  constexpr Vec2 operator+(const Vec2& o) const { return {x + o.x, y + o.y}; }
  constexpr Vec2 operator-(const Vec2& o) const { return {x - o.x, y - o.y}; }
  constexpr Vec2 operator*(double s) const { return {x * s, y * s}; }
  constexpr Vec2 operator/(double s) const { return {x / s, y / s}; }
  constexpr Vec2 operator-() const { return {-x, -y}; }
  Vec2& operator+=(const Vec2& o) { x += o.x; y += o.y; return *this; }
  Vec2& operator-=(const Vec2& o) { x -= o.x; y -= o.y; return *this; }
  Vec2& operator*=(double s) { x *= s; y *= s; return *this; }

  constexpr double dot(const Vec2& o) const { return x * o.x + y * o.y; }
  constexpr double cross(const Vec2& o) const { return x * o.y - y * o.x; }
  double norm() const { return std::hypot(x, y); }
  constexpr double norm_sq() const { return x * x + y * y; }

  // Counter-clockwise perpendicular.
  constexpr Vec2 perp() const { return {-y, x}; }

  Vec2 normalized(Vec2 fallback = {1.0, 0.0}) const {
    const double n = norm();
    return n > 0.0 ? Vec2{x / n, y / n} : fallback;
  }

  Vec2 clamped(double max_norm) const {
    const double n = norm();
    if (n <= max_norm || n == 0.0) return *this;
    return {x * (max_norm / n), y * (max_norm / n)};
  }
};

inline constexpr Vec2 operator*(double s, const Vec2& v) { return v * s; }

inline double distance(const Vec2& a, const Vec2& b) { return (a - b).norm(); }

}  // namespace mrn
