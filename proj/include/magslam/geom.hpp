#pragma once

// Quaternion algebra, poses and the hexagonal-prism tiling of world space.
//
// Quaternions are Hamilton, scalar first, and rotate body-frame vectors into
// the world frame. Tiles are flat-top hexagons (vertices on the local x-axis)
// indexed by axial coordinates (a, b), stacked in vertical slabs of height
// 2 * half_height indexed by k.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <ostream>
#include <vector>

#include <Eigen/Dense>

#include "magslam/error.hpp"

namespace magslam {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kSqrt3 = 1.73205080756887729353;

struct Quaternion {
  double w = 1.0;
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  static Quaternion identity() { return {}; }

  double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }
  bool finite() const {
    return std::isfinite(w) && std::isfinite(x) && std::isfinite(y) && std::isfinite(z);
  }
  Vec3 vec() const { return {x, y, z}; }

  friend bool operator==(const Quaternion&, const Quaternion&) = default;
};

inline std::ostream& operator<<(std::ostream& os, const Quaternion& q) {
  return os << "(" << q.w << ", " << q.x << ", " << q.y << ", " << q.z << ")";
}

inline Quaternion quat_normalized(const Quaternion& q) {
  if (!q.finite()) throw DataError("quaternion has non-finite components");
  const double n = q.norm();
  if (n == 0.0) throw DataError("cannot normalise a zero quaternion");
  return {q.w / n, q.x / n, q.y / n, q.z / n};
}

inline Quaternion quat_conjugate(const Quaternion& q) { return {q.w, -q.x, -q.y, -q.z}; }

/// Hamilton product q1 * q2, renormalised. With q2 the body-to-world
/// orientation, q1 on the left acts as a world-frame increment.
inline Quaternion quat_multiply(const Quaternion& q1, const Quaternion& q2) {
  if (!q1.finite() || !q2.finite()) throw DataError("quat_multiply: non-finite input");
  Quaternion r{q1.w * q2.w - q1.x * q2.x - q1.y * q2.y - q1.z * q2.z,
               q1.w * q2.x + q1.x * q2.w + q1.y * q2.z - q1.z * q2.y,
               q1.w * q2.y - q1.x * q2.z + q1.y * q2.w + q1.z * q2.x,
               q1.w * q2.z + q1.x * q2.y - q1.y * q2.x + q1.z * q2.w};
  return quat_normalized(r);
}

/// Rotation vector (radians) to unit quaternion.
inline Quaternion quat_exp(const Vec3& v) {
  if (!v.allFinite()) throw DataError("quat_exp: non-finite rotation vector");
  const double theta = v.norm();
  if (theta < 1e-8) {
    // cos(t/2) and sin(t/2)/t to second order
    const double t2 = theta * theta;
    const double s = 0.5 * (1.0 - t2 / 24.0);
    return quat_normalized({1.0 - t2 / 8.0, s * v.x(), s * v.y(), s * v.z()});
  }
  const double s = std::sin(0.5 * theta) / theta;
  return {std::cos(0.5 * theta), s * v.x(), s * v.y(), s * v.z()};
}

/// Body-to-world rotation matrix R^{wb}. Its transpose is R^{bw}.
inline Mat3 quat_to_rotmat(const Quaternion& q) {
  const double w = q.w, x = q.x, y = q.y, z = q.z;
  Mat3 r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

inline Quaternion quat_from_yaw(double yaw) { return quat_exp(Vec3(0.0, 0.0, yaw)); }

struct Pose {
  Vec3 p = Vec3::Zero();
  Quaternion q;
};

struct HexGridSpec {
  double radius = 5.0;       // circumradius, m
  double half_height = 2.0;  // m
  Vec3 origin = Vec3::Zero();

  double inradius() const { return 0.5 * kSqrt3 * radius; }
  double hex_area() const { return 1.5 * kSqrt3 * radius * radius; }
  double tile_volume() const { return hex_area() * 2.0 * half_height; }

  void validate() const {
    if (!(radius > 0.0) || !(half_height > 0.0) || !origin.allFinite())
      throw DataError("hex grid: radius and half_height must be positive");
  }
};

struct TileId {
  std::int32_t a = 0;
  std::int32_t b = 0;
  std::int32_t k = 0;

  friend auto operator<=>(const TileId&, const TileId&) = default;
};

inline std::ostream& operator<<(std::ostream& os, const TileId& t) {
  return os << "(" << t.a << "," << t.b << "," << t.k << ")";
}

namespace hex {

// Outward edge normals of a flat-top hexagon, at 30 + 60 i degrees, and the
// axial offset of the neighbour across each edge.
inline const std::array<Vec2, 6>& edge_normals() {
  static const std::array<Vec2, 6> normals = [] {
    std::array<Vec2, 6> n;
    for (int i = 0; i < 6; ++i) {
      const double ang = kPi / 6.0 + i * kPi / 3.0;
      n[i] = Vec2(std::cos(ang), std::sin(ang));
    }
    return n;
  }();
  return normals;
}

inline constexpr std::array<std::array<int, 2>, 6> kEdgeNeighbour = {
    {{1, 0}, {0, 1}, {-1, 1}, {-1, 0}, {0, -1}, {1, -1}}};

// Vertices i and i+1 bound edge i.
inline Vec2 vertex(int i, double radius) {
  const double ang = (i % 6) * kPi / 3.0;
  return {radius * std::cos(ang), radius * std::sin(ang)};
}

/// Signed distance to the boundary of a centred flat-top hexagon, positive
/// inside. Exact inside; outside it is the largest edge-line violation.
inline double signed_distance(const Vec2& local, double radius) {
  const double inr = 0.5 * kSqrt3 * radius;
  double worst = -std::numeric_limits<double>::infinity();
  for (const auto& n : edge_normals()) worst = std::max(worst, n.dot(local));
  return inr - worst;
}

/// Index of the edge closest to an interior point.
inline int nearest_edge(const Vec2& local) {
  int best = 0;
  double worst = -std::numeric_limits<double>::infinity();
  const auto& normals = edge_normals();
  for (int i = 0; i < 6; ++i) {
    const double d = normals[i].dot(local);
    if (d > worst) {
      worst = d;
      best = i;
    }
  }
  return best;
}

inline bool contains(const Vec2& local, double radius) {
  return signed_distance(local, radius) >= 0.0;
}

inline double segment_distance(const Vec2& p, const Vec2& a, const Vec2& b) {
  const Vec2 ab = b - a;
  const double t = std::clamp((p - a).dot(ab) / ab.squaredNorm(), 0.0, 1.0);
  return (p - (a + t * ab)).norm();
}

}  // namespace hex

inline Vec3 tile_center(const TileId& t, const HexGridSpec& spec) {
  return spec.origin + Vec3(1.5 * spec.radius * t.a,
                            kSqrt3 * spec.radius * (t.b + 0.5 * t.a),
                            2.0 * spec.half_height * t.k);
}

inline TileId point_to_tile(const Vec3& p, const HexGridSpec& spec) {
  if (!p.allFinite()) throw DataError("point_to_tile: non-finite point");
  const Vec3 d = p - spec.origin;
  const double fa = (2.0 / 3.0) * d.x() / spec.radius;
  const double fb = (-d.x() / 3.0 + d.y() / kSqrt3) / spec.radius;
  const double fc = -fa - fb;
  double ra = std::round(fa), rb = std::round(fb), rc = std::round(fc);
  const double da = std::abs(ra - fa), db = std::abs(rb - fb), dc = std::abs(rc - fc);
  if (da > db && da > dc) {
    ra = -rb - rc;
  } else if (db > dc) {
    rb = -ra - rc;
  }
  const double fk = d.z() / (2.0 * spec.half_height) + 0.5;
  return {static_cast<std::int32_t>(ra), static_cast<std::int32_t>(rb),
          static_cast<std::int32_t>(std::floor(fk))};
}

/// Distance from p to the nearest face of tile t (hexagon edges and the two
/// slab faces). Throws if p is not owned by t.
inline double boundary_distance(const Vec3& p, const TileId& t, const HexGridSpec& spec) {
  if (point_to_tile(p, spec) != t) throw DataError("boundary_distance: point outside tile");
  const Vec3 local = p - tile_center(t, spec);
  const double horizontal = std::max(0.0, hex::signed_distance(local.head<2>(), spec.radius));
  const double vertical = std::max(0.0, spec.half_height - std::abs(local.z()));
  return std::min(horizontal, vertical);
}

/// Tiles adjacent to t whose shared face lies within `threshold` of `near`.
/// In-plane neighbours share an edge; vertical neighbours share a slab face.
/// The result is sorted.
inline std::vector<TileId> tile_neighbors(const TileId& t, const Vec3& near,
                                          const HexGridSpec& spec, double threshold) {
  std::vector<TileId> out;
  const Vec3 local = near - tile_center(t, spec);
  const Vec2 xy = local.head<2>();
  for (int i = 0; i < 6; ++i) {
    const double d = hex::segment_distance(xy, hex::vertex(i, spec.radius),
                                           hex::vertex(i + 1, spec.radius));
    if (d <= threshold) {
      out.push_back({t.a + hex::kEdgeNeighbour[i][0], t.b + hex::kEdgeNeighbour[i][1], t.k});
    }
  }
  if (spec.half_height - local.z() <= threshold) out.push_back({t.a, t.b, t.k + 1});
  if (local.z() + spec.half_height <= threshold) out.push_back({t.a, t.b, t.k - 1});
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace magslam

template <>
struct std::hash<magslam::TileId> {
  std::size_t operator()(const magslam::TileId& t) const noexcept {
    std::uint64_t h = static_cast<std::uint32_t>(t.a);
    h = h * 0x9E3779B97F4A7C15ULL ^ static_cast<std::uint32_t>(t.b);
    h = h * 0x9E3779B97F4A7C15ULL ^ static_cast<std::uint32_t>(t.k);
    return static_cast<std::size_t>(h ^ (h >> 29));
  }
};
