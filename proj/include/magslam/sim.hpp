#pragma once

// Synthetic worlds and sensor logs: point-dipole magnetic fields on top of a
// uniform Earth field, scripted walking trajectories, and odometry plus
// magnetometer synthesis with drift.

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "magslam/error.hpp"
#include "magslam/geom.hpp"
#include "magslam/random.hpp"
#include "magslam/records.hpp"

namespace magslam {

struct Dipole {
  Vec3 position = Vec3::Zero();  // m
  Vec3 moment = Vec3::Zero();    // uT m^3
};

struct WorldField {
  Vec3 earth = Vec3(17.0, 2.0, -45.0);  // uT
  std::vector<Dipole> dipoles;
};

inline constexpr double kDipoleClearance = 0.2;  // m

inline Vec3 eval_field(const WorldField& world, const Vec3& p) {
  Vec3 b = world.earth;
  for (const auto& d : world.dipoles) {
    const Vec3 r = p - d.position;
    const double dist = r.norm();
    if (!(dist >= kDipoleClearance))
      throw DataError("eval_field: point within 0.2 m of a dipole");
    const Vec3 u = r / dist;
    b += (3.0 * u * u.dot(d.moment) - d.moment) / (dist * dist * dist);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Trajectories

enum class TrajectoryKind { square_loop, stair_3d, random_walk };

inline std::string_view to_string(TrajectoryKind k) {
  switch (k) {
    case TrajectoryKind::square_loop: return "square_loop";
    case TrajectoryKind::stair_3d: return "stair_3d";
    case TrajectoryKind::random_walk: return "random_walk";
  }
  return "?";
}

inline TrajectoryKind trajectory_kind_from_string(std::string_view s) {
  if (s == "square_loop") return TrajectoryKind::square_loop;
  if (s == "stair_3d") return TrajectoryKind::stair_3d;
  if (s == "random_walk") return TrajectoryKind::random_walk;
  throw DataError("unknown trajectory kind '" + std::string(s) + "'");
}

/// Scenario geometry. `extents` means:
///   square_loop: (width along x, height along y, unused); corners are
///     rounded with `corner_radius`.
///   stair_3d: (run length along x, U-turn diameter, total rise).
///   random_walk: (box size x, box size y, unused); the walk starts at the
///     origin in the middle of the box and lasts as long as `laps` walks
///     around the box perimeter would.
struct TrajectorySpec {
  TrajectoryKind kind = TrajectoryKind::square_loop;
  Vec3 extents = Vec3(20.0, 5.0, 0.0);
  int laps = 1;
  double speed = 1.2;         // m/s
  double sample_rate = 10.0;  // Hz
  double corner_radius = 0.25;
  std::uint64_t seed = 0;     // random_walk only

  void validate() const {
    if (!(sample_rate > 0.0) || !(speed > 0.0)) throw DataError("trajectory: speed and sample_rate must be positive");
    if (laps < 1) throw DataError("trajectory: laps must be >= 1");
    if (!extents.allFinite()) throw DataError("trajectory: non-finite extents");
  }
};

namespace detail {

// A constant-curvature piece of a planar path with a smooth height profile.
struct PathSegment {
  Vec2 start;
  double heading = 0.0;
  double length = 0.0;
  double curvature = 0.0;  // 1/m, positive turns left
  double z_start = 0.0;
  double rise = 0.0;

  void eval(double s, Vec3& p, double& yaw) const {
    s = std::clamp(s, 0.0, length);
    yaw = heading + curvature * s;
    Vec2 xy;
    if (curvature == 0.0) {
      xy = start + s * Vec2(std::cos(heading), std::sin(heading));
    } else {
      xy = start + Vec2(std::sin(yaw) - std::sin(heading), std::cos(heading) - std::cos(yaw)) / curvature;
    }
    double z = z_start;
    if (rise != 0.0) {
      const double u = s / length;
      z += rise * (u - std::sin(2.0 * kPi * u) / (2.0 * kPi));
    }
    p = Vec3(xy.x(), xy.y(), z);
  }
};

class Turtle {
 public:
  void straight(double length, double rise = 0.0) {
    if (length <= 0.0) return;
    push({pos_, heading_, length, 0.0, z_, rise});
  }
  void arc(double radius, double angle) {
    if (radius <= 0.0 || angle == 0.0) return;
    push({pos_, heading_, radius * std::abs(angle), (angle > 0 ? 1.0 : -1.0) / radius, z_, 0.0});
  }
  const std::vector<PathSegment>& segments() const { return segs_; }

 private:
  void push(const PathSegment& s) {
    segs_.push_back(s);
    Vec3 p;
    s.eval(s.length, p, heading_);
    pos_ = p.head<2>();
    z_ = p.z();
  }
  std::vector<PathSegment> segs_;
  Vec2 pos_ = Vec2::Zero();
  double heading_ = 0.0;
  double z_ = 0.0;
};

inline std::vector<PathSegment> closed_path(const TrajectorySpec& spec) {
  Turtle t;
  const double w = spec.extents.x(), h = spec.extents.y();
  if (spec.kind == TrajectoryKind::square_loop) {
    if (!(w > 0) || !(h > 0)) throw DataError("square_loop: extents must be positive");
    const double rho = std::clamp(spec.corner_radius, 0.0, 0.5 * std::min(w, h));
    for (int side = 0; side < 4; ++side) {
      t.straight((side % 2 == 0 ? w : h) - 2.0 * rho);
      t.arc(rho, 0.5 * kPi);
    }
  } else {
    const double rise = spec.extents.z();
    const double flat = 2.0;
    if (!(w > 2.0 * flat) || !(h > 0)) throw DataError("stair_3d: run must exceed 4 m and turn diameter be positive");
    t.straight(flat);
    t.straight(w - 2.0 * flat, rise);
    t.straight(flat);
    t.arc(0.5 * h, kPi);
    t.straight(flat);
    t.straight(w - 2.0 * flat, -rise);
    t.straight(flat);
    t.arc(0.5 * h, kPi);
  }
  return t.segments();
}

inline std::vector<double> sample_times(double duration, double rate) {
  std::vector<double> ts;
  const double dt = 1.0 / rate;
  for (long k = 0;; ++k) {
    const double t = k * dt;
    if (t >= duration - 1e-9) break;
    ts.push_back(t);
  }
  ts.push_back(duration);
  return ts;
}

inline std::vector<TimedPose> random_walk(const TrajectorySpec& spec) {
  const double bx = spec.extents.x(), by = spec.extents.y();
  if (!(bx > 2.0) || !(by > 2.0)) throw DataError("random_walk: box must exceed 2 m per side");
  const double duration = spec.laps * 2.0 * (bx + by) / spec.speed;
  const auto ts = sample_times(duration, spec.sample_rate);
  SplitMix64 rng = stream_rng(spec.seed, 0, 0x7261776B);
  std::normal_distribution<double> n01;
  const double margin = 1.0;
  const double turn_sd = 0.6;       // rad/s^(1/2) heading diffusion
  const double max_rate = 1.5;      // rad/s
  Vec2 pos = Vec2::Zero();
  double yaw = 0.0, rate = 0.0;
  std::vector<TimedPose> out;
  out.reserve(ts.size());
  for (std::size_t k = 0; k < ts.size(); ++k) {
    out.push_back({ts[k], {Vec3(pos.x(), pos.y(), 0.0), quat_from_yaw(yaw)}});
    if (k + 1 == ts.size()) break;
    const double dt = ts[k + 1] - ts[k];
    // Turn rate: a mean-reverting random process, steered towards the box
    // centre whenever the walker gets close to a wall heading outwards.
    rate += -rate * dt + turn_sd * std::sqrt(dt) * n01(rng);
    const Vec2 ahead = pos + 2.0 * Vec2(std::cos(yaw), std::sin(yaw));
    if (std::abs(ahead.x()) > 0.5 * bx - margin || std::abs(ahead.y()) > 0.5 * by - margin) {
      const double want = std::atan2(-pos.y(), -pos.x());
      rate = std::clamp(2.0 * std::remainder(want - yaw, 2.0 * kPi), -max_rate, max_rate);
    }
    rate = std::clamp(rate, -max_rate, max_rate);
    PathSegment seg{pos, yaw, spec.speed * dt, rate / spec.speed, 0.0, 0.0};
    Vec3 p;
    seg.eval(seg.length, p, yaw);
    pos = p.head<2>();
  }
  return out;
}

}  // namespace detail

/// Total path length of one lap of a closed scenario.
inline double lap_length(const TrajectorySpec& spec) {
  double len = 0.0;
  for (const auto& s : detail::closed_path(spec)) len += s.length;
  return len;
}

/// Ground-truth poses at `sample_rate`, with a final sample exactly at the end
/// of the walk. Heading follows the horizontal path tangent.
inline std::vector<TimedPose> generate_trajectory(const TrajectorySpec& spec) {
  spec.validate();
  if (spec.kind == TrajectoryKind::random_walk) return detail::random_walk(spec);
  const auto segs = detail::closed_path(spec);
  std::vector<double> cum{0.0};
  for (const auto& s : segs) cum.push_back(cum.back() + s.length);
  const double lap = cum.back();
  const double total = lap * spec.laps;
  std::vector<TimedPose> out;
  for (double t : detail::sample_times(total / spec.speed, spec.sample_rate)) {
    const double s_total = std::min(t * spec.speed, total);
    double s = s_total - lap * std::floor(s_total / lap);
    if (s_total >= total) s = lap;
    auto it = std::upper_bound(cum.begin(), cum.end(), s);
    std::size_t i = std::min<std::size_t>(std::max<std::ptrdiff_t>(it - cum.begin() - 1, 0), segs.size() - 1);
    Vec3 p;
    double yaw;
    segs[i].eval(s - cum[i], p, yaw);
    if (s_total >= total || s == 0.0) p = Vec3::Zero();  // closed path: exact return to start
    out.push_back({t, {p, quat_from_yaw(yaw)}});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Worlds

struct DipoleWorldSpec {
  Vec3 earth = Vec3(17.0, 2.0, -45.0);
  double dipoles_per_metre = 0.4;   // along the trajectory
  double depth_min = 1.5;           // m below the walking surface
  double depth_max = 3.0;
  double lateral_max = 3.0;         // m sideways from the path
  double anomaly_min = 5.0;         // uT, contribution at the closest path point
  double anomaly_max = 30.0;
};

/// Scatters dipoles below a trajectory with moments scaled so each one
/// contributes between anomaly_min and anomaly_max at its closest path point.
template <class Rng>
WorldField make_dipole_world(const std::vector<TimedPose>& truth, const DipoleWorldSpec& spec, Rng& rng) {
  WorldField world;
  world.earth = spec.earth;
  if (truth.size() < 2) return world;
  std::vector<double> cum{0.0};
  for (std::size_t k = 1; k < truth.size(); ++k)
    cum.push_back(cum.back() + (truth[k].pose.p - truth[k - 1].pose.p).norm());
  const int count = std::max(1, static_cast<int>(std::lround(cum.back() * spec.dipoles_per_metre)));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (int i = 0; i < count; ++i) {
    const double s = u01(rng) * cum.back();
    const std::size_t k = std::min<std::size_t>(std::upper_bound(cum.begin(), cum.end(), s) - cum.begin(), truth.size() - 1);
    const Vec3 anchor = truth[k].pose.p;
    const double ang = 2.0 * kPi * u01(rng);
    const double lat = spec.lateral_max * std::sqrt(u01(rng));
    const double depth = spec.depth_min + (spec.depth_max - spec.depth_min) * u01(rng);
    Dipole d;
    d.position = anchor + Vec3(lat * std::cos(ang), lat * std::sin(ang), -depth);
    Vec3 dir = standard_normal3(rng);
    dir.normalize();
    double closest = std::numeric_limits<double>::infinity();
    Vec3 at = anchor;
    for (const auto& tp : truth) {
      const double dist = (tp.pose.p - d.position).norm();
      if (dist < closest) {
        closest = dist;
        at = tp.pose.p;
      }
    }
    if (closest < 2.0 * kDipoleClearance) continue;
    const double target = spec.anomaly_min + (spec.anomaly_max - spec.anomaly_min) * u01(rng);
    const Vec3 r = (at - d.position).normalized();
    const double unit = (3.0 * r * r.dot(dir) - dir).norm() / (closest * closest * closest);
    d.moment = dir * (target / unit);
    world.dipoles.push_back(d);
  }
  return world;
}

// ---------------------------------------------------------------------------
// Log synthesis

struct OdometryNoise {
  Mat3 sigma_p = Mat3::Zero();  // m^2/s
  Mat3 sigma_q = Mat3::Zero();  // rad^2/s
};

struct PositionJump {
  double t = 0.0;             // applied to the first increment at or after t
  Vec3 offset = Vec3::Zero(); // m
};

struct SimulatedLog {
  std::vector<StepRecord> records;
  std::vector<TimedPose> truth;  // true pose at each record's time
};

/// Turns consecutive truth poses into odometry increments and magnetometer
/// samples. The odometry is a dead-reckoning track that accumulates drift:
/// p_hat += dp_true + e_p and q_hat = dq_true * q_hat * exp(e_q) with e ~
/// N(0, dt Sigma); the log carries the increments of that track, so
/// integrating them from the start pose reproduces it.
template <class Rng>
SimulatedLog synthesize_log(const std::vector<TimedPose>& truth, const WorldField& world,
                            const OdometryNoise& noise, double mag_noise_sd,
                            const std::vector<PositionJump>& jumps, Rng& rng) {
  if (mag_noise_sd < 0.0) throw DataError("synthesize_log: negative magnetometer noise");
  for (std::size_t k = 1; k < truth.size(); ++k)
    if (!(truth[k].t > truth[k - 1].t)) throw DataError("synthesize_log: truth not time-ordered");
  const Mat3 sp = psd_sqrt(noise.sigma_p);
  const Mat3 sq = psd_sqrt(noise.sigma_q);
  std::vector<bool> jump_used(jumps.size(), false);
  SimulatedLog out;
  if (truth.size() < 2) return out;
  out.records.reserve(truth.size() - 1);
  out.truth.reserve(truth.size() - 1);
  Quaternion q_hat = truth.front().pose.q;
  std::normal_distribution<double> n01;
  for (std::size_t k = 0; k + 1 < truth.size(); ++k) {
    const auto& a = truth[k];
    const auto& b = truth[k + 1];
    StepRecord rec;
    rec.t = a.t;
    rec.dt = b.t - a.t;
    const double sdt = std::sqrt(rec.dt);
    const Vec3 ep = sdt * (sp * standard_normal3(rng));
    const Vec3 eq = sdt * (sq * standard_normal3(rng));
    rec.dp = (b.pose.p - a.pose.p) + ep;
    for (std::size_t j = 0; j < jumps.size(); ++j) {
      if (!jump_used[j] && jumps[j].t <= a.t) {
        rec.dp += jumps[j].offset;
        jump_used[j] = true;
      }
    }
    const Quaternion dq_true = quat_multiply(b.pose.q, quat_conjugate(a.pose.q));
    const Quaternion q_next = quat_multiply(quat_multiply(dq_true, q_hat), quat_exp(eq));
    rec.dq = quat_multiply(q_next, quat_conjugate(q_hat));
    q_hat = q_next;
    const Mat3 r_bw = quat_to_rotmat(a.pose.q).transpose();
    rec.y = r_bw * eval_field(world, a.pose.p);
    if (mag_noise_sd > 0.0) rec.y += mag_noise_sd * Vec3(n01(rng), n01(rng), n01(rng));
    out.records.push_back(rec);
    out.truth.push_back(a);
  }
  return out;
}

/// Integrates the odometry from a start pose; returns the pose at each
/// record's time followed by the pose after the last increment.
inline std::vector<Pose> dead_reckon(const std::vector<StepRecord>& records, const Pose& start = {}) {
  std::vector<Pose> out;
  out.reserve(records.size() + 1);
  Pose p = start;
  out.push_back(p);
  for (const auto& r : records) {
    p.p += r.dp;
    p.q = quat_multiply(r.dq, p.q);
    out.push_back(p);
  }
  return out;
}

/// Everything needed to synthesise one ground-truth log.
struct ScenarioSpec {
  TrajectorySpec trajectory;
  DipoleWorldSpec world;
  OdometryNoise odometry;
  double mag_noise_sd = 1.0;  // uT per axis
  std::vector<PositionJump> jumps;
};

struct Scenario {
  WorldField world;
  SimulatedLog log;
};

/// Trajectory, dipole world and noisy log for one seed. The seed drives the
/// random-walk path, the dipole placement and all sensor noise.
inline Scenario simulate_scenario(const ScenarioSpec& spec, std::uint64_t seed) {
  TrajectorySpec ts = spec.trajectory;
  ts.seed = seed;
  const auto truth = generate_trajectory(ts);
  SplitMix64 rng = stream_rng(seed, 1, 2);
  Scenario out;
  out.world = make_dipole_world(truth, spec.world, rng);
  out.log = synthesize_log(truth, out.world, spec.odometry, spec.mag_noise_sd, spec.jumps, rng);
  return out;
}

}  // namespace magslam
