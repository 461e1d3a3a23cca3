#pragma once

// Plain records exchanged between the simulator, the filter and the file
// formats.

#include <cstdint>

#include "magslam/geom.hpp"

namespace magslam {

/// One odometry increment and the magnetometer sample taken at the pose the
/// increment starts from.
struct StepRecord {
  double t = 0.0;                // s
  double dt = 0.1;               // s
  Vec3 dp = Vec3::Zero();        // m, world frame
  Quaternion dq;                 // world-frame orientation increment
  Vec3 y = Vec3::Zero();         // uT, body frame
};

struct TimedPose {
  double t = 0.0;
  Pose pose;
};

/// Point estimate emitted by the filter for one step, before propagation.
struct EstimateRecord {
  double t = 0.0;
  Pose pose;
  TileId tile;
  double ess = 0.0;
  bool resampled = false;
};

}  // namespace magslam
