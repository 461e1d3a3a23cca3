#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "magslam/geom.hpp"

using namespace magslam;

namespace {

Quaternion random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> n01;
  return quat_normalized({n01(rng), n01(rng), n01(rng), n01(rng)});
}

Mat3 skew(const Vec3& v) {
  Mat3 s;
  s << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return s;
}

// Matrix exponential by truncated Taylor series, independent of the
// quaternion code.
Mat3 expm_series(const Mat3& a) {
  Mat3 term = Mat3::Identity(), sum = Mat3::Identity();
  for (int k = 1; k < 40; ++k) {
    term = (term * a / k).eval();
    sum += term;
  }
  return sum;
}

Mat3 rodrigues(const Vec3& v) {
  const double th = v.norm();
  const Mat3 k = skew(v / th);
  return Mat3::Identity() + std::sin(th) * k + (1 - std::cos(th)) * k * k;
}

void expect_quat_near(const Quaternion& a, const Quaternion& b, double tol) {
  EXPECT_NEAR(a.w, b.w, tol);
  EXPECT_NEAR(a.x, b.x, tol);
  EXPECT_NEAR(a.y, b.y, tol);
  EXPECT_NEAR(a.z, b.z, tol);
}

// Independent point-in-prism check from the six vertices.
bool inside_prism(const Vec3& p, const TileId& t, const HexGridSpec& spec) {
  const Vec3 c = tile_center(t, spec);
  const Vec2 q = (p - c).head<2>();
  for (int i = 0; i < 6; ++i) {
    const double a0 = i * kPi / 3.0, a1 = (i + 1) * kPi / 3.0;
    const Vec2 v0 = spec.radius * Vec2(std::cos(a0), std::sin(a0));
    const Vec2 v1 = spec.radius * Vec2(std::cos(a1), std::sin(a1));
    const Vec2 e = v1 - v0, r = q - v0;
    if (e.x() * r.y() - e.y() * r.x() < 0.0) return false;  // right of a CCW edge
  }
  const double dz = p.z() - c.z();
  return dz >= -spec.half_height && dz < spec.half_height;
}

double brute_boundary_distance(const Vec3& p, const TileId& t, const HexGridSpec& spec) {
  const Vec3 c = tile_center(t, spec);
  const Vec2 q = (p - c).head<2>();
  double best = std::abs(p.z() - (c.z() + spec.half_height));
  best = std::min(best, std::abs(p.z() - (c.z() - spec.half_height)));
  for (int i = 0; i < 6; ++i) {
    const double a0 = i * kPi / 3.0, a1 = (i + 1) * kPi / 3.0;
    const Vec2 v0 = spec.radius * Vec2(std::cos(a0), std::sin(a0));
    const Vec2 v1 = spec.radius * Vec2(std::cos(a1), std::sin(a1));
    const Vec2 e = v1 - v0;
    const double s = std::clamp((q - v0).dot(e) / e.squaredNorm(), 0.0, 1.0);
    best = std::min(best, (q - (v0 + s * e)).norm());
  }
  return best;
}

}  // namespace

TEST(Quaternion, IdentityIsNeutral) {
  std::mt19937_64 rng(1);
  const Quaternion q = random_unit(rng);
  expect_quat_near(quat_multiply(Quaternion{}, q), q, 1e-15);
  expect_quat_near(quat_multiply(q, Quaternion{}), q, 1e-15);
}

TEST(Quaternion, ConjugateIsInverse) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 100; ++i) {
    const Quaternion q = random_unit(rng);
    expect_quat_near(quat_multiply(q, quat_conjugate(q)), Quaternion{}, 1e-15);
  }
}

TEST(Quaternion, QuarterTurnsAboutZCompose) {
  const Quaternion q90 = quat_exp(Vec3(0, 0, kPi / 2));
  const Quaternion q180 = quat_multiply(q90, q90);
  Mat3 expected;
  expected << -1, 0, 0, 0, -1, 0, 0, 0, 1;
  EXPECT_LT((quat_to_rotmat(q180) - expected).cwiseAbs().maxCoeff(), 1e-15);
  // Same result through the rotation matrices.
  const Mat3 r90 = quat_to_rotmat(q90);
  EXPECT_LT((r90 * r90 - quat_to_rotmat(q180)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Quaternion, MultiplyRejectsNonFinite) {
  const Quaternion bad{std::nan(""), 0, 0, 0};
  EXPECT_THROW(quat_multiply(bad, Quaternion{}), DataError);
  EXPECT_THROW(quat_multiply(Quaternion{}, bad), DataError);
}

TEST(Quaternion, ExpOfZeroIsIdentity) {
  expect_quat_near(quat_exp(Vec3::Zero()), Quaternion{}, 0.0);
}

TEST(Quaternion, ExpOfHalfTurnAboutX) {
  expect_quat_near(quat_exp(Vec3(kPi, 0, 0)), Quaternion{0, 1, 0, 0}, 1e-15);
}

TEST(Quaternion, ExpMatchesMatrixExponential) {
  const Vec3 v(0.1, 0.2, 0.3);
  EXPECT_LT((quat_to_rotmat(quat_exp(v)) - expm_series(skew(v))).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Quaternion, ExpSmallAngleSeriesIsContinuous) {
  const Vec3 dir = Vec3(1, -2, 0.5).normalized();
  const Quaternion below = quat_exp(0.99e-8 * dir);
  const Quaternion above = quat_exp(1.01e-8 * dir);
  expect_quat_near(below, above, 1e-9);
  EXPECT_NEAR(below.norm(), 1.0, 1e-15);
}

TEST(Quaternion, ExpMatchesRodriguesOnRandomVectors) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  for (int i = 0; i < 10000; ++i) {
    const Vec3 v(u(rng), u(rng), u(rng));
    ASSERT_LT((quat_to_rotmat(quat_exp(v)) - rodrigues(v)).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Quaternion, RotmatOfIdentity) { EXPECT_EQ(quat_to_rotmat(Quaternion{}), Mat3::Identity()); }

TEST(Quaternion, RotmatQuarterTurnMapsXToY) {
  const Mat3 r = quat_to_rotmat(quat_exp(Vec3(0, 0, kPi / 2)));
  EXPECT_LT((r * Vec3::UnitX() - Vec3::UnitY()).norm(), 1e-15);
  EXPECT_LT((r * Vec3::UnitY() + Vec3::UnitX()).norm(), 1e-15);
  EXPECT_LT((r * Vec3::UnitZ() - Vec3::UnitZ()).norm(), 1e-15);
}

TEST(Quaternion, RotmatIsOrthonormal) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 10000; ++i) {
    const Mat3 r = quat_to_rotmat(random_unit(rng));
    ASSERT_LT((r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff(), 1e-12);
    ASSERT_NEAR(r.determinant(), 1.0, 1e-12);
  }
}

TEST(Quaternion, MultiplyIsAssociative) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 10000; ++i) {
    const Quaternion a = random_unit(rng), b = random_unit(rng), c = random_unit(rng);
    const Quaternion l = quat_multiply(quat_multiply(a, b), c);
    const Quaternion r = quat_multiply(a, quat_multiply(b, c));
    ASSERT_LT(std::abs(l.w - r.w) + std::abs(l.x - r.x) + std::abs(l.y - r.y) + std::abs(l.z - r.z), 1e-12);
  }
}

TEST(Quaternion, NormSurvivesAMillionCompositions) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n01;
  Quaternion q;
  for (int i = 0; i < 1000000; ++i) q = quat_multiply(quat_exp(Vec3(n01(rng), n01(rng), n01(rng)) * 0.1), q);
  EXPECT_NEAR(q.norm(), 1.0, 1e-12);
}

TEST(Quaternion, WorldFrameIncrementComposesOnTheLeft) {
  // A yaw increment applied to a pitched body rotates the body about the
  // world z axis.
  const Quaternion body = quat_exp(Vec3(0, 0.3, 0));
  const Quaternion inc = quat_exp(Vec3(0, 0, 0.5));
  const Mat3 expected = quat_to_rotmat(inc) * quat_to_rotmat(body);
  EXPECT_LT((quat_to_rotmat(quat_multiply(inc, body)) - expected).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(HexGrid, TileVolumeOfDefaultGeometry) {
  const HexGridSpec spec;
  EXPECT_NEAR(spec.tile_volume(), 1.5 * std::sqrt(3.0) * 25.0 * 4.0, 1e-12);
  EXPECT_NEAR(spec.tile_volume(), 259.8, 0.05);
}

TEST(HexGrid, OriginBelongsToTileZero) {
  HexGridSpec spec;
  EXPECT_EQ(point_to_tile(Vec3::Zero(), spec), (TileId{0, 0, 0}));
  spec.origin = Vec3(3.0, -7.0, 1.0);
  EXPECT_EQ(point_to_tile(spec.origin, spec), (TileId{0, 0, 0}));
}

TEST(HexGrid, CentreOfTileZeroIsOrigin) {
  HexGridSpec spec;
  spec.origin = Vec3(1.0, 2.0, 3.0);
  EXPECT_EQ(tile_center({0, 0, 0}, spec), spec.origin);
}

TEST(HexGrid, AxialStepIsOneHexPitch) {
  const HexGridSpec spec;
  const Vec3 c = tile_center({1, 0, 0}, spec);
  // Flat-top lattice: the a step moves 1.5 r across and half a row up.
  EXPECT_NEAR(c.x(), 7.5, 1e-12);
  EXPECT_NEAR(c.y(), 0.5 * std::sqrt(3.0) * 5.0, 1e-12);
  EXPECT_NEAR(c.head<2>().norm(), 2.0 * spec.inradius(), 1e-12);
  EXPECT_NEAR(tile_center({0, 0, 1}, spec).z(), 4.0, 1e-12);
}

TEST(HexGrid, CentreRoundTripOverBlock) {
  HexGridSpec spec;
  spec.origin = Vec3(0.3, -0.2, 0.1);
  for (int a = -2; a <= 2; ++a)
    for (int b = -2; b <= 2; ++b)
      for (int k = -1; k <= 1; ++k) {
        const TileId t{a, b, k};
        EXPECT_EQ(point_to_tile(tile_center(t, spec), spec), t);
      }
}

TEST(HexGrid, CentresAreSeparatedByTwoInradii) {
  const HexGridSpec spec;
  std::vector<Vec3> centres;
  for (int a = -3; a <= 3; ++a)
    for (int b = -3; b <= 3; ++b) centres.push_back(tile_center({a, b, 0}, spec));
  for (std::size_t i = 0; i < centres.size(); ++i)
    for (std::size_t j = i + 1; j < centres.size(); ++j)
      ASSERT_GE((centres[i] - centres[j]).norm(), 2.0 * spec.inradius() - 1e-9);
}

TEST(HexGrid, RandomPointsLieInExactlyOneTile) {
  HexGridSpec spec;
  spec.origin = Vec3(1.0, -1.5, 0.0);
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-30.0, 30.0), uz(-9.0, 9.0);
  for (int i = 0; i < 10000; ++i) {
    const Vec3 p(u(rng), u(rng), uz(rng));
    int owners = 0;
    TileId owner;
    for (int a = -6; a <= 6; ++a)
      for (int b = -8; b <= 8; ++b)
        for (int k = -4; k <= 4; ++k)
          if (inside_prism(p, {a, b, k}, spec)) {
            ++owners;
            owner = {a, b, k};
          }
    ASSERT_EQ(owners, 1) << "point " << p.transpose();
    ASSERT_EQ(point_to_tile(p, spec), owner);
  }
}

TEST(HexGrid, SlabOwnershipIsHalfOpen) {
  const HexGridSpec spec;
  EXPECT_EQ(point_to_tile(Vec3(0, 0, -2.0), spec).k, 0);
  EXPECT_EQ(point_to_tile(Vec3(0, 0, 2.0), spec).k, 1);
}

TEST(HexGrid, EdgePointsResolveDeterministically) {
  const HexGridSpec spec;
  // Midpoint of the shared edge between (0,0,0) and (1,0,0).
  const Vec3 mid = 0.5 * (tile_center({0, 0, 0}, spec) + tile_center({1, 0, 0}, spec));
  const TileId t = point_to_tile(mid, spec);
  EXPECT_TRUE(t == (TileId{0, 0, 0}) || t == (TileId{1, 0, 0}));
  for (int i = 0; i < 5; ++i) EXPECT_EQ(point_to_tile(mid, spec), t);
}

TEST(HexGrid, NonFinitePointRejected) {
  EXPECT_THROW(point_to_tile(Vec3(std::nan(""), 0, 0), HexGridSpec{}), DataError);
}

TEST(BoundaryDistance, CentreIsLimitedByHalfHeight) {
  const HexGridSpec spec;
  EXPECT_NEAR(boundary_distance(Vec3::Zero(), {0, 0, 0}, spec), 2.0, 1e-12);
  HexGridSpec tall;
  tall.half_height = 10.0;
  EXPECT_NEAR(boundary_distance(Vec3::Zero(), {0, 0, 0}, tall), 5.0 * std::sqrt(3.0) / 2.0, 1e-12);
}

TEST(BoundaryDistance, ZeroOnAnEdge) {
  const HexGridSpec spec;
  // The vertex at angle 0 lies on the boundary; nudge inwards by nothing.
  const Vec3 on_edge(0.0, -spec.inradius() + 1e-13, 0.0);
  const TileId t = point_to_tile(on_edge, spec);
  ASSERT_EQ(t, (TileId{0, 0, 0}));
  EXPECT_NEAR(boundary_distance(on_edge, t, spec), 0.0, 1e-12);
}

TEST(BoundaryDistance, MatchesBruteForce) {
  HexGridSpec spec;
  spec.origin = Vec3(0.4, 0.2, -0.3);
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-12.0, 12.0), uz(-5.0, 5.0);
  for (int i = 0; i < 10000; ++i) {
    const Vec3 p(u(rng), u(rng), uz(rng));
    const TileId t = point_to_tile(p, spec);
    ASSERT_NEAR(boundary_distance(p, t, spec), brute_boundary_distance(p, t, spec), 1e-12);
  }
}

TEST(BoundaryDistance, RejectsPointOutsideTile) {
  const HexGridSpec spec;
  EXPECT_THROW(boundary_distance(Vec3(20.0, 0, 0), {0, 0, 0}, spec), DataError);
}

TEST(Neighbours, CentreHasNone) {
  const HexGridSpec spec;
  EXPECT_TRUE(tile_neighbors({0, 0, 0}, Vec3::Zero(), spec, 0.1).empty());
}

TEST(Neighbours, NearOneEdgeGivesThatNeighbour) {
  const HexGridSpec spec;
  for (int i = 0; i < 6; ++i) {
    const TileId other{hex::kEdgeNeighbour[i][0], hex::kEdgeNeighbour[i][1], 0};
    const Vec3 towards = (tile_center(other, spec) - tile_center({0, 0, 0}, spec)).normalized();
    const Vec3 p = (spec.inradius() - 0.05) * towards;
    const auto n = tile_neighbors({0, 0, 0}, p, spec, 0.1);
    ASSERT_EQ(n.size(), 1u);
    EXPECT_EQ(n[0], other);
    EXPECT_TRUE(tile_neighbors({0, 0, 0}, (spec.inradius() - 0.15) * towards, spec, 0.1).empty());
  }
}

TEST(Neighbours, CornerGivesTheTwoTilesSharingIt) {
  const HexGridSpec spec;
  for (int i = 0; i < 6; ++i) {
    const Vec3 corner(spec.radius * std::cos(i * kPi / 3.0), spec.radius * std::sin(i * kPi / 3.0), 0.0);
    const Vec3 p = 0.999 * corner;
    const auto n = tile_neighbors({0, 0, 0}, p, spec, 0.1);
    // Oracle: neighbours whose own hexagon is within the threshold of p.
    std::set<TileId> expected;
    for (int j = 0; j < 6; ++j) {
      const TileId o{hex::kEdgeNeighbour[j][0], hex::kEdgeNeighbour[j][1], 0};
      const Vec3 local = p - tile_center(o, spec);
      if (-hex::signed_distance(local.head<2>(), spec.radius) <= 0.1) expected.insert(o);
    }
    ASSERT_EQ(expected.size(), 2u);
    EXPECT_EQ(std::set<TileId>(n.begin(), n.end()), expected);
  }
}

TEST(Neighbours, VerticalNeighbourNearSlabFace) {
  const HexGridSpec spec;
  auto n = tile_neighbors({0, 0, 0}, Vec3(0, 0, 1.95), spec, 0.1);
  ASSERT_EQ(n.size(), 1u);
  EXPECT_EQ(n[0], (TileId{0, 0, 1}));
  n = tile_neighbors({0, 0, 0}, Vec3(0, 0, -1.95), spec, 0.1);
  ASSERT_EQ(n.size(), 1u);
  EXPECT_EQ(n[0], (TileId{0, 0, -1}));
}

TEST(TileIdHash, DistinctIdsRarelyCollide) {
  std::set<std::size_t> hashes;
  for (int a = -10; a <= 10; ++a)
    for (int b = -10; b <= 10; ++b)
      for (int k = -3; k <= 3; ++k) hashes.insert(std::hash<TileId>{}({a, b, k}));
  EXPECT_EQ(hashes.size(), 21u * 21u * 7u);
}
