#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "magslam/eigenbasis.hpp"
#include "support/fixtures.hpp"

using namespace magslam;
using magslam::testing::full_basis;
using magslam::testing::small_basis;

namespace {

constexpr double kJ01Squared = 5.783185962946784;  // first zero of J0, squared

double hex_area(double r) { return 1.5 * std::sqrt(3.0) * r * r; }

// Random point of the hexagon of circumradius r at least `margin` inside.
Vec2 random_inside(std::mt19937_64& rng, double r, double margin) {
  std::uniform_real_distribution<double> u(-r, r);
  while (true) {
    const Vec2 p(u(rng), u(rng));
    if (hex::signed_distance(p, r) >= margin) return p;
  }
}

}  // namespace

TEST(Stencil, SquareSpectrumConvergesAtSecondOrder) {
  const double exact = 2.0 * kPi * kPi;
  const auto coarse = solve_smallest_eigenpairs(build_square_stencil(1.0, 0.1).matrix, 1);
  const auto fine = solve_smallest_eigenpairs(build_square_stencil(1.0, 0.05).matrix, 1);
  const double e_coarse = std::abs(coarse.eigenvalues(0) - exact);
  const double e_fine = std::abs(fine.eigenvalues(0) - exact);
  EXPECT_LT(e_fine / exact, 0.01);
  // Halving h must cut the error at least as fast as a second-order scheme
  // (ratio 4), with slack for round-off.
  EXPECT_GT(e_coarse / std::max(e_fine, 1e-14), 3.0);
}

TEST(Stencil, SquareMatchesAnalyticLowModes) {
  const auto res = solve_smallest_eigenpairs(build_square_stencil(1.0, 0.05).matrix, 6);
  std::vector<double> exact;
  for (int a = 1; a <= 4; ++a)
    for (int b = 1; b <= 4; ++b) exact.push_back(kPi * kPi * (a * a + b * b));
  std::sort(exact.begin(), exact.end());
  // Leading truncation error of the compact stencil grows like (lambda h)^2 / 12
  // relative to lambda^2; allow twice that.
  const double h = 0.05;
  for (int k = 0; k < 6; ++k) {
    const double rel = std::abs(res.eigenvalues(k) / exact[k] - 1.0);
    EXPECT_LT(rel, exact[k] * h * h / 6.0) << "mode " << k;
  }
  EXPECT_NEAR(res.eigenvalues(1), res.eigenvalues(2), 1e-8 * exact[1]) << "degenerate pair (1,2)/(2,1)";
}

TEST(Stencil, MatrixIsExactlySymmetric) {
  const auto st = build_hex_stencil(6.0, 0.1);
  const SparseMatrix diff = st.matrix - SparseMatrix(st.matrix.transpose());
  double worst = 0.0;
  for (int k = 0; k < diff.outerSize(); ++k)
    for (SparseMatrix::InnerIterator it(diff, k); it; ++it) worst = std::max(worst, std::abs(it.value()));
  EXPECT_EQ(worst, 0.0);
}

TEST(Stencil, InteriorRowsSumToZero) {
  const auto st = build_hex_stencil(6.0, 0.1);
  const Eigen::VectorXd ones = Eigen::VectorXd::Ones(st.matrix.cols());
  const Eigen::VectorXd sums = st.matrix * ones;
  const double scale = 20.0 / (6.0 * 0.01);
  int checked = 0;
  for (std::size_t u = 0; u < st.node_of_unknown.size(); ++u) {
    const int node = st.node_of_unknown[u];
    const Vec2 p = st.grid.node(node % st.grid.nx, node / st.grid.nx);
    if (hex::signed_distance(p, 6.0) < 0.5) continue;
    ASSERT_LT(std::abs(sums(static_cast<Eigen::Index>(u))), 1e-12 * scale);
    ++checked;
  }
  EXPECT_GT(checked, 1000);
}

TEST(Stencil, CoarseOrDegenerateGridsRejected) {
  EXPECT_THROW(build_hex_stencil(1.0, 0.1), DataError);
  EXPECT_THROW(build_square_stencil(1.0, 0.8), DataError);
  EXPECT_THROW(build_hex_stencil(-1.0, 0.1), DataError);
}

TEST(HexEigenbasis, FirstEigenvalueRespectsFaberKrahn) {
  // Unit circumradius hexagon at the step that gives 50 cells across.
  const auto st = build_hex_stencil(1.0, 0.02);
  const auto hex = solve_hex_eigenbasis(st, 1);
  const double bound = kPi * kJ01Squared / hex_area(1.0);
  EXPECT_NEAR(bound, 6.993, 1e-3);
  EXPECT_GE(hex.eigenvalues()(0), bound);
  // Published high-precision value for the unit-side regular hexagon.
  EXPECT_NEAR(hex.eigenvalues()(0) / 7.1553391, 1.0, 2e-3);
}

TEST(HexEigenbasis, RefinementChangesFirst40ByLessThanOnePercent) {
  const auto coarse = solve_hex_eigenbasis(build_hex_stencil(6.0, 0.1), 40);
  const auto fine = solve_hex_eigenbasis(build_hex_stencil(6.0, 0.05), 40);
  for (int k = 0; k < 40; ++k)
    EXPECT_LT(std::abs(coarse.eigenvalues()(k) - fine.eigenvalues()(k)) / fine.eigenvalues()(k), 0.01)
        << "pair " << k + 1;
}

TEST(HexEigenbasis, EigenvaluesPositiveAndSorted) {
  const auto& ev = full_basis()->hex().eigenvalues();
  EXPECT_GT(ev(0), 0.0);
  for (int k = 1; k < ev.size(); ++k) EXPECT_LE(ev(k - 1), ev(k));
}

TEST(HexEigenbasis, ResidualsReported) {
  HexSolveReport report;
  build_basis(BasisSpec{5.0, 2.0, 1.0, 0.1, 16, 16, 8}, &report);
  ASSERT_EQ(report.residuals.size(), 16);
  EXPECT_LT(report.residuals.maxCoeff(), 1e-6);
  EXPECT_GT(report.seconds, 0.0);
}

TEST(HexEigenbasis, ZeroOutsideMaskAndNormalised) {
  const auto& hex = full_basis()->hex();
  const double h = hex.grid().h;
  for (int n = 0; n < hex.count(); ++n) {
    double ss = 0.0, biggest = 0.0, biggest_signed = 0.0;
    for (int node = 0; node < hex.grid().size(); ++node) {
      const double v = hex.values()(node, n);
      if (!hex.mask()[node]) {
        ASSERT_EQ(v, 0.0);
      }
      ss += v * v * h * h;
      if (std::abs(v) > biggest) {
        biggest = std::abs(v);
        biggest_signed = v;
      }
    }
    EXPECT_NEAR(ss, 1.0, 1e-6) << "function " << n;
    EXPECT_GT(biggest_signed, 0.0) << "sign convention, function " << n;
  }
}

TEST(HexEigenbasis, FirstFortyAreOrthonormal) {
  const auto& hex = full_basis()->hex();
  const double h = hex.grid().h;
  const Eigen::MatrixXd v = hex.values().leftCols(40);
  const Eigen::MatrixXd gram = v.transpose() * v * h * h;
  EXPECT_LT((gram - Eigen::MatrixXd::Identity(40, 40)).cwiseAbs().maxCoeff(), 5e-3);
}

TEST(HexEigenbasis, VanishesOnTheBoundary) {
  const auto& hex = full_basis()->hex();
  const double r = hex.radius();
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int n = 0; n < 20; ++n) {
    const double scale = hex.values().col(n).cwiseAbs().maxCoeff();
    for (int k = 0; k < 50; ++k) {
      const int edge = static_cast<int>(u(rng) * 6) % 6;
      const Vec2 a = hex::vertex(edge, r), b = hex::vertex(edge + 1, r);
      const Vec2 p = a + u(rng) * (b - a);
      ASSERT_LE(std::abs(hex.eval(n, p).value), 1e-3 * scale);
    }
  }
}

TEST(HexEigenbasis, ExactAtInteriorNodes) {
  const auto& hex = full_basis()->hex();
  const auto& g = hex.grid();
  int checked = 0;
  for (int j = 0; j < g.ny; j += 7)
    for (int i = 0; i < g.nx; i += 7) {
      const Vec2 p = g.node(i, j);
      if (hex::signed_distance(p, hex.radius()) < g.h) continue;
      for (int n : {0, 5, 40, 95}) {
        const double scale = hex.values().col(n).cwiseAbs().maxCoeff();
        ASSERT_NEAR(hex.eval(n, p).value, hex.node_value(n, i, j), 1e-12 * scale);
      }
      ++checked;
    }
  EXPECT_GT(checked, 50);
}

TEST(HexEigenbasis, GradientMatchesFiniteDifferences) {
  const auto& hex = full_basis()->hex();
  std::mt19937_64 rng(12);
  const double step = 1e-4;
  for (int k = 0; k < 100; ++k) {
    const Vec2 p = random_inside(rng, hex.radius(), 0.05);
    for (int n : {0, 3, 17, 60}) {
      const PhiSample s = hex.eval(n, p);
      const double f0 = s.value;
      const Vec2 fd((hex.eval(n, p + Vec2(step, 0)).value - f0) / step,
                    (hex.eval(n, p + Vec2(0, step)).value - f0) / step);
      const double scale = std::max(s.gradient.norm(), 0.05 * hex.values().col(n).cwiseAbs().maxCoeff());
      ASSERT_LT((fd - s.gradient).norm() / scale, 1e-2) << "n=" << n << " p=" << p.transpose();
    }
  }
}

TEST(HexEigenbasis, OutsidePointRejected) {
  const auto& hex = full_basis()->hex();
  EXPECT_THROW(hex.eval(0, Vec2(hex.radius() + 0.01, 0.0)), DataError);
  EXPECT_THROW(hex.eval(hex.count(), Vec2::Zero()), DataError);
}

TEST(IndexPairs, LowestPairComesFirst) {
  const auto& pairs = full_basis()->index_pairs();
  EXPECT_EQ(pairs.front(), (IndexPair{1, 1}));
}

TEST(IndexPairs, MatchExhaustiveSort) {
  const auto basis = full_basis();
  const auto& ev = basis->hex().eigenvalues();
  const double l = basis->extended_half_height();
  // The top-256 set for this geometry reaches past the 64th planar mode, so
  // enumerate every solved planar mode against 32 vertical ones.
  ASSERT_GE(ev.size(), 96);
  struct C {
    double lam;
    int n1, n2;
  };
  std::vector<C> all;
  for (int n1 = 1; n1 <= ev.size(); ++n1)
    for (int n2 = 1; n2 <= 32; ++n2) all.push_back({ev(n1 - 1) + std::pow(kPi * n2 / (2 * l), 2), n1, n2});
  std::sort(all.begin(), all.end(), [](const C& a, const C& b) {
    return a.lam != b.lam ? a.lam < b.lam : std::tie(a.n1, a.n2) < std::tie(b.n1, b.n2);
  });
  const auto& pairs = basis->index_pairs();
  ASSERT_EQ(pairs.size(), 256u);
  // The pool is large enough only if the last selected value stays below the
  // smallest combination that uses an unsolved planar mode.
  EXPECT_LT(all[255].lam, ev(ev.size() - 1) + std::pow(kPi / (2 * l), 2));
  for (int j = 0; j < 256; ++j) {
    EXPECT_EQ(pairs[j].n1, all[j].n1) << j;
    EXPECT_EQ(pairs[j].n2, all[j].n2) << j;
  }
}

TEST(IndexPairs, CombinedEigenvalueClosedForm) {
  EXPECT_NEAR(vertical_eigenvalue(1, 3.0), 0.27416, 1e-5);
  const auto basis = full_basis();
  for (int j = 0; j < basis->size(); ++j) {
    const auto& pr = basis->index_pairs()[j];
    const double w = kPi * pr.n2 / (2.0 * basis->extended_half_height());
    ASSERT_EQ(basis->eigenvalues()(j), basis->hex().eigenvalues()(pr.n1 - 1) + w * w);
  }
  for (int j = 1; j < basis->size(); ++j) EXPECT_LE(basis->eigenvalues()(j - 1), basis->eigenvalues()(j));
}

TEST(IndexPairs, InsufficientPoolRejected) {
  const auto hex = full_basis()->hex_ptr();
  EXPECT_THROW(select_index_pairs(hex, 3.0, 256, 2), DataError);
  EXPECT_THROW(select_index_pairs(hex, 3.0, 0, 32), DataError);
}

TEST(Basis3D, LeadingBlockIsIdentity) {
  const auto basis = small_basis();
  const NablaPhi g = basis->nabla_phi(Vec3(0.3, -1.2, 0.4));
  EXPECT_EQ(g.cols(), basis->state_size());
  EXPECT_EQ(Mat3(g.leftCols<3>()), Mat3::Identity());
}

TEST(Basis3D, BottomFaceHasNoHorizontalGradient) {
  const auto basis = small_basis();
  const NablaPhi g = basis->nabla_phi(Vec3(0.7, 1.1, -basis->extended_half_height()));
  EXPECT_LT(g.block(0, 3, 2, basis->size()).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_GT(g.row(2).tail(basis->size()).cwiseAbs().maxCoeff(), 1e-3);
}

TEST(Basis3D, GradientMatchesFiniteDifferencesOfPotential) {
  const auto basis = small_basis();
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> uz(-2.5, 2.5);
  const double step = 1e-4;
  for (int k = 0; k < 50; ++k) {
    const Vec2 xy = random_inside(rng, basis->extended_radius(), 0.3);
    const Vec3 p(xy.x(), xy.y(), uz(rng));
    const NablaPhi g = basis->nabla_phi(p);
    NablaPhi fd(3, basis->state_size());
    for (int a = 0; a < 3; ++a) {
      Vec3 hi = p, lo = p;
      hi(a) += step;
      lo(a) -= step;
      fd.row(a) = (basis->phi(hi) - basis->phi(lo)) / (2 * step);
    }
    const double scale = g.cwiseAbs().maxCoeff();
    ASSERT_LT((fd - g).cwiseAbs().maxCoeff() / scale, 1e-2) << p.transpose();
  }
}

TEST(Basis3D, FieldsAreCurlFree) {
  const auto basis = small_basis();
  std::mt19937_64 rng(14);
  std::normal_distribution<double> n01;
  std::uniform_real_distribution<double> uz(-2.5, 2.5);
  const double step = 1e-3;
  for (int k = 0; k < 200; ++k) {
    Eigen::VectorXd m(basis->state_size());
    for (int i = 0; i < m.size(); ++i) m(i) = n01(rng);
    const Vec2 xy = random_inside(rng, basis->extended_radius(), 0.2 + 2e-3);
    const Vec3 p(xy.x(), xy.y(), uz(rng));
    auto f = [&](const Vec3& q) -> Vec3 { return basis->nabla_phi(q) * m; };
    Mat3 jac;
    for (int a = 0; a < 3; ++a) {
      Vec3 hi = p, lo = p;
      hi(a) += step;
      lo(a) -= step;
      jac.col(a) = (f(hi) - f(lo)) / (2 * step);
    }
    const Vec3 curl(jac(2, 1) - jac(1, 2), jac(0, 2) - jac(2, 0), jac(1, 0) - jac(0, 1));
    ASSERT_LT(curl.norm(), 1e-2 * f(p).norm()) << p.transpose();
  }
}

TEST(Basis3D, EvaluationIsDeterministic) {
  const auto basis = small_basis();
  const Vec3 p(1.234, -2.345, 0.567);
  const NablaPhi a = basis->nabla_phi(p);
  const NablaPhi b = basis->nabla_phi(p);
  EXPECT_EQ(a, b);
}

TEST(Basis3D, OutsidePrismRejected) {
  const auto basis = small_basis();
  EXPECT_THROW(basis->nabla_phi(Vec3(0, 0, basis->extended_half_height() + 0.01)), DataError);
  EXPECT_THROW(basis->nabla_phi(Vec3(basis->extended_radius() + 0.01, 0, 0)), DataError);
  EXPECT_THROW(basis->phi(Vec3(0, 0, -basis->extended_half_height() - 0.01)), DataError);
}

TEST(BasisSpec, ExtendedDomainAndValidation) {
  const BasisSpec spec;
  EXPECT_EQ(spec.extended_radius(), 6.0);
  EXPECT_EQ(spec.extended_half_height(), 3.0);
  BasisSpec bad;
  bad.basis_size = 0;
  EXPECT_THROW(bad.validate(), DataError);
  bad = BasisSpec{};
  bad.grid_step = 0.0;
  EXPECT_THROW(bad.validate(), DataError);
}
