#pragma once

// Dirichlet Laplacian eigenbasis on a hexagonal prism.
//
// The horizontal part is solved numerically: a nine-point finite-difference
// stencil for -laplace on the interior nodes of a square lattice covering the
// hexagon, then shift-invert block Lanczos for the smallest eigenpairs. The
// vertical part is the closed-form sine basis on [-L, L]. Each 3D basis
// function is the product phi_hex(x, y) * sin(pi n (z + L) / 2L) / sqrt(L).

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "magslam/error.hpp"
#include "magslam/geom.hpp"

namespace magslam {

using SparseMatrix = Eigen::SparseMatrix<double>;

/// 3 x (m + 3) gradient of the feature row of the scalar potential.
using NablaPhi = Eigen::Matrix<double, 3, Eigen::Dynamic>;

/// Uniform square lattice; node (i, j) sits at (x0 + i h, y0 + j h).
struct Grid2D {
  double x0 = 0.0;
  double y0 = 0.0;
  double h = 0.1;
  int nx = 0;
  int ny = 0;

  int size() const { return nx * ny; }
  int index(int i, int j) const { return j * nx + i; }
  Vec2 node(int i, int j) const { return {x0 + i * h, y0 + j * h}; }
};

struct LaplacianStencil {
  Grid2D grid;
  std::vector<int> unknown_of_node;  // -1 for boundary / exterior nodes
  std::vector<int> node_of_unknown;
  SparseMatrix matrix;               // -laplace on the unknowns, symmetric
  double hex_radius = 0.0;           // 0 when the domain is not a hexagon
};

/// Nine-point stencil (centre 20, edge -4, corner -1) / (6 h^2) for -laplace
/// on the nodes where `signed_distance` is positive. Off-domain neighbours are
/// Dirichlet zeros and drop out of the matrix. A stencil arm that crosses the
/// boundary at fraction theta of its length is closed with the ghost value
/// u_ghost = -u (1 - theta) / theta, which only adds to the diagonal, so the
/// matrix stays symmetric while the zero sits on the true boundary rather than
/// on the lattice.
inline LaplacianStencil build_laplacian_stencil(
    const Grid2D& grid, const std::function<double(const Vec2&)>& signed_distance) {
  LaplacianStencil st;
  st.grid = grid;
  st.unknown_of_node.assign(grid.size(), -1);
  const double eps = 1e-9 * grid.h;
  for (int j = 1; j + 1 < grid.ny; ++j) {
    for (int i = 1; i + 1 < grid.nx; ++i) {
      if (signed_distance(grid.node(i, j)) > eps) {
        st.unknown_of_node[grid.index(i, j)] = static_cast<int>(st.node_of_unknown.size());
        st.node_of_unknown.push_back(grid.index(i, j));
      }
    }
  }
  const int n = static_cast<int>(st.node_of_unknown.size());
  if (n == 0) throw DataError("laplacian stencil: grid has no interior nodes");

  const double scale = 1.0 / (6.0 * grid.h * grid.h);
  std::vector<Eigen::Triplet<double>> triplets;
  triplets.reserve(static_cast<std::size_t>(n) * 9);
  for (int u = 0; u < n; ++u) {
    const int node = st.node_of_unknown[u];
    const int i = node % grid.nx, j = node / grid.nx;
    const Vec2 here = grid.node(i, j);
    double diagonal = 20.0;
    for (int dj = -1; dj <= 1; ++dj) {
      for (int di = -1; di <= 1; ++di) {
        if (di == 0 && dj == 0) continue;
        const double w = std::abs(di) + std::abs(dj) == 1 ? 4.0 : 1.0;
        const int v = st.unknown_of_node[grid.index(i + di, j + dj)];
        if (v >= 0) {
          triplets.emplace_back(u, v, -w * scale);
          continue;
        }
        const Vec2 there = grid.node(i + di, j + dj);
        if (signed_distance(there) >= -eps) continue;  // neighbour sits on the boundary
        double lo = 0.0, hi = 1.0;
        for (int it = 0; it < 60; ++it) {
          const double mid = 0.5 * (lo + hi);
          (signed_distance(here + mid * (there - here)) > 0.0 ? lo : hi) = mid;
        }
        const double theta = std::max(0.5 * (lo + hi), 1e-3);
        diagonal += w * (1.0 - theta) / theta;
      }
    }
    triplets.emplace_back(u, u, diagonal * scale);
  }
  st.matrix.resize(n, n);
  st.matrix.setFromTriplets(triplets.begin(), triplets.end());
  st.matrix.makeCompressed();
  return st;
}

/// Lattice through the origin covering a centred flat-top hexagon of the given
/// circumradius, padded by two exterior rings.
inline LaplacianStencil build_hex_stencil(double radius, double h) {
  if (!(radius > 0.0) || !(h > 0.0)) throw DataError("hex stencil: radius and h must be positive");
  if (2.0 * radius / h < 50.0)
    throw DataError("hex stencil: grid step too coarse (need >= 50 cells across the hexagon)");
  const int half_x = static_cast<int>(std::ceil(radius / h)) + 2;
  const int half_y = static_cast<int>(std::ceil(0.5 * kSqrt3 * radius / h)) + 2;
  Grid2D grid{-half_x * h, -half_y * h, h, 2 * half_x + 1, 2 * half_y + 1};
  auto st = build_laplacian_stencil(
      grid, [radius](const Vec2& p) { return hex::signed_distance(p, radius); });
  st.hex_radius = radius;
  return st;
}

/// Square [0, side]^2 with lattice nodes on the boundary.
inline LaplacianStencil build_square_stencil(double side, double h) {
  const int cells = static_cast<int>(std::lround(side / h));
  if (cells < 2) throw DataError("square stencil: no interior nodes");
  Grid2D grid{0.0, 0.0, side / cells, cells + 1, cells + 1};
  return build_laplacian_stencil(grid, [side](const Vec2& p) {
    return std::min({p.x(), p.y(), side - p.x(), side - p.y()});
  });
}

// ---------------------------------------------------------------------------
// Eigensolver

struct EigenSolveOptions {
  int block_size = 8;
  double tolerance = 1e-9;  // relative residual |A x - lambda x| / lambda
  int max_basis = 0;        // 0: min(n, 12 * count + 64)
  std::uint64_t seed = 0x5eed;
};

struct EigenSolveResult {
  Eigen::VectorXd eigenvalues;   // ascending
  Eigen::MatrixXd eigenvectors;  // unknowns x count, unit 2-norm
  Eigen::VectorXd residuals;
  int basis_size = 0;
};

namespace detail {

// Orthonormalise the columns of w against the first `cols` columns of v and
// among themselves (two Gram-Schmidt passes). Columns that collapse are
// replaced by fresh random directions.
inline void orthonormalize_block(const Eigen::MatrixXd& v, int cols, Eigen::MatrixXd& w,
                                 std::mt19937_64& rng) {
  std::normal_distribution<double> gauss;
  for (int c = 0; c < w.cols(); ++c) {
    for (int attempt = 0; attempt < 4; ++attempt) {
      const double before = w.col(c).norm();
      for (int pass = 0; pass < 2; ++pass) {
        if (cols > 0) w.col(c) -= v.leftCols(cols) * (v.leftCols(cols).transpose() * w.col(c));
        for (int p = 0; p < c; ++p) w.col(c) -= w.col(p).dot(w.col(c)) * w.col(p);
      }
      const double after = w.col(c).norm();
      if (after > 1e-10 * std::max(before, 1e-300)) {
        w.col(c) /= after;
        break;
      }
      for (Eigen::Index r = 0; r < w.rows(); ++r) w(r, c) = gauss(rng);
    }
  }
}

}  // namespace detail

/// Smallest `count` eigenpairs of a symmetric positive definite sparse matrix
/// by block Lanczos on its inverse with full reorthogonalisation. The block
/// form resolves the near-degenerate pairs of symmetric domains.
inline EigenSolveResult solve_smallest_eigenpairs(const SparseMatrix& a, int count,
                                                  const EigenSolveOptions& opts = {}) {
  const int n = static_cast<int>(a.rows());
  if (count <= 0 || count > n)
    throw DataError("eigensolver: requested " + std::to_string(count) + " pairs from " +
                    std::to_string(n) + " unknowns");

  Eigen::SimplicialLDLT<SparseMatrix> factor(a);
  if (factor.info() != Eigen::Success) throw NumericalError("eigensolver: factorisation failed");

  const int block = std::min(opts.block_size, n);
  const int max_basis = std::min(n, opts.max_basis > 0 ? opts.max_basis : 12 * count + 64);
  std::mt19937_64 rng(opts.seed);
  std::normal_distribution<double> gauss;

  Eigen::MatrixXd v(n, max_basis);
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(max_basis, max_basis);
  Eigen::MatrixXd w(n, block);
  for (int c = 0; c < block; ++c)
    for (int r = 0; r < n; ++r) w(r, c) = gauss(rng);
  detail::orthonormalize_block(v, 0, w, rng);

  int cols = 0;
  int next_check = std::min(max_basis, std::max(2 * count + 2 * block, 3 * count));
  EigenSolveResult res;
  double worst = 0.0;
  while (true) {
    const int take = std::min<int>(block, max_basis - cols);
    v.middleCols(cols, take) = w.leftCols(take);
    const int start = cols;
    cols += take;
    Eigen::MatrixXd mw(n, take);
    for (int c = 0; c < take; ++c) mw.col(c) = factor.solve(v.col(start + c));
    h.block(0, start, cols, take) = v.leftCols(cols).transpose() * mw;
    h.block(start, 0, take, cols) = h.block(0, start, cols, take).transpose().eval();

    if (cols >= next_check || cols == max_basis) {
      Eigen::MatrixXd hs = 0.5 * (h.topLeftCorner(cols, cols) +
                                  h.topLeftCorner(cols, cols).transpose());
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ritz(hs);
      if (ritz.info() != Eigen::Success) throw NumericalError("eigensolver: Ritz step failed");
      // largest eigenvalues of the inverse are the wanted ones
      Eigen::MatrixXd vecs = v.leftCols(cols) * ritz.eigenvectors().rightCols(count).rowwise().reverse();
      res.eigenvalues.resize(count);
      res.residuals.resize(count);
      worst = 0.0;
      for (int k = 0; k < count; ++k) {
        vecs.col(k).normalize();
        const Eigen::VectorXd ax = a * vecs.col(k);
        const double lambda = vecs.col(k).dot(ax);
        res.eigenvalues(k) = lambda;
        res.residuals(k) = (ax - lambda * vecs.col(k)).norm() / std::abs(lambda);
        worst = std::max(worst, res.residuals(k));
      }
      if (worst <= opts.tolerance || cols == max_basis) {
        // Rayleigh quotients can reorder near-degenerate pairs
        std::vector<int> order(count);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](int l, int r) { return res.eigenvalues(l) < res.eigenvalues(r); });
        res.eigenvectors.resize(n, count);
        Eigen::VectorXd vals(count), resid(count);
        for (int k = 0; k < count; ++k) {
          res.eigenvectors.col(k) = vecs.col(order[k]);
          vals(k) = res.eigenvalues(order[k]);
          resid(k) = res.residuals(order[k]);
        }
        res.eigenvalues = vals;
        res.residuals = resid;
        res.basis_size = cols;
        if (worst > opts.tolerance) {
          std::ostringstream msg;
          msg << "eigensolver did not converge: worst relative residual " << worst
              << " > " << opts.tolerance << " with basis size " << cols;
          throw NumericalError(msg.str());
        }
        return res;
      }
      next_check = std::min(max_basis, cols + std::max(count / 2, 2 * block));
    }

    w = mw;
    detail::orthonormalize_block(v, cols, w, rng);
  }
}

// ---------------------------------------------------------------------------
// 2D eigenbasis with C1 interpolation

/// Value and gradient of one 2D eigenfunction.
struct PhiSample {
  double value = 0.0;
  Vec2 gradient = Vec2::Zero();
};

/// Grid-sampled Dirichlet eigenfunctions of -laplace on a hexagon.
///
/// Functions are unit L2 over the hexagon under midpoint quadrature
/// (sum phi^2 h^2 = 1) and signed so their largest-magnitude node value is
/// positive. Off-node evaluation uses bicubic Hermite patches whose node
/// derivatives are central differences of the grid, so gradients are exact
/// derivatives of the interpolated values. Within one grid step of the
/// hexagon edge the interpolant is tapered to reach zero on the edge.
class HexEigenbasis2D {
 public:
  HexEigenbasis2D() = default;

  HexEigenbasis2D(Grid2D grid, double radius, std::vector<std::uint8_t> mask,
                  Eigen::VectorXd eigenvalues, Eigen::MatrixXd values)
      : grid_(grid),
        radius_(radius),
        mask_(std::move(mask)),
        eigenvalues_(std::move(eigenvalues)),
        values_(std::move(values)) {
    build_tables();
  }

  const Grid2D& grid() const { return grid_; }
  double radius() const { return radius_; }
  int count() const { return static_cast<int>(eigenvalues_.size()); }
  const std::vector<std::uint8_t>& mask() const { return mask_; }
  const Eigen::VectorXd& eigenvalues() const { return eigenvalues_; }
  // nodes x count; zero on and outside the boundary mask
  const Eigen::MatrixXd& values() const { return values_; }

  bool contains(const Vec2& p) const {
    return hex::signed_distance(p, radius_) >= -1e-12 * std::max(1.0, radius_);
  }

  PhiSample eval(int n, const Vec2& p) const {
    if (n < 0 || n >= count()) throw DataError("eval_phi2d: eigenfunction index out of range");
    std::vector<PhiSample> all(count());
    eval_range(p, n, n + 1, all.data() + n);
    return all[n];
  }

  /// Evaluates functions [first, last) at p into out[first..last).
  void eval_range(const Vec2& p, int first, int last, PhiSample* out) const {
    if (!contains(p)) throw DataError("eval_phi2d: point outside the hexagon");
    const double h = grid_.h;
    const double fx = (p.x() - grid_.x0) / h, fy = (p.y() - grid_.y0) / h;
    const int i = std::clamp(static_cast<int>(std::floor(fx)), 0, grid_.nx - 2);
    const int j = std::clamp(static_cast<int>(std::floor(fy)), 0, grid_.ny - 2);
    const double t = fx - i, u = fy - j;

    std::array<double, 4> bt, bu, dbt, dbu;  // h00 h10 h01 h11 and derivatives
    hermite(t, bt, dbt);
    hermite(u, bu, dbu);

    // Weight of stored quantity c at corner (a, b): c = 0 f, 1 h fx, 2 h fy, 3 h^2 fxy
    std::array<double, 16> wv, wx, wy;
    for (int b = 0; b < 2; ++b) {
      for (int a = 0; a < 2; ++a) {
        const int corner = b * 2 + a;
        const double tv0 = bt[2 * a], tv1 = bt[2 * a + 1];
        const double td0 = dbt[2 * a], td1 = dbt[2 * a + 1];
        const double uv0 = bu[2 * b], uv1 = bu[2 * b + 1];
        const double ud0 = dbu[2 * b], ud1 = dbu[2 * b + 1];
        wv[corner * 4 + 0] = tv0 * uv0;
        wv[corner * 4 + 1] = tv1 * uv0;
        wv[corner * 4 + 2] = tv0 * uv1;
        wv[corner * 4 + 3] = tv1 * uv1;
        wx[corner * 4 + 0] = td0 * uv0 / h;
        wx[corner * 4 + 1] = td1 * uv0 / h;
        wx[corner * 4 + 2] = td0 * uv1 / h;
        wx[corner * 4 + 3] = td1 * uv1 / h;
        wy[corner * 4 + 0] = tv0 * ud0 / h;
        wy[corner * 4 + 1] = tv1 * ud0 / h;
        wy[corner * 4 + 2] = tv0 * ud1 / h;
        wy[corner * 4 + 3] = tv1 * ud1 / h;
      }
    }
    const std::array<int, 4> nodes = {grid_.index(i, j), grid_.index(i + 1, j),
                                      grid_.index(i, j + 1), grid_.index(i + 1, j + 1)};

    // taper omega(s) = q (2 - q), q = s / h, inside the band s < h
    const double s = hex::signed_distance(p, radius_);
    double omega = 1.0;
    Vec2 domega = Vec2::Zero();
    if (s < h) {
      const double q = std::max(s, 0.0) / h;
      omega = q * (2.0 - q);
      domega = -(2.0 - 2.0 * q) / h * hex::edge_normals()[hex::nearest_edge(p)];
    }

    const int stride = count() * 4;
    for (int f = first; f < last; ++f) {
      double val = 0.0, gx = 0.0, gy = 0.0;
      for (int c = 0; c < 4; ++c) {
        const double* q = table_.data() + static_cast<std::size_t>(nodes[c]) * stride + f * 4;
        for (int k = 0; k < 4; ++k) {
          val += wv[c * 4 + k] * q[k];
          gx += wx[c * 4 + k] * q[k];
          gy += wy[c * 4 + k] * q[k];
        }
      }
      PhiSample& o = out[f - first];
      o.value = omega * val;
      o.gradient = Vec2(omega * gx + val * domega.x(), omega * gy + val * domega.y());
    }
  }

  /// Stored grid value of function n at node (i, j).
  double node_value(int n, int i, int j) const { return values_(grid_.index(i, j), n); }

 private:
  static void hermite(double t, std::array<double, 4>& v, std::array<double, 4>& d) {
    const double t2 = t * t, t3 = t2 * t;
    // order: h00, h10 (corner 0), h01, h11 (corner 1)
    v = {2 * t3 - 3 * t2 + 1, t3 - 2 * t2 + t, -2 * t3 + 3 * t2, t3 - t2};
    d = {6 * t2 - 6 * t, 3 * t2 - 4 * t + 1, -6 * t2 + 6 * t, 3 * t2 - 2 * t};
  }

  void build_tables() {
    const int nodes = grid_.size(), cnt = count();
    table_.assign(static_cast<std::size_t>(nodes) * cnt * 4, 0.0);
    auto at = [&](int f, int i, int j) -> double {
      if (i < 0 || j < 0 || i >= grid_.nx || j >= grid_.ny) return 0.0;
      return values_(grid_.index(i, j), f);
    };
    for (int j = 0; j < grid_.ny; ++j) {
      for (int i = 0; i < grid_.nx; ++i) {
        double* q = table_.data() + static_cast<std::size_t>(grid_.index(i, j)) * cnt * 4;
        for (int f = 0; f < cnt; ++f) {
          q[f * 4 + 0] = at(f, i, j);
          q[f * 4 + 1] = 0.5 * (at(f, i + 1, j) - at(f, i - 1, j));
          q[f * 4 + 2] = 0.5 * (at(f, i, j + 1) - at(f, i, j - 1));
          q[f * 4 + 3] = 0.25 * (at(f, i + 1, j + 1) - at(f, i + 1, j - 1) -
                                 at(f, i - 1, j + 1) + at(f, i - 1, j - 1));
        }
      }
    }
  }

  Grid2D grid_;
  double radius_ = 0.0;
  std::vector<std::uint8_t> mask_;
  Eigen::VectorXd eigenvalues_;
  Eigen::MatrixXd values_;
  std::vector<double> table_;  // node-major: [node][function][f, h fx, h fy, h^2 fxy]
};

struct HexSolveReport {
  Eigen::VectorXd residuals;
  int basis_size = 0;
  double seconds = 0.0;
};

/// Solves the `count` smallest eigenpairs of the stencil and packages them as
/// normalised grid functions.
inline HexEigenbasis2D solve_hex_eigenbasis(const LaplacianStencil& stencil, int count,
                                            HexSolveReport* report = nullptr,
                                            const EigenSolveOptions& opts = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  const int unknowns = static_cast<int>(stencil.node_of_unknown.size());
  if (count > unknowns) throw DataError("solve_hex_eigenbasis: count exceeds interior nodes");
  EigenSolveResult eig = solve_smallest_eigenpairs(stencil.matrix, count, opts);

  const Grid2D& g = stencil.grid;
  Eigen::MatrixXd values = Eigen::MatrixXd::Zero(g.size(), count);
  const double inv_h = 1.0 / g.h;
  for (int k = 0; k < count; ++k) {
    Eigen::VectorXd vec = eig.eigenvectors.col(k);
    Eigen::Index arg = 0;
    vec.cwiseAbs().maxCoeff(&arg);
    if (vec(arg) < 0) vec = -vec;
    vec *= inv_h / vec.norm();
    for (int u = 0; u < unknowns; ++u) values(stencil.node_of_unknown[u], k) = vec(u);
  }
  std::vector<std::uint8_t> mask(g.size(), 0);
  for (int node : stencil.node_of_unknown) mask[node] = 1;
  if (report) {
    report->residuals = eig.residuals;
    report->basis_size = eig.basis_size;
    report->seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  return HexEigenbasis2D(g, stencil.hex_radius, std::move(mask), eig.eigenvalues,
                         std::move(values));
}

// ---------------------------------------------------------------------------
// 3D basis

struct IndexPair {
  int n1 = 1;  // 1-based index into the 2D eigenpairs
  int n2 = 1;  // vertical sine mode, >= 1
  friend auto operator<=>(const IndexPair&, const IndexPair&) = default;
};

inline double vertical_eigenvalue(int n2, double half_height) {
  const double w = kPi * n2 / (2.0 * half_height);
  return w * w;
}

class Basis3D {
 public:
  Basis3D() = default;
  Basis3D(std::shared_ptr<const HexEigenbasis2D> hex, double half_height,
          std::vector<IndexPair> pairs)
      : hex_(std::move(hex)), half_height_(half_height), pairs_(std::move(pairs)) {
    eigenvalues_.resize(size());
    max_n1_ = 0;
    max_n2_ = 0;
    for (int j = 0; j < size(); ++j) {
      const auto& pr = pairs_[j];
      eigenvalues_(j) = hex_->eigenvalues()(pr.n1 - 1) + vertical_eigenvalue(pr.n2, half_height_);
      max_n1_ = std::max(max_n1_, pr.n1);
      max_n2_ = std::max(max_n2_, pr.n2);
    }
  }

  int size() const { return static_cast<int>(pairs_.size()); }
  int state_size() const { return size() + 3; }
  const std::vector<IndexPair>& index_pairs() const { return pairs_; }
  const Eigen::VectorXd& eigenvalues() const { return eigenvalues_; }  // lambda_j^2
  double extended_radius() const { return hex_->radius(); }
  double extended_half_height() const { return half_height_; }
  const HexEigenbasis2D& hex() const { return *hex_; }
  std::shared_ptr<const HexEigenbasis2D> hex_ptr() const { return hex_; }

  bool contains(const Vec3& local) const {
    return hex_->contains(local.head<2>()) &&
           std::abs(local.z()) <= half_height_ * (1.0 + 1e-12);
  }

  /// 3 x (m + 3) gradient of the feature row: identity block for the linear
  /// potential, then grad phi_j. `local` is relative to the tile centre.
  NablaPhi nabla_phi(const Vec3& local) const {
    NablaPhi out(3, state_size());
    nabla_phi_into(local, out);
    return out;
  }

  void nabla_phi_into(const Vec3& local, NablaPhi& out) const {
    if (!contains(local)) throw DataError("eval_nabla_phi: point outside the extended prism");
    out.resize(3, state_size());
    out.leftCols<3>().setIdentity();
    std::vector<PhiSample> horiz(max_n1_);
    hex_->eval_range(local.head<2>(), 0, max_n1_, horiz.data());
    std::vector<double> s(max_n2_ + 1), ds(max_n2_ + 1);
    vertical(local.z(), s, ds);
    for (int j = 0; j < size(); ++j) {
      const PhiSample& ph = horiz[pairs_[j].n1 - 1];
      const int n2 = pairs_[j].n2;
      out(0, 3 + j) = ph.gradient.x() * s[n2];
      out(1, 3 + j) = ph.gradient.y() * s[n2];
      out(2, 3 + j) = ph.value * ds[n2];
    }
  }

  /// Feature row (p^T, phi_1(p), ..., phi_m(p)) of the scalar potential.
  Eigen::RowVectorXd phi(const Vec3& local) const {
    if (!contains(local)) throw DataError("eval_phi: point outside the extended prism");
    Eigen::RowVectorXd out(state_size());
    out.head<3>() = local.transpose();
    std::vector<PhiSample> horiz(max_n1_);
    hex_->eval_range(local.head<2>(), 0, max_n1_, horiz.data());
    std::vector<double> s(max_n2_ + 1), ds(max_n2_ + 1);
    vertical(local.z(), s, ds);
    for (int j = 0; j < size(); ++j) out(3 + j) = horiz[pairs_[j].n1 - 1].value * s[pairs_[j].n2];
    return out;
  }

 private:
  void vertical(double z, std::vector<double>& s, std::vector<double>& ds) const {
    const double l = half_height_;
    const double norm = 1.0 / std::sqrt(l);
    for (int n = 1; n <= max_n2_; ++n) {
      const double w = kPi * n / (2.0 * l);
      const double arg = w * (z + l);
      s[n] = norm * std::sin(arg);
      ds[n] = norm * w * std::cos(arg);
    }
  }

  std::shared_ptr<const HexEigenbasis2D> hex_;
  double half_height_ = 1.0;
  std::vector<IndexPair> pairs_;
  Eigen::VectorXd eigenvalues_;
  int max_n1_ = 0;
  int max_n2_ = 0;
};

/// Chooses the m pairs (n1, n2) with the smallest combined eigenvalue
/// lambda_hex[n1] + (pi n2 / 2L)^2, ties broken lexicographically. Throws if
/// the candidate pool (all solved n1, n2 <= max_n2) could be hiding a better
/// pair.
inline Basis3D select_index_pairs(std::shared_ptr<const HexEigenbasis2D> hex,
                                  double extended_half_height, int m, int max_n2 = 32) {
  const int k = hex->count();
  if (m <= 0) throw DataError("select_index_pairs: m must be positive");
  if (static_cast<long>(k) * max_n2 < m) throw DataError("select_index_pairs: candidate pool smaller than m");
  struct Candidate {
    double lambda2;
    IndexPair pair;
  };
  std::vector<Candidate> pool;
  pool.reserve(static_cast<std::size_t>(k) * max_n2);
  for (int n1 = 1; n1 <= k; ++n1)
    for (int n2 = 1; n2 <= max_n2; ++n2)
      pool.push_back({hex->eigenvalues()(n1 - 1) + vertical_eigenvalue(n2, extended_half_height),
                      {n1, n2}});
  std::stable_sort(pool.begin(), pool.end(), [](const Candidate& l, const Candidate& r) {
    if (l.lambda2 != r.lambda2) return l.lambda2 < r.lambda2;
    return l.pair < r.pair;
  });
  const double last = pool[m - 1].lambda2;
  const double unseen_horizontal = hex->eigenvalues()(k - 1) + vertical_eigenvalue(1, extended_half_height);
  const double unseen_vertical = hex->eigenvalues()(0) + vertical_eigenvalue(max_n2 + 1, extended_half_height);
  if (last >= unseen_horizontal || last >= unseen_vertical)
    throw DataError("select_index_pairs: insufficient candidate pool for m = " + std::to_string(m));
  std::vector<IndexPair> pairs;
  pairs.reserve(m);
  for (int j = 0; j < m; ++j) pairs.push_back(pool[j].pair);
  return Basis3D(std::move(hex), extended_half_height, std::move(pairs));
}

/// Everything that determines a tile basis.
struct BasisSpec {
  double radius = 5.0;       // tile circumradius r
  double half_height = 2.0;  // tile half-height L_z
  double extension = 1.0;    // margin added on every side
  double grid_step = 0.1;    // h
  int basis_size = 256;      // m
  int hex_pairs = 96;        // 2D eigenpairs solved
  int max_n2 = 32;           // vertical modes considered

  double extended_radius() const { return radius + extension; }
  double extended_half_height() const { return half_height + extension; }

  void validate() const {
    if (!(radius > 0) || !(half_height > 0) || !(extension >= 0) || !(grid_step > 0))
      throw DataError("basis spec: geometry must be positive");
    if (basis_size < 1 || hex_pairs < 1 || max_n2 < 1) throw DataError("basis spec: sizes must be positive");
  }

  friend bool operator==(const BasisSpec&, const BasisSpec&) = default;
};

/// Solves the 2D eigenproblem on the extended hexagon and selects the first m
/// 3D index pairs.
inline std::shared_ptr<const Basis3D> build_basis(const BasisSpec& spec, HexSolveReport* report = nullptr) {
  spec.validate();
  const auto stencil = build_hex_stencil(spec.extended_radius(), spec.grid_step);
  auto hex = std::make_shared<const HexEigenbasis2D>(solve_hex_eigenbasis(stencil, spec.hex_pairs, report));
  return std::make_shared<const Basis3D>(
      select_index_pairs(std::move(hex), spec.extended_half_height(), spec.basis_size, spec.max_n2));
}

}  // namespace magslam
