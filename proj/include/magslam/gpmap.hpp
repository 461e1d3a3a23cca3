#pragma once

// Reduced-rank Gaussian process map of the magnetic field on one tile.
//
// The scalar potential is phi(p) = p^T w_lin + sum_j phi_j(p) w_j with a
// Gaussian prior on the m + 3 weights; the field is its gradient. A TileMap
// carries the posterior over the weights. Positions are tile-local.

#include <cmath>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "magslam/eigenbasis.hpp"
#include "magslam/error.hpp"
#include "magslam/geom.hpp"

namespace magslam {


struct Hyperparameters {
  double sigma2_lin = 650.0;   // uT^2 / m^2
  double sigma2_se = 200.0;    // uT^2
  double lengthscale = 1.3;    // m
  double sigma2_noise = 10.0;  // uT^2

  void validate() const {
    if (!(sigma2_lin > 0) || !(sigma2_se > 0) || !(lengthscale > 0) || !(sigma2_noise > 0))
      throw DataError("hyperparameters must be strictly positive");
  }
};

struct TileMap {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;

  int size() const { return static_cast<int>(mean.size()); }
};

/// Spectral density of the 3D squared-exponential kernel at squared
/// frequency lambda2.
inline double spectral_density_se(double lambda2, const Hyperparameters& hyper) {
  if (lambda2 < 0.0) throw DataError("spectral_density_se: negative lambda^2");
  const double l2 = hyper.lengthscale * hyper.lengthscale;
  return hyper.sigma2_se * std::pow(2.0 * kPi * l2, 1.5) * std::exp(-0.5 * lambda2 * l2);
}

inline TileMap tile_prior(const Basis3D& basis, const Hyperparameters& hyper) {
  const int n = basis.state_size();
  TileMap map;
  map.mean = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd diag(n);
  diag.head<3>().setConstant(hyper.sigma2_lin);
  for (int j = 0; j < basis.size(); ++j)
    diag(3 + j) = spectral_density_se(basis.eigenvalues()(j), hyper);
  map.cov = diag.asDiagonal();
  return map;
}

/// C = R^{bw} * nabla Phi: maps weights to a body-frame field.
inline NablaPhi measurement_matrix(const NablaPhi& nabla_phi, const Mat3& r_bw) {
  return r_bw * nabla_phi;
}

/// Sequential Kalman update of a tile map with one 3-axis measurement.
inline void kalman_update(TileMap& map, const NablaPhi& c, const Vec3& y,
                          const Hyperparameters& hyper) {
  const Eigen::MatrixXd pct = map.cov * c.transpose();  // n x 3
  Mat3 s = c * pct;
  s.diagonal().array() += hyper.sigma2_noise;
  s = 0.5 * (s + s.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Mat3> eig(s);
  const double lo = eig.eigenvalues().minCoeff(), hi = eig.eigenvalues().maxCoeff();
  if (!(lo > 0.0) || hi / lo > 1e12)
    throw NumericalError("kalman_update: innovation covariance is numerically singular");
  const Eigen::LLT<Mat3> llt(s);
  const Eigen::MatrixXd gain = llt.solve(pct.transpose()).transpose();  // n x 3
  map.mean.noalias() += gain * (y - c * map.mean);
  map.cov.noalias() -= gain * pct.transpose();
  map.cov = 0.5 * (map.cov + map.cov.transpose()).eval();
}

inline TileMap kalman_updated(TileMap map, const NablaPhi& c, const Vec3& y,
                              const Hyperparameters& hyper) {
  kalman_update(map, c, y, hyper);
  return map;
}

struct FieldPrediction {
  Vec3 mean = Vec3::Zero();
  Mat3 cov = Mat3::Zero();
};

/// World-frame field at a point and its covariance. With `with_noise` the
/// covariance is that of a (world-frame) measurement.
inline FieldPrediction predict_field(const TileMap& map, const NablaPhi& nabla_phi,
                                     const Hyperparameters& hyper, bool with_noise = false) {
  FieldPrediction out;
  out.mean = nabla_phi * map.mean;
  out.cov = nabla_phi * map.cov * nabla_phi.transpose();
  out.cov = 0.5 * (out.cov + out.cov.transpose()).eval();
  if (with_noise) out.cov.diagonal().array() += hyper.sigma2_noise;
  return out;
}

/// log N(y; C m, C P C^T + sigma2_noise I).
inline double log_likelihood(const TileMap& map, const NablaPhi& c, const Vec3& y,
                             const Hyperparameters& hyper) {
  Mat3 s = c * map.cov * c.transpose();
  s = 0.5 * (s + s.transpose()).eval();
  s.diagonal().array() += hyper.sigma2_noise + 1e-9;
  const Eigen::LLT<Mat3> llt(s);
  if (llt.info() != Eigen::Success)
    throw NumericalError("log_likelihood: innovation covariance is not positive definite");
  const Vec3 r = y - c * map.mean;
  const Vec3 z = llt.matrixL().solve(r);
  const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  return -0.5 * (z.squaredNorm() + logdet + 3.0 * std::log(2.0 * kPi));
}

// ---------------------------------------------------------------------------
// Exact GP oracle

/// cov(grad phi(p), grad phi(q)) for the linear + squared-exponential
/// potential kernel.
inline Mat3 derivative_kernel(const Vec3& p, const Vec3& q, const Hyperparameters& hyper) {
  const Vec3 d = p - q;
  const double l2 = hyper.lengthscale * hyper.lengthscale;
  const double k = hyper.sigma2_se * std::exp(-0.5 * d.squaredNorm() / l2);
  return hyper.sigma2_lin * Mat3::Identity() + k * (Mat3::Identity() / l2 - d * d.transpose() / (l2 * l2));
}

/// Potential kernel kappa_lin + kappa_SE.
inline double potential_kernel(const Vec3& p, const Vec3& q, const Hyperparameters& hyper) {
  const double l2 = hyper.lengthscale * hyper.lengthscale;
  return hyper.sigma2_lin * p.dot(q) + hyper.sigma2_se * std::exp(-0.5 * (p - q).squaredNorm() / l2);
}

struct Observation {
  Vec3 p = Vec3::Zero();
  Mat3 r_bw = Mat3::Identity();
  Vec3 y = Vec3::Zero();
};

/// Full GP posterior of the world-frame field at `query` given body-frame
/// observations. O(N^3); meant for verification on small data sets.
inline FieldPrediction full_gp_oracle(const std::vector<Observation>& obs, const Vec3& query,
                                      const Hyperparameters& hyper) {
  const int n = static_cast<int>(obs.size());
  FieldPrediction out;
  out.cov = derivative_kernel(query, query, hyper);
  if (n == 0) return out;

  Eigen::MatrixXd gram(3 * n, 3 * n);
  for (int i = 0; i < n; ++i) {
    for (int j = i; j < n; ++j) {
      const Mat3 blk = obs[i].r_bw * derivative_kernel(obs[i].p, obs[j].p, hyper) * obs[j].r_bw.transpose();
      gram.block<3, 3>(3 * i, 3 * j) = blk;
      gram.block<3, 3>(3 * j, 3 * i) = blk.transpose();
    }
  }
  gram.diagonal().array() += hyper.sigma2_noise + 1e-8;
  const Eigen::LLT<Eigen::MatrixXd> llt(gram);
  if (llt.info() != Eigen::Success)
    throw NumericalError("full_gp_oracle: Gram matrix is not positive definite");

  Eigen::VectorXd y(3 * n);
  Eigen::MatrixXd kq(3 * n, 3);  // cov(observations, field at query)
  for (int i = 0; i < n; ++i) {
    y.segment<3>(3 * i) = obs[i].y;
    kq.block<3, 3>(3 * i, 0) = obs[i].r_bw * derivative_kernel(obs[i].p, query, hyper);
  }
  out.mean = kq.transpose() * llt.solve(y);
  out.cov -= kq.transpose() * llt.solve(kq);
  out.cov = 0.5 * (out.cov + out.cov.transpose()).eval();
  return out;
}

}  // namespace magslam
