#pragma once

// Rao-Blackwellised particle filter for magnetic-field SLAM. Each particle
// carries a pose and a set of independent tile maps; the filter alternates
// tile creation, importance weighting, revisit-gated resampling, delayed
// neighbour-aware map updates, point estimation and pose propagation.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <deque>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "magslam/eigenbasis.hpp"
#include "magslam/error.hpp"
#include "magslam/geom.hpp"
#include "magslam/gpmap.hpp"
#include "magslam/random.hpp"
#include "magslam/records.hpp"

namespace magslam {

inline constexpr double kDegree = kPi / 180.0;

struct SlamConfig {
  int num_particles = 100;
  Mat3 sigma_p = Vec3(0.1 * 0.1, 0.1 * 0.1, 0.02 * 0.02).asDiagonal();  // m^2/s
  // Orientation drift of 0.01, 0.01 and 0.24 deg/sqrt(s) per axis.
  Mat3 sigma_q = Vec3(std::pow(0.01 * kDegree, 2), std::pow(0.01 * kDegree, 2),
                      std::pow(0.24 * kDegree, 2)).asDiagonal();  // rad^2/s
  HexGridSpec grid;          // r = 5 m, L_z = 2 m
  double extension = 1.0;    // m added to the tile on every side for the basis domain
  int basis_size = 256;      // m
  Hyperparameters hyper;
  double delay_lengthscale = 1.3;    // m of path
  double neighbor_threshold = 0.1;   // m
  double resample_fraction = 0.9;
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (num_particles < 1) throw DataError("config: num_particles must be >= 1");
    psd_sqrt(sigma_p);
    psd_sqrt(sigma_q);
    grid.validate();
    if (!(extension >= 0.0)) throw DataError("config: extension must be >= 0");
    if (basis_size < 1) throw DataError("config: basis_size must be >= 1");
    hyper.validate();
    if (!(delay_lengthscale >= 0.0)) throw DataError("config: delay_lengthscale must be >= 0");
    if (!(neighbor_threshold >= 0.0)) throw DataError("config: neighbor_threshold must be >= 0");
    if (!(resample_fraction > 0.0 && resample_fraction <= 1.0))
      throw DataError("config: resample_fraction must lie in (0, 1]");
  }
};

enum class VisitState { entered, left, revisiting };

/// Measurement awaiting its delayed map update.
struct PendingMeasurement {
  Vec3 position = Vec3::Zero();
  Mat3 r_bw = Mat3::Identity();
  Vec3 y = Vec3::Zero();
  double path_at = 0.0;  // particle path length when recorded
};

/// Tile maps are shared between particles after resampling and cloned on
/// first write, which is observably the same as a deep copy.
struct Particle {
  Pose pose;
  double log_weight = 0.0;
  std::unordered_map<TileId, std::shared_ptr<TileMap>> maps;
  std::deque<PendingMeasurement> pending;
  std::unordered_map<TileId, VisitState> visits;
  std::optional<TileId> current_tile;
  double path_length = 0.0;

  bool has_map(const TileId& t) const { return maps.count(t) != 0; }

  const TileMap& map(const TileId& t) const {
    auto it = maps.find(t);
    if (it == maps.end()) throw DataError("particle has no map for the requested tile");
    return *it->second;
  }

  TileMap& mutable_map(const TileId& t) {
    auto it = maps.find(t);
    if (it == maps.end()) throw DataError("particle has no map for the requested tile");
    if (it->second.use_count() > 1) it->second = std::make_shared<TileMap>(*it->second);
    return *it->second;
  }

  std::optional<VisitState> visit(const TileId& t) const {
    auto it = visits.find(t);
    if (it == visits.end()) return std::nullopt;
    return it->second;
  }
};

/// Immutable pieces shared by all particles: configuration, basis, prior
/// and noise square roots.
class SlamModel {
 public:
  SlamModel(SlamConfig config, std::shared_ptr<const Basis3D> basis)
      : config_(std::move(config)), basis_(std::move(basis)) {
    config_.validate();
    if (!basis_) throw DataError("SlamModel: no basis");
    if (basis_->size() != config_.basis_size)
      throw CacheMismatch("basis has " + std::to_string(basis_->size()) + " functions, config expects " +
                          std::to_string(config_.basis_size));
    const double want_r = config_.grid.radius + config_.extension;
    const double want_l = config_.grid.half_height + config_.extension;
    if (std::abs(basis_->extended_radius() - want_r) > 1e-9 ||
        std::abs(basis_->extended_half_height() - want_l) > 1e-9)
      throw CacheMismatch("basis domain does not match the configured tile geometry");
    prior_ = std::make_shared<const TileMap>(tile_prior(*basis_, config_.hyper));
    sqrt_p_ = psd_sqrt(config_.sigma_p);
    sqrt_q_ = psd_sqrt(config_.sigma_q);
  }

  const SlamConfig& config() const { return config_; }
  const Basis3D& basis() const { return *basis_; }
  std::shared_ptr<const Basis3D> basis_ptr() const { return basis_; }
  const TileMap& prior() const { return *prior_; }
  const Mat3& sqrt_sigma_p() const { return sqrt_p_; }
  const Mat3& sqrt_sigma_q() const { return sqrt_q_; }

  std::shared_ptr<TileMap> new_tile() const { return std::make_shared<TileMap>(*prior_); }

  Vec3 local(const TileId& t, const Vec3& p) const { return p - tile_center(t, config_.grid); }

 private:
  SlamConfig config_;
  std::shared_ptr<const Basis3D> basis_;
  std::shared_ptr<const TileMap> prior_;
  Mat3 sqrt_p_, sqrt_q_;
};

// Random stream identifiers.
inline constexpr std::uint64_t kResampleStream = 0xFFFFFFFFull;

inline std::vector<Particle> initialize(const SlamConfig& config) {
  config.validate();
  std::vector<Particle> ps(config.num_particles);
  const double lw = -std::log(static_cast<double>(config.num_particles));
  for (auto& p : ps) p.log_weight = lw;
  return ps;
}

/// Pose time update: p += dp + e_p, q = dq * q * exp(e_q), e ~ N(0, dt Sigma).
template <class Rng>
void propagate(Particle& particle, const StepRecord& step, const SlamModel& model, Rng& rng) {
  const double sdt = std::sqrt(step.dt);
  const Vec3 ep = sdt * (model.sqrt_sigma_p() * standard_normal3(rng));
  const Vec3 eq = sdt * (model.sqrt_sigma_q() * standard_normal3(rng));
  const Vec3 move = step.dp + ep;
  particle.pose.p += move;
  particle.pose.q = quat_multiply(quat_multiply(step.dq, particle.pose.q), quat_exp(eq));
  particle.path_length += move.norm();
}

/// Makes sure the tile under the particle exists and tracks visit states.
/// Returns true if a new tile map was created.
inline bool create_tiles(Particle& particle, const SlamModel& model) {
  const TileId tile = point_to_tile(particle.pose.p, model.config().grid);
  bool created = false;
  if (!particle.has_map(tile)) {
    particle.maps.emplace(tile, model.new_tile());
    created = true;
  }
  if (!particle.current_tile || *particle.current_tile != tile) {
    if (particle.current_tile) particle.visits[*particle.current_tile] = VisitState::left;
    auto it = particle.visits.find(tile);
    if (it == particle.visits.end()) {
      particle.visits.emplace(tile, VisitState::entered);
    } else if (it->second == VisitState::left) {
      it->second = VisitState::revisiting;
    }
    particle.current_tile = tile;
  }
  return created;
}

/// Log-likelihood of a body-frame measurement at the particle's pose under
/// the particle's map of its current tile.
inline double measurement_log_likelihood(const Particle& particle, const Vec3& y, const SlamModel& model) {
  const TileId tile = point_to_tile(particle.pose.p, model.config().grid);
  const Vec3 local = model.local(tile, particle.pose.p);
  const Mat3 r_bw = quat_to_rotmat(particle.pose.q).transpose();
  const NablaPhi c = r_bw * model.basis().nabla_phi(local);
  return log_likelihood(particle.map(tile), c, y, model.config().hyper);
}

inline std::vector<double> normalized_weights(const std::vector<Particle>& ps) {
  std::vector<double> w(ps.size());
  for (std::size_t i = 0; i < ps.size(); ++i) w[i] = std::exp(ps[i].log_weight);
  return w;
}

inline double effective_sample_size(const std::vector<Particle>& ps) {
  double s2 = 0.0;
  for (const auto& p : ps) s2 += std::exp(2.0 * p.log_weight);
  return 1.0 / s2;
}

/// Shifts log-weights so the weights sum to one. Throws NumericalError when
/// every weight underflows.
inline void normalize_log_weights(std::vector<Particle>& ps) {
  double mx = -std::numeric_limits<double>::infinity();
  for (const auto& p : ps) mx = std::max(mx, p.log_weight);
  if (!(mx >= -700.0)) throw NumericalError("filter divergence: all particle weights underflowed");
  double sum = 0.0;
  for (const auto& p : ps) sum += std::exp(p.log_weight - mx);
  const double shift = mx + std::log(sum);
  for (auto& p : ps) p.log_weight -= shift;
}

/// Importance weighting with the magnetometer sample; returns the effective
/// sample size after normalisation.
inline double weight(std::vector<Particle>& ps, const StepRecord& step, const SlamModel& model) {
  for (auto& p : ps) p.log_weight += measurement_log_likelihood(p, step.y, model);
  normalize_log_weights(ps);
  return effective_sample_size(ps);
}

/// Systematic resampling indices for normalised weights and one uniform draw.
inline std::vector<std::size_t> systematic_indices(const std::vector<double>& w, double u) {
  const std::size_t n = w.size();
  std::vector<std::size_t> idx(n);
  double cum = w.empty() ? 0.0 : w[0];
  std::size_t j = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double pos = (static_cast<double>(i) + u) / static_cast<double>(n);
    while (pos > cum && j + 1 < n) cum += w[++j];
    idx[i] = j;
  }
  return idx;
}

inline double revisiting_fraction(const std::vector<Particle>& ps) {
  std::size_t n = 0;
  for (const auto& p : ps)
    if (p.current_tile && p.visit(*p.current_tile) == VisitState::revisiting) ++n;
  return ps.empty() ? 0.0 : static_cast<double>(n) / static_cast<double>(ps.size());
}

/// Resamples the whole population when enough particles are revisiting a
/// tile. Returns true if resampling happened.
template <class Rng>
bool maybe_resample(std::vector<Particle>& ps, const SlamConfig& config, Rng& rng) {
  if (ps.empty() || revisiting_fraction(ps) < config.resample_fraction) return false;
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto idx = systematic_indices(normalized_weights(ps), u01(rng));
  // Survivors are ordered by parent weight (heaviest first) so that the
  // uniform-weight tie-break of the point estimate picks a copy of the
  // heaviest parent instead of whichever parent had the lowest index.
  std::stable_sort(idx.begin(), idx.end(), [&ps](std::size_t a, std::size_t b) {
    return ps[a].log_weight > ps[b].log_weight;
  });
  std::vector<Particle> next;
  next.reserve(ps.size());
  for (std::size_t i : idx) next.push_back(ps[i]);
  const double lw = -std::log(static_cast<double>(ps.size()));
  for (auto& p : next) p.log_weight = lw;
  ps = std::move(next);
  return true;
}

struct MapUpdateStats {
  int flushed = 0;
  int tile_updates = 0;
  int dropped = 0;
};

/// Queues the current measurement and applies every queued measurement that
/// the particle has walked more than one delay length past, to its own tile
/// and to neighbours whose shared face is within the threshold.
inline MapUpdateStats update_maps(Particle& particle, const StepRecord& step, const SlamModel& model) {
  const auto& cfg = model.config();
  PendingMeasurement pm;
  pm.position = particle.pose.p;
  pm.r_bw = quat_to_rotmat(particle.pose.q).transpose();
  pm.y = step.y;
  pm.path_at = particle.path_length;
  particle.pending.push_back(pm);

  MapUpdateStats stats;
  NablaPhi grad;
  while (!particle.pending.empty() &&
         particle.path_length - particle.pending.front().path_at > cfg.delay_lengthscale) {
    const PendingMeasurement m = particle.pending.front();
    particle.pending.pop_front();
    ++stats.flushed;
    const TileId home = point_to_tile(m.position, cfg.grid);
    std::vector<TileId> targets{home};
    for (const auto& n : tile_neighbors(home, m.position, cfg.grid, cfg.neighbor_threshold)) targets.push_back(n);
    for (const auto& t : targets) {
      const Vec3 local = model.local(t, m.position);
      if (!model.basis().contains(local)) {
        ++stats.dropped;
        continue;
      }
      if (!particle.has_map(t)) particle.maps.emplace(t, model.new_tile());
      model.basis().nabla_phi_into(local, grad);
      kalman_update(particle.mutable_map(t), m.r_bw * grad, m.y, cfg.hyper);
      ++stats.tile_updates;
    }
  }
  return stats;
}

/// Index of the highest-weight particle; ties go to the lowest index.
inline std::size_t point_estimate(const std::vector<Particle>& ps) {
  if (ps.empty()) throw DataError("point_estimate: empty population");
  std::size_t best = 0;
  for (std::size_t i = 1; i < ps.size(); ++i)
    if (ps[i].log_weight > ps[best].log_weight) best = i;
  return best;
}

// ---------------------------------------------------------------------------
// Full run

struct RunDiagnostics {
  bool completed = false;
  bool interrupted = false;
  bool diverged = false;
  std::string error;              // empty on success
  std::size_t steps = 0;
  int resample_events = 0;
  long dropped_pending = 0;
  long flushed = 0;
  long tiles_created = 0;         // over all particles, including inherited copies' new tiles
  std::size_t best_tiles = 0;     // tiles in the final point-estimate particle
  std::size_t total_tiles = 0;    // sum over final particles
  double map_entries = 0.0;       // mean + covariance entries over all particles' tiles
  double physical_entries = 0.0;  // the same, counting maps shared after resampling once
  double memory_estimate = 0.0;   // total_tiles * (m + 3)^2
  double runtime_s = 0.0;
  double min_ess = 0.0;
  double mean_ess = 0.0;
};

struct RunOptions {
  const std::atomic<bool>* cancel = nullptr;
  // Called every `snapshot_every` seconds of log time with the current best
  // particle; 0 disables.
  double snapshot_every = 0.0;
  std::function<void(double t, const Particle&)> on_snapshot;
};

struct RunResult {
  std::vector<EstimateRecord> estimates;
  Particle final_particle;
  RunDiagnostics diagnostics;
};

inline void account_memory(const std::vector<Particle>& ps, const SlamModel& model, RunDiagnostics& d) {
  const double n = model.basis().state_size();
  std::unordered_map<const TileMap*, bool> seen;
  d.total_tiles = 0;
  d.map_entries = 0.0;
  d.physical_entries = 0.0;
  for (const auto& p : ps) {
    d.total_tiles += p.maps.size();
    for (const auto& [id, m] : p.maps) {
      (void)id;
      const double entries = static_cast<double>(m->cov.size() + m->mean.size());
      d.map_entries += entries;
      if (seen.emplace(m.get(), true).second) d.physical_entries += entries;
    }
  }
  d.memory_estimate = static_cast<double>(d.total_tiles) * n * n;
}

/// Runs the filter over a log. Divergence and cancellation stop the run early
/// with the estimates so far and `completed == false`.
inline RunResult run(const std::vector<StepRecord>& log, const SlamModel& model, const RunOptions& opts = {}) {
  const auto& cfg = model.config();
  for (std::size_t k = 0; k < log.size(); ++k) {
    if (!(log[k].dt > 0.0)) throw DataError("run: step " + std::to_string(k) + " has dt <= 0");
    if (k > 0 && !(log[k].t > log[k - 1].t)) throw DataError("run: log not time-ordered at step " + std::to_string(k));
  }
  const auto t0 = std::chrono::steady_clock::now();
  RunResult out;
  auto& diag = out.diagnostics;
  auto ps = initialize(cfg);
  out.estimates.reserve(log.size());
  double next_snapshot = opts.snapshot_every > 0.0 && !log.empty() ? log.front().t + opts.snapshot_every : 0.0;
  double ess_sum = 0.0;
  diag.min_ess = static_cast<double>(ps.size());
  try {
    for (std::size_t k = 0; k < log.size(); ++k) {
      if (opts.cancel && opts.cancel->load()) {
        diag.error = "interrupted";
        diag.interrupted = true;
        break;
      }
      const StepRecord& step = log[k];
      for (auto& p : ps) diag.tiles_created += create_tiles(p, model) ? 1 : 0;
      const double ess = weight(ps, step, model);
      ess_sum += ess;
      diag.min_ess = std::min(diag.min_ess, ess);
      SplitMix64 rs = stream_rng(cfg.rng_seed, k, kResampleStream);
      const bool resampled = maybe_resample(ps, cfg, rs);
      diag.resample_events += resampled ? 1 : 0;
      for (auto& p : ps) {
        const auto st = update_maps(p, step, model);
        diag.dropped_pending += st.dropped;
        diag.flushed += st.flushed;
      }
      const std::size_t best = point_estimate(ps);
      const Particle& bp = ps[best];
      out.estimates.push_back({step.t, bp.pose, *bp.current_tile, ess, resampled});
      if (opts.on_snapshot && opts.snapshot_every > 0.0 && step.t >= next_snapshot) {
        opts.on_snapshot(step.t, bp);
        while (next_snapshot <= step.t) next_snapshot += opts.snapshot_every;
      }
      for (std::size_t i = 0; i < ps.size(); ++i) {
        SplitMix64 rng = stream_rng(cfg.rng_seed, k, i);
        propagate(ps[i], step, model, rng);
      }
      ++diag.steps;
    }
    if (diag.error.empty()) diag.completed = true;
  } catch (const NumericalError& e) {
    diag.error = e.what();
    diag.diverged = true;
  }
  diag.mean_ess = diag.steps ? ess_sum / static_cast<double>(diag.steps) : 0.0;
  if (!ps.empty()) {
    out.final_particle = ps[point_estimate(ps)];
    diag.best_tiles = out.final_particle.maps.size();
  }
  account_memory(ps, model, diag);
  diag.runtime_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

}  // namespace magslam
