#pragma once

// File formats: sensor logs and their ground-truth sidecar, run
// configuration, the binary basis cache, map state, field grids, heatmaps and
// run exports.
//
// Every text file starts with a "# magslam-<kind> <major>.<minor>" line;
// readers refuse files with a newer major version. Numbers are written in
// shortest round-trip form, so write followed by read is lossless.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <istream>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "magslam/eigenbasis.hpp"
#include "magslam/error.hpp"
#include "magslam/geom.hpp"
#include "magslam/gpmap.hpp"
#include "magslam/records.hpp"
#include "magslam/sim.hpp"
#include "magslam/slam.hpp"

namespace magslam::io {

inline constexpr int kFormatMajor = 1;
inline constexpr int kFormatMinor = 0;

// ---------------------------------------------------------------------------
// Low-level text helpers

inline std::string fmt(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string fmt_fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

inline std::string version_line(std::string_view kind) {
  return "# magslam-" + std::string(kind) + " " + std::to_string(kFormatMajor) + "." +
         std::to_string(kFormatMinor);
}

inline std::vector<std::string_view> split(std::string_view line, char sep = ',') {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::string at_line(const std::string& source, long line) {
  return source + ":" + std::to_string(line) + ": ";
}

inline double parse_double(std::string_view s, const std::string& where) {
  s = trim(s);
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw DataError(where + "cannot parse number '" + std::string(s) + "'");
  return v;
}

inline long parse_long(std::string_view s, const std::string& where) {
  s = trim(s);
  long v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw DataError(where + "cannot parse integer '" + std::string(s) + "'");
  return v;
}

/// Reads lines and tracks line numbers; strips the trailing CR of CRLF files.
class LineReader {
 public:
  LineReader(std::istream& in, std::string source) : in_(in), source_(std::move(source)) {}

  bool next(std::string& line) {
    if (!std::getline(in_, line)) return false;
    ++line_;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return true;
  }
  long line() const { return line_; }
  std::string where() const { return at_line(source_, line_); }
  const std::string& source() const { return source_; }

 private:
  std::istream& in_;
  std::string source_;
  long line_ = 0;
};

/// Checks the version line of a text file of the given kind.
inline void expect_version(LineReader& r, std::string_view kind) {
  std::string line;
  if (!r.next(line)) throw DataError(r.source() + ": empty file");
  const std::string prefix = "# magslam-" + std::string(kind) + " ";
  if (line.rfind(prefix, 0) != 0)
    throw DataError(r.where() + "missing '" + prefix + "<version>' header");
  const std::string ver = line.substr(prefix.size());
  const auto dot = ver.find('.');
  const long major = parse_long(std::string_view(ver).substr(0, dot), r.where());
  if (major > kFormatMajor)
    throw DataError(r.where() + "format version " + ver + " is newer than supported " +
                    std::to_string(kFormatMajor) + "." + std::to_string(kFormatMinor));
}

inline std::ofstream open_out(const std::string& path, bool binary = false) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path, binary ? std::ios::binary | std::ios::out : std::ios::out);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  return out;
}

inline std::ifstream open_in(const std::string& path, bool binary = false) {
  std::ifstream in(path, binary ? std::ios::binary | std::ios::in : std::ios::in);
  if (!in) throw DataError("cannot open '" + path + "'");
  return in;
}

inline void write_text(const std::string& path, const std::string& text) {
  auto out = open_out(path);
  out << text;
  if (!out) throw DataError("failed writing '" + path + "'");
}

// ---------------------------------------------------------------------------
// Sensor logs

inline constexpr const char* kLogHeader =
    "t_s,dt_s,dp_x,dp_y,dp_z,dq_w,dq_x,dq_y,dq_z,mag_x,mag_y,mag_z";
inline constexpr const char* kTruthHeaderExtra = ",true_px,true_py,true_pz,true_qw,true_qx,true_qy,true_qz";

struct LogData {
  std::vector<StepRecord> records;
  std::vector<TimedPose> truth;  // filled only by the sidecar reader
  int renormalized = 0;          // dq rows renormalised on read
};

namespace detail {

inline void write_record_fields(std::ostream& out, const StepRecord& r) {
  out << fmt(r.t) << ',' << fmt(r.dt) << ',' << fmt(r.dp.x()) << ',' << fmt(r.dp.y()) << ','
      << fmt(r.dp.z()) << ',' << fmt(r.dq.w) << ',' << fmt(r.dq.x) << ',' << fmt(r.dq.y) << ','
      << fmt(r.dq.z) << ',' << fmt(r.y.x()) << ',' << fmt(r.y.y()) << ',' << fmt(r.y.z());
}

inline LogData read_log_stream(std::istream& in, const std::string& source, bool with_truth) {
  LineReader r(in, source);
  expect_version(r, with_truth ? "truth" : "log");
  const std::string header = std::string(kLogHeader) + (with_truth ? kTruthHeaderExtra : "");
  const std::size_t fields = with_truth ? 19 : 12;
  LogData data;
  std::string line;
  bool have_header = false;
  while (r.next(line)) {
    const std::string_view sv = trim(line);
    if (sv.empty() || sv.front() == '#') continue;
    if (!have_header) {
      if (sv != header) throw DataError(r.where() + "unexpected column header, want '" + header + "'");
      have_header = true;
      continue;
    }
    const auto parts = split(sv);
    if (parts.size() != fields)
      throw DataError(r.where() + "expected " + std::to_string(fields) + " fields, got " +
                      std::to_string(parts.size()));
    double v[19];
    for (std::size_t i = 0; i < fields; ++i) v[i] = parse_double(parts[i], r.where());
    StepRecord rec;
    rec.t = v[0];
    rec.dt = v[1];
    rec.dp = Vec3(v[2], v[3], v[4]);
    rec.dq = {v[5], v[6], v[7], v[8]};
    rec.y = Vec3(v[9], v[10], v[11]);
    for (std::size_t i = 0; i < fields; ++i)
      if (!std::isfinite(v[i])) throw DataError(r.where() + "non-finite value");
    if (!(rec.dt > 0.0)) throw DataError(r.where() + "dt_s must be positive");
    if (!data.records.empty() && !(rec.t > data.records.back().t))
      throw DataError(r.where() + "t_s is not strictly increasing");
    const double n = rec.dq.norm();
    if (std::abs(n - 1.0) > 1e-6) throw DataError(r.where() + "dq is not a unit quaternion (norm " + fmt(n) + ")");
    if (std::abs(n - 1.0) > 1e-12) {
      rec.dq = quat_normalized(rec.dq);
      ++data.renormalized;
    }
    data.records.push_back(rec);
    if (with_truth) {
      TimedPose tp;
      tp.t = rec.t;
      tp.pose.p = Vec3(v[12], v[13], v[14]);
      tp.pose.q = quat_normalized({v[15], v[16], v[17], v[18]});
      data.truth.push_back(tp);
    }
  }
  if (!have_header) throw DataError(source + ": missing column header");
  return data;
}

}  // namespace detail

inline void write_log(std::ostream& out, const std::vector<StepRecord>& records) {
  out << version_line("log") << '\n' << kLogHeader << '\n';
  for (const auto& r : records) {
    detail::write_record_fields(out, r);
    out << '\n';
  }
}

inline void write_log(const std::string& path, const std::vector<StepRecord>& records) {
  auto out = open_out(path);
  write_log(out, records);
}

inline LogData read_log(std::istream& in, const std::string& source = "<stream>") {
  return detail::read_log_stream(in, source, false);
}

inline LogData read_log(const std::string& path) {
  auto in = open_in(path);
  return read_log(in, path);
}

/// Ground-truth sidecar: the log columns followed by the true pose.
inline void write_truth(std::ostream& out, const std::vector<StepRecord>& records,
                        const std::vector<TimedPose>& truth) {
  if (records.size() != truth.size()) throw DataError("write_truth: record/truth length mismatch");
  out << version_line("truth") << '\n' << kLogHeader << kTruthHeaderExtra << '\n';
  for (std::size_t k = 0; k < records.size(); ++k) {
    detail::write_record_fields(out, records[k]);
    const Pose& p = truth[k].pose;
    out << ',' << fmt(p.p.x()) << ',' << fmt(p.p.y()) << ',' << fmt(p.p.z()) << ',' << fmt(p.q.w) << ','
        << fmt(p.q.x) << ',' << fmt(p.q.y) << ',' << fmt(p.q.z) << '\n';
  }
}

inline void write_truth(const std::string& path, const std::vector<StepRecord>& records,
                        const std::vector<TimedPose>& truth) {
  auto out = open_out(path);
  write_truth(out, records, truth);
}

inline LogData read_truth(std::istream& in, const std::string& source = "<stream>") {
  return detail::read_log_stream(in, source, true);
}

inline LogData read_truth(const std::string& path) {
  auto in = open_in(path);
  return read_truth(in, path);
}

// ---------------------------------------------------------------------------
// Run configuration (JSON)

struct OutputConfig {
  double snapshot_every = 0.0;  // s of log time; 0 disables snapshots
  double grid_step = 0.25;      // m, map export lattice
  double grid_z = 0.0;          // m, map export plane
};

struct RunConfig {
  SlamConfig slam;
  double grid_step = 0.1;  // eigenbasis finite-difference step h
  int hex_pairs = 96;
  int max_n2 = 32;
  std::string basis_cache;  // file path; empty selects the default name in the working directory
  std::string log_path;
  std::string out_dir = "out";
  OutputConfig output;
  ScenarioSpec simulate;

  RunConfig() {
    simulate.odometry.sigma_p = slam.sigma_p;
    simulate.odometry.sigma_q = slam.sigma_q;
  }

  BasisSpec basis_spec() const {
    BasisSpec b;
    b.radius = slam.grid.radius;
    b.half_height = slam.grid.half_height;
    b.extension = slam.extension;
    b.grid_step = grid_step;
    b.basis_size = slam.basis_size;
    b.hex_pairs = hex_pairs;
    b.max_n2 = max_n2;
    return b;
  }

  void validate() const {
    slam.validate();
    basis_spec().validate();
    simulate.trajectory.validate();
    psd_sqrt(simulate.odometry.sigma_p);
    psd_sqrt(simulate.odometry.sigma_q);
    if (!(simulate.mag_noise_sd >= 0.0)) throw DataError("config: mag_noise_sd must be >= 0");
    if (!(output.snapshot_every >= 0.0)) throw DataError("config: snapshot_every must be >= 0");
    if (!(output.grid_step > 0.0)) throw DataError("config: output grid_step must be positive");
  }
};

namespace detail {

using nlohmann::json;

inline void expect_keys(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!obj.is_object()) throw DataError("config: '" + where + "' must be an object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) throw DataError("config: unknown key '" + (where.empty() ? "" : where + ".") + it.key() + "'");
  }
}

template <class T>
void get(const json& obj, const char* key, T& out, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw DataError("config: '" + where + (where.empty() ? "" : ".") + key + "' has the wrong type");
  }
}

inline void get_vec3(const json& obj, const char* key, Vec3& out, const std::string& where) {
  if (!obj.contains(key)) return;
  std::vector<double> v;
  get(obj, key, v, where);
  if (v.size() != 3) throw DataError("config: '" + where + "." + key + "' must have 3 entries");
  out = Vec3(v[0], v[1], v[2]);
}

// Per-axis standard deviations (per sqrt(s)) into a diagonal covariance.
inline void get_sd_diag(const json& obj, const char* key, Mat3& out, double unit, const std::string& where) {
  if (!obj.contains(key)) return;
  Vec3 sd = Vec3::Zero();
  get_vec3(obj, key, sd, where);
  if ((sd.array() < 0.0).any()) throw DataError("config: '" + where + "." + key + "' must be >= 0");
  out = (sd * unit).cwiseAbs2().asDiagonal();
}

inline Vec3 diag_sd(const Mat3& m, double unit) { return m.diagonal().cwiseMax(0.0).cwiseSqrt() / unit; }

inline std::vector<double> to_vec(const Vec3& v) { return {v.x(), v.y(), v.z()}; }

}  // namespace detail

/// Parses a JSON run configuration. Omitted keys keep their defaults; unknown
/// keys are errors. Orientation noise is given as per-axis standard
/// deviations in deg/sqrt(s) and position noise in m/sqrt(s).
inline RunConfig parse_config(const nlohmann::json& j) {
  using detail::get;
  RunConfig c;
  detail::expect_keys(j, {"format", "particles", "seed", "sigma_p", "sigma_q_deg", "tile", "basis", "gp",
                          "filter", "paths", "output", "simulate"},
                      "");
  if (j.contains("format")) {
    std::string f;
    get(j, "format", f, "");
    const std::string prefix = "magslam-config ";
    if (f.rfind(prefix, 0) != 0) throw DataError("config: format must be 'magslam-config <version>'");
    const long major = parse_long(std::string_view(f).substr(prefix.size(), f.find('.') - prefix.size()), "config: ");
    if (major > kFormatMajor) throw DataError("config: format " + f + " is newer than supported");
  }
  get(j, "particles", c.slam.num_particles, "");
  get(j, "seed", c.slam.rng_seed, "");
  detail::get_sd_diag(j, "sigma_p", c.slam.sigma_p, 1.0, "");
  detail::get_sd_diag(j, "sigma_q_deg", c.slam.sigma_q, kDegree, "");
  if (j.contains("tile")) {
    const auto& t = j.at("tile");
    detail::expect_keys(t, {"radius", "half_height", "extension", "origin"}, "tile");
    get(t, "radius", c.slam.grid.radius, "tile");
    get(t, "half_height", c.slam.grid.half_height, "tile");
    get(t, "extension", c.slam.extension, "tile");
    detail::get_vec3(t, "origin", c.slam.grid.origin, "tile");
  }
  if (j.contains("basis")) {
    const auto& b = j.at("basis");
    detail::expect_keys(b, {"size", "grid_step", "hex_pairs", "max_n2"}, "basis");
    get(b, "size", c.slam.basis_size, "basis");
    get(b, "grid_step", c.grid_step, "basis");
    get(b, "hex_pairs", c.hex_pairs, "basis");
    get(b, "max_n2", c.max_n2, "basis");
  }
  if (j.contains("gp")) {
    const auto& g = j.at("gp");
    detail::expect_keys(g, {"sigma2_lin", "sigma2_se", "lengthscale", "sigma2_noise"}, "gp");
    get(g, "sigma2_lin", c.slam.hyper.sigma2_lin, "gp");
    get(g, "sigma2_se", c.slam.hyper.sigma2_se, "gp");
    get(g, "lengthscale", c.slam.hyper.lengthscale, "gp");
    get(g, "sigma2_noise", c.slam.hyper.sigma2_noise, "gp");
  }
  if (j.contains("filter")) {
    const auto& f = j.at("filter");
    detail::expect_keys(f, {"delay_lengthscale", "neighbor_threshold", "resample_fraction"}, "filter");
    get(f, "delay_lengthscale", c.slam.delay_lengthscale, "filter");
    get(f, "neighbor_threshold", c.slam.neighbor_threshold, "filter");
    get(f, "resample_fraction", c.slam.resample_fraction, "filter");
  }
  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    detail::expect_keys(p, {"basis_cache", "log", "out_dir"}, "paths");
    get(p, "basis_cache", c.basis_cache, "paths");
    get(p, "log", c.log_path, "paths");
    get(p, "out_dir", c.out_dir, "paths");
  }
  if (j.contains("output")) {
    const auto& o = j.at("output");
    detail::expect_keys(o, {"snapshot_every", "grid_step", "grid_z"}, "output");
    get(o, "snapshot_every", c.output.snapshot_every, "output");
    get(o, "grid_step", c.output.grid_step, "output");
    get(o, "grid_z", c.output.grid_z, "output");
  }
  // Simulated odometry defaults to the filter's process noise.
  c.simulate.odometry.sigma_p = c.slam.sigma_p;
  c.simulate.odometry.sigma_q = c.slam.sigma_q;
  if (j.contains("simulate")) {
    const auto& s = j.at("simulate");
    detail::expect_keys(s, {"trajectory", "extents", "laps", "speed", "sample_rate", "corner_radius",
                            "odometry_sigma_p", "odometry_sigma_q_deg", "mag_noise_sd", "world", "jumps"},
                        "simulate");
    auto& tr = c.simulate.trajectory;
    if (s.contains("trajectory")) {
      std::string kind;
      get(s, "trajectory", kind, "simulate");
      tr.kind = trajectory_kind_from_string(kind);
    }
    detail::get_vec3(s, "extents", tr.extents, "simulate");
    get(s, "laps", tr.laps, "simulate");
    get(s, "speed", tr.speed, "simulate");
    get(s, "sample_rate", tr.sample_rate, "simulate");
    get(s, "corner_radius", tr.corner_radius, "simulate");
    detail::get_sd_diag(s, "odometry_sigma_p", c.simulate.odometry.sigma_p, 1.0, "simulate");
    detail::get_sd_diag(s, "odometry_sigma_q_deg", c.simulate.odometry.sigma_q, kDegree, "simulate");
    get(s, "mag_noise_sd", c.simulate.mag_noise_sd, "simulate");
    if (s.contains("world")) {
      const auto& w = s.at("world");
      detail::expect_keys(w, {"earth", "dipoles_per_metre", "depth_min", "depth_max", "lateral_max",
                              "anomaly_min", "anomaly_max"},
                          "simulate.world");
      auto& ws = c.simulate.world;
      detail::get_vec3(w, "earth", ws.earth, "simulate.world");
      get(w, "dipoles_per_metre", ws.dipoles_per_metre, "simulate.world");
      get(w, "depth_min", ws.depth_min, "simulate.world");
      get(w, "depth_max", ws.depth_max, "simulate.world");
      get(w, "lateral_max", ws.lateral_max, "simulate.world");
      get(w, "anomaly_min", ws.anomaly_min, "simulate.world");
      get(w, "anomaly_max", ws.anomaly_max, "simulate.world");
    }
    if (s.contains("jumps")) {
      const auto& js = s.at("jumps");
      if (!js.is_array()) throw DataError("config: 'simulate.jumps' must be an array");
      for (const auto& jj : js) {
        detail::expect_keys(jj, {"t", "offset"}, "simulate.jumps[]");
        PositionJump pj;
        get(jj, "t", pj.t, "simulate.jumps[]");
        detail::get_vec3(jj, "offset", pj.offset, "simulate.jumps[]");
        c.simulate.jumps.push_back(pj);
      }
    }
  }
  c.validate();
  return c;
}

inline RunConfig parse_config_text(const std::string& text, const std::string& source = "<config>") {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(source + ": invalid JSON: " + e.what());
  }
  return parse_config(j);
}

inline RunConfig load_config(const std::string& path) {
  auto in = open_in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path);
}

/// The configuration as JSON, in the same schema parse_config reads. Only
/// the diagonals of the noise covariances are representable.
inline nlohmann::json config_to_json(const RunConfig& c) {
  using detail::diag_sd;
  using detail::to_vec;
  nlohmann::json j;
  j["format"] = "magslam-config " + std::to_string(kFormatMajor) + "." + std::to_string(kFormatMinor);
  j["particles"] = c.slam.num_particles;
  j["seed"] = c.slam.rng_seed;
  j["sigma_p"] = to_vec(diag_sd(c.slam.sigma_p, 1.0));
  j["sigma_q_deg"] = to_vec(diag_sd(c.slam.sigma_q, kDegree));
  j["tile"] = {{"radius", c.slam.grid.radius},
               {"half_height", c.slam.grid.half_height},
               {"extension", c.slam.extension},
               {"origin", to_vec(c.slam.grid.origin)}};
  j["basis"] = {{"size", c.slam.basis_size}, {"grid_step", c.grid_step}, {"hex_pairs", c.hex_pairs}, {"max_n2", c.max_n2}};
  j["gp"] = {{"sigma2_lin", c.slam.hyper.sigma2_lin},
             {"sigma2_se", c.slam.hyper.sigma2_se},
             {"lengthscale", c.slam.hyper.lengthscale},
             {"sigma2_noise", c.slam.hyper.sigma2_noise}};
  j["filter"] = {{"delay_lengthscale", c.slam.delay_lengthscale},
                 {"neighbor_threshold", c.slam.neighbor_threshold},
                 {"resample_fraction", c.slam.resample_fraction}};
  j["paths"] = {{"basis_cache", c.basis_cache}, {"log", c.log_path}, {"out_dir", c.out_dir}};
  j["output"] = {{"snapshot_every", c.output.snapshot_every}, {"grid_step", c.output.grid_step}, {"grid_z", c.output.grid_z}};
  const auto& s = c.simulate;
  nlohmann::json jumps = nlohmann::json::array();
  for (const auto& pj : s.jumps) jumps.push_back({{"t", pj.t}, {"offset", to_vec(pj.offset)}});
  j["simulate"] = {{"trajectory", std::string(to_string(s.trajectory.kind))},
                   {"extents", to_vec(s.trajectory.extents)},
                   {"laps", s.trajectory.laps},
                   {"speed", s.trajectory.speed},
                   {"sample_rate", s.trajectory.sample_rate},
                   {"corner_radius", s.trajectory.corner_radius},
                   {"odometry_sigma_p", to_vec(diag_sd(s.odometry.sigma_p, 1.0))},
                   {"odometry_sigma_q_deg", to_vec(diag_sd(s.odometry.sigma_q, kDegree))},
                   {"mag_noise_sd", s.mag_noise_sd},
                   {"world",
                    {{"earth", to_vec(s.world.earth)},
                     {"dipoles_per_metre", s.world.dipoles_per_metre},
                     {"depth_min", s.world.depth_min},
                     {"depth_max", s.world.depth_max},
                     {"lateral_max", s.world.lateral_max},
                     {"anomaly_min", s.world.anomaly_min},
                     {"anomaly_max", s.world.anomaly_max}}},
                   {"jumps", jumps}};
  return j;
}

// ---------------------------------------------------------------------------
// Basis cache (binary, native little-endian doubles)

inline constexpr char kBasisMagic[8] = {'M', 'S', 'L', 'B', 'A', 'S', 'I', 'S'};
inline constexpr std::uint32_t kBasisVersion = 1;

inline std::string basis_cache_name(const BasisSpec& s) {
  return "magslam-basis_r" + fmt(s.radius) + "_lz" + fmt(s.half_height) + "_ext" + fmt(s.extension) + "_h" +
         fmt(s.grid_step) + "_m" + std::to_string(s.basis_size) + "_k" + std::to_string(s.hex_pairs) + "_n" +
         std::to_string(s.max_n2) + ".bin";
}

namespace detail {

template <class T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T take(std::istream& in, const std::string& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw DataError(path + ": truncated basis cache");
  return v;
}

inline void put_spec(std::ostream& out, const BasisSpec& s) {
  put(out, s.radius);
  put(out, s.half_height);
  put(out, s.extension);
  put(out, s.grid_step);
  put(out, static_cast<std::int32_t>(s.basis_size));
  put(out, static_cast<std::int32_t>(s.hex_pairs));
  put(out, static_cast<std::int32_t>(s.max_n2));
}

inline BasisSpec take_spec(std::istream& in, const std::string& path) {
  BasisSpec s;
  s.radius = take<double>(in, path);
  s.half_height = take<double>(in, path);
  s.extension = take<double>(in, path);
  s.grid_step = take<double>(in, path);
  s.basis_size = take<std::int32_t>(in, path);
  s.hex_pairs = take<std::int32_t>(in, path);
  s.max_n2 = take<std::int32_t>(in, path);
  return s;
}

}  // namespace detail

inline void write_basis_cache(const std::string& path, const BasisSpec& spec, const Basis3D& basis) {
  auto out = open_out(path, true);
  using detail::put;
  out.write(kBasisMagic, sizeof(kBasisMagic));
  put(out, kBasisVersion);
  detail::put_spec(out, spec);
  const auto& hex = basis.hex();
  const auto& g = hex.grid();
  put(out, g.x0);
  put(out, g.y0);
  put(out, g.h);
  put(out, static_cast<std::int32_t>(g.nx));
  put(out, static_cast<std::int32_t>(g.ny));
  put(out, hex.radius());
  put(out, static_cast<std::int32_t>(hex.count()));
  out.write(reinterpret_cast<const char*>(hex.mask().data()), static_cast<std::streamsize>(hex.mask().size()));
  out.write(reinterpret_cast<const char*>(hex.eigenvalues().data()),
            static_cast<std::streamsize>(sizeof(double) * hex.eigenvalues().size()));
  out.write(reinterpret_cast<const char*>(hex.values().data()),
            static_cast<std::streamsize>(sizeof(double) * hex.values().size()));
  put(out, basis.extended_half_height());
  put(out, static_cast<std::int32_t>(basis.size()));
  for (const auto& pr : basis.index_pairs()) {
    put(out, static_cast<std::int32_t>(pr.n1));
    put(out, static_cast<std::int32_t>(pr.n2));
  }
  if (!out) throw DataError("failed writing basis cache '" + path + "'");
}

/// Loads a cached basis. With `expected`, a cache built for a different key
/// raises CacheMismatch.
inline std::shared_ptr<const Basis3D> read_basis_cache(const std::string& path,
                                                       const std::optional<BasisSpec>& expected = std::nullopt,
                                                       BasisSpec* stored = nullptr) {
  auto in = open_in(path, true);
  using detail::take;
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kBasisMagic, sizeof(magic)) != 0)
    throw DataError(path + ": not a magslam basis cache");
  const auto version = take<std::uint32_t>(in, path);
  if (version > kBasisVersion) throw DataError(path + ": basis cache version is newer than supported");
  const BasisSpec spec = detail::take_spec(in, path);
  if (stored) *stored = spec;
  if (expected && !(spec == *expected))
    throw CacheMismatch(path + ": basis cache was built for " + basis_cache_name(spec) + " but the configuration needs " +
                        basis_cache_name(*expected) + "; rerun the 'basis' command");
  Grid2D g;
  g.x0 = take<double>(in, path);
  g.y0 = take<double>(in, path);
  g.h = take<double>(in, path);
  g.nx = take<std::int32_t>(in, path);
  g.ny = take<std::int32_t>(in, path);
  const double radius = take<double>(in, path);
  const int count = take<std::int32_t>(in, path);
  if (g.nx <= 0 || g.ny <= 0 || count <= 0 || static_cast<long>(g.nx) * g.ny > 100000000L)
    throw DataError(path + ": corrupt basis cache header");
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(g.size()));
  in.read(reinterpret_cast<char*>(mask.data()), static_cast<std::streamsize>(mask.size()));
  Eigen::VectorXd eig(count);
  in.read(reinterpret_cast<char*>(eig.data()), static_cast<std::streamsize>(sizeof(double) * count));
  Eigen::MatrixXd values(g.size(), count);
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(sizeof(double) * values.size()));
  const double half_height = take<double>(in, path);
  const int m = take<std::int32_t>(in, path);
  if (m <= 0) throw DataError(path + ": corrupt basis cache");
  std::vector<IndexPair> pairs(m);
  for (auto& pr : pairs) {
    pr.n1 = take<std::int32_t>(in, path);
    pr.n2 = take<std::int32_t>(in, path);
    if (pr.n1 < 1 || pr.n1 > count || pr.n2 < 1) throw DataError(path + ": corrupt index pair");
  }
  auto hex = std::make_shared<const HexEigenbasis2D>(g, radius, std::move(mask), eig, std::move(values));
  return std::make_shared<const Basis3D>(std::move(hex), half_height, std::move(pairs));
}

struct BasisLoad {
  std::shared_ptr<const Basis3D> basis;
  std::string path;
  bool cache_hit = false;
  HexSolveReport report;
};

/// Returns the cached basis for `spec`, solving and writing it on a miss.
inline BasisLoad load_or_build_basis(const BasisSpec& spec, const std::string& path) {
  BasisLoad out;
  out.path = path;
  if (std::filesystem::exists(path)) {
    out.basis = read_basis_cache(path, spec);
    out.cache_hit = true;
    return out;
  }
  out.basis = build_basis(spec, &out.report);
  write_basis_cache(path, spec, *out.basis);
  return out;
}

// ---------------------------------------------------------------------------
// Map state (text)

using MapSet = std::unordered_map<TileId, std::shared_ptr<TileMap>>;

inline std::vector<TileId> sorted_tiles(const MapSet& maps) {
  std::vector<TileId> ids;
  ids.reserve(maps.size());
  for (const auto& kv : maps) ids.push_back(kv.first);
  std::sort(ids.begin(), ids.end());
  return ids;
}

/// One row per tile and state index: a, b, k, row, mean, then the covariance
/// row.
inline void write_map_state(std::ostream& out, const MapSet& maps, const SlamConfig& cfg) {
  out << version_line("map") << '\n';
  out << "# radius=" << fmt(cfg.grid.radius) << " half_height=" << fmt(cfg.grid.half_height)
      << " extension=" << fmt(cfg.extension) << " basis_size=" << cfg.basis_size << " origin=" << fmt(cfg.grid.origin.x())
      << ',' << fmt(cfg.grid.origin.y()) << ',' << fmt(cfg.grid.origin.z()) << '\n';
  out << "a,b,k,row,mean,cov...\n";
  for (const auto& id : sorted_tiles(maps)) {
    const TileMap& m = *maps.at(id);
    for (int r = 0; r < m.size(); ++r) {
      out << id.a << ',' << id.b << ',' << id.k << ',' << r << ',' << fmt(m.mean(r));
      for (int c = 0; c < m.size(); ++c) out << ',' << fmt(m.cov(r, c));
      out << '\n';
    }
  }
}

inline void write_map_state(const std::string& path, const MapSet& maps, const SlamConfig& cfg) {
  auto out = open_out(path);
  write_map_state(out, maps, cfg);
}

struct MapState {
  MapSet maps;
  HexGridSpec grid;
  double extension = 1.0;
  int basis_size = 0;
};

inline MapState read_map_state(std::istream& in, const std::string& source = "<stream>") {
  LineReader r(in, source);
  expect_version(r, "map");
  MapState st;
  std::string line;
  if (!r.next(line) || line.rfind("# ", 0) != 0) throw DataError(r.where() + "missing map metadata line");
  {
    std::istringstream meta(line.substr(2));
    std::string kv;
    while (meta >> kv) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw DataError(r.where() + "bad metadata '" + kv + "'");
      const std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
      if (key == "radius") st.grid.radius = parse_double(val, r.where());
      else if (key == "half_height") st.grid.half_height = parse_double(val, r.where());
      else if (key == "extension") st.extension = parse_double(val, r.where());
      else if (key == "basis_size") st.basis_size = static_cast<int>(parse_long(val, r.where()));
      else if (key == "origin") {
        const auto parts = split(val);
        if (parts.size() != 3) throw DataError(r.where() + "origin needs 3 values");
        st.grid.origin = Vec3(parse_double(parts[0], r.where()), parse_double(parts[1], r.where()),
                              parse_double(parts[2], r.where()));
      } else {
        throw DataError(r.where() + "unknown metadata key '" + key + "'");
      }
    }
  }
  if (st.basis_size <= 0) throw DataError(source + ": map metadata lacks basis_size");
  const int n = st.basis_size + 3;
  if (!r.next(line)) throw DataError(source + ": missing column header");
  while (r.next(line)) {
    const std::string_view sv = trim(line);
    if (sv.empty() || sv.front() == '#') continue;
    const auto parts = split(sv);
    if (static_cast<int>(parts.size()) != 5 + n)
      throw DataError(r.where() + "expected " + std::to_string(5 + n) + " fields, got " + std::to_string(parts.size()));
    const TileId id{static_cast<std::int32_t>(parse_long(parts[0], r.where())),
                    static_cast<std::int32_t>(parse_long(parts[1], r.where())),
                    static_cast<std::int32_t>(parse_long(parts[2], r.where()))};
    const long row = parse_long(parts[3], r.where());
    auto& slot = st.maps[id];
    if (!slot) {
      slot = std::make_shared<TileMap>();
      slot->mean = Eigen::VectorXd::Zero(n);
      slot->cov = Eigen::MatrixXd::Zero(n, n);
    }
    if (row < 0 || row >= n) throw DataError(r.where() + "row index out of range");
    slot->mean(row) = parse_double(parts[4], r.where());
    for (int c = 0; c < n; ++c) slot->cov(row, c) = parse_double(parts[5 + c], r.where());
  }
  return st;
}

inline MapState read_map_state(const std::string& path) {
  auto in = open_in(path);
  return read_map_state(in, path);
}

// ---------------------------------------------------------------------------
// Field grids

struct GridSample {
  int i = 0;
  int j = 0;
  Vec3 p = Vec3::Zero();
  Vec3 b = Vec3::Zero();  // world-frame field, uT
  double norm = 0.0;
  double std = 0.0;       // sqrt(trace(cov) / 3)
};

struct MapGrid {
  int nx = 0;
  int ny = 0;
  double x0 = 0.0;
  double y0 = 0.0;
  double step = 0.0;
  double z = 0.0;
  std::vector<GridSample> rows;  // in-tile lattice points only, j-major
};

/// Samples the mean field and its marginal standard deviation on the plane
/// z = z0 over a lattice covering every created tile that the plane cuts.
inline MapGrid export_map_grid(const MapSet& maps, const Basis3D& basis, const HexGridSpec& grid, double z0,
                               double step, const Hyperparameters& hyper) {
  if (!(step > 0.0)) throw DataError("export_map_grid: step must be positive");
  MapGrid out;
  out.step = step;
  out.z = z0;
  double minx = std::numeric_limits<double>::infinity(), maxx = -minx, miny = minx, maxy = -minx;
  const std::int32_t layer = point_to_tile(Vec3(grid.origin.x(), grid.origin.y(), z0), grid).k;
  for (const auto& kv : maps) {
    if (kv.first.k != layer) continue;
    const Vec3 c = tile_center(kv.first, grid);
    minx = std::min(minx, c.x() - grid.radius);
    maxx = std::max(maxx, c.x() + grid.radius);
    miny = std::min(miny, c.y() - grid.inradius());
    maxy = std::max(maxy, c.y() + grid.inradius());
  }
  if (!(minx <= maxx)) return out;
  out.x0 = std::floor(minx / step) * step;
  out.y0 = std::floor(miny / step) * step;
  out.nx = static_cast<int>(std::floor((maxx - out.x0) / step + 1e-9)) + 1;
  out.ny = static_cast<int>(std::floor((maxy - out.y0) / step + 1e-9)) + 1;
  NablaPhi grad;
  for (int j = 0; j < out.ny; ++j) {
    for (int i = 0; i < out.nx; ++i) {
      const Vec3 p(out.x0 + i * step, out.y0 + j * step, z0);
      const TileId t = point_to_tile(p, grid);
      auto it = maps.find(t);
      if (it == maps.end()) continue;
      basis.nabla_phi_into(p - tile_center(t, grid), grad);
      const FieldPrediction f = predict_field(*it->second, grad, hyper);
      GridSample s;
      s.i = i;
      s.j = j;
      s.p = p;
      s.b = f.mean;
      s.norm = f.mean.norm();
      s.std = std::sqrt(std::max(0.0, f.cov.trace() / 3.0));
      out.rows.push_back(s);
    }
  }
  return out;
}

inline void write_grid(std::ostream& out, const MapGrid& g) {
  out << version_line("grid") << '\n';
  out << "# nx=" << g.nx << " ny=" << g.ny << " x0=" << fmt(g.x0) << " y0=" << fmt(g.y0) << " step=" << fmt(g.step)
      << " z=" << fmt(g.z) << '\n';
  out << "x,y,z,Bx,By,Bz,norm,std\n";
  for (const auto& s : g.rows) {
    out << fmt(s.p.x()) << ',' << fmt(s.p.y()) << ',' << fmt(s.p.z()) << ',' << fmt(s.b.x()) << ',' << fmt(s.b.y())
        << ',' << fmt(s.b.z()) << ',' << fmt(s.norm) << ',' << fmt(s.std) << '\n';
  }
}

inline void write_grid(const std::string& path, const MapGrid& g) {
  auto out = open_out(path);
  write_grid(out, g);
}

inline MapGrid read_grid(std::istream& in, const std::string& source = "<stream>") {
  LineReader r(in, source);
  expect_version(r, "grid");
  MapGrid g;
  std::string line;
  if (!r.next(line) || line.rfind("# ", 0) != 0) throw DataError(r.where() + "missing grid metadata");
  std::istringstream meta(line.substr(2));
  std::string kv;
  while (meta >> kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw DataError(r.where() + "bad metadata '" + kv + "'");
    const std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
    if (key == "nx") g.nx = static_cast<int>(parse_long(val, r.where()));
    else if (key == "ny") g.ny = static_cast<int>(parse_long(val, r.where()));
    else if (key == "x0") g.x0 = parse_double(val, r.where());
    else if (key == "y0") g.y0 = parse_double(val, r.where());
    else if (key == "step") g.step = parse_double(val, r.where());
    else if (key == "z") g.z = parse_double(val, r.where());
    else throw DataError(r.where() + "unknown metadata key '" + key + "'");
  }
  if (!r.next(line) || trim(line) != "x,y,z,Bx,By,Bz,norm,std") throw DataError(r.where() + "unexpected column header");
  while (r.next(line)) {
    const std::string_view sv = trim(line);
    if (sv.empty() || sv.front() == '#') continue;
    const auto parts = split(sv);
    if (parts.size() != 8) throw DataError(r.where() + "expected 8 fields, got " + std::to_string(parts.size()));
    double v[8];
    for (int k = 0; k < 8; ++k) v[k] = parse_double(parts[k], r.where());
    GridSample s;
    s.p = Vec3(v[0], v[1], v[2]);
    s.b = Vec3(v[3], v[4], v[5]);
    s.norm = v[6];
    s.std = v[7];
    s.i = static_cast<int>(std::lround((s.p.x() - g.x0) / g.step));
    s.j = static_cast<int>(std::lround((s.p.y() - g.y0) / g.step));
    if (s.i < 0 || s.i >= g.nx || s.j < 0 || s.j >= g.ny) throw DataError(r.where() + "sample outside the lattice");
    g.rows.push_back(s);
  }
  return g;
}

inline MapGrid read_grid(const std::string& path) {
  auto in = open_in(path);
  return read_grid(in, path);
}

// ---------------------------------------------------------------------------
// Heatmaps (binary PPM)

enum class Channel { norm, x, y, z };

inline Channel channel_from_string(std::string_view s) {
  if (s == "norm") return Channel::norm;
  if (s == "x") return Channel::x;
  if (s == "y") return Channel::y;
  if (s == "z") return Channel::z;
  throw DataError("unknown channel '" + std::string(s) + "' (norm, x, y or z)");
}

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

// Blue-to-yellow perceptually ordered ramp, ten stops.
inline constexpr std::array<Rgb, 10> kRamp = {{{53, 42, 135},
                                                {15, 92, 221},
                                                {18, 125, 216},
                                                {7, 156, 207},
                                                {21, 177, 180},
                                                {89, 189, 140},
                                                {165, 190, 107},
                                                {225, 185, 82},
                                                {252, 206, 46},
                                                {249, 251, 14}}};
inline constexpr Rgb kBackground{255, 255, 255};

inline Rgb ramp_color(double t) {
  t = std::clamp(t, 0.0, 1.0);
  const double pos = t * (kRamp.size() - 1);
  const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(pos), kRamp.size() - 2);
  const double f = pos - static_cast<double>(k);
  auto mix = [f](std::uint8_t a, std::uint8_t b) {
    return static_cast<std::uint8_t>(std::lround(a + f * (static_cast<double>(b) - a)));
  };
  return {mix(kRamp[k].r, kRamp[k + 1].r), mix(kRamp[k].g, kRamp[k + 1].g), mix(kRamp[k].b, kRamp[k + 1].b)};
}

/// One pixel per lattice point, top row = largest y. Points outside every
/// tile are background. With `alpha`, each pixel is blended towards the
/// background by its standard deviation normalised over the grid. A grid
/// whose channel is constant maps to the top colour.
inline std::string render_heatmap(const MapGrid& g, Channel channel, bool alpha) {
  if (g.rows.empty() || g.nx <= 0 || g.ny <= 0) throw DataError("render_heatmap: empty grid");
  auto value = [channel](const GridSample& s) {
    switch (channel) {
      case Channel::norm: return s.norm;
      case Channel::x: return s.b.x();
      case Channel::y: return s.b.y();
      case Channel::z: return s.b.z();
    }
    return s.norm;
  };
  double lo = std::numeric_limits<double>::infinity(), hi = -lo, slo = lo, shi = -lo;
  for (const auto& s : g.rows) {
    lo = std::min(lo, value(s));
    hi = std::max(hi, value(s));
    slo = std::min(slo, s.std);
    shi = std::max(shi, s.std);
  }
  std::vector<Rgb> px(static_cast<std::size_t>(g.nx) * g.ny, kBackground);
  for (const auto& s : g.rows) {
    const double t = hi > lo ? (value(s) - lo) / (hi - lo) : 1.0;
    Rgb c = ramp_color(t);
    if (alpha && shi > slo) {
      const double a = (s.std - slo) / (shi - slo);
      auto blend = [a](std::uint8_t v, std::uint8_t bg) {
        return static_cast<std::uint8_t>(std::lround(v + a * (static_cast<double>(bg) - v)));
      };
      c = {blend(c.r, kBackground.r), blend(c.g, kBackground.g), blend(c.b, kBackground.b)};
    }
    const int row = g.ny - 1 - s.j;
    px[static_cast<std::size_t>(row) * g.nx + s.i] = c;
  }
  std::string out = "P6\n" + std::to_string(g.nx) + " " + std::to_string(g.ny) + "\n255\n";
  out.reserve(out.size() + px.size() * 3);
  for (const auto& c : px) {
    out.push_back(static_cast<char>(c.r));
    out.push_back(static_cast<char>(c.g));
    out.push_back(static_cast<char>(c.b));
  }
  return out;
}

inline void write_heatmap(const std::string& path, const MapGrid& g, Channel channel, bool alpha) {
  auto out = open_out(path, true);
  const std::string img = render_heatmap(g, channel, alpha);
  out.write(img.data(), static_cast<std::streamsize>(img.size()));
}

// ---------------------------------------------------------------------------
// Run export

inline constexpr const char* kEstimateHeader = "t_s,px,py,pz,qw,qx,qy,qz,tile_a,tile_b,tile_k,ess,resampled";

inline void write_estimates(std::ostream& out, const std::vector<EstimateRecord>& est) {
  out << version_line("estimates") << '\n' << kEstimateHeader << '\n';
  for (const auto& e : est) {
    const Pose& p = e.pose;
    out << fmt(e.t) << ',' << fmt(p.p.x()) << ',' << fmt(p.p.y()) << ',' << fmt(p.p.z()) << ',' << fmt(p.q.w) << ','
        << fmt(p.q.x) << ',' << fmt(p.q.y) << ',' << fmt(p.q.z) << ',' << e.tile.a << ',' << e.tile.b << ','
        << e.tile.k << ',' << fmt(e.ess) << ',' << (e.resampled ? 1 : 0) << '\n';
  }
}

inline void write_estimates(const std::string& path, const std::vector<EstimateRecord>& est) {
  auto out = open_out(path);
  write_estimates(out, est);
}

inline std::vector<EstimateRecord> read_estimates(std::istream& in, const std::string& source = "<stream>") {
  LineReader r(in, source);
  expect_version(r, "estimates");
  std::vector<EstimateRecord> est;
  std::string line;
  bool have_header = false;
  while (r.next(line)) {
    const std::string_view sv = trim(line);
    if (sv.empty() || sv.front() == '#') continue;
    if (!have_header) {
      if (sv != kEstimateHeader) throw DataError(r.where() + "unexpected column header");
      have_header = true;
      continue;
    }
    const auto parts = split(sv);
    if (parts.size() != 13) throw DataError(r.where() + "expected 13 fields, got " + std::to_string(parts.size()));
    EstimateRecord e;
    e.t = parse_double(parts[0], r.where());
    e.pose.p = Vec3(parse_double(parts[1], r.where()), parse_double(parts[2], r.where()), parse_double(parts[3], r.where()));
    e.pose.q = {parse_double(parts[4], r.where()), parse_double(parts[5], r.where()), parse_double(parts[6], r.where()),
                parse_double(parts[7], r.where())};
    e.tile = {static_cast<std::int32_t>(parse_long(parts[8], r.where())),
              static_cast<std::int32_t>(parse_long(parts[9], r.where())),
              static_cast<std::int32_t>(parse_long(parts[10], r.where()))};
    e.ess = parse_double(parts[11], r.where());
    e.resampled = parse_long(parts[12], r.where()) != 0;
    est.push_back(e);
  }
  if (!have_header) throw DataError(source + ": missing column header");
  return est;
}

inline std::vector<EstimateRecord> read_estimates(const std::string& path) {
  auto in = open_in(path);
  return read_estimates(in, path);
}

struct RunSummary {
  RunDiagnostics diagnostics;
  int particles = 0;
  int basis_size = 0;
  double tile_volume = 0.0;
  std::optional<double> final_error;  // m, against the truth sidecar
};

inline RunSummary make_summary(const RunDiagnostics& d, const SlamConfig& cfg,
                               const std::vector<EstimateRecord>& est,
                               const std::vector<TimedPose>* truth = nullptr) {
  RunSummary s;
  s.diagnostics = d;
  s.particles = cfg.num_particles;
  s.basis_size = cfg.basis_size;
  s.tile_volume = cfg.grid.tile_volume();
  if (truth && !est.empty() && truth->size() >= est.size())
    s.final_error = (est.back().pose.p - (*truth)[est.size() - 1].pose.p).norm();
  return s;
}

/// Plain "key: value" lines.
inline void write_summary(std::ostream& out, const RunSummary& s) {
  const auto& d = s.diagnostics;
  out << version_line("summary") << '\n';
  out << "status: " << (d.completed ? "complete" : "incomplete") << '\n';
  if (!d.error.empty()) out << "reason: " << d.error << '\n';
  out << "steps: " << d.steps << '\n';
  out << "runtime_s: " << fmt_fixed(d.runtime_s, 3) << '\n';
  out << "particles: " << s.particles << '\n';
  out << "basis_size: " << s.basis_size << '\n';
  out << "tile_volume_m3: " << fmt_fixed(s.tile_volume, 1) << '\n';
  out << "tiles_best_particle: " << d.best_tiles << '\n';
  out << "tiles_all_particles: " << d.total_tiles << '\n';
  out << "tiles_created: " << d.tiles_created << '\n';
  out << "map_entries: " << fmt_fixed(d.map_entries, 0) << '\n';
  out << "map_entries_physical: " << fmt_fixed(d.physical_entries, 0) << '\n';
  out << "memory_estimate_entries: " << fmt_fixed(d.memory_estimate, 0) << '\n';
  out << "resample_events: " << d.resample_events << '\n';
  out << "dropped_pending: " << d.dropped_pending << '\n';
  out << "min_ess: " << fmt_fixed(d.min_ess, 3) << '\n';
  out << "mean_ess: " << fmt_fixed(d.mean_ess, 3) << '\n';
  if (s.final_error) out << "final_error_m: " << fmt(*s.final_error) << '\n';
}

inline void write_summary(const std::string& path, const RunSummary& s) {
  auto out = open_out(path);
  write_summary(out, s);
}

/// Parses a summary file into key/value pairs.
inline std::map<std::string, std::string> read_summary(const std::string& path) {
  auto in = open_in(path);
  LineReader r(in, path);
  expect_version(r, "summary");
  std::map<std::string, std::string> kv;
  std::string line;
  while (r.next(line)) {
    const auto pos = line.find(": ");
    if (pos == std::string::npos) continue;
    kv[line.substr(0, pos)] = line.substr(pos + 2);
  }
  return kv;
}

/// Writes estimates.csv and summary.txt into `dir`.
inline void export_run(const std::string& dir, const std::vector<EstimateRecord>& est, const RunSummary& s) {
  std::filesystem::create_directories(dir);
  write_estimates((std::filesystem::path(dir) / "estimates.csv").string(), est);
  write_summary((std::filesystem::path(dir) / "summary.txt").string(), s);
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalReport {
  std::size_t steps = 0;
  double rmse_slam = 0.0;
  double rmse_dead_reckoning = 0.0;
  double final_slam = 0.0;
  double final_dead_reckoning = 0.0;
  double final_ratio = 0.0;  // final_slam / final_dead_reckoning (inf if the latter is 0 and the former is not)
  double rmse_ratio = 0.0;
};

/// Compares estimates and the dead-reckoned log against truth. Both start at
/// the known start pose; no other alignment is applied.
inline EvalReport evaluate(const std::vector<EstimateRecord>& est, const LogData& truth) {
  if (est.size() != truth.records.size() || truth.truth.size() != truth.records.size())
    throw DataError("evaluate: estimates have " + std::to_string(est.size()) + " rows but the truth sidecar has " +
                    std::to_string(truth.records.size()));
  EvalReport r;
  r.steps = est.size();
  if (est.empty()) return r;
  const auto dr = dead_reckon(truth.records, truth.truth.front().pose);
  double s2 = 0.0, d2 = 0.0;
  for (std::size_t k = 0; k < est.size(); ++k) {
    s2 += (est[k].pose.p - truth.truth[k].pose.p).squaredNorm();
    d2 += (dr[k].p - truth.truth[k].pose.p).squaredNorm();
  }
  const double n = static_cast<double>(est.size());
  r.rmse_slam = std::sqrt(s2 / n);
  r.rmse_dead_reckoning = std::sqrt(d2 / n);
  r.final_slam = (est.back().pose.p - truth.truth.back().pose.p).norm();
  r.final_dead_reckoning = (dr[est.size() - 1].p - truth.truth.back().pose.p).norm();
  auto ratio = [](double a, double b) {
    if (b > 0.0) return a / b;
    return a > 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
  };
  r.final_ratio = ratio(r.final_slam, r.final_dead_reckoning);
  r.rmse_ratio = ratio(r.rmse_slam, r.rmse_dead_reckoning);
  return r;
}

inline void write_eval_report(std::ostream& out, const EvalReport& r) {
  out << "steps: " << r.steps << '\n';
  out << "rmse_slam_m: " << fmt(r.rmse_slam) << '\n';
  out << "rmse_dead_reckoning_m: " << fmt(r.rmse_dead_reckoning) << '\n';
  out << "rmse_ratio: " << fmt(r.rmse_ratio) << '\n';
  out << "final_error_slam_m: " << fmt(r.final_slam) << '\n';
  out << "final_error_dead_reckoning_m: " << fmt(r.final_dead_reckoning) << '\n';
  out << "final_error_ratio: " << fmt(r.final_ratio) << '\n';
}

}  // namespace magslam::io
