#pragma once

// Command-line front end. `run_cli` parses arguments and dispatches to one
// subcommand; it writes to the given streams and returns the process exit
// code, so tests can drive it in-process.

#include <atomic>
#include <filesystem>
#include <iomanip>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "magslam/io.hpp"

namespace magslam::cli {

enum ExitCode : int {
  kOk = 0,
  kUsage = 2,
  kData = 3,
  kNumerical = 4,
  kInterrupted = 130,
};

/// Flags shared by every subcommand. Unset optionals leave the configuration
/// untouched.
struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string log;
  std::string out_dir;
  std::optional<double> snapshot_every;
  std::optional<int> particles;
  std::string basis_cache;
};

inline void add_common(CLI::App& sub, CommonFlags& f) {
  sub.add_option("--config", f.config, "JSON run configuration")->check(CLI::ExistingFile);
  sub.add_option("--seed", f.seed, "random seed (overrides the configuration)");
  sub.add_option("--log", f.log, "sensor log CSV");
  sub.add_option("--out-dir", f.out_dir, "output directory");
  sub.add_option("--snapshot-every", f.snapshot_every, "seconds of log time between map snapshots (0 = off)");
  sub.add_option("--particles", f.particles, "number of particles");
  sub.add_option("--basis-cache", f.basis_cache, "basis cache file or directory");
}

inline io::RunConfig resolve_config(const CommonFlags& f) {
  io::RunConfig c = f.config.empty() ? io::RunConfig{} : io::load_config(f.config);
  if (f.seed) c.slam.rng_seed = *f.seed;
  if (f.particles) c.slam.num_particles = *f.particles;
  if (!f.log.empty()) c.log_path = f.log;
  if (!f.out_dir.empty()) c.out_dir = f.out_dir;
  if (f.snapshot_every) c.output.snapshot_every = *f.snapshot_every;
  if (!f.basis_cache.empty()) c.basis_cache = f.basis_cache;
  c.validate();
  return c;
}

/// A configured cache path that names a directory (or is empty) gets the
/// key-derived file name appended.
inline std::string basis_cache_path(const io::RunConfig& c) {
  namespace fs = std::filesystem;
  const std::string name = io::basis_cache_name(c.basis_spec());
  if (c.basis_cache.empty()) return name;
  const fs::path p(c.basis_cache);
  if (fs::is_directory(p) || c.basis_cache.back() == '/') return (p / name).string();
  return c.basis_cache;
}

inline std::string out_path(const io::RunConfig& c, const std::string& file) {
  return (std::filesystem::path(c.out_dir) / file).string();
}

/// First line of a text file, used to tell a log from a truth sidecar.
inline std::string first_line(const std::string& path) {
  auto in = io::open_in(path);
  std::string line;
  std::getline(in, line);
  return line;
}

inline void print_eigenvalues(std::ostream& out, const Basis3D& basis) {
  const auto& ev = basis.hex().eigenvalues();
  out << "first hexagon eigenvalues (1/m^2):";
  for (int i = 0; i < std::min<int>(10, static_cast<int>(ev.size())); ++i) out << ' ' << io::fmt_fixed(ev(i), 6);
  out << '\n';
}

inline int cmd_basis(const io::RunConfig& c, std::ostream& out) {
  const BasisSpec spec = c.basis_spec();
  const std::string path = basis_cache_path(c);
  std::shared_ptr<const Basis3D> basis;
  if (std::filesystem::exists(path)) {
    BasisSpec stored;
    try {
      basis = io::read_basis_cache(path, spec, &stored);
      out << "cache hit: " << path << '\n';
    } catch (const CacheMismatch&) {
      out << "cache at " << path << " was built for " << io::basis_cache_name(stored) << "; rebuilding\n";
    }
  }
  if (!basis) {
    HexSolveReport report;
    basis = build_basis(spec, &report);
    io::write_basis_cache(path, spec, *basis);
    out << "solved " << basis->hex().count() << " hexagon eigenpairs in " << io::fmt_fixed(report.seconds, 2) << " s\n";
    out << "wrote " << path << '\n';
  }
  print_eigenvalues(out, *basis);
  out << "basis functions: " << basis->size() << '\n';
  return kOk;
}

inline int cmd_simulate(io::RunConfig c, const std::string& scenario, std::ostream& out) {
  c.simulate.trajectory.kind = trajectory_kind_from_string(scenario);
  c.simulate.trajectory.validate();
  const Scenario sc = simulate_scenario(c.simulate, c.slam.rng_seed);
  const std::string log_path = c.log_path.empty() ? out_path(c, "log.csv") : c.log_path;
  io::write_log(log_path, sc.log.records);
  io::write_truth(out_path(c, "truth.csv"), sc.log.records, sc.log.truth);
  out << "scenario: " << scenario << ", seed " << c.slam.rng_seed << '\n';
  out << "records: " << sc.log.records.size() << '\n';
  out << "dipoles: " << sc.world.dipoles.size() << '\n';
  out << "wrote " << log_path << " and " << out_path(c, "truth.csv") << '\n';
  return kOk;
}

inline int cmd_slam(const io::RunConfig& c, const std::string& truth_path, const std::atomic<bool>* cancel,
                    std::ostream& out, std::ostream& err) {
  if (c.log_path.empty()) {
    err << "slam: no log given (use --log or paths.log)\n";
    return kUsage;
  }
  const bool log_is_truth = first_line(c.log_path).rfind("# magslam-truth", 0) == 0;
  const io::LogData data = log_is_truth ? io::read_truth(c.log_path) : io::read_log(c.log_path);
  std::optional<io::LogData> truth;
  if (log_is_truth) truth = data;
  else if (!truth_path.empty()) truth = io::read_truth(truth_path);
  if (data.renormalized > 0) err << "warning: renormalised " << data.renormalized << " dq rows\n";

  const std::string cache = basis_cache_path(c);
  if (!std::filesystem::exists(cache))
    throw CacheMismatch("basis cache '" + cache + "' not found; run the 'basis' command with the same configuration first");
  const auto basis = io::read_basis_cache(cache, c.basis_spec());
  const SlamModel model(c.slam, basis);

  std::filesystem::create_directories(c.out_dir);
  io::write_text(out_path(c, "config.json"), io::config_to_json(c).dump(2) + "\n");
  RunOptions opts;
  opts.cancel = cancel;
  opts.snapshot_every = c.output.snapshot_every;
  opts.on_snapshot = [&](double t, const Particle& p) {
    std::ostringstream name;
    name << "snapshots/map_t" << std::setw(8) << std::setfill('0') << std::fixed << std::setprecision(1) << t << ".csv";
    io::write_map_state(out_path(c, name.str()), p.maps, c.slam);
  };
  const RunResult res = run(data.records, model, opts);

  const std::vector<TimedPose>* truth_poses = truth ? &truth->truth : nullptr;
  const io::RunSummary summary = io::make_summary(res.diagnostics, c.slam, res.estimates, truth_poses);
  io::export_run(c.out_dir, res.estimates, summary);
  io::write_map_state(out_path(c, "map.csv"), res.final_particle.maps, c.slam);

  const auto& d = res.diagnostics;
  out << "steps: " << d.steps << " / " << data.records.size() << '\n';
  out << "tiles (best particle): " << d.best_tiles << '\n';
  out << "resample events: " << d.resample_events << '\n';
  if (summary.final_error) out << "final error: " << io::fmt_fixed(*summary.final_error, 3) << " m\n";
  out << "runtime: " << io::fmt_fixed(d.runtime_s, 2) << " s\n";
  out << "wrote " << c.out_dir << "/{estimates.csv,summary.txt,map.csv}\n";
  if (d.diverged) {
    err << "slam: " << d.error << '\n';
    return kNumerical;
  }
  if (d.interrupted) {
    err << "slam: interrupted; partial results marked incomplete\n";
    return kInterrupted;
  }
  return kOk;
}

struct ExportFlags {
  std::string map;
  std::optional<double> z;
  std::optional<double> step;
  std::string channel = "norm";
  bool alpha = false;
};

inline int cmd_export_map(const io::RunConfig& c, const ExportFlags& f, std::ostream& out) {
  const std::string map_path = f.map.empty() ? out_path(c, "map.csv") : f.map;
  const io::MapState st = io::read_map_state(map_path);
  BasisSpec spec = c.basis_spec();
  if (st.basis_size != spec.basis_size || st.grid.radius != spec.radius || st.grid.half_height != spec.half_height ||
      st.extension != spec.extension)
    throw CacheMismatch("map '" + map_path + "' was built with a different tile geometry or basis size than the configuration");
  const std::string cache = basis_cache_path(c);
  if (!std::filesystem::exists(cache))
    throw CacheMismatch("basis cache '" + cache + "' not found; run the 'basis' command first");
  const auto basis = io::read_basis_cache(cache, spec);
  const io::Channel channel = io::channel_from_string(f.channel);
  const double z = f.z.value_or(c.output.grid_z);
  const double step = f.step.value_or(c.output.grid_step);
  const io::MapGrid grid = io::export_map_grid(st.maps, *basis, st.grid, z, step, c.slam.hyper);
  if (grid.rows.empty()) throw DataError("export-map: no created tile intersects the plane z = " + io::fmt(z));
  io::write_grid(out_path(c, "grid.csv"), grid);
  const std::string img = out_path(c, "heatmap_" + f.channel + ".ppm");
  io::write_heatmap(img, grid, channel, f.alpha);
  out << "grid: " << grid.nx << " x " << grid.ny << " lattice, " << grid.rows.size() << " in-tile samples\n";
  out << "wrote " << out_path(c, "grid.csv") << " and " << img << '\n';
  return kOk;
}

inline int cmd_evaluate(const io::RunConfig& c, const std::string& estimates, const std::string& truth_path,
                        std::ostream& out, std::ostream& err) {
  const std::string truth_file = !truth_path.empty() ? truth_path : c.log_path;
  if (truth_file.empty()) {
    err << "evaluate: no truth sidecar given (use --truth)\n";
    return kUsage;
  }
  const auto est = io::read_estimates(estimates.empty() ? out_path(c, "estimates.csv") : estimates);
  const auto truth = io::read_truth(truth_file);
  const io::EvalReport rep = io::evaluate(est, truth);
  io::write_eval_report(out, rep);
  std::ostringstream text;
  io::write_eval_report(text, rep);
  io::write_text(out_path(c, "evaluation.txt"), text.str());
  return kOk;
}

/// Parses `args` (without the program name) and runs the selected command.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err,
                   const std::atomic<bool>* cancel = nullptr) {
  CLI::App app{"Magnetic-field SLAM with tiled reduced-rank Gaussian-process maps", "magslam"};
  app.require_subcommand(1, 1);

  CommonFlags common;
  std::string scenario, truth, estimates;
  ExportFlags exp;

  auto* basis = app.add_subcommand("basis", "solve and cache the tile eigenbasis");
  add_common(*basis, common);

  auto* simulate = app.add_subcommand("simulate", "synthesise a sensor log and its ground truth");
  add_common(*simulate, common);
  simulate->add_option("--scenario", scenario, "square_loop, stair_3d or random_walk")
      ->required()
      ->check(CLI::IsMember({"square_loop", "stair_3d", "random_walk"}));

  auto* slam = app.add_subcommand("slam", "run the particle filter over a log");
  add_common(*slam, common);
  slam->add_option("--truth", truth, "truth sidecar for the summary's final error");

  auto* exportmap = app.add_subcommand("export-map", "sample a saved map on a plane and render a heatmap");
  add_common(*exportmap, common);
  exportmap->add_option("--map", exp.map, "map state CSV (default <out-dir>/map.csv)");
  exportmap->add_option("--z", exp.z, "height of the sampling plane, m");
  exportmap->add_option("--step", exp.step, "lattice step, m");
  exportmap->add_option("--channel", exp.channel, "norm, x, y or z")->check(CLI::IsMember({"norm", "x", "y", "z"}));
  exportmap->add_flag("--alpha", exp.alpha, "fade pixels by marginal standard deviation");

  auto* evaluate = app.add_subcommand("evaluate", "compare estimates and dead reckoning against truth");
  add_common(*evaluate, common);
  evaluate->add_option("--estimates", estimates, "estimates CSV (default <out-dir>/estimates.csv)");
  evaluate->add_option("--truth", truth, "truth sidecar CSV");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << "run with --help for usage\n";
    return kUsage;
  }

  try {
    const io::RunConfig cfg = resolve_config(common);
    if (basis->parsed()) return cmd_basis(cfg, out);
    if (simulate->parsed()) return cmd_simulate(cfg, scenario, out);
    if (slam->parsed()) return cmd_slam(cfg, truth, cancel, out, err);
    if (exportmap->parsed()) return cmd_export_map(cfg, exp, out);
    if (evaluate->parsed()) return cmd_evaluate(cfg, estimates, truth, out, err);
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << '\n';
    return kNumerical;
  } catch (const DataError& e) {
    err << "error: " << e.what() << '\n';
    return kData;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kData;
  }
  return kUsage;
}

}  // namespace magslam::cli
