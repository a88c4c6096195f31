// preb-sim: drives periodically-refreshed-bath experiments from TOML configs.
//
//   run          evolve one configuration; writes timeline.csv and meta.json
//   certify      double the refresh period until traces agree; convergence.json
//   reconstruct  merge offset runs into one densely sampled timeline
//   compare      check a timeline's tail against a steady-state reference
//   chainmap     dump the bath chain coefficients as JSON
//   memory       dump the bath correlation functions and the memory time
//
// Exit codes: 0 success, 1 configuration error, 2 backend error,
// 3 comparison failure.  The PREB_SIM_THREADS environment variable caps the
// worker pool used by reconstruct.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "preb/config.hpp"
#include "preb/io.hpp"
#include "preb/negf.hpp"
#include "preb/version.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitBackend = 2;
constexpr int kExitComparison = 3;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string format_compact(double v) {
  std::ostringstream out;
  out << v;
  return out.str();
}

preb::ThermalParams thermal_params(const preb::BathConfig& b) {
  return preb::ThermalParams{b.beta, b.mu, preb::Statistics::Fermi};
}

// --- run ----------------------------------------------------------------------------

int cmd_run(const std::string& config_path, bool force) {
  namespace fs = std::filesystem;
  preb::ExperimentConfig cfg = preb::parse_config(config_path);
  if (cfg.run.mode == "preb" && cfg.run.t1.size() > 1)
    throw preb::ConfigError(
        "run: the config lists several t1 offsets; use the reconstruct subcommand");
  const fs::path dir = cfg.output.directory;
  preb::prepare_output_dir(dir, force);

  preb::RunMeta meta;
  meta.backend = cfg.run.backend;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    std::unique_ptr<preb::Backend> backend = preb::make_backend(cfg);
    preb::Timeline tl;
    if (cfg.run.mode == "continuous")
      tl = preb::run_continuous(*backend, cfg.run.t_max, cfg.run.dt * cfg.output.stride);
    else
      tl = preb::run_preb(*backend, preb::schedule_from(cfg, cfg.run.t1.front()));
    meta.wall_seconds = seconds_since(t0);
    if (const auto* tb = dynamic_cast<const preb::TebdBackend*>(backend.get())) {
      meta.truncation_weight = tb->truncation_weight();
      meta.max_chi = tb->engine().log().max_chi;
    }
    preb::write_timeline_csv(dir / "timeline.csv", tl, cfg.run.backend == "tebd");
    preb::write_meta_json(dir / "meta.json", cfg, meta);
    std::cout << "wrote " << (dir / "timeline.csv").string() << " (" << tl.size()
              << " samples)\n";
    std::cout << "wrote " << (dir / "meta.json").string() << "\n";
    return kExitOk;
  } catch (const std::exception& e) {
    meta.wall_seconds = seconds_since(t0);
    meta.error = e.what();
    preb::write_meta_json(dir / "meta.json", cfg, meta);
    std::cerr << "error: " << e.what() << " (recorded in " << (dir / "meta.json").string()
              << ")\n";
    return kExitBackend;
  }
}

// --- certify ------------------------------------------------------------------------

int cmd_certify(const std::string& config_path, double tau0, bool tau0_given, double tolerance,
                int max_doublings, bool force) {
  namespace fs = std::filesystem;
  preb::ExperimentConfig cfg = preb::parse_config(config_path);
  if (tau0_given && !(tau0 > 0.0)) throw preb::ConfigError("certify: --tau0 must be > 0");
  if (!tau0_given) tau0 = cfg.run.tau;
  if (!(tau0 > 0.0))
    throw preb::ConfigError("certify: pass --tau0 or set run.tau in the config");
  const double horizon = cfg.run.t_max > 0.0 ? cfg.run.t_max : cfg.run.tau * cfg.run.n_steps;
  if (!(horizon > 0.0))
    throw preb::ConfigError(
        "certify: set run.t_max (or run.tau with run.n_steps) to fix the horizon");
  if (cfg.run.backend == "tebd" && !preb::detail::is_multiple(tau0, cfg.run.dt))
    throw preb::ConfigError("certify: tau0 must be a multiple of run.dt for the tebd backend");
  const fs::path dir = cfg.output.directory;
  preb::prepare_output_dir(dir, force);

  // The memory time bounds the refresh period from below; a scan failure is
  // reported but does not block certification.
  double tau_M = 0.0;
  std::vector<std::string> scan_warnings;
  for (int i = 0; i < 2; ++i) {
    const preb::BathConfig& b = cfg.bath[static_cast<std::size_t>(i)];
    try {
      tau_M = std::max(tau_M, preb::memory_time(preb::spectral_density(b), thermal_params(b),
                                                cfg.run.threshold, 50.0));
    } catch (const preb::MemoryHorizonError&) {
      scan_warnings.push_back("bath[" + std::to_string(i) +
                              "]: correlations have not decayed below the threshold by t = 50; "
                              "memory-time check skipped");
    }
  }

  // Each rung of the ladder sizes its baths for its own refresh period.
  const preb::TauBackendFactory make = [&cfg](double tau) {
    preb::ExperimentConfig rung = cfg;
    rung.run.mode = "preb";
    rung.run.tau = tau;
    return preb::make_backend(rung);
  };
  preb::ConvergenceReport rep =
      preb::certify_convergence(make, tau0, horizon, tolerance, max_doublings, tau_M);
  rep.warnings.insert(rep.warnings.end(), scan_warnings.begin(), scan_warnings.end());

  preb::write_convergence_json(dir / "convergence.json", rep);
  for (std::size_t k = 0; k < rep.traces.size(); ++k) {
    const fs::path trace = dir / ("trace_tau_" + format_compact(rep.taus[k]) + ".csv");
    preb::write_timeline_csv(trace, rep.traces[k], false);
  }
  std::cout << "wrote " << (dir / "convergence.json").string() << " (" << rep.traces.size()
            << " traces)\n";
  for (const std::string& w : rep.warnings) std::cerr << "warning: " << w << "\n";
  if (rep.converged)
    std::cout << "certified tau = " << rep.certified_tau << " against tau = "
              << rep.certified_against << " (max deviation " << rep.certified_deviation
              << " < " << rep.tolerance << ")\n";
  else
    std::cout << "not converged within " << max_doublings << " doublings (tolerance "
              << rep.tolerance << "); see convergence.json\n";
  return kExitOk;  // non-convergence is a verdict, recorded in the artifact
}

// --- reconstruct ----------------------------------------------------------------------

int cmd_reconstruct(const std::string& config_path, double tolerance, bool force) {
  namespace fs = std::filesystem;
  preb::ExperimentConfig cfg = preb::parse_config(config_path);
  if (cfg.run.mode != "preb")
    throw preb::ConfigError("reconstruct: run.mode must be preb");
  const fs::path dir = cfg.output.directory;
  preb::prepare_output_dir(dir, force);

  preb::RunMeta meta;
  meta.backend = cfg.run.backend;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    const preb::Timeline tl = preb::reconstruct_timeline(
        preb::backend_factory(cfg), preb::schedule_from(cfg, 0.0), cfg.run.t1, tolerance);
    meta.wall_seconds = seconds_since(t0);
    preb::write_timeline_csv(dir / "timeline.csv", tl, cfg.run.backend == "tebd");
    preb::write_meta_json(dir / "meta.json", cfg, meta);
    std::cout << "merged " << cfg.run.t1.size() << " offset runs into "
              << (dir / "timeline.csv").string() << " (" << tl.size() << " samples)\n";
    return kExitOk;
  } catch (const preb::ReconstructionMismatch& e) {
    meta.wall_seconds = seconds_since(t0);
    meta.error = e.what();
    preb::write_meta_json(dir / "meta.json", cfg, meta);
    std::cerr << "error: " << e.what() << "\n";
    return kExitComparison;
  } catch (const std::exception& e) {
    meta.wall_seconds = seconds_since(t0);
    meta.error = e.what();
    preb::write_meta_json(dir / "meta.json", cfg, meta);
    std::cerr << "error: " << e.what() << " (recorded in " << (dir / "meta.json").string()
              << ")\n";
    return kExitBackend;
  }
}

// --- compare --------------------------------------------------------------------------

int cmd_compare(const std::string& ref_path, const std::string& timeline_path, int tail,
                double tolerance, const std::string& emit_ness, double window,
                bool window_given, double eps, bool eps_given) {
  preb::Observables ref;
  if (ref_path.ends_with(".json")) {
    ref = preb::read_ness_json(ref_path);
  } else {
    const preb::ExperimentConfig cfg = preb::parse_config(ref_path);
    if (cfg.system.V != 0.0)
      throw preb::ConfigError("compare: the frequency-integral reference requires V = 0");
    ref = preb::observables(preb::ness_correlations(
        preb::system_single_particle(preb::system_spec(cfg)),
        preb::spectral_density(cfg.bath[0]), preb::spectral_density(cfg.bath[1]),
        thermal_params(cfg.bath[0]), thermal_params(cfg.bath[1])));
  }
  if (!emit_ness.empty()) {
    preb::write_ness_json(emit_ness, ref);
    std::cout << "wrote " << emit_ness << "\n";
  }

  const preb::Timeline tl = preb::read_timeline_csv(timeline_path);
  if (tail < 1) throw preb::ConfigError("compare: --tail must be >= 1");
  const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(tail), tl.size());
  preb::Observables avg;
  avg.n.assign(tl.back().obs.n.size(), 0.0);
  avg.I.assign(tl.back().obs.I.size(), 0.0);
  for (std::size_t i = tl.size() - k; i < tl.size(); ++i) {
    for (std::size_t l = 0; l < avg.n.size(); ++l) avg.n[l] += tl[i].obs.n[l];
    for (std::size_t l = 0; l < avg.I.size(); ++l) avg.I[l] += tl[i].obs.I[l];
  }
  for (double& v : avg.n) v /= static_cast<double>(k);
  for (double& v : avg.I) v /= static_cast<double>(k);
  if (avg.n.size() != ref.n.size() || avg.I.size() != ref.I.size())
    throw preb::ConfigError("compare: the reference describes " + std::to_string(ref.n.size()) +
                            " sites but the timeline has " + std::to_string(avg.n.size()));

  double dev_n = 0.0, dev_I = 0.0;
  for (std::size_t l = 0; l < avg.n.size(); ++l)
    dev_n = std::max(dev_n, std::abs(avg.n[l] - ref.n[l]));
  for (std::size_t l = 0; l < avg.I.size(); ++l)
    dev_I = std::max(dev_I, std::abs(avg.I[l] - ref.I[l]));
  const double dev = std::max(dev_n, dev_I);

  double mean_I = 0.0;
  for (double v : avg.I) mean_I += v;
  if (!avg.I.empty()) mean_I /= static_cast<double>(avg.I.size());

  const double span = tl.back().t - tl.front().t;
  if (!window_given) window = span / 4.0;
  if (!eps_given) eps = tolerance;

  std::cout << "tail of " << k << " samples from t = " << tl[tl.size() - k].t << " to t = "
            << tl.back().t << "\n";
  std::cout << "tail-averaged current " << mean_I << "; max |dn| = " << dev_n
            << ", max |dI| = " << dev_I << " against the reference\n";
  const std::optional<double> t_ss = preb::ness_detector(tl, window, eps);
  if (t_ss)
    std::cout << "steady state detected at t = " << *t_ss << " (window " << window << ", eps "
              << eps << ")\n";
  else
    std::cout << "no steady state within the trailing window (window " << window << ", eps "
              << eps << ")\n";
  if (dev <= tolerance) {
    std::cout << "PASS: max deviation " << dev << " <= tolerance " << tolerance << "\n";
    return kExitOk;
  }
  std::cerr << "FAIL: max deviation " << dev << " exceeds tolerance " << tolerance << "\n";
  return kExitComparison;
}

// --- chainmap -------------------------------------------------------------------------

int cmd_chainmap(const std::string& config_path, const std::string& out_path) {
  const preb::ExperimentConfig cfg = preb::parse_config(config_path);
  nlohmann::json j;
  j["version"] = preb::kVersion;
  j["bath"] = nlohmann::json::array();
  for (int i = 0; i < 2; ++i) {
    const preb::BathConfig& b = cfg.bath[static_cast<std::size_t>(i)];
    const int modes = preb::bath_modes(cfg, i);
    const preb::ChainBath chain =
        preb::chain_coefficients(preb::spectral_density(b), modes, thermal_params(b));
    nlohmann::json jb;
    jb["modes"] = modes;
    jb["density"] = preb::density_to_json(preb::spectral_density(b));
    jb["chain"] = chain;
    j["bath"].push_back(std::move(jb));
  }
  if (out_path.empty()) {
    std::cout << j.dump(2) << "\n";
  } else {
    std::ofstream out(out_path);
    if (!out) throw preb::IoError("io: cannot write '" + out_path + "'");
    out << j.dump(2) << "\n";
    std::cout << "wrote " << out_path << "\n";
  }
  return kExitOk;
}

// --- memory ---------------------------------------------------------------------------

int cmd_memory(const std::string& config_path, const std::string& out_path, double t_max,
               double dt) {
  if (!(t_max > 0.0)) throw preb::ConfigError("memory: --t-max must be > 0");
  if (!(dt > 0.0)) throw preb::ConfigError("memory: --dt must be > 0");
  const preb::ExperimentConfig cfg = preb::parse_config(config_path);
  nlohmann::json j;
  j["version"] = preb::kVersion;
  j["threshold"] = cfg.run.threshold;
  j["bath"] = nlohmann::json::array();
  for (int i = 0; i < 2; ++i) {
    const preb::BathConfig& b = cfg.bath[static_cast<std::size_t>(i)];
    const preb::SpectralDensity J = preb::spectral_density(b);
    const preb::ThermalParams tp = thermal_params(b);
    nlohmann::json jb;
    try {
      jb["tau_M"] = preb::memory_time(J, tp, cfg.run.threshold, t_max);
    } catch (const preb::MemoryHorizonError&) {
      jb["tau_M"] = nullptr;
      jb["warning"] = "correlations have not decayed below the threshold by t = " +
                      format_compact(t_max);
    }
    std::vector<double> ts, a_re, a_im, b_re, b_im;
    for (double t = 0.0; t <= t_max + 1e-12; t += dt) {
      const preb::BathCorrelations c = preb::bath_correlations(J, tp, t);
      ts.push_back(t);
      a_re.push_back(c.a.real());
      a_im.push_back(c.a.imag());
      b_re.push_back(c.b.real());
      b_im.push_back(c.b.imag());
    }
    jb["t"] = ts;
    jb["a_re"] = a_re;
    jb["a_im"] = a_im;
    jb["b_re"] = b_re;
    jb["b_im"] = b_im;
    j["bath"].push_back(std::move(jb));
  }
  if (out_path.empty()) {
    std::cout << j.dump(2) << "\n";
  } else {
    std::ofstream out(out_path);
    if (!out) throw preb::IoError("io: cannot write '" + out_path + "'");
    out << j.dump(2) << "\n";
    std::cout << "wrote " << out_path << "\n";
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"periodically refreshed bath simulator for fermionic transport chains"};
  app.set_version_flag("--version", std::string(preb::kVersion));
  app.require_subcommand(1);

  std::string config_path, ref_path, timeline_path, emit_ness, out_path;
  bool force = false;
  double tau0 = 0.0, tolerance = 1e-2, window = 0.0, eps = 0.0;
  double mem_t_max = 12.0, mem_dt = 0.05;
  int max_doublings = 3, tail = 5;

  CLI::App* run = app.add_subcommand("run", "evolve one configuration and write the timeline");
  run->add_option("config", config_path, "experiment config (TOML)")->required();
  run->add_flag("--force", force, "overwrite existing results");

  CLI::App* certify =
      app.add_subcommand("certify", "double the refresh period until traces agree");
  certify->add_option("config", config_path, "experiment config (TOML)")->required();
  CLI::Option* tau0_opt =
      certify->add_option("--tau0", tau0, "starting refresh period (default: run.tau)");
  certify->add_option("--tol", tolerance, "convergence tolerance")->capture_default_str();
  certify->add_option("--max-doublings", max_doublings, "ladder length")->capture_default_str();
  certify->add_flag("--force", force, "overwrite existing results");

  CLI::App* reconstruct =
      app.add_subcommand("reconstruct", "merge offset runs into one dense timeline");
  reconstruct->add_option("config", config_path, "experiment config (TOML)")->required();
  reconstruct->add_option("--tol", tolerance, "sample agreement tolerance")
      ->capture_default_str();
  reconstruct->add_flag("--force", force, "overwrite existing results");

  CLI::App* compare =
      app.add_subcommand("compare", "check a timeline's tail against a steady-state reference");
  compare->add_option("reference", ref_path, "ness.json or a config to integrate")->required();
  compare->add_option("timeline", timeline_path, "timeline.csv to check")->required();
  compare->add_option("--tail", tail, "samples to average")->capture_default_str();
  compare->add_option("--tol", tolerance, "pass/fail tolerance")->capture_default_str();
  compare->add_option("--emit-ness", emit_ness, "also write the reference observables (JSON)");
  CLI::Option* window_opt =
      compare->add_option("--window", window, "steady-state window (default: a quarter span)");
  CLI::Option* eps_opt =
      compare->add_option("--eps", eps, "steady-state threshold (default: --tol)");

  CLI::App* chainmap = app.add_subcommand("chainmap", "dump the bath chain coefficients");
  chainmap->add_option("config", config_path, "experiment config (TOML)")->required();
  chainmap->add_option("--out", out_path, "write JSON here instead of stdout");

  CLI::App* memory =
      app.add_subcommand("memory", "dump the bath correlation functions and memory time");
  memory->add_option("config", config_path, "experiment config (TOML)")->required();
  memory->add_option("--out", out_path, "write JSON here instead of stdout");
  memory->add_option("--t-max", mem_t_max, "scan horizon")->capture_default_str();
  memory->add_option("--dt", mem_dt, "dump grid spacing")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (run->parsed()) return cmd_run(config_path, force);
    if (certify->parsed())
      return cmd_certify(config_path, tau0, tau0_opt->count() > 0, tolerance, max_doublings,
                         force);
    if (reconstruct->parsed()) return cmd_reconstruct(config_path, tolerance, force);
    if (compare->parsed())
      return cmd_compare(ref_path, timeline_path, tail, tolerance, emit_ness, window,
                         window_opt->count() > 0, eps, eps_opt->count() > 0);
    if (chainmap->parsed()) return cmd_chainmap(config_path, out_path);
    if (memory->parsed()) return cmd_memory(config_path, out_path, mem_t_max, mem_dt);
  } catch (const preb::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const preb::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const preb::ReconstructionMismatch& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitComparison;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitBackend;
  }
  return kExitOk;
}
