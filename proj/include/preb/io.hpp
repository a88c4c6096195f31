// Result persistence: timeline CSVs, run metadata, convergence certificates,
// and steady-state reference files, all diff-friendly plain text.
#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "preb/config.hpp"
#include "preb/driver.hpp"
#include "preb/version.hpp"

namespace preb {

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {

inline std::string csv_number(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

inline std::ofstream open_for_write(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("io: cannot write '" + path.string() + "'");
  return out;
}

}  // namespace detail

// Creates the output directory; refuses to clobber previous results unless
// forced (the artifacts themselves are overwritten atomically by rewrite).
inline void prepare_output_dir(const std::filesystem::path& dir, bool force) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("io: cannot create directory '" + dir.string() + "': " + ec.message());
  if (force) return;
  for (const char* name : {"timeline.csv", "meta.json", "convergence.json", "ness.json"})
    if (fs::exists(dir / name))
      throw IoError("io: '" + (dir / name).string() +
                    "' already exists (pass --force to overwrite)");
}

// --- Timeline CSV -------------------------------------------------------------------

// Columns: t, n_1..n_L, I_1..I_{L-1}, and the engine's cumulative truncation
// weight when the backend truncates (TEBD).
inline void write_timeline_csv(const std::filesystem::path& path, const Timeline& tl,
                               bool with_truncation) {
  if (tl.empty()) throw IoError("io: refusing to write an empty timeline");
  std::ofstream out = detail::open_for_write(path);
  const std::size_t n_sites = tl.front().obs.n.size();
  const std::size_t n_bonds = tl.front().obs.I.size();
  out << "t";
  for (std::size_t l = 1; l <= n_sites; ++l) out << ",n_" << l;
  for (std::size_t l = 1; l <= n_bonds; ++l) out << ",I_" << l;
  if (with_truncation) out << ",trunc_weight";
  out << "\n";
  for (const TimePoint& p : tl) {
    if (p.obs.n.size() != n_sites || p.obs.I.size() != n_bonds)
      throw IoError("io: ragged timeline row at t = " + detail::csv_number(p.t));
    out << detail::csv_number(p.t);
    for (double n : p.obs.n) out << "," << detail::csv_number(n);
    for (double I : p.obs.I) out << "," << detail::csv_number(I);
    if (with_truncation) out << "," << detail::csv_number(p.trunc_weight);
    out << "\n";
  }
}

inline Timeline read_timeline_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("io: cannot open '" + path.string() + "'");
  std::string header;
  if (!std::getline(in, header)) throw IoError("io: '" + path.string() + "' is empty");
  std::size_t n_sites = 0, n_bonds = 0;
  bool with_truncation = false;
  {
    std::stringstream hs(header);
    std::string col;
    bool first = true;
    while (std::getline(hs, col, ',')) {
      if (first) {
        if (col != "t") throw IoError("io: '" + path.string() + "' is not a timeline CSV");
        first = false;
      } else if (col.rfind("n_", 0) == 0) {
        ++n_sites;
      } else if (col.rfind("I_", 0) == 0) {
        ++n_bonds;
      } else if (col == "trunc_weight") {
        with_truncation = true;
      } else {
        throw IoError("io: unexpected column '" + col + "' in '" + path.string() + "'");
      }
    }
    if (first) throw IoError("io: '" + path.string() + "' is not a timeline CSV");
  }
  Timeline tl;
  std::string line;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ls(line);
    std::string cell;
    std::vector<double> row;
    while (std::getline(ls, cell, ',')) {
      char* end = nullptr;
      const double v = std::strtod(cell.c_str(), &end);
      if (end != cell.c_str() + cell.size() || cell.empty())
        throw IoError("io: '" + path.string() + "' line " + std::to_string(lineno) +
                      ": bad number '" + cell + "'");
      row.push_back(v);
    }
    const std::size_t expected = 1 + n_sites + n_bonds + (with_truncation ? 1 : 0);
    if (row.size() != expected)
      throw IoError("io: '" + path.string() + "' line " + std::to_string(lineno) +
                    ": expected " + std::to_string(expected) + " columns, got " +
                    std::to_string(row.size()));
    TimePoint p;
    p.t = row[0];
    p.obs.n.assign(row.begin() + 1, row.begin() + 1 + n_sites);
    p.obs.I.assign(row.begin() + 1 + n_sites, row.begin() + 1 + n_sites + n_bonds);
    if (with_truncation) p.trunc_weight = row.back();
    tl.push_back(std::move(p));
  }
  if (tl.empty()) throw IoError("io: '" + path.string() + "' has no data rows");
  return tl;
}

// --- JSON artifacts -------------------------------------------------------------------

inline nlohmann::json config_to_json(const ExperimentConfig& cfg) {
  nlohmann::json j;
  j["system"] = {{"L_S", cfg.system.L_S},
                 {"V", cfg.system.V},
                 {"h", cfg.system.h},
                 {"pattern", cfg.system.pattern}};
  j["bath"] = nlohmann::json::array();
  for (const BathConfig& b : cfg.bath) {
    nlohmann::json jb{{"kind", b.kind}, {"beta", b.beta}, {"mu", b.mu}};
    if (b.kind == "semicircle") {
      jb["Gamma"] = b.Gamma;
      jb["g_B"] = b.g_B;
    } else {
      jb["gamma_b"] = b.gamma_b;
      jb["omega_c"] = b.omega_c;
    }
    if (b.modes > 0) jb["modes"] = b.modes;
    j["bath"].push_back(jb);
  }
  j["run"] = {{"mode", cfg.run.mode},       {"backend", cfg.run.backend},
              {"tau", cfg.run.tau},         {"n_steps", cfg.run.n_steps},
              {"t1", cfg.run.t1},           {"dt", cfg.run.dt},
              {"chi", cfg.run.chi},         {"svd_cutoff", cfg.run.svd_cutoff},
              {"t_max", cfg.run.t_max},     {"threshold", cfg.run.threshold}};
  j["output"] = {{"directory", cfg.output.directory}, {"stride", cfg.output.stride}};
  return j;
}

struct RunMeta {
  std::string backend;
  double wall_seconds = 0.0;
  double truncation_weight = 0.0;
  int max_chi = 0;
  std::vector<std::string> warnings;
  std::string error;  // non-empty when the run failed
};

inline void write_meta_json(const std::filesystem::path& path, const ExperimentConfig& cfg,
                            const RunMeta& meta) {
  nlohmann::json j;
  j["version"] = kVersion;
  j["config"] = config_to_json(cfg);
  j["backend"] = meta.backend;
  j["wall_seconds"] = meta.wall_seconds;
  j["truncation_weight"] = meta.truncation_weight;
  if (meta.max_chi > 0) j["max_chi"] = meta.max_chi;
  j["warnings"] = meta.warnings;
  j["status"] = meta.error.empty() ? "ok" : "error";
  if (!meta.error.empty()) j["error"] = meta.error;
  detail::open_for_write(path) << j.dump(2) << "\n";
}

inline void write_convergence_json(const std::filesystem::path& path,
                                   const ConvergenceReport& rep) {
  nlohmann::json j;
  j["taus"] = rep.taus;
  j["deviations"] = rep.deviations;
  j["tolerance"] = rep.tolerance;
  j["converged"] = rep.converged;
  if (rep.converged) {
    j["certified_tau"] = rep.certified_tau;
    j["certified_against"] = rep.certified_against;
    j["certified_deviation"] = rep.certified_deviation;
  }
  j["warnings"] = rep.warnings;
  detail::open_for_write(path) << j.dump(2) << "\n";
}

// Steady-state reference: the frequency-integral observables, written once
// and consumed by `compare`.
inline void write_ness_json(const std::filesystem::path& path, const Observables& obs) {
  nlohmann::json j;
  j["n"] = obs.n;
  j["I"] = obs.I;
  detail::open_for_write(path) << j.dump(2) << "\n";
}

inline Observables read_ness_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("io: cannot open '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("io: '" + path.string() + "' is not valid JSON: " + e.what());
  }
  if (!j.contains("n") || !j.contains("I"))
    throw IoError("io: '" + path.string() + "' lacks the n / I observable arrays");
  Observables obs;
  obs.n = j["n"].get<std::vector<double>>();
  obs.I = j["I"].get<std::vector<double>>();
  return obs;
}

}  // namespace preb
