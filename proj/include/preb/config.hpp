// Experiment configuration: a strict TOML-subset reader/writer for the
// simulator's run files, with field-path-aware validation and the glue that
// turns a validated config into baths, schedules, and engine backends.
#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "preb/chainmap.hpp"
#include "preb/driver.hpp"
#include "preb/spectral.hpp"

namespace preb {

// A config problem: message always carries the offending field path.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct SystemConfig {
  int L_S = 2;
  double V = 0.0;
  double h = 0.0;
  std::vector<double> pattern;  // filled with the half-filled default on validate

  bool operator==(const SystemConfig&) const = default;
};

struct BathConfig {
  std::string kind = "semicircle";  // semicircle | ohmic_gaussian
  double Gamma = 1.0;               // semicircle coupling scale
  double g_B = 2.0;                 // semicircle half-bandwidth parameter
  double gamma_b = 0.0;             // ohmic coupling scale
  double omega_c = 0.0;             // ohmic Gaussian cutoff
  double beta = 0.0;
  double mu = 0.0;
  int modes = 0;  // explicit chain length; 0 = derive from the run horizon

  bool operator==(const BathConfig&) const = default;
};

struct RunConfig {
  std::string mode = "continuous";    // continuous | preb
  std::string backend = "freefermion";  // freefermion | tebd | dense
  double tau = 0.0;
  int n_steps = 0;
  std::vector<double> t1{0.0};
  double dt = 0.1;
  int chi = 128;
  double svd_cutoff = 1e-10;
  double t_max = 0.0;
  double threshold = 0.05;  // memory-time decay threshold

  bool operator==(const RunConfig&) const = default;
};

struct OutputConfig {
  std::string directory = "out";
  int stride = 1;

  bool operator==(const OutputConfig&) const = default;
};

struct ExperimentConfig {
  SystemConfig system;
  std::array<BathConfig, 2> bath;
  RunConfig run;
  OutputConfig output;

  bool operator==(const ExperimentConfig&) const = default;
};

// --- TOML subset ------------------------------------------------------------------
//
// The accepted grammar: `[table]` and `[[table]]` headers, `key = value`
// pairs with string, number, boolean, and flat numeric-array values, and `#`
// comments.  Everything else (nesting, dotted keys, dates, multiline strings)
// is rejected; config files here never need it.

namespace detail {

struct TomlValue {
  enum class Kind { String, Number, Boolean, Array } kind = Kind::Number;
  std::string str;
  double num = 0.0;
  bool flag = false;
  std::vector<double> arr;
  int line = 0;
  bool used = false;
};

using TomlTable = std::map<std::string, TomlValue>;

struct TomlDocument {
  std::map<std::string, TomlTable> tables;
  std::map<std::string, std::vector<TomlTable>> arrays;
};

inline std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

// Cuts a trailing comment, respecting quoted strings.
inline std::string strip_comment(const std::string& line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

inline bool valid_key(const std::string& key) {
  if (key.empty()) return false;
  for (char c : key)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_') return false;
  return true;
}

inline double parse_number(const std::string& text, int line) {
  char* end = nullptr;
  const double v = std::strtod(text.c_str(), &end);
  if (end != text.c_str() + text.size() || text.empty())
    throw ConfigError("config line " + std::to_string(line) + ": '" + text +
                      "' is not a number");
  return v;
}

inline TomlValue parse_value(const std::string& raw, int line) {
  TomlValue v;
  v.line = line;
  const std::string text = trim(raw);
  if (text.empty()) throw ConfigError("config line " + std::to_string(line) + ": missing value");
  if (text.front() == '"') {
    if (text.size() < 2 || text.back() != '"')
      throw ConfigError("config line " + std::to_string(line) + ": unterminated string");
    v.kind = TomlValue::Kind::String;
    v.str = text.substr(1, text.size() - 2);
    if (v.str.find('"') != std::string::npos)
      throw ConfigError("config line " + std::to_string(line) + ": stray quote in string");
    return v;
  }
  if (text == "true" || text == "false") {
    v.kind = TomlValue::Kind::Boolean;
    v.flag = (text == "true");
    return v;
  }
  if (text.front() == '[') {
    if (text.back() != ']')
      throw ConfigError("config line " + std::to_string(line) + ": unterminated array");
    v.kind = TomlValue::Kind::Array;
    std::string body = trim(text.substr(1, text.size() - 2));
    if (!body.empty()) {
      std::size_t start = 0;
      while (start <= body.size()) {
        const std::size_t comma = body.find(',', start);
        const std::string item =
            trim(comma == std::string::npos ? body.substr(start) : body.substr(start, comma - start));
        if (item.empty())
          throw ConfigError("config line " + std::to_string(line) + ": empty array element");
        v.arr.push_back(parse_number(item, line));
        if (comma == std::string::npos) break;
        start = comma + 1;
      }
    }
    return v;
  }
  v.kind = TomlValue::Kind::Number;
  v.num = parse_number(text, line);
  return v;
}

inline TomlDocument parse_toml(std::istream& in) {
  TomlDocument doc;
  TomlTable* current = nullptr;
  std::string current_name;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string text = trim(strip_comment(line));
    if (text.empty()) continue;
    if (text.front() == '[') {
      const bool array = text.size() > 1 && text[1] == '[';
      const std::string closer = array ? "]]" : "]";
      if (text.size() < 2 + 2 * closer.size() ||
          text.substr(text.size() - closer.size()) != closer)
        throw ConfigError("config line " + std::to_string(lineno) + ": malformed table header");
      const std::string name =
          trim(text.substr(array ? 2 : 1, text.size() - 2 * (array ? 2 : 1)));
      if (!valid_key(name))
        throw ConfigError("config line " + std::to_string(lineno) + ": bad table name '" + name +
                          "'");
      if (array) {
        doc.arrays[name].emplace_back();
        current = &doc.arrays[name].back();
      } else {
        if (doc.tables.count(name))
          throw ConfigError("config line " + std::to_string(lineno) + ": duplicate table [" +
                            name + "]");
        current = &doc.tables[name];
      }
      current_name = name;
      continue;
    }
    const std::size_t eq = text.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(text.substr(0, eq));
    if (!valid_key(key))
      throw ConfigError("config line " + std::to_string(lineno) + ": bad key '" + key + "'");
    if (current == nullptr)
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": key outside of any [table]");
    if (current->count(key))
      throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" +
                        current_name + "." + key + "'");
    (*current)[key] = parse_value(text.substr(eq + 1), lineno);
  }
  return doc;
}

// Typed getters; every access marks the key as consumed so leftovers can be
// reported as unknown keys afterwards.

inline const TomlValue* find(TomlTable& t, const std::string& key) {
  auto it = t.find(key);
  if (it == t.end()) return nullptr;
  it->second.used = true;
  return &it->second;
}

inline double get_number(TomlTable& t, const std::string& path, const std::string& key,
                         double fallback) {
  const TomlValue* v = find(t, key);
  if (!v) return fallback;
  if (v->kind != TomlValue::Kind::Number)
    throw ConfigError("config: " + path + "." + key + " must be a number");
  return v->num;
}

inline int get_integer(TomlTable& t, const std::string& path, const std::string& key,
                       int fallback) {
  const double v = get_number(t, path, key, static_cast<double>(fallback));
  if (v != std::floor(v) || std::abs(v) > 1e9)
    throw ConfigError("config: " + path + "." + key + " must be an integer");
  return static_cast<int>(v);
}

inline std::string get_string(TomlTable& t, const std::string& path, const std::string& key,
                              const std::string& fallback) {
  const TomlValue* v = find(t, key);
  if (!v) return fallback;
  if (v->kind != TomlValue::Kind::String)
    throw ConfigError("config: " + path + "." + key + " must be a quoted string");
  return v->str;
}

inline std::vector<double> get_array(TomlTable& t, const std::string& path,
                                     const std::string& key, std::vector<double> fallback) {
  const TomlValue* v = find(t, key);
  if (!v) return fallback;
  if (v->kind != TomlValue::Kind::Array)
    throw ConfigError("config: " + path + "." + key + " must be an array of numbers");
  return v->arr;
}

inline void reject_unknown(const TomlTable& t, const std::string& path) {
  for (const auto& [key, value] : t)
    if (!value.used) throw ConfigError("config: unknown key " + path + "." + key);
}

inline std::string format_number(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

}  // namespace detail

// --- Validation -------------------------------------------------------------------

inline int bath_modes(const ExperimentConfig& cfg, int which);

inline void validate_config(ExperimentConfig& cfg) {
  if (cfg.system.L_S < 2) throw ConfigError("config: system.L_S must be at least 2");
  if (cfg.system.pattern.empty()) cfg.system.pattern = half_filled(cfg.system.L_S);
  if (static_cast<int>(cfg.system.pattern.size()) != cfg.system.L_S)
    throw ConfigError("config: system.pattern must list one occupation per site");
  for (double n : cfg.system.pattern)
    if (n != 0.0 && n != 1.0)
      throw ConfigError("config: system.pattern entries must be 0 or 1");

  for (int i = 0; i < 2; ++i) {
    const std::string path = "bath[" + std::to_string(i) + "]";
    const BathConfig& b = cfg.bath[i];
    if (b.kind == "semicircle") {
      if (!(b.Gamma > 0.0)) throw ConfigError("config: " + path + ".Gamma must be > 0");
      if (!(b.g_B > 0.0)) throw ConfigError("config: " + path + ".g_B must be > 0");
    } else if (b.kind == "ohmic_gaussian") {
      if (!(b.gamma_b > 0.0)) throw ConfigError("config: " + path + ".gamma_b must be > 0");
      if (!(b.omega_c > 0.0)) throw ConfigError("config: " + path + ".omega_c must be > 0");
      if (b.modes <= 0)
        throw ConfigError("config: " + path +
                          ".modes is required for non-semicircle baths (no closed-form size)");
    } else {
      throw ConfigError("config: " + path + ".kind must be semicircle or ohmic_gaussian");
    }
    if (!(b.beta >= 0.0)) throw ConfigError("config: " + path + ".beta must be >= 0");
    if (b.modes < 0) throw ConfigError("config: " + path + ".modes must be positive");
  }

  const RunConfig& r = cfg.run;
  if (r.mode != "continuous" && r.mode != "preb")
    throw ConfigError("config: run.mode must be continuous or preb");
  if (r.backend != "freefermion" && r.backend != "tebd" && r.backend != "dense")
    throw ConfigError("config: run.backend must be freefermion, tebd, or dense");
  if (!(r.dt > 0.0)) throw ConfigError("config: run.dt must be > 0");
  if (r.chi < 1) throw ConfigError("config: run.chi must be >= 1");
  if (!(r.svd_cutoff >= 0.0)) throw ConfigError("config: run.svd_cutoff must be >= 0");
  if (!(r.threshold > 0.0 && r.threshold < 1.0))
    throw ConfigError("config: run.threshold must lie in (0, 1)");

  if (r.mode == "preb") {
    if (!(r.tau > 0.0)) throw ConfigError("config: run.tau must be > 0 in preb mode");
    if (r.n_steps < 0) throw ConfigError("config: run.n_steps must be >= 0");
    if (r.t1.empty()) throw ConfigError("config: run.t1 must list at least one offset");
    for (double t1 : r.t1)
      if (!(t1 >= 0.0) || t1 >= r.tau)
        throw ConfigError("config: run.t1 entries must lie in [0, tau)");
    if (r.backend == "tebd" && !detail::is_multiple(r.tau, r.dt))
      throw ConfigError("config: run.tau must be a multiple of run.dt for the tebd backend");
  } else {
    if (!(r.t_max > 0.0)) throw ConfigError("config: run.t_max must be > 0 in continuous mode");
  }
  if (r.backend == "tebd" && r.mode == "continuous" && !detail::is_multiple(r.t_max, r.dt))
    throw ConfigError("config: run.t_max must be a multiple of run.dt for the tebd backend");
  if (r.backend == "freefermion" && cfg.system.V != 0.0)
    throw ConfigError("config: run.backend: interacting system requires tebd or dense");

  if (cfg.output.stride < 1) throw ConfigError("config: output.stride must be >= 1");
  if (cfg.output.directory.empty())
    throw ConfigError("config: output.directory must not be empty");

  // Derived bath sizes feed the dense-backend mode cap.
  if (r.backend == "dense") {
    int total = cfg.system.L_S;
    for (int i = 0; i < 2; ++i) total += bath_modes(cfg, i);
    if (total > kDenseModeCap)
      throw ConfigError("config: run.backend: the dense backend caps L_S + 2 L_B at " +
                        std::to_string(kDenseModeCap) + " modes (got " + std::to_string(total) +
                        ")");
  }
}

// The chain length used for bath `which`: the explicit override, or the size
// that keeps the finite chain exact over the run's refresh period (preb) or
// full horizon (continuous).
inline int bath_modes(const ExperimentConfig& cfg, int which) {
  const BathConfig& b = cfg.bath.at(static_cast<std::size_t>(which));
  if (b.modes > 0) return b.modes;
  if (b.kind != "semicircle")
    throw ConfigError("config: bath[" + std::to_string(which) +
                      "].modes is required for non-semicircle baths (no closed-form size)");
  const double horizon = cfg.run.mode == "preb" ? cfg.run.tau : cfg.run.t_max;
  return required_bath_size(horizon, b.g_B);
}

// --- Parse / serialize --------------------------------------------------------------

inline ExperimentConfig parse_config(std::istream& in) {
  detail::TomlDocument doc = detail::parse_toml(in);
  ExperimentConfig cfg;

  if (!doc.tables.count("system")) throw ConfigError("config: missing [system] table");
  detail::TomlTable& sys = doc.tables["system"];
  cfg.system.L_S = detail::get_integer(sys, "system", "L_S", cfg.system.L_S);
  cfg.system.V = detail::get_number(sys, "system", "V", cfg.system.V);
  cfg.system.h = detail::get_number(sys, "system", "h", cfg.system.h);
  cfg.system.pattern = detail::get_array(sys, "system", "pattern", cfg.system.pattern);
  detail::reject_unknown(sys, "system");

  if (!doc.arrays.count("bath") || doc.arrays["bath"].size() != 2)
    throw ConfigError("config: exactly two [[bath]] tables are required");
  for (int i = 0; i < 2; ++i) {
    detail::TomlTable& t = doc.arrays["bath"][static_cast<std::size_t>(i)];
    const std::string path = "bath[" + std::to_string(i) + "]";
    BathConfig& b = cfg.bath[static_cast<std::size_t>(i)];
    b.kind = detail::get_string(t, path, "kind", b.kind);
    b.Gamma = detail::get_number(t, path, "Gamma", b.Gamma);
    b.g_B = detail::get_number(t, path, "g_B", b.g_B);
    b.gamma_b = detail::get_number(t, path, "gamma_b", b.gamma_b);
    b.omega_c = detail::get_number(t, path, "omega_c", b.omega_c);
    b.beta = detail::get_number(t, path, "beta", b.beta);
    b.mu = detail::get_number(t, path, "mu", b.mu);
    b.modes = detail::get_integer(t, path, "modes", b.modes);
    detail::reject_unknown(t, path);
  }

  if (!doc.tables.count("run")) throw ConfigError("config: missing [run] table");
  detail::TomlTable& run = doc.tables["run"];
  cfg.run.mode = detail::get_string(run, "run", "mode", cfg.run.mode);
  cfg.run.backend = detail::get_string(run, "run", "backend", cfg.run.backend);
  cfg.run.tau = detail::get_number(run, "run", "tau", cfg.run.tau);
  cfg.run.n_steps = detail::get_integer(run, "run", "n_steps", cfg.run.n_steps);
  cfg.run.t1 = detail::get_array(run, "run", "t1", cfg.run.t1);
  cfg.run.dt = detail::get_number(run, "run", "dt", cfg.run.dt);
  cfg.run.chi = detail::get_integer(run, "run", "chi", cfg.run.chi);
  cfg.run.svd_cutoff = detail::get_number(run, "run", "svd_cutoff", cfg.run.svd_cutoff);
  cfg.run.t_max = detail::get_number(run, "run", "t_max", cfg.run.t_max);
  cfg.run.threshold = detail::get_number(run, "run", "threshold", cfg.run.threshold);
  detail::reject_unknown(run, "run");

  if (doc.tables.count("output")) {
    detail::TomlTable& out = doc.tables["output"];
    cfg.output.directory = detail::get_string(out, "output", "directory", cfg.output.directory);
    cfg.output.stride = detail::get_integer(out, "output", "stride", cfg.output.stride);
    detail::reject_unknown(out, "output");
  }

  for (const auto& [name, table] : doc.tables)
    if (name != "system" && name != "run" && name != "output")
      throw ConfigError("config: unknown table [" + name + "]");
  for (const auto& [name, tables] : doc.arrays)
    if (name != "bath") throw ConfigError("config: unknown table [[" + name + "]]");

  validate_config(cfg);
  return cfg;
}

inline ExperimentConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  return parse_config(in);
}

inline std::string serialize(const ExperimentConfig& cfg) {
  using detail::format_number;
  std::ostringstream out;
  out << "[system]\n";
  out << "L_S = " << cfg.system.L_S << "\n";
  out << "V = " << format_number(cfg.system.V) << "\n";
  out << "h = " << format_number(cfg.system.h) << "\n";
  out << "pattern = [";
  for (std::size_t i = 0; i < cfg.system.pattern.size(); ++i)
    out << (i ? ", " : "") << format_number(cfg.system.pattern[i]);
  out << "]\n";
  for (const BathConfig& b : cfg.bath) {
    out << "\n[[bath]]\n";
    out << "kind = \"" << b.kind << "\"\n";
    if (b.kind == "semicircle") {
      out << "Gamma = " << format_number(b.Gamma) << "\n";
      out << "g_B = " << format_number(b.g_B) << "\n";
    } else {
      out << "gamma_b = " << format_number(b.gamma_b) << "\n";
      out << "omega_c = " << format_number(b.omega_c) << "\n";
    }
    out << "beta = " << format_number(b.beta) << "\n";
    out << "mu = " << format_number(b.mu) << "\n";
    if (b.modes > 0) out << "modes = " << b.modes << "\n";
  }
  out << "\n[run]\n";
  out << "mode = \"" << cfg.run.mode << "\"\n";
  out << "backend = \"" << cfg.run.backend << "\"\n";
  if (cfg.run.mode == "preb") {
    out << "tau = " << format_number(cfg.run.tau) << "\n";
    out << "n_steps = " << cfg.run.n_steps << "\n";
    out << "t1 = [";
    for (std::size_t i = 0; i < cfg.run.t1.size(); ++i)
      out << (i ? ", " : "") << format_number(cfg.run.t1[i]);
    out << "]\n";
  }
  out << "dt = " << format_number(cfg.run.dt) << "\n";
  out << "chi = " << cfg.run.chi << "\n";
  out << "svd_cutoff = " << format_number(cfg.run.svd_cutoff) << "\n";
  if (cfg.run.t_max > 0.0) out << "t_max = " << format_number(cfg.run.t_max) << "\n";
  out << "threshold = " << format_number(cfg.run.threshold) << "\n";
  out << "\n[output]\n";
  out << "directory = \"" << cfg.output.directory << "\"\n";
  out << "stride = " << cfg.output.stride << "\n";
  return out.str();
}

// --- Config -> simulation objects ----------------------------------------------------

inline SpectralDensity spectral_density(const BathConfig& b) {
  if (b.kind == "semicircle") return SpectralDensity::semicircle(b.Gamma, b.g_B);
  return SpectralDensity::ohmic_gaussian(b.gamma_b, b.omega_c);
}

inline ChainBath make_chain_bath(const ExperimentConfig& cfg, int which) {
  const BathConfig& b = cfg.bath.at(static_cast<std::size_t>(which));
  const ThermalParams tp{b.beta, b.mu, Statistics::Fermi};
  return star_basis(chain_coefficients(spectral_density(b), bath_modes(cfg, which), tp));
}

inline SystemSpec system_spec(const ExperimentConfig& cfg) {
  return SystemSpec{cfg.system.L_S, cfg.system.V, cfg.system.h};
}

inline std::unique_ptr<Backend> make_backend(const ExperimentConfig& cfg) {
  const SystemSpec sys = system_spec(cfg);
  const ChainBath b1 = make_chain_bath(cfg, 0);
  const ChainBath b2 = make_chain_bath(cfg, 1);
  if (cfg.run.backend == "freefermion")
    return std::make_unique<FreeFermionBackend>(sys, b1, b2, cfg.system.pattern);
  if (cfg.run.backend == "dense")
    return std::make_unique<DenseBackend>(sys, b1, b2, cfg.system.pattern);
  TebdOptions opt;
  opt.chi_max = cfg.run.chi;
  opt.svd_cutoff = cfg.run.svd_cutoff;
  opt.dt = cfg.run.dt;
  return std::make_unique<TebdBackend>(sys, b1, b2, cfg.system.pattern, opt);
}

inline BackendFactory backend_factory(const ExperimentConfig& cfg) {
  return [cfg] { return make_backend(cfg); };
}

inline PrebSchedule schedule_from(const ExperimentConfig& cfg, double t1) {
  PrebSchedule s;
  s.tau = cfg.run.tau;
  s.n_steps = cfg.run.n_steps;
  s.t1 = t1;
  s.dt = cfg.run.dt;
  s.record_stride = cfg.output.stride;
  return s;
}

}  // namespace preb
