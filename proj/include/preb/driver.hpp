// Periodically refreshed baths over interchangeable engine backends: the
// evolve-then-refresh recursion, tau-doubling convergence certification,
// timeline reconstruction from shifted offsets, and steady-state detection.
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "preb/freefermion.hpp"
#include "preb/liouville.hpp"
#include "preb/tebd.hpp"

namespace preb {

// One observable sample; trunc_weight carries the engine's accumulated
// discarded weight at that time (zero for the exact backends).
struct TimePoint {
  double t = 0.0;
  Observables obs;
  double trunc_weight = 0.0;
};

using Timeline = std::vector<TimePoint>;

// --- Backends -----------------------------------------------------------------

// A configured engine that can advance in time, detach-and-refresh its baths,
// and report system observables.  granularity() is the smallest time step the
// engine can take (0 when any step is exact).
class Backend {
 public:
  virtual ~Backend() = default;
  virtual const char* name() const = 0;
  virtual double granularity() const { return 0.0; }
  virtual double time() const = 0;
  virtual void evolve(double t) = 0;
  virtual void refresh() = 0;
  virtual Observables observe() const = 0;
  virtual double truncation_weight() const { return 0.0; }
};

using BackendFactory = std::function<std::unique_ptr<Backend>()>;

// Exact Gaussian evolution of the correlation matrix; V must vanish.
class FreeFermionBackend : public Backend {
 public:
  FreeFermionBackend(const SystemSpec& sys, const ChainBath& bath1, const ChainBath& bath2,
                     const std::vector<double>& n_sys)
      : bath1_(bath1),
        bath2_(bath2),
        prop_(assemble_hamiltonian(require_noninteracting(sys), bath1, bath2)),
        C_(initial_correlations(sys, bath1, bath2, n_sys)) {}

  const char* name() const override { return "freefermion"; }
  double time() const override { return time_; }
  void evolve(double t) override {
    C_ = prop_.evolve(C_, t);
    time_ += t;
  }
  void refresh() override { C_ = preb_refresh(C_, bath1_, bath2_); }
  Observables observe() const override { return observables(C_); }
  const CorrelationMatrix& correlations() const { return C_; }

 private:
  static const SystemSpec& require_noninteracting(const SystemSpec& sys) {
    if (sys.V != 0.0)
      throw std::invalid_argument("FreeFermionBackend: interacting system requires tebd or dense");
    return sys;
  }

  ChainBath bath1_;
  ChainBath bath2_;
  Propagator prop_;
  CorrelationMatrix C_;
  double time_ = 0.0;
};

// Brute-force many-body density matrix; capped at 12 modes in total.
class DenseBackend : public Backend {
 public:
  DenseBackend(const SystemSpec& sys, const ChainBath& bath1, const ChainBath& bath2,
               const std::vector<double>& n_sys)
      : bath1_(bath1),
        bath2_(bath2),
        prop_(build_many_body_hamiltonian(sys, bath1, bath2)),
        state_(initial_dense_state(sys, bath1, bath2, n_sys)) {}

  const char* name() const override { return "dense"; }
  double time() const override { return time_; }
  void evolve(double t) override {
    state_.rho = prop_.evolve(state_.rho, t);
    time_ += t;
  }
  void refresh() override { state_ = dense_refresh(state_, bath1_, bath2_); }
  Observables observe() const override { return observables(correlations_from_dense(state_)); }
  const DenseState& state() const { return state_; }

 private:
  ChainBath bath1_;
  ChainBath bath2_;
  DensePropagator prop_;
  DenseState state_;
  double time_ = 0.0;
};

// Vectorized matrix-product-state evolution; steps are whole multiples of the
// Trotter dt.
class TebdBackend : public Backend {
 public:
  TebdBackend(const SystemSpec& sys, const ChainBath& bath1, const ChainBath& bath2,
              const std::vector<double>& n_sys, const TebdOptions& opt)
      : engine_(sys, bath1, bath2, n_sys, opt), dt_(opt.dt) {}

  const char* name() const override { return "tebd"; }
  double granularity() const override { return dt_; }
  double time() const override { return engine_.time(); }
  void evolve(double t) override { engine_.run(t); }
  void refresh() override { engine_.refresh(); }
  Observables observe() const override { return engine_.observe(); }
  double truncation_weight() const override { return engine_.log().weight_total; }
  TebdEngine& engine() { return engine_; }
  const TebdEngine& engine() const { return engine_; }

 private:
  TebdEngine engine_;
  double dt_;
};

// --- Schedule -----------------------------------------------------------------

namespace detail {

inline bool is_multiple(double x, double unit) {
  if (unit <= 0.0) return true;
  const double q = x / unit;
  return std::abs(q - std::round(q)) <= 1e-9 * std::max(1.0, std::abs(q));
}

}  // namespace detail

// The refresh schedule: evolve t1, refresh, then n_steps cycles of
// [evolve tau, refresh]; observables sampled every record_stride * dt within
// each segment (where the backend's granularity permits) and always at the
// segment boundaries.
struct PrebSchedule {
  double tau = 1.0;
  int n_steps = 0;
  double t1 = 0.0;
  double dt = 0.1;
  int record_stride = 1;

  void validate(double granularity = 0.0) const {
    if (!(tau > 0.0) || !std::isfinite(tau))
      throw std::invalid_argument("PrebSchedule: tau must be > 0");
    if (n_steps < 0) throw std::invalid_argument("PrebSchedule: n_steps must be >= 0");
    if (!(t1 >= 0.0) || t1 >= tau)
      throw std::invalid_argument("PrebSchedule: t1 must lie in [0, tau)");
    if (!(dt > 0.0) || !std::isfinite(dt))
      throw std::invalid_argument("PrebSchedule: dt must be > 0");
    if (record_stride < 1) throw std::invalid_argument("PrebSchedule: record_stride must be >= 1");
    if (granularity > 0.0) {
      if (!detail::is_multiple(tau, granularity))
        throw std::invalid_argument("PrebSchedule: tau must be a whole number of Trotter steps");
      if (!detail::is_multiple(t1, granularity))
        throw std::invalid_argument("PrebSchedule: t1 must be a whole number of Trotter steps");
      if (!detail::is_multiple(dt, granularity))
        throw std::invalid_argument(
            "PrebSchedule: dt must be a whole number of the backend's Trotter steps");
    }
  }
};

// --- Worker pool ----------------------------------------------------------------

// PREB_SIM_THREADS caps the worker pool; unset falls back to the hardware
// concurrency (at least 1).
inline int thread_budget() {
  int n = static_cast<int>(std::thread::hardware_concurrency());
  if (n < 1) n = 1;
  if (const char* env = std::getenv("PREB_SIM_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1)
      throw std::invalid_argument("PREB_SIM_THREADS must be a positive integer");
    n = static_cast<int>(std::min<long>(v, 1024));
  }
  return n;
}

namespace detail {

// Runs the jobs on up to thread_budget() threads; the first failure (by job
// index) is rethrown after all workers finish.
inline void run_jobs(std::vector<std::function<void()>>& jobs) {
  const int workers =
      std::min<int>(thread_budget(), static_cast<int>(jobs.size()));
  std::vector<std::exception_ptr> errors(jobs.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < jobs.size(); ++i) {
      try {
        jobs[i]();
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
      for (std::size_t i = next.fetch_add(1); i < jobs.size(); i = next.fetch_add(1)) {
        try {
          jobs[i]();
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    };
    std::vector<std::thread> threads;
    threads.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) threads.emplace_back(worker);
    for (std::thread& th : threads) th.join();
  }
  for (const std::exception_ptr& e : errors)
    if (e) std::rethrow_exception(e);
}

// Evolves one segment, sampling every `stride` and always at the far end.
inline void evolve_segment(Backend& b, double span, double stride, double t_base, Timeline& out) {
  double done = 0.0;
  while (span - done > 1e-9) {
    const double step = std::min(stride, span - done);
    b.evolve(step);
    done += step;
    out.push_back(TimePoint{t_base + done, b.observe(), b.truncation_weight()});
  }
}

}  // namespace detail

// --- The recursion --------------------------------------------------------------

// Evolve t1 (if nonzero), refresh, then n_steps cycles of [evolve tau,
// refresh].  Observables are sampled on the inner stride grid and at every
// cycle boundary (just before the refresh, which leaves them unchanged).
inline Timeline run_preb(Backend& b, const PrebSchedule& s) {
  s.validate(b.granularity());
  const double stride = s.dt * s.record_stride;
  Timeline out;
  out.push_back(TimePoint{0.0, b.observe(), b.truncation_weight()});
  int cycle = 0;
  try {
    if (s.t1 > 0.0) {
      detail::evolve_segment(b, s.t1, stride, 0.0, out);
      b.refresh();
    }
    for (cycle = 1; cycle <= s.n_steps; ++cycle) {
      detail::evolve_segment(b, s.tau, stride, s.t1 + (cycle - 1) * s.tau, out);
      b.refresh();
    }
  } catch (const std::exception& e) {
    std::ostringstream msg;
    msg << "run_preb: cycle " << cycle << " [" << b.name() << "]: " << e.what();
    throw std::runtime_error(msg.str());
  }
  return out;
}

// Plain evolution without refreshes, sampled on the same stride grid.
inline Timeline run_continuous(Backend& b, double t_max, double stride) {
  if (!(t_max >= 0.0) || !std::isfinite(t_max))
    throw std::invalid_argument("run_continuous: t_max must be >= 0");
  if (!(stride > 0.0)) throw std::invalid_argument("run_continuous: stride must be > 0");
  if (b.granularity() > 0.0 && !detail::is_multiple(stride, b.granularity()))
    throw std::invalid_argument(
        "run_continuous: stride must be a whole number of Trotter steps");
  Timeline out;
  out.push_back(TimePoint{0.0, b.observe(), b.truncation_weight()});
  detail::evolve_segment(b, t_max, stride, 0.0, out);
  return out;
}

namespace detail {

inline double observable_deviation(const Observables& a, const Observables& b) {
  if (a.n.size() != b.n.size() || a.I.size() != b.I.size())
    throw std::invalid_argument("observable_deviation: shape mismatch");
  double d = 0.0;
  for (std::size_t l = 0; l < a.n.size(); ++l) d = std::max(d, std::abs(a.n[l] - b.n[l]));
  for (std::size_t l = 0; l < a.I.size(); ++l) d = std::max(d, std::abs(a.I[l] - b.I[l]));
  return d;
}

}  // namespace detail

// Offset runs that should describe one evolution disagree beyond tolerance.
class ReconstructionMismatch : public std::runtime_error {
 public:
  explicit ReconstructionMismatch(const std::string& msg) : std::runtime_error(msg) {}
};

// Runs the same refresh period from every offset in t1_list (through the
// worker pool) and merges the sample points into one timeline.  Points shared
// by several runs must agree within `tolerance`; the sample from the smallest
// t1 is kept.
inline Timeline reconstruct_timeline(const BackendFactory& make, const PrebSchedule& base,
                                     const std::vector<double>& t1_list, double tolerance) {
  if (t1_list.empty()) throw std::invalid_argument("reconstruct_timeline: empty t1 list");
  if (!(tolerance > 0.0)) throw std::invalid_argument("reconstruct_timeline: tolerance must be > 0");
  struct Job {
    double t1;
    Timeline trace;
  };
  std::vector<Job> runs;
  runs.reserve(t1_list.size());
  for (const double t1 : t1_list) {
    PrebSchedule s = base;
    s.t1 = t1;
    s.validate();  // granularity re-checked per backend inside run_preb
    runs.push_back(Job{t1, {}});
  }
  std::vector<std::function<void()>> jobs;
  jobs.reserve(runs.size());
  for (Job& job : runs)
    jobs.push_back([&make, &job, &base] {
      PrebSchedule s = base;
      s.t1 = job.t1;
      auto backend = make();
      job.trace = run_preb(*backend, s);
    });
  detail::run_jobs(jobs);

  std::sort(runs.begin(), runs.end(), [](const Job& a, const Job& b) { return a.t1 < b.t1; });
  struct Tagged {
    double t1;
    TimePoint point;
  };
  std::vector<Tagged> all;
  for (const Job& job : runs)
    for (const TimePoint& p : job.trace) all.push_back(Tagged{job.t1, p});
  std::stable_sort(all.begin(), all.end(), [](const Tagged& a, const Tagged& b) {
    if (std::abs(a.point.t - b.point.t) > 1e-9) return a.point.t < b.point.t;
    return a.t1 < b.t1;
  });
  Timeline merged;
  for (const Tagged& tp : all) {
    if (!merged.empty() && std::abs(tp.point.t - merged.back().t) <= 1e-9) {
      const double dev = detail::observable_deviation(tp.point.obs, merged.back().obs);
      if (dev > tolerance) {
        std::ostringstream msg;
        msg << "reconstruct_timeline: inconsistent samples at t = " << tp.point.t
            << " (offset t1 = " << tp.t1 << " deviates by " << dev
            << " from the merged value; tolerance " << tolerance << ")";
        throw ReconstructionMismatch(msg.str());
      }
      continue;  // keep the sample from the smallest t1
    }
    merged.push_back(tp.point);
  }
  return merged;
}

// --- Convergence certification ---------------------------------------------------

struct ConvergenceReport {
  std::vector<double> taus;          // refresh periods tested, in doubling order
  std::vector<Timeline> traces;      // the corresponding runs
  std::vector<double> deviations;    // deviations[k] compares taus[k] and taus[k+1]
  bool converged = false;
  double certified_tau = 0.0;        // first tau agreeing with its double
  double certified_against = 0.0;
  double certified_deviation = 0.0;
  double tolerance = 0.0;
  std::vector<std::string> warnings;
};

namespace detail {

// Max observable deviation over the sample times the two traces share.
inline double trace_deviation(const Timeline& a, const Timeline& b) {
  double dev = 0.0;
  std::size_t j = 0;
  bool compared = false;
  for (const TimePoint& pa : a) {
    while (j < b.size() && b[j].t < pa.t - 1e-9) ++j;
    if (j == b.size()) break;
    if (std::abs(b[j].t - pa.t) <= 1e-9) {
      dev = std::max(dev, observable_deviation(pa.obs, b[j].obs));
      compared = true;
    }
  }
  if (!compared)
    throw std::invalid_argument("trace_deviation: the traces share no sample times");
  return dev;
}

}  // namespace detail

// Factory that receives the refresh period it is expected to serve, so each
// rung of the doubling ladder can size its baths for its own tau.
using TauBackendFactory = std::function<std::unique_ptr<Backend>(double tau)>;

// Doubles the refresh period until two successive runs agree within
// `tolerance` on every tracked observable at their shared sample times, out
// to the horizon t_max.  Non-convergence is a verdict, not an error.
inline ConvergenceReport certify_convergence(const TauBackendFactory& make, double tau0,
                                             double t_max, double tolerance, int max_doublings,
                                             double tau_M = 0.0) {
  if (!(tau0 > 0.0)) throw std::invalid_argument("certify_convergence: tau0 must be > 0");
  if (max_doublings < 1)
    throw std::invalid_argument("certify_convergence: max_doublings must be >= 1");
  if (!(t_max >= 2.0 * tau0))
    throw std::invalid_argument(
        "certify_convergence: t_max must cover at least one cycle of 2 tau0");
  ConvergenceReport report;
  report.tolerance = tolerance;
  if (tau_M > 0.0 && tau0 <= tau_M) {
    std::ostringstream warn;
    warn << "tau0 = " << tau0 << " does not exceed the bath memory time tau_M = " << tau_M
         << "; the refresh discards correlations the baths still remember";
    report.warnings.push_back(warn.str());
  }
  const auto run_one = [&make](double tau, double t_max_horizon) {
    PrebSchedule s;
    s.tau = tau;
    s.n_steps = static_cast<int>(std::floor(t_max_horizon / tau + 1e-9));
    s.t1 = 0.0;
    s.dt = tau;  // cycle-boundary sampling only: the certification grid
    s.record_stride = 1;
    auto backend = make(tau);
    return run_preb(*backend, s);
  };
  report.taus.push_back(tau0);
  report.traces.push_back(run_one(tau0, t_max));
  for (int k = 1; k <= max_doublings; ++k) {
    const double tau = tau0 * std::pow(2.0, k);
    if (tau > t_max * (1.0 + 1e-12)) {
      std::ostringstream warn;
      warn << "ladder stopped at tau = " << tau << ": the horizon t_max = " << t_max
           << " cannot fit a full cycle";
      report.warnings.push_back(warn.str());
      break;
    }
    report.taus.push_back(tau);
    report.traces.push_back(run_one(tau, t_max));
    const double dev =
        detail::trace_deviation(report.traces[report.traces.size() - 2], report.traces.back());
    report.deviations.push_back(dev);
    if (dev < tolerance) {
      report.converged = true;
      report.certified_tau = report.taus[report.taus.size() - 2];
      report.certified_against = tau;
      report.certified_deviation = dev;
      break;
    }
  }
  return report;
}

// Convenience overload for a tau-blind factory (callers that pre-size their
// baths for the largest rung of the ladder).
inline ConvergenceReport certify_convergence(const BackendFactory& make, double tau0,
                                             double t_max, double tolerance, int max_doublings,
                                             double tau_M = 0.0) {
  return certify_convergence(TauBackendFactory([&make](double) { return make(); }), tau0, t_max,
                             tolerance, max_doublings, tau_M);
}

// --- Steady-state detection -------------------------------------------------------

// Earliest sample time after which every tracked observable stays within eps
// of itself through the end of the series, and the bond currents are mutually
// uniform within eps; requires at least `window` of trailing data to certify.
inline std::optional<double> ness_detector(const Timeline& series, double window, double eps) {
  if (!(window >= 0.0)) throw std::invalid_argument("ness_detector: window must be >= 0");
  if (!(eps > 0.0)) throw std::invalid_argument("ness_detector: eps must be > 0");
  if (series.empty()) return std::nullopt;
  const double t_end = series.back().t;
  const std::size_t n_sites = series.front().obs.n.size();
  const std::size_t n_bonds = series.front().obs.I.size();
  for (std::size_t i = 0; i < series.size(); ++i) {
    if (t_end - series[i].t < window - 1e-9) break;
    bool ok = true;
    for (std::size_t l = 0; l < n_sites && ok; ++l) {
      double lo = series[i].obs.n[l], hi = lo;
      for (std::size_t j = i + 1; j < series.size(); ++j) {
        lo = std::min(lo, series[j].obs.n[l]);
        hi = std::max(hi, series[j].obs.n[l]);
      }
      ok = hi - lo < eps;
    }
    for (std::size_t l = 0; l < n_bonds && ok; ++l) {
      double lo = series[i].obs.I[l], hi = lo;
      for (std::size_t j = i + 1; j < series.size(); ++j) {
        lo = std::min(lo, series[j].obs.I[l]);
        hi = std::max(hi, series[j].obs.I[l]);
      }
      ok = hi - lo < eps;
    }
    for (std::size_t j = i; j < series.size() && ok && n_bonds > 0; ++j) {
      double lo = series[j].obs.I[0], hi = lo;
      for (std::size_t l = 1; l < n_bonds; ++l) {
        lo = std::min(lo, series[j].obs.I[l]);
        hi = std::max(hi, series[j].obs.I[l]);
      }
      ok = hi - lo < eps;
    }
    if (ok) return series[i].t;
  }
  return std::nullopt;
}

}  // namespace preb
