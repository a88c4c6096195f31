#pragma once

// Gauss-Legendre quadrature: fixed panels, composite rules, adaptive bisection
// and a principal-value kernel used by the Hilbert transforms in spectral.hpp.

#include <array>
#include <cmath>
#include <map>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

namespace preb::quad {

struct GLRule {
  std::vector<double> x;  // nodes on (-1, 1)
  std::vector<double> w;  // weights, sum = 2
};

// Nodes/weights by Newton iteration on P_n; cached per order.
inline const GLRule& gauss_legendre(int n) {
  if (n < 1) throw std::invalid_argument("gauss_legendre: order must be >= 1");
  static std::map<int, GLRule> cache;
  static std::mutex mtx;
  std::lock_guard<std::mutex> lock(mtx);
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;

  GLRule r;
  r.x.resize(n);
  r.w.resize(n);
  const int m = (n + 1) / 2;
  for (int i = 0; i < m; ++i) {
    double x = std::cos(M_PI * (i + 0.75) / (n + 0.5));
    double pp = 0.0;
    for (int iter = 0; iter < 100; ++iter) {
      double p0 = 1.0, p1 = 0.0;
      for (int j = 0; j < n; ++j) {
        const double p2 = p1;
        p1 = p0;
        p0 = ((2 * j + 1) * x * p1 - j * p2) / (j + 1);
      }
      // p0 = P_n(x), p1 = P_{n-1}(x)
      pp = n * (x * p0 - p1) / (x * x - 1.0);
      const double dx = p0 / pp;
      x -= dx;
      if (std::abs(dx) < 1e-15) break;
    }
    r.x[i] = -x;
    r.x[n - 1 - i] = x;
    const double w = 2.0 / ((1.0 - x * x) * pp * pp);
    r.w[i] = w;
    r.w[n - 1 - i] = w;
  }
  return cache.emplace(n, std::move(r)).first->second;
}

// Single Gauss-Legendre panel over [a, b].  The accumulator is forced to the
// integrand's value type so expression-template results (Eigen) are
// materialized instead of dangling.
template <class F>
auto panel(F&& f, double a, double b, int n = 64) {
  const GLRule& r = gauss_legendre(n);
  const double xm = 0.5 * (a + b);
  const double xr = 0.5 * (b - a);
  using V = std::decay_t<decltype(f(a))>;
  V acc = f(xm + xr * r.x[0]) * (r.w[0] * xr);
  for (int k = 1; k < n; ++k) acc += f(xm + xr * r.x[k]) * (r.w[k] * xr);
  return acc;
}

// Composite rule: `panels` equal panels over [a, b].
template <class F>
auto composite(F&& f, double a, double b, int panels, int n = 64) {
  if (panels < 1) throw std::invalid_argument("composite: panels must be >= 1");
  const double h = (b - a) / panels;
  auto acc = panel(f, a, a + h, n);
  for (int p = 1; p < panels; ++p) acc += panel(f, a + p * h, a + (p + 1) * h, n);
  return acc;
}

// Panel count for Fourier-type integrands \int f(w) e^{iwt} dw: scale with the
// number of oscillation periods across the window.
inline int oscillatory_panel_count(double t, double range) {
  const double periods = std::abs(t) * range / (2.0 * M_PI);
  return std::max(1, static_cast<int>(std::ceil(periods)) * 4);
}

struct QuadratureError : std::runtime_error {
  // (a, b, error estimate) for every panel that hit the depth cap.
  std::vector<std::array<double, 3>> trace;
  explicit QuadratureError(const std::string& what, std::vector<std::array<double, 3>> tr)
      : std::runtime_error(what), trace(std::move(tr)) {}
};

namespace detail {
inline std::string format_trace(const std::vector<std::array<double, 3>>& tr) {
  std::ostringstream os;
  os << "adaptive quadrature failed to converge; worst panels:";
  const std::size_t show = std::min<std::size_t>(tr.size(), 8);
  for (std::size_t i = 0; i < show; ++i)
    os << " [" << tr[i][0] << "," << tr[i][1] << "]~" << tr[i][2];
  if (tr.size() > show) os << " (+" << tr.size() - show << " more)";
  return os.str();
}
}  // namespace detail

// Adaptive bisection on 64-node panels. `norm` maps the integrand value type
// to a double (abs for scalars, max-norm for matrices). Throws QuadratureError
// if any subinterval still exceeds its tolerance share at `max_depth`.
template <class F, class Norm>
auto adaptive(F&& f, double a, double b, double tol, Norm&& norm, int max_depth = 28,
              double* err_out = nullptr) {
  using V = decltype(panel(f, a, b, 64));
  double err_acc = 0.0;
  std::vector<std::array<double, 3>> violations;

  V whole = panel(f, a, b, 64);
  // Round-off floor: once a panel's refinement estimate is at machine noise
  // relative to the whole integral, splitting the tolerance further would
  // chase digits that do not exist.
  const double floor_tol = 1e-15 * (1.0 + norm(whole));

  auto rec = [&](auto&& self, double lo, double hi, const V& prev, double tloc, int depth) -> V {
    const double mid = 0.5 * (lo + hi);
    V left = panel(f, lo, mid, 64);
    V right = panel(f, mid, hi, 64);
    const double err = norm(left + right - prev);
    const double accept = std::max(tloc, floor_tol);
    if (err <= accept || depth >= max_depth) {
      if (err > accept) violations.push_back({lo, hi, err});
      err_acc += err;
      return left + right;
    }
    return self(self, lo, mid, left, 0.5 * tloc, depth + 1) +
           self(self, mid, hi, right, 0.5 * tloc, depth + 1);
  };

  V result = rec(rec, a, b, whole, tol, 0);
  if (!violations.empty()) throw QuadratureError(detail::format_trace(violations), violations);
  if (err_out) *err_out = err_acc;
  return result;
}

template <class F>
auto adaptive(F&& f, double a, double b, double tol, int max_depth = 28, double* err_out = nullptr) {
  return adaptive(std::forward<F>(f), a, b, tol, [](const auto& v) { return std::abs(v); },
                  max_depth, err_out);
}

// Principal value P\int_a^b f(x)/(w0 - x) dx with f smooth on [a, b] and
// f(w0) = fw0 (pass 0 when w0 lies outside the support). Subtract-and-add:
//   P\int f/(w0-x) = \int [f(x)-f(w0)]/(w0-x) dx + f(w0) ln|(w0-a)/(b-w0)|.
// The subtracted integrand is regular at w0, and splitting the interval there
// keeps each adaptive region smooth.
template <class F>
double hilbert_pv(F&& f, double a, double b, double w0, double fw0, double tol) {
  if (!(b > a)) throw std::invalid_argument("hilbert_pv: requires b > a");
  auto g = [&](double x) {
    const double d = w0 - x;
    return (f(x) - fw0) / d;
  };
  double integral = 0.0;
  if (w0 > a && w0 < b) {
    integral = adaptive(g, a, w0, 0.5 * tol) + adaptive(g, w0, b, 0.5 * tol);
    if (fw0 != 0.0) integral += fw0 * std::log(std::abs((w0 - a) / (b - w0)));
  } else if (w0 == a || w0 == b) {
    if (fw0 != 0.0)
      throw std::domain_error("hilbert_pv: principal value diverges at a support edge with f != 0");
    integral = adaptive(g, a, b, tol);
  } else {
    auto h = [&](double x) { return f(x) / (w0 - x); };
    integral = adaptive(h, a, b, tol);
  }
  return integral;
}

}  // namespace preb::quad
