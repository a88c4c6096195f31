#pragma once
// Star-to-chain mapping of a bath spectral density, the chain eigenbasis, and
// bath sizing for a target evolution time.
//
// chain_coefficients discretizes the spectral density into a finite star of
// modes (a local two-point Gauss rule per cell, so each cell's moments 0..3
// are reproduced exactly) and tridiagonalizes the star by Lanczos with full
// reorthogonalization.  The cell count is doubled until the chain
// coefficients stabilize, so the returned coefficients are those of the
// continuum measure rather than of any fixed grid.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "preb/quad.hpp"
#include "preb/spectral.hpp"

namespace preb {

// Single-particle eigenbasis of a finite chain: E ascending, Phi(p, a) the
// chain-site-p amplitude of eigenmode a.
struct ChainEigs {
  std::vector<double> E;
  Eigen::MatrixXd Phi;
};

// Finite tight-binding chain equivalent to a bath spectral density.  The
// system couples to site 0 with strength gamma; eps/hop are the on-site
// energies and nearest-neighbour hoppings.  thermal describes the state the
// bath is (re)initialized in; eigs is filled by star_basis on demand.
struct ChainBath {
  double gamma = 0.0;
  std::vector<double> eps;
  std::vector<double> hop;
  ThermalParams thermal;
  std::optional<ChainEigs> eigs;

  int size() const { return static_cast<int>(eps.size()); }
};

namespace detail {

// Discrete star measure: mode energies with nonnegative masses kappa_r^2.
struct StarMeasure {
  std::vector<double> omega;
  std::vector<double> mass;
};

// Gauss nodes/weights of the two-point rule matching the moments 0..3 of one
// cell of the measure.  Works with moments centered on the cell mean to
// avoid cancellation for cells far from the origin; falls back to a single
// node when the cell measure is numerically a point mass.
inline void push_cell_nodes(const double* f, const double* w, std::size_t n,
                            StarMeasure& out) {
  double m0 = 0.0, m1 = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    if (f[k] < 0.0) throw std::runtime_error("chain_coefficients: negative cell weight");
    m0 += f[k];
    m1 += f[k] * w[k];
  }
  if (m0 < 1e-300) return;  // empty cell, no mode
  const double a0 = m1 / m0;
  double mu2 = 0.0, mu3 = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double d = w[k] - a0;
    mu2 += f[k] * d * d;
    mu3 += f[k] * d * d * d;
  }
  if (!(mu2 > 0.0)) {
    out.omega.push_back(a0);
    out.mass.push_back(m0);
    return;
  }
  const double b1sq = mu2 / m0;
  const double del = mu3 / mu2;  // a1 - a0 of the cell's 2x2 Jacobi matrix
  const double disc = std::sqrt(del * del + 4.0 * b1sq);
  for (const double lam : {0.5 * (del - disc), 0.5 * (del + disc)}) {
    out.omega.push_back(a0 + lam);
    out.mass.push_back(m0 * b1sq / (b1sq + lam * lam));
  }
}

// Star discretization of J/(2pi) with `cells` uniform cells and two Gauss
// nodes per cell.  The semicircle is discretized in the variable
// omega = W sin(theta), which removes the band-edge square roots.
inline StarMeasure discretize(const SpectralDensity& J, int cells) {
  StarMeasure out;
  out.omega.reserve(2 * static_cast<std::size_t>(cells));
  out.mass.reserve(2 * static_cast<std::size_t>(cells));
  const double inv2pi = 1.0 / (2.0 * M_PI);
  double fk[24], wk[24];
  if (J.kind() == SpectralDensity::Kind::Semicircle) {
    const double W = J.support_max();
    const double pref = J.Gamma() * W * inv2pi;
    const auto& gl = quad::gauss_legendre(12);
    for (int c = 0; c < cells; ++c) {
      const double t0 = -0.5 * M_PI + M_PI * c / cells;
      const double t1 = -0.5 * M_PI + M_PI * (c + 1) / cells;
      const double mid = 0.5 * (t0 + t1), half = 0.5 * (t1 - t0);
      for (std::size_t k = 0; k < gl.x.size(); ++k) {
        const double th = mid + half * gl.x[k];
        const double cth = std::cos(th);
        wk[k] = W * std::sin(th);
        fk[k] = pref * cth * cth * half * gl.w[k];
      }
      push_cell_nodes(fk, wk, gl.x.size(), out);
    }
    return out;
  }
  const double lo = J.support_min(), hi = J.support_max();
  const auto& gl = quad::gauss_legendre(24);
  for (int c = 0; c < cells; ++c) {
    const double x0 = lo + (hi - lo) * c / cells;
    const double x1 = lo + (hi - lo) * (c + 1) / cells;
    const double mid = 0.5 * (x0 + x1), half = 0.5 * (x1 - x0);
    for (std::size_t k = 0; k < gl.x.size(); ++k) {
      wk[k] = mid + half * gl.x[k];
      fk[k] = J(wk[k]) * inv2pi * half * gl.w[k];
    }
    push_cell_nodes(fk, wk, gl.x.size(), out);
  }
  return out;
}

// Lanczos tridiagonalization of diag(omega) started from the coupling vector
// kappa_r = sqrt(mass_r).  Full reorthogonalization (two passes) keeps deep
// chain coefficients clean.
inline ChainBath lanczos_chain(const StarMeasure& star, int L_B) {
  const Eigen::Index M = static_cast<Eigen::Index>(star.omega.size());
  if (M < L_B)
    throw std::runtime_error("chain_coefficients: L_B exceeds the discretization mode count");
  Eigen::VectorXd w = Eigen::Map<const Eigen::VectorXd>(star.omega.data(), M);
  Eigen::VectorXd kappa = Eigen::Map<const Eigen::VectorXd>(star.mass.data(), M).cwiseSqrt();

  ChainBath cb;
  cb.gamma = kappa.norm();
  if (cb.gamma <= 0.0) throw std::runtime_error("chain_coefficients: spectral density has zero weight");
  cb.eps.reserve(L_B);
  cb.hop.reserve(L_B - 1);

  const double wscale = std::max(std::abs(w.minCoeff()), std::abs(w.maxCoeff()));
  Eigen::MatrixXd V(M, L_B);
  V.col(0) = kappa / cb.gamma;
  Eigen::VectorXd r = w.cwiseProduct(V.col(0));
  cb.eps.push_back(V.col(0).dot(r));
  r -= cb.eps[0] * V.col(0);
  for (int p = 1; p < L_B; ++p) {
    for (int pass = 0; pass < 2; ++pass)
      r -= V.leftCols(p) * (V.leftCols(p).transpose() * r);
    const double beta = r.norm();
    if (beta <= 1e-13 * std::max(1.0, wscale))
      throw std::runtime_error(
          "chain_coefficients: Krylov space exhausted before reaching L_B sites");
    cb.hop.push_back(beta);
    V.col(p) = r / beta;
    r = w.cwiseProduct(V.col(p));
    cb.eps.push_back(V.col(p).dot(r));
    r -= cb.eps[p] * V.col(p) + beta * V.col(p - 1);
  }
  return cb;
}

inline double chain_diff(const ChainBath& a, const ChainBath& b) {
  double d = std::abs(a.gamma - b.gamma);
  for (std::size_t i = 0; i < a.eps.size(); ++i) d = std::max(d, std::abs(a.eps[i] - b.eps[i]));
  for (std::size_t i = 0; i < a.hop.size(); ++i) d = std::max(d, std::abs(a.hop[i] - b.hop[i]));
  return d;
}

}  // namespace detail

// Maps J onto the first L_B sites of its equivalent tight-binding chain.
// The discretization starts at max(16 L_B, 2048) modes and doubles until the
// coefficients move by less than 1e-9 (absolute, relative to the support
// scale), well inside the 1e-6 the contract asks for.
inline ChainBath chain_coefficients(const SpectralDensity& J, int L_B,
                                    const ThermalParams& thermal = {}) {
  if (L_B < 1) throw std::invalid_argument("chain_coefficients: L_B must be >= 1");
  const double wscale = std::max(std::abs(J.support_min()), std::abs(J.support_max()));
  const double atol = 1e-9 * std::max(1.0, wscale);
  int cells = std::max(8 * L_B, 1024);  // two modes per cell
  ChainBath prev = detail::lanczos_chain(detail::discretize(J, cells), L_B);
  for (int round = 0; round < 9; ++round) {
    cells *= 2;
    ChainBath cur = detail::lanczos_chain(detail::discretize(J, cells), L_B);
    if (detail::chain_diff(prev, cur) < atol) {
      cur.thermal = thermal;
      return cur;
    }
    prev = std::move(cur);
  }
  throw std::runtime_error(
      "chain_coefficients: coefficients did not stabilize under grid refinement");
}

// Fills the single-particle eigenbasis of the chain.  E is ascending and the
// first nonzero entry of every Phi column is positive, so the basis (and any
// MPS ordering built on it) is reproducible.
inline ChainBath star_basis(ChainBath cb) {
  const int n = cb.size();
  if (n < 1) throw std::invalid_argument("star_basis: chain has no sites");
  if (cb.hop.size() + 1 != cb.eps.size())
    throw std::invalid_argument("star_basis: hop must have length L_B - 1");
  ChainEigs eigs;
  if (n == 1) {
    eigs.E = {cb.eps[0]};
    eigs.Phi = Eigen::MatrixXd::Identity(1, 1);
    cb.eigs = std::move(eigs);
    return cb;
  }
  Eigen::VectorXd diag = Eigen::Map<const Eigen::VectorXd>(cb.eps.data(), n);
  Eigen::VectorXd sub = Eigen::Map<const Eigen::VectorXd>(cb.hop.data(), n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es;
  es.computeFromTridiagonal(diag, sub, Eigen::ComputeEigenvectors);
  if (es.info() != Eigen::Success)
    throw std::runtime_error("star_basis: tridiagonal eigendecomposition failed");
  eigs.E.assign(es.eigenvalues().data(), es.eigenvalues().data() + n);
  eigs.Phi = es.eigenvectors();
  for (int a = 0; a < n; ++a) {
    for (int p = 0; p < n; ++p) {
      const double x = eigs.Phi(p, a);
      if (std::abs(x) > 1e-14) {
        if (x < 0.0) eigs.Phi.col(a) = -eigs.Phi.col(a);
        break;
      }
    }
  }
  cb.eigs = std::move(eigs);
  return cb;
}

// Chain length needed to evolve up to time t against a bath of hopping
// scale g_B: ceil((t + 1) g_B), snapping values that are integral up to
// round-off so e.g. (6 + 1) * 2 -> 14 and never 15.
inline int required_bath_size(double t, double g_B) {
  if (!(t >= 0.0)) throw std::invalid_argument("required_bath_size: t must be >= 0");
  if (!(g_B > 0.0)) throw std::invalid_argument("required_bath_size: g_B must be > 0");
  const double x = (t + 1.0) * g_B;
  const double nearest = std::round(x);
  if (std::abs(x - nearest) < 1e-9 * std::max(1.0, std::abs(x)))
    return static_cast<int>(nearest);
  return static_cast<int>(std::ceil(x));
}

// --- JSON serialization (caching chains across runs) -----------------------

inline void to_json(nlohmann::json& j, const ThermalParams& tp) {
  j = {{"beta", tp.beta},
       {"mu", tp.mu},
       {"stats", tp.stats == Statistics::Fermi ? "fermi" : "bose"}};
}

inline void from_json(const nlohmann::json& j, ThermalParams& tp) {
  tp.beta = j.at("beta").get<double>();
  tp.mu = j.at("mu").get<double>();
  const std::string s = j.at("stats").get<std::string>();
  if (s == "fermi")
    tp.stats = Statistics::Fermi;
  else if (s == "bose")
    tp.stats = Statistics::Bose;
  else
    throw std::invalid_argument("ThermalParams: stats must be \"fermi\" or \"bose\"");
}

inline void to_json(nlohmann::json& j, const ChainBath& cb) {
  j = {{"gamma", cb.gamma}, {"eps", cb.eps}, {"hop", cb.hop}, {"thermal", cb.thermal}};
  if (cb.eigs) {
    std::vector<std::vector<double>> phi(cb.eigs->Phi.rows());
    for (Eigen::Index p = 0; p < cb.eigs->Phi.rows(); ++p) {
      phi[p].assign(cb.eigs->Phi.row(p).begin(), cb.eigs->Phi.row(p).end());
    }
    j["E"] = cb.eigs->E;
    j["Phi"] = std::move(phi);
  }
}

inline void from_json(const nlohmann::json& j, ChainBath& cb) {
  cb.gamma = j.at("gamma").get<double>();
  cb.eps = j.at("eps").get<std::vector<double>>();
  cb.hop = j.at("hop").get<std::vector<double>>();
  cb.thermal = j.at("thermal").get<ThermalParams>();
  if (cb.hop.size() + 1 != cb.eps.size())
    throw std::invalid_argument("ChainBath: hop must have length L_B - 1");
  cb.eigs.reset();
  if (j.contains("E")) {
    ChainEigs eigs;
    eigs.E = j.at("E").get<std::vector<double>>();
    const auto phi = j.at("Phi").get<std::vector<std::vector<double>>>();
    const int n = cb.size();
    if (static_cast<int>(eigs.E.size()) != n || static_cast<int>(phi.size()) != n)
      throw std::invalid_argument("ChainBath: eigenbasis size mismatch");
    eigs.Phi.resize(n, n);
    for (int p = 0; p < n; ++p) {
      if (static_cast<int>(phi[p].size()) != n)
        throw std::invalid_argument("ChainBath: Phi must be square");
      for (int a = 0; a < n; ++a) eigs.Phi(p, a) = phi[p][a];
    }
    cb.eigs = std::move(eigs);
  }
}

// Descriptor used as the cache key for chain coefficients: the density kind
// and its defining parameters.
inline nlohmann::json density_to_json(const SpectralDensity& J) {
  switch (J.kind()) {
    case SpectralDensity::Kind::Semicircle:
      return {{"kind", "semicircle"}, {"Gamma", J.Gamma()}, {"g_B", J.g_B()}};
    case SpectralDensity::Kind::OhmicGaussian:
      return {{"kind", "ohmic_gaussian"}, {"gamma_b", J.gamma_b()}, {"omega_c", J.omega_c()}};
    case SpectralDensity::Kind::Tabulated:
      return {{"kind", "tabulated"}, {"omega", J.tab_w()}, {"J", J.tab_J()}};
  }
  throw std::logic_error("density_to_json: unknown density kind");
}

inline SpectralDensity density_from_json(const nlohmann::json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "semicircle")
    return SpectralDensity::semicircle(j.at("Gamma").get<double>(), j.at("g_B").get<double>());
  if (kind == "ohmic_gaussian")
    return SpectralDensity::ohmic_gaussian(j.at("gamma_b").get<double>(),
                                           j.at("omega_c").get<double>());
  if (kind == "tabulated")
    return SpectralDensity::tabulated(j.at("omega").get<std::vector<double>>(),
                                      j.at("J").get<std::vector<double>>());
  throw std::invalid_argument("density_from_json: unknown kind \"" + kind + "\"");
}

}  // namespace preb
