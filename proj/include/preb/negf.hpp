#pragma once

// Exact nonequilibrium steady state of the boundary-driven free-fermion chain
// with infinite baths. Each bath couples through one boundary site only, so it
// enters the retarded Green's function as a frequency-local self-energy on
// that site,
//   Sigma^R(w) = (J^H(w) - i J(w)) / 2,
// and the steady-state correlations are a single frequency integral over the
// filled bath spectra,
//   <c+_p c_q> = Int dw/2pi [ G*_p1 G_q1 J_1 n_1 + G*_pL G_qL J_2 n_2 ].
// This is the independent oracle against which the time-evolution engines are
// benchmarked; it shares no dynamics code with them.

#include <preb/freefermion.hpp>
#include <preb/quad.hpp>
#include <preb/spectral.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <stdexcept>
#include <string>
#include <vector>

namespace preb {

// Retarded boundary self-energy of one bath. The imaginary part is -J/2
// (level broadening), the real part J^H/2 (level shift); for the semicircle
// this reproduces the boundary Green's function of the semi-infinite uniform
// chain in closed form.
inline std::complex<double> self_energy(const SpectralDensity& J, double w) {
  return {0.5 * hilbert_transform(J, w), -0.5 * J(w)};
}

namespace detail {

inline void check_system_matrix(const Eigen::MatrixXd& H_S) {
  if (H_S.rows() < 1 || H_S.rows() != H_S.cols())
    throw std::invalid_argument("negf: H_S must be a nonempty square matrix");
  const double scale = std::max(1.0, H_S.cwiseAbs().maxCoeff());
  if ((H_S - H_S.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale)
    throw std::invalid_argument("negf: H_S must be symmetric");
}

// w I - H_S - Sigma_1 e_11 - Sigma_2 e_LL. For L_S = 1 both baths attach to
// the single site.
inline Eigen::MatrixXcd inverse_green(const Eigen::MatrixXd& H_S, const SpectralDensity& J1,
                                      const SpectralDensity& J2, double w) {
  const int L = static_cast<int>(H_S.rows());
  Eigen::MatrixXcd A = (-H_S).cast<std::complex<double>>();
  A.diagonal().array() += w;
  A(0, 0) -= self_energy(J1, w);
  A(L - 1, L - 1) -= self_energy(J2, w);
  return A;
}

}  // namespace detail

// G(w) = [w I - H_S - Sigma^(1)(w) - Sigma^(2)(w)]^{-1} with the self-energies
// on the attachment sites 1 and L_S. Inside either band the self-energy has a
// negative imaginary part and G exists; on the real axis outside both bands G
// can hit an isolated pole (a bound state), which is reported as an error.
inline Eigen::MatrixXcd retarded_green(const Eigen::MatrixXd& H_S, const SpectralDensity& J1,
                                       const SpectralDensity& J2, double w) {
  detail::check_system_matrix(H_S);
  const Eigen::MatrixXcd A = detail::inverse_green(H_S, J1, J2, w);
  Eigen::FullPivLU<Eigen::MatrixXcd> lu(A);
  if (!lu.isInvertible())
    throw std::runtime_error("retarded_green: singular Green's function at omega = " +
                             std::to_string(w));
  return lu.inverse();
}

// Steady-state system correlation block <c+_p c_q>. The frequency integral
// runs over the union of the two bath supports (outside both, the kernel
// vanishes identically), split at band edges and chemical potentials, with
// adaptive 64-node Gauss-Legendre bisection on each piece. Panels that end on
// a semicircle band edge are integrated in the variable w = W sin(u), which
// turns the edge square root into a smooth cosine. Estimated quadrature error
// above 1e-8 raises quad::QuadratureError carrying the refinement trace.
inline CorrelationMatrix ness_correlations(const Eigen::MatrixXd& H_S, const SpectralDensity& J1,
                                           const SpectralDensity& J2, const ThermalParams& tp1,
                                           const ThermalParams& tp2) {
  detail::check_system_matrix(H_S);
  if (tp1.stats != Statistics::Fermi || tp2.stats != Statistics::Fermi)
    throw std::invalid_argument("ness_correlations: the correlation integral is fermionic");
  const int L = static_cast<int>(H_S.rows());

  // (1/2pi) sum_l J_l(w) n_l(w) conj(g_l) g_l^T with g_l the boundary column
  // of G(w). Where both densities vanish the kernel is zero and G is not
  // needed (it may even be singular there).
  auto kernel = [&](double w) -> Eigen::MatrixXcd {
    const double j1 = J1(w), j2 = J2(w);
    if (j1 == 0.0 && j2 == 0.0) return Eigen::MatrixXcd::Zero(L, L);
    const Eigen::MatrixXcd A = detail::inverse_green(H_S, J1, J2, w);
    Eigen::MatrixXcd rhs = Eigen::MatrixXcd::Zero(L, 2);
    rhs(0, 0) = 1.0;
    rhs(L - 1, 1) = 1.0;
    const Eigen::MatrixXcd cols = Eigen::PartialPivLU<Eigen::MatrixXcd>(A).solve(rhs);
    Eigen::MatrixXcd M = Eigen::MatrixXcd::Zero(L, L);
    if (j1 > 0.0)
      M.noalias() += (j1 * occupation(tp1, w) / (2.0 * M_PI)) *
                     (cols.col(0).conjugate() * cols.col(0).transpose());
    if (j2 > 0.0)
      M.noalias() += (j2 * occupation(tp2, w) / (2.0 * M_PI)) *
                     (cols.col(1).conjugate() * cols.col(1).transpose());
    return M;
  };

  // Split points: support edges of both baths plus any chemical potential
  // inside the union window (a kink of n at low temperature).
  std::vector<double> cuts = {J1.support_min(), J1.support_max(), J2.support_min(),
                              J2.support_max()};
  const double lo = *std::min_element(cuts.begin(), cuts.end());
  const double hi = *std::max_element(cuts.begin(), cuts.end());
  for (double mu : {tp1.mu, tp2.mu})
    if (mu > lo && mu < hi) cuts.push_back(mu);
  std::sort(cuts.begin(), cuts.end());
  const double wtol = 1e-12 * std::max(1.0, hi - lo);

  const auto mnorm = [](const Eigen::MatrixXcd& M) { return M.cwiseAbs().maxCoeff(); };
  Eigen::MatrixXcd C = Eigen::MatrixXcd::Zero(L, L);
  double err_total = 0.0;
  for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
    const double a = cuts[i], b = cuts[i + 1];
    if (!(b - a > wtol)) continue;

    // Use the sin substitution when this piece lies inside a semicircle band
    // and touches one of its edges.
    double W = 0.0;
    for (const SpectralDensity* J : {&J1, &J2}) {
      if (J->kind() != SpectralDensity::Kind::Semicircle || J->Gamma() == 0.0) continue;
      const double We = J->support_max();
      const bool inside = a >= -We - wtol && b <= We + wtol;
      const bool at_edge = std::abs(a + We) <= wtol || std::abs(b - We) <= wtol;
      if (inside && at_edge) {
        W = We;
        break;
      }
    }

    double err = 0.0;
    if (W > 0.0) {
      auto clamp1 = [](double x) { return std::min(1.0, std::max(-1.0, x)); };
      auto g = [&](double u) -> Eigen::MatrixXcd {
        return kernel(W * std::sin(u)) * (W * std::cos(u));
      };
      C += quad::adaptive(g, std::asin(clamp1(a / W)), std::asin(clamp1(b / W)), 1e-9, mnorm, 40,
                          &err);
    } else {
      C += quad::adaptive(kernel, a, b, 1e-9, mnorm, 40, &err);
    }
    err_total += err;
  }
  if (err_total > 1e-8)
    throw quad::QuadratureError(
        "ness_correlations: estimated quadrature error " + std::to_string(err_total) +
            " exceeds 1e-8",
        {{lo, hi, err_total}});

  CorrelationMatrix out;
  out.layout = Layout{0, L, 0};
  out.C = 0.5 * (C + C.adjoint());
  return out;
}

}  // namespace preb
