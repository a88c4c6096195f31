#pragma once
// Exact Gaussian dynamics of the non-interacting set-up via correlation-
// matrix propagation: C(t) = e^{iHt} C(0) e^{-iHt} with H the single-
// particle Hamiltonian of system plus finite baths.  Bath blocks live in the
// chain eigenbasis, where the thermal state is diagonal and the periodic
// refresh is a diagonal overwrite.

#include <cmath>
#include <complex>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "preb/chainmap.hpp"
#include "preb/spectral.hpp"

namespace preb {

// Open chain with unit nearest-neighbour hopping, interaction V on bonds and
// a staggered field h on odd sites (1-indexed: sites 1, 3, 5, ...).
struct SystemSpec {
  int L_S = 2;
  double V = 0.0;
  double h = 0.0;

  void validate() const {
    if (L_S < 2) throw std::invalid_argument("SystemSpec: L_S must be >= 2");
  }
};

// Index map of the global single-particle basis: bath-1 eigenmodes, then
// system sites, then bath-2 eigenmodes, each block contiguous.
struct Layout {
  int L_B1 = 0;
  int L_S = 0;
  int L_B2 = 0;

  int total() const { return L_B1 + L_S + L_B2; }
  int bath1(int a) const { return a; }
  int system(int l) const { return L_B1 + l; }
  int bath2(int a) const { return L_B1 + L_S + a; }
};

struct SingleParticleHamiltonian {
  Layout layout;
  Eigen::MatrixXd H;
};

struct CorrelationMatrix {
  Layout layout;
  Eigen::MatrixXcd C;
};

// System-site occupations n_l = Re C_ll and bond currents
// I_l = 2i (C_{l+1,l} - C_{l,l+1}).
struct Observables {
  std::vector<double> n;
  std::vector<double> I;
};

// Single-particle part of the system Hamiltonian: unit hoppings, h on odd
// sites (1-indexed), interactions excluded by construction.
inline Eigen::MatrixXd system_single_particle(const SystemSpec& sys) {
  sys.validate();
  Eigen::MatrixXd H = Eigen::MatrixXd::Zero(sys.L_S, sys.L_S);
  for (int l = 0; l + 1 < sys.L_S; ++l) H(l, l + 1) = H(l + 1, l) = 1.0;
  for (int l = 0; l < sys.L_S; l += 2) H(l, l) = sys.h;
  return H;
}

// Full single-particle Hamiltonian of system plus two baths in the layout
// above.  Bath blocks are diagonal in their eigenbasis; each bath eigenmode
// couples to the adjacent boundary site with gamma * Phi(0, a).  A
// default-constructed ChainBath stands for "no bath on this side".
inline SingleParticleHamiltonian assemble_hamiltonian(const SystemSpec& sys,
                                                      const ChainBath& bath1,
                                                      const ChainBath& bath2) {
  sys.validate();
  if (sys.V != 0.0)
    throw std::invalid_argument("assemble_hamiltonian: free-fermion backend requires V = 0");
  for (const ChainBath* cb : {&bath1, &bath2}) {
    if (cb->size() > 0 && !cb->eigs)
      throw std::invalid_argument(
          "assemble_hamiltonian: bath eigenbasis missing (call star_basis first)");
  }
  SingleParticleHamiltonian out;
  out.layout = Layout{bath1.size(), sys.L_S, bath2.size()};
  const int N = out.layout.total();
  out.H = Eigen::MatrixXd::Zero(N, N);
  out.H.block(out.layout.system(0), out.layout.system(0), sys.L_S, sys.L_S) =
      system_single_particle(sys);
  for (int a = 0; a < bath1.size(); ++a) {
    out.H(out.layout.bath1(a), out.layout.bath1(a)) = bath1.eigs->E[a];
    const double g = bath1.gamma * bath1.eigs->Phi(0, a);
    out.H(out.layout.system(0), out.layout.bath1(a)) = g;
    out.H(out.layout.bath1(a), out.layout.system(0)) = g;
  }
  for (int a = 0; a < bath2.size(); ++a) {
    out.H(out.layout.bath2(a), out.layout.bath2(a)) = bath2.eigs->E[a];
    const double g = bath2.gamma * bath2.eigs->Phi(0, a);
    out.H(out.layout.system(sys.L_S - 1), out.layout.bath2(a)) = g;
    out.H(out.layout.bath2(a), out.layout.system(sys.L_S - 1)) = g;
  }
  return out;
}

// Thermal occupations of the bath eigenmodes, diag(n(E_a)).
inline Eigen::VectorXd thermal_correlation_block(const ChainBath& cb) {
  if (cb.size() > 0 && !cb.eigs)
    throw std::invalid_argument("thermal_correlation_block: bath eigenbasis missing");
  Eigen::VectorXd occ(cb.size());
  for (int a = 0; a < cb.size(); ++a) occ(a) = occupation(cb.thermal, cb.eigs->E[a]);
  return occ;
}

// Product initial state: baths thermal in their eigenbasis, system sites at
// the given occupations.
inline CorrelationMatrix initial_correlations(const SystemSpec& sys, const ChainBath& bath1,
                                              const ChainBath& bath2,
                                              const std::vector<double>& n_sys) {
  sys.validate();
  if (static_cast<int>(n_sys.size()) != sys.L_S)
    throw std::invalid_argument("initial_correlations: need one occupation per system site");
  CorrelationMatrix out;
  out.layout = Layout{bath1.size(), sys.L_S, bath2.size()};
  out.C = Eigen::MatrixXcd::Zero(out.layout.total(), out.layout.total());
  const Eigen::VectorXd occ1 = thermal_correlation_block(bath1);
  const Eigen::VectorXd occ2 = thermal_correlation_block(bath2);
  for (int a = 0; a < bath1.size(); ++a) out.C(out.layout.bath1(a), out.layout.bath1(a)) = occ1(a);
  for (int a = 0; a < bath2.size(); ++a) out.C(out.layout.bath2(a), out.layout.bath2(a)) = occ2(a);
  for (int l = 0; l < sys.L_S; ++l) out.C(out.layout.system(l), out.layout.system(l)) = n_sys[l];
  return out;
}

// Half-filled product pattern 1,0,1,0,... (first_site_occupied flips it).
inline std::vector<double> half_filled(int L_S, bool first_site_occupied = true) {
  std::vector<double> n(L_S);
  for (int l = 0; l < L_S; ++l) n[l] = (l % 2 == 0) == first_site_occupied ? 1.0 : 0.0;
  return n;
}

// Propagator holding the one-time eigendecomposition of H; evolve applies
// the phases e^{iEt} and re-symmetrizes to keep round-off from accumulating
// over thousands of refresh steps.
class Propagator {
 public:
  explicit Propagator(const SingleParticleHamiltonian& H) : layout_(H.layout) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(H.H);
    if (es.info() != Eigen::Success)
      throw std::runtime_error("Propagator: eigendecomposition failed");
    U_ = es.eigenvectors();
    E_ = es.eigenvalues();
  }

  const Layout& layout() const { return layout_; }

  CorrelationMatrix evolve(const CorrelationMatrix& C, double t) const {
    if (C.layout.total() != static_cast<int>(E_.size()))
      throw std::invalid_argument("Propagator::evolve: dimension mismatch");
    if (t == 0.0) return C;
    Eigen::VectorXcd phase(E_.size());
    for (Eigen::Index k = 0; k < E_.size(); ++k)
      phase(k) = std::exp(std::complex<double>(0.0, E_(k) * t));
    CorrelationMatrix out;
    out.layout = C.layout;
    const Eigen::MatrixXcd D =
        phase.asDiagonal() * (U_.transpose() * C.C * U_) * phase.conjugate().asDiagonal();
    out.C = U_ * D * U_.transpose();
    out.C = 0.5 * (out.C + out.C.adjoint()).eval();
    return out;
  }

 private:
  Layout layout_;
  Eigen::MatrixXd U_;
  Eigen::VectorXd E_;
};

inline CorrelationMatrix evolve(const CorrelationMatrix& C, const SingleParticleHamiltonian& H,
                                double t) {
  return Propagator(H).evolve(C, t);
}

// The PReB refresh: keep the system-system block, discard all system-bath
// and bath-bath coherences, reset bath blocks to their thermal occupations.
// Exact Gaussian image of rho_sys (x) rho_B.
inline CorrelationMatrix preb_refresh(const CorrelationMatrix& C, const ChainBath& bath1,
                                      const ChainBath& bath2) {
  const Layout& lay = C.layout;
  if (bath1.size() != lay.L_B1 || bath2.size() != lay.L_B2)
    throw std::invalid_argument("preb_refresh: bath sizes do not match the layout");
  CorrelationMatrix out;
  out.layout = lay;
  out.C = Eigen::MatrixXcd::Zero(lay.total(), lay.total());
  out.C.block(lay.system(0), lay.system(0), lay.L_S, lay.L_S) =
      C.C.block(lay.system(0), lay.system(0), lay.L_S, lay.L_S);
  const Eigen::VectorXd occ1 = thermal_correlation_block(bath1);
  const Eigen::VectorXd occ2 = thermal_correlation_block(bath2);
  for (int a = 0; a < lay.L_B1; ++a) out.C(lay.bath1(a), lay.bath1(a)) = occ1(a);
  for (int a = 0; a < lay.L_B2; ++a) out.C(lay.bath2(a), lay.bath2(a)) = occ2(a);
  return out;
}

inline Observables observables(const CorrelationMatrix& C) {
  const Layout& lay = C.layout;
  Observables out;
  out.n.reserve(lay.L_S);
  out.I.reserve(lay.L_S > 0 ? lay.L_S - 1 : 0);
  for (int l = 0; l < lay.L_S; ++l) out.n.push_back(C.C(lay.system(l), lay.system(l)).real());
  const std::complex<double> two_i(0.0, 2.0);
  for (int l = 0; l + 1 < lay.L_S; ++l) {
    const std::complex<double> v =
        two_i * (C.C(lay.system(l + 1), lay.system(l)) - C.C(lay.system(l), lay.system(l + 1)));
    out.I.push_back(v.real());
  }
  return out;
}

}  // namespace preb
