#pragma once

// Dense brute-force many-body evolution of the full (system + discretized
// baths) density matrix for tiny instances. This module is the ground-truth
// oracle for the interacting MPS backend: everything is exact dense linear
// algebra on the 2^M-dimensional Fock space, capped at M = 12 modes.

#include <preb/chainmap.hpp>
#include <preb/freefermion.hpp>
#include <preb/jw.hpp>

#include <Eigen/Dense>

#include <complex>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

namespace preb {

inline constexpr int kDenseModeCap = 12;

struct DenseState {
  Layout layout;
  Eigen::MatrixXcd rho;

  int modes() const { return layout.total(); }

  // Contract checks: Hermitian, unit trace, no eigenvalue below -1e-9.
  void validate() const {
    if ((rho - rho.adjoint()).cwiseAbs().maxCoeff() > 1e-10)
      throw std::runtime_error("DenseState: density matrix is not Hermitian");
    if (std::abs(rho.trace() - 1.0) > 1e-10)
      throw std::runtime_error("DenseState: trace differs from one");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(rho, Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() < -1e-9)
      throw std::runtime_error("DenseState: negative eigenvalue");
  }
};

// Quadratic + density-density many-body Hamiltonian from an arbitrary
// single-particle matrix and a list of (i, j, V) interaction bonds:
//   H = sum_pq H1(p,q) c+_p c_q + sum_bonds V n_i n_j.
// Real symmetric in the occupation basis because H1 is real symmetric.
inline Eigen::MatrixXd many_body_from_single_particle(
    const Eigen::MatrixXd& H1, const std::vector<std::tuple<int, int, double>>& bonds = {}) {
  const int M = static_cast<int>(H1.rows());
  if (M < 1 || H1.cols() != M)
    throw std::invalid_argument("many_body_from_single_particle: H1 must be square");
  if (M > kDenseModeCap)
    throw std::invalid_argument("many_body_from_single_particle: exceeds the 12-mode dense cap");
  if ((H1 - H1.transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, H1.cwiseAbs().maxCoeff()))
    throw std::invalid_argument("many_body_from_single_particle: H1 must be symmetric");
  for (const auto& [i, j, V] : bonds)
    if (i < 0 || i >= M || j < 0 || j >= M || i == j)
      throw std::invalid_argument("many_body_from_single_particle: bad interaction bond");

  const std::uint32_t D = std::uint32_t{1} << M;
  Eigen::MatrixXd H = Eigen::MatrixXd::Zero(D, D);
  for (std::uint32_t x = 0; x < D; ++x) {
    double diag = 0.0;
    for (int p = 0; p < M; ++p)
      if (jw::occupied(x, M, p)) diag += H1(p, p);
    for (const auto& [i, j, V] : bonds)
      if (jw::occupied(x, M, i) && jw::occupied(x, M, j)) diag += V;
    H(x, x) = diag;

    for (int p = 0; p < M; ++p)
      for (int q = p + 1; q < M; ++q) {
        if (H1(p, q) == 0.0) continue;
        // c+_p c_q moves a particle q -> p through the Z string between them.
        if (!jw::occupied(x, M, q) || jw::occupied(x, M, p)) continue;
        const std::uint32_t y = jw::flip(jw::flip(x, M, q), M, p);
        const double amp = H1(p, q) * jw::string_sign(x, M, p, q);
        H(y, x) += amp;
        H(x, y) += amp;
      }
  }
  return H;
}

// Layout-aware builder: same geometry as assemble_hamiltonian (baths in their
// eigenbasis, coupled to the boundary sites), plus the V n n bonds between
// neighbouring system sites.
inline Eigen::MatrixXd build_many_body_hamiltonian(const SystemSpec& sys, const ChainBath& bath1,
                                                   const ChainBath& bath2) {
  sys.validate();
  const int M = bath1.size() + sys.L_S + bath2.size();
  if (M > kDenseModeCap)
    throw std::invalid_argument("build_many_body_hamiltonian: exceeds the 12-mode dense cap");
  SystemSpec quadratic = sys;
  quadratic.V = 0.0;
  const auto sp = assemble_hamiltonian(quadratic, bath1, bath2);
  std::vector<std::tuple<int, int, double>> bonds;
  if (sys.V != 0.0)
    for (int l = 0; l + 1 < sys.L_S; ++l)
      bonds.emplace_back(sp.layout.system(l), sp.layout.system(l + 1), sys.V);
  return many_body_from_single_particle(sp.H, bonds);
}

// Exact evolution rho -> e^{-iHt} rho e^{+iHt} through one eigendecomposition,
// reusable across times. Not built for speed; built to be trusted.
class DensePropagator {
 public:
  explicit DensePropagator(const Eigen::MatrixXd& H) {
    if (H.rows() != H.cols() || H.rows() < 1)
      throw std::invalid_argument("DensePropagator: H must be square");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(H);
    if (es.info() != Eigen::Success)
      throw std::runtime_error("DensePropagator: eigendecomposition failed");
    U_ = es.eigenvectors();
    E_ = es.eigenvalues();
  }

  Eigen::MatrixXcd evolve(const Eigen::MatrixXcd& rho, double t) const {
    if (rho.rows() != U_.rows() || rho.cols() != U_.rows())
      throw std::invalid_argument("DensePropagator: dimension mismatch");
    if (t == 0.0) return rho;
    const Eigen::VectorXcd phase =
        (std::complex<double>(0.0, -t) * E_.array()).exp().matrix();
    const Eigen::MatrixXcd P = U_.cast<std::complex<double>>() * phase.asDiagonal() *
                               U_.transpose().cast<std::complex<double>>();
    Eigen::MatrixXcd out = P * rho * P.adjoint();
    return 0.5 * (out + out.adjoint().eval());
  }

 private:
  Eigen::MatrixXd U_;
  Eigen::VectorXd E_;
};

inline DenseState dense_evolve(const DenseState& state, const Eigen::MatrixXd& H, double t) {
  return DenseState{state.layout, DensePropagator(H).evolve(state.rho, t)};
}

// Partial trace keeping the contiguous mode window [keep_begin, keep_begin +
// keep_count). Contiguity is required (and is all the refresh step needs);
// the fermionic and qubit partial traces then agree on every parity-even
// observable, and the states handled here commute with total parity.
inline Eigen::MatrixXcd partial_trace(const Eigen::MatrixXcd& rho, int M, int keep_begin,
                                      int keep_count) {
  if (M < 1 || M > kDenseModeCap || rho.rows() != rho.cols() ||
      rho.rows() != (std::int64_t{1} << M))
    throw std::invalid_argument("partial_trace: dimension mismatch");
  if (keep_begin < 0 || keep_count < 1 || keep_begin + keep_count > M)
    throw std::invalid_argument("partial_trace: keep window out of range");
  const int l = keep_begin;                   // traced modes to the left
  const int r = M - keep_begin - keep_count;  // traced modes to the right
  const std::uint32_t Dm = std::uint32_t{1} << keep_count;
  const std::uint32_t Dl = std::uint32_t{1} << l;
  const std::uint32_t Dr = std::uint32_t{1} << r;
  Eigen::MatrixXcd red = Eigen::MatrixXcd::Zero(Dm, Dm);
  for (std::uint32_t xm = 0; xm < Dm; ++xm)
    for (std::uint32_t ym = 0; ym < Dm; ++ym) {
      std::complex<double> acc = 0.0;
      for (std::uint32_t xl = 0; xl < Dl; ++xl)
        for (std::uint32_t xr = 0; xr < Dr; ++xr) {
          const std::uint32_t row = (xl << (keep_count + r)) | (xm << r) | xr;
          const std::uint32_t col = (xl << (keep_count + r)) | (ym << r) | xr;
          acc += rho(row, col);
        }
      red(xm, ym) = acc;
    }
  return red;
}

// Diagonal of the thermal product state of one bath in its eigenbasis:
// each mode contributes (1 - n(E_a), n(E_a)).
inline Eigen::VectorXd thermal_bath_diagonal(const ChainBath& bath) {
  const Eigen::VectorXd occ = thermal_correlation_block(bath);
  const int n = bath.size();
  Eigen::VectorXd diag = Eigen::VectorXd::Ones(1);
  for (int a = 0; a < n; ++a) {
    Eigen::VectorXd next(diag.size() * 2);
    for (Eigen::Index i = 0; i < diag.size(); ++i) {
      next(2 * i) = diag(i) * (1.0 - occ(a));
      next(2 * i + 1) = diag(i) * occ(a);
    }
    diag = std::move(next);
  }
  return diag;
}

// rho_B1 (x) rho_S (x) rho_B2 with diagonal bath factors.
inline DenseState compose_dense_state(const Layout& layout, const Eigen::VectorXd& bath1_diag,
                                      const Eigen::MatrixXcd& rho_sys,
                                      const Eigen::VectorXd& bath2_diag) {
  const int M = layout.total();
  if (M > kDenseModeCap)
    throw std::invalid_argument("compose_dense_state: exceeds the 12-mode dense cap");
  const std::uint32_t Dm = std::uint32_t{1} << layout.L_S;
  const std::uint32_t Dl = std::uint32_t{1} << layout.L_B1;
  const std::uint32_t Dr = std::uint32_t{1} << layout.L_B2;
  if (bath1_diag.size() != Dl || bath2_diag.size() != Dr || rho_sys.rows() != Dm ||
      rho_sys.cols() != Dm)
    throw std::invalid_argument("compose_dense_state: dimension mismatch");
  DenseState out;
  out.layout = layout;
  out.rho = Eigen::MatrixXcd::Zero(std::int64_t{1} << M, std::int64_t{1} << M);
  const int r = layout.L_B2, m = layout.L_S;
  for (std::uint32_t xl = 0; xl < Dl; ++xl)
    for (std::uint32_t xm = 0; xm < Dm; ++xm)
      for (std::uint32_t ym = 0; ym < Dm; ++ym) {
        if (rho_sys(xm, ym) == 0.0) continue;
        for (std::uint32_t xr = 0; xr < Dr; ++xr) {
          const std::uint32_t row = (xl << (m + r)) | (xm << r) | xr;
          const std::uint32_t col = (xl << (m + r)) | (ym << r) | xr;
          out.rho(row, col) = bath1_diag(xl) * rho_sys(xm, ym) * bath2_diag(xr);
        }
      }
  return out;
}

// Initial product state: thermal baths, diagonal system occupations n_sys.
inline DenseState initial_dense_state(const SystemSpec& sys, const ChainBath& bath1,
                                      const ChainBath& bath2, const std::vector<double>& n_sys) {
  sys.validate();
  if (static_cast<int>(n_sys.size()) != sys.L_S)
    throw std::invalid_argument("initial_dense_state: n_sys size mismatch");
  Layout layout{bath1.size(), sys.L_S, bath2.size()};
  if (layout.total() > kDenseModeCap)
    throw std::invalid_argument("initial_dense_state: exceeds the 12-mode dense cap");
  const std::uint32_t Dm = std::uint32_t{1} << sys.L_S;
  Eigen::VectorXd sys_diag = Eigen::VectorXd::Ones(1);
  for (int l = 0; l < sys.L_S; ++l) {
    if (n_sys[l] < 0.0 || n_sys[l] > 1.0)
      throw std::invalid_argument("initial_dense_state: occupations must lie in [0, 1]");
    Eigen::VectorXd next(sys_diag.size() * 2);
    for (Eigen::Index i = 0; i < sys_diag.size(); ++i) {
      next(2 * i) = sys_diag(i) * (1.0 - n_sys[l]);
      next(2 * i + 1) = sys_diag(i) * n_sys[l];
    }
    sys_diag = std::move(next);
  }
  Eigen::MatrixXcd rho_sys = Eigen::MatrixXcd::Zero(Dm, Dm);
  rho_sys.diagonal() = sys_diag.cast<std::complex<double>>();
  return compose_dense_state(layout, thermal_bath_diagonal(bath1), rho_sys,
                             thermal_bath_diagonal(bath2));
}

// The refresh map: trace out both baths, re-tensor fresh thermal ones.
inline DenseState dense_refresh(const DenseState& state, const ChainBath& bath1,
                                const ChainBath& bath2) {
  const Layout& lay = state.layout;
  if (bath1.size() != lay.L_B1 || bath2.size() != lay.L_B2)
    throw std::invalid_argument("dense_refresh: bath sizes do not match the layout");
  const Eigen::MatrixXcd rho_sys =
      partial_trace(state.rho, lay.total(), lay.L_B1, lay.L_S);
  return compose_dense_state(lay, thermal_bath_diagonal(bath1), rho_sys,
                             thermal_bath_diagonal(bath2));
}

// Single-particle correlations C_pq = Tr(rho c+_p c_q); the Gaussian
// cross-check against the free-fermion engine at V = 0.
inline CorrelationMatrix correlations_from_dense(const DenseState& state) {
  const int M = state.modes();
  const std::uint32_t D = std::uint32_t{1} << M;
  CorrelationMatrix out;
  out.layout = state.layout;
  out.C = Eigen::MatrixXcd::Zero(M, M);
  for (int p = 0; p < M; ++p)
    for (int q = 0; q < M; ++q) {
      std::complex<double> acc = 0.0;
      for (std::uint32_t x = 0; x < D; ++x) {
        if (!jw::occupied(x, M, q)) continue;
        if (p == q) {
          acc += state.rho(x, x);
          continue;
        }
        if (jw::occupied(x, M, p)) continue;
        const std::uint32_t y = jw::flip(jw::flip(x, M, q), M, p);
        // Tr(rho c+_p c_q) picks up rho(x, y) with the string sign of x -> y.
        acc += jw::string_sign(x, M, p, q) * state.rho(x, y);
      }
      out.C(p, q) = acc;
    }
  return out;
}

}  // namespace preb
