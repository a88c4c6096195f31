#pragma once
// Mixed-basis TEBD on the vectorized density matrix.  Bath eigenmodes and
// system sites live on one MPS line with physical dimension 4 per site
// (row-stacked 2x2 density blocks, index 2i + j).  Unitary conjugation
// rho -> U rho U^dag becomes the superoperator U (x) conj(U); long-range
// system-bath couplings are handled by a fermionic-swap network that carries
// a boundary system site past each bath mode in turn, evolving every pair
// while adjacent.  One Trotter step of dt is a forward and a backward half
// sweep of dt/2 each, mirrored in gate order, so the splitting is second
// order.  The swap gate is the fermionic one (sign -1 on the doubly occupied
// pair), which keeps plain two-site hopping gates exact for adjacent modes
// regardless of how the ordering has been permuted.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#ifdef PREB_USE_LAPACKE
#define lapack_complex_float std::complex<float>
#define lapack_complex_double std::complex<double>
#include <lapacke.h>
#endif

#include "preb/chainmap.hpp"
#include "preb/freefermion.hpp"
#include "preb/jw.hpp"

namespace preb {

// --- MPS container ----------------------------------------------------------

enum class Canon : std::uint8_t { None = 0, Left = 1, Right = 2 };

// Placement of bath eigenmodes along the MPS line.  Ascending puts the
// highest-energy bath-1 mode next to the system and the lowest-energy bath-2
// mode next to the system; Descending reverses both bath blocks.  The choice
// affects truncation cost only, not converged observables.
enum class BathModeOrder { Ascending, Descending };

struct TruncationLog {
  double weight_total = 0.0;      // accumulated relative discarded weight
  double weight_last_sweep = 0.0; // same, reset at each forward half sweep
  double amplitude_total = 0.0;   // accumulated sqrt(weight) per truncation:
                                  // bounds the state perturbation, and with it
                                  // the Hermiticity defect of the represented
                                  // density matrix
  int max_chi = 1;                // largest bond dimension reached
  std::vector<std::string> warnings;
};

// Matrix-product state of the vectorized density matrix.  site[i][p] is the
// (left bond) x (right bond) block of site i at physical index p in 0..3.
// `ordering[pos]` is the natural mode index currently held at position pos
// (natural indices follow Layout: bath-1 eigenmodes, system sites, bath-2
// eigenmodes); `home` is the rest ordering the sweeps return to.
struct VectorizedMPS {
  std::vector<std::array<Eigen::MatrixXcd, 4>> site;
  std::vector<int> ordering;
  std::vector<int> home;
  std::vector<Canon> canon;
  Layout layout;
  int chi_max = 64;
  double svd_cutoff = 1e-10;
  TruncationLog log;

  int size() const { return static_cast<int>(site.size()); }

  int bond(int pos) const {  // bond to the right of position pos
    return static_cast<int>(site[pos][0].cols());
  }

  int position_of(int mode) const {
    const auto it = std::find(ordering.begin(), ordering.end(), mode);
    if (it == ordering.end())
      throw std::invalid_argument("VectorizedMPS: no such mode in the ordering");
    return static_cast<int>(it - ordering.begin());
  }

  bool at_rest() const { return ordering == home; }
};

// --- Gates ------------------------------------------------------------------

struct Gate {
  enum class Kind { System, BathFwd, BathBwd, Swap, Identity };
  Kind kind = Kind::Identity;
  int ell = 0;  // bath leg (1 or 2) for the Bath* kinds
  int idx = 0;  // bond index m (System) or bath eigenmode index (Bath*)
  Eigen::MatrixXcd U;  // 16 x 16 superoperator on two adjacent sites

  // Gates built from a swap reorder the two modes they act on.
  bool swaps() const {
    return kind == Kind::BathFwd || kind == Kind::BathBwd || kind == Kind::Swap;
  }
};

struct GateSet {
  double dt = 0.0;
  std::vector<Gate> system;                     // bonds m = 0 .. L_S - 2
  std::array<std::vector<Gate>, 2> bath_fwd;    // per bath, per eigenmode
  std::array<std::vector<Gate>, 2> bath_bwd;
  Gate swap;
  Gate identity;
};

namespace detail {

// Two-site basis |n_left n_right>, index 2 n_left + n_right.

// Fermionic swap: exchanges the two modes, sign -1 when both are occupied.
inline const Eigen::Matrix4d& fermionic_swap() {
  static const Eigen::Matrix4d S = [] {
    Eigen::Matrix4d m = Eigen::Matrix4d::Zero();
    m(0, 0) = 1.0;
    m(1, 2) = 1.0;
    m(2, 1) = 1.0;
    m(3, 3) = -1.0;
    return m;
  }();
  return S;
}

// Pair Hamiltonian of one bath eigenmode (energy E, star coupling kappa)
// with the adjacent boundary system site; the system mode is the left factor.
inline Eigen::Matrix4d bath_pair_hamiltonian(double E, double kappa) {
  Eigen::Matrix4d H = Eigen::Matrix4d::Zero();
  H(1, 1) = E;
  H(3, 3) = E;
  H(1, 2) = kappa;
  H(2, 1) = kappa;
  return H;
}

// Pair Hamiltonian of system bond m (0-based): unit hopping, interaction V
// on the doubly occupied pair, and the staggered field folded in with half
// shares on interior sites and full shares at the chain ends.
inline Eigen::Matrix4d system_pair_hamiltonian(const SystemSpec& sys, int m) {
  if (m < 0 || m + 1 >= sys.L_S)
    throw std::invalid_argument("system_pair_hamiltonian: bond index out of range");
  const Eigen::MatrixXd H1 = system_single_particle(sys);
  const double hL = H1(m, m) * (m == 0 ? 1.0 : 0.5);
  const double hR = H1(m + 1, m + 1) * (m + 1 == sys.L_S - 1 ? 1.0 : 0.5);
  Eigen::Matrix4d H = Eigen::Matrix4d::Zero();
  H(1, 2) = H1(m, m + 1);
  H(2, 1) = H1(m, m + 1);
  H(1, 1) = hR;
  H(2, 2) = hL;
  H(3, 3) = sys.V + hL + hR;
  return H;
}

inline Eigen::Matrix4cd evolution(const Eigen::Matrix4d& H, double t) {
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> es(H);
  if (es.info() != Eigen::Success)
    throw std::runtime_error("tebd: pair Hamiltonian eigendecomposition failed");
  Eigen::Vector4cd phase;
  for (int k = 0; k < 4; ++k)
    phase(k) = std::exp(std::complex<double>(0.0, -es.eigenvalues()(k) * t));
  const Eigen::Matrix4cd V = es.eigenvectors().cast<std::complex<double>>();
  return V * phase.asDiagonal() * V.transpose();
}

// Superoperator of rho -> U rho U^dag in the site-local vectorization: the
// Kronecker factor U (x) conj(U) carries index pairs (rows, cols) grouped by
// ket and bra; regrouping by site gives the 16 x 16 matrix acting on the two
// stacked physical legs (2 i + j each).
inline Eigen::MatrixXcd make_superoperator(const Eigen::Matrix4cd& U) {
  Eigen::MatrixXcd G(16, 16);
  for (int ia = 0; ia < 2; ++ia)
    for (int ja = 0; ja < 2; ++ja)
      for (int ib = 0; ib < 2; ++ib)
        for (int jb = 0; jb < 2; ++jb) {
          const int row = (2 * ia + ja) * 4 + (2 * ib + jb);
          for (int ka = 0; ka < 2; ++ka)
            for (int la = 0; la < 2; ++la)
              for (int kb = 0; kb < 2; ++kb)
                for (int lb = 0; lb < 2; ++lb) {
                  const int col = (2 * ka + la) * 4 + (2 * kb + lb);
                  G(row, col) = U(2 * ia + ib, 2 * ka + kb) *
                                std::conj(U(2 * ja + jb, 2 * la + lb));
                }
        }
  return G;
}

}  // namespace detail

// Builds the full gate set for one Trotter step: plain evolution gates for
// the system bonds and, for every bath eigenmode, composite gates that first
// evolve the (system, mode) pair for dt/2 and then swap them (forward), or
// swap first and evolve after (backward).
inline GateSet build_gates(const SystemSpec& sys, const ChainBath& bath1,
                           const ChainBath& bath2, double dt) {
  sys.validate();
  if (!(dt > 0.0) || !std::isfinite(dt))
    throw std::invalid_argument("build_gates: dt must be > 0");
  for (const ChainBath* cb : {&bath1, &bath2}) {
    if (cb->size() > 0 && !cb->eigs)
      throw std::invalid_argument("build_gates: bath eigenbasis missing (call star_basis first)");
  }
  GateSet g;
  g.dt = dt;
  const Eigen::Matrix4d& S = detail::fermionic_swap();
  g.swap = Gate{Gate::Kind::Swap, 0, 0,
                detail::make_superoperator(S.cast<std::complex<double>>())};
  g.identity = Gate{Gate::Kind::Identity, 0, 0, Eigen::MatrixXcd::Identity(16, 16)};
  for (int m = 0; m + 1 < sys.L_S; ++m) {
    const Eigen::Matrix4cd U = detail::evolution(detail::system_pair_hamiltonian(sys, m), 0.5 * dt);
    g.system.push_back(Gate{Gate::Kind::System, 0, m, detail::make_superoperator(U)});
  }
  const ChainBath* baths[2] = {&bath1, &bath2};
  for (int ell = 0; ell < 2; ++ell) {
    const ChainBath& cb = *baths[ell];
    for (int a = 0; a < cb.size(); ++a) {
      const double kappa = cb.gamma * cb.eigs->Phi(0, a);
      const Eigen::Matrix4cd U =
          detail::evolution(detail::bath_pair_hamiltonian(cb.eigs->E[a], kappa), 0.5 * dt);
      g.bath_fwd[ell].push_back(
          Gate{Gate::Kind::BathFwd, ell + 1, a,
               detail::make_superoperator((S.cast<std::complex<double>>() * U).eval())});
      g.bath_bwd[ell].push_back(
          Gate{Gate::Kind::BathBwd, ell + 1, a,
               detail::make_superoperator((U * S.cast<std::complex<double>>()).eval())});
    }
  }
  return g;
}

// --- Two-site primitives ----------------------------------------------------

// Which way the orthogonality centre moves after a two-site update.
enum class Sweep { Right, Left };

namespace detail {

struct SvdSplit {
  Eigen::MatrixXcd U;   // m x kept
  Eigen::VectorXd S;    // kept
  Eigen::MatrixXcd Vd;  // kept x n
  double discarded = 0.0;  // relative discarded weight
  bool exploded = false;   // chi cap forced a discard above the warning level
};

inline void svd_thin(const Eigen::MatrixXcd& B, Eigen::MatrixXcd& U, Eigen::VectorXd& S,
                     Eigen::MatrixXcd& Vd) {
#ifdef PREB_USE_LAPACKE
  const lapack_int m = static_cast<lapack_int>(B.rows());
  const lapack_int n = static_cast<lapack_int>(B.cols());
  const lapack_int k = std::min(m, n);
  Eigen::MatrixXcd A = B;  // zgesdd destroys its input
  U.resize(m, k);
  S.resize(k);
  Vd.resize(k, n);
  const lapack_int info =
      LAPACKE_zgesdd(LAPACK_COL_MAJOR, 'S', m, n, A.data(), m, S.data(), U.data(), m,
                     Vd.data(), k);
  if (info == 0) return;
  // zgesdd can fail to converge on rare inputs; fall back to the slow path.
#endif
  Eigen::JacobiSVD<Eigen::MatrixXcd> svd(B, Eigen::ComputeThinU | Eigen::ComputeThinV);
  U = svd.matrixU();
  S = svd.singularValues();
  Vd = svd.matrixV().adjoint();
}

// Thin SVD with the two-knob truncation: singular values below 1e-14 are
// always dropped, the tail with relative weight below `cutoff` is dropped,
// and the result is capped at chi_max.  No renormalization: the state norm
// is physical (the trace lives in it).
inline SvdSplit svd_truncate(const Eigen::MatrixXcd& B, int chi_max, double cutoff) {
  SvdSplit out;
  Eigen::MatrixXcd U, Vd;
  Eigen::VectorXd S;
  svd_thin(B, U, S, Vd);
  const int k = static_cast<int>(S.size());
  const double total = S.squaredNorm();
  int kept = k;
  while (kept > 1 && S(kept - 1) < 1e-14) --kept;
  if (total > 0.0) {
    double tail = 0.0;
    while (kept > 1) {
      const double next = tail + S(kept - 1) * S(kept - 1);
      if (next >= cutoff * total) break;
      tail = next;
      --kept;
    }
  }
  if (kept > chi_max) {
    double capped = 0.0;
    for (int i = chi_max; i < kept; ++i) capped += S(i) * S(i);
    if (total > 0.0 && capped > 1e-6 * total) out.exploded = true;
    kept = chi_max;
  }
  double disc = 0.0;
  for (int i = kept; i < k; ++i) disc += S(i) * S(i);
  out.discarded = total > 0.0 ? disc / total : 0.0;
  out.U = U.leftCols(kept);
  out.S = S.head(kept);
  out.Vd = Vd.topRows(kept);
  return out;
}

}  // namespace detail

// Applies a two-site gate at (pos, pos+1) and splits the result with a
// truncated SVD.  The orthogonality centre ends on the right site for a
// rightward sweep (left tensor left-canonical) and vice versa.
inline void apply_two_site(VectorizedMPS& mps, int pos, const Gate& g, Sweep dir) {
  if (pos < 0 || pos + 1 >= mps.size())
    throw std::invalid_argument("apply_two_site: position out of range");
  const int l = static_cast<int>(mps.site[pos][0].rows());
  const int r = static_cast<int>(mps.site[pos + 1][0].cols());
  std::array<Eigen::MatrixXcd, 16> theta;
  for (int p = 0; p < 4; ++p)
    for (int q = 0; q < 4; ++q) theta[4 * p + q].noalias() = mps.site[pos][p] * mps.site[pos + 1][q];
  Eigen::MatrixXcd B = Eigen::MatrixXcd::Zero(4 * l, 4 * r);
  for (int p = 0; p < 4; ++p)
    for (int q = 0; q < 4; ++q) {
      Eigen::MatrixXcd blk = Eigen::MatrixXcd::Zero(l, r);
      for (int pp = 0; pp < 4; ++pp)
        for (int qq = 0; qq < 4; ++qq) {
          const std::complex<double> c = g.U(4 * p + q, 4 * pp + qq);
          if (c != std::complex<double>(0.0, 0.0)) blk.noalias() += c * theta[4 * pp + qq];
        }
      B.block(p * l, q * r, l, r) = blk;
    }
  detail::SvdSplit s = detail::svd_truncate(B, mps.chi_max, mps.svd_cutoff);
  const int kept = static_cast<int>(s.S.size());
  mps.log.weight_total += s.discarded;
  mps.log.weight_last_sweep += s.discarded;
  mps.log.amplitude_total += std::sqrt(s.discarded);
  mps.log.max_chi = std::max(mps.log.max_chi, kept);
  if (s.exploded) {
    std::ostringstream msg;
    msg << "bond explosion at position " << pos << ": chi_max = " << mps.chi_max
        << " forced relative discarded weight " << s.discarded;
    mps.log.warnings.push_back(msg.str());
  }
  if (dir == Sweep::Right) {
    for (int p = 0; p < 4; ++p) mps.site[pos][p] = s.U.block(p * l, 0, l, kept);
    const Eigen::MatrixXcd W = s.S.asDiagonal() * s.Vd;
    for (int q = 0; q < 4; ++q) mps.site[pos + 1][q] = W.middleCols(q * r, r);
    mps.canon[pos] = Canon::Left;
    mps.canon[pos + 1] = Canon::None;
  } else {
    const Eigen::MatrixXcd W = s.U * s.S.asDiagonal();
    for (int p = 0; p < 4; ++p) mps.site[pos][p] = W.block(p * l, 0, l, kept);
    for (int q = 0; q < 4; ++q) mps.site[pos + 1][q] = s.Vd.middleCols(q * r, r);
    mps.canon[pos] = Canon::None;
    mps.canon[pos + 1] = Canon::Right;
  }
  if (g.swaps()) std::swap(mps.ordering[pos], mps.ordering[pos + 1]);
}

// Orthogonality-centre moves without truncation; these are the identity-gate
// applications of the initial and final steps, done as QR for stability.
inline void shift_center_right(VectorizedMPS& mps, int pos) {
  if (pos < 0 || pos + 1 >= mps.size())
    throw std::invalid_argument("shift_center_right: position out of range");
  const int l = static_cast<int>(mps.site[pos][0].rows());
  const int r = static_cast<int>(mps.site[pos][0].cols());
  Eigen::MatrixXcd M(4 * l, r);
  for (int p = 0; p < 4; ++p) M.block(p * l, 0, l, r) = mps.site[pos][p];
  Eigen::HouseholderQR<Eigen::MatrixXcd> qr(M);
  const int k = std::min(4 * l, r);
  const Eigen::MatrixXcd Q =
      qr.householderQ() * Eigen::MatrixXcd::Identity(4 * l, k);
  const Eigen::MatrixXcd R =
      qr.matrixQR().topRows(k).triangularView<Eigen::Upper>();
  for (int p = 0; p < 4; ++p) mps.site[pos][p] = Q.block(p * l, 0, l, k);
  for (int q = 0; q < 4; ++q)
    mps.site[pos + 1][q] = (R * mps.site[pos + 1][q]).eval();
  mps.canon[pos] = Canon::Left;
  mps.canon[pos + 1] = Canon::None;
}

inline void shift_center_left(VectorizedMPS& mps, int pos) {
  if (pos < 1 || pos >= mps.size())
    throw std::invalid_argument("shift_center_left: position out of range");
  const int l = static_cast<int>(mps.site[pos][0].rows());
  const int r = static_cast<int>(mps.site[pos][0].cols());
  Eigen::MatrixXcd M(l, 4 * r);
  for (int q = 0; q < 4; ++q) M.middleCols(q * r, r) = mps.site[pos][q];
  Eigen::HouseholderQR<Eigen::MatrixXcd> qr(M.adjoint());
  const int k = std::min(4 * r, l);
  const Eigen::MatrixXcd Q =
      qr.householderQ() * Eigen::MatrixXcd::Identity(4 * r, k);
  const Eigen::MatrixXcd R = qr.matrixQR().topRows(k).triangularView<Eigen::Upper>();
  const Eigen::MatrixXcd Qd = Q.adjoint();  // k x 4r
  for (int q = 0; q < 4; ++q) mps.site[pos][q] = Qd.middleCols(q * r, r);
  for (int p = 0; p < 4; ++p)
    mps.site[pos - 1][p] = (mps.site[pos - 1][p] * R.adjoint()).eval();
  mps.canon[pos] = Canon::Right;
  mps.canon[pos - 1] = Canon::None;
}

// Spot check of the canon flags against the actual isometry property.
inline bool check_canon(const VectorizedMPS& mps, double tol = 1e-10) {
  for (int i = 0; i < mps.size(); ++i) {
    const int l = static_cast<int>(mps.site[i][0].rows());
    const int r = static_cast<int>(mps.site[i][0].cols());
    if (mps.canon[i] == Canon::Left) {
      Eigen::MatrixXcd acc = Eigen::MatrixXcd::Zero(r, r);
      for (int p = 0; p < 4; ++p) acc.noalias() += mps.site[i][p].adjoint() * mps.site[i][p];
      if ((acc - Eigen::MatrixXcd::Identity(r, r)).cwiseAbs().maxCoeff() > tol) return false;
    } else if (mps.canon[i] == Canon::Right) {
      Eigen::MatrixXcd acc = Eigen::MatrixXcd::Zero(l, l);
      for (int p = 0; p < 4; ++p) acc.noalias() += mps.site[i][p] * mps.site[i][p].adjoint();
      if ((acc - Eigen::MatrixXcd::Identity(l, l)).cwiseAbs().maxCoeff() > tol) return false;
    }
  }
  return true;
}

// --- State construction -----------------------------------------------------

namespace detail {

inline std::array<Eigen::MatrixXcd, 4> product_site(double v0, double v3) {
  std::array<Eigen::MatrixXcd, 4> t;
  for (int p = 0; p < 4; ++p) t[p] = Eigen::MatrixXcd::Zero(1, 1);
  t[0](0, 0) = v0;
  t[3](0, 0) = v3;
  return t;
}

inline std::vector<int> rest_ordering(const Layout& lay, BathModeOrder order) {
  std::vector<int> home(lay.total());
  std::iota(home.begin(), home.end(), 0);
  if (order == BathModeOrder::Descending) {
    std::reverse(home.begin(), home.begin() + lay.L_B1);
    std::reverse(home.begin() + lay.L_B1 + lay.L_S, home.end());
  }
  return home;
}

inline void left_canonicalize(VectorizedMPS& mps) {
  std::fill(mps.canon.begin(), mps.canon.end(), Canon::None);
  for (int pos = 0; pos + 1 < mps.size(); ++pos) shift_center_right(mps, pos);
}

}  // namespace detail

// Product initial state: every bath eigenmode carries the vectorized thermal
// block diag(1 - n(E), n(E)); system sites carry diag(1 - n_l, n_l) from the
// occupation pattern -- pure for n_l in {0, 1}, a mixed product block
// otherwise, mirroring what the Gaussian backend accepts.  Fully
// left-canonicalized, trace 1.
inline VectorizedMPS initial_state(const SystemSpec& sys, const ChainBath& bath1,
                                   const ChainBath& bath2, const std::vector<double>& n_sys,
                                   int chi_max, double svd_cutoff = 1e-10,
                                   BathModeOrder order = BathModeOrder::Ascending) {
  sys.validate();
  if (static_cast<int>(n_sys.size()) != sys.L_S)
    throw std::invalid_argument("initial_state: need one occupation per system site");
  for (const double n : n_sys) {
    if (!(n >= 0.0 && n <= 1.0))
      throw std::invalid_argument("initial_state: system occupations must lie in [0, 1]");
  }
  if (chi_max < 1) throw std::invalid_argument("initial_state: chi_max must be >= 1");
  if (!(svd_cutoff >= 0.0))
    throw std::invalid_argument("initial_state: svd_cutoff must be >= 0");
  const Eigen::VectorXd occ1 = thermal_correlation_block(bath1);
  const Eigen::VectorXd occ2 = thermal_correlation_block(bath2);
  VectorizedMPS mps;
  mps.layout = Layout{bath1.size(), sys.L_S, bath2.size()};
  mps.chi_max = chi_max;
  mps.svd_cutoff = svd_cutoff;
  mps.home = detail::rest_ordering(mps.layout, order);
  mps.ordering = mps.home;
  const int N = mps.layout.total();
  mps.site.resize(N);
  mps.canon.assign(N, Canon::None);
  for (int pos = 0; pos < N; ++pos) {
    const int mode = mps.home[pos];
    if (mode < mps.layout.L_B1) {
      mps.site[pos] = detail::product_site(1.0 - occ1(mode), occ1(mode));
    } else if (mode < mps.layout.L_B1 + mps.layout.L_S) {
      const double n = n_sys[mode - mps.layout.L_B1];
      mps.site[pos] = detail::product_site(1.0 - n, n);
    } else {
      const int a = mode - mps.layout.L_B1 - mps.layout.L_S;
      mps.site[pos] = detail::product_site(1.0 - occ2(a), occ2(a));
    }
  }
  detail::left_canonicalize(mps);
  return mps;
}

// --- Sweep schedule ---------------------------------------------------------

// Shifts the first system site to the left end of the chain while converting
// the MPS to right-canonical form; the sweeps then shuttle it back and forth
// so it visits every bath-1 mode once per half sweep.
inline void initial_step(VectorizedMPS& mps, const GateSet& g) {
  if (!mps.at_rest())
    throw std::logic_error("initial_step: MPS is not in its rest ordering");
  const int N = mps.size();
  for (int pos = N - 1; pos > mps.layout.L_B1; --pos) shift_center_left(mps, pos);
  for (int pos = mps.layout.L_B1 - 1; pos >= 0; --pos)
    apply_two_site(mps, pos, g.swap, Sweep::Left);
}

// Left-to-right half sweep of dt/2: composite bath-1 gates carry the first
// system site back through the bath-1 block, plain gates evolve the system
// bonds, and composite bath-2 gates carry the last system site to the right
// end.  Expects the form initial_step (or a backward half sweep) leaves.
inline void half_sweep_forward(VectorizedMPS& mps, const GateSet& g) {
  const Layout& lay = mps.layout;
  if (mps.ordering.empty() || mps.ordering.front() != lay.system(0))
    throw std::logic_error(
        "half_sweep_forward: first system site is not at the left end (run initial_step)");
  mps.log.weight_last_sweep = 0.0;
  int pos = 0;
  for (int k = 0; k < lay.L_B1; ++k, ++pos) {
    const int mode = mps.ordering[pos + 1];
    if (mode < 0 || mode >= lay.L_B1)
      throw std::logic_error("half_sweep_forward: expected a bath-1 mode next to the system head");
    apply_two_site(mps, pos, g.bath_fwd[0].at(mode), Sweep::Right);
  }
  for (int m = 0; m + 1 < lay.L_S; ++m, ++pos) {
    if (mps.ordering[pos] != lay.system(m) || mps.ordering[pos + 1] != lay.system(m + 1))
      throw std::logic_error("half_sweep_forward: system block out of order");
    apply_two_site(mps, pos, g.system.at(m), Sweep::Right);
  }
  for (int k = 0; k < lay.L_B2; ++k, ++pos) {
    const int mode = mps.ordering[pos + 1] - lay.L_B1 - lay.L_S;
    if (mode < 0 || mode >= lay.L_B2)
      throw std::logic_error("half_sweep_forward: expected a bath-2 mode next to the system tail");
    apply_two_site(mps, pos, g.bath_fwd[1].at(mode), Sweep::Right);
  }
}

// Right-to-left mirror of the forward half sweep; the two together advance
// the state by one full Trotter step dt at second order.
inline void half_sweep_backward(VectorizedMPS& mps, const GateSet& g) {
  const Layout& lay = mps.layout;
  const int N = mps.size();
  if (mps.ordering.empty() || mps.ordering.back() != lay.system(lay.L_S - 1))
    throw std::logic_error(
        "half_sweep_backward: last system site is not at the right end (run half_sweep_forward)");
  int pos = N - 2;
  for (int k = 0; k < lay.L_B2; ++k, --pos) {
    const int mode = mps.ordering[pos] - lay.L_B1 - lay.L_S;
    if (mode < 0 || mode >= lay.L_B2)
      throw std::logic_error("half_sweep_backward: expected a bath-2 mode next to the system tail");
    apply_two_site(mps, pos, g.bath_bwd[1].at(mode), Sweep::Left);
  }
  for (int m = lay.L_S - 2; m >= 0; --m, --pos) {
    if (mps.ordering[pos] != lay.system(m) || mps.ordering[pos + 1] != lay.system(m + 1))
      throw std::logic_error("half_sweep_backward: system block out of order");
    apply_two_site(mps, pos, g.system.at(m), Sweep::Left);
  }
  for (int k = 0; k < lay.L_B1; ++k, --pos) {
    const int mode = mps.ordering[pos];
    if (mode < 0 || mode >= lay.L_B1)
      throw std::logic_error("half_sweep_backward: expected a bath-1 mode next to the system head");
    apply_two_site(mps, pos, g.bath_bwd[0].at(mode), Sweep::Left);
  }
}

// One full Trotter step dt.
inline void sweep(VectorizedMPS& mps, const GateSet& g) {
  half_sweep_forward(mps, g);
  half_sweep_backward(mps, g);
}

// Restores the first system site to its rest position and left-canonicalizes,
// leaving the MPS ready for trace-out or the next refresh.
inline void final_step(VectorizedMPS& mps, const GateSet& g) {
  const Layout& lay = mps.layout;
  if (mps.ordering.empty() || mps.ordering.front() != lay.system(0))
    throw std::logic_error("final_step: first system site is not at the left end");
  for (int pos = 0; pos < lay.L_B1; ++pos) apply_two_site(mps, pos, g.swap, Sweep::Right);
  for (int pos = lay.L_B1; pos + 1 < mps.size(); ++pos) shift_center_right(mps, pos);
  if (!mps.at_rest())
    throw std::logic_error("final_step: ordering failed to return to rest");
}

// --- Observables ------------------------------------------------------------

namespace detail {

// Contraction vector of a one-site operator: v[2i+j] = O(j,i), so that the
// dot product with the vectorized density block is Tr(O rho).
inline Eigen::Vector4cd contraction_vector(const Eigen::Matrix2cd& O) {
  Eigen::Vector4cd v;
  v << O(0, 0), O(1, 0), O(0, 1), O(1, 1);
  return v;
}

inline const Eigen::Vector4cd& vec_identity() {
  static const Eigen::Vector4cd v = contraction_vector(Eigen::Matrix2cd::Identity());
  return v;
}

inline Eigen::MatrixXcd contracted_site(const VectorizedMPS& mps, int pos,
                                        const Eigen::Vector4cd& v) {
  Eigen::MatrixXcd M = v(0) * mps.site[pos][0];
  for (int p = 1; p < 4; ++p) {
    if (v(p) != std::complex<double>(0.0, 0.0)) M.noalias() += v(p) * mps.site[pos][p];
  }
  return M;
}

}  // namespace detail

// Trace functional: contraction with the vectorized identity at every site.
inline std::complex<double> trace(const VectorizedMPS& mps) {
  Eigen::MatrixXcd L = Eigen::MatrixXcd::Identity(1, 1);
  for (int pos = 0; pos < mps.size(); ++pos)
    L = (L * detail::contracted_site(mps, pos, detail::vec_identity())).eval();
  return L(0, 0);
}

// Hermitian observables on an exactly Hermitian state have real expectations;
// truncation perturbs the state by the logged amplitude, so the admissible
// imaginary residue grows with it (and stays at 1e-8 when nothing has been
// truncated).
inline double residue_tolerance(const VectorizedMPS& mps) {
  return std::max(1e-8, mps.log.amplitude_total);
}

namespace detail {

inline double real_part(std::complex<double> val, double tol, const char* what) {
  if (std::abs(val.imag()) > tol) {
    std::ostringstream msg;
    msg << what << ": imaginary residue " << val.imag() << " exceeds " << tol;
    throw std::runtime_error(msg.str());
  }
  return val.real();
}

inline double normalization(const VectorizedMPS& mps, std::complex<double> tr, double tol,
                            const char* what) {
  const double tr_re = real_part(tr, tol, what);
  if (std::abs(tr_re) < 0.5) {
    std::ostringstream msg;
    msg << what << ": state trace " << tr_re << " has drifted too far from 1";
    throw std::runtime_error(msg.str());
  }
  return tr_re;
}

}  // namespace detail

// Tr(O rho) / Tr(rho) for a one-site operator at the given natural mode index;
// valid in any ordering since one-site qubit observables carry no string.
// Normalizing by the trace keeps truncation-induced trace drift from biasing
// observables; exactly evolved states have trace 1 and are unaffected.
inline double expectation(const VectorizedMPS& mps, const Eigen::Matrix2cd& O, int mode) {
  const int target = mps.position_of(mode);
  Eigen::MatrixXcd L = Eigen::MatrixXcd::Identity(1, 1);
  for (int pos = 0; pos < mps.size(); ++pos) {
    const Eigen::Vector4cd& v = pos == target
                                    ? static_cast<const Eigen::Vector4cd&>(detail::contraction_vector(O))
                                    : detail::vec_identity();
    L = (L * detail::contracted_site(mps, pos, v)).eval();
  }
  const double tol = residue_tolerance(mps);
  const double tr = detail::normalization(mps, trace(mps), tol, "expectation");
  return detail::real_part(L(0, 0), tol, "expectation") / tr;
}

namespace detail {

// Tr((O1 (x) O2) rho) on natural modes (mode, mode+1), which must sit on
// adjacent positions in that order; complex-valued building block for the
// current, where the combination 2i(<s- s+> - <s+ s->) is real.
inline std::complex<double> pair_expectation(const VectorizedMPS& mps,
                                             const Eigen::Matrix2cd& O1,
                                             const Eigen::Matrix2cd& O2, int mode) {
  const int p1 = mps.position_of(mode);
  const int p2 = mps.position_of(mode + 1);
  if (p2 != p1 + 1)
    throw std::logic_error(
        "expectation: sites are not adjacent in the current ordering (run final_step)");
  Eigen::MatrixXcd L = Eigen::MatrixXcd::Identity(1, 1);
  for (int pos = 0; pos < mps.size(); ++pos) {
    Eigen::Vector4cd v = vec_identity();
    if (pos == p1) v = contraction_vector(O1);
    if (pos == p2) v = contraction_vector(O2);
    L = (L * contracted_site(mps, pos, v)).eval();
  }
  return L(0, 0);
}

}  // namespace detail

// Tr((O1 (x) O2) rho) / Tr(rho) for a bond-local Hermitian observable.
inline double expectation(const VectorizedMPS& mps, const Eigen::Matrix2cd& O1,
                          const Eigen::Matrix2cd& O2, int mode) {
  const double tol = residue_tolerance(mps);
  const double tr = detail::normalization(mps, trace(mps), tol, "expectation");
  return detail::real_part(detail::pair_expectation(mps, O1, O2, mode), tol, "expectation") / tr;
}

// System-site occupations and bond currents I_l = 2i (C_{l+1,l} - C_{l,l+1}),
// normalized by the state trace; requires the rest ordering, where system
// sites are adjacent.
inline Observables measure(const VectorizedMPS& mps) {
  if (!mps.at_rest())
    throw std::logic_error("measure: MPS is mid-sweep; run final_step first");
  const Layout& lay = mps.layout;
  const int N = mps.size();
  std::vector<Eigen::MatrixXcd> pre(N + 1), suf(N + 1);
  pre[0] = Eigen::MatrixXcd::Identity(1, 1);
  for (int pos = 0; pos < N; ++pos)
    pre[pos + 1] = (pre[pos] * detail::contracted_site(mps, pos, detail::vec_identity())).eval();
  suf[N] = Eigen::MatrixXcd::Identity(1, 1);
  for (int pos = N - 1; pos >= 0; --pos)
    suf[pos] = (detail::contracted_site(mps, pos, detail::vec_identity()) * suf[pos + 1]).eval();
  const double im_tol = residue_tolerance(mps);
  const double tr = detail::normalization(mps, pre[N](0, 0), im_tol, "measure");
  const Eigen::Vector4cd vn = detail::contraction_vector(jw::number());
  const Eigen::Vector4cd vminus = detail::contraction_vector(jw::lower());
  const Eigen::Vector4cd vplus = detail::contraction_vector(jw::raise());
  Observables out;
  out.n.reserve(lay.L_S);
  out.I.reserve(lay.L_S - 1);
  for (int l = 0; l < lay.L_S; ++l) {
    const int pos = lay.system(l);
    const Eigen::MatrixXcd val = pre[pos] * detail::contracted_site(mps, pos, vn) * suf[pos + 1];
    out.n.push_back(detail::real_part(val(0, 0), im_tol, "measure") / tr);
  }
  for (int l = 0; l + 1 < lay.L_S; ++l) {
    const int pos = lay.system(l);
    const Eigen::MatrixXcd up = pre[pos] * detail::contracted_site(mps, pos, vminus) *
                                detail::contracted_site(mps, pos + 1, vplus) * suf[pos + 2];
    const Eigen::MatrixXcd dn = pre[pos] * detail::contracted_site(mps, pos, vplus) *
                                detail::contracted_site(mps, pos + 1, vminus) * suf[pos + 2];
    const std::complex<double> I = std::complex<double>(0.0, 2.0) * (up(0, 0) - dn(0, 0));
    out.I.push_back(detail::real_part(I, im_tol, "measure") / tr);
  }
  return out;
}

// --- Trace-out and refresh --------------------------------------------------

// Contracts every bath site with the vectorized identity, leaving the system
// reduced density matrix as an L_S-site MPS in left-canonical form.
inline VectorizedMPS trace_out_baths(const VectorizedMPS& mps) {
  if (!mps.at_rest())
    throw std::logic_error("trace_out_baths: MPS is mid-sweep; run final_step first");
  const Layout& lay = mps.layout;
  Eigen::MatrixXcd L = Eigen::MatrixXcd::Identity(1, 1);
  for (int pos = 0; pos < lay.L_B1; ++pos)
    L = (L * detail::contracted_site(mps, pos, detail::vec_identity())).eval();
  Eigen::MatrixXcd R = Eigen::MatrixXcd::Identity(1, 1);
  for (int pos = mps.size() - 1; pos >= lay.L_B1 + lay.L_S; --pos)
    R = (detail::contracted_site(mps, pos, detail::vec_identity()) * R).eval();
  VectorizedMPS out;
  out.layout = Layout{0, lay.L_S, 0};
  out.chi_max = mps.chi_max;
  out.svd_cutoff = mps.svd_cutoff;
  out.log = mps.log;
  out.home.resize(lay.L_S);
  std::iota(out.home.begin(), out.home.end(), 0);
  out.ordering = out.home;
  out.canon.assign(lay.L_S, Canon::None);
  out.site.resize(lay.L_S);
  for (int l = 0; l < lay.L_S; ++l) out.site[l] = mps.site[lay.system(l)];
  for (int p = 0; p < 4; ++p) {
    out.site[0][p] = (L * out.site[0][p]).eval();
    out.site[lay.L_S - 1][p] = (out.site[lay.L_S - 1][p] * R).eval();
  }
  detail::left_canonicalize(out);
  return out;
}

// Rebuilds the full chain from a system-only MPS and freshly thermal baths;
// the periodic-refresh half of the method.
inline VectorizedMPS reassemble(const VectorizedMPS& system_mps, const ChainBath& bath1,
                                const ChainBath& bath2,
                                BathModeOrder order = BathModeOrder::Ascending) {
  if (system_mps.layout.L_B1 != 0 || system_mps.layout.L_B2 != 0)
    throw std::invalid_argument("reassemble: expected a system-only MPS");
  if (!system_mps.at_rest())
    throw std::logic_error("reassemble: system MPS is not in its rest ordering");
  const Eigen::VectorXd occ1 = thermal_correlation_block(bath1);
  const Eigen::VectorXd occ2 = thermal_correlation_block(bath2);
  VectorizedMPS mps;
  mps.layout = Layout{bath1.size(), system_mps.layout.L_S, bath2.size()};
  mps.chi_max = system_mps.chi_max;
  mps.svd_cutoff = system_mps.svd_cutoff;
  mps.log = system_mps.log;
  mps.home = detail::rest_ordering(mps.layout, order);
  mps.ordering = mps.home;
  const int N = mps.layout.total();
  mps.site.resize(N);
  mps.canon.assign(N, Canon::None);
  for (int pos = 0; pos < N; ++pos) {
    const int mode = mps.home[pos];
    if (mode < mps.layout.L_B1) {
      mps.site[pos] = detail::product_site(1.0 - occ1(mode), occ1(mode));
    } else if (mode < mps.layout.L_B1 + mps.layout.L_S) {
      mps.site[pos] = system_mps.site[mode - mps.layout.L_B1];
    } else {
      const int a = mode - mps.layout.L_B1 - mps.layout.L_S;
      mps.site[pos] = detail::product_site(1.0 - occ2(a), occ2(a));
    }
  }
  detail::left_canonicalize(mps);
  return mps;
}

// --- Checkpointing ----------------------------------------------------------

namespace detail {

constexpr char kMpsMagic[9] = "PREBMPS1";

template <class T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
void read_pod(std::istream& is, T& v) {
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: truncated stream");
}

}  // namespace detail

inline void save_checkpoint(const VectorizedMPS& mps, std::ostream& os) {
  os.write(detail::kMpsMagic, 8);
  detail::write_pod(os, static_cast<std::int32_t>(mps.size()));
  detail::write_pod(os, static_cast<std::int32_t>(mps.layout.L_B1));
  detail::write_pod(os, static_cast<std::int32_t>(mps.layout.L_S));
  detail::write_pod(os, static_cast<std::int32_t>(mps.layout.L_B2));
  detail::write_pod(os, static_cast<std::int32_t>(mps.chi_max));
  detail::write_pod(os, mps.svd_cutoff);
  for (const int v : mps.ordering) detail::write_pod(os, static_cast<std::int32_t>(v));
  for (const int v : mps.home) detail::write_pod(os, static_cast<std::int32_t>(v));
  for (const Canon c : mps.canon) detail::write_pod(os, static_cast<std::uint8_t>(c));
  detail::write_pod(os, mps.log.weight_total);
  detail::write_pod(os, mps.log.weight_last_sweep);
  detail::write_pod(os, mps.log.amplitude_total);
  detail::write_pod(os, static_cast<std::int32_t>(mps.log.max_chi));
  detail::write_pod(os, static_cast<std::uint32_t>(mps.log.warnings.size()));
  for (const std::string& w : mps.log.warnings) {
    detail::write_pod(os, static_cast<std::uint32_t>(w.size()));
    os.write(w.data(), static_cast<std::streamsize>(w.size()));
  }
  for (const auto& site : mps.site) {
    for (int p = 0; p < 4; ++p) {
      detail::write_pod(os, static_cast<std::int32_t>(site[p].rows()));
      detail::write_pod(os, static_cast<std::int32_t>(site[p].cols()));
      os.write(reinterpret_cast<const char*>(site[p].data()),
               static_cast<std::streamsize>(sizeof(std::complex<double>) * site[p].size()));
    }
  }
  if (!os) throw std::runtime_error("checkpoint: write failed");
}

inline void save_checkpoint(const VectorizedMPS& mps, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  save_checkpoint(mps, os);
}

inline VectorizedMPS load_checkpoint(std::istream& is) {
  char magic[8];
  is.read(magic, 8);
  if (!is || std::string(magic, 8) != std::string(detail::kMpsMagic, 8))
    throw std::runtime_error("checkpoint: unrecognized format header");
  std::int32_t N = 0, L_B1 = 0, L_S = 0, L_B2 = 0, chi_max = 0;
  detail::read_pod(is, N);
  detail::read_pod(is, L_B1);
  detail::read_pod(is, L_S);
  detail::read_pod(is, L_B2);
  detail::read_pod(is, chi_max);
  if (N < 0 || L_B1 < 0 || L_S < 0 || L_B2 < 0 || L_B1 + L_S + L_B2 != N || chi_max < 1)
    throw std::runtime_error("checkpoint: inconsistent dimensions");
  VectorizedMPS mps;
  mps.layout = Layout{L_B1, L_S, L_B2};
  mps.chi_max = chi_max;
  detail::read_pod(is, mps.svd_cutoff);
  mps.ordering.resize(N);
  mps.home.resize(N);
  mps.canon.resize(N);
  for (int i = 0; i < N; ++i) {
    std::int32_t v = 0;
    detail::read_pod(is, v);
    mps.ordering[i] = v;
  }
  for (int i = 0; i < N; ++i) {
    std::int32_t v = 0;
    detail::read_pod(is, v);
    mps.home[i] = v;
  }
  for (int i = 0; i < N; ++i) {
    std::uint8_t c = 0;
    detail::read_pod(is, c);
    if (c > 2) throw std::runtime_error("checkpoint: invalid canon flag");
    mps.canon[i] = static_cast<Canon>(c);
  }
  detail::read_pod(is, mps.log.weight_total);
  detail::read_pod(is, mps.log.weight_last_sweep);
  detail::read_pod(is, mps.log.amplitude_total);
  std::int32_t max_chi = 0;
  detail::read_pod(is, max_chi);
  mps.log.max_chi = max_chi;
  std::uint32_t n_warn = 0;
  detail::read_pod(is, n_warn);
  for (std::uint32_t k = 0; k < n_warn; ++k) {
    std::uint32_t len = 0;
    detail::read_pod(is, len);
    std::string w(len, '\0');
    is.read(w.data(), static_cast<std::streamsize>(len));
    if (!is) throw std::runtime_error("checkpoint: truncated stream");
    mps.log.warnings.push_back(std::move(w));
  }
  mps.site.resize(N);
  int prev_cols = 1;
  for (int i = 0; i < N; ++i) {
    for (int p = 0; p < 4; ++p) {
      std::int32_t rows = 0, cols = 0;
      detail::read_pod(is, rows);
      detail::read_pod(is, cols);
      if (rows < 1 || cols < 1) throw std::runtime_error("checkpoint: invalid tensor shape");
      mps.site[i][p].resize(rows, cols);
      is.read(reinterpret_cast<char*>(mps.site[i][p].data()),
              static_cast<std::streamsize>(sizeof(std::complex<double>) * mps.site[i][p].size()));
      if (!is) throw std::runtime_error("checkpoint: truncated stream");
    }
    if (static_cast<int>(mps.site[i][0].rows()) != prev_cols)
      throw std::runtime_error("checkpoint: bond dimensions do not chain");
    prev_cols = static_cast<int>(mps.site[i][0].cols());
  }
  if (prev_cols != 1) throw std::runtime_error("checkpoint: open right boundary");
  return mps;
}

inline VectorizedMPS load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  return load_checkpoint(is);
}

// --- Evolution engine -------------------------------------------------------

struct TebdOptions {
  int chi_max = 64;
  double svd_cutoff = 1e-10;
  double dt = 0.1;
  BathModeOrder order = BathModeOrder::Ascending;
};

// Owns the MPS, the gate set and the sweep bookkeeping: run() advances in
// whole Trotter steps (lazily performing the initial step), observe() reads
// occupations and currents off a rest-ordered copy, refresh() performs the
// periodic bath reset.
class TebdEngine {
 public:
  TebdEngine(const SystemSpec& sys, const ChainBath& bath1, const ChainBath& bath2,
             const std::vector<double>& n_sys, const TebdOptions& opt)
      : sys_(sys),
        bath1_(bath1),
        bath2_(bath2),
        opt_(opt),
        gates_(build_gates(sys, bath1, bath2, opt.dt)),
        mps_(initial_state(sys, bath1, bath2, n_sys, opt.chi_max, opt.svd_cutoff, opt.order)) {}

  double time() const { return time_; }
  const VectorizedMPS& state() const { return mps_; }
  const TruncationLog& log() const { return mps_.log; }
  const GateSet& gates() const { return gates_; }

  void run(double t) {
    const long steps = std::lround(t / opt_.dt);
    if (t < 0.0 || std::abs(steps * opt_.dt - t) > 1e-9 * std::max(1.0, std::abs(t)))
      throw std::invalid_argument("TebdEngine::run: t must be a whole number of Trotter steps");
    if (steps == 0) return;
    if (!prepared_) {
      initial_step(mps_, gates_);
      prepared_ = true;
    }
    for (long k = 0; k < steps; ++k) sweep(mps_, gates_);
    time_ += static_cast<double>(steps) * opt_.dt;
  }

  Observables observe() const {
    if (!prepared_) return measure(mps_);
    VectorizedMPS copy = mps_;
    final_step(copy, gates_);
    return measure(copy);
  }

  // Periodic refresh: restore the rest ordering, trace out the baths and
  // reassemble with freshly thermal ones.
  void refresh() {
    if (prepared_) {
      final_step(mps_, gates_);
      prepared_ = false;
    }
    mps_ = reassemble(trace_out_baths(mps_), bath1_, bath2_, opt_.order);
  }

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    os.write("PREBRUN1", 8);
    detail::write_pod(os, time_);
    detail::write_pod(os, static_cast<std::uint8_t>(prepared_ ? 1 : 0));
    save_checkpoint(mps_, os);
  }

  void load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::string(magic, 8) != "PREBRUN1")
      throw std::runtime_error("checkpoint: unrecognized format header");
    detail::read_pod(is, time_);
    std::uint8_t prepared = 0;
    detail::read_pod(is, prepared);
    VectorizedMPS mps = load_checkpoint(is);
    if (mps.layout.L_B1 != bath1_.size() || mps.layout.L_S != sys_.L_S ||
        mps.layout.L_B2 != bath2_.size())
      throw std::runtime_error("checkpoint: layout does not match this engine");
    mps_ = std::move(mps);
    prepared_ = prepared != 0;
  }

 private:
  SystemSpec sys_;
  ChainBath bath1_;
  ChainBath bath2_;
  TebdOptions opt_;
  GateSet gates_;
  VectorizedMPS mps_;
  double time_ = 0.0;
  bool prepared_ = false;
};

}  // namespace preb
