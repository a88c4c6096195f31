#pragma once

// Thin dense linear-algebra helpers on top of Eigen. The economy SVD is the
// hot path of the TEBD engine, so it goes through LAPACK's divide-and-conquer
// driver when available.

#include <Eigen/Dense>
#include <complex>
#include <stdexcept>
#include <vector>

#ifdef PREB_USE_LAPACKE
#include <lapacke.h>
#endif

namespace preb::linalg {

struct Svd {
  Eigen::MatrixXcd U;       // m x k
  Eigen::VectorXd S;        // k, descending
  Eigen::MatrixXcd Vdag;    // k x n
};

// Economy SVD A = U diag(S) Vdag with k = min(m, n).
inline Svd svd_econ(const Eigen::MatrixXcd& A) {
  const int m = static_cast<int>(A.rows());
  const int n = static_cast<int>(A.cols());
  const int k = std::min(m, n);
  Svd out;
#ifdef PREB_USE_LAPACKE
  Eigen::MatrixXcd a = A;  // zgesdd overwrites its input
  out.U.resize(m, k);
  out.S.resize(k);
  out.Vdag.resize(k, n);
  const int info = LAPACKE_zgesdd(
      LAPACK_COL_MAJOR, 'S', m, n, reinterpret_cast<lapack_complex_double*>(a.data()), m,
      out.S.data(), reinterpret_cast<lapack_complex_double*>(out.U.data()), m,
      reinterpret_cast<lapack_complex_double*>(out.Vdag.data()), k);
  if (info == 0) return out;
  // zgesdd occasionally fails to converge; fall through to Eigen's Jacobi/BDC.
#endif
  Eigen::BDCSVD<Eigen::MatrixXcd> svd(A, Eigen::ComputeThinU | Eigen::ComputeThinV);
  out.U = svd.matrixU();
  out.S = svd.singularValues();
  out.Vdag = svd.matrixV().adjoint();
  return out;
}

// 0.5 * ||A - B||_1 for Hermitian A, B (trace distance between density matrices).
inline double trace_distance(const Eigen::MatrixXcd& A, const Eigen::MatrixXcd& B) {
  if (A.rows() != B.rows() || A.cols() != B.cols())
    throw std::invalid_argument("trace_distance: shape mismatch");
  Eigen::MatrixXcd d = A - B;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(0.5 * (d + d.adjoint()));
  return 0.5 * es.eigenvalues().cwiseAbs().sum();
}

}  // namespace preb::linalg
