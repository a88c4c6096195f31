#pragma once

// Shared Jordan-Wigner conventions. Both the dense many-body oracle and the
// MPS backend must agree on these bit-for-bit, so they live in one place:
//
//   - mode index k runs left to right over the layout [bath1 | system | bath2];
//   - a basis index stores mode k's occupation in bit (M - 1 - k), i.e. mode 0
//     is the most significant bit (basis index 0b10... means mode 0 occupied);
//   - c_k = (prod_{j<k} Z_j) s_k with the string on lower mode indices, where
//     s = |0><1| and Z = diag(1, -1) in the (empty, occupied) basis.
//
// With these choices c+_p c_q for p < q reduces to s+_p (prod_{p<j<q} Z_j) s_q,
// whose matrix element is (-1)^(number of occupied modes strictly between).

#include <Eigen/Dense>

#include <bit>
#include <cstdint>

namespace preb::jw {

// Bit position of mode k inside an M-mode basis index.
inline int bit_of_mode(int M, int k) { return M - 1 - k; }

inline bool occupied(std::uint32_t state, int M, int k) {
  return (state >> bit_of_mode(M, k)) & 1u;
}

inline std::uint32_t flip(std::uint32_t state, int M, int k) {
  return state ^ (std::uint32_t{1} << bit_of_mode(M, k));
}

// (-1)^(number of occupied modes with index strictly between p and q).
inline double string_sign(std::uint32_t state, int M, int p, int q) {
  if (p > q) std::swap(p, q);
  std::uint32_t mask = 0;
  for (int k = p + 1; k < q; ++k) mask |= std::uint32_t{1} << bit_of_mode(M, k);
  return (std::popcount(state & mask) & 1) ? -1.0 : 1.0;
}

// Single-site operators in the (empty, occupied) = (|0>, |1>) basis.
inline const Eigen::Matrix2cd& raise() {
  static const Eigen::Matrix2cd m = [] {
    Eigen::Matrix2cd v = Eigen::Matrix2cd::Zero();
    v(1, 0) = 1.0;  // s+ |0> = |1>
    return v;
  }();
  return m;
}

inline const Eigen::Matrix2cd& lower() {
  static const Eigen::Matrix2cd m = raise().adjoint();
  return m;
}

inline const Eigen::Matrix2cd& number() {
  static const Eigen::Matrix2cd m = [] {
    Eigen::Matrix2cd v = Eigen::Matrix2cd::Zero();
    v(1, 1) = 1.0;
    return v;
  }();
  return m;
}

inline const Eigen::Matrix2cd& zstring() {
  static const Eigen::Matrix2cd m = [] {
    Eigen::Matrix2cd v = Eigen::Matrix2cd::Identity();
    v(1, 1) = -1.0;
    return v;
  }();
  return m;
}

}  // namespace preb::jw
