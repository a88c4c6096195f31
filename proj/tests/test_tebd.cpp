#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cmath>
#include <complex>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <vector>

#include <Eigen/Dense>

#include "preb/chainmap.hpp"
#include "preb/freefermion.hpp"
#include "preb/jw.hpp"
#include "preb/liouville.hpp"
#include "preb/spectral.hpp"
#include "preb/tebd.hpp"

using preb::BathModeOrder;
using preb::ChainBath;
using preb::DenseState;
using preb::Gate;
using preb::GateSet;
using preb::Observables;
using preb::SpectralDensity;
using preb::SystemSpec;
using preb::TebdEngine;
using preb::TebdOptions;
using preb::ThermalParams;
using preb::VectorizedMPS;

namespace {

ChainBath make_bath(double Gamma, int L_B, ThermalParams tp) {
  return preb::star_basis(
      preb::chain_coefficients(SpectralDensity::semicircle(Gamma, 2.0), L_B, tp));
}

// A bath with all couplings and energies zero: every composite gate is a bare
// swap and nothing the system does can reach it.
ChainBath decoupled_bath(int L_B, ThermalParams tp) {
  ChainBath cb;
  cb.gamma = 0.0;
  cb.eps.assign(L_B, 0.0);
  cb.hop.assign(L_B - 1, 0.0);
  cb.thermal = tp;
  return preb::star_basis(cb);
}

Eigen::MatrixXcd kron(const Eigen::MatrixXcd& A, const Eigen::MatrixXcd& B) {
  Eigen::MatrixXcd K(A.rows() * B.rows(), A.cols() * B.cols());
  for (Eigen::Index i = 0; i < A.rows(); ++i)
    for (Eigen::Index j = 0; j < A.cols(); ++j)
      K.block(i * B.rows(), j * B.cols(), B.rows(), B.cols()) = A(i, j) * B;
  return K;
}

// Dense state vector over the position-ordered physical legs (base-4 digits,
// position 0 most significant); exact contraction, for small chains only.
Eigen::VectorXcd dense_vector(const VectorizedMPS& mps) {
  const int N = mps.size();
  std::vector<Eigen::MatrixXcd> acc{Eigen::MatrixXcd::Identity(1, 1)};
  for (int pos = 0; pos < N; ++pos) {
    std::vector<Eigen::MatrixXcd> next;
    next.reserve(acc.size() * 4);
    for (const auto& a : acc)
      for (int p = 0; p < 4; ++p) next.push_back(a * mps.site[pos][p]);
    acc = std::move(next);
  }
  Eigen::VectorXcd v(static_cast<Eigen::Index>(acc.size()));
  for (std::size_t i = 0; i < acc.size(); ++i) v(static_cast<Eigen::Index>(i)) = acc[i](0, 0);
  return v;
}

// Dense L-site density matrix from a system-only MPS: split each physical
// index v = 2 i + j into the ket bit i and bra bit j of that site, site 0
// carrying the most significant bit on both sides.
Eigen::MatrixXcd dense_from_system_mps(const VectorizedMPS& mps) {
  const int L = mps.size();
  const Eigen::VectorXcd v = dense_vector(mps);
  const int D = 1 << L;
  Eigen::MatrixXcd rho = Eigen::MatrixXcd::Zero(D, D);
  for (Eigen::Index idx = 0; idx < v.size(); ++idx) {
    int I = 0, J = 0;
    Eigen::Index rest = idx;
    for (int k = L - 1; k >= 0; --k) {
      const int p = static_cast<int>(rest % 4);
      rest /= 4;
      I |= (p >> 1) << (L - 1 - k);
      J |= (p & 1) << (L - 1 - k);
    }
    rho(I, J) = v(idx);
  }
  return rho;
}

double trace_distance(const Eigen::MatrixXcd& A, const Eigen::MatrixXcd& B) {
  const Eigen::MatrixXcd D = 0.5 * ((A - B) + (A - B).adjoint());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(D, Eigen::EigenvaluesOnly);
  return 0.5 * es.eigenvalues().cwiseAbs().sum();
}

Eigen::MatrixXcd dense_system_rdm(const TebdEngine& eng) {
  VectorizedMPS snap = eng.state();
  if (!snap.at_rest()) preb::final_step(snap, eng.gates());
  return dense_from_system_mps(preb::trace_out_baths(snap));
}

const Eigen::RowVectorXcd& two_site_trace_functional() {
  static const Eigen::RowVectorXcd vII = [] {
    Eigen::RowVectorXcd one(4);
    one << 1.0, 0.0, 0.0, 1.0;
    return kron(one, one).row(0).eval();
  }();
  return vII;
}

}  // namespace

TEST_CASE("gate superoperators preserve the trace and factor through the swap", "[tebd]") {
  const SystemSpec sys{3, 1.3, 0.7};
  const ChainBath b1 = make_bath(1.0, 2, {0.7, 0.4, preb::Statistics::Fermi});
  const ChainBath b2 = make_bath(2.0, 3, {1.1, -0.2, preb::Statistics::Fermi});
  const double dt = 0.1;
  const GateSet g = preb::build_gates(sys, b1, b2, dt);

  SECTION("every gate leaves the two-site trace functional invariant") {
    const Eigen::RowVectorXcd& vII = two_site_trace_functional();
    std::vector<const Gate*> all{&g.swap, &g.identity};
    for (const Gate& gate : g.system) all.push_back(&gate);
    for (int ell = 0; ell < 2; ++ell)
      for (const auto* v : {&g.bath_fwd[ell], &g.bath_bwd[ell]})
        for (const Gate& gate : *v) all.push_back(&gate);
    REQUIRE(all.size() == 2 + 2 + 2 * (2 + 3));
    for (const Gate* gate : all)
      CHECK((vII * gate->U - vII).cwiseAbs().maxCoeff() < 1e-12);
  }

  SECTION("fermionic swap is an involution, also as a superoperator") {
    const Eigen::Matrix4d& S = preb::detail::fermionic_swap();
    CHECK((S * S - Eigen::Matrix4d::Identity()).cwiseAbs().maxCoeff() == 0.0);
    CHECK((g.swap.U * g.swap.U - Eigen::MatrixXcd::Identity(16, 16)).cwiseAbs().maxCoeff() <
          1e-14);
  }

  SECTION("composite bath gates factor into swap times plain evolution") {
    const Eigen::Matrix4cd S = preb::detail::fermionic_swap().cast<std::complex<double>>();
    const ChainBath* baths[2] = {&b1, &b2};
    for (int ell = 0; ell < 2; ++ell) {
      for (int a = 0; a < baths[ell]->size(); ++a) {
        const double kappa = baths[ell]->gamma * baths[ell]->eigs->Phi(0, a);
        const Eigen::Matrix4cd U = preb::detail::evolution(
            preb::detail::bath_pair_hamiltonian(baths[ell]->eigs->E[a], kappa), 0.5 * dt);
        const Eigen::MatrixXcd plain = preb::detail::make_superoperator(U);
        CHECK((g.bath_fwd[ell][a].U - g.swap.U * plain).cwiseAbs().maxCoeff() < 1e-13);
        CHECK((g.bath_bwd[ell][a].U - plain * g.swap.U).cwiseAbs().maxCoeff() < 1e-13);
        CHECK((preb::detail::make_superoperator((S * U).eval()) - g.swap.U * plain)
                  .cwiseAbs()
                  .maxCoeff() < 1e-13);
      }
    }
  }

  SECTION("dt -> 0 limit: plain gates approach the identity, composites the swap") {
    const double tiny = 1e-8;
    const GateSet g0 = preb::build_gates(sys, b1, b2, tiny);
    for (const Gate& gate : g0.system)
      CHECK((gate.U - Eigen::MatrixXcd::Identity(16, 16)).cwiseAbs().maxCoeff() < 1e-7);
    for (int ell = 0; ell < 2; ++ell) {
      for (const Gate& gate : g0.bath_fwd[ell])
        CHECK((gate.U - g0.swap.U).cwiseAbs().maxCoeff() < 1e-7);
      for (const Gate& gate : g0.bath_bwd[ell])
        CHECK((gate.U - g0.swap.U).cwiseAbs().maxCoeff() < 1e-7);
    }
  }

  SECTION("hopping gate reproduces the two-level Rabi populations") {
    const GateSet gh = preb::build_gates(SystemSpec{2, 0.0, 0.0}, ChainBath{}, ChainBath{}, 0.1);
    REQUIRE(gh.system.size() == 1);
    Eigen::VectorXcd in = Eigen::VectorXcd::Zero(16);
    in(12) = 1.0;  // vectorized |10><10|
    const Eigen::VectorXcd out = gh.system[0].U * in;
    const double c2 = std::cos(0.05) * std::cos(0.05);
    const double s2 = std::sin(0.05) * std::sin(0.05);
    CHECK(std::abs(out(12) - c2) < 1e-12);
    CHECK(std::abs(out(3) - s2) < 1e-12);
    // no weight on the other two populations |00><00| and |11><11|
    CHECK(std::abs(out(0)) < 1e-12);
    CHECK(std::abs(out(15)) < 1e-12);
  }

  SECTION("dt must be positive and baths must carry their eigenbasis") {
    CHECK_THROWS_AS(preb::build_gates(sys, b1, b2, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(preb::build_gates(sys, b1, b2, -0.1), std::invalid_argument);
    const ChainBath chain_only =
        preb::chain_coefficients(SpectralDensity::semicircle(1.0, 2.0), 2, {});
    CHECK_THROWS_AS(preb::build_gates(sys, chain_only, b2, 0.1), std::invalid_argument);
  }
}

TEST_CASE("initial state is a canonical thermal-times-pattern product", "[tebd]") {
  const SystemSpec sys{4, 0.0, 0.0};
  const auto pattern = preb::half_filled(4);

  SECTION("infinite-temperature baths carry half occupation everywhere") {
    const ChainBath b1 = make_bath(1.0, 3, {0.0, 0.0, preb::Statistics::Fermi});
    const ChainBath b2 = make_bath(2.0, 2, {0.0, 0.0, preb::Statistics::Fermi});
    const VectorizedMPS mps = preb::initial_state(sys, b1, b2, pattern, 64);
    CHECK(std::abs(preb::trace(mps) - 1.0) < 1e-15);
    CHECK(preb::check_canon(mps));
    for (int pos = 0; pos < mps.size(); ++pos) CHECK(mps.bond(pos) == 1);
    for (int a = 0; a < 3; ++a)
      CHECK(preb::expectation(mps, preb::jw::number(), mps.layout.bath1(a)) ==
            Catch::Approx(0.5).margin(1e-12));
    for (int a = 0; a < 2; ++a)
      CHECK(preb::expectation(mps, preb::jw::number(), mps.layout.bath2(a)) ==
            Catch::Approx(0.5).margin(1e-12));
    CHECK(preb::expectation(mps, Eigen::Matrix2cd::Identity(), 0) ==
          Catch::Approx(1.0).margin(1e-12));
  }

  SECTION("thermal baths carry the Fermi factor of each eigenmode") {
    const ThermalParams tp{2.0, 0.3, preb::Statistics::Fermi};
    const ChainBath b1 = make_bath(1.0, 4, tp);
    const VectorizedMPS mps = preb::initial_state(sys, b1, ChainBath{}, pattern, 64);
    for (int a = 0; a < 4; ++a)
      CHECK(preb::expectation(mps, preb::jw::number(), mps.layout.bath1(a)) ==
            Catch::Approx(preb::occupation(tp, b1.eigs->E[a])).margin(1e-12));
  }

  SECTION("system sites carry the requested pattern with zero current") {
    const ChainBath b1 = make_bath(1.0, 2, {0.5, 0.0, preb::Statistics::Fermi});
    const ChainBath b2 = make_bath(1.0, 2, {0.5, 0.0, preb::Statistics::Fermi});
    const VectorizedMPS mps = preb::initial_state(sys, b1, b2, pattern, 64);
    const Observables o = preb::measure(mps);
    REQUIRE(o.n.size() == 4);
    for (int l = 0; l < 4; ++l) CHECK(o.n[l] == Catch::Approx(pattern[l]).margin(1e-12));
    for (double I : o.I) CHECK(std::abs(I) < 1e-12);
  }

  SECTION("tracing out the baths of a product state recovers the exact system factor") {
    const ChainBath b1 = make_bath(1.0, 2, {0.7, 0.1, preb::Statistics::Fermi});
    const ChainBath b2 = make_bath(2.0, 3, {0.3, -0.4, preb::Statistics::Fermi});
    const VectorizedMPS mps = preb::initial_state(sys, b1, b2, pattern, 64);
    const VectorizedMPS sys_only = preb::trace_out_baths(mps);
    REQUIRE(sys_only.size() == 4);
    CHECK(std::abs(preb::trace(sys_only) - preb::trace(mps)) < 1e-10);
    Eigen::MatrixXcd expect = Eigen::MatrixXcd::Identity(1, 1);
    for (int l = 0; l < 4; ++l) {
      Eigen::Matrix2cd site = Eigen::Matrix2cd::Zero();
      site(0, 0) = 1.0 - pattern[l];
      site(1, 1) = pattern[l];
      expect = kron(expect, site);
    }
    CHECK((dense_from_system_mps(sys_only) - expect).cwiseAbs().maxCoeff() < 1e-12);
  }

  SECTION("fractional occupations become mixed product blocks") {
    const ChainBath b1 = make_bath(1.0, 2, {0.5, 0.0, preb::Statistics::Fermi});
    CHECK_THROWS_AS(preb::initial_state(sys, b1, b1, {-0.1, 1.0, 0.0, 1.0}, 64),
                    std::invalid_argument);
    CHECK_THROWS_AS(preb::initial_state(sys, b1, b1, {0.0, 1.0, 0.0, 1.1}, 64),
                    std::invalid_argument);
    CHECK_THROWS_AS(preb::initial_state(sys, b1, b1, {1.0, 0.0}, 64), std::invalid_argument);

    const std::vector<double> frac{0.25, 1.0, 0.5, 0.0};
    const VectorizedMPS mps = preb::initial_state(sys, b1, b1, frac, 64);
    const VectorizedMPS sys_only = preb::trace_out_baths(mps);
    Eigen::MatrixXcd expect = Eigen::MatrixXcd::Identity(1, 1);
    for (const double n : frac) {
      Eigen::Matrix2cd site = Eigen::Matrix2cd::Zero();
      site(0, 0) = 1.0 - n;
      site(1, 1) = n;
      expect = kron(expect, site);
    }
    CHECK((dense_from_system_mps(sys_only) - expect).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("swap network is a pure permutation round-trip", "[tebd]") {
  const SystemSpec sys{2, 0.0, 0.0};
  // Decoupled baths with flat zero spectrum: kappa = 0 and E = 0, so every
  // composite bath gate degenerates to the bare fermionic swap.
  const ChainBath b1 = decoupled_bath(2, {0.4, 0.1, preb::Statistics::Fermi});
  const ChainBath b2 = decoupled_bath(2, {0.8, -0.3, preb::Statistics::Fermi});
  GateSet g = preb::build_gates(sys, b1, b2, 0.1);
  for (int ell = 0; ell < 2; ++ell)
    for (auto* gates : {&g.bath_fwd[ell], &g.bath_bwd[ell]})
      for (Gate& gate : *gates) REQUIRE((gate.U - g.swap.U).cwiseAbs().maxCoeff() < 1e-14);
  // The public API fixes unit hopping on system bonds; zero the system part
  // by hand to isolate the swap choreography.
  for (Gate& gate : g.system) gate.U = g.identity.U;

  VectorizedMPS mps = preb::initial_state(sys, b1, b2, {1.0, 0.0}, 64);
  const Eigen::VectorXcd before = dense_vector(mps);
  const Observables o0 = preb::measure(mps);

  SECTION("initial and final steps alone undo each other") {
    preb::initial_step(mps, g);
    CHECK_FALSE(mps.at_rest());
    CHECK(preb::check_canon(mps));
    preb::final_step(mps, g);
    REQUIRE(mps.at_rest());
    CHECK(preb::check_canon(mps));
    CHECK((dense_vector(mps) - before).cwiseAbs().maxCoeff() < 1e-10);
  }

  SECTION("full sweeps with zeroed Hamiltonian leave the state invariant") {
    preb::initial_step(mps, g);
    for (int k = 0; k < 3; ++k) preb::sweep(mps, g);
    preb::final_step(mps, g);
    REQUIRE(mps.at_rest());
    CHECK((dense_vector(mps) - before).cwiseAbs().maxCoeff() < 1e-10);
    const Observables o = preb::measure(mps);
    for (int l = 0; l < 2; ++l) CHECK(o.n[l] == Catch::Approx(o0.n[l]).margin(1e-10));
    CHECK(std::abs(preb::trace(mps) - 1.0) < 1e-12);
  }
}

TEST_CASE("decoupled baths leave blocked patterns stationary", "[tebd]") {
  const SystemSpec sys{3, 0.7, 0.3};
  const ThermalParams tp{1.0, 0.4, preb::Statistics::Fermi};
  const ChainBath b1 = decoupled_bath(2, tp);
  const ChainBath b2 = decoupled_bath(2, tp);
  const double n_flat = preb::occupation(tp, 0.0);
  for (const double fill : {1.0, 0.0}) {
    const std::vector<double> pattern(3, fill);
    TebdOptions opt;
    opt.chi_max = 32;
    TebdEngine eng(sys, b1, b2, pattern, opt);
    eng.run(1.0);
    const Observables o = eng.observe();
    for (int l = 0; l < 3; ++l) CHECK(o.n[l] == Catch::Approx(fill).margin(1e-10));
    for (double I : o.I) CHECK(std::abs(I) < 1e-10);
    VectorizedMPS snap = eng.state();
    preb::final_step(snap, eng.gates());
    for (int a = 0; a < 2; ++a) {
      CHECK(preb::expectation(snap, preb::jw::number(), snap.layout.bath1(a)) ==
            Catch::Approx(n_flat).margin(1e-10));
      CHECK(preb::expectation(snap, preb::jw::number(), snap.layout.bath2(a)) ==
            Catch::Approx(n_flat).margin(1e-10));
    }
  }
}

TEST_CASE("free dynamics matches the Gaussian solver", "[tebd]") {
  // V = 0, L_S = 4, L_B = 6 per bath, chi = 64, dt = 0.1, out to t = 6: site
  // occupations agree with the correlation-matrix evolution to 5e-3.  Strong
  // coupling and nearly flat band occupations keep the operator-space
  // entanglement representable at this bond cap.
  const SystemSpec sys{4, 0.0, 0.0};
  const ChainBath b1 = make_bath(2.0, 6, {0.02, 1.5, preb::Statistics::Fermi});
  const ChainBath b2 = make_bath(2.0, 6, {0.02, -1.5, preb::Statistics::Fermi});
  const auto pattern = preb::half_filled(4);
  TebdOptions opt;
  opt.chi_max = 64;
  opt.svd_cutoff = 1e-10;
  opt.dt = 0.1;
  TebdEngine eng(sys, b1, b2, pattern, opt);
  preb::CorrelationMatrix C = preb::initial_correlations(sys, b1, b2, pattern);
  const preb::Propagator prop(preb::assemble_hamiltonian(sys, b1, b2));
  for (int k = 1; k <= 3; ++k) {
    eng.run(2.0);
    C = prop.evolve(C, 2.0);
    const Observables ot = eng.observe();
    const Observables og = preb::observables(C);
    for (int l = 0; l < 4; ++l) CHECK(ot.n[l] == Catch::Approx(og.n[l]).margin(5e-3));
    for (int l = 0; l < 3; ++l) CHECK(ot.I[l] == Catch::Approx(og.I[l]).margin(5e-2));
  }
  // The bond cap is genuinely active, so this exercises truncated evolution.
  CHECK(eng.log().max_chi == 64);
  for (int pos = 0; pos < eng.state().size(); ++pos) CHECK(eng.state().bond(pos) <= 64);
}

TEST_CASE("interacting dynamics matches the dense oracle", "[tebd]") {
  const ChainBath b1 = make_bath(1.0, 2, {1.0, 0.5, preb::Statistics::Fermi});
  const ChainBath b2 = make_bath(1.0, 2, {1.0, -0.5, preb::Statistics::Fermi});
  const std::vector<double> pattern{1.0, 0.0};

  const auto check_against_dense = [&](const SystemSpec& sys, BathModeOrder order) {
    TebdOptions opt;
    opt.chi_max = 256;
    opt.svd_cutoff = 1e-10;
    opt.dt = 0.05;
    opt.order = order;
    TebdEngine eng(sys, b1, b2, pattern, opt);
    const Eigen::MatrixXd H = preb::build_many_body_hamiltonian(sys, b1, b2);
    DenseState st = preb::initial_dense_state(sys, b1, b2, pattern);
    const preb::DensePropagator prop(H);
    double worst = 0.0;
    for (int k = 1; k <= 4; ++k) {
      eng.run(1.0);
      st.rho = prop.evolve(st.rho, 1.0);
      const Eigen::MatrixXcd exact = preb::partial_trace(st.rho, 6, st.layout.system(0), 2);
      worst = std::max(worst, trace_distance(dense_system_rdm(eng), exact));
    }
    return worst;
  };

  SECTION("V = 1, h = 0") {
    CHECK(check_against_dense(SystemSpec{2, 1.0, 0.0}, BathModeOrder::Ascending) < 1e-3);
  }
  SECTION("V = 1, h = 1") {
    CHECK(check_against_dense(SystemSpec{2, 1.0, 1.0}, BathModeOrder::Ascending) < 1e-3);
  }
  SECTION("descending mode order reaches the same physics") {
    CHECK(check_against_dense(SystemSpec{2, 1.0, 0.0}, BathModeOrder::Descending) < 1e-3);
  }
}

TEST_CASE("periodic refresh matches the dense composite map", "[tebd]") {
  const SystemSpec sys{2, 1.0, 0.0};
  const ChainBath b1 = make_bath(1.0, 2, {1.0, 0.5, preb::Statistics::Fermi});
  const ChainBath b2 = make_bath(1.0, 2, {1.0, -0.5, preb::Statistics::Fermi});
  const std::vector<double> pattern{1.0, 0.0};
  TebdOptions opt;
  opt.chi_max = 256;
  opt.svd_cutoff = 1e-10;
  opt.dt = 0.05;
  TebdEngine eng(sys, b1, b2, pattern, opt);
  const Eigen::MatrixXd H = preb::build_many_body_hamiltonian(sys, b1, b2);
  DenseState st = preb::initial_dense_state(sys, b1, b2, pattern);
  for (int cycle = 0; cycle < 3; ++cycle) {
    eng.run(1.0);
    st = preb::dense_evolve(st, H, 1.0);
    const Eigen::MatrixXcd exact = preb::partial_trace(st.rho, 6, st.layout.system(0), 2);
    CHECK(trace_distance(dense_system_rdm(eng), exact) < 1e-3);
    eng.refresh();
    st = preb::dense_refresh(st, b1, b2);
  }
}

TEST_CASE("Trotter error is second order in dt", "[tebd]") {
  const SystemSpec sys{2, 1.0, 0.0};
  const ChainBath b1 = make_bath(1.0, 2, {1.0, 0.5, preb::Statistics::Fermi});
  const ChainBath b2 = make_bath(1.0, 2, {1.0, -0.5, preb::Statistics::Fermi});
  const std::vector<double> pattern{1.0, 0.0};
  const Eigen::MatrixXd H = preb::build_many_body_hamiltonian(sys, b1, b2);
  DenseState st = preb::initial_dense_state(sys, b1, b2, pattern);
  st = preb::dense_evolve(st, H, 1.0);
  const Eigen::MatrixXcd exact = preb::partial_trace(st.rho, 6, st.layout.system(0), 2);
  std::array<double, 3> err{};
  const std::array<double, 3> dts{0.2, 0.1, 0.05};
  for (int k = 0; k < 3; ++k) {
    TebdOptions opt;
    opt.chi_max = 256;
    opt.svd_cutoff = 1e-12;
    opt.dt = dts[k];
    TebdEngine eng(sys, b1, b2, pattern, opt);
    eng.run(1.0);
    err[k] = trace_distance(dense_system_rdm(eng), exact);
  }
  CHECK(err[0] / err[1] > 3.2);
  CHECK(err[0] / err[1] < 4.8);
  CHECK(err[1] / err[2] > 3.2);
  CHECK(err[1] / err[2] < 4.8);
}

TEST_CASE("doubling chi converges toward the dense oracle", "[tebd]") {
  const SystemSpec sys{2, 1.0, 0.0};
  const ChainBath b1 = make_bath(1.0, 4, {1.0, 0.5, preb::Statistics::Fermi});
  const ChainBath b2 = make_bath(1.0, 4, {1.0, -0.5, preb::Statistics::Fermi});
  const std::vector<double> pattern{1.0, 0.0};
  const Eigen::MatrixXd H = preb::build_many_body_hamiltonian(sys, b1, b2);
  DenseState st = preb::initial_dense_state(sys, b1, b2, pattern);
  st = preb::dense_evolve(st, H, 2.0);
  const Eigen::MatrixXcd rs = preb::partial_trace(st.rho, 10, st.layout.system(0), 2);
  const double n0 = rs(2, 2).real() + rs(3, 3).real();
  const double n1 = rs(1, 1).real() + rs(3, 3).real();
  std::vector<double> errs;
  for (const int chi : {8, 16, 32, 64}) {
    TebdOptions opt;
    opt.chi_max = chi;
    opt.svd_cutoff = 1e-10;
    opt.dt = 0.1;
    TebdEngine eng(sys, b1, b2, pattern, opt);
    eng.run(2.0);
    const Observables o = eng.observe();
    errs.push_back(std::max(std::abs(o.n[0] - n0), std::abs(o.n[1] - n1)));
  }
  CHECK(errs[0] > 2e-2);  // chi = 8 is genuinely starved
  for (std::size_t k = 1; k < errs.size(); ++k) CHECK(errs[k] < errs[k - 1]);
  CHECK(errs.back() < 2e-3);
}

TEST_CASE("trace and Hermiticity survive the sweeps", "[tebd]") {
  const SystemSpec sys{2, 1.0, 0.5};
  const ChainBath b1 = make_bath(1.0, 2, {1.0, 0.5, preb::Statistics::Fermi});
  const ChainBath b2 = make_bath(1.0, 2, {1.0, -0.5, preb::Statistics::Fermi});
  const std::vector<double> pattern{1.0, 0.0};
  const GateSet g = preb::build_gates(sys, b1, b2, 0.1);

  SECTION("untruncated evolution keeps the trace to 1e-10 every sweep") {
    // chi = 64 equals the exact maximal bond dimension of 6 sites, so with a
    // zero cutoff nothing is ever discarded.
    VectorizedMPS mps = preb::initial_state(sys, b1, b2, pattern, 64, 0.0);
    preb::initial_step(mps, g);
    for (int k = 0; k < 20; ++k) {
      preb::sweep(mps, g);
      CHECK(std::abs(preb::trace(mps) - 1.0) < 1e-10);
    }
    CHECK(mps.log.amplitude_total < 1e-10);
    CHECK(preb::residue_tolerance(mps) == 1e-8);
    preb::final_step(mps, g);
    const Observables o = preb::measure(mps);  // would throw above 1e-8 residue
    for (double n : o.n) {
      CHECK(n > -1e-9);
      CHECK(n < 1.0 + 1e-9);
    }
  }

  SECTION("truncated evolution drifts no further than the logged amplitude") {
    VectorizedMPS mps = preb::initial_state(sys, b1, b2, pattern, 8, 1e-10);
    preb::initial_step(mps, g);
    for (int k = 0; k < 20; ++k) preb::sweep(mps, g);
    CHECK(mps.log.weight_total > 0.0);
    CHECK(mps.log.amplitude_total > 0.0);
    CHECK(std::abs(preb::trace(mps) - 1.0) <
          std::max(1e-8, mps.log.amplitude_total));
    preb::final_step(mps, g);
    CHECK_NOTHROW(preb::measure(mps));
  }
}

TEST_CASE("canonical flags track the sweep phases", "[tebd]") {
  const SystemSpec sys{2, 1.0, 0.0};
  const ChainBath b1 = make_bath(1.0, 2, {1.0, 0.5, preb::Statistics::Fermi});
  const ChainBath b2 = make_bath(1.0, 2, {1.0, -0.5, preb::Statistics::Fermi});
  const GateSet g = preb::build_gates(sys, b1, b2, 0.1);
  VectorizedMPS mps = preb::initial_state(sys, b1, b2, {1.0, 0.0}, 64);
  REQUIRE(preb::check_canon(mps));
  int left = 0;
  for (preb::Canon c : mps.canon) left += c == preb::Canon::Left ? 1 : 0;
  CHECK(left == mps.size() - 1);  // fully left-canonicalized at construction

  preb::initial_step(mps, g);
  CHECK(preb::check_canon(mps));
  int right = 0;
  for (preb::Canon c : mps.canon) right += c == preb::Canon::Right ? 1 : 0;
  CHECK(right == mps.size() - 1);  // fully right-canonicalized before sweeping

  preb::half_sweep_forward(mps, g);
  CHECK(preb::check_canon(mps));
  preb::half_sweep_backward(mps, g);
  CHECK(preb::check_canon(mps));
  preb::final_step(mps, g);
  CHECK(preb::check_canon(mps));
  REQUIRE(mps.at_rest());
}

TEST_CASE("checkpoints round-trip exactly", "[tebd]") {
  const SystemSpec sys{2, 1.0, 0.0};
  const ChainBath b1 = make_bath(1.0, 2, {1.0, 0.5, preb::Statistics::Fermi});
  const ChainBath b2 = make_bath(1.0, 2, {1.0, -0.5, preb::Statistics::Fermi});
  const std::vector<double> pattern{1.0, 0.0};
  TebdOptions opt;
  opt.chi_max = 32;
  opt.svd_cutoff = 1e-10;
  opt.dt = 0.1;

  SECTION("a mid-sweep MPS survives serialization bit for bit") {
    const GateSet g = preb::build_gates(sys, b1, b2, opt.dt);
    VectorizedMPS mps = preb::initial_state(sys, b1, b2, pattern, 32);
    preb::initial_step(mps, g);
    preb::half_sweep_forward(mps, g);
    std::stringstream buf;
    preb::save_checkpoint(mps, buf);
    const VectorizedMPS back = preb::load_checkpoint(buf);
    REQUIRE(back.size() == mps.size());
    CHECK(back.ordering == mps.ordering);
    CHECK(back.home == mps.home);
    CHECK(back.canon == mps.canon);
    CHECK(back.chi_max == mps.chi_max);
    CHECK(back.svd_cutoff == mps.svd_cutoff);
    CHECK(back.log.weight_total == mps.log.weight_total);
    CHECK(back.log.amplitude_total == mps.log.amplitude_total);
    CHECK(back.log.warnings == mps.log.warnings);
    for (int pos = 0; pos < mps.size(); ++pos)
      for (int p = 0; p < 4; ++p)
        CHECK((back.site[pos][p] - mps.site[pos][p]).cwiseAbs().maxCoeff() == 0.0);
  }

  SECTION("a resumed engine reproduces the uninterrupted run") {
    const std::string path = "tebd_checkpoint_test.bin";
    TebdEngine eng(sys, b1, b2, pattern, opt);
    eng.run(1.0);
    eng.save(path);
    eng.run(1.0);
    const Observables straight = eng.observe();

    TebdEngine resumed(sys, b1, b2, pattern, opt);
    resumed.load(path);
    REQUIRE(resumed.time() == 1.0);
    resumed.run(1.0);
    const Observables replay = resumed.observe();
    for (int l = 0; l < 2; ++l)
      CHECK(replay.n[l] == Catch::Approx(straight.n[l]).margin(1e-12));
    CHECK(replay.I[0] == Catch::Approx(straight.I[0]).margin(1e-12));
    std::remove(path.c_str());
  }

  SECTION("corrupted headers and layout mismatches are rejected") {
    std::stringstream buf;
    buf << "NOTANMPS" << std::string(64, '\0');
    CHECK_THROWS_AS(preb::load_checkpoint(buf), std::runtime_error);

    std::stringstream empty;
    CHECK_THROWS_AS(preb::load_checkpoint(empty), std::runtime_error);

    const std::string path = "tebd_checkpoint_mismatch.bin";
    TebdEngine eng(sys, b1, b2, pattern, opt);
    eng.save(path);
    const ChainBath wide = make_bath(1.0, 3, {1.0, 0.5, preb::Statistics::Fermi});
    TebdEngine other(sys, wide, b2, pattern, opt);
    CHECK_THROWS_AS(other.load(path), std::runtime_error);
    std::remove(path.c_str());
  }
}

TEST_CASE("misuse is rejected", "[tebd]") {
  const SystemSpec sys{2, 1.0, 0.0};
  const ChainBath b1 = make_bath(1.0, 2, {1.0, 0.5, preb::Statistics::Fermi});
  const ChainBath b2 = make_bath(1.0, 2, {1.0, -0.5, preb::Statistics::Fermi});
  const std::vector<double> pattern{1.0, 0.0};
  const GateSet g = preb::build_gates(sys, b1, b2, 0.1);

  SECTION("run accepts only whole Trotter steps") {
    TebdOptions opt;
    TebdEngine eng(sys, b1, b2, pattern, opt);
    CHECK_THROWS_AS(eng.run(0.05), std::invalid_argument);
    CHECK_THROWS_AS(eng.run(-0.1), std::invalid_argument);
    CHECK_NOTHROW(eng.run(0.0));
  }

  SECTION("observables demand the rest ordering") {
    VectorizedMPS mps = preb::initial_state(sys, b1, b2, pattern, 32);
    preb::initial_step(mps, g);
    CHECK_THROWS_AS(preb::measure(mps), std::logic_error);
    CHECK_THROWS_AS(preb::trace_out_baths(mps), std::logic_error);
    CHECK_THROWS_AS(
        preb::expectation(mps, preb::jw::lower(), preb::jw::raise(), mps.layout.system(0)),
        std::logic_error);
    CHECK_THROWS_AS(preb::initial_step(mps, g), std::logic_error);
  }
}
