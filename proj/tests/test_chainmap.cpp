#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "preb/chainmap.hpp"
#include "preb/spectral.hpp"

using preb::ChainBath;
using preb::SpectralDensity;

namespace {

// Direct implementation of the chain-coefficient recursion on a dense grid,
// used as an independent oracle for the discretize-then-Lanczos production
// path.  With g_0 = gamma,
//   J_p(w)  = 4 g_{p-1}^2 J_{p-1}(w) / ([J^H_{p-1}(w)]^2 + [J_{p-1}(w)]^2),
//   g_p^2   = (1/2pi) \int J_p,
//   eps_p   = \int w J_{p-1} / \int J_{p-1},
// where J^H is the Hilbert transform; eps_p is the mean of the level-(p-1)
// density because site p's on-site energy is <v_p|H|v_p> and J_{p-1} is the
// local density of states at site p.
struct RecursionChain {
  double gamma = 0.0;
  std::vector<double> eps;
  std::vector<double> hop;
};

RecursionChain recursion_chain(const SpectralDensity& J, int L_B, int grid_pts) {
  // One extra node past the upper support edge carries an exact zero, so the
  // tabulated Hilbert transform is finite at every original node even if the
  // density was truncated at a nonzero value.
  const double lo = J.support_min(), hi = J.support_max();
  const double h = (hi - lo) / (grid_pts - 2);
  std::vector<double> x(grid_pts), Jp(grid_pts);
  for (int i = 0; i + 1 < grid_pts; ++i) {
    x[i] = lo + i * h;
    Jp[i] = J(x[i]);
  }
  x[grid_pts - 1] = hi + h;
  Jp[grid_pts - 1] = 0.0;

  auto trapz = [&](const std::vector<double>& f, bool weight_by_x) {
    double acc = 0.0;
    for (int i = 0; i + 1 < grid_pts; ++i) {
      const double f0 = weight_by_x ? f[i] * x[i] : f[i];
      const double f1 = weight_by_x ? f[i + 1] * x[i + 1] : f[i + 1];
      acc += 0.5 * (f0 + f1) * (x[i + 1] - x[i]);
    }
    return acc;
  };

  RecursionChain rc;
  double mass = trapz(Jp, false);
  rc.gamma = std::sqrt(mass / (2.0 * M_PI));
  double g_prev_sq = mass / (2.0 * M_PI);
  for (int p = 1; p <= L_B; ++p) {
    rc.eps.push_back(trapz(Jp, true) / mass);
    if (p == L_B) break;
    std::vector<double> Jnext(grid_pts);
    for (int i = 0; i < grid_pts; ++i) {
      const double H = preb::detail::hilbert_tabulated(x, Jp, x[i]);
      const double den = H * H + Jp[i] * Jp[i];
      Jnext[i] = (den > 0.0) ? 4.0 * g_prev_sq * Jp[i] / den : 0.0;
    }
    Jp = std::move(Jnext);
    mass = trapz(Jp, false);
    g_prev_sq = mass / (2.0 * M_PI);
    rc.hop.push_back(std::sqrt(g_prev_sq));
  }
  return rc;
}

Eigen::MatrixXd tridiag(const ChainBath& cb) {
  const int n = cb.size();
  Eigen::MatrixXd T = Eigen::MatrixXd::Zero(n, n);
  for (int i = 0; i < n; ++i) T(i, i) = cb.eps[i];
  for (int i = 0; i + 1 < n; ++i) T(i, i + 1) = T(i + 1, i) = cb.hop[i];
  return T;
}

}  // namespace

TEST_CASE("semicircle maps to the uniform chain", "[chainmap]") {
  // Semicircle(Gamma, g_B) is the spectral density of the half-infinite
  // uniform chain: zero on-site energies, constant hopping g_B, and
  // gamma^2 = Gamma g_B / 2.
  const auto cb = preb::chain_coefficients(SpectralDensity::semicircle(1.0, 2.0), 26);
  REQUIRE(cb.size() == 26);
  CHECK(std::abs(cb.gamma - 1.0) < 1e-8);
  for (const double e : cb.eps) CHECK(std::abs(e) < 1e-8);
  for (const double g : cb.hop) CHECK(std::abs(g - 2.0) < 1e-6);

  const auto cb2 = preb::chain_coefficients(SpectralDensity::semicircle(2.0, 2.0), 14);
  CHECK(std::abs(cb2.gamma - std::sqrt(2.0)) < 1e-8);
  for (const double e : cb2.eps) CHECK(std::abs(e) < 1e-8);
  for (const double g : cb2.hop) CHECK(std::abs(g - 2.0) < 1e-6);
}

TEST_CASE("gamma matches the independent spectral-weight integral", "[chainmap]") {
  const auto J = SpectralDensity::ohmic_gaussian(0.1, 50.0);
  const auto cb = preb::chain_coefficients(J, 8);
  CHECK(cb.gamma * cb.gamma == Catch::Approx(J.gamma_sq()).epsilon(1e-6));

  const auto Js = SpectralDensity::semicircle(1.0, 2.0);
  const auto cbs = preb::chain_coefficients(Js, 4);
  CHECK(cbs.gamma * cbs.gamma == Catch::Approx(Js.gamma_sq()).epsilon(1e-10));
}

TEST_CASE("coefficients are invariant under grid doubling", "[chainmap]") {
  const auto J = SpectralDensity::ohmic_gaussian(0.1, 50.0);
  const auto coarse = preb::detail::lanczos_chain(preb::detail::discretize(J, 1024), 10);
  const auto fine = preb::detail::lanczos_chain(preb::detail::discretize(J, 2048), 10);
  CHECK(preb::detail::chain_diff(coarse, fine) < 1e-6 * 50.0);

  // The production result sits at the refined end of that ladder.
  const auto cb = preb::chain_coefficients(J, 10);
  CHECK(preb::detail::chain_diff(cb, fine) < 1e-6 * 50.0);
}

TEST_CASE("ohmic chain matches the literal spectral-density recursion", "[chainmap]") {
  const auto J = SpectralDensity::ohmic_gaussian(0.1, 50.0);
  const int L_B = 10;
  const auto cb = preb::chain_coefficients(J, L_B);
  const auto rc = recursion_chain(J, L_B, 6001);

  CHECK(rc.gamma == Catch::Approx(cb.gamma).epsilon(1e-4));
  REQUIRE(rc.eps.size() == cb.eps.size());
  REQUIRE(rc.hop.size() == cb.hop.size());
  for (std::size_t p = 0; p < cb.eps.size(); ++p)
    CHECK(rc.eps[p] == Catch::Approx(cb.eps[p]).epsilon(1e-4));
  for (std::size_t p = 0; p < cb.hop.size(); ++p)
    CHECK(rc.hop[p] == Catch::Approx(cb.hop[p]).epsilon(1e-4));
}

TEST_CASE("chain_coefficients validates input and detects degenerate measures", "[chainmap]") {
  const auto J = SpectralDensity::semicircle(1.0, 2.0);
  CHECK_THROWS_AS(preb::chain_coefficients(J, 0), std::invalid_argument);

  // Requesting more chain sites than the star has modes.
  CHECK_THROWS_WITH(preb::detail::lanczos_chain(preb::detail::discretize(J, 2), 10),
                    Catch::Matchers::ContainsSubstring("mode count"));

  // A star whose Krylov space is smaller than L_B (two degenerate modes).
  preb::detail::StarMeasure degenerate{{1.0, 1.0}, {0.5, 0.5}};
  CHECK_THROWS_WITH(preb::detail::lanczos_chain(degenerate, 2),
                    Catch::Matchers::ContainsSubstring("Krylov"));
}

TEST_CASE("star_basis on tiny chains", "[chainmap]") {
  ChainBath one;
  one.gamma = 1.0;
  one.eps = {0.0};
  const auto s1 = preb::star_basis(one);
  REQUIRE(s1.eigs.has_value());
  CHECK(s1.eigs->E == std::vector<double>{0.0});
  CHECK(s1.eigs->Phi(0, 0) == 1.0);

  const double g = 1.7;
  ChainBath two;
  two.gamma = 1.0;
  two.eps = {0.0, 0.0};
  two.hop = {g};
  const auto s2 = preb::star_basis(two);
  REQUIRE(s2.eigs.has_value());
  CHECK(s2.eigs->E[0] == Catch::Approx(-g).margin(1e-12));
  CHECK(s2.eigs->E[1] == Catch::Approx(+g).margin(1e-12));
  const double r = 1.0 / std::sqrt(2.0);
  CHECK(s2.eigs->Phi(0, 0) == Catch::Approx(r).margin(1e-12));
  CHECK(s2.eigs->Phi(1, 0) == Catch::Approx(-r).margin(1e-12));
  CHECK(s2.eigs->Phi(0, 1) == Catch::Approx(r).margin(1e-12));
  CHECK(s2.eigs->Phi(1, 1) == Catch::Approx(r).margin(1e-12));
}

TEST_CASE("uniform chain eigenbasis has the closed form", "[chainmap]") {
  // For eps = 0, hop = g the eigenpairs are E_a = 2 g cos(a pi / (L+1)) with
  // components proportional to sin(p a pi / (L+1)).
  const int L = 14;
  const double g = 2.0;
  const auto cb =
      preb::star_basis(preb::chain_coefficients(SpectralDensity::semicircle(1.0, g), L));
  REQUIRE(cb.eigs.has_value());
  const auto& eigs = *cb.eigs;

  std::vector<double> expected;
  for (int a = 1; a <= L; ++a) expected.push_back(2.0 * g * std::cos(a * M_PI / (L + 1)));
  std::sort(expected.begin(), expected.end());
  for (int a = 0; a < L; ++a) CHECK(eigs.E[a] == Catch::Approx(expected[a]).margin(1e-8));

  // Ascending eigenvalue a corresponds to mode index L - a in the closed
  // form; the sign convention keeps the first component positive.
  for (int a = 0; a < L; ++a) {
    const int mode = L - a;
    Eigen::VectorXd v(L);
    for (int p = 0; p < L; ++p) v(p) = std::sin((p + 1) * mode * M_PI / (L + 1));
    v.normalize();
    if (v(0) < 0.0) v = -v;
    CHECK((eigs.Phi.col(a) - v).cwiseAbs().maxCoeff() < 1e-7);
  }
}

TEST_CASE("star_basis invariants: orthonormality and reconstruction", "[chainmap]") {
  const auto J = SpectralDensity::ohmic_gaussian(0.1, 50.0);
  const auto cb = preb::star_basis(preb::chain_coefficients(J, 12));
  REQUIRE(cb.eigs.has_value());
  const auto& eigs = *cb.eigs;
  const int n = cb.size();

  const Eigen::MatrixXd gram = eigs.Phi.transpose() * eigs.Phi;
  CHECK((gram - Eigen::MatrixXd::Identity(n, n)).cwiseAbs().maxCoeff() < 1e-12);

  Eigen::VectorXd E = Eigen::Map<const Eigen::VectorXd>(eigs.E.data(), n);
  const Eigen::MatrixXd recon =
      eigs.Phi.transpose() * tridiag(cb) * eigs.Phi - E.asDiagonal().toDenseMatrix();
  CHECK(recon.norm() < 1e-10);
  CHECK(std::is_sorted(eigs.E.begin(), eigs.E.end()));
}

TEST_CASE("required_bath_size", "[chainmap]") {
  CHECK(preb::required_bath_size(6.0, 2.0) == 14);
  CHECK(preb::required_bath_size(12.0, 2.0) == 26);
  CHECK(preb::required_bath_size(50.0, 2.0) == 102);
  CHECK(preb::required_bath_size(40.0, 2.0) == 82);
  CHECK(preb::required_bath_size(5.6, 2.0) == 14);  // ceil(13.2)
  CHECK(preb::required_bath_size(0.0, 0.5) == 1);   // ceil(0.5)
  // Round-off around an integral product must not bump the ceiling.
  CHECK(preb::required_bath_size(0.1 + 0.2, 10.0) == 13);
  CHECK_THROWS_AS(preb::required_bath_size(-1.0, 2.0), std::invalid_argument);
  CHECK_THROWS_AS(preb::required_bath_size(1.0, 0.0), std::invalid_argument);
}

TEST_CASE("chain bath JSON round trip", "[chainmap]") {
  const auto J = SpectralDensity::semicircle(1.0, 2.0);
  preb::ThermalParams tp{0.1, 1.5, preb::Statistics::Fermi};
  const auto cb = preb::star_basis(preb::chain_coefficients(J, 6, tp));

  const nlohmann::json j = cb;
  const auto back = j.get<ChainBath>();
  CHECK(back.gamma == cb.gamma);
  CHECK(back.eps == cb.eps);
  CHECK(back.hop == cb.hop);
  CHECK(back.thermal.beta == tp.beta);
  CHECK(back.thermal.mu == tp.mu);
  CHECK(back.thermal.stats == tp.stats);
  REQUIRE(back.eigs.has_value());
  CHECK(back.eigs->E == cb.eigs->E);
  CHECK((back.eigs->Phi - cb.eigs->Phi).cwiseAbs().maxCoeff() == 0.0);

  // Text round trip preserves doubles exactly as well.
  const auto reparsed = nlohmann::json::parse(j.dump()).get<ChainBath>();
  CHECK(reparsed.hop == cb.hop);

  nlohmann::json broken = j;
  broken["hop"] = std::vector<double>{1.0};  // wrong length for 6 sites
  CHECK_THROWS_AS(broken.get<ChainBath>(), std::invalid_argument);

  nlohmann::json bad_stats = j;
  bad_stats["thermal"]["stats"] = "maxwell";
  CHECK_THROWS_AS(bad_stats.get<ChainBath>(), std::invalid_argument);
}

TEST_CASE("density descriptor round trip", "[chainmap]") {
  const auto Js = SpectralDensity::semicircle(1.5, 2.0);
  const auto Js2 = preb::density_from_json(preb::density_to_json(Js));
  CHECK(Js2.kind() == SpectralDensity::Kind::Semicircle);
  CHECK(Js2.Gamma() == Js.Gamma());
  CHECK(Js2.g_B() == Js.g_B());

  const auto Jo = SpectralDensity::ohmic_gaussian(0.1, 50.0);
  const auto Jo2 = preb::density_from_json(preb::density_to_json(Jo));
  CHECK(Jo2.support_max() == Jo.support_max());
  CHECK(Jo2.gamma_sq() == Jo.gamma_sq());

  const auto Jt = SpectralDensity::tabulated({0.0, 1.0, 2.0}, {0.0, 1.0, 0.0});
  const auto Jt2 = preb::density_from_json(preb::density_to_json(Jt));
  CHECK(Jt2.tab_w() == Jt.tab_w());
  CHECK(Jt2.tab_J() == Jt.tab_J());

  CHECK_THROWS_AS(preb::density_from_json({{"kind", "lorentzian"}}), std::invalid_argument);
}
