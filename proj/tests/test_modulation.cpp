#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "satkdv/errors.hpp"
#include "satkdv/evolution.hpp"
#include "satkdv/groundstate.hpp"
#include "satkdv/linearized.hpp"
#include "satkdv/modulation.hpp"
#include "satkdv/profile.hpp"
#include "test_util.hpp"

using namespace satkdv;
using satkdv::testing::contract_grid;
using satkdv::testing::project_out;
using satkdv::testing::random_smooth;

namespace {

double closed_q(double x) { return std::pow(3.0, 0.25) / std::sqrt(std::cosh(2.0 * x)); }

template <class F>
std::string error_code(F&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return "";
}

struct Pipeline {
  GroundState gs;
  LinearizedOperator op;
  NonlocalProfile np;
  LocalizedProfile prof;  // b = 0
  WeightSet weights;
};

const Pipeline& standard_pipeline() {
  static const Pipeline p = [] {
    Pipeline out;
    out.gs = closed_form_Q(contract_grid());
    out.op = build_operator(out.gs);
    out.np = build_P(out.op);
    out.prof = build_localized(0.0, out.gs, out.np);
    out.weights = make_weights(out.gs.profile.grid);
    return out;
  }();
  return p;
}

// Orthogonality directions of the decomposition at omega = 0.
std::vector<GridFunction> orthogonality_directions() {
  const GroundState& gs = standard_pipeline().gs;
  std::vector<GridFunction> dirs(3, gs.profile);
  dirs[1] = scaling_operator(gs.profile);
  dirs[2] = dirs[1];
  for (std::size_t k = 0; k < dirs[2].size(); ++k) dirs[2][k] *= dirs[2].grid.x(k);
  return dirs;
}

double max_orthogonality_residual(const GridFunction& eps) {
  double worst = 0.0;
  for (const GridFunction& d : orthogonality_directions()) {
    worst = std::max(worst, std::abs(inner(eps, d)));
  }
  return worst;
}

EvolutionConfig soliton_config() {
  EvolutionConfig cfg;
  cfg.gamma = 0.0;
  cfg.q = 7.0;
  cfg.n_modes = 2048;
  cfg.dt = 5e-4;
  cfg.t_end = 5.0;
  return cfg;
}

GridFunction scaled_soliton(const Grid& g, double factor) {
  GridFunction u(g);
  for (std::size_t k = 0; k < g.n; ++k) u[k] = factor * closed_q(g.x(k));
  return u;
}

}  // namespace

TEST_CASE("weight family: branches, monotonicity and derivatives") {
  const Grid wide = make_uniform(-300.0, 500.0, 8001);
  const WeightSet w = make_weights(wide, 100.0);
  auto at = [&](double y) {
    return static_cast<std::size_t>(std::llround((y - wide.x_min) / wide.h));
  };

  // branch values: exponential tails, linear middle, polynomial right ends
  CHECK(w.psi_B[at(-250.0)] == doctest::Approx(std::exp(-5.0)).epsilon(1e-12));
  CHECK(w.psi_B[at(10.0)] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(w.phi_1B[at(-150.0)] == doctest::Approx(std::exp(-1.5)).epsilon(1e-12));
  CHECK(w.phi_1B[at(0.0)] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(w.phi_1B[at(30.0)] == doctest::Approx(1.3).epsilon(1e-14));
  CHECK(w.phi_2B[at(30.0)] == doctest::Approx(1.3).epsilon(1e-14));
  CHECK(w.phi_1B[at(300.0)] == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(w.phi_2B[at(300.0)] == doctest::Approx(9.0).epsilon(1e-12));
  CHECK(w.phi_10[at(-1.0)] == 0.0);
  CHECK(w.phi_10[at(2.0)] == doctest::Approx(1024.0).epsilon(1e-12));

  // monotone shapes, with phi_1B never above phi_2B
  double min_slope1 = 1e300, min_slope2 = 1e300, min_slope_psi = 1e300;
  double max_gap = -1e300;
  double max_deriv_err = 0.0;
  for (std::size_t k = 0; k + 1 < wide.n; ++k) {
    const double s1 = (w.phi_1B[k + 1] - w.phi_1B[k]) / wide.h;
    const double s2 = (w.phi_2B[k + 1] - w.phi_2B[k]) / wide.h;
    const double sp = (w.psi_B[k + 1] - w.psi_B[k]) / wide.h;
    min_slope1 = std::min(min_slope1, s1);
    min_slope2 = std::min(min_slope2, s2);
    min_slope_psi = std::min(min_slope_psi, sp);
    max_gap = std::max(max_gap, w.phi_1B[k] - w.phi_2B[k]);
    max_deriv_err = std::max(
        max_deriv_err, std::abs(s1 - 0.5 * (w.phi_1B_prime[k] + w.phi_1B_prime[k + 1])));
    max_deriv_err = std::max(
        max_deriv_err, std::abs(s2 - 0.5 * (w.phi_2B_prime[k] + w.phi_2B_prime[k + 1])));
    max_deriv_err = std::max(
        max_deriv_err, std::abs(sp - 0.5 * (w.psi_B_prime[k] + w.psi_B_prime[k + 1])));
  }
  CHECK(min_slope1 > 1e-4);      // left tail e^{y/B}/B bottoms out at e^{-3}/100
  CHECK(min_slope2 > 1e-4);
  CHECK(min_slope_psi >= 0.0);   // flat at 1 on the right half
  CHECK(max_gap <= 1e-14);
  CHECK(max_deriv_err <= 5e-6);  // stored derivatives match the sampled values

  // scale constraint
  CHECK(error_code([&] { make_weights(wide, 99.0); }) == "invalid-argument");
  CHECK(error_code([&] { make_weights(wide, std::nan("")); }) == "invalid-argument");
}

TEST_CASE("coupling constants of the parameter system") {
  const GroundState& gs = standard_pipeline().gs;
  // (q-1)/(4(q+1)) int Q^8 at q=7 collapses to 9/8, and c1 = (m/(m+2)) c0 = 3/8
  CHECK(c0_constant(gs) == doctest::Approx(1.125).epsilon(1e-10));
  CHECK(c1_constant(gs) == doctest::Approx(0.375).epsilon(1e-10));
  CHECK(c1_constant(gs) == doctest::Approx(c0_constant(gs) / 3.0).epsilon(1e-14));
}

TEST_CASE("scalar-product weight vanishes at both grid ends") {
  const Pipeline& p = standard_pipeline();
  const GridFunction rho = rho_weight(p.prof);
  CHECK(std::abs(rho[0]) <= 1e-12);
  CHECK(std::abs(rho[rho.size() - 1]) <= 1e-12);
  double sup = 0.0;
  for (double v : rho.values) sup = std::max(sup, std::abs(v));
  CHECK(sup == doctest::Approx(1.52761403).epsilon(1e-6));
}

TEST_CASE("decompose recovers exact family members") {
  const Grid yg = contract_grid();
  const Pipeline& p = standard_pipeline();

  SUBCASE("ground state itself") {
    const ModulationState ms = decompose(p.gs.profile, 0.0, 7.0);
    CHECK(std::abs(ms.lambda - 1.0) <= 1e-12);
    CHECK(std::abs(ms.b) <= 1e-12);
    CHECK(std::abs(ms.x_center) <= 1e-12);
    CHECK(ms.newton_iterations == 0);
    CHECK(l2_norm(ms.epsilon) <= 1e-10);
    CHECK(ms.newton_residual <= 1e-10);
    CHECK(ms.omega == 0.0);
    CHECK(ms.q == 7.0);
  }

  SUBCASE("member at twice the scale") {
    const GridFunction u2 = sample(yg, [](double x) {
      return std::sqrt(0.5) * std::pow(3.0, 0.25) / std::sqrt(std::cosh(x));
    });
    const ModulationState ms = decompose(u2, 0.0, 7.0);
    CHECK(ms.lambda == doctest::Approx(2.0).epsilon(1e-8));
    CHECK(std::abs(ms.b) <= 1e-8);
    CHECK(ms.newton_iterations <= 10);
    CHECK(l2_norm(ms.epsilon) <= 1e-7);
    CHECK(max_orthogonality_residual(ms.epsilon) <= 1e-10);
  }

  SUBCASE("translated member") {
    const GridFunction us = sample(yg, [](double y) { return closed_q(y - 3.0); });
    const ModulationState ms = decompose(us, 0.0, 7.0);
    CHECK(ms.x_center == doctest::Approx(3.0).epsilon(1e-10));
    CHECK(std::abs(ms.lambda - 1.0) <= 1e-10);
    CHECK(ms.newton_iterations <= 10);
    CHECK(l2_norm(ms.epsilon) <= 1e-10);
  }

  SUBCASE("frequency slaved to the scale") {
    const GridFunction u2 = sample(yg, [](double x) {
      return std::sqrt(0.5) * std::pow(3.0, 0.25) / std::sqrt(std::cosh(x));
    });
    const ModulationState ms = decompose(u2, 1e-3, 7.0);
    CHECK(ms.lambda == doctest::Approx(2.0).epsilon(5e-3));
    CHECK(ms.omega == doctest::Approx(1e-3 / ms.lambda).epsilon(1e-12));
    CHECK(ms.omega == doctest::Approx(4.9926767e-4).epsilon(1e-6));
    CHECK(ms.newton_iterations <= 10);
    CHECK(l2_norm(ms.epsilon) <= 0.02);  // data is the unsaturated member, so O(gamma)
  }
}

TEST_CASE("decompose absorbs a localized bump within budget") {
  const Pipeline& p = standard_pipeline();
  const Grid yg = p.gs.profile.grid;
  GridFunction u = p.gs.profile;
  for (std::size_t k = 0; k < yg.n; ++k) {
    const double y = yg.x(k);
    u[k] += 0.002 * std::exp(-(y - 2.0) * (y - 2.0));
  }
  const ModulationState ms = decompose(u, 0.0, 7.0);
  CHECK(ms.lambda == doctest::Approx(0.99846668).epsilon(1e-5));
  CHECK(ms.b == doctest::Approx(1.4704e-3).epsilon(1e-3));
  CHECK(ms.x_center == doctest::Approx(6.8779e-3).epsilon(1e-3));
  CHECK(ms.newton_iterations <= 10);
  CHECK(l2_norm(ms.epsilon) <= 0.02);
  CHECK(l2_norm(ms.epsilon) == doctest::Approx(1.692304e-2).epsilon(1e-3));
  CHECK(max_orthogonality_residual(ms.epsilon) <= 1e-10);

  // rebuilding the field and decomposing again reproduces the parameters
  const GridFunction rebuilt = reconstruct(ms, yg);
  double sup_err = 0.0;
  for (std::size_t k = 0; k < yg.n; ++k) {
    sup_err = std::max(sup_err, std::abs(rebuilt[k] - u[k]));
  }
  CHECK(sup_err <= 1e-8);
  const ModulationState again = decompose(rebuilt, 0.0, 7.0, ms);
  CHECK(std::abs(again.lambda - ms.lambda) <= 1e-9);
  CHECK(std::abs(again.b - ms.b) <= 1e-9);
  CHECK(std::abs(again.x_center - ms.x_center) <= 1e-9);
}

TEST_CASE("decompose reports honest failure modes") {
  const Pipeline& p = standard_pipeline();
  const Grid yg = p.gs.profile.grid;

  // a 5% mass deficit admits no orthogonal decomposition: the residuals stall
  CHECK(error_code([&] { decompose(scaled_soliton(yg, 0.95), 0.0, 7.0); }) ==
        "newton-diverged");
  // data with no nearby family member at all stalls above the tube threshold
  CHECK(error_code([&] { decompose(scaled_soliton(yg, -1.0), 0.0, 7.0); }) == "outside-tube");
  const GridFunction hump = sample(yg, [](double y) { return 0.05 * std::exp(-y * y / 4.0); });
  CHECK(error_code([&] { decompose(hump, 0.0, 7.0); }) == "outside-tube");
  CHECK(error_code([&] { decompose(GridFunction(yg), 0.0, 7.0); }) == "newton-diverged");

  // argument guards
  CHECK(error_code([&] { decompose(p.gs.profile, -1e-3, 7.0); }) == "invalid-argument");
  CHECK(error_code([&] { decompose(p.gs.profile, 0.0, 5.0); }) == "invalid-argument");
  DecomposeOptions bad;
  bad.tolerance = 0.0;
  CHECK(error_code([&] { decompose(p.gs.profile, 0.0, 7.0, std::nullopt, bad); }) ==
        "invalid-argument");
  bad = DecomposeOptions{};
  bad.max_iterations = 0;
  CHECK(error_code([&] { decompose(p.gs.profile, 0.0, 7.0, std::nullopt, bad); }) ==
        "invalid-argument");
}

TEST_CASE("tube distance measures the gap to the rescaled family") {
  const Pipeline& p = standard_pipeline();
  const Grid yg = p.gs.profile.grid;
  const double q_norm = l2_norm(p.gs.profile);

  SUBCASE("family members sit at distance zero") {
    const TubeDistance on = tube_distance(p.gs.profile, 0.0, 7.0);
    CHECK(on.distance <= 1e-8);
    CHECK(on.lambda == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(std::abs(on.x_center) <= 1e-6);

    const GridFunction u2 = sample(yg, [](double x) {
      return std::sqrt(0.5) * std::pow(3.0, 0.25) / std::sqrt(std::cosh(x));
    });
    const TubeDistance half = tube_distance(u2, 0.0, 7.0);
    CHECK(half.distance <= 1e-8);
    CHECK(half.lambda == doctest::Approx(2.0).epsilon(1e-6));

    const GridFunction us = sample(yg, [](double y) { return closed_q(y - 3.0); });
    const TubeDistance shifted = tube_distance(us, 0.0, 7.0);
    CHECK(shifted.distance <= 1e-8);
    CHECK(shifted.x_center == doctest::Approx(3.0).epsilon(1e-6));
  }

  SUBCASE("uniformly shrunk members sit at the norm deficit") {
    // best fit of c Q stays at scale one, so the distance is (1-c) ||Q||
    for (double c : {0.999, 0.95}) {
      const TubeDistance td = tube_distance(scaled_soliton(yg, c), 0.0, 7.0);
      CHECK(td.distance == doctest::Approx((1.0 - c) * q_norm).epsilon(1e-4));
      CHECK(td.lambda == doctest::Approx(1.0).epsilon(1e-3));
    }
  }

  SUBCASE("the flipped soliton is maximally far") {
    // overlap with -Q is best taken to zero, leaving sqrt(2) ||Q||
    const TubeDistance td = tube_distance(scaled_soliton(yg, -1.0), 0.0, 7.0);
    CHECK(td.distance == doctest::Approx(std::sqrt(2.0) * q_norm).epsilon(1e-3));
  }

  SUBCASE("argument guards") {
    CHECK(error_code([&] { tube_distance(p.gs.profile, -1.0, 7.0); }) == "invalid-argument");
    CHECK(error_code([&] { tube_distance(p.gs.profile, 0.0, 3.0); }) == "invalid-argument");
  }
}

TEST_CASE("weighted functionals match closed forms") {
  const Pipeline& p = standard_pipeline();
  const Grid yg = p.gs.profile.grid;

  SUBCASE("zero residual gives zero report") {
    ModulationState ms;
    ms.epsilon = GridFunction(yg);
    const FunctionalReport r = evaluate_functionals(ms, p.weights, p.prof);
    CHECK(r.N1 == 0.0);
    CHECK(r.N2 == 0.0);
    CHECK(r.N1_loc == 0.0);
    CHECK(r.J == 0.0);
    // the field-difference brackets cancel only to roundoff
    CHECK(std::abs(r.F[0][0]) <= 1e-18);
    CHECK(std::abs(r.F[1][1]) <= 1e-18);
    CHECK(r.tail10 == 0.0);
  }

  SUBCASE("residual equal to the ground state") {
    ModulationState ms;
    ms.epsilon = p.gs.profile;
    ms.q = 7.0;
    const FunctionalReport r = evaluate_functionals(ms, p.weights, p.prof);
    // with B = 100 both phi weights equal 1 + y/B on |y| <= 40, so the norms
    // collapse to int Q'^2 + int Q^2 = (1/4 + 1/2) sqrt(3) pi
    const double n2_exact = 0.75 * std::sqrt(3.0) * M_PI;
    CHECK(r.N2 == doctest::Approx(n2_exact).epsilon(1e-10));
    CHECK(r.N1 == doctest::Approx(r.N2).epsilon(1e-14));
    CHECK(r.N1_loc == doctest::Approx(std::sqrt(3.0) * M_PI / 200.0).epsilon(1e-6));
    CHECK(r.N2_loc == doctest::Approx(r.N1_loc).epsilon(1e-14));
    // the scalar products hit their design values exactly
    CHECK(r.J1 == doctest::Approx(-1.0).epsilon(1e-10));
    CHECK(r.J2 == doctest::Approx(1.0).epsilon(1e-10));
    CHECK(r.J == doctest::Approx(-3.0).epsilon(1e-10));
    CHECK(r.tail10 == doctest::Approx(6.137919e3).epsilon(1e-5));
    CHECK(r.F[0][0] == doctest::Approx(-75.499399).epsilon(1e-6));
    CHECK(r.F[0][1] == doctest::Approx(-76.137062).epsilon(1e-6));
    CHECK(r.F[1][0] == doctest::Approx(-76.009530).epsilon(1e-6));
    CHECK(r.F[1][1] == doctest::Approx(-76.168946).epsilon(1e-6));
  }

  SUBCASE("convenience overload rebuilds the matching profile") {
    ModulationState ms;
    ms.b = 0.02;
    ms.omega = 1e-3;
    ms.gamma = 1e-3;
    ms.q = 7.0;
    ms.epsilon = GridFunction(yg);
    for (std::size_t k = 0; k < yg.n; ++k) {
      const double y = yg.x(k);
      ms.epsilon[k] = 0.01 * std::exp(-(y - 1.0) * (y - 1.0) / 2.0);
    }
    const GroundState gsw = solve_ground_state(1e-3, 7.0, yg);
    const NonlocalProfile npw = build_P(build_operator(gsw));
    const LocalizedProfile profw = build_localized(0.02, gsw, npw);
    const FunctionalReport a = evaluate_functionals(ms, p.weights, profw);
    const FunctionalReport b = evaluate_functionals(ms, p.weights);
    CHECK(std::abs(a.N1 - b.N1) <= 1e-12);
    CHECK(std::abs(a.N2 - b.N2) <= 1e-12);
    CHECK(std::abs(a.F[0][0] - b.F[0][0]) <= 1e-10);
    CHECK(std::abs(a.J - b.J) <= 1e-12);
    CHECK(std::abs(a.tail10 - b.tail10) <= 1e-10);
  }

  SUBCASE("guards") {
    ModulationState ms;
    ms.epsilon = p.gs.profile;
    const WeightSet other = make_weights(make_symmetric(40.0, 2001));
    CHECK(error_code([&] { evaluate_functionals(ms, other, p.prof); }) == "grid-mismatch");
    ModulationState wrong = ms;
    wrong.omega = 0.5;  // profile was built at frequency zero
    CHECK(error_code([&] { evaluate_functionals(wrong, p.weights, p.prof); }) ==
          "invalid-argument");
    ModulationState empty;
    CHECK(error_code([&] { evaluate_functionals(empty, p.weights, p.prof); }) ==
          "invalid-argument");
    // a residual overlapping -2 rho_1 pushes the level shift out of range
    ModulationState big;
    big.epsilon = scaled_soliton(yg, -2.0);
    CHECK(error_code([&] { evaluate_functionals(big, p.weights, p.prof); }) ==
          "invalid-argument");
  }
}

TEST_CASE("energy levels stay comparable to the weighted norms") {
  const Pipeline& p = standard_pipeline();
  const Grid yg = p.gs.profile.grid;
  const std::vector<GridFunction> dirs = orthogonality_directions();
  std::mt19937 rng(413);
  for (int trial = 0; trial < 6; ++trial) {
    GridFunction eps = random_smooth(yg, rng);
    project_out(eps, dirs);
    const double nrm = l2_norm(eps);
    REQUIRE(nrm > 0.0);
    for (auto& v : eps.values) v *= 0.01 / nrm;
    ModulationState ms;
    ms.epsilon = eps;
    ms.q = 7.0;
    const FunctionalReport r = evaluate_functionals(ms, p.weights, p.prof);
    for (int i = 0; i < 2; ++i) {
      for (int j = 0; j < 2; ++j) {
        const double ni = (i == 0) ? r.N1 : r.N2;
        CHECK(ni / r.F[i][j] >= 0.8);
        CHECK(ni / r.F[i][j] <= 1.7);
      }
    }
  }
}

TEST_CASE("track follows a traveling soliton") {
  const EvolutionConfig cfg = soliton_config();
  const Grid pg = evolution_grid(cfg);
  const GridFunction u0 = sample(pg, closed_q);
  const std::vector<FieldState> snaps = run(u0, cfg, 1000);
  REQUIRE(snaps.size() == 11);

  const std::vector<ModulationState> traj = track(snaps, 0.0, 7.0);
  REQUIRE(traj.size() == 11);
  const double mass0 = field_mass(u0);
  for (const ModulationState& ms : traj) {
    CHECK(std::abs(ms.lambda - 1.0) <= 1e-6);
    CHECK(std::abs(ms.b) <= 1e-6);
    CHECK(std::abs(ms.x_center - ms.t) <= 1e-5);
    CHECK(std::abs(ms.s - ms.t) <= 1e-5);
    CHECK(ms.newton_residual <= 1e-10);
    // the reassembled field carries the snapshot's mass
    CHECK(std::abs(field_mass(reconstruct(ms, pg)) - mass0) <= 1e-6);
  }

  // parameter rates vanish on the pure soliton
  const std::vector<RateSample> rates = modulation_rates(traj);
  REQUIRE(rates.size() == traj.size() - 2);
  for (const RateSample& r : rates) {
    CHECK(std::abs(r.lambda_rate) <= 1e-6);
    CHECK(std::abs(r.b_rate) <= 1e-6);
    CHECK(std::abs(r.x_rate) <= 1e-6);
  }

  // the weighted energies are flat along the trajectory
  const WeightSet wy = make_weights(traj.front().epsilon.grid);
  const MonotonicityReport rep = monotonicity_probe(traj, wy);
  REQUIRE(rep.s.size() == traj.size() - 2);
  CHECK(rep.violations == 0);
  for (std::size_t k = 0; k < rep.s.size(); ++k) {
    CHECK(std::abs(rep.rate_f11[k]) <= 1e-9);
    CHECK(std::abs(rep.rate_f21[k]) <= 1e-9);
    CHECK(std::abs(rep.rate_f12_scaled[k]) <= 1e-9);
    CHECK(std::abs(rep.rate_f22_scaled[k]) <= 1e-9);
  }

  // an unambiguous member of the soliton regime
  const RegimeReport reg = classify_regime(traj, 0.375);
  CHECK(reg.regime == Regime::Soliton);
  CHECK(reg.separation_index == 0);
  CHECK(reg.margin > 10.0);
}

TEST_CASE("track slaves the frequency to the scale") {
  EvolutionConfig cfg = soliton_config();
  cfg.gamma = 1e-4;
  cfg.t_end = 1.0;
  const Grid pg = evolution_grid(cfg);
  const GroundState gsw = solve_ground_state(1e-4, 7.0, contract_grid());
  GridFunction u0(pg);
  for (std::size_t k = 0; k < pg.n; ++k) u0[k] = interpolate(gsw.profile, pg.x(k));

  const std::vector<FieldState> snaps = run(u0, cfg, 400);
  const std::vector<ModulationState> traj = track(snaps, 1e-4, 7.0);
  REQUIRE(traj.size() == snaps.size());
  for (const ModulationState& ms : traj) {
    CHECK(std::abs(ms.lambda - 1.0) <= 1e-6);
    CHECK(std::abs(ms.omega - 1e-4) <= 1e-10);
    CHECK(ms.gamma == 1e-4);
  }
}

TEST_CASE("perturbed flow keeps energy rates bounded by the forcing") {
  EvolutionConfig cfg = soliton_config();
  cfg.gamma = 0.01;
  cfg.t_end = 4.0;
  cfg.dealias = true;
  const Grid pg = evolution_grid(cfg);
  const GridFunction u0 = scaled_soliton(pg, 1.02);
  const std::vector<FieldState> snaps = run(u0, cfg, 500);
  REQUIRE(snaps.size() == 17);

  const std::vector<ModulationState> traj = track(snaps, 0.01, 7.0);
  REQUIRE(traj.size() == 17);
  for (const ModulationState& ms : traj) {
    CHECK(ms.b >= 0.025);
    CHECK(ms.b <= 0.050);
    CHECK(l2_norm(ms.epsilon) <= 0.30);
  }
  // the over-massed state relaxes by shedding scale
  CHECK(traj.back().lambda == doctest::Approx(0.7097).epsilon(1e-2));

  const WeightSet wy = make_weights(traj.front().epsilon.grid);
  const MonotonicityReport rep = monotonicity_probe(traj, wy, {1e-8});
  CHECK(rep.violations == 0);
  CHECK(rep.mu_hat >= 0.1);
  CHECK(rep.c_fit_f11 > 0.0);
  CHECK(rep.c_fit_f11 <= 500.0);
  CHECK(rep.c_fit_f21 <= 500.0);
  CHECK(rep.c_fit_f12 <= 5e3);
  CHECK(rep.c_fit_f22 <= 5e3);
  CHECK(rep.c_fit_tail <= 1e15);

  // scale rate controlled by residual norm plus parameter sizes
  const std::vector<RateSample> rates = modulation_rates(traj);
  double rate_const = 0.0;
  for (std::size_t i = 1; i + 1 < traj.size(); ++i) {
    const FunctionalReport fr = evaluate_functionals(traj[i], wy);
    const double source =
        std::sqrt(fr.N2) + std::abs(traj[i].b) * (traj[i].omega + std::abs(traj[i].b));
    REQUIRE(source > 0.0);
    rate_const = std::max(rate_const, std::abs(rates[i - 1].lambda_rate) / source);
  }
  CHECK(rate_const <= 0.5);

  // neither separated nor blown down over this horizon
  const RegimeReport reg = classify_regime(traj, 0.375);
  CHECK(reg.regime == Regime::Undetermined);
  CHECK(reg.margin == doctest::Approx(0.2202).epsilon(0.05));
}

TEST_CASE("tube crossing detects the exit regime") {
  for (double gamma : {0.0, 1e-3}) {
    CAPTURE(gamma);
    EvolutionConfig cfg = soliton_config();
    cfg.gamma = gamma;
    cfg.t_end = 4.0;
    cfg.dealias = true;
    const Grid pg = evolution_grid(cfg);
    const GridFunction u0 = scaled_soliton(pg, 0.95);
    const std::vector<FieldState> snaps = run(u0, cfg, 500);

    // the deficit blocks the orthogonal decomposition from the start
    CHECK(error_code([&] { decompose(snaps.front().u, gamma, 7.0); }) == "newton-diverged");

    double crossing = -1.0;
    double initial = 0.0;
    for (std::size_t i = 0; i < snaps.size() && crossing < 0.0; ++i) {
      const TubeDistance td = tube_distance(snaps[i].u, gamma, 7.0);
      if (i == 0) initial = td.distance;
      if (td.distance > 0.3) crossing = snaps[i].t;
    }
    CHECK(initial == doctest::Approx(0.05 * l2_norm(scaled_soliton(pg, 1.0))).epsilon(1e-3));
    CHECK(crossing >= 1.5);
    CHECK(crossing <= 2.5);
  }
}

TEST_CASE("track truncates at the first failing snapshot") {
  const EvolutionConfig cfg = soliton_config();
  const Grid pg = evolution_grid(cfg);

  std::vector<FieldState> states(2);
  states[0].t = 0.0;
  states[0].u = scaled_soliton(pg, 1.0);
  states[1].t = 0.25;
  states[1].u = scaled_soliton(pg, 0.95);
  const std::vector<ModulationState> traj = track(states, 0.0, 7.0);
  REQUIRE(traj.size() == 1);
  CHECK(std::abs(traj[0].lambda - 1.0) <= 1e-6);

  // a failure on the very first snapshot propagates
  std::vector<FieldState> bad(1);
  bad[0].t = 0.0;
  bad[0].u = scaled_soliton(pg, 0.95);
  CHECK(error_code([&] { track(bad, 0.0, 7.0); }) == "newton-diverged");

  // guards
  CHECK(error_code([&] { track({}, 0.0, 7.0); }) == "invalid-argument");
  std::vector<FieldState> unsorted = states;
  unsorted[1].t = -1.0;
  CHECK(error_code([&] { track(unsorted, 0.0, 7.0); }) == "invalid-argument");
  std::vector<FieldState> mixed = states;
  mixed[1].u = GridFunction(contract_grid());
  CHECK(error_code([&] { track(mixed, 0.0, 7.0); }) == "grid-mismatch");
}

TEST_CASE("finite-difference rates recover a synthetic trajectory") {
  std::vector<ModulationState> traj(21);
  for (std::size_t i = 0; i < traj.size(); ++i) {
    const double s = 0.1 * static_cast<double>(i);
    traj[i].s = s;
    traj[i].lambda = std::exp(-0.2 * s);
    traj[i].b = 0.2;  // cancels the scale decay in the centered combination
    traj[i].x_center = (1.0 - std::exp(-0.2 * s)) / 0.2;
  }
  const std::vector<RateSample> rates = modulation_rates(traj);
  REQUIRE(rates.size() == traj.size() - 2);
  for (const RateSample& r : rates) {
    CHECK(std::abs(r.lambda_rate) <= 1e-3);
    CHECK(std::abs(r.b_rate) <= 1e-12);  // constant up to stencil roundoff
    CHECK(std::abs(r.x_rate) <= 1e-3);
  }

  CHECK(error_code([&] {
          modulation_rates({traj[0], traj[1]});
        }) == "insufficient-points");
  std::vector<ModulationState> unsorted = {traj[0], traj[2], traj[1]};
  CHECK(error_code([&] { modulation_rates(unsorted); }) == "invalid-argument");
}

TEST_CASE("regime classification on synthetic trajectories") {
  auto flat = [](double b, double omega, double lambda, std::size_t n) {
    std::vector<ModulationState> traj(n);
    for (std::size_t i = 0; i < n; ++i) {
      traj[i].s = static_cast<double>(i);
      traj[i].b = b;
      traj[i].omega = omega;
      traj[i].lambda = lambda;
    }
    return traj;
  };

  SUBCASE("small positive drift with a settled scale separates toward the soliton") {
    const RegimeReport reg = classify_regime(flat(0.01, 0.0, 1.0, 10), 0.375);
    CHECK(reg.regime == Regime::Soliton);
    CHECK(reg.separation_index == 0);
    CHECK(reg.margin == doctest::Approx(10.0).epsilon(1e-12));
  }

  SUBCASE("strongly negative drift separates toward exit") {
    const RegimeReport reg = classify_regime(flat(-0.05, 0.0, 1.0, 10), 0.375);
    CHECK(reg.regime == Regime::Exit);
    CHECK(reg.separation_index == 0);
    CHECK(reg.margin == doctest::Approx(-2.0).epsilon(1e-12));
  }

  SUBCASE("a residual past the tube radius forces exit") {
    // drift held in the indecision band so only the residual size can decide
    std::vector<ModulationState> traj = flat(0.1, 0.0, 1.0, 3);
    traj[1].epsilon = standard_pipeline().gs.profile;  // norm well above 0.3
    const RegimeReport reg = classify_regime(traj, 0.375);
    CHECK(reg.regime == Regime::Exit);
    CHECK(reg.separation_index == 1);
  }

  SUBCASE("no separation while the scale grows reads as blow down") {
    std::vector<ModulationState> traj = flat(0.2, 0.0, 1.0, 10);
    for (std::size_t i = 0; i < traj.size(); ++i) {
      traj[i].lambda = 1.0 + 0.2 * static_cast<double>(i);
    }
    const RegimeReport reg = classify_regime(traj, 0.375);
    CHECK(reg.regime == Regime::BlowDown);
  }

  SUBCASE("drift inside the indecision band stays undetermined") {
    const RegimeReport reg = classify_regime(flat(0.1, 0.0, 1.0, 10), 0.375);
    CHECK(reg.regime == Regime::Undetermined);
    CHECK(reg.margin == doctest::Approx(1.0).epsilon(1e-12));
  }

  SUBCASE("guards") {
    CHECK(error_code([&] { classify_regime({}, 0.375); }) == "invalid-argument");
    CHECK(error_code([&] {
            classify_regime(flat(0.0, 0.0, 1.0, 3), 0.375, 0.0);
          }) == "invalid-argument");
  }
}
