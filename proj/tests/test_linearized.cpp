#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "satkdv/errors.hpp"
#include "satkdv/groundstate.hpp"
#include "satkdv/linearized.hpp"
#include "test_util.hpp"

using namespace satkdv;
using satkdv::testing::contract_grid;

namespace {

GridFunction pow_profile(const GridFunction& f, double p) {
  GridFunction out{f.grid, std::vector<double>(f.grid.n, 0.0)};
  for (std::size_t k = 0; k < f.grid.n; ++k) out.values[k] = odd_power(f.values[k], p);
  return out;
}

double relative_l2_error(const GridFunction& got, const GridFunction& want) {
  GridFunction diff = got;
  for (std::size_t k = 0; k < diff.grid.n; ++k) diff.values[k] -= want.values[k];
  return l2_norm(diff) / l2_norm(want);
}

}  // namespace

TEST_CASE("discretized operator is symmetric and kills the kernel") {
  const LinearizedOperator op = build_operator(closed_form_Q(contract_grid()));

  const Eigen::SparseMatrix<double> diff =
      Eigen::SparseMatrix<double>(op.matrix.transpose()) - op.matrix;
  double asym = 0.0;
  for (int k = 0; k < diff.outerSize(); ++k) {
    for (Eigen::SparseMatrix<double>::InnerIterator it(diff, k); it; ++it) {
      asym = std::max(asym, std::abs(it.value()));
    }
  }
  CHECK(asym <= 1e-12);

  const GridFunction lk = apply_L(op, op.kernel_direction);
  CHECK(l2_norm(lk) <= 1e-7 * l2_norm(op.kernel_direction));
}

TEST_CASE("exact eigenpairs of the unperturbed operator") {
  const GroundState gs = closed_form_Q(contract_grid());
  const LinearizedOperator op = build_operator(gs);

  // cube of the ground state is an eigenfunction with eigenvalue -8
  const GridFunction q3 = pow_profile(gs.profile, 3.0);
  GridFunction want = q3;
  for (double& v : want.values) v *= -8.0;
  CHECK(relative_l2_error(apply_L(op, q3), want) <= 1e-6);

  // scaling direction maps to -2 Q
  const GridFunction lam_q = scaling_operator(gs.profile);
  want = gs.profile;
  for (double& v : want.values) v *= -2.0;
  CHECK(relative_l2_error(apply_L(op, lam_q), want) <= 1e-6);
}

TEST_CASE("scaling operator basics") {
  const Grid grid = contract_grid();
  const GridFunction ones = sample(grid, [](double) { return 1.0; });
  const GridFunction half = scaling_operator(ones);
  for (std::size_t k = 0; k < grid.n; k += 97) {
    CHECK(half.values[k] == doctest::Approx(0.5).epsilon(1e-12));
  }

  const GroundState gs = closed_form_Q(grid);
  const GridFunction lam_q = scaling_operator(gs.profile);
  CHECK(std::abs(inner(lam_q, gs.profile)) <= 1e-9);
  CHECK(lam_q.values[(grid.n - 1) / 2] ==
        doctest::Approx(0.5 * gs.center_value).epsilon(1e-12));
}

TEST_CASE("constrained solves invert the operator on known pairs") {
  const GroundState gs = closed_form_Q(contract_grid());
  const LinearizedOperator op = build_operator(gs);

  GridFunction rhs = gs.profile;
  for (double& v : rhs.values) v *= -2.0;
  const GridFunction g1 = solve_constrained(op, rhs);
  CHECK(relative_l2_error(g1, scaling_operator(gs.profile)) <= 1e-5);
  CHECK(std::abs(inner(g1, op.kernel_direction)) <=
        1e-9 * l2_norm(g1) * l2_norm(op.kernel_direction) + 1e-12);

  const GridFunction q3 = pow_profile(gs.profile, 3.0);
  GridFunction want = q3;
  for (double& v : want.values) v *= -0.125;
  const GridFunction g2 = solve_constrained(op, q3);
  CHECK(relative_l2_error(g2, want) <= 1e-5);

  CHECK_THROWS_AS(solve_constrained(op, op.kernel_direction), Error);
  try {
    solve_constrained(op, op.kernel_direction);
  } catch (const Error& e) {
    CHECK(std::string_view(e.code()) == "not-orthogonal");
  }
}

TEST_CASE("kernel is one-dimensional on the grid") {
  const LinearizedOperator op = build_operator(closed_form_Q(contract_grid()));
  CHECK(count_near_zero_eigenvalues(op, 1e-6) == 1);
  CHECK(count_near_zero_eigenvalues(op, 1e-3) == 1);
}

TEST_CASE("operator is self-adjoint on localized smooth fields") {
  const Grid grid = contract_grid();
  const LinearizedOperator op = build_operator(closed_form_Q(grid));
  std::mt19937 rng(20260815u);
  for (int round = 0; round < 100; ++round) {
    const GridFunction f = satkdv::testing::random_smooth(grid, rng);
    const GridFunction g = satkdv::testing::random_smooth(grid, rng);
    const double lhs = inner(apply_L(op, f), g);
    const double rhs = inner(f, apply_L(op, g));
    CHECK(std::abs(lhs - rhs) <= 1e-9 * l2_norm(f) * l2_norm(g));
  }
}

TEST_CASE("quadratic form is coercive orthogonally to the special pair") {
  const Grid grid = contract_grid();
  const GroundState gs = closed_form_Q(grid);
  const LinearizedOperator op = build_operator(gs);
  const GridFunction q3 = pow_profile(gs.profile, 3.0);

  std::mt19937 rng(77u);
  double min_quotient = 1e30;
  for (int round = 0; round < 100; ++round) {
    GridFunction f = satkdv::testing::random_smooth(grid, rng);
    satkdv::testing::project_out(f, {q3, op.kernel_direction});
    const double quad = inner(apply_L(op, f), f);
    const double norm2 = inner(f, f);
    min_quotient = std::min(min_quotient, quad / norm2);
    CHECK(quad >= norm2 - 1e-6 * norm2);
  }
  MESSAGE("minimum Rayleigh quotient over 100 draws: ", min_quotient);
  CHECK(min_quotient >= 1.0 - 1e-6);
}

TEST_CASE("nonlocal profile reproduces its defining identities") {
  const Grid grid = contract_grid();
  const GroundState gs = closed_form_Q(grid);
  const LinearizedOperator op = build_operator(gs);
  const NonlocalProfile np = build_P(op);

  const double q_mass = integrate(gs.profile);
  CHECK(inner(np.P, gs.profile) ==
        doctest::Approx(q_mass * q_mass / 16.0).epsilon(1e-4));
  CHECK(std::abs(np.F_omega) <= 1e-4 * q_mass * q_mass / 16.0);

  // derivative of L P recovers the scaling direction
  const GridFunction lp = apply_L(op, np.P);
  const GridFunction dlp = differentiate(lp, 1);
  CHECK(relative_l2_error(dlp, scaling_operator(gs.profile)) <= 1e-5);

  // left plateau at half the mass
  CHECK(np.left_limit == doctest::Approx(0.5 * q_mass).epsilon(1e-12));
  CHECK(interpolate(np.P, -30.0) ==
        doctest::Approx(0.5 * q_mass).epsilon(1e-5));
  double plateau_dev = 0.0;
  for (std::size_t k = 0; k < grid.n; ++k) {
    if (grid.x(k) > -25.0) continue;
    plateau_dev = std::max(plateau_dev, std::abs(np.P.values[k] - np.left_limit));
  }
  CHECK(plateau_dev <= 1e-6);

  // right tail decays at least like exp(-y/2)
  double tail_const = 0.0;
  for (std::size_t k = 0; k < grid.n; ++k) {
    const double y = grid.x(k);
    if (y <= 0.0) continue;
    tail_const = std::max(tail_const, std::abs(np.P.values[k]) * std::exp(0.5 * y));
  }
  CHECK(tail_const <= 10.0);

  CHECK(std::abs(inner(np.P, op.kernel_direction)) <= 1e-9);
}

TEST_CASE("omega derivative of the nonlocal profile is bounded and stable") {
  const Grid grid = contract_grid();
  const GroundState gs = solve_ground_state(1e-3, 7.0, grid);
  const NonlocalProfile np = build_P(build_operator(gs));

  const GridFunction d1 = d_omega_P(np, 1e-4);
  const GridFunction d2 = d_omega_P(np, 5e-5);

  CHECK(sup_norm(d1) < 100.0);
  double worst = 0.0;
  for (std::size_t k = 0; k < grid.n; ++k) {
    worst = std::max(worst, std::abs(d1.values[k] - d2.values[k]));
  }
  CHECK(worst <= 1e-2);

  double tail_const = 0.0;
  for (std::size_t k = 0; k < grid.n; ++k) {
    const double y = grid.x(k);
    if (y <= 0.0) continue;
    tail_const = std::max(tail_const, std::abs(d1.values[k]) * std::exp(0.5 * y));
  }
  CHECK(tail_const <= 50.0);
}
