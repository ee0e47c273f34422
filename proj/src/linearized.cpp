#include "satkdv/linearized.hpp"

#include <cmath>
#include <cstddef>
#include <vector>

#include <Eigen/SparseLU>
#include <Eigen/SparseCholesky>

#include "satkdv/errors.hpp"

namespace satkdv {

struct LinearizedOperator::Factorization {
  Eigen::SparseLU<Eigen::SparseMatrix<double>> bordered;
  Eigen::VectorXd border;  // quadrature-weighted kernel direction
};

namespace {

constexpr int kRadius = 4;  // centered stencil radius of the matrix rows

std::vector<double> second_derivative_weights(double h) {
  std::vector<double> nodes(2 * kRadius + 1);
  for (int j = -kRadius; j <= kRadius; ++j) nodes[j + kRadius] = j * h;
  std::vector<double> w = fd_weights(0.0, nodes, 2);
  // enforce exact evenness so the assembled matrix is symmetric bitwise
  for (int j = 0; j < kRadius; ++j) {
    const double avg = 0.5 * (w[j] + w[2 * kRadius - j]);
    w[static_cast<std::size_t>(j)] = avg;
    w[static_cast<std::size_t>(2 * kRadius - j)] = avg;
  }
  return w;
}

Eigen::VectorXd to_eigen(const GridFunction& f) {
  return Eigen::Map<const Eigen::VectorXd>(f.values.data(),
                                           static_cast<long>(f.values.size()));
}

}  // namespace

LinearizedOperator build_operator(const GroundState& gs) {
  const Grid& grid = gs.profile.grid;
  const auto n = static_cast<long>(grid.n);
  const std::vector<double> w2 = second_derivative_weights(grid.h);

  std::vector<Eigen::Triplet<double>> entries;
  entries.reserve(static_cast<std::size_t>(n) * (2 * kRadius + 1));
  for (long k = 0; k < n; ++k) {
    const double u = gs.profile.values[static_cast<std::size_t>(k)];
    const double u2 = u * u;
    const double potential =
        1.0 - 5.0 * u2 * u2 +
        gs.q * gs.omega * std::pow(std::abs(u), gs.q - 1.0);
    for (int j = -kRadius; j <= kRadius; ++j) {
      const long col = k + j;
      if (col < 0 || col >= n) continue;  // homogeneous closure at the ends
      const double value = -w2[static_cast<std::size_t>(j + kRadius)] +
                           (j == 0 ? potential : 0.0);
      entries.emplace_back(k, col, value);
    }
  }

  LinearizedOperator op;
  op.gs = gs;
  op.matrix.resize(n, n);
  op.matrix.setFromTriplets(entries.begin(), entries.end());
  op.kernel_direction = differentiate(gs.profile, 1);

  // Bordered saddle system [[A, r],[r^T, 0]] with r the quadrature-weighted
  // kernel direction; factored once and reused by every constrained solve.
  const std::vector<double> w = quadrature_weights(grid);
  Eigen::VectorXd border(n);
  for (long k = 0; k < n; ++k) {
    border[k] = w[static_cast<std::size_t>(k)] *
                op.kernel_direction.values[static_cast<std::size_t>(k)];
  }
  std::vector<Eigen::Triplet<double>> saddle = entries;
  for (long k = 0; k < n; ++k) {
    saddle.emplace_back(k, n, border[k]);
    saddle.emplace_back(n, k, border[k]);
  }
  Eigen::SparseMatrix<double> bordered(n + 1, n + 1);
  bordered.setFromTriplets(saddle.begin(), saddle.end());

  op.factorization = std::make_shared<LinearizedOperator::Factorization>();
  op.factorization->border = border;
  op.factorization->bordered.compute(bordered);
  require(op.factorization->bordered.info() == Eigen::Success, "singular-system",
          "bordered operator factorization failed");
  return op;
}

GridFunction apply_L(const LinearizedOperator& op, const GridFunction& f) {
  const GroundState& gs = op.gs;
  require(f.grid.same_as(gs.profile.grid), "grid-mismatch",
          "operator and argument live on different grids");
  const GridFunction d2 = differentiate(f, 2);
  GridFunction out{f.grid, std::vector<double>(f.grid.n, 0.0)};
  for (std::size_t k = 0; k < f.grid.n; ++k) {
    const double u = gs.profile.values[k];
    const double u2 = u * u;
    out.values[k] = -d2.values[k] + f.values[k] - 5.0 * u2 * u2 * f.values[k] +
                    gs.q * gs.omega * std::pow(std::abs(u), gs.q - 1.0) * f.values[k];
  }
  return out;
}

GridFunction scaling_operator(const GridFunction& f) {
  const GridFunction d1 = differentiate(f, 1);
  GridFunction out{f.grid, std::vector<double>(f.grid.n, 0.0)};
  for (std::size_t k = 0; k < f.grid.n; ++k) {
    out.values[k] = 0.5 * f.values[k] + f.grid.x(k) * d1.values[k];
  }
  return out;
}

GridFunction solve_constrained(const LinearizedOperator& op, const GridFunction& f) {
  const Grid& grid = op.gs.profile.grid;
  require(f.grid.same_as(grid), "grid-mismatch",
          "operator and right-hand side live on different grids");
  const double overlap = inner(f, op.kernel_direction);
  const double bound =
      1e-8 * l2_norm(f) * l2_norm(op.kernel_direction) + 1e-300;
  require(std::abs(overlap) <= bound, "not-orthogonal",
          "right-hand side has a kernel component");

  const auto n = static_cast<long>(grid.n);
  Eigen::VectorXd rhs(n + 1);
  rhs.head(n) = to_eigen(f);
  rhs[n] = 0.0;
  const Eigen::VectorXd x = op.factorization->bordered.solve(rhs);
  require(op.factorization->bordered.info() == Eigen::Success, "singular-system",
          "bordered solve failed");

  GridFunction g{grid, std::vector<double>(grid.n, 0.0)};
  for (long k = 0; k < n; ++k) g.values[static_cast<std::size_t>(k)] = x[k];
  ensure_finite(g, "constrained solve");
  return g;
}

int count_near_zero_eigenvalues(const LinearizedOperator& op, double tol) {
  auto negatives = [&](double shift) {
    Eigen::SparseMatrix<double> shifted = op.matrix;
    for (long k = 0; k < shifted.rows(); ++k) shifted.coeffRef(k, k) -= shift;
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt(shifted);
    require(ldlt.info() == Eigen::Success, "singular-system",
            "inertia factorization failed");
    const Eigen::VectorXd d = ldlt.vectorD();
    int count = 0;
    for (long k = 0; k < d.size(); ++k) {
      require(std::isfinite(d[k]), "singular-system",
              "inertia factorization produced a non-finite pivot");
      if (d[k] < 0.0) ++count;
    }
    return count;
  };
  return negatives(tol) - negatives(-tol);
}

NonlocalProfile build_P(const LinearizedOperator& op) {
  const GroundState& gs = op.gs;
  const Grid& grid = gs.profile.grid;
  const std::size_t n = grid.n;

  const GridFunction lam_q = scaling_operator(gs.profile);
  // Tail of \int_y^inf Lambda Q beyond the grid, from Q ~ A exp(-y):
  // \int_Y^inf (1/2 - y) A e^{-y} dy = -(Y + 1/2) Q(Y).
  const double tail = -(grid.x_max() + 0.5) * gs.profile.values[n - 1];
  const GridFunction tail_integral = cumulative_from_right(lam_q, tail);

  const GridFunction dlam = differentiate(lam_q, 1);
  GridFunction forcing{grid, std::vector<double>(n, 0.0)};
  for (std::size_t k = 0; k < n; ++k) {
    const double u = gs.profile.values[k];
    const double u2 = u * u;
    forcing.values[k] =
        dlam.values[k] +
        (-5.0 * u2 * u2 + gs.q * gs.omega * std::pow(std::abs(u), gs.q - 1.0)) *
            tail_integral.values[k];
  }
  // Remove discretization-level kernel leakage before the constrained solve.
  const double leak = inner(forcing, op.kernel_direction) /
                      inner(op.kernel_direction, op.kernel_direction);
  for (std::size_t k = 0; k < n; ++k) {
    forcing.values[k] -= leak * op.kernel_direction.values[k];
  }

  NonlocalProfile np;
  np.gs = gs;
  np.P_tilde = solve_constrained(op, forcing);
  np.P = GridFunction{grid, std::vector<double>(n, 0.0)};
  for (std::size_t k = 0; k < n; ++k) {
    np.P.values[k] = np.P_tilde.values[k] - tail_integral.values[k];
  }
  np.left_limit = 0.5 * integrate(gs.profile);
  const double q0_mass = integrate(closed_form_Q(grid, gs.q).profile);
  np.F_omega = inner(np.P, gs.profile) - q0_mass * q0_mass / 16.0;
  return np;
}

GridFunction d_omega_P(const NonlocalProfile& np, double delta) {
  require(delta > 0.0, "invalid-argument", "delta must be positive");
  const GroundState& gs = np.gs;
  const Grid& grid = gs.profile.grid;

  auto profile_at = [&](double omega) {
    const GroundState g = solve_ground_state(omega, gs.q, grid);
    return build_P(build_operator(g)).P;
  };

  GridFunction out{grid, std::vector<double>(grid.n, 0.0)};
  if (gs.omega >= delta) {
    const GridFunction hi = profile_at(gs.omega + delta);
    const GridFunction lo = profile_at(gs.omega - delta);
    for (std::size_t k = 0; k < grid.n; ++k) {
      out.values[k] = (hi.values[k] - lo.values[k]) / (2.0 * delta);
    }
  } else {
    const GridFunction hi = profile_at(gs.omega + delta);
    for (std::size_t k = 0; k < grid.n; ++k) {
      out.values[k] = (hi.values[k] - np.P.values[k]) / delta;
    }
  }
  return out;
}

}  // namespace satkdv
