#pragma once

#include <memory>

#include <Eigen/Sparse>

#include "satkdv/groundstate.hpp"

namespace satkdv {

// L_omega f = -f'' + f - 5 Q^4 f + q omega |Q|^{q-1} f around a ground state.
// `matrix` is the symmetric banded collocation discretization with a
// homogeneous closure at the domain ends; used for constrained solves and
// inertia counts.  Pointwise application (apply_L) instead differentiates
// with one-sided boundary stencils so non-decaying inputs stay usable.
struct LinearizedOperator {
  GroundState gs;
  Eigen::SparseMatrix<double> matrix;
  GridFunction kernel_direction;  // discrete Q', spans the kernel

  // cached factorization of the bordered system [[A, r],[r^T, 0]]
  struct Factorization;
  std::shared_ptr<Factorization> factorization;
};

LinearizedOperator build_operator(const GroundState& gs);

// Pointwise L_omega f using grid derivatives (no boundary closure).
GridFunction apply_L(const LinearizedOperator& op, const GridFunction& f);

// Lambda f = f/2 + y f', the generator of the critical scaling.
GridFunction scaling_operator(const GridFunction& f);

// Solve L_omega g = f with (g, Q') = 0 via the bordered saddle system.
// Requires (f, Q') ~ 0; throws "not-orthogonal" otherwise, and
// "singular-system" if the factorization fails.
GridFunction solve_constrained(const LinearizedOperator& op, const GridFunction& f);

// Number of eigenvalues of `matrix` in (-tol, tol), by LDL^T inertia.
int count_near_zero_eigenvalues(const LinearizedOperator& op, double tol);

// Bounded nonlocal profile: P_omega = P_tilde - \int_y^inf Lambda Q_omega,
// with L_omega P_tilde equal to the bounded forcing assembled from Lambda Q.
struct NonlocalProfile {
  GroundState gs;
  GridFunction P;
  GridFunction P_tilde;
  double left_limit = 0.0;  // (1/2) * integral of Q_omega
  double F_omega = 0.0;     // (P, Q_omega) - (1/16) (integral of Q_0)^2
};

NonlocalProfile build_P(const LinearizedOperator& op);

// Centered finite-difference derivative of P with respect to omega
// (one-sided at omega = 0).  Rebuilds the ground state at omega +/- delta.
GridFunction d_omega_P(const NonlocalProfile& np, double delta = 1e-5);

}  // namespace satkdv
