#pragma once

#include "satkdv/grid.hpp"

namespace satkdv {

// Even, positive, exponentially decaying solution of
//   Q'' - Q + Q^5 - omega*Q|Q|^{q-1} = 0
// sampled on a symmetric grid.
struct GroundState {
  double omega = 0.0;
  double q = 7.0;
  double m = 1.0;  // (q-5)/2
  GridFunction profile;
  double center_value = 0.0;
  double tail_amplitude = 0.0;  // profile(y) ~ tail_amplitude * exp(-y) for large y
  double shoot_residual = 0.0;  // scaled matching mismatch of the final iterate
  int newton_iterations = 0;
};

struct ShootOptions {
  double omega_star = 0.05;  // admissibility bound on omega
  double rk_tol = 1e-12;     // adaptive RK tolerance for the shooting legs
  int max_iter = 50;
  double match_point = 6.0;    // capped at half the domain length internally
  double center_guess = 0.0;   // 0 = start from the closed-form center 3^{1/4}
};

// omega = 0 ground state sampled from Q(x) = (3/cosh^2(2x))^{1/4}.
GroundState closed_form_Q(const Grid& grid, double q = 7.0);

// Shooting construction: integrate from y=0 with Q'(0)=0 forward and from
// y_max backward along the decaying branch (Q + Q' = 0 at y_max), Newton
// matching value and slope at an interior point.
GroundState solve_ground_state(double omega, double q, const Grid& grid,
                               const ShootOptions& opts = {});

// Derivative of the ground state with respect to omega:
// solves L_omega Z = -Q_omega^q with (Z, Q_omega') = 0.
struct OmegaDerivative {
  GroundState base;
  GridFunction profile;
};
OmegaDerivative solve_Z(const GroundState& gs);

// Q'' - Q + Q^5 - omega*Q|Q|^{q-1} evaluated with grid derivatives.
GridFunction ode_residual(const GroundState& gs);

// sign(u)*|u|^p, the odd power used by the saturation nonlinearity.
double odd_power(double u, double p);

}  // namespace satkdv
