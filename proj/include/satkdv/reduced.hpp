#pragma once

#include <cstddef>
#include <vector>

#include "satkdv/modulation.hpp"

namespace satkdv {

// Constants of the two-parameter flow
//   lambda_s / lambda = -b,   b_s + 2 b^2 + c0 m omega b = 0,
//   x_s = lambda,   t_s = lambda^3,   omega = gamma / lambda^m.
struct ReducedParams {
  double gamma = 0.0;
  double q = 7.0;
  double c0 = 1.125;  // frequency-coupling constant; quadrature value at q = 7
  double m = 1.0;     // = (q - 5) / 2
};

// Parameters with c0 computed from the ground-state quadrature at exponent q.
ReducedParams params_for(double gamma, double q);

struct ReducedState {
  double s = 0.0;
  double t = 0.0;
  double lambda = 1.0;  // > 0
  double b = 0.0;
  double x = 0.0;
};

// The invariant b / lambda^2 + (m c0 / (m+2)) gamma / lambda^{m+2}, conserved
// along the exact flow; its sign selects the regime.
double conserved_L(const ReducedState& st, const ReducedParams& p);

// The drift b0 placing (lambda0, b0) on the level set conserved_L = L0.
double balance_b(double lambda0, const ReducedParams& p, double L0 = 0.0);

struct IntegrateOptions {
  double tolerance = 1e-12;    // local error control, absolute and relative
  std::size_t samples = 1025;  // returned states, uniform in s including ends
  double blow_up_b = 1e9;      // |b| past this on the negative side is divergence
};

// Adaptive eighth-order integration in rescaled time from init.s to s_end,
// accumulating t through dt = lambda^3 ds.  The conserved quantity drifts by
// at most about tolerance * (1 + |L0|) per unit s.  Throws "blow-up-detected"
// when b falls below -blow_up_b (the finite-s divergence of the exit side,
// also reported if the controller stalls while b is already far negative)
// and "step-underflow" if the controller stalls anywhere else.
std::vector<ReducedState> integrate_reduced(const ReducedState& init,
                                            const ReducedParams& p, double s_end,
                                            const IntegrateOptions& opts = {});

// Regime from the sign of the conserved quantity: positive means Soliton,
// within the zero band means BlowDown, negative means Exit.
Regime classify_L0(const ReducedState& init, const ReducedParams& p,
                   double zero_band = 1e-12);

struct ExponentFit {
  double lambda_exp = 0.0;  // d log lambda / d log t
  double x_exp = 0.0;       // d log x / d log t
};

// Log-log least-squares slopes of lambda(t) and x(t) over [t_min, t_max]
// (defaulting to the final decade).  The trajectory must span at least two
// decades in t and put at least eight samples in the window; otherwise
// "insufficient-span" is thrown.
ExponentFit asymptotic_exponents(const std::vector<ReducedState>& traj,
                                 double t_min = -1.0, double t_max = -1.0);

struct SolitonLimit {
  double lambda_inf = 0.0;  // (m c0 gamma / ((m+2) L0))^{1/(m+2)}
  double x_slope = 0.0;     // terminal dx/dt = lambda_inf^{-2}
};

// Closed-form fixed point of the positive-L0 branch.  Throws "wrong-regime"
// when conserved_L(init) <= 0 and "invalid-argument" when gamma <= 0 (no
// saturation scale exists to arrest the focusing).
SolitonLimit soliton_limit(const ReducedState& init, const ReducedParams& p);

struct BarrierCheck {
  bool lower_ok = false;  // F stayed above min(F(0), L^{1/(1+nu)})
  bool upper_ok = false;  // F stayed below max(F(0), L^{1/(1+nu)})
  double f_min = 0.0;
  double f_max = 0.0;
  double f_end = 0.0;
};

// Integrates the boundary case F_x = L - F^{1+nu} of the comparison estimate
// and reports whether the trajectory respected the barrier L^{1/(1+nu)} from
// both sides.
BarrierCheck ode_comparison_check(double F0, double nu, double L, double x_end);

}  // namespace satkdv
