#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <vector>

#include "satkdv/evolution.hpp"
#include "satkdv/profile.hpp"

namespace satkdv {

// Decomposition of a field near the modulated soliton family:
//   u(x) = lambda^{-1/2} (Q_{b,omega} + epsilon)((x - x_center) / lambda),
// with the frequency slaved to the scale by omega = gamma / lambda^m and
// epsilon orthogonal to Q_omega, Lambda Q_omega and y Lambda Q_omega.
struct ModulationState {
  double t = 0.0;
  double s = 0.0;       // rescaled time, ds/dt = lambda^{-3}
  double lambda = 1.0;  // > 0
  double b = 0.0;
  double x_center = 0.0;
  double omega = 0.0;  // = gamma / lambda^m
  GridFunction epsilon;          // residual field on the y-grid
  double newton_residual = 0.0;  // largest orthogonality residual at acceptance
  int newton_iterations = 0;
  double gamma = 0.0;  // saturation strength of the underlying flow
  double q = 7.0;      // saturation exponent
};

struct DecomposeOptions {
  double y_half_length = 40.0;  // y-grid extent when no guess supplies one
  std::size_t y_points = 4001;  // odd, so y = 0 is a node
  double tolerance = 1e-10;     // acceptance threshold on the residuals
  int max_iterations = 50;
  double alpha_star = 0.3;  // residual level distinguishing a stall near the
                            // family (newton-diverged) from data with no
                            // nearby fit at all (outside-tube)
  double b_star = 0.1;      // admissible |b| range for the localized profile
};

// Newton iteration on (lambda, x_center, b) driving the three orthogonality
// residuals of epsilon = lambda^{1/2} u(lambda y + x) - Q_{b,omega} to zero,
// with omega recomputed from lambda at every iterate.  Fields on grids of the
// form [-L, L) are sampled periodically; otherwise u is extended by zero.
// Throws "newton-diverged" when the residuals stall above the tolerance and
// "outside-tube" when they stall above alpha_star.  The returned epsilon may
// have any size; callers decide what residual norm is acceptable.
ModulationState decompose(const GridFunction& u, double gamma, double q,
                          const std::optional<ModulationState>& guess = std::nullopt,
                          const DecomposeOptions& opts = {});

struct TubeDistance {
  double distance = 0.0;  // L2 mismatch at the fitted scale and center
  double lambda = 1.0;    // fitted scale
  double x_center = 0.0;  // fitted center
};

// Least-squares fit of the two-parameter rescaled ground-state family to u,
// measuring how far the state sits from the solitary-wave manifold without
// imposing any orthogonality condition.  The profile shape is frozen at the
// reference frequency gamma (the scale-1 member); for small gamma this
// differs from the slaved-frequency family by O(gamma).  Unlike decompose,
// the fit is a minimization and succeeds for arbitrary finite data.
TubeDistance tube_distance(const GridFunction& u, double gamma, double q,
                           const DecomposeOptions& opts = {});

// Rebuild lambda^{-1/2} (Q_{b,omega} + epsilon)((x - x_center)/lambda) on a
// target grid; the bracket is extended by zero beyond the y-grid.
GridFunction reconstruct(const ModulationState& ms, const Grid& target);

// Decompose every snapshot, warm-starting each solve from the previous state.
// Stamps t from the snapshots, accumulates s by the trapezoid rule applied to
// ds = lambda^{-3} dt, and unwraps x_center across the periodic boundary.  If
// a later snapshot fails to decompose, the trajectory is returned truncated
// at the last success; a failure on the first snapshot propagates.
std::vector<ModulationState> track(const std::vector<FieldState>& states,
                                   double gamma, double q,
                                   const DecomposeOptions& opts = {});

struct RateSample {
  double s = 0.0;
  double lambda_rate = 0.0;  // lambda_s / lambda + b
  double b_rate = 0.0;       // b_s
  double x_rate = 0.0;       // x_s / lambda - 1
};

// Centered finite-difference rates in s at the interior trajectory points.
// Throws "insufficient-points" for fewer than three states.
std::vector<RateSample> modulation_rates(const std::vector<ModulationState>& traj);

// Weight family on a fixed grid.  In z = y/B the shapes are
//   psi:   e^{2z} for z <= -1, 1 for z >= -1/2,
//   phi_i: e^{z} for z <= -1, 1 + z on [-1/2, 1/2], z^i for z >= 2,
// joined monotonically with C^2 quintic-smoothstep transitions, and
//   phi_10: 0 for y <= 0, y^{10} for y >= 1 (unscaled).
struct WeightSet {
  double B = 100.0;  // >= 100
  GridFunction psi_B;
  GridFunction phi_1B;
  GridFunction phi_2B;
  GridFunction phi_10;
  // exact derivatives of the three scaled weights
  GridFunction psi_B_prime;
  GridFunction phi_1B_prime;
  GridFunction phi_2B_prime;
};

WeightSet make_weights(const Grid& grid, double B = 100.0);

struct FunctionalReport {
  double N1 = 0.0;  // int (eps_y^2 psi_B + eps^2 phi_1B)
  double N2 = 0.0;  // int (eps_y^2 psi_B + eps^2 phi_2B)
  double N1_loc = 0.0;  // int eps^2 phi_1B'
  double N2_loc = 0.0;  // int eps^2 phi_2B'
  std::array<std::array<double, 2>, 2> F{};  // F[i-1][j-1], weighted energies
  double J1 = 0.0;      // (eps, rho_1)
  double J2 = 0.0;      // (eps, rho_2)
  double J = 0.0;       // (eps, 4 rho_1 + rho_2)
  double tail10 = 0.0;  // int phi_10 eps^2
};

// Weighted norms, energies and scalar products of ms.epsilon.  The energies
//   F_{i,j} = int (eps_y^2 psi_B + (1 + Jc_{i,j}) eps^2 phi_iB
//             - (1/3) psi_B [(W+eps)^6 - W^6 - 6 eps W^5]
//             + (2 omega/(q+1)) psi_B [|W+eps|^{q+1} - |W|^{q+1}
//                                      - (q+1) eps W |W|^{q-1}])
// use W = Q_{b,omega} from `profile` and Jc_{i,j} = (1-J1)^{-4(j-1)-2i} - 1.
// Throws "grid-mismatch" when the state, weights and profile grids differ.
FunctionalReport evaluate_functionals(const ModulationState& ms, const WeightSet& w,
                                      const LocalizedProfile& profile);

// Convenience form that rebuilds the localized profile for the state's own
// (b, omega, q) on the state's grid, reusing internally cached ground states.
FunctionalReport evaluate_functionals(const ModulationState& ms, const WeightSet& w);

// The scalar-product weight rho = 4 rho_1 + rho_2, where rho_1 is the
// normalized cumulative integral of Lambda Q and rho_2 combines Lambda Q and
// the nonlocal profile so that rho vanishes at both ends of the grid.
GridFunction rho_weight(const LocalizedProfile& profile);

// c0 = (q-1)/(4(q+1)) int |Q|^{q+1}, the frequency-coupling constant of the
// parameter system, and c1 = m/(m+2) c0, the separation-line slope.
double c0_constant(const GroundState& gs);
double c1_constant(const GroundState& gs);

struct MonotonicityOptions {
  double noise_floor = 1e-10;  // additive allowance when fitting constants
};

// Finite-difference rates of the weighted energies along a trajectory,
// evaluated at the interior states.  "rate_fi1" is dF_{i,1}/ds and
// "rate_fi2_scaled" is lambda^2 d(F_{i,2}/lambda^2)/ds; both are compared
// against the forcing size b^2 (omega^2 + b^2).  The fitted constants are the
// smallest C with rate <= noise_floor + C * source sample-wise; mu_hat is the
// largest dissipation multiple absorbable without exceeding twice the plain
// fit; violations counts rates not attributable to the forcing at any
// constant up to 1e6.
struct MonotonicityReport {
  std::vector<double> s;
  std::vector<double> rate_f11, rate_f21;
  std::vector<double> rate_f12_scaled, rate_f22_scaled;
  std::vector<double> dissipation_1, dissipation_2;  // int (eps_y^2+eps^2) phi_iB'
  std::vector<double> source;                        // b^2 (omega^2 + b^2)
  std::vector<double> tail_rate;    // lambda^{-10} d(lambda^{10} tail10)/ds
  std::vector<double> tail_source;  // N1_loc + b^2
  double c_fit_f11 = 0.0, c_fit_f21 = 0.0;
  double c_fit_f12 = 0.0, c_fit_f22 = 0.0;
  double c_fit_tail = 0.0;
  double mu_hat = 0.0;
  int violations = 0;
};

MonotonicityReport monotonicity_probe(const std::vector<ModulationState>& traj,
                                      const WeightSet& w,
                                      const MonotonicityOptions& opts = {});

enum class Regime { Soliton, BlowDown, Exit, Undetermined };

struct RegimeReport {
  Regime regime = Regime::Undetermined;
  double margin = 0.0;  // extremal (b + c1 omega)/threshold over the scan
  std::ptrdiff_t separation_index = -1;
};

// Scan the trajectory for the separation condition
//   b + c1 omega >= +C_star (N1 + b^2 + omega^2)   (toward Soliton)
//   b + c1 omega <= -C_star (N1 + b^2 + omega^2)   (toward Exit)
// with a +-20% indecision band around the threshold.  Soliton additionally
// requires the scale to stabilize after separation; Exit is also returned
// when ||epsilon||_2 exceeds alpha_star; BlowDown means no separation before
// the horizon while the scale grows.  States with an empty epsilon are
// treated as having epsilon = 0.
RegimeReport classify_regime(const std::vector<ModulationState>& traj, double c1,
                             double C_star = 10.0, double alpha_star = 0.3);

}  // namespace satkdv
