#pragma once

#include <cstddef>
#include <vector>

#include "satkdv/grid.hpp"

namespace satkdv {

// Periodic pseudospectral solver for u_t + (u_xx + u^5 - gamma*u|u|^{q-1})_x = 0.
// The dispersion is integrated exactly (integrating factor); the nonlinear
// flux is advanced with classical RK4, so the time-step guard only needs the
// transport scale: dt <= cfl_constant * h.
struct EvolutionConfig {
  double gamma = 0.0;
  double q = 7.0;
  double domain_half_length = 40.0;
  std::size_t n_modes = 2048;  // power of two
  double dt = 5e-4;
  double t_end = 1.0;
  bool dealias = false;           // 2/3-rule truncation of the nonlinear flux
  double cfl_constant = 0.05;     // guard dt <= cfl_constant * h
  double gradient_ceiling = 0.0;  // run() stops once ||u_x||_2 exceeds this (0 = off)
};

struct FieldState {
  double t = 0.0;
  GridFunction u;
  double mass = 0.0;    // int u^2
  double energy = 0.0;  // (1/2) int u_x^2 - (1/6) int u^6 + (gamma/(q+1)) int |u|^{q+1}
  bool conservation_flag = false;  // set by run() when a drift budget is exceeded
};

// The grid run()/step() operate on: [-L, L) with the right endpoint omitted.
Grid evolution_grid(const EvolutionConfig& cfg);

// Plain h*sum quadrature (exact trapezoid rule for periodic data).
double field_mass(const GridFunction& u);
// Energy with a spectral derivative; u must live on a power-of-two periodic grid.
double field_energy(const GridFunction& u, double gamma, double q);

// Wrap u with its time tag and cached invariants.
FieldState make_state(double t, GridFunction u, const EvolutionConfig& cfg);

// One integrating-factor RK4 step of size cfg.dt.
// Throws "instability-detected" when sup|u| grows more than tenfold in the
// step, "nan-detected" on non-finite values, "invalid-argument" on a config
// or guard violation.
FieldState step(const FieldState& state, const EvolutionConfig& cfg);

// Advance u0 to cfg.t_end, keeping a snapshot every observer_stride steps plus
// the final state.  Snapshots whose relative mass drift exceeds 1e-6 or whose
// energy drift exceeds 1e-5 (relative to max(|E_0|, kinetic energy at t=0))
// are flagged.  If cfg.gradient_ceiling > 0 the run stops early once
// ||u_x||_2 crosses it, returning everything up to and including that state.
std::vector<FieldState> run(const GridFunction& u0, const EvolutionConfig& cfg,
                            std::size_t observer_stride);

// Spatial part of the pseudo-scaling: lambda0^{-1/2} u(x/lambda0), by
// interpolation on u's own grid; preserves the L2 norm.  Throws
// "out-of-domain" when lambda0 < 1 and u has visible support beyond
// lambda0 * x_max.
GridFunction pseudo_rescale(const GridFunction& u, double lambda0);

}  // namespace satkdv
