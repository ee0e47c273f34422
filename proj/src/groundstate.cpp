#include "satkdv/groundstate.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <string_view>

#include <boost/numeric/odeint.hpp>

#include "satkdv/errors.hpp"
#include "satkdv/linearized.hpp"

namespace satkdv {

namespace {

using State = std::array<double, 2>;
using Stepper = boost::numeric::odeint::runge_kutta_fehlberg78<State>;

// Q'' = Q - Q^5 + omega * Q|Q|^{q-1}, written as a first-order system.
struct TravelingWaveOde {
  double omega;
  double q;
  void operator()(const State& s, State& ds, double /*y*/) const {
    const double u = s[0];
    const double u2 = u * u;
    ds[0] = s[1];
    ds[1] = u - u2 * u2 * u + omega * odd_power(u, q);
  }
};

void advance(const TravelingWaveOde& ode, State& s, double y0, double y1,
             double abs_scale, double rk_tol) {
  if (y0 == y1) return;
  auto stepper = boost::numeric::odeint::make_controlled(
      rk_tol * std::max(abs_scale, 1e-280), rk_tol, Stepper());
  const double dt = (y1 > y0) ? std::min(0.01, y1 - y0) : std::max(-0.01, y1 - y0);
  boost::numeric::odeint::integrate_adaptive(stepper, ode, s, y0, y1, dt);
}

struct LegPair {
  State forward;   // (Q, Q') at the match point from the center leg
  State backward;  // (Q, Q') at the match point from the decaying tail leg
};

// Sign structure of a center shot: starting at rest from a value below the
// homoclinic amplitude, the trajectory turns around while still positive;
// starting above it, the trajectory crosses zero.  This yields a global
// bisection stage that is immune to the exponential sensitivity of the
// matching map.
enum class ShotClass { kBelow, kAbove };

ShotClass classify_shot(const TravelingWaveOde& ode, double a, double y_cap,
                        double rk_tol) {
  auto stepper = boost::numeric::odeint::make_controlled(rk_tol, rk_tol, Stepper());
  State s{a, 0.0};
  double y = 0.0;
  double dt = 0.01;
  bool went_down = false;
  while (y < y_cap) {
    if (s[0] <= 0.0) return ShotClass::kAbove;
    if (went_down && s[1] >= 0.0) return ShotClass::kBelow;
    if (s[1] < -1e-10) went_down = true;
    dt = std::clamp(dt, 1e-8, 0.05);
    if (y + dt > y_cap) dt = y_cap - y;
    stepper.try_step(ode, s, y, dt);
  }
  return (s[0] > 0.0) ? ShotClass::kBelow : ShotClass::kAbove;
}

// Bisect the center amplitude inside a validated bracket.
double bisect_center(const TravelingWaveOde& ode, double lo, double hi,
                     double y_cap, double rk_tol) {
  for (int i = 0; i < 60 && (hi - lo) > 1e-13 * hi; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (classify_shot(ode, mid, y_cap, rk_tol) == ShotClass::kBelow) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

// Forward leg: even data (a, 0) at y = 0.  Backward leg: pure decaying
// branch c*exp(-y) seeded at y_start (so Q + Q' = 0 there exactly).
LegPair shoot(const TravelingWaveOde& ode, double a, double c, double y_match,
              double y_start, double rk_tol) {
  LegPair legs{};
  legs.forward = {a, 0.0};
  advance(ode, legs.forward, 0.0, y_match, std::abs(a), rk_tol);
  const double edge = c * std::exp(-y_start);
  legs.backward = {edge, -edge};
  advance(ode, legs.backward, y_start, y_match, std::abs(edge), rk_tol);
  return legs;
}

struct MatchResult {
  double a = 0.0;
  double c = 0.0;
  double residual = 0.0;
  int iterations = 0;
};

// Damped Newton on (a, c) matching value and slope at y_match.
MatchResult match_legs(const TravelingWaveOde& ode, double a, double c,
                       double y_match, double y_start, const ShootOptions& opts) {
  const double center0 = std::pow(3.0, 0.25);
  auto mismatch = [&](double aa, double cc, double& scale) {
    const LegPair legs = shoot(ode, aa, cc, y_match, y_start, opts.rk_tol);
    scale = std::abs(legs.backward[0]) + std::abs(legs.backward[1]) + 1e-300;
    return std::array<double, 2>{legs.forward[0] - legs.backward[0],
                                 legs.forward[1] - legs.backward[1]};
  };

  double scale = 0.0;
  std::array<double, 2> f = mismatch(a, c, scale);
  double norm = std::hypot(f[0], f[1]);

  MatchResult out{a, c, norm / scale, 0};
  for (int iter = 1; iter <= opts.max_iter; ++iter) {
    if (norm <= 1e-12 * scale) break;

    const double da = 1e-7 * std::max(std::abs(a), 1e-3);
    const double dc = 1e-7 * std::max(std::abs(c), 1e-3);
    double s_dummy = 0.0;
    const std::array<double, 2> fa = mismatch(a + da, c, s_dummy);
    const std::array<double, 2> fc = mismatch(a, c + dc, s_dummy);
    const double j00 = (fa[0] - f[0]) / da, j01 = (fc[0] - f[0]) / dc;
    const double j10 = (fa[1] - f[1]) / da, j11 = (fc[1] - f[1]) / dc;
    const double det = j00 * j11 - j01 * j10;
    require(std::isfinite(det) && det != 0.0, "no-convergence",
            "shooting Jacobian is singular");

    const double step_a = (j11 * f[0] - j01 * f[1]) / det;
    const double step_c = (j00 * f[1] - j10 * f[0]) / det;

    double damping = 1.0;
    double next_norm = norm, next_scale = scale;
    std::array<double, 2> next_f = f;
    double na = a, nc = c;
    for (int cut = 0; cut < 8; ++cut) {
      na = a - damping * step_a;
      nc = c - damping * step_c;
      if (nc > 0.0) {
        next_f = mismatch(na, nc, next_scale);
        next_norm = std::hypot(next_f[0], next_f[1]);
        if (next_norm < norm || next_norm <= 1e-12 * next_scale) break;
      }
      damping *= 0.5;
    }

    require(na > 0.3 * center0 && na < 3.0 * center0 && nc > 1e-3 && nc < 1e3,
            "omega-too-large",
            "shooting iterate escaped the admissible bracket");

    const double moved = std::abs(na - a) + std::abs(nc - c);
    a = na;
    c = nc;
    f = next_f;
    norm = next_norm;
    scale = next_scale;
    out = {a, c, norm / scale, iter};
    if (moved <= 1e-14 * (std::abs(a) + std::abs(c))) break;
  }
  require(out.residual <= 1e-9, "no-convergence",
          "shooting match did not reach tolerance");
  return out;
}

void check_symmetric_grid(const Grid& grid) {
  require(grid.n % 2 == 1, "invalid-argument",
          "ground states need an odd-sized symmetric grid");
  require(std::abs(grid.x_min + grid.x_max()) <= 1e-10 * grid.length(),
          "invalid-argument", "ground states need a symmetric grid");
}

}  // namespace

double odd_power(double u, double p) {
  if (u == 0.0) return 0.0;
  return std::copysign(std::pow(std::abs(u), p), u);
}

GroundState closed_form_Q(const Grid& grid, double q) {
  check_symmetric_grid(grid);
  GroundState gs;
  gs.omega = 0.0;
  gs.q = q;
  gs.m = 0.5 * (q - 5.0);
  const double amp = std::pow(3.0, 0.25);
  gs.profile = sample(grid, [amp](double x) {
    // sech(2x) written to avoid cosh overflow on wide grids
    const double e = std::exp(-2.0 * std::abs(x));
    return amp * std::sqrt(2.0 * e / (1.0 + e * e));
  });
  gs.center_value = amp;
  gs.tail_amplitude = amp * std::sqrt(2.0);
  return gs;
}

GroundState solve_ground_state(double omega, double q, const Grid& grid,
                               const ShootOptions& opts) {
  check_symmetric_grid(grid);
  require(q > 5.0, "invalid-argument", "saturation exponent must exceed 5");
  require(omega >= 0.0, "invalid-argument", "omega must be nonnegative");
  require(omega < opts.omega_star, "omega-too-large",
          "omega exceeds the admissibility bound");

  const double y_max = grid.x_max();
  const std::size_t center = (grid.n - 1) / 2;
  const std::size_t k_match = std::min(
      grid.n - 2, center + static_cast<std::size_t>(std::llround(
                               std::min(opts.match_point, 0.5 * y_max) / grid.h)));
  const double y_match = grid.x(k_match);
  // Seed the decaying branch where the equation is already linear to machine
  // precision; beyond it the tail is a pure exponential.
  const double y_start = std::min(y_max, y_match + 80.0);

  const TravelingWaveOde ode{omega, q};
  const double y_cap = std::min(32.0, y_max);

  // Bracket the homoclinic amplitude, preferring a tight window around the
  // caller's guess, then bisect before the Newton polish.
  double lo = 1.05, hi = 1.6;
  if (opts.center_guess > 0.0) {
    const double g = opts.center_guess;
    if (classify_shot(ode, 0.97 * g, y_cap, opts.rk_tol) == ShotClass::kBelow &&
        classify_shot(ode, 1.03 * g, y_cap, opts.rk_tol) == ShotClass::kAbove) {
      lo = 0.97 * g;
      hi = 1.03 * g;
    }
  }
  require(classify_shot(ode, lo, y_cap, opts.rk_tol) == ShotClass::kBelow &&
              classify_shot(ode, hi, y_cap, opts.rk_tol) == ShotClass::kAbove,
          "omega-too-large", "no homoclinic amplitude inside the bracket");
  const double a_bis = bisect_center(ode, lo, hi, y_cap, opts.rk_tol);

  // Amplitude of the decaying branch estimated from the bisected shot.
  State probe{a_bis, 0.0};
  advance(ode, probe, 0.0, y_match, a_bis, opts.rk_tol);
  const double c_est = 0.5 * (probe[0] - probe[1]) * std::exp(y_match);
  require(c_est > 0.0, "no-convergence", "bisected shot has no decaying part");

  const MatchResult fit =
      match_legs(ode, a_bis, c_est, y_match, y_start, opts);

  GroundState gs;
  gs.omega = omega;
  gs.q = q;
  gs.m = 0.5 * (q - 5.0);
  gs.tail_amplitude = fit.c;
  gs.shoot_residual = fit.residual;
  gs.newton_iterations = fit.iterations;
  gs.profile = GridFunction{grid, std::vector<double>(grid.n, 0.0)};

  // Sample the whole right half from the tail leg: it stays on the decaying
  // branch, so integration noise is not amplified anywhere.  Nodes beyond the
  // seeding point carry the pure exponential.
  const double sample_tol = 0.1 * opts.rk_tol;
  std::size_t k_start = grid.n - 1;
  while (grid.x(k_start) > y_start + 0.5 * grid.h && k_start > center + 1) --k_start;
  for (std::size_t k = grid.n - 1; k > k_start; --k) {
    gs.profile.values[k] = fit.c * std::exp(-grid.x(k));
  }
  const double edge = fit.c * std::exp(-grid.x(k_start));
  State s = {edge, -edge};
  gs.profile.values[k_start] = edge;
  for (std::size_t k = k_start; k-- > center;) {
    advance(ode, s, grid.x(k + 1), grid.x(k), std::abs(edge), sample_tol);
    gs.profile.values[k] = s[0];
  }
  for (std::size_t j = 1; j <= center; ++j) {
    gs.profile.values[center - j] = gs.profile.values[center + j];
  }
  gs.center_value = gs.profile.values[center];
  ensure_finite(gs.profile, "ground-state profile");
  return gs;
}

OmegaDerivative solve_Z(const GroundState& gs) {
  const LinearizedOperator op = build_operator(gs);
  GridFunction rhs{gs.profile.grid, std::vector<double>(gs.profile.grid.n, 0.0)};
  for (std::size_t k = 0; k < rhs.values.size(); ++k) {
    rhs.values[k] = -odd_power(gs.profile.values[k], gs.q);
  }
  OmegaDerivative z;
  z.base = gs;
  try {
    z.profile = solve_constrained(op, rhs);
  } catch (const Error& e) {
    if (std::string_view(e.code()) == "singular-system") {
      fail("singular-operator", "constrained solve for Z is degenerate");
    }
    throw;
  }
  return z;
}

GridFunction ode_residual(const GroundState& gs) {
  const GridFunction d2 = differentiate(gs.profile, 2);
  GridFunction r{gs.profile.grid, std::vector<double>(gs.profile.grid.n, 0.0)};
  for (std::size_t k = 0; k < r.values.size(); ++k) {
    const double u = gs.profile.values[k];
    const double u2 = u * u;
    r.values[k] = d2.values[k] - u + u2 * u2 * u - gs.omega * odd_power(u, gs.q);
  }
  return r;
}

}  // namespace satkdv
