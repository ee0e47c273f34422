#include "satkdv/modulation.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <tuple>
#include <utility>

#include <Eigen/Dense>

#include "satkdv/errors.hpp"
#include "satkdv/linearized.hpp"

namespace satkdv {
namespace {

// ---------------------------------------------------------------------------
// Weight shapes in the scaled variable z = y/B.  Outside the two transition
// intervals [-1,-1/2] and [1/2,2] the branch formulas are evaluated exactly;
// the junctions are C^2, monotone, and close the branch values exactly.

double smoothstep(double u) {
  if (u <= 0.0) return 0.0;
  if (u >= 1.0) return 1.0;
  return ((6.0 * u - 15.0) * u + 10.0) * u * u * u;
}

double smoothstep_d(double u) {
  if (u <= 0.0 || u >= 1.0) return 0.0;
  const double v = u * (1.0 - u);
  return 30.0 * v * v;
}

// Plateau bump on [0,1]: smoothstep rise to 1 on [0,1/4], flat, mirrored fall.
double bump(double u) {
  if (u <= 0.0 || u >= 1.0) return 0.0;
  if (u < 0.25) return smoothstep(4.0 * u);
  if (u <= 0.75) return 1.0;
  return smoothstep(4.0 * (1.0 - u));
}

// Antiderivative of the plateau bump; integral over [0,1] is 3/4.
double bump_integral(double u) {
  auto S = [](double v) { return ((v - 3.0) * v + 2.5) * v * v * v * v; };
  if (u <= 0.0) return 0.0;
  if (u >= 1.0) return 0.75;
  if (u < 0.25) return 0.25 * S(4.0 * u);
  if (u <= 0.75) return 0.125 + (u - 0.25);
  return 0.75 - 0.25 * S(4.0 * (1.0 - u));
}

// --- psi: e^{2z} left of -1, 1 right of -1/2; log-space blend in between
// keeps psi' >= 0 because both blend terms are nonnegative on the interval.

double psi_value(double z) {
  if (z <= -1.0) return std::exp(2.0 * z);
  if (z >= -0.5) return 1.0;
  const double u = 2.0 * (z + 1.0);
  return std::exp((1.0 - smoothstep(u)) * 2.0 * z);
}

double psi_deriv(double z) {
  if (z <= -1.0) return 2.0 * std::exp(2.0 * z);
  if (z >= -0.5) return 0.0;
  const double u = 2.0 * (z + 1.0);
  const double h = (1.0 - smoothstep(u)) * 2.0 * z;
  const double hp = 2.0 * (1.0 - smoothstep(u)) - 4.0 * z * smoothstep_d(u);
  return std::exp(h) * hp;
}

// --- phi left junction on [-1,-1/2]: the derivative is assembled from a fast
// e^z shutdown, a late rise to 1 and a positive plateau bump whose amplitude
// is normalized once so the junction lands exactly on the 1+z branch.  The
// closed branch values at the ends make the join C^2.

double left_base_deriv(double z) {
  const double u = 2.0 * (z + 1.0);
  return std::exp(z) * (1.0 - smoothstep(8.0 * u)) + smoothstep(8.0 * u - 7.0);
}

double left_bump_amplitude() {
  static std::once_flag flag;
  static double kappa = 0.0;
  std::call_once(flag, [] {
    const int n = 400000;  // composite Simpson over [-1,-1/2]
    const double h = 0.5 / n;
    double base = 0.0, wint = 0.0;
    for (int i = 0; i <= n; ++i) {
      const double z = -1.0 + i * h;
      const double wt = (i == 0 || i == n) ? 1.0 : (i % 2 ? 4.0 : 2.0);
      base += wt * left_base_deriv(z);
      wint += wt * bump(2.0 * (z + 1.0));
    }
    base *= h / 3.0;
    wint *= h / 3.0;
    kappa = (0.5 - std::exp(-1.0) - base) / wint;
  });
  return kappa;
}

double phi_left_deriv(double z) {
  return left_base_deriv(z) + left_bump_amplitude() * bump(2.0 * (z + 1.0));
}

// --- phi right junction on [1/2,2], u = (z-1/2)/1.5.  For i=1 the slope dips
// from 1 to 1/9 and back so the value sheds the branch offset; the i=2 shape
// adds a nonnegative monotone quintic ramp reaching the z^2 branch with
// matching first and second derivatives, which keeps phi_1 <= phi_2.

double phi1_right_value(double u) { return 1.5 + 1.5 * u - (4.0 / 3.0) * bump_integral(u); }

double phi1_right_deriv(double u) { return 1.0 - (8.0 / 9.0) * bump(u); }

double ramp(double u) {
  return ((0.375 * u - 1.5) * u + 2.125) * u * u * u;
}

double ramp_d(double u) {
  return ((1.875 * u - 6.0) * u + 6.375) * u * u;
}

double phi_value(double z, int i) {
  if (z <= -1.0) return std::exp(z);
  if (z < -0.5) fail("invalid-argument", "phi junction values need cumulative assembly");
  if (z <= 0.5) return 1.0 + z;
  if (z < 2.0) {
    const double u = (z - 0.5) / 1.5;
    double v = phi1_right_value(u);
    if (i == 2) v += 2.0 * ramp(u);
    return v;
  }
  return i == 2 ? z * z : z;
}

double phi_deriv(double z, int i) {
  if (z <= -1.0) return std::exp(z);
  if (z < -0.5) return phi_left_deriv(z);
  if (z <= 0.5) return 1.0;
  if (z < 2.0) {
    const double u = (z - 0.5) / 1.5;
    double d = phi1_right_deriv(u);
    if (i == 2) d += (4.0 / 3.0) * ramp_d(u);
    return d;
  }
  return i == 2 ? 2.0 * z : 1.0;
}

double phi10_value(double y) {
  if (y <= 0.0) return 0.0;
  const double p = std::pow(y, 10);
  if (y >= 1.0) return p;
  return smoothstep(y) * p;
}

// Simpson accumulation of phi_left_deriv over [a, b] with fixed subpanels.
double left_junction_panel(double a, double b) {
  const int sub = 8;
  const double h = (b - a) / (2 * sub);
  double acc = phi_left_deriv(a) + phi_left_deriv(b);
  for (int k = 1; k < 2 * sub; ++k) {
    acc += (k % 2 ? 4.0 : 2.0) * phi_left_deriv(a + k * h);
  }
  return acc * h / 3.0;
}

// ---------------------------------------------------------------------------
// Ground-state / nonlocal-profile pipeline, cached per (omega, q, grid).

struct Pipeline {
  GroundState gs;
  LinearizedOperator op;
  NonlocalProfile np;
  GridFunction lam_q;    // Lambda Q_omega
  GridFunction y_lam_q;  // y * Lambda Q_omega
  double q_l2 = 0.0;     // ||Q_omega||_2
};

using PipelineKey = std::tuple<double, double, std::size_t, double, double>;

const Pipeline& pipeline_for(double omega, double q, const Grid& grid) {
  thread_local std::map<PipelineKey, std::shared_ptr<const Pipeline>> cache;
  const PipelineKey key{omega, q, grid.n, grid.x_min, grid.h};
  auto it = cache.find(key);
  if (it != cache.end()) return *it->second;

  auto pl = std::make_shared<Pipeline>();
  pl->gs = omega == 0.0 ? closed_form_Q(grid, q) : solve_ground_state(omega, q, grid);
  pl->op = build_operator(pl->gs);
  pl->np = build_P(pl->op);
  pl->lam_q = scaling_operator(pl->gs.profile);
  pl->y_lam_q = pl->lam_q;
  for (std::size_t k = 0; k < grid.n; ++k) pl->y_lam_q[k] *= grid.x(k);
  pl->q_l2 = l2_norm(pl->gs.profile);

  if (cache.size() >= 24) {  // keep the hot omega = 0 entries, drop the rest
    for (auto jt = cache.begin(); jt != cache.end();) {
      jt = std::get<0>(jt->first) == 0.0 ? std::next(jt) : cache.erase(jt);
    }
  }
  return *cache.emplace(key, std::move(pl)).first->second;
}

// ---------------------------------------------------------------------------
// Field sampling: grids of the form [-L, L) are treated as periodic; other
// grids are extended by zero.

bool periodic_like(const Grid& g) {
  return std::abs(2.0 * g.x_min + g.h * static_cast<double>(g.n)) <= 1e-9 * g.h;
}

double lagrange6_periodic(const GridFunction& f, double t) {
  const auto n = static_cast<std::ptrdiff_t>(f.grid.n);
  double base = std::floor(t);
  double theta = t - base;
  auto j0 = static_cast<std::ptrdiff_t>(base);
  j0 = ((j0 % n) + n) % n;
  double value = 0.0;
  for (int k = 0; k < 6; ++k) {
    const double ok = k - 2.0;
    double w = 1.0;
    for (int m = 0; m < 6; ++m) {
      if (m == k) continue;
      const double om = m - 2.0;
      w *= (theta - om) / (ok - om);
    }
    value += w * f[static_cast<std::size_t>((j0 + k - 2 + 2 * n) % n)];
  }
  return value;
}

double sample_field(const GridFunction& f, double x, bool periodic) {
  const Grid& g = f.grid;
  if (periodic) {
    double t = (x - g.x_min) / g.h;
    const auto n = static_cast<double>(g.n);
    t = std::fmod(t, n);
    if (t < 0.0) t += n;
    return lagrange6_periodic(f, t);
  }
  if (x < g.x_min || x > g.x_max()) return 0.0;
  return interpolate(f, x);
}

// ---------------------------------------------------------------------------
// Newton residual for the decomposition.

struct Residual {
  GridFunction eps;
  std::array<double, 3> r{};
  double norm = 0.0;
};

Residual eval_residual(const GridFunction& u, bool periodic, double lambda, double x0,
                       double b, const Pipeline& pl, double b_star) {
  const Grid& yg = pl.gs.profile.grid;
  const LocalizedProfile qb = build_localized(b, pl.gs, pl.np, b_star);
  const double amp = std::sqrt(lambda);
  Residual out;
  out.eps = GridFunction(yg);
  for (std::size_t k = 0; k < yg.n; ++k) {
    out.eps[k] = amp * sample_field(u, lambda * yg.x(k) + x0, periodic) - qb.values[k];
  }
  out.r = {inner(out.eps, pl.gs.profile), inner(out.eps, pl.lam_q),
           inner(out.eps, pl.y_lam_q)};
  out.norm = std::max({std::abs(out.r[0]), std::abs(out.r[1]), std::abs(out.r[2])});
  return out;
}

double slaved_omega(double gamma, double lambda, double m) {
  return gamma == 0.0 ? 0.0 : gamma * std::pow(lambda, -m);
}

// Derivative at s1 from three samples at (s0, s1, s2).
double centered_rate(double f0, double f1, double f2, double s0, double s1, double s2) {
  return f0 * (s1 - s2) / ((s0 - s1) * (s0 - s2)) +
         f1 * (2.0 * s1 - s0 - s2) / ((s1 - s0) * (s1 - s2)) +
         f2 * (s1 - s0) / ((s2 - s0) * (s2 - s1));
}

struct PeakEstimate {
  double x = 0.0;
  double amplitude = 0.0;
};

// Location and height of the largest |u| sample, sharpened by fitting a
// parabola through the three points around the maximum.
PeakEstimate estimate_peak(const GridFunction& u) {
  std::size_t kmax = 0;
  for (std::size_t k = 1; k < u.size(); ++k) {
    if (std::abs(u[k]) > std::abs(u[kmax])) kmax = k;
  }
  PeakEstimate pk;
  pk.amplitude = std::abs(u[kmax]);
  pk.x = u.grid.x(kmax);
  if (kmax > 0 && kmax + 1 < u.size()) {
    const double a = std::abs(u[kmax - 1]), c = std::abs(u[kmax + 1]);
    const double denom = a - 2.0 * pk.amplitude + c;
    if (denom < 0.0) {
      const double delta = 0.5 * (a - c) / denom;
      pk.x += delta * u.grid.h;
      pk.amplitude -= 0.25 * (a - c) * delta;
    }
  }
  return pk;
}

}  // namespace

WeightSet make_weights(const Grid& grid, double B) {
  require(std::isfinite(B) && B >= 100.0, "invalid-argument",
          "weight scale must be at least 100");
  require(grid.n >= 2 && grid.h > 0.0, "invalid-argument", "weight grid is degenerate");

  WeightSet w;
  w.B = B;
  w.psi_B = GridFunction(grid);
  w.phi_1B = GridFunction(grid);
  w.phi_2B = GridFunction(grid);
  w.phi_10 = GridFunction(grid);
  w.psi_B_prime = GridFunction(grid);
  w.phi_1B_prime = GridFunction(grid);
  w.phi_2B_prime = GridFunction(grid);

  // Values on the left phi junction accumulate the exact derivative from the
  // branch anchor at z = -1; everything else is a closed-form branch.
  double acc = std::exp(-1.0);
  double z_prev = -1.0;
  for (std::size_t k = 0; k < grid.n; ++k) {
    const double y = grid.x(k);
    const double z = y / B;
    w.psi_B[k] = psi_value(z);
    w.psi_B_prime[k] = psi_deriv(z) / B;
    w.phi_10[k] = phi10_value(y);
    w.phi_1B_prime[k] = phi_deriv(z, 1) / B;
    w.phi_2B_prime[k] = phi_deriv(z, 2) / B;
    if (z > -1.0 && z < -0.5) {
      acc += left_junction_panel(z_prev, z);
      z_prev = z;
      w.phi_1B[k] = acc;
      w.phi_2B[k] = acc;
    } else {
      w.phi_1B[k] = phi_value(z, 1);
      w.phi_2B[k] = phi_value(z, 2);
    }
  }
  return w;
}

ModulationState decompose(const GridFunction& u, double gamma, double q,
                          const std::optional<ModulationState>& guess,
                          const DecomposeOptions& opts) {
  require(std::isfinite(gamma) && gamma >= 0.0, "invalid-argument",
          "gamma must be nonnegative");
  require(std::isfinite(q) && q > 5.0, "invalid-argument", "q must exceed 5");
  require(u.size() >= 8, "invalid-argument", "field has too few samples");
  ensure_finite(u, "decompose input");
  require(opts.max_iterations >= 1 && opts.tolerance > 0.0, "invalid-argument",
          "bad decompose options");

  const double m = 0.5 * (q - 5.0);
  const bool periodic = periodic_like(u.grid);

  Grid ygrid;
  if (guess && guess->epsilon.size() > 0) {
    ygrid = guess->epsilon.grid;
  } else {
    ygrid = make_symmetric(opts.y_half_length, opts.y_points);
  }

  // Scale bounds: keep the slaved frequency inside the solver's admissible
  // range, and refuse runaway scales.
  double lambda_lo = 1e-3;
  if (gamma > 0.0) {
    lambda_lo = std::max(lambda_lo, std::pow(gamma / 0.045, 1.0 / m));
  }
  const double lambda_hi = 1e3;

  double lambda = 1.0, x0 = 0.0, b = 0.0;
  if (guess) {
    lambda = guess->lambda;
    x0 = guess->x_center;
    b = guess->b;
  } else {
    const PeakEstimate pk = estimate_peak(u);
    x0 = pk.x;
    const double center = std::pow(3.0, 0.25);
    lambda = pk.amplitude > 0.0 ? (center / pk.amplitude) * (center / pk.amplitude) : 1.0;
  }
  lambda = std::clamp(lambda, lambda_lo, lambda_hi);
  b = std::clamp(b, -0.95 * opts.b_star, 0.95 * opts.b_star);

  auto eval_at = [&](double lam, double x, double bb) {
    const Pipeline& pl = pipeline_for(slaved_omega(gamma, lam, m), q, ygrid);
    return eval_residual(u, periodic, lam, x, bb, pl, opts.b_star);
  };

  Residual best = eval_at(lambda, x0, b);
  double best_lambda = lambda, best_x = x0, best_b = b;
  Residual current = best;
  int iterations = 0;

  for (; iterations < opts.max_iterations; ++iterations) {
    const Pipeline& pl = pipeline_for(slaved_omega(gamma, lambda, m), q, ygrid);
    const double push_tol = 1e-13 * std::max(1.0, l2_norm(current.eps) * pl.q_l2);
    if (current.norm <= push_tol) break;

    // Forward-difference Jacobian with the profile family frozen at the
    // current frequency; the residual itself always uses the slaved value.
    const double dl = 1e-7 * lambda;
    const double dx = 1e-7 * std::max(lambda, 1.0);
    const double db = 1e-7;
    Eigen::Matrix3d jac;
    const Residual rl = eval_residual(u, periodic, lambda + dl, x0, b, pl, opts.b_star);
    const Residual rx = eval_residual(u, periodic, lambda, x0 + dx, b, pl, opts.b_star);
    const Residual rb = eval_residual(u, periodic, lambda, x0, b + db, pl, opts.b_star);
    for (int i = 0; i < 3; ++i) {
      jac(i, 0) = (rl.r[i] - current.r[i]) / dl;
      jac(i, 1) = (rx.r[i] - current.r[i]) / dx;
      jac(i, 2) = (rb.r[i] - current.r[i]) / db;
    }
    Eigen::FullPivLU<Eigen::Matrix3d> lu(jac);
    if (!lu.isInvertible()) {
      fail("newton-diverged", "singular Jacobian in the decomposition solve");
    }
    Eigen::Vector3d step =
        lu.solve(Eigen::Vector3d(current.r[0], current.r[1], current.r[2]));

    // Trust caps: a raw Newton step can leave the quadratic basin when the
    // parameters couple strongly, so limit each per-iteration move.
    double shrink = 1.0;
    shrink = std::min(shrink, 0.2 * lambda / std::max(std::abs(step(0)), 1e-300));
    shrink = std::min(shrink, 0.5 / std::max(std::abs(step(1)), 1e-300));
    shrink = std::min(shrink, 0.05 / std::max(std::abs(step(2)), 1e-300));
    if (shrink < 1.0) step *= shrink;

    bool improved = false;
    double scale = 1.0;
    for (int attempt = 0; attempt < 10; ++attempt, scale *= 0.5) {
      const double lam_try =
          std::clamp(lambda - scale * step(0), lambda_lo, lambda_hi);
      const double x_try = x0 - scale * step(1);
      const double b_try =
          std::clamp(b - scale * step(2), -0.95 * opts.b_star, 0.95 * opts.b_star);
      Residual trial;
      try {
        trial = eval_at(lam_try, x_try, b_try);
      } catch (const Error&) {
        continue;  // an unbuildable trial profile counts as a failed attempt
      }
      if (std::isfinite(trial.norm) && trial.norm < current.norm) {
        lambda = lam_try;
        x0 = x_try;
        b = b_try;
        current = std::move(trial);
        improved = true;
        break;
      }
    }
    if (current.norm < best.norm) {
      best = current;
      best_lambda = lambda;
      best_x = x0;
      best_b = b;
    }
    if (!improved) break;  // stagnation: fall through to the acceptance check
  }

  if (best.norm > opts.tolerance) {
    if (best.norm > opts.alpha_star) {
      fail("outside-tube", "orthogonality residual " + std::to_string(best.norm) +
                               " exceeds the tube threshold " +
                               std::to_string(opts.alpha_star));
    }
    fail("newton-diverged", "orthogonality residual stalled at " +
                                std::to_string(best.norm) + " after " +
                                std::to_string(iterations) + " iterations");
  }

  ModulationState out;
  out.lambda = best_lambda;
  out.b = best_b;
  out.x_center = best_x;
  out.omega = slaved_omega(gamma, best_lambda, m);
  out.epsilon = std::move(best.eps);
  out.newton_residual = best.norm;
  out.newton_iterations = iterations;
  out.gamma = gamma;
  out.q = q;
  return out;
}

GridFunction reconstruct(const ModulationState& ms, const Grid& target) {
  require(ms.lambda > 0.0 && std::isfinite(ms.lambda), "invalid-argument",
          "reconstruct needs a positive scale");
  require(ms.epsilon.size() > 0, "invalid-argument",
          "reconstruct needs the residual field");
  const Pipeline& pl = pipeline_for(ms.omega, ms.q, ms.epsilon.grid);
  const LocalizedProfile qb = build_localized(ms.b, pl.gs, pl.np);
  GridFunction bracket = qb.values;
  for (std::size_t k = 0; k < bracket.size(); ++k) bracket[k] += ms.epsilon[k];

  GridFunction out{target};
  const double amp = 1.0 / std::sqrt(ms.lambda);
  for (std::size_t k = 0; k < target.n; ++k) {
    const double y = (target.x(k) - ms.x_center) / ms.lambda;
    out[k] = amp * sample_field(bracket, y, /*periodic=*/false);
  }
  return out;
}

TubeDistance tube_distance(const GridFunction& u, double gamma, double q,
                           const DecomposeOptions& opts) {
  require(std::isfinite(gamma) && gamma >= 0.0, "invalid-argument",
          "saturation strength must be nonnegative and finite");
  require(q > 5.0, "invalid-argument", "saturation exponent must exceed 5");
  require(u.size() >= 8, "invalid-argument", "field has too few samples");
  ensure_finite(u, "tube-distance input");

  const Grid ygrid = make_symmetric(opts.y_half_length, opts.y_points);
  const Pipeline& pl = pipeline_for(gamma, q, ygrid);
  const GridFunction& profile = pl.gs.profile;
  const std::vector<double> wq = quadrature_weights(u.grid);

  auto mismatch = [&](double lambda, double x0) {
    const double amp = 1.0 / std::sqrt(lambda);
    double acc = 0.0;
    for (std::size_t k = 0; k < u.grid.n; ++k) {
      const double y = (u.grid.x(k) - x0) / lambda;
      const double fit = amp * sample_field(profile, y, /*periodic=*/false);
      const double d = u[k] - fit;
      acc += wq[k] * d * d;
    }
    return acc;
  };

  const PeakEstimate pk = estimate_peak(u);
  double x0 = pk.x;
  double lambda =
      pk.amplitude > 0.0
          ? std::clamp((pl.gs.center_value / pk.amplitude) *
                           (pl.gs.center_value / pk.amplitude),
                       1e-3, 1e3)
          : 1.0;
  double value = mismatch(lambda, x0);

  // Damped Gauss-Newton on the two fit parameters.
  for (int it = 0; it < 60; ++it) {
    const double dl = 1e-6 * lambda;
    const double dx = 1e-6 * std::max(lambda, 1.0);
    const double gl = (mismatch(lambda + dl, x0) - mismatch(lambda - dl, x0)) / (2.0 * dl);
    const double gx = (mismatch(lambda, x0 + dx) - mismatch(lambda, x0 - dx)) / (2.0 * dx);
    const double hll =
        (mismatch(lambda + dl, x0) - 2.0 * value + mismatch(lambda - dl, x0)) / (dl * dl);
    const double hxx =
        (mismatch(lambda, x0 + dx) - 2.0 * value + mismatch(lambda, x0 - dx)) / (dx * dx);
    double step_l = hll > 0.0 ? gl / hll : 0.1 * lambda * (gl > 0.0 ? 1.0 : -1.0);
    double step_x = hxx > 0.0 ? gx / hxx : 0.1 * (gx > 0.0 ? 1.0 : -1.0);
    step_l = std::clamp(step_l, -0.3 * lambda, 0.3 * lambda);
    step_x = std::clamp(step_x, -1.0, 1.0);
    if (std::abs(gl) * lambda + std::abs(gx) <= 1e-14 * std::max(1.0, value)) break;

    bool improved = false;
    double scale = 1.0;
    for (int attempt = 0; attempt < 12; ++attempt, scale *= 0.5) {
      const double lam_try = std::clamp(lambda - scale * step_l, 1e-3, 1e3);
      const double x_try = x0 - scale * step_x;
      const double trial = mismatch(lam_try, x_try);
      if (std::isfinite(trial) && trial < value) {
        lambda = lam_try;
        x0 = x_try;
        value = trial;
        improved = true;
        break;
      }
    }
    if (!improved) break;
  }

  TubeDistance out;
  out.distance = std::sqrt(std::max(value, 0.0));
  out.lambda = lambda;
  out.x_center = x0;
  return out;
}

std::vector<ModulationState> track(const std::vector<FieldState>& states, double gamma,
                                   double q, const DecomposeOptions& opts) {
  require(!states.empty(), "invalid-argument", "track needs at least one snapshot");
  for (std::size_t i = 1; i < states.size(); ++i) {
    require(states[i].u.grid.same_as(states[0].u.grid), "grid-mismatch",
            "track snapshots live on different grids");
    require(states[i].t > states[i - 1].t, "invalid-argument",
            "track snapshots must advance in time");
  }
  const bool periodic = periodic_like(states[0].u.grid);
  const double period = states[0].u.grid.h * static_cast<double>(states[0].u.grid.n);

  std::vector<ModulationState> out;
  out.reserve(states.size());
  std::optional<ModulationState> guess;
  for (std::size_t i = 0; i < states.size(); ++i) {
    if (guess) {
      // The center can move by many grid cells between snapshots while the
      // scale and drift change slowly; re-seed it from the current peak so
      // the solve starts inside its attraction basin.
      guess->x_center = estimate_peak(states[i].u).x;
    }
    ModulationState ms;
    try {
      ms = decompose(states[i].u, gamma, q, guess, opts);
    } catch (const Error&) {
      if (i == 0) throw;
      break;  // truncated trajectory
    }
    ms.t = states[i].t;
    if (i == 0) {
      ms.s = 0.0;
    } else {
      const ModulationState& prev = out.back();
      if (periodic) {
        ms.x_center += period * std::round((prev.x_center - ms.x_center) / period);
      }
      const double dt = ms.t - prev.t;
      ms.s = prev.s + 0.5 * dt * (std::pow(prev.lambda, -3) + std::pow(ms.lambda, -3));
    }
    guess = ms;
    out.push_back(std::move(ms));
  }
  return out;
}

std::vector<RateSample> modulation_rates(const std::vector<ModulationState>& traj) {
  require(traj.size() >= 3, "insufficient-points",
          "rate estimation needs at least three states");
  for (std::size_t i = 1; i < traj.size(); ++i) {
    require(traj[i].s > traj[i - 1].s, "invalid-argument",
            "trajectory must advance in rescaled time");
  }
  std::vector<RateSample> out;
  out.reserve(traj.size() - 2);
  for (std::size_t i = 1; i + 1 < traj.size(); ++i) {
    const auto& a = traj[i - 1];
    const auto& c = traj[i];
    const auto& e = traj[i + 1];
    RateSample r;
    r.s = c.s;
    const double lam_s = centered_rate(a.lambda, c.lambda, e.lambda, a.s, c.s, e.s);
    const double b_s = centered_rate(a.b, c.b, e.b, a.s, c.s, e.s);
    const double x_s =
        centered_rate(a.x_center, c.x_center, e.x_center, a.s, c.s, e.s);
    r.lambda_rate = lam_s / c.lambda + c.b;
    r.b_rate = b_s;
    r.x_rate = x_s / c.lambda - 1.0;
    out.push_back(r);
  }
  return out;
}

namespace {

// rho_1 and rho_2 on the profile grid; rho = 4 rho_1 + rho_2 vanishes at both
// ends because the bracket in rho_2 decays to the left and the two pieces
// cancel to the right.
std::pair<GridFunction, GridFunction> build_rho_parts(const LocalizedProfile& profile) {
  const GridFunction& Q = profile.gs.profile;
  const Grid& g = Q.grid;
  const double iq = integrate(Q);
  require(iq > 0.0, "invalid-argument", "ground state has nonpositive integral");

  const GridFunction lam_q = scaling_operator(Q);
  const GridFunction lam_p = scaling_operator(profile.np.P);
  GridFunction rho1 = cumulative_from_left(lam_q);
  const double norm1 = 4.0 / (iq * iq);
  for (std::size_t k = 0; k < g.n; ++k) rho1[k] *= norm1;

  const double coupling = inner(lam_p, Q) / inner(lam_q, lam_q);
  GridFunction rho2{g};
  const double norm2 = 16.0 / (iq * iq);
  for (std::size_t k = 0; k < g.n; ++k) {
    rho2[k] =
        norm2 * (coupling * lam_q[k] + profile.np.P[k] - 0.5 * iq) - 8.0 * rho1[k];
  }
  return {std::move(rho1), std::move(rho2)};
}

}  // namespace

GridFunction rho_weight(const LocalizedProfile& profile) {
  auto [rho1, rho2] = build_rho_parts(profile);
  GridFunction rho = std::move(rho2);
  for (std::size_t k = 0; k < rho.size(); ++k) rho[k] += 4.0 * rho1[k];
  return rho;
}

FunctionalReport evaluate_functionals(const ModulationState& ms, const WeightSet& w,
                                      const LocalizedProfile& profile) {
  const Grid& g = ms.epsilon.grid;
  require(ms.epsilon.size() > 0, "invalid-argument",
          "functional evaluation needs the residual field");
  require(g.same_as(w.psi_B.grid), "grid-mismatch",
          "weights and state live on different grids");
  require(g.same_as(profile.values.grid), "grid-mismatch",
          "profile and state live on different grids");
  require(std::abs(ms.omega - profile.omega) <= 1e-12 * std::max(1.0, std::abs(ms.omega)),
          "invalid-argument", "profile frequency does not match the state");
  ensure_finite(ms.epsilon, "functional evaluation input");

  const double q = profile.gs.q;
  const double omega = profile.omega;
  const GridFunction eps_y = differentiate(ms.epsilon, 1);
  const std::vector<double> wq = quadrature_weights(g);

  FunctionalReport rep;
  double j1 = 0.0, j2 = 0.0;
  {
    auto [rho1, rho2] = build_rho_parts(profile);
    for (std::size_t k = 0; k < g.n; ++k) {
      j1 += wq[k] * ms.epsilon[k] * rho1[k];
      j2 += wq[k] * ms.epsilon[k] * rho2[k];
    }
  }
  rep.J1 = j1;
  rep.J2 = j2;
  rep.J = 4.0 * j1 + j2;

  require(1.0 - rep.J1 > 0.0, "invalid-argument",
          "J1 reaches 1; the weighted energies are undefined");
  std::array<std::array<double, 2>, 2> jc{};
  for (int i = 1; i <= 2; ++i) {
    for (int j = 1; j <= 2; ++j) {
      jc[i - 1][j - 1] = std::pow(1.0 - rep.J1, -4.0 * (j - 1) - 2.0 * i) - 1.0;
    }
  }

  for (std::size_t k = 0; k < g.n; ++k) {
    const double e = ms.epsilon[k];
    const double ey2 = eps_y[k] * eps_y[k];
    const double e2 = e * e;
    const double psi = w.psi_B[k];
    const double pw = profile.values[k];
    const double sum = pw + e;
    const double pw5 = std::pow(pw, 5);
    const double t6 = std::pow(sum, 6) - pw5 * pw - 6.0 * e * pw5;
    const double tq = std::pow(std::abs(sum), q + 1.0) -
                      std::pow(std::abs(pw), q + 1.0) -
                      (q + 1.0) * e * odd_power(pw, q);
    const double common = ey2 * psi - (1.0 / 3.0) * psi * t6 +
                          (2.0 * omega / (q + 1.0)) * psi * tq;
    const double p1 = w.phi_1B[k], p2 = w.phi_2B[k];

    rep.N1 += wq[k] * (ey2 * psi + e2 * p1);
    rep.N2 += wq[k] * (ey2 * psi + e2 * p2);
    rep.N1_loc += wq[k] * e2 * w.phi_1B_prime[k];
    rep.N2_loc += wq[k] * e2 * w.phi_2B_prime[k];
    rep.tail10 += wq[k] * e2 * w.phi_10[k];
    for (int j = 0; j < 2; ++j) {
      rep.F[0][j] += wq[k] * (common + (1.0 + jc[0][j]) * e2 * p1);
      rep.F[1][j] += wq[k] * (common + (1.0 + jc[1][j]) * e2 * p2);
    }
  }
  return rep;
}

double c0_constant(const GroundState& gs) {
  const double q = gs.q;
  GridFunction pw{gs.profile.grid};
  for (std::size_t k = 0; k < pw.size(); ++k) {
    pw[k] = std::pow(std::abs(gs.profile[k]), q + 1.0);
  }
  return (q - 1.0) / (4.0 * (q + 1.0)) * integrate(pw);
}

double c1_constant(const GroundState& gs) {
  return gs.m / (gs.m + 2.0) * c0_constant(gs);
}

FunctionalReport evaluate_functionals(const ModulationState& ms, const WeightSet& w) {
  require(ms.epsilon.size() > 0, "invalid-argument",
          "functional evaluation needs the residual field");
  const Pipeline& pl = pipeline_for(ms.omega, ms.q, ms.epsilon.grid);
  return evaluate_functionals(ms, w, build_localized(ms.b, pl.gs, pl.np));
}

MonotonicityReport monotonicity_probe(const std::vector<ModulationState>& traj,
                                      const WeightSet& w,
                                      const MonotonicityOptions& opts) {
  require(traj.size() >= 3, "insufficient-points",
          "the energy-rate probe needs at least three states");
  const std::size_t n = traj.size();
  const Grid& g = w.psi_B.grid;

  std::vector<double> f11(n), f21(n), f12(n), f22(n), tail(n), n1loc(n);
  std::vector<double> d1(n), d2(n), lam(n), s(n), src(n);
  const std::vector<double> wq = quadrature_weights(g);
  for (std::size_t i = 0; i < n; ++i) {
    const ModulationState& ms = traj[i];
    require(ms.epsilon.size() > 0 && ms.epsilon.grid.same_as(g), "grid-mismatch",
            "trajectory states and weights live on different grids");
    const Pipeline& pl = pipeline_for(ms.omega, ms.q, g);
    const LocalizedProfile profile = build_localized(ms.b, pl.gs, pl.np);
    const FunctionalReport rep = evaluate_functionals(ms, w, profile);
    f11[i] = rep.F[0][0];
    f21[i] = rep.F[1][0];
    f12[i] = rep.F[0][1];
    f22[i] = rep.F[1][1];
    tail[i] = rep.tail10;
    n1loc[i] = rep.N1_loc;
    lam[i] = ms.lambda;
    s[i] = ms.s;
    src[i] = ms.b * ms.b * (ms.omega * ms.omega + ms.b * ms.b);
    const GridFunction eps_y = differentiate(ms.epsilon, 1);
    for (std::size_t k = 0; k < g.n; ++k) {
      const double density = eps_y[k] * eps_y[k] + ms.epsilon[k] * ms.epsilon[k];
      d1[i] += wq[k] * density * w.phi_1B_prime[k];
      d2[i] += wq[k] * density * w.phi_2B_prime[k];
    }
    if (i > 0) {
      require(s[i] > s[i - 1], "invalid-argument",
              "trajectory must advance in rescaled time");
    }
  }

  MonotonicityReport rep;
  for (std::size_t i = 1; i + 1 < n; ++i) {
    const double s0 = s[i - 1], s1 = s[i], s2 = s[i + 1];
    auto rate = [&](const std::vector<double>& f) {
      return centered_rate(f[i - 1], f[i], f[i + 1], s0, s1, s2);
    };
    rep.s.push_back(s1);
    rep.rate_f11.push_back(rate(f11));
    rep.rate_f21.push_back(rate(f21));
    auto scaled_rate = [&](const std::vector<double>& f) {
      const double g0 = f[i - 1] / (lam[i - 1] * lam[i - 1]);
      const double g1 = f[i] / (lam[i] * lam[i]);
      const double g2 = f[i + 1] / (lam[i + 1] * lam[i + 1]);
      return lam[i] * lam[i] * centered_rate(g0, g1, g2, s0, s1, s2);
    };
    rep.rate_f12_scaled.push_back(scaled_rate(f12));
    rep.rate_f22_scaled.push_back(scaled_rate(f22));
    rep.dissipation_1.push_back(d1[i]);
    rep.dissipation_2.push_back(d2[i]);
    rep.source.push_back(src[i]);
    const double lam_s = centered_rate(lam[i - 1], lam[i], lam[i + 1], s0, s1, s2);
    rep.tail_rate.push_back(rate(tail) + 10.0 * (lam_s / lam[i]) * tail[i]);
    rep.tail_source.push_back(n1loc[i] + traj[i].b * traj[i].b);
  }

  auto fit = [&](const std::vector<double>& rate, const std::vector<double>& source) {
    double c = 0.0;
    for (std::size_t k = 0; k < rate.size(); ++k) {
      if (source[k] > 0.0) {
        c = std::max(c, (rate[k] - opts.noise_floor) / source[k]);
      }
    }
    return std::max(c, 0.0);
  };
  rep.c_fit_f11 = fit(rep.rate_f11, rep.source);
  rep.c_fit_f21 = fit(rep.rate_f21, rep.source);
  rep.c_fit_f12 = fit(rep.rate_f12_scaled, rep.source);
  rep.c_fit_f22 = fit(rep.rate_f22_scaled, rep.source);
  rep.c_fit_tail = fit(rep.tail_rate, rep.tail_source);

  for (std::size_t k = 0; k < rep.rate_f11.size(); ++k) {
    if (rep.rate_f11[k] > opts.noise_floor + 1e6 * rep.source[k]) ++rep.violations;
  }
  const double budget = 2.0 * rep.c_fit_f11 + 1.0;
  for (double mu : {1.0, 0.5, 0.25, 0.1, 0.05, 0.01, 0.0}) {
    bool ok = true;
    for (std::size_t k = 0; k < rep.rate_f11.size(); ++k) {
      if (rep.rate_f11[k] + mu * rep.dissipation_1[k] >
          opts.noise_floor + budget * rep.source[k]) {
        ok = false;
        break;
      }
    }
    if (ok) {
      rep.mu_hat = mu;
      break;
    }
  }
  return rep;
}

RegimeReport classify_regime(const std::vector<ModulationState>& traj, double c1,
                             double C_star, double alpha_star) {
  require(!traj.empty(), "invalid-argument", "classification needs a trajectory");
  require(std::isfinite(c1) && std::isfinite(C_star) && C_star > 0.0,
          "invalid-argument", "bad classification constants");

  // N1 per state; an empty epsilon counts as zero.
  std::vector<double> n1(traj.size(), 0.0), eps_l2(traj.size(), 0.0);
  std::optional<WeightSet> weights;
  for (std::size_t i = 0; i < traj.size(); ++i) {
    const GridFunction& eps = traj[i].epsilon;
    if (eps.size() == 0) continue;
    if (!weights || !weights->psi_B.grid.same_as(eps.grid)) {
      weights = make_weights(eps.grid);
    }
    const GridFunction eps_y = differentiate(eps, 1);
    const std::vector<double> wq = quadrature_weights(eps.grid);
    for (std::size_t k = 0; k < eps.size(); ++k) {
      n1[i] += wq[k] * (eps_y[k] * eps_y[k] * weights->psi_B[k] +
                        eps[k] * eps[k] * weights->phi_1B[k]);
    }
    eps_l2[i] = l2_norm(eps);
  }

  RegimeReport rep;
  double extremal = 0.0;
  for (std::size_t i = 0; i < traj.size(); ++i) {
    const ModulationState& ms = traj[i];
    const double mval = ms.b + c1 * ms.omega;
    const double thr = C_star * (n1[i] + ms.b * ms.b + ms.omega * ms.omega);
    const double ratio = thr > 0.0 ? mval / thr : (mval == 0.0 ? 0.0 : mval * 1e300);
    if (std::abs(ratio) > std::abs(extremal)) extremal = ratio;

    if (eps_l2[i] > alpha_star) {
      rep.regime = Regime::Exit;
      rep.separation_index = static_cast<std::ptrdiff_t>(i);
      rep.margin = ratio;
      return rep;
    }
    if (mval <= -1.2 * thr && mval < 0.0) {
      rep.regime = Regime::Exit;
      rep.separation_index = static_cast<std::ptrdiff_t>(i);
      rep.margin = ratio;
      return rep;
    }
    if (mval >= 1.2 * thr && mval >= 0.0) {
      // Soliton side: the scale must settle over the remaining states.
      double lo = traj.back().lambda, hi = lo;
      for (std::size_t j = i; j < traj.size(); ++j) {
        lo = std::min(lo, traj[j].lambda);
        hi = std::max(hi, traj[j].lambda);
      }
      if (hi - lo <= 0.25 * std::max(traj.back().lambda, 1e-300)) {
        rep.regime = Regime::Soliton;
        rep.separation_index = static_cast<std::ptrdiff_t>(i);
        rep.margin = ratio;
        return rep;
      }
    }
  }

  rep.margin = extremal;
  const double first = traj.front().lambda;
  const double last = traj.back().lambda;
  double peak = first;
  for (const auto& ms : traj) peak = std::max(peak, ms.lambda);
  if (last >= 1.5 * first && last >= 0.8 * peak) {
    rep.regime = Regime::BlowDown;
  }
  return rep;
}

}  // namespace satkdv
