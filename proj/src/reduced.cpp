#include "satkdv/reduced.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include <boost/numeric/odeint.hpp>

#include "satkdv/errors.hpp"
#include "satkdv/groundstate.hpp"

namespace satkdv {

namespace {

// State vector (log lambda, b, x, t); the log keeps the scale positive for
// the controller no matter how hard the exit side dives.
using State = std::array<double, 4>;
using Stepper = boost::numeric::odeint::runge_kutta_fehlberg78<State>;

struct ReducedOde {
  double gamma;
  double c0;
  double m;
  void operator()(const State& y, State& dy, double /*s*/) const {
    const double lambda = std::exp(y[0]);
    const double b = y[1];
    const double omega = gamma * std::exp(-m * y[0]);
    dy[0] = -b;
    dy[1] = -2.0 * b * b - c0 * m * omega * b;
    dy[2] = lambda;
    dy[3] = lambda * lambda * lambda;
  }
};

void check_params(const ReducedParams& p) {
  require(std::isfinite(p.gamma) && p.gamma >= 0.0, "invalid-argument",
          "saturation strength must be nonnegative");
  require(std::isfinite(p.c0) && p.c0 > 0.0, "invalid-argument",
          "coupling constant must be positive");
  require(std::isfinite(p.m) && p.m > 0.0, "invalid-argument",
          "scaling exponent must be positive");
}

void check_state(const ReducedState& st) {
  require(std::isfinite(st.lambda) && st.lambda > 0.0, "invalid-argument",
          "scale must be positive");
  require(std::isfinite(st.b) && std::isfinite(st.x) && std::isfinite(st.s) &&
              std::isfinite(st.t),
          "invalid-argument", "state fields must be finite");
}

// Least-squares slope of log(v) against log(t).
double log_log_slope(const std::vector<double>& t, const std::vector<double>& v) {
  double mx = 0.0, my = 0.0;
  const double n = static_cast<double>(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    mx += std::log(t[i]);
    my += std::log(v[i]);
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double dx = std::log(t[i]) - mx;
    sxx += dx * dx;
    sxy += dx * (std::log(v[i]) - my);
  }
  require(sxx > 0.0, "insufficient-span", "window does not spread in time");
  return sxy / sxx;
}

}  // namespace

ReducedParams params_for(double gamma, double q) {
  require(std::isfinite(gamma) && gamma >= 0.0, "invalid-argument",
          "saturation strength must be nonnegative");
  require(std::isfinite(q) && q > 5.0, "invalid-argument", "q must exceed 5");
  ReducedParams p;
  p.gamma = gamma;
  p.q = q;
  p.m = 0.5 * (q - 5.0);
  // the coupling constant uses the unsaturated ground state, so the closed
  // form on the standard grid is exact regardless of gamma
  p.c0 = c0_constant(closed_form_Q(make_symmetric(40.0, 4001), q));
  return p;
}

double conserved_L(const ReducedState& st, const ReducedParams& p) {
  check_state(st);
  check_params(p);
  const double lp = std::pow(st.lambda, p.m + 2.0);
  return st.b / (st.lambda * st.lambda) + (p.m * p.c0 / (p.m + 2.0)) * p.gamma / lp;
}

double balance_b(double lambda0, const ReducedParams& p, double L0) {
  require(std::isfinite(lambda0) && lambda0 > 0.0, "invalid-argument",
          "scale must be positive");
  check_params(p);
  const double lp = std::pow(lambda0, p.m + 2.0);
  return lambda0 * lambda0 * (L0 - (p.m * p.c0 / (p.m + 2.0)) * p.gamma / lp);
}

std::vector<ReducedState> integrate_reduced(const ReducedState& init,
                                            const ReducedParams& p, double s_end,
                                            const IntegrateOptions& opts) {
  check_state(init);
  check_params(p);
  require(std::isfinite(s_end) && s_end > init.s, "invalid-argument",
          "integration horizon must lie past the initial time");
  require(opts.tolerance > 0.0 && opts.tolerance <= 1e-3, "invalid-argument",
          "tolerance out of range");
  require(opts.samples >= 2, "invalid-argument", "need at least two output samples");
  require(opts.blow_up_b > 0.0, "invalid-argument", "divergence threshold must be positive");

  const ReducedOde ode{p.gamma, p.c0, p.m};
  auto stepper = boost::numeric::odeint::make_controlled(opts.tolerance, opts.tolerance,
                                                         Stepper());
  State y{std::log(init.lambda), init.b, init.x, init.t};
  double s = init.s;
  double ds = std::min(1e-3, (s_end - init.s) / 16.0);

  std::vector<ReducedState> out;
  out.reserve(opts.samples);
  auto emit = [&](double at) {
    ReducedState st;
    st.s = at;
    st.lambda = std::exp(y[0]);
    st.b = y[1];
    st.x = y[2];
    st.t = y[3];
    out.push_back(st);
  };
  emit(s);

  const double span = s_end - init.s;
  for (std::size_t k = 1; k < opts.samples; ++k) {
    const double target =
        (k + 1 == opts.samples)
            ? s_end
            : init.s + span * static_cast<double>(k) / static_cast<double>(opts.samples - 1);
    while (s < target) {
      ds = std::min(ds, target - s);
      const double before = s;
      const auto result = stepper.try_step(ode, y, s, ds);
      if (result == boost::numeric::odeint::fail) {
        if (ds <= 1e-14 * std::max(1.0, std::abs(s))) {
          // Near the finite-s divergence the controller stalls before |b|
          // reaches any fixed threshold; a far-negative b disambiguates.
          if (y[1] < -1e6) {
            fail("blow-up-detected",
                 "drift parameter diverged toward -infinity near s = " + std::to_string(s));
          }
          fail("step-underflow", "step size collapsed at s = " + std::to_string(s));
        }
        continue;
      }
      if (y[1] < -opts.blow_up_b || !std::isfinite(y[1]) || !std::isfinite(y[0])) {
        fail("blow-up-detected",
             "drift parameter diverged toward -infinity near s = " + std::to_string(before));
      }
    }
    emit(target);
  }
  return out;
}

Regime classify_L0(const ReducedState& init, const ReducedParams& p, double zero_band) {
  require(std::isfinite(zero_band) && zero_band >= 0.0, "invalid-argument",
          "zero band must be nonnegative");
  const double L0 = conserved_L(init, p);
  if (L0 > zero_band) return Regime::Soliton;
  if (L0 < -zero_band) return Regime::Exit;
  return Regime::BlowDown;
}

ExponentFit asymptotic_exponents(const std::vector<ReducedState>& traj, double t_min,
                                 double t_max) {
  require(traj.size() >= 16, "insufficient-span", "trajectory has too few samples");
  double t_first = 0.0;
  for (const ReducedState& st : traj) {
    if (st.t > 0.0) {
      t_first = st.t;
      break;
    }
  }
  const double t_end = traj.back().t;
  require(t_first > 0.0 && t_end > 0.0, "insufficient-span",
          "trajectory never reaches positive time");
  require(t_end >= 100.0 * t_first, "insufficient-span",
          "trajectory spans fewer than two decades in time");

  if (t_max <= 0.0) t_max = t_end;
  if (t_min <= 0.0) t_min = 0.1 * t_max;
  require(t_max > t_min && t_min > 0.0, "invalid-argument", "bad fit window");

  std::vector<double> ts, lambdas, xs;
  for (const ReducedState& st : traj) {
    if (st.t < t_min || st.t > t_max) continue;
    if (st.lambda <= 0.0 || st.x <= 0.0) continue;
    ts.push_back(st.t);
    lambdas.push_back(st.lambda);
    xs.push_back(st.x);
  }
  require(ts.size() >= 8, "insufficient-span", "fit window holds too few samples");

  ExponentFit fit;
  fit.lambda_exp = log_log_slope(ts, lambdas);
  fit.x_exp = log_log_slope(ts, xs);
  return fit;
}

SolitonLimit soliton_limit(const ReducedState& init, const ReducedParams& p) {
  require(std::isfinite(p.gamma) && p.gamma > 0.0, "invalid-argument",
          "the fixed point needs a positive saturation strength");
  const double L0 = conserved_L(init, p);
  if (L0 <= 0.0) {
    fail("wrong-regime", "conserved quantity is not positive: " + std::to_string(L0));
  }
  SolitonLimit out;
  out.lambda_inf =
      std::pow(p.m * p.c0 * p.gamma / ((p.m + 2.0) * L0), 1.0 / (p.m + 2.0));
  out.x_slope = 1.0 / (out.lambda_inf * out.lambda_inf);
  return out;
}

BarrierCheck ode_comparison_check(double F0, double nu, double L, double x_end) {
  require(std::isfinite(F0) && F0 > 0.0, "invalid-argument", "initial value must be positive");
  require(std::isfinite(nu) && nu > 0.0, "invalid-argument", "exponent must be positive");
  require(std::isfinite(L) && L > 0.0, "invalid-argument", "forcing level must be positive");
  require(std::isfinite(x_end) && x_end > 0.0, "invalid-argument",
          "integration length must be positive");

  using Scalar = std::array<double, 1>;
  auto rhs = [nu, L](const Scalar& f, Scalar& df, double /*x*/) {
    df[0] = L - std::pow(std::max(f[0], 0.0), 1.0 + nu);
  };
  auto stepper = boost::numeric::odeint::make_controlled(
      1e-12, 1e-12, boost::numeric::odeint::runge_kutta_fehlberg78<Scalar>());

  Scalar f{F0};
  double x = 0.0;
  double dx = std::min(1e-3, x_end / 16.0);
  BarrierCheck rep;
  rep.f_min = F0;
  rep.f_max = F0;
  while (x < x_end) {
    dx = std::min(dx, x_end - x);
    if (stepper.try_step(rhs, f, x, dx) == boost::numeric::odeint::fail) {
      if (dx <= 1e-15) fail("step-underflow", "comparison integration stalled");
      continue;
    }
    rep.f_min = std::min(rep.f_min, f[0]);
    rep.f_max = std::max(rep.f_max, f[0]);
  }
  rep.f_end = f[0];

  const double barrier = std::pow(L, 1.0 / (1.0 + nu));
  const double slack = 1e-9 * std::max(1.0, barrier);
  rep.lower_ok = rep.f_min >= std::min(F0, barrier) - slack;
  rep.upper_ok = rep.f_max <= std::max(F0, barrier) + slack;
  return rep;
}

}  // namespace satkdv
