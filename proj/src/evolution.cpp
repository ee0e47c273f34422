#include "satkdv/evolution.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <utility>

#include <fftw3.h>

#include "satkdv/errors.hpp"
#include "satkdv/groundstate.hpp"

namespace satkdv {

namespace {

bool is_power_of_two(std::size_t n) { return n >= 8 && (n & (n - 1)) == 0; }

// FFTW planning is not thread-safe; executions on distinct buffers are.
std::mutex& plan_mutex() {
  static std::mutex m;
  return m;
}

struct Workspace {
  std::size_t n = 0;
  double half_length = 0.0;
  std::vector<double> k;  // wavenumbers of the r2c layout, Nyquist zeroed
  double phase_dt = 0.0;  // dt the cached integrating factors belong to
  std::vector<std::complex<double>> e_half, e_full;
  double* real = nullptr;
  fftw_complex* spec = nullptr;
  fftw_plan fwd = nullptr;
  fftw_plan bwd = nullptr;

  Workspace(std::size_t n_modes, double half) : n(n_modes), half_length(half) {
    const std::size_t nc = n / 2 + 1;
    real = fftw_alloc_real(n);
    spec = fftw_alloc_complex(nc);
    {
      std::lock_guard<std::mutex> lock(plan_mutex());
      fwd = fftw_plan_dft_r2c_1d(static_cast<int>(n), real, spec, FFTW_ESTIMATE);
      bwd = fftw_plan_dft_c2r_1d(static_cast<int>(n), spec, real, FFTW_ESTIMATE);
    }
    require(fwd != nullptr && bwd != nullptr, "invalid-argument",
            "could not plan transforms for the requested resolution");
    k.resize(nc);
    const double k0 = std::numbers::pi / half_length;
    for (std::size_t j = 0; j < nc; ++j) k[j] = k0 * static_cast<double>(j);
    k[nc - 1] = 0.0;  // drop the sign-ambiguous Nyquist mode from derivatives
  }

  ~Workspace() {
    std::lock_guard<std::mutex> lock(plan_mutex());
    if (fwd) fftw_destroy_plan(fwd);
    if (bwd) fftw_destroy_plan(bwd);
    fftw_free(real);
    fftw_free(spec);
  }

  Workspace(const Workspace&) = delete;
  Workspace& operator=(const Workspace&) = delete;

  // exp(i k^3 dt/2) and exp(i k^3 dt), including the untruncated Nyquist mode
  void refresh_phases(double dt) {
    if (dt == phase_dt && !e_half.empty()) return;
    const std::size_t nc = n / 2 + 1;
    e_half.resize(nc);
    e_full.resize(nc);
    const double k0 = std::numbers::pi / half_length;
    for (std::size_t j = 0; j < nc; ++j) {
      const double kk = k0 * static_cast<double>(j);
      const double phase = kk * kk * kk * 0.5 * dt;
      e_half[j] = std::polar(1.0, phase);
      e_full[j] = std::polar(1.0, 2.0 * phase);
    }
    phase_dt = dt;
  }

  std::vector<std::complex<double>> forward(const std::vector<double>& u) {
    std::copy(u.begin(), u.end(), real);
    fftw_execute(fwd);
    std::vector<std::complex<double>> out(n / 2 + 1);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = {spec[j][0], spec[j][1]};
    return out;
  }

  // c2r with the 1/n normalization folded in
  std::vector<double> backward(const std::vector<std::complex<double>>& c) {
    for (std::size_t j = 0; j < c.size(); ++j) {
      spec[j][0] = c[j].real();
      spec[j][1] = c[j].imag();
    }
    fftw_execute(bwd);
    std::vector<double> out(n);
    const double scale = 1.0 / static_cast<double>(n);
    for (std::size_t j = 0; j < n; ++j) out[j] = real[j] * scale;
    return out;
  }
};

Workspace& workspace_for(std::size_t n, double half_length) {
  thread_local std::map<std::pair<std::size_t, double>, std::unique_ptr<Workspace>> cache;
  auto& slot = cache[{n, half_length}];
  if (!slot) slot = std::make_unique<Workspace>(n, half_length);
  return *slot;
}

void check_periodic_grid(const Grid& g) {
  require(is_power_of_two(g.n), "invalid-argument",
          "spectral grid needs a power-of-two node count");
  const double half = -g.x_min;
  require(half > 0.0 && std::abs(g.h * static_cast<double>(g.n) - 2.0 * half) <=
                            1e-10 * half,
          "invalid-argument", "grid is not a periodic sampling of [-L, L)");
}

void check_config(const EvolutionConfig& cfg) {
  require(cfg.gamma >= 0.0, "invalid-argument", "gamma must be nonnegative");
  require(cfg.q > 5.0, "invalid-argument", "saturation exponent must exceed 5");
  require(cfg.domain_half_length > 0.0, "invalid-argument",
          "domain half-length must be positive");
  require(is_power_of_two(cfg.n_modes), "invalid-argument",
          "n_modes must be a power of two (at least 8)");
  require(cfg.dt != 0.0 && std::isfinite(cfg.dt), "invalid-argument",
          "dt must be nonzero");
  require(cfg.t_end >= 0.0, "invalid-argument", "t_end must be nonnegative");
  const double h = 2.0 * cfg.domain_half_length / static_cast<double>(cfg.n_modes);
  require(std::abs(cfg.dt) <= cfg.cfl_constant * h, "invalid-argument",
          "dt violates the transport-scale guard |dt| <= cfl_constant * h");
}

// pointwise flux f(u) = u^5 - gamma * u|u|^{q-1}
std::vector<double> flux(const std::vector<double>& u, double gamma, double q) {
  std::vector<double> out(u.size());
  for (std::size_t j = 0; j < u.size(); ++j) {
    const double v = u[j];
    const double v2 = v * v;
    out[j] = v2 * v2 * v - gamma * odd_power(v, q);
  }
  return out;
}

// N(u_hat) = -ik * transform(flux(u)), with optional 2/3-rule truncation
std::vector<std::complex<double>> nonlinear(Workspace& ws,
                                            const std::vector<std::complex<double>>& uh,
                                            const EvolutionConfig& cfg) {
  const std::vector<double> u = ws.backward(uh);
  std::vector<std::complex<double>> fh = ws.forward(flux(u, cfg.gamma, cfg.q));
  const std::size_t cut = cfg.dealias ? (ws.n / 3) : fh.size();
  for (std::size_t j = 0; j < fh.size(); ++j) {
    if (j > cut) {
      fh[j] = 0.0;
    } else {
      fh[j] *= std::complex<double>(0.0, -ws.k[j]);
    }
  }
  return fh;
}

double sup_abs(const std::vector<double>& u) {
  double m = 0.0;
  for (double v : u) m = std::max(m, std::abs(v));
  return m;
}

}  // namespace

Grid evolution_grid(const EvolutionConfig& cfg) {
  check_config(cfg);
  return make_periodic(cfg.domain_half_length, cfg.n_modes);
}

double field_mass(const GridFunction& u) {
  double acc = 0.0;
  for (double v : u.values) acc += v * v;
  return acc * u.grid.h;
}

double field_energy(const GridFunction& u, double gamma, double q) {
  check_periodic_grid(u.grid);
  Workspace& ws = workspace_for(u.grid.n, -u.grid.x_min);
  std::vector<std::complex<double>> uh = ws.forward(u.values);
  for (std::size_t j = 0; j < uh.size(); ++j) uh[j] *= std::complex<double>(0.0, ws.k[j]);
  const std::vector<double> ux = ws.backward(uh);

  double kin = 0.0, six = 0.0, sat = 0.0;
  for (std::size_t j = 0; j < u.size(); ++j) {
    kin += ux[j] * ux[j];
    const double v2 = u[j] * u[j];
    six += v2 * v2 * v2;
    sat += std::pow(std::abs(u[j]), q + 1.0);
  }
  const double h = u.grid.h;
  return 0.5 * h * kin - h * six / 6.0 + gamma / (q + 1.0) * h * sat;
}

FieldState make_state(double t, GridFunction u, const EvolutionConfig& cfg) {
  ensure_finite(u, "field state");
  FieldState s;
  s.t = t;
  s.mass = field_mass(u);
  s.energy = field_energy(u, cfg.gamma, cfg.q);
  s.u = std::move(u);
  return s;
}

FieldState step(const FieldState& state, const EvolutionConfig& cfg) {
  check_config(cfg);
  check_periodic_grid(state.u.grid);
  require(state.u.grid.n == cfg.n_modes &&
              std::abs(-state.u.grid.x_min - cfg.domain_half_length) <= 1e-12,
          "grid-mismatch", "state grid does not match the configuration");
  ensure_finite(state.u, "evolution step input");

  Workspace& ws = workspace_for(cfg.n_modes, cfg.domain_half_length);
  const double dt = cfg.dt;
  const std::size_t nc = ws.k.size();
  ws.refresh_phases(dt);
  const std::vector<std::complex<double>>& e1 = ws.e_half;
  const std::vector<std::complex<double>>& e2 = ws.e_full;

  const std::vector<std::complex<double>> v = ws.forward(state.u.values);
  std::vector<std::complex<double>> stage(nc), acc(nc);

  const std::vector<std::complex<double>> a = nonlinear(ws, v, cfg);
  for (std::size_t j = 0; j < nc; ++j) stage[j] = e1[j] * (v[j] + 0.5 * dt * a[j]);
  const std::vector<std::complex<double>> b = nonlinear(ws, stage, cfg);
  for (std::size_t j = 0; j < nc; ++j) stage[j] = e1[j] * v[j] + 0.5 * dt * b[j];
  const std::vector<std::complex<double>> c = nonlinear(ws, stage, cfg);
  for (std::size_t j = 0; j < nc; ++j) stage[j] = e2[j] * v[j] + dt * e1[j] * c[j];
  const std::vector<std::complex<double>> d = nonlinear(ws, stage, cfg);

  for (std::size_t j = 0; j < nc; ++j) {
    acc[j] = e2[j] * v[j] +
             dt / 6.0 * (e2[j] * a[j] + 2.0 * e1[j] * (b[j] + c[j]) + d[j]);
  }

  GridFunction next(state.u.grid, ws.backward(acc));
  ensure_finite(next, "evolution step output");
  const double before = sup_abs(state.u.values);
  const double after = sup_abs(next.values);
  require(after <= 10.0 * before + 1e-12, "instability-detected",
          "sup|u| grew more than tenfold in one step");

  FieldState out = make_state(state.t + dt, std::move(next), cfg);
  return out;
}

std::vector<FieldState> run(const GridFunction& u0, const EvolutionConfig& cfg,
                            std::size_t observer_stride) {
  check_config(cfg);
  require(cfg.dt > 0.0, "invalid-argument",
          "run() advances forward; negative dt is for single reversed steps");
  require(observer_stride >= 1, "invalid-argument", "observer stride must be >= 1");

  FieldState state = make_state(0.0, u0, cfg);
  const double mass0 = state.mass;
  const double energy0 = state.energy;
  // drift budgets are relative; the energy scale includes the kinetic part so
  // that near-zero total energy does not make the budget vacuous
  const GridFunction ux0 = [&] {
    Workspace& ws = workspace_for(u0.grid.n, -u0.grid.x_min);
    std::vector<std::complex<double>> uh = ws.forward(u0.values);
    for (std::size_t j = 0; j < uh.size(); ++j)
      uh[j] *= std::complex<double>(0.0, ws.k[j]);
    return GridFunction(u0.grid, ws.backward(uh));
  }();
  const double energy_scale =
      std::max({std::abs(energy0), 0.5 * field_mass(ux0), 1e-30});
  const double mass_scale = std::max(mass0, 1e-30);

  auto flag_drift = [&](FieldState& s) {
    const double dm = std::abs(s.mass - mass0) / mass_scale;
    const double de = std::abs(s.energy - energy0) / energy_scale;
    s.conservation_flag = (dm > 1e-6) || (de > 1e-5);
  };

  const auto n_steps =
      static_cast<std::size_t>(std::llround(cfg.t_end / cfg.dt));
  std::vector<FieldState> out;
  out.reserve(n_steps / observer_stride + 2);
  flag_drift(state);
  out.push_back(state);

  for (std::size_t i = 1; i <= n_steps; ++i) {
    state = step(state, cfg);
    state.t = cfg.dt * static_cast<double>(i);  // avoid accumulated rounding
    const bool snapshot = (i % observer_stride == 0) || (i == n_steps);
    bool ceiling_hit = false;
    if (cfg.gradient_ceiling > 0.0) {
      Workspace& ws = workspace_for(cfg.n_modes, cfg.domain_half_length);
      std::vector<std::complex<double>> uh = ws.forward(state.u.values);
      for (std::size_t j = 0; j < uh.size(); ++j)
        uh[j] *= std::complex<double>(0.0, ws.k[j]);
      const GridFunction ux(state.u.grid, ws.backward(uh));
      ceiling_hit = std::sqrt(field_mass(ux)) > cfg.gradient_ceiling;
    }
    if (snapshot || ceiling_hit) {
      flag_drift(state);
      out.push_back(state);
    }
    if (ceiling_hit) break;
  }
  return out;
}

GridFunction pseudo_rescale(const GridFunction& u, double lambda0) {
  require(std::isfinite(lambda0) && lambda0 > 0.0, "invalid-argument",
          "scaling parameter must be positive");
  ensure_finite(u, "pseudo-rescale input");
  const Grid& g = u.grid;
  if (lambda0 == 1.0) return u;

  // shrinking (lambda0 < 1) samples u beyond the boundary; allowed only when
  // everything out there is already negligible
  if (lambda0 < 1.0) {
    const double sup = sup_norm(u);
    double tail = 0.0;
    for (std::size_t kk = 0; kk < g.n; ++kk) {
      const double x = g.x(kk);
      if (x <= lambda0 * g.x_min || x >= lambda0 * g.x_max())
        tail = std::max(tail, std::abs(u[kk]));
    }
    require(tail <= 1e-10 * sup + 1e-300, "out-of-domain",
            "rescaled support does not fit the domain");
  }

  GridFunction out(g);
  const double amp = 1.0 / std::sqrt(lambda0);
  for (std::size_t kk = 0; kk < g.n; ++kk) {
    const double xi = g.x(kk) / lambda0;
    out[kk] = (xi < g.x_min || xi > g.x_max()) ? 0.0 : amp * interpolate(u, xi);
  }
  return out;
}

}  // namespace satkdv
