#include "satkdv/profile.hpp"

#include <cmath>
#include <cstddef>

#include "satkdv/errors.hpp"

namespace satkdv {

double cutoff_chi(double u) {
  if (u >= -1.0) return 1.0;
  if (u <= -2.0) return 0.0;
  const double s = u + 2.0;
  return ((6.0 * s - 15.0) * s + 10.0) * s * s * s;
}

LocalizedProfile build_localized(double b, const GroundState& gs,
                                 const NonlocalProfile& np, double b_star) {
  require(std::isfinite(b), "invalid-argument", "drift parameter must be finite");
  require(std::abs(b) < b_star, "invalid-argument",
          "drift parameter outside the admissible range |b| < b_star");
  require(gs.profile.grid.same_as(np.P.grid), "grid-mismatch",
          "ground state and nonlocal profile live on different grids");
  require(std::abs(gs.omega - np.gs.omega) <= 1e-14, "invalid-argument",
          "ground state and nonlocal profile have different omega");

  LocalizedProfile p;
  p.b = b;
  p.omega = gs.omega;
  p.gs = gs;
  p.np = np;

  const Grid& grid = gs.profile.grid;
  if (b != 0.0) {
    // The cutoff transition spans y in [-2w, -w] with w = |b|^{-beta}; it must
    // cover enough nodes to be representable on the grid.
    const double width = std::pow(std::abs(b), -p.beta);
    require(width >= 8.0 * grid.h, "cutoff-unresolved",
            "cutoff transition narrower than eight grid spacings");
  }

  const double scale = (b == 0.0) ? 0.0 : std::pow(std::abs(b), p.beta);
  p.cutoff = GridFunction(grid);
  p.values = GridFunction(grid);
  for (std::size_t k = 0; k < grid.n; ++k) {
    const double chi = cutoff_chi(scale * grid.x(k));
    p.cutoff[k] = chi;
    p.values[k] = gs.profile[k] + b * chi * np.P[k];
  }
  ensure_finite(p.values, "localized profile");
  return p;
}

ProfileError compute_psi(const LocalizedProfile& p) {
  const GridFunction& v = p.values;
  const Grid& grid = v.grid;
  const GridFunction d1 = differentiate(v, 1);
  const GridFunction d3 = differentiate(v, 3);

  ProfileError out;
  out.profile = p;
  out.values = GridFunction(grid);
  const double q = p.gs.q;
  for (std::size_t k = 0; k < grid.n; ++k) {
    const double u = v[k];
    const double u2 = u * u;
    const double scaling = 0.5 * u + grid.x(k) * d1[k];
    const double flux_prime =
        d3[k] - d1[k] + 5.0 * u2 * u2 * d1[k] -
        q * p.omega * std::pow(std::abs(u), q - 1.0) * d1[k];
    out.values[k] = -(p.b * scaling + flux_prime);
  }
  ensure_finite(out.values, "profile generator error");
  return out;
}

double profile_mass(const LocalizedProfile& p) { return inner(p.values, p.values); }

double profile_energy(const LocalizedProfile& p) {
  const GridFunction& v = p.values;
  const GridFunction d1 = differentiate(v, 1);
  const double q = p.gs.q;
  GridFunction sixth(v.grid);
  GridFunction saturation(v.grid);
  for (std::size_t k = 0; k < v.size(); ++k) {
    const double u2 = v[k] * v[k];
    sixth[k] = u2 * u2 * u2;
    saturation[k] = std::pow(std::abs(v[k]), q + 1.0);
  }
  return 0.5 * inner(d1, d1) - integrate(sixth) / 6.0 +
         p.omega / (q + 1.0) * integrate(saturation);
}

}  // namespace satkdv
