#pragma once

#include "satkdv/groundstate.hpp"
#include "satkdv/linearized.hpp"

namespace satkdv {

// Drift-localized profile Q_b = Q + b * chi_b * P, where chi_b(y) =
// chi(|b|^beta y) flattens the non-decaying left plateau of P away.
struct LocalizedProfile {
  double b = 0.0;
  double omega = 0.0;
  double beta = 0.75;
  GroundState gs;
  NonlocalProfile np;
  GridFunction values;  // Q_b samples
  GridFunction cutoff;  // chi_b samples
};

// Generator error Psi of the profile:
// -Psi = b*Lambda(Q_b) + (Q_b'' - Q_b + Q_b^5 - omega*Q_b|Q_b|^{q-1})'.
struct ProfileError {
  LocalizedProfile profile;
  GridFunction values;
};

// The cutoff shape: 1 for u >= -1, 0 for u <= -2, quintic smoothstep between.
double cutoff_chi(double u);

// Assemble Q_b.  Throws "cutoff-unresolved" when the cutoff transition falls
// inside the grid but spans fewer than eight nodes.
LocalizedProfile build_localized(double b, const GroundState& gs,
                                 const NonlocalProfile& np, double b_star = 0.1);

ProfileError compute_psi(const LocalizedProfile& p);

// Integral of Q_b^2.
double profile_mass(const LocalizedProfile& p);

// (1/2) int (Q_b')^2 - (1/6) int Q_b^6 + (omega/(q+1)) int |Q_b|^{q+1}.
double profile_energy(const LocalizedProfile& p);

}  // namespace satkdv
