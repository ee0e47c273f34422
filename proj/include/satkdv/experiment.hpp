#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "satkdv/evolution.hpp"
#include "satkdv/modulation.hpp"
#include "satkdv/reduced.hpp"

namespace satkdv {

// What an experiment starts from.  `mass_factor` rescales the assembled field
// in L2, so e.g. 0.95 produces data strictly below the solitary-wave mass.
struct InitialDataSpec {
  enum class Kind { GroundState, Profile, Perturbed, File };
  Kind kind = Kind::GroundState;
  double b0 = 0.0;           // Profile: drift of the localized profile
  std::uint64_t seed = 0;    // Perturbed: RNG seed for the bump field
  double amplitude = 0.01;   // Perturbed: H1 size of the perturbation
  double mass_factor = 1.0;  // L2 rescale applied last
  std::string path;          // File: two-column CSV x,value
};

struct ClassifierSpec {
  double c1 = -1.0;         // < 0 derives the slope from the ground state
  double C_star = 10.0;     // separation-condition constant
  double alpha_star = 0.3;  // residual level marking loss of proximity
};

struct ExperimentConfig {
  double q = 7.0;
  double gamma = 0.0;
  double half_length = 40.0;
  std::size_t n = 2048;  // power of two
  double dt = 5e-4;
  double t_end = 1.0;
  std::size_t snapshot_stride = 200;
  bool dealias = false;
  double gradient_ceiling = 1e3;  // stop once ||u_x||_2 crosses this (0 = off)
  InitialDataSpec initial;
  ClassifierSpec classifier;
  std::string out_dir = ".";
  std::uint64_t seed = 0;  // recorded alongside initial.seed for provenance
};

// Parse / serialize the single-document JSON configuration.  Parsing is
// strict: unknown keys and wrong types raise "invalid-config", as do values
// violating gamma >= 0, q > 5 or the grid/evolution sanity bounds.
ExperimentConfig config_from_json(const std::string& text);
std::string config_to_json(const ExperimentConfig& cfg);

struct StageStatus {
  std::string stage;
  bool ok = false;
  std::string detail;  // error code on failure, short metrics otherwise
};

struct FileRecord {
  std::string name;       // relative to out_dir
  std::uint64_t bytes = 0;
  std::uint32_t crc32 = 0;
};

struct RunManifest {
  std::string config_json;  // the configuration, embedded verbatim
  std::string code_version;
  std::vector<StageStatus> stages;
  Regime regime = Regime::Undetermined;
  double margin = 0.0;
  double lambda_end = 0.0;    // last tracked scale (0 when tracking failed)
  double lambda_limit = 0.0;  // reduced-flow terminal scale when defined
  double mass_drift = 0.0;    // relative, over the whole run
  double energy_drift = 0.0;
  double tube_exit_time = -1.0;  // first crossing of alpha_star * ||Q||, if any
  std::vector<FileRecord> files;
  bool ok = false;  // evolution succeeded and a classification was reached
};

// CRC-32 (IEEE, reflected 0xEDB88320) of a byte string, for manifests.
std::uint32_t crc32_bytes(const std::string& data);

// Assemble initial data on `grid`.  GroundState and Profile sample the
// solitary-wave family at omega = gamma; Perturbed adds a seeded sum of
// smooth bumps rescaled so that the H1 size is `amplitude` and the weighted
// right tail  int_{y>0} y^10 e0^2  stays below 1; File reads a two-column CSV
// and interpolates.  Throws "spec-invalid" on a malformed spec.
GridFunction make_initial_data(const InitialDataSpec& spec, const Grid& grid,
                               double gamma, double q);

// End-to-end pipeline: ground state -> initial data -> evolution ->
// decomposition tracking -> regime classification, with series.csv,
// modulation.csv and manifest.json written under cfg.out_dir.  Files are
// written once and closed before the next stage starts; a stage failure is
// recorded in the manifest (with its error code) and the earlier outputs are
// kept.  When tracking fails because the data never sits close enough to the
// modulated family, classification falls back to the tube distance of the
// raw snapshots, which still detects the Exit regime.  Deterministic for a
// fixed configuration, including the seed.
RunManifest run_experiment(const ExperimentConfig& cfg);

struct GammaRunResult {
  double gamma = 0.0;
  Regime regime = Regime::Undetermined;
  double lambda_inf = 0.0;  // terminal-scale estimate
  bool plateau = false;     // scale settled before the horizon
  std::string error;        // per-run failure code, empty on success
};

struct GammaStudyReport {
  std::vector<GammaRunResult> runs;
  double fitted_exponent = 0.0;  // d log lambda_inf / d log gamma
  std::size_t fit_count = 0;     // runs entering the fit
  bool shortfall = false;        // some run missed its plateau or failed
  bool persistent_regime = true;  // successful runs all share one label
};

// Terminal-scale law under a gamma sweep with the base initial data held
// fixed.  In surrogate mode the PDE is bypassed: the data is decomposed once
// and the reduced flow supplies the terminal scale in closed form.  In PDE
// mode each gamma is evolved and tracked, the terminal scale is the mean
// tracked scale over the final fifth of the run, and runs whose scale has
// not settled are excluded from the fit (shortfall reported).  Requires the
// gammas positive and strictly decreasing.  When any run is fit-eligible the
// fit needs at least three of them in surrogate mode and two in PDE mode,
// else "insufficient-data"; with none (say, every run labeled Exit) the
// report carries only the regime labels and no exponent.
GammaStudyReport gamma_limit_study(const ExperimentConfig& base,
                                   const std::vector<double>& gammas, bool use_pde);

}  // namespace satkdv
