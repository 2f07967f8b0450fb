#pragma once

// Cubature and Monte Carlo estimators of E[L(X)] and the convergence sweep
// comparing them against an oracle value.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "wscub/cubature_formulas.hpp"
#include "wscub/ode_engine.hpp"
#include "wscub/partition_paths.hpp"
#include "wscub/recombination.hpp"

namespace wscub {

struct PathFunctional {
  std::string name;
  std::function<double(const Trajectory&)> evaluate;
  double lipschitz = 1.0;  // metadata only
};

/// int_0^T (X_t - sin(2 pi t))^2 dt by the trapezoid rule on the trajectory
/// grid, X being the first spatial component.
PathFunctional sine_tracking_functional();

/// f applied to the spatial part of the final state.
PathFunctional terminal_functional(std::string name, std::function<double(std::span<const double>)> f);

struct EstimateReport {
  double value = 0.0;
  std::size_t n = 0;  // ODE or SDE solves
  double seconds = 0.0;
  std::vector<double> contributions;  // weight * L per path, when requested
  double std_error = 0.0;             // Monte Carlo only
};

struct OdeConfig {
  int steps_per_segment = 32;
  std::size_t workers = 1;
  bool keep_contributions = false;
};

/// Sum over the table's positive-weight leaves of weight * L(phi_leaf).
/// Throws ManifestMismatch when the table was built for another formula/partition.
EstimateReport cubature_estimate(const PathFunctional& functional, const VectorFieldSet& fields,
                                 const CubatureFormula& formula, const TimePartition& partition,
                                 const WeightTable& table, std::span<const double> x0, const OdeConfig& config);

/// Exhaustive sum over all q^k leaves with product weights.
EstimateReport cubature_estimate_raw(const PathFunctional& functional, const VectorFieldSet& fields,
                                     const CubatureFormula& formula, const TimePartition& partition,
                                     std::span<const double> x0, const OdeConfig& config);

/// Mean of L over n Euler-Maruyama paths; path i uses derive_seed(seed, i).
EstimateReport mc_estimate(const PathFunctional& functional, const ItoSde& sde, std::span<const double> x0,
                           double horizon, std::size_t steps, std::size_t n, std::uint64_t seed,
                           std::size_t workers = 1, bool keep_contributions = false);

/// Scalar dX = (a X + c) dt + (b X + e) dB (Ito), X_0 = x0. Covers Brownian
/// motion (a=b=c=0, e=1), geometric Brownian motion and Ornstein-Uhlenbeck.
struct AffineScalarSde {
  double a = 0.0;
  double c = 0.0;
  double b = 0.0;
  double e = 1.0;
  double x0 = 0.0;
};

ItoSde to_ito(const AffineScalarSde& model);
/// Stratonovich fields with analytic correction.
VectorFieldSet stratonovich_fields(const AffineScalarSde& model);

/// E[L] from the first two moments, integrated to near machine precision.
/// Available for "sine_tracking", "terminal_mean" and "terminal_square";
/// nullopt otherwise.
std::optional<double> affine_oracle(const AffineScalarSde& model, const std::string& functional, double horizon);

PathFunctional functional_by_name(const std::string& name);

struct ConvergenceConfig {
  AffineScalarSde model{0.5, 0.0, 0.5, 0.5, 0.0};
  std::string functional = "sine_tracking";
  double horizon = 1.0;
  std::optional<double> oracle;  // overrides the analytic value

  int degree = 5;
  double gamma = 0.6;
  std::vector<int> ks{2, 3, 4, 5, 6, 8, 10, 12, 16, 20, 24};
  bool recombine = true;
  int basis_degree = 4;
  double p_star = 1.0;
  int steps_per_segment = 8;

  std::vector<std::size_t> mc_ns{100, 200, 500, 1000, 2000, 5000, 10000, 20000, 50000, 100000};
  std::size_t replicates = 20;
  std::size_t mc_steps = 1000;
  std::uint64_t seed = 20240607;
  std::size_t workers = 1;

  /// Slope fit ranges for Monte Carlo.
  double mc_fit_min = 100;
  double mc_fit_max = 100000;
};

struct ConvergenceRow {
  std::string method;
  std::size_t n = 0;
  double error = 0.0;
  double seconds = 0.0;
  int k = 0;  // partition size for cubature rows, 0 for MC
  double value = 0.0;
};

struct ConvergenceResult {
  double oracle = 0.0;
  std::vector<ConvergenceRow> rows;
  double mc_slope = 0.0;
  double cubature_slope = 0.0;
  std::size_t cubature_fit_points = 0;  // rows before the plateau
  /// Cubature error <= MC RMS error at every n where both were run.
  bool cubature_dominates = false;
  std::size_t matched_points = 0;

  std::string to_csv() const;  // method,n,error,seconds
};

/// Throws OracleUnavailable when no oracle value can be formed.
ConvergenceResult convergence_experiment(const ConvergenceConfig& config);

/// Number of leading points before the error stops falling by at least 5% per
/// doubling of n (never fewer than two).
std::size_t pre_plateau_count(const std::vector<double>& ns, const std::vector<double>& errors);

}  // namespace wscub
