#pragma once

// Time-augmented Stratonovich vector fields, the controlled ODE solver driven
// by piecewise-linear paths, and the Euler-Maruyama baseline.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "wscub/cubature_formulas.hpp"

namespace wscub {

/// out = V(x) on the augmented state x = (t, x_1..x_dx).
using FieldFn = std::function<void(std::span<const double> x, std::span<double> out)>;
/// out = dV(x), row-major n x n with out[r * n + c] = d V_r / d x_c.
using JacobianFn = std::function<void(std::span<const double> x, std::span<double> out)>;

/// V_0..V_{d_b} on R^{d_x+1}. Component 0 of V_0 is 1 and of V_i (i >= 1) is 0.
class VectorFieldSet {
 public:
  VectorFieldSet(std::size_t state_dim, std::size_t driving_dim, std::vector<FieldFn> fields,
                 std::vector<JacobianFn> jacobians = {});

  /// Augmented dimension d_x + 1.
  std::size_t state_dim() const noexcept { return state_dim_; }
  std::size_t driving_dim() const noexcept { return driving_dim_; }

  void evaluate(std::size_t i, std::span<const double> x, std::span<double> out) const;
  /// Analytic when supplied, otherwise forward differences with
  /// h_j = sqrt(eps) * (1 + |x_j|).
  void jacobian(std::size_t i, std::span<const double> x, std::span<double> out) const;
  bool has_analytic_jacobian(std::size_t i) const;

  /// out = sum_i V_i(x) * rate[i]; scratch must hold state_dim() doubles.
  void combine(std::span<const double> x, std::span<const double> rate, std::span<double> out,
               std::span<double> scratch) const;

  /// Checks the time-augmentation components at x within tol.
  bool time_augmented_at(std::span<const double> x, double tol = 1e-12) const;

 private:
  std::size_t state_dim_;
  std::size_t driving_dim_;
  std::vector<FieldFn> fields_;
  std::vector<JacobianFn> jacobians_;
};

/// dX = mu(t, X) dt + sigma(t, X) dB in Ito form, X in R^{d_x}, B in R^{d_b}.
struct ItoSde {
  std::size_t state_dim = 0;
  std::size_t driving_dim = 0;
  /// out has d_x entries.
  std::function<void(double t, std::span<const double> x, std::span<double> out)> drift;
  /// out is d_x x d_b, row-major.
  std::function<void(double t, std::span<const double> x, std::span<double> out)> diffusion;
};

/// V_i = (0, sigma_i), V_0 = (1, mu) - 1/2 sum_i dV_i V_i. Jacobians, when
/// given, are for the augmented V_1..V_{d_b} (one per driving component).
VectorFieldSet ito_to_stratonovich(const ItoSde& sde, std::vector<JacobianFn> jacobians = {});

/// Piecewise-linear-in-time record of an augmented state.
class Trajectory {
 public:
  explicit Trajectory(std::size_t state_dim) : dim_(state_dim) {}

  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return times_.size(); }
  const std::vector<double>& times() const noexcept { return times_; }
  const std::vector<double>& states() const noexcept { return states_; }
  std::span<const double> state(std::size_t i) const { return {states_.data() + i * dim_, dim_}; }
  std::span<const double> final_state() const { return state(size() - 1); }

  void reserve(std::size_t n);
  void push(double t, std::span<const double> x);
  void clear();

  /// Linear interpolation; clamps outside the grid.
  std::vector<double> at(double t) const;

  /// Header t,x0,...,x{d_x}; x0 is the time component.
  std::string to_csv() const;

 private:
  std::size_t dim_;
  std::vector<double> times_;
  std::vector<double> states_;
};

/// Classical RK4 on phi' = sum_i V_i(phi) d omega^i/dt with steps_per_segment
/// steps inside every linear piece of the path.
Trajectory solve_controlled_ode(const VectorFieldSet& fields, const PiecewisePath& path,
                                std::span<const double> x0, int steps_per_segment = 32);

/// Same solve writing into an existing trajectory (cleared first).
void solve_controlled_ode_into(const VectorFieldSet& fields, const PiecewisePath& path,
                               std::span<const double> x0, int steps_per_segment, Trajectory& out);

/// Euler-Maruyama on a uniform grid of `steps` steps over [0, horizon]. The
/// returned trajectory is augmented with time in component 0.
Trajectory solve_sde_mc(const ItoSde& sde, std::span<const double> x0, double horizon,
                        std::size_t steps, std::uint64_t seed);

/// Augmented start (0, zeta(v)); v defaults to zeros of length v_dim.
std::vector<double> initial_state(
    const std::function<std::vector<double>(std::span<const double>)>& zeta,
    std::optional<std::vector<double>> v, std::size_t v_dim);

}  // namespace wscub
