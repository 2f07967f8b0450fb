#include "wscub/ode_engine.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <random>

#include "wscub/error.hpp"

namespace wscub {

VectorFieldSet::VectorFieldSet(std::size_t state_dim, std::size_t driving_dim, std::vector<FieldFn> fields,
                               std::vector<JacobianFn> jacobians)
    : state_dim_(state_dim),
      driving_dim_(driving_dim),
      fields_(std::move(fields)),
      jacobians_(std::move(jacobians)) {
  if (state_dim_ < 2 || driving_dim_ < 1) {
    throw Error(ErrorKind::kInvalidParameter, "need augmented state dim >= 2 and d_b >= 1");
  }
  if (fields_.size() != driving_dim_ + 1) {
    throw Error(ErrorKind::kDimensionMismatch, "need d_b + 1 vector fields");
  }
  if (!jacobians_.empty() && jacobians_.size() != fields_.size()) {
    throw Error(ErrorKind::kDimensionMismatch, "jacobians must be given for every field or none");
  }
}

void VectorFieldSet::evaluate(std::size_t i, std::span<const double> x, std::span<double> out) const {
  fields_[i](x, out);
}

bool VectorFieldSet::has_analytic_jacobian(std::size_t i) const {
  return !jacobians_.empty() && static_cast<bool>(jacobians_[i]);
}

void VectorFieldSet::jacobian(std::size_t i, std::span<const double> x, std::span<double> out) const {
  const std::size_t n = state_dim_;
  if (out.size() != n * n) throw Error(ErrorKind::kDimensionMismatch, "jacobian buffer must be n x n");
  if (has_analytic_jacobian(i)) {
    jacobians_[i](x, out);
    return;
  }
  const double root_eps = std::sqrt(std::numeric_limits<double>::epsilon());
  std::vector<double> base(n), bumped(n), y(x.begin(), x.end());
  fields_[i](x, base);
  for (std::size_t c = 0; c < n; ++c) {
    const double h = root_eps * (1.0 + std::abs(x[c]));
    y[c] = x[c] + h;
    fields_[i](y, bumped);
    y[c] = x[c];
    for (std::size_t r = 0; r < n; ++r) out[r * n + c] = (bumped[r] - base[r]) / h;
  }
}

void VectorFieldSet::combine(std::span<const double> x, std::span<const double> rate, std::span<double> out,
                             std::span<double> scratch) const {
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t i = 0; i < fields_.size(); ++i) {
    if (rate[i] == 0.0) continue;
    fields_[i](x, scratch);
    for (std::size_t r = 0; r < state_dim_; ++r) out[r] += rate[i] * scratch[r];
  }
}

bool VectorFieldSet::time_augmented_at(std::span<const double> x, double tol) const {
  std::vector<double> v(state_dim_);
  for (std::size_t i = 0; i < fields_.size(); ++i) {
    fields_[i](x, v);
    const double want = (i == 0) ? 1.0 : 0.0;
    if (!(std::abs(v[0] - want) <= tol)) return false;
  }
  return true;
}

VectorFieldSet ito_to_stratonovich(const ItoSde& sde, std::vector<JacobianFn> jacobians) {
  const std::size_t dx = sde.state_dim;
  const std::size_t db = sde.driving_dim;
  if (dx == 0 || db == 0 || !sde.drift || !sde.diffusion) {
    throw Error(ErrorKind::kInvalidParameter, "SDE needs positive dimensions, drift and diffusion");
  }
  if (!jacobians.empty() && jacobians.size() != db) {
    throw Error(ErrorKind::kDimensionMismatch, "need one diffusion jacobian per driving component");
  }
  const std::size_t n = dx + 1;

  std::vector<FieldFn> columns;
  for (std::size_t i = 0; i < db; ++i) {
    columns.push_back([sde, i, dx, db](std::span<const double> x, std::span<double> out) {
      if (x.size() != dx + 1 || out.size() != dx + 1) {
        throw Error(ErrorKind::kDimensionMismatch, "state does not match the SDE dimension");
      }
      thread_local std::vector<double> sigma;
      sigma.resize(dx * db);
      sde.diffusion(x[0], x.subspan(1), sigma);
      out[0] = 0.0;
      for (std::size_t r = 0; r < dx; ++r) out[r + 1] = sigma[r * db + i];
    });
  }
  std::vector<JacobianFn> column_jacobians = jacobians;
  if (column_jacobians.empty()) column_jacobians.resize(db);

  // The correction needs dV_i; reuse the same rule as VectorFieldSet::jacobian.
  VectorFieldSet probe(n, db, [&] {
    std::vector<FieldFn> f{[](std::span<const double>, std::span<double> out) {
      std::fill(out.begin(), out.end(), 0.0);
      out[0] = 1.0;
    }};
    f.insert(f.end(), columns.begin(), columns.end());
    return f;
  }(), [&] {
    std::vector<JacobianFn> j{JacobianFn{}};
    j.insert(j.end(), column_jacobians.begin(), column_jacobians.end());
    return j;
  }());

  FieldFn v0 = [sde, probe, dx, db, n](std::span<const double> x, std::span<double> out) {
    if (x.size() != n || out.size() != n) {
      throw Error(ErrorKind::kDimensionMismatch, "state does not match the SDE dimension");
    }
    thread_local std::vector<double> vi, jac;
    vi.resize(n);
    jac.resize(n * n);
    out[0] = 1.0;
    sde.drift(x[0], x.subspan(1), out.subspan(1));
    for (std::size_t i = 1; i <= db; ++i) {
      probe.evaluate(i, x, vi);
      probe.jacobian(i, x, jac);
      for (std::size_t r = 1; r < n; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < n; ++c) s += jac[r * n + c] * vi[c];
        out[r] -= 0.5 * s;
      }
    }
    (void)dx;
  };

  std::vector<FieldFn> fields{v0};
  fields.insert(fields.end(), columns.begin(), columns.end());
  std::vector<JacobianFn> all_jac{JacobianFn{}};
  all_jac.insert(all_jac.end(), column_jacobians.begin(), column_jacobians.end());
  return VectorFieldSet(n, db, std::move(fields), std::move(all_jac));
}

// ---------------------------------------------------------------- Trajectory

void Trajectory::reserve(std::size_t n) {
  times_.reserve(n);
  states_.reserve(n * dim_);
}

void Trajectory::push(double t, std::span<const double> x) {
  if (x.size() != dim_) throw Error(ErrorKind::kDimensionMismatch, "trajectory state has wrong dimension");
  times_.push_back(t);
  states_.insert(states_.end(), x.begin(), x.end());
}

void Trajectory::clear() {
  times_.clear();
  states_.clear();
}

std::vector<double> Trajectory::at(double t) const {
  if (times_.empty()) throw Error(ErrorKind::kIndexOutOfRange, "empty trajectory");
  if (t <= times_.front()) {
    auto s = state(0);
    return {s.begin(), s.end()};
  }
  if (t >= times_.back()) {
    auto s = final_state();
    return {s.begin(), s.end()};
  }
  const auto it = std::upper_bound(times_.begin(), times_.end(), t);
  const std::size_t j = static_cast<std::size_t>(it - times_.begin());
  const double w = (t - times_[j - 1]) / (times_[j] - times_[j - 1]);
  std::vector<double> out(dim_);
  for (std::size_t c = 0; c < dim_; ++c) out[c] = (1.0 - w) * state(j - 1)[c] + w * state(j)[c];
  return out;
}

std::string Trajectory::to_csv() const {
  std::string csv = "t";
  for (std::size_t c = 0; c < dim_; ++c) csv += ",x" + std::to_string(c);
  csv += '\n';
  char buf[40];
  for (std::size_t i = 0; i < size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g", times_[i]);
    csv += buf;
    for (double v : state(i)) {
      std::snprintf(buf, sizeof(buf), ",%.17g", v);
      csv += buf;
    }
    csv += '\n';
  }
  return csv;
}

// ---------------------------------------------------------------- solvers

namespace {

void require_finite(std::span<const double> x, double t) {
  for (double v : x) {
    if (!std::isfinite(v)) {
      throw Error(ErrorKind::kNonFiniteState, "state left the finite range at t = " + std::to_string(t));
    }
  }
}

}  // namespace

void solve_controlled_ode_into(const VectorFieldSet& fields, const PiecewisePath& path,
                               std::span<const double> x0, int steps_per_segment, Trajectory& out) {
  const std::size_t n = fields.state_dim();
  if (path.dim() != fields.driving_dim() + 1) {
    throw Error(ErrorKind::kDimensionMismatch, "path and fields disagree on d_b");
  }
  if (x0.size() != n || out.dim() != n) throw Error(ErrorKind::kDimensionMismatch, "initial state has wrong dimension");
  if (steps_per_segment < 1) throw Error(ErrorKind::kInvalidParameter, "steps_per_segment must be positive");

  out.clear();
  out.reserve(path.segments() * static_cast<std::size_t>(steps_per_segment) + 1);
  std::vector<double> x(x0.begin(), x0.end());
  std::vector<double> k1(n), k2(n), k3(n), k4(n), tmp(n), scratch(n), rate(path.dim());
  double t = path.start_time();
  out.push(t, x);

  for (std::size_t seg = 0; seg < path.segments(); ++seg) {
    const double t0 = path.breakpoint(seg);
    const double t1 = path.breakpoint(seg + 1);
    const double dt = t1 - t0;
    const auto a = path.point(seg);
    const auto b = path.point(seg + 1);
    for (std::size_t c = 0; c < rate.size(); ++c) rate[c] = (b[c] - a[c]) / dt;
    const double h = dt / steps_per_segment;
    for (int s = 0; s < steps_per_segment; ++s) {
      fields.combine(x, rate, k1, scratch);
      for (std::size_t r = 0; r < n; ++r) tmp[r] = x[r] + 0.5 * h * k1[r];
      fields.combine(tmp, rate, k2, scratch);
      for (std::size_t r = 0; r < n; ++r) tmp[r] = x[r] + 0.5 * h * k2[r];
      fields.combine(tmp, rate, k3, scratch);
      for (std::size_t r = 0; r < n; ++r) tmp[r] = x[r] + h * k3[r];
      fields.combine(tmp, rate, k4, scratch);
      for (std::size_t r = 0; r < n; ++r) x[r] += h / 6.0 * (k1[r] + 2.0 * k2[r] + 2.0 * k3[r] + k4[r]);
      t = (s + 1 == steps_per_segment) ? t1 : t0 + (s + 1) * h;
      require_finite(x, t);
      out.push(t, x);
    }
  }
}

Trajectory solve_controlled_ode(const VectorFieldSet& fields, const PiecewisePath& path,
                                std::span<const double> x0, int steps_per_segment) {
  Trajectory out(fields.state_dim());
  solve_controlled_ode_into(fields, path, x0, steps_per_segment, out);
  return out;
}

Trajectory solve_sde_mc(const ItoSde& sde, std::span<const double> x0, double horizon, std::size_t steps,
                        std::uint64_t seed) {
  const std::size_t dx = sde.state_dim;
  const std::size_t db = sde.driving_dim;
  if (steps == 0 || !(horizon > 0.0)) throw Error(ErrorKind::kInvalidParameter, "need steps >= 1 and T > 0");
  if (x0.size() != dx) throw Error(ErrorKind::kDimensionMismatch, "initial state has wrong dimension");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  const double h = horizon / static_cast<double>(steps);
  const double root_h = std::sqrt(h);
  std::vector<double> x(x0.begin(), x0.end()), mu(dx), sigma(dx * db), dw(db), aug(dx + 1);
  Trajectory out(dx + 1);
  out.reserve(steps + 1);
  aug[0] = 0.0;
  std::copy(x.begin(), x.end(), aug.begin() + 1);
  out.push(0.0, aug);
  for (std::size_t s = 0; s < steps; ++s) {
    const double t = static_cast<double>(s) * h;
    sde.drift(t, x, mu);
    sde.diffusion(t, x, sigma);
    for (auto& w : dw) w = root_h * normal(rng);
    for (std::size_t r = 0; r < dx; ++r) {
      double noise = 0.0;
      for (std::size_t c = 0; c < db; ++c) noise += sigma[r * db + c] * dw[c];
      x[r] += mu[r] * h + noise;
    }
    const double t_next = (s + 1 == steps) ? horizon : static_cast<double>(s + 1) * h;
    require_finite(x, t_next);
    aug[0] = t_next;
    std::copy(x.begin(), x.end(), aug.begin() + 1);
    out.push(t_next, aug);
  }
  return out;
}

std::vector<double> initial_state(const std::function<std::vector<double>(std::span<const double>)>& zeta,
                                  std::optional<std::vector<double>> v, std::size_t v_dim) {
  const std::vector<double> input = v ? *v : std::vector<double>(v_dim, 0.0);
  const std::vector<double> x = zeta(input);
  std::vector<double> out{0.0};
  out.insert(out.end(), x.begin(), x.end());
  return out;
}

}  // namespace wscub
