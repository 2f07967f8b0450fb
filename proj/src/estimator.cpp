#include "wscub/estimator.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>

#include "wscub/error.hpp"
#include "wscub/numeric.hpp"

namespace wscub {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

double sine_target(double t) { return std::sin(2.0 * std::numbers::pi * t); }

}  // namespace

PathFunctional sine_tracking_functional() {
  PathFunctional f;
  f.name = "sine_tracking";
  f.lipschitz = 1.0;
  f.evaluate = [](const Trajectory& tr) {
    CompensatedSum sum;
    const auto& t = tr.times();
    auto residual = [&](std::size_t i) {
      const double r = tr.state(i)[1] - sine_target(t[i]);
      return r * r;
    };
    double prev = residual(0);
    for (std::size_t i = 1; i < tr.size(); ++i) {
      const double cur = residual(i);
      sum.add(0.5 * (t[i] - t[i - 1]) * (prev + cur));
      prev = cur;
    }
    return sum.value();
  };
  return f;
}

PathFunctional terminal_functional(std::string name, std::function<double(std::span<const double>)> f) {
  PathFunctional out;
  out.name = std::move(name);
  out.evaluate = [f = std::move(f)](const Trajectory& tr) { return f(tr.final_state().subspan(1)); };
  return out;
}

PathFunctional functional_by_name(const std::string& name) {
  if (name == "sine_tracking") return sine_tracking_functional();
  if (name == "terminal_mean") return terminal_functional(name, [](std::span<const double> x) { return x[0]; });
  if (name == "terminal_square") {
    return terminal_functional(name, [](std::span<const double> x) { return x[0] * x[0]; });
  }
  if (name == "terminal_abs") {
    return terminal_functional(name, [](std::span<const double> x) { return std::abs(x[0]); });
  }
  throw Error(ErrorKind::kInvalidParameter, "unknown functional '" + name + "'");
}

// ---------------------------------------------------------------- cubature

namespace {

void weighted_leaf_sum(const PathFunctional& functional, const VectorFieldSet& fields,
                                 const CubatureFormula& formula, const TimePartition& partition,
                                 const std::vector<WeightedLeaf>& leaves, std::span<const double> x0,
                                 const OdeConfig& config, CompensatedSum& total,
                                 std::vector<double>* contributions) {
  std::vector<double> terms(leaves.size());
  const std::vector<double> start(x0.begin(), x0.end());
  parallel_for(leaves.size(), config.workers, [&](std::size_t i) {
    thread_local Trajectory trajectory(0);
    if (trajectory.dim() != fields.state_dim()) trajectory = Trajectory(fields.state_dim());
    const CubaturePath path = concat_path(formula, partition, leaves[i].index);
    solve_controlled_ode_into(fields, path.path, start, config.steps_per_segment, trajectory);
    terms[i] = leaves[i].weight * functional.evaluate(trajectory);
  });
  for (double t : terms) total.add(t);
  if (contributions) contributions->insert(contributions->end(), terms.begin(), terms.end());
}

}  // namespace

EstimateReport cubature_estimate(const PathFunctional& functional, const VectorFieldSet& fields,
                                 const CubatureFormula& formula, const TimePartition& partition,
                                 const WeightTable& table, std::span<const double> x0, const OdeConfig& config) {
  const auto started = Clock::now();
  table.check_matches(formula, partition);
  if (x0.size() != fields.state_dim()) throw Error(ErrorKind::kDimensionMismatch, "initial state has wrong dimension");
  const std::vector<WeightedLeaf> leaves = table.leaves();
  EstimateReport report;
  CompensatedSum total;
  weighted_leaf_sum(functional, fields, formula, partition, leaves, x0, config, total,
                    config.keep_contributions ? &report.contributions : nullptr);
  report.value = total.value();
  report.n = leaves.size();
  report.seconds = seconds_since(started);
  return report;
}

EstimateReport cubature_estimate_raw(const PathFunctional& functional, const VectorFieldSet& fields,
                                     const CubatureFormula& formula, const TimePartition& partition,
                                     std::span<const double> x0, const OdeConfig& config) {
  const auto started = Clock::now();
  if (x0.size() != fields.state_dim()) throw Error(ErrorKind::kDimensionMismatch, "initial state has wrong dimension");
  LeafStream stream(formula, partition);
  EstimateReport report;
  CompensatedSum total;
  constexpr std::size_t kBatch = 4096;
  std::vector<WeightedLeaf> batch;
  for (;;) {
    batch.clear();
    while (batch.size() < kBatch) {
      auto leaf = stream.next();
      if (!leaf) break;
      batch.push_back(std::move(*leaf));
    }
    if (batch.empty()) break;
    weighted_leaf_sum(functional, fields, formula, partition, batch, x0, config, total,
                      config.keep_contributions ? &report.contributions : nullptr);
    report.n += batch.size();
  }
  report.value = total.value();
  report.seconds = seconds_since(started);
  return report;
}

// ---------------------------------------------------------------- Monte Carlo

EstimateReport mc_estimate(const PathFunctional& functional, const ItoSde& sde, std::span<const double> x0,
                           double horizon, std::size_t steps, std::size_t n, std::uint64_t seed,
                           std::size_t workers, bool keep_contributions) {
  if (n == 0) throw Error(ErrorKind::kInvalidParameter, "need at least one path");
  const auto started = Clock::now();
  std::vector<double> values(n);
  parallel_for(n, workers, [&](std::size_t i) {
    values[i] = functional.evaluate(solve_sde_mc(sde, x0, horizon, steps, derive_seed(seed, i)));
  });
  EstimateReport report;
  report.n = n;
  report.value = compensated_sum(values) / static_cast<double>(n);
  if (n > 1) {
    CompensatedSum ss;
    for (double v : values) ss.add((v - report.value) * (v - report.value));
    report.std_error = std::sqrt(ss.value() / static_cast<double>(n - 1) / static_cast<double>(n));
  }
  if (keep_contributions) {
    for (double& v : values) v /= static_cast<double>(n);
    report.contributions = std::move(values);
  }
  report.seconds = seconds_since(started);
  return report;
}

// ---------------------------------------------------------------- affine model

ItoSde to_ito(const AffineScalarSde& m) {
  ItoSde sde;
  sde.state_dim = 1;
  sde.driving_dim = 1;
  sde.drift = [m](double, std::span<const double> x, std::span<double> out) { out[0] = m.a * x[0] + m.c; };
  sde.diffusion = [m](double, std::span<const double> x, std::span<double> out) { out[0] = m.b * x[0] + m.e; };
  return sde;
}

VectorFieldSet stratonovich_fields(const AffineScalarSde& m) {
  FieldFn v0 = [m](std::span<const double> x, std::span<double> out) {
    out[0] = 1.0;
    out[1] = m.a * x[1] + m.c - 0.5 * m.b * (m.b * x[1] + m.e);
  };
  FieldFn v1 = [m](std::span<const double> x, std::span<double> out) {
    out[0] = 0.0;
    out[1] = m.b * x[1] + m.e;
  };
  JacobianFn j0 = [m](std::span<const double>, std::span<double> out) {
    out[0] = out[1] = out[2] = 0.0;
    out[3] = m.a - 0.5 * m.b * m.b;
  };
  JacobianFn j1 = [m](std::span<const double>, std::span<double> out) {
    out[0] = out[1] = out[2] = 0.0;
    out[3] = m.b;
  };
  return VectorFieldSet(2, 1, {v0, v1}, {j0, j1});
}

std::optional<double> affine_oracle(const AffineScalarSde& m, const std::string& functional, double horizon) {
  if (functional != "sine_tracking" && functional != "terminal_mean" && functional != "terminal_square") {
    return std::nullopt;
  }
  // y = (m1, m2, running integral of E[(X_t - sin)^2]); RK4 on a fine grid.
  auto rhs = [&](double t, const std::array<double, 3>& y) {
    const double s = sine_target(t);
    return std::array<double, 3>{m.a * y[0] + m.c,
                                 (2.0 * m.a + m.b * m.b) * y[1] + 2.0 * (m.c + m.b * m.e) * y[0] + m.e * m.e,
                                 y[1] - 2.0 * s * y[0] + s * s};
  };
  std::array<double, 3> y{m.x0, m.x0 * m.x0, 0.0};
  const int steps = 200000;
  const double h = horizon / steps;
  for (int i = 0; i < steps; ++i) {
    const double t = i * h;
    auto add = [](const std::array<double, 3>& a, const std::array<double, 3>& b, double f) {
      return std::array<double, 3>{a[0] + f * b[0], a[1] + f * b[1], a[2] + f * b[2]};
    };
    const auto k1 = rhs(t, y);
    const auto k2 = rhs(t + h / 2, add(y, k1, h / 2));
    const auto k3 = rhs(t + h / 2, add(y, k2, h / 2));
    const auto k4 = rhs(t + h, add(y, k3, h));
    for (int c = 0; c < 3; ++c) y[c] += h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
  }
  if (functional == "terminal_mean") return y[0];
  if (functional == "terminal_square") return y[1];
  return y[2];
}

// ---------------------------------------------------------------- convergence

std::size_t pre_plateau_count(const std::vector<double>& ns, const std::vector<double>& errors) {
  const std::size_t total = std::min(ns.size(), errors.size());
  if (total <= 2) return total;
  std::size_t count = 1;
  for (std::size_t j = 1; j < total; ++j) {
    const double doublings = std::log2(ns[j] / ns[j - 1]);
    if (!(doublings > 0.0) || !(errors[j] > 0.0) || !(errors[j - 1] > 0.0)) break;
    const double per_doubling = std::pow(errors[j] / errors[j - 1], 1.0 / doublings);
    if (per_doubling > 0.95) break;
    ++count;
  }
  return std::max<std::size_t>(count, 2);
}

std::string ConvergenceResult::to_csv() const {
  std::string csv = "method,n,error,seconds\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%s,%zu,%.17g,%.6g\n", r.method.c_str(), r.n, r.error, r.seconds);
    csv += buf;
  }
  return csv;
}

ConvergenceResult convergence_experiment(const ConvergenceConfig& cfg) {
  ConvergenceResult result;
  const std::optional<double> oracle =
      cfg.oracle ? cfg.oracle : affine_oracle(cfg.model, cfg.functional, cfg.horizon);
  if (!oracle) {
    throw Error(ErrorKind::kOracleUnavailable, "no analytic value for functional '" + cfg.functional + "'");
  }
  result.oracle = *oracle;
  const PathFunctional functional = functional_by_name(cfg.functional);
  const CubatureFormula formula = make_formula(cfg.degree, 1);
  const VectorFieldSet fields = stratonovich_fields(cfg.model);
  const ItoSde sde = to_ito(cfg.model);
  const std::vector<double> x0_aug{0.0, cfg.model.x0};
  const std::vector<double> x0{cfg.model.x0};

  // Cubature sweep over k.
  std::vector<ConvergenceRow> cub;
  for (int k : cfg.ks) {
    const auto started = Clock::now();
    const TimePartition partition = make_partition(cfg.horizon, k, cfg.gamma);
    PreprocessOptions options;
    options.basis_degree = cfg.basis_degree;
    options.p_star = cfg.p_star;
    const WeightTable table =
        cfg.recombine ? preprocess(formula, partition, options, cfg.gamma) : raw_weight_table(formula, partition);
    OdeConfig ode;
    ode.steps_per_segment = cfg.steps_per_segment;
    ode.workers = cfg.workers;
    const EstimateReport est = cubature_estimate(functional, fields, formula, partition, table, x0_aug, ode);
    cub.push_back({"cubature", est.n, std::abs(est.value - result.oracle), seconds_since(started), k, est.value});
  }
  std::stable_sort(cub.begin(), cub.end(), [](const auto& a, const auto& b) { return a.n < b.n; });

  // Monte Carlo: each replicate is one stream of paths; smaller n use prefixes.
  std::vector<std::size_t> checkpoints = cfg.mc_ns;
  const std::size_t mc_cap = cfg.mc_ns.empty() ? 0 : *std::max_element(cfg.mc_ns.begin(), cfg.mc_ns.end());
  for (const auto& r : cub) {
    if (r.n <= mc_cap) checkpoints.push_back(r.n);
  }
  std::sort(checkpoints.begin(), checkpoints.end());
  checkpoints.erase(std::unique(checkpoints.begin(), checkpoints.end()), checkpoints.end());
  std::map<std::size_t, double> sq_error, elapsed;
  if (!checkpoints.empty()) {
    const std::size_t max_n = checkpoints.back();
    std::vector<double> values(max_n);
    for (std::size_t rep = 0; rep < cfg.replicates; ++rep) {
      const std::uint64_t rep_seed = derive_seed(cfg.seed, rep);
      const auto started = Clock::now();
      std::size_t done = 0;
      CompensatedSum running;
      for (std::size_t cp : checkpoints) {
        parallel_for(cp - done, cfg.workers, [&](std::size_t j) {
          const std::size_t i = done + j;
          values[i] =
              functional.evaluate(solve_sde_mc(sde, x0, cfg.horizon, cfg.mc_steps, derive_seed(rep_seed, i)));
        });
        for (std::size_t i = done; i < cp; ++i) running.add(values[i]);
        done = cp;
        const double err = running.value() / static_cast<double>(cp) - result.oracle;
        sq_error[cp] += err * err;
        elapsed[cp] += seconds_since(started);
      }
    }
  }
  std::vector<ConvergenceRow> mc;
  const double reps = static_cast<double>(std::max<std::size_t>(cfg.replicates, 1));
  for (std::size_t cp : checkpoints) {
    mc.push_back({"mc", cp, std::sqrt(sq_error[cp] / reps), elapsed[cp] / reps, 0, 0.0});
  }

  // Slopes.
  std::vector<double> xs, ys;
  for (const auto& r : mc) {
    if (r.n >= cfg.mc_fit_min && r.n <= cfg.mc_fit_max &&
        std::find(cfg.mc_ns.begin(), cfg.mc_ns.end(), r.n) != cfg.mc_ns.end()) {
      xs.push_back(static_cast<double>(r.n));
      ys.push_back(r.error);
    }
  }
  if (xs.size() >= 2) result.mc_slope = loglog_slope(xs, ys);
  std::vector<double> cn, ce;
  for (const auto& r : cub) {
    cn.push_back(static_cast<double>(r.n));
    ce.push_back(r.error);
  }
  result.cubature_fit_points = pre_plateau_count(cn, ce);
  if (result.cubature_fit_points >= 2) {
    result.cubature_slope = loglog_slope(std::span(cn).first(result.cubature_fit_points),
                                         std::span(ce).first(result.cubature_fit_points));
  }

  // Matched-n dominance.
  result.cubature_dominates = true;
  for (const auto& r : cub) {
    auto it = std::find_if(mc.begin(), mc.end(), [&](const auto& m) { return m.n == r.n; });
    if (it == mc.end()) continue;
    ++result.matched_points;
    if (!(r.error <= it->error)) result.cubature_dominates = false;
  }

  result.rows = cub;
  result.rows.insert(result.rows.end(), mc.begin(), mc.end());
  return result;
}

}  // namespace wscub
