#include <doctest.h>

#include <cmath>
#include <numbers>

#include "wscub/error.hpp"
#include "wscub/estimator.hpp"
#include "wscub/numeric.hpp"

using namespace wscub;

namespace {

Trajectory on_grid(const std::function<double(double)>& x, std::size_t steps) {
  Trajectory traj(2);
  for (std::size_t i = 0; i <= steps; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(steps);
    const std::vector<double> s{t, x(t)};
    traj.push(t, s);
  }
  return traj;
}

const AffineScalarSde kBrownian{0.0, 0.0, 0.0, 1.0, 0.0};

}  // namespace

TEST_CASE("sine tracking functional closed forms") {
  const auto f = sine_tracking_functional();
  CHECK(f.evaluate(on_grid([](double) { return 0.0; }, 200)) == doctest::Approx(0.5).epsilon(1e-13));
  CHECK(std::abs(f.evaluate(on_grid([](double t) { return std::sin(2 * std::numbers::pi * t); }, 200))) < 1e-15);
  CHECK(f.evaluate(on_grid([](double) { return 1.0; }, 200)) == doctest::Approx(1.5).epsilon(1e-13));
}

TEST_CASE("terminal functionals read the final spatial state") {
  const auto traj = on_grid([](double t) { return 3 * t - 1; }, 10);
  CHECK(functional_by_name("terminal_mean").evaluate(traj) == doctest::Approx(2.0));
  CHECK(functional_by_name("terminal_square").evaluate(traj) == doctest::Approx(4.0));
  CHECK(functional_by_name("terminal_abs").evaluate(on_grid([](double t) { return -t; }, 4)) == 1.0);
  CHECK_THROWS_AS(functional_by_name("nope"), Error);
}

TEST_CASE("raw two-interval tree gives E[B_1^2] = 1") {
  const auto formula = degree3_formula(1);
  const auto partition = make_partition(1.0, 2, 0.6);
  const auto fields = stratonovich_fields(kBrownian);
  const std::vector<double> x0{0.0, 0.0};
  const auto sq = functional_by_name("terminal_square");
  OdeConfig ode;
  ode.steps_per_segment = 4;
  const auto raw = cubature_estimate_raw(sq, fields, formula, partition, x0, ode);
  CHECK(raw.n == 4);
  CHECK(raw.value == doctest::Approx(1.0).epsilon(1e-14));
  const auto table = preprocess(formula, partition, PreprocessOptions{}, 0.6);
  const auto est = cubature_estimate(sq, fields, formula, partition, table, x0, ode);
  CHECK(est.value == raw.value);
}

TEST_CASE("recombined table equals the exhaustive sum when nothing merges") {
  const auto formula = degree5_formula(1);
  const auto partition = make_partition(1.0, 3, 0.6);
  PreprocessOptions opts;
  opts.radii = std::vector<double>{1e-9, 1e-9, 1e-9};
  const auto table = preprocess(formula, partition, opts, 0.6);
  const AffineScalarSde model{0.5, 0.0, 0.5, 0.5, 0.0};
  const auto fields = stratonovich_fields(model);
  const std::vector<double> x0{0.0, 0.0};
  const auto f = sine_tracking_functional();
  OdeConfig ode;
  ode.steps_per_segment = 8;
  const auto a = cubature_estimate(f, fields, formula, partition, table, x0, ode);
  const auto b = cubature_estimate_raw(f, fields, formula, partition, x0, ode);
  CHECK(a.n == 27);
  CHECK(std::abs(a.value - b.value) <= 1e-12);
}

TEST_CASE("weighted sum equals the kept contributions") {
  const auto formula = degree5_formula(1);
  const auto partition = make_partition(1.0, 6, 0.6);
  const auto table = preprocess(formula, partition, PreprocessOptions{}, 0.6);
  const auto fields = stratonovich_fields({0.5, 0.0, 0.5, 0.5, 0.0});
  const std::vector<double> x0{0.0, 0.0};
  OdeConfig ode;
  ode.steps_per_segment = 4;
  ode.keep_contributions = true;
  ode.workers = 3;
  const auto est = cubature_estimate(sine_tracking_functional(), fields, formula, partition, table, x0, ode);
  REQUIRE(est.contributions.size() == est.n);
  CHECK(est.value == doctest::Approx(compensated_sum(est.contributions)).epsilon(1e-12));
  ode.workers = 1;
  CHECK(cubature_estimate(sine_tracking_functional(), fields, formula, partition, table, x0, ode).value ==
        est.value);
}

TEST_CASE("an empty table estimates zero with no solves") {
  const auto formula = degree3_formula(1);
  const auto partition = make_partition(1.0, 2, 0.6);
  auto manifest = raw_weight_table(formula, partition).manifest();
  const WeightTable empty(manifest, {{}, {}});
  const std::vector<double> x0{0.0, 0.0};
  const auto est = cubature_estimate(sine_tracking_functional(), stratonovich_fields(kBrownian), formula,
                                     partition, empty, x0, OdeConfig{});
  CHECK(est.value == 0.0);
  CHECK(est.n == 0);
}

TEST_CASE("a table built for another partition is rejected") {
  const auto formula = degree3_formula(1);
  const auto table = raw_weight_table(formula, make_partition(1.0, 3, 0.6));
  const std::vector<double> x0{0.0, 0.0};
  try {
    cubature_estimate(sine_tracking_functional(), stratonovich_fields(kBrownian), formula,
                      make_partition(1.0, 3, 0.5), table, x0, OdeConfig{});
    FAIL("expected ManifestMismatch");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kManifestMismatch);
  }
}

TEST_CASE("degree-3 cubature is exact for the mean of an Ornstein-Uhlenbeck process") {
  // Constant diffusion and linear drift make X_1 linear in the driving path.
  const AffineScalarSde ou{-1.0, 0.3, 0.0, 0.4, 0.5};
  const auto formula = degree3_formula(1);
  const auto partition = make_partition(1.0, 1, 0.6);
  const std::vector<double> x0{0.0, 0.5};
  OdeConfig ode;
  ode.steps_per_segment = 64;
  const auto est = cubature_estimate_raw(functional_by_name("terminal_mean"), stratonovich_fields(ou), formula,
                                         partition, x0, ode);
  // m1' = -m1 + 0.3, m1(0) = 0.5.
  CHECK(est.value == doctest::Approx(0.3 + 0.2 * std::exp(-1.0)).epsilon(1e-9));
}

TEST_CASE("affine oracle against an independent high-accuracy integration") {
  // Moment equations integrated with an adaptive order-8 Runge-Kutta at
  // rtol 1e-13; values frozen here.
  const AffineScalarSde m1{0.5, 0.0, 0.5, 0.5, 0.0};
  CHECK(*affine_oracle(m1, "sine_tracking", 1.0) == doctest::Approx(0.6984548731938953).epsilon(1e-11));
  CHECK(*affine_oracle(m1, "terminal_square", 1.0) == doctest::Approx(0.49806859149236826).epsilon(1e-11));
  const AffineScalarSde m2{-1.0, 0.3, 0.2, 0.4, 0.5};
  CHECK(*affine_oracle(m2, "sine_tracking", 1.0) == doctest::Approx(0.7122050542506424).epsilon(1e-11));
  CHECK(*affine_oracle(m2, "terminal_mean", 1.0) == doctest::Approx(0.37357588823428844).epsilon(1e-11));
  CHECK(*affine_oracle(m2, "terminal_square", 1.0) == doctest::Approx(0.2412345657576463).epsilon(1e-11));
  CHECK(*affine_oracle(kBrownian, "sine_tracking", 1.0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_FALSE(affine_oracle(kBrownian, "terminal_abs", 1.0).has_value());
}

TEST_CASE("monte carlo estimate of the sine functional for brownian motion") {
  const auto est = mc_estimate(sine_tracking_functional(), to_ito(kBrownian), std::vector<double>{0.0}, 1.0, 100,
                               100000, 11, 0);
  CHECK(est.n == 100000);
  CHECK(std::abs(est.value - 1.0) < 0.02);
  CHECK(est.std_error > 0.0);
  const auto again = mc_estimate(sine_tracking_functional(), to_ito(kBrownian), std::vector<double>{0.0}, 1.0,
                                 100, 100000, 11, 1);
  CHECK(again.value == est.value);
}

TEST_CASE("monte carlo without noise follows the Euler path") {
  const AffineScalarSde quiet{0.5, 0.2, 0.0, 0.0, 1.0};
  const auto est =
      mc_estimate(functional_by_name("terminal_mean"), to_ito(quiet), std::vector<double>{1.0}, 1.0, 10, 1, 3);
  double x = 1.0;
  for (int i = 0; i < 10; ++i) x += (0.5 * x + 0.2) * 0.1;
  CHECK(est.value == doctest::Approx(x).epsilon(1e-14));
}

TEST_CASE("pre-plateau point count") {
  CHECK(pre_plateau_count({1, 2, 4, 8}, {1.0, 0.5, 0.25, 0.125}) == 4);
  CHECK(pre_plateau_count({1, 2, 4, 8}, {1.0, 0.5, 0.49, 0.1}) == 2);
  CHECK(pre_plateau_count({1, 2, 4, 8}, {1.0, 1.0, 0.1, 0.1}) == 2);
  CHECK(pre_plateau_count({1, 2, 4}, {1.0, 0.5, 0.2}) == 3);
}

TEST_CASE("convergence experiment on a small sweep") {
  ConvergenceConfig cfg;
  cfg.model = kBrownian;
  cfg.functional = "terminal_square";
  cfg.ks = {2, 3, 4};
  cfg.mc_ns = {10, 100, 1000};
  cfg.replicates = 4;
  cfg.mc_steps = 10;
  const auto r = convergence_experiment(cfg);
  CHECK(r.oracle == doctest::Approx(1.0));
  // Terminal moments of degree <= 5 are matched exactly by the degree-5 tree;
  // what remains is roundoff in the oracle's moment integration.
  for (const auto& row : r.rows) {
    if (row.method == "cubature") CHECK(row.error < 1e-10);
  }
  CHECK(r.matched_points >= 1);
  CHECK(r.cubature_dominates);
  CHECK(r.to_csv().rfind("method,n,error,seconds\n", 0) == 0);
  cfg.functional = "terminal_abs";
  try {
    convergence_experiment(cfg);
    FAIL("expected OracleUnavailable");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kOracleUnavailable);
  }
}
