#include <doctest.h>

#include <cmath>
#include <numbers>

#include "wscub/error.hpp"
#include "wscub/training.hpp"

using namespace wscub;

namespace {

VariationalLossSpec small_data(std::size_t dim) {
  OuDataConfig cfg;
  cfg.dim = dim;
  cfg.points = 11;
  cfg.fine_steps = 200;
  return make_ou_data(cfg, 0.5, 1.0);
}

NetworkFields small_net(std::size_t dim = 1) { return NetworkFields({dim, 4, 2, 1.0}); }

// Largest per-coordinate relative error between the reverse gradient and
// central differences with step 1e-4. Coordinates whose gradient is below
// `floor` in magnitude are compared against `floor`.
template <class LossFn>
double gradient_error(const std::vector<double>& theta, const std::vector<double>& grad, LossFn&& loss,
                      double floor = 1e-6) {
  double worst = 0.0;
  std::vector<double> x = theta;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double h = 1e-4;
    x[i] = theta[i] + h;
    const double up = loss(x);
    x[i] = theta[i] - h;
    const double down = loss(x);
    x[i] = theta[i];
    const double fd = (up - down) / (2 * h);
    const double denom = std::max({std::abs(fd), std::abs(grad[i]), floor});
    worst = std::max(worst, std::abs(fd - grad[i]) / denom);
  }
  return worst;
}

}  // namespace

TEST_CASE("mlp sizes and output bias with zero hidden weights") {
  const Mlp mlp({2, 4, 4, 3});
  CHECK(mlp.param_count() == 4 * 3 + 4 * 5 + 3 * 5);
  CHECK(mlp.cache_size() == 2 + 4 + 4);
  std::vector<double> p(mlp.param_count(), 0.0);
  // Output layer bias sits at the very end.
  p[p.size() - 3] = 0.5;
  p[p.size() - 2] = -1.0;
  p[p.size() - 1] = 2.0;
  std::vector<double> out(3);
  const double in[2] = {0.3, -7.0};
  mlp.forward(p.data(), in, out, nullptr);
  CHECK(out[0] == 0.5);
  CHECK(out[1] == -1.0);
  CHECK(out[2] == 2.0);
}

TEST_CASE("mlp backward matches finite differences") {
  const Mlp mlp({3, 5, 2});
  std::mt19937_64 rng(3);
  std::vector<double> p(mlp.param_count());
  mlp.initialize(p, rng);
  for (double& v : p) v += 0.1;  // non-zero biases
  const std::vector<double> x{0.2, -0.4, 0.9};
  const std::vector<double> gout{0.7, -1.3};
  auto value = [&](const std::vector<double>& params, const std::vector<double>& in) {
    std::vector<double> out(2);
    mlp.forward(params.data(), in, out, nullptr);
    return out[0] * gout[0] + out[1] * gout[1];
  };
  std::vector<double> cache(mlp.cache_size()), out(2), gp(p.size(), 0.0), gin(3);
  mlp.forward(p.data(), x, out, cache.data());
  mlp.backward(p.data(), cache.data(), gout, gp.data(), gin);
  CHECK(gradient_error(p, gp, [&](const std::vector<double>& q) { return value(q, x); }) < 1e-7);
  CHECK(gradient_error(x, gin, [&](const std::vector<double>& y) { return value(p, y); }) < 1e-7);
}

TEST_CASE("parameter layout covers every block once") {
  const NetworkFields net({3, 8, 1, 1.0});
  CHECK(net.posterior_offset() == net.prior().param_count());
  CHECK(net.z0_offset() + 3 == net.param_count());
  CHECK(net.prior().inputs() == 4);
  CHECK(net.diffusion_net().inputs() == 1);
  CHECK(net.initial_parameters(5) == net.initial_parameters(5));
  CHECK(net.initial_parameters(5) != net.initial_parameters(6));
}

TEST_CASE("reconstruction term of a path equal to the data") {
  const std::size_t d = 2;
  const NetworkFields net({d, 4, 1, 1.0});
  std::vector<double> theta = net.initial_parameters(1);
  // Identical prior and posterior make the drift mismatch vanish.
  std::copy(theta.begin() + net.posterior_offset(), theta.begin() + net.diffusion_offset(),
            theta.begin() + net.prior_offset());
  auto spec = small_data(d);
  spec.obs_noise = 1.0;
  Trajectory traj(d + 1);
  for (std::size_t m = 0; m < spec.obs_times.size(); ++m) {
    std::vector<double> x{spec.obs_times[m], spec.obs[m * d], spec.obs[m * d + 1]};
    traj.push(spec.obs_times[m], x);
  }
  const auto terms = variational_terms(net, theta, traj, spec);
  CHECK(terms.kl == 0.0);
  CHECK(terms.reconstruction == doctest::Approx(-0.5 * d * std::log(2 * std::numbers::pi)).epsilon(1e-14));
  CHECK(variational_loss(net, theta, traj, spec) == doctest::Approx(terms.reconstruction).epsilon(1e-14));
}

TEST_CASE("vanishing diffusion is rejected") {
  const NetworkFields net = small_net();
  std::vector<double> theta = net.initial_parameters(1);
  // Drive the diffusion output to softplus(-1000) = 0.
  const std::size_t last_bias = net.z0_offset() - 1;
  theta[last_bias] = -1000.0;
  const auto spec = small_data(1);
  const auto formula = degree3_formula(1);
  const auto partition = make_partition(1.0, 2, 0.6);
  const auto table = raw_weight_table(formula, partition);
  try {
    loss_and_gradient_cubature(net, theta, spec, formula, partition, table, 2);
    FAIL("expected SingularDiffusion");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kSingularDiffusion);
  }
  CHECK_THROWS_AS(loss_and_gradient_mc(net, theta, spec, 4, 10, 1), Error);
}

TEST_CASE("cubature loss equals the weighted ELBO of the solved paths") {
  const NetworkFields net = small_net();
  const auto theta = net.initial_parameters(11);
  const auto spec = small_data(1);
  const auto formula = degree5_formula(1);
  const auto partition = make_partition(1.0, 3, 0.6);
  const auto table = raw_weight_table(formula, partition);
  const auto lg = loss_and_gradient_cubature(net, theta, spec, formula, partition, table, 3);
  const auto fields = net.posterior_fields(theta);
  double expected = 0.0;
  for (const auto& leaf : table.leaves()) {
    const auto path = concat_path(formula, partition, leaf.index).path;
    const std::vector<double> x0{0.0, theta[net.z0_offset()]};
    const auto traj = solve_controlled_ode(fields, path, x0, 3);
    expected -= leaf.weight * variational_loss(net, theta, traj, spec);
  }
  CHECK(lg.paths == 27);
  CHECK(lg.loss == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("gradients match finite differences on random small networks") {
  const NetworkFields net = small_net();
  const auto spec = small_data(1);
  const auto formula = degree3_formula(1);
  const auto partition = make_partition(1.0, 3, 0.6);
  const auto table = raw_weight_table(formula, partition);
  double worst_cub = 0.0, worst_mc = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto theta = net.initial_parameters(seed);
    const auto cub = loss_and_gradient_cubature(net, theta, spec, formula, partition, table, 2);
    worst_cub = std::max(worst_cub, gradient_error(theta, cub.gradient, [&](const std::vector<double>& x) {
      return loss_and_gradient_cubature(net, x, spec, formula, partition, table, 2).loss;
    }));
    const auto mc = loss_and_gradient_mc(net, theta, spec, 4, 20, seed);
    worst_mc = std::max(worst_mc, gradient_error(theta, mc.gradient, [&](const std::vector<double>& x) {
      return loss_and_gradient_mc(net, x, spec, 4, 20, seed).loss;
    }));
  }
  MESSAGE("worst relative gradient error: cubature " << worst_cub << ", mc " << worst_mc);
  CHECK(worst_cub <= 1e-5);
  CHECK(worst_mc <= 1e-5);
}

TEST_CASE("gradient check in several dimensions with a recombined table") {
  const NetworkFields net = small_net(2);
  const auto spec = small_data(2);
  const auto formula = degree3_formula(2);
  const auto partition = make_partition(1.0, 3, 0.6);
  const auto table = preprocess(formula, partition, PreprocessOptions{2, 1.0, {}}, 0.6);
  const auto theta = net.initial_parameters(9);
  const auto cub = loss_and_gradient_cubature(net, theta, spec, formula, partition, table, 2);
  CHECK(gradient_error(theta, cub.gradient, [&](const std::vector<double>& x) {
          return loss_and_gradient_cubature(net, x, spec, formula, partition, table, 2).loss;
        }) <= 1e-5);
}

TEST_CASE("results do not depend on the worker count") {
  const NetworkFields net = small_net();
  const auto theta = net.initial_parameters(2);
  const auto spec = small_data(1);
  const auto formula = degree3_formula(1);
  const auto partition = make_partition(1.0, 6, 0.6);
  const auto table = raw_weight_table(formula, partition);
  const auto a = loss_and_gradient_cubature(net, theta, spec, formula, partition, table, 2, 1);
  const auto b = loss_and_gradient_cubature(net, theta, spec, formula, partition, table, 2, 4);
  CHECK(a.loss == b.loss);
  CHECK(a.gradient == b.gradient);
  const auto c = loss_and_gradient_mc(net, theta, spec, 100, 20, 5, 1);
  const auto e = loss_and_gradient_mc(net, theta, spec, 100, 20, 5, 3);
  CHECK(c.loss == e.loss);
  CHECK(c.gradient == e.gradient);
  CHECK(loss_and_gradient_mc(net, theta, spec, 100, 20, 6, 1).loss != c.loss);
}

TEST_CASE("mismatched tables and dimensions are rejected") {
  const NetworkFields net = small_net();
  const auto theta = net.initial_parameters(2);
  const auto spec = small_data(1);
  const auto formula = degree3_formula(1);
  const auto table = raw_weight_table(formula, make_partition(1.0, 3, 0.6));
  CHECK_THROWS_AS(loss_and_gradient_cubature(net, theta, spec, formula, make_partition(1.0, 4, 0.6), table, 2),
                  Error);
  const auto formula2 = degree3_formula(2);
  const auto p2 = make_partition(1.0, 2, 0.6);
  CHECK_THROWS_AS(
      loss_and_gradient_cubature(net, theta, spec, formula2, p2, raw_weight_table(formula2, p2), 2), Error);
  std::vector<double> short_theta(theta.begin(), theta.end() - 1);
  CHECK_THROWS_AS(loss_and_gradient_mc(net, short_theta, spec, 4, 10, 1), Error);
}

TEST_CASE("ou data is seeded and starts at the configured value") {
  OuDataConfig cfg;
  cfg.dim = 3;
  const auto a = make_ou_data(cfg, 0.5, 1.0);
  const auto b = make_ou_data(cfg, 0.5, 1.0);
  CHECK(a.obs == b.obs);
  CHECK(a.obs_times.size() == 51);
  CHECK(a.obs_times.back() == 1.0);
  CHECK(a.obs[0] == 2.0);
  cfg.seed = 8;
  CHECK(make_ou_data(cfg, 0.5, 1.0).obs != a.obs);
  CHECK(data_csv(a).rfind("t,y0,y1,y2\n", 0) == 0);
}

TEST_CASE("training with zero learning rate keeps the cubature loss fixed") {
  TrainConfig cfg;
  cfg.network = {1, 4, 1, 1.0};
  cfg.data.points = 11;
  cfg.data.fine_steps = 200;
  cfg.k = 3;
  cfg.epochs = 3;
  cfg.learning_rate = 0.0;
  cfg.mc_resample = false;
  const auto r = train(cfg);
  const auto cub = r.losses("cubature");
  const auto mc = r.losses("mc");
  REQUIRE(cub.size() == 3);
  CHECK(cub[0] == cub[1]);
  CHECK(cub[1] == cub[2]);
  CHECK(mc[0] == mc[2]);
  CHECK(r.cubature_parameters == r.initial_parameters);
  CHECK(r.mc_paths == r.cubature_paths);
  CHECK(r.log_csv().rfind("epoch,arm,loss,seconds,peak_bytes\n", 0) == 0);
}

TEST_CASE("short training lowers both losses") {
  TrainConfig cfg;
  cfg.network = {1, 8, 1, 1.0};
  cfg.k = 4;
  cfg.epochs = 40;
  const auto r = train(cfg);
  const auto cub = r.losses("cubature");
  const auto mc = r.losses("mc");
  CHECK(cub.back() < 0.7 * cub.front());
  CHECK(mc.back() < 0.7 * mc.front());
}

TEST_CASE("exploding learning rate is reported as divergence") {
  TrainConfig cfg;
  cfg.network = {1, 4, 1, 1.0};
  cfg.k = 3;
  cfg.epochs = 50;
  cfg.learning_rate = 50.0;
  cfg.run_mc = false;
  try {
    train(cfg);
    FAIL("expected divergence");
  } catch (const Error& e) {
    const bool expected = e.kind() == ErrorKind::kDivergenceDetected || e.kind() == ErrorKind::kNonFiniteState ||
                          e.kind() == ErrorKind::kNonFiniteGradient;
    CHECK(expected);
  }
}

TEST_CASE("parameters serialize with their layout") {
  const NetworkFields net = small_net();
  const auto theta = net.initial_parameters(4);
  const auto js = parameters_json(net, theta);
  CHECK(js.find("\"posterior\"") != std::string::npos);
  CHECK(js.find("\"parameters\"") != std::string::npos);
}

TEST_CASE("doubling the diffusion scales the mismatch term by a quarter") {
  const auto spec = small_data(1);
  const NetworkFields a({1, 4, 1, 1.0});
  const NetworkFields b({1, 4, 1, 2.0});
  const auto theta = a.initial_parameters(3);
  Trajectory traj(2);
  for (int i = 0; i <= 20; ++i) {
    const std::vector<double> x{i / 20.0, std::sin(i / 5.0)};
    traj.push(x[0], x);
  }
  const auto ta = variational_terms(a, theta, traj, spec);
  const auto tb = variational_terms(b, theta, traj, spec);
  CHECK(ta.kl > 0.0);
  CHECK(tb.kl == doctest::Approx(ta.kl / 4).epsilon(1e-14));
  CHECK(tb.reconstruction == ta.reconstruction);
}

TEST_CASE("gradient is linear in the leaf weights") {
  const NetworkFields net = small_net();
  const auto theta = net.initial_parameters(8);
  const auto spec = small_data(1);
  const auto formula = degree3_formula(1);
  const auto partition = make_partition(1.0, 3, 0.6);
  auto leaves = raw_weight_table(formula, partition).leaves();
  const auto base = loss_and_gradient_cubature(net, theta, spec, formula, partition, leaves, 2);
  for (auto& l : leaves) l.weight *= 2;
  const auto twice = loss_and_gradient_cubature(net, theta, spec, formula, partition, leaves, 2);
  CHECK(twice.loss == doctest::Approx(2 * base.loss).epsilon(1e-14));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    CHECK(twice.gradient[i] == doctest::Approx(2 * base.gradient[i]).epsilon(1e-12));
  }
  for (auto& l : leaves) l.weight = 0.0;
  const auto zero = loss_and_gradient_cubature(net, theta, spec, formula, partition, leaves, 2);
  CHECK(zero.loss == 0.0);
  CHECK(zero.paths == 0);
  for (double g : zero.gradient) CHECK(g == 0.0);
}

TEST_CASE("zero diffusion makes both arms deterministic and equal") {
  const NetworkFields net = small_net();
  std::vector<double> theta = net.initial_parameters(4);
  theta[net.z0_offset() - 1] = -1000.0;  // softplus(-1000) == 0
  auto spec = small_data(1);
  spec.kl_weight = 0.0;
  const auto formula = degree3_formula(1);
  const auto partition = make_partition(1.0, 4, 0.6);
  const auto table = raw_weight_table(formula, partition);
  // 64 RK4 steps per interval are exact to ~1e-9 here; the gap to Euler is
  // first order, so it must roughly halve when the Euler grid doubles.
  const auto cub = loss_and_gradient_cubature(net, theta, spec, formula, partition, table, 64);
  const auto m1 = loss_and_gradient_mc(net, theta, spec, 3, 2000, 1);
  const auto m2 = loss_and_gradient_mc(net, theta, spec, 3, 2000, 99);
  const auto fine = loss_and_gradient_mc(net, theta, spec, 3, 4000, 5);
  CHECK(m1.loss == doctest::Approx(m2.loss).epsilon(1e-13));
  CHECK(m1.gradient == m2.gradient);
  auto gap = [&](const LossAndGradient& mc) {
    double worst = std::abs(cub.loss - mc.loss);
    for (std::size_t i = 0; i < theta.size(); ++i) worst = std::max(worst, std::abs(cub.gradient[i] - mc.gradient[i]));
    return worst;
  };
  const double coarse_gap = gap(m1), fine_gap = gap(fine);
  MESSAGE("cubature vs euler gap: " << coarse_gap << " at 2000 steps, " << fine_gap << " at 4000");
  CHECK(coarse_gap < 2e-3);
  CHECK(fine_gap / coarse_gap == doctest::Approx(0.5).epsilon(0.1));
}

TEST_CASE("mc gradients differ between seeds") {
  const NetworkFields net = small_net();
  const auto theta = net.initial_parameters(4);
  const auto spec = small_data(1);
  CHECK(loss_and_gradient_mc(net, theta, spec, 8, 20, 1).gradient !=
        loss_and_gradient_mc(net, theta, spec, 8, 20, 2).gradient);
}

TEST_CASE("cubature training log is reproducible") {
  TrainConfig cfg;
  cfg.network = {1, 4, 1, 1.0};
  cfg.k = 3;
  cfg.epochs = 5;
  cfg.run_mc = false;
  const auto a = train(cfg);
  const auto b = train(cfg);
  CHECK(a.losses("cubature") == b.losses("cubature"));
  CHECK(a.cubature_parameters == b.cubature_parameters);
}
