#pragma once

// Latent neural SDE with a variational loss: prior drift f, posterior drift
// f~ and a shared diagonal diffusion g(t). Gradients come from a reverse sweep
// through the fixed-step solvers (RK4 along cubature paths, Euler-Maruyama for
// Monte Carlo).

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "wscub/cubature_formulas.hpp"
#include "wscub/ode_engine.hpp"
#include "wscub/partition_paths.hpp"
#include "wscub/recombination.hpp"

namespace wscub {

/// Fully connected network: tanh hidden layers, linear output.
class Mlp {
 public:
  Mlp() = default;
  explicit Mlp(std::vector<std::size_t> sizes);

  const std::vector<std::size_t>& sizes() const noexcept { return sizes_; }
  std::size_t inputs() const noexcept { return sizes_.front(); }
  std::size_t outputs() const noexcept { return sizes_.back(); }
  std::size_t param_count() const noexcept { return param_count_; }
  /// Doubles needed to cache one forward pass.
  std::size_t cache_size() const noexcept { return cache_size_; }

  /// Glorot-uniform weights, zero biases.
  void initialize(std::span<double> params, std::mt19937_64& rng) const;

  /// cache (optional) receives the input and every hidden activation.
  void forward(const double* params, std::span<const double> in, std::span<double> out, double* cache) const;

  /// Adds d(out . gout)/dparams into gparams and writes d/din into gin (may be empty).
  void backward(const double* params, const double* cache, std::span<const double> gout, double* gparams,
                std::span<double> gin) const;

 private:
  std::vector<std::size_t> sizes_;
  std::size_t param_count_ = 0;
  std::size_t cache_size_ = 0;
};

struct NetworkSpec {
  std::size_t dim = 1;  // latent dimension = driving dimension
  std::size_t width = 16;
  std::size_t depth = 1;  // hidden layers
  double diffusion_scale = 1.0;
};

/// Parameter layout: [prior f | posterior f~ | diffusion g | z0].
/// f, f~: (t, z) -> R^d. g(t) = scale * softplus(MLP(t)), one entry per
/// component. z0 is the trainable initial state.
class NetworkFields {
 public:
  explicit NetworkFields(NetworkSpec spec);

  const NetworkSpec& spec() const noexcept { return spec_; }
  std::size_t dim() const noexcept { return spec_.dim; }
  std::size_t param_count() const noexcept { return total_; }
  const Mlp& prior() const noexcept { return prior_; }
  const Mlp& posterior() const noexcept { return posterior_; }
  const Mlp& diffusion_net() const noexcept { return diffusion_; }
  std::size_t prior_offset() const noexcept { return 0; }
  std::size_t posterior_offset() const noexcept { return prior_.param_count(); }
  std::size_t diffusion_offset() const noexcept { return posterior_offset() + posterior_.param_count(); }
  std::size_t z0_offset() const noexcept { return diffusion_offset() + diffusion_.param_count(); }

  std::vector<double> initial_parameters(std::uint64_t seed) const;

  void prior_drift(std::span<const double> theta, double t, std::span<const double> z, std::span<double> out) const;
  void posterior_drift(std::span<const double> theta, double t, std::span<const double> z,
                       std::span<double> out) const;
  void diffusion(std::span<const double> theta, double t, std::span<double> out) const;

  /// Stratonovich fields of the posterior SDE on the augmented state (t, z).
  /// The diffusion is state independent, so no Ito correction is needed.
  VectorFieldSet posterior_fields(std::vector<double> theta) const;

 private:
  NetworkSpec spec_;
  Mlp prior_, posterior_, diffusion_;
  std::size_t total_ = 0;
};

struct VariationalLossSpec {
  std::vector<double> obs_times;
  std::vector<double> obs;  // obs_times.size() x d, row-major
  double obs_noise = 0.5;
  double kl_weight = 1.0;
  double horizon = 1.0;
};

/// ELBO of one latent path: trapezoid reconstruction log-density on the
/// observation grid (trajectory interpolated linearly) minus kl_weight times
/// 1/2 int |(f - f~) / g|^2 dt on the trajectory grid. Throws
/// SingularDiffusion when |g| < 1e-10 anywhere on the grid; with kl_weight 0
/// the mismatch term is skipped and g may vanish.
double variational_loss(const NetworkFields& net, std::span<const double> theta, const Trajectory& trajectory,
                        const VariationalLossSpec& spec);

struct VariationalTerms {
  double reconstruction = 0.0;
  double kl = 0.0;  // 1/2 int |(f - f~)/g|^2, before weighting
};
VariationalTerms variational_terms(const NetworkFields& net, std::span<const double> theta,
                                   const Trajectory& trajectory, const VariationalLossSpec& spec);

/// Objective = -(weighted mean ELBO) and its gradient.
struct LossAndGradient {
  double loss = 0.0;
  std::vector<double> gradient;
  std::size_t paths = 0;
  std::size_t tape_bytes = 0;  // tapes and accumulators of the pass
};

LossAndGradient loss_and_gradient_cubature(const NetworkFields& net, std::span<const double> theta,
                                           const VariationalLossSpec& spec, const CubatureFormula& formula,
                                           const TimePartition& partition, const std::vector<WeightedLeaf>& leaves,
                                           int steps_per_segment, std::size_t workers = 1);

/// Checks the table against formula and partition, then uses its leaves.
LossAndGradient loss_and_gradient_cubature(const NetworkFields& net, std::span<const double> theta,
                                           const VariationalLossSpec& spec, const CubatureFormula& formula,
                                           const TimePartition& partition, const WeightTable& table,
                                           int steps_per_segment, std::size_t workers = 1);

/// Path i draws its increments from derive_seed(seed, i).
LossAndGradient loss_and_gradient_mc(const NetworkFields& net, std::span<const double> theta,
                                     const VariationalLossSpec& spec, std::size_t paths, std::size_t steps,
                                     std::uint64_t seed, std::size_t workers = 1);

/// Seeded Ornstein-Uhlenbeck data dy = rate (level - y) dt + vol dW observed on
/// a uniform grid of `points` times over [0, horizon].
struct OuDataConfig {
  std::size_t dim = 1;
  std::size_t points = 51;
  double horizon = 1.0;
  double rate = 2.0;
  double level = 1.0;
  double vol = 0.3;
  double start = 2.0;
  std::size_t fine_steps = 2000;
  std::uint64_t seed = 7;
};
VariationalLossSpec make_ou_data(const OuDataConfig& config, double obs_noise, double kl_weight);
std::string data_csv(const VariationalLossSpec& spec);

struct TrainConfig {
  NetworkSpec network;
  OuDataConfig data;
  double obs_noise = 0.5;
  double kl_weight = 1.0;

  int degree = 3;
  int k = 5;
  double gamma = 0.6;
  bool recombine = true;
  int basis_degree = 4;
  double p_star = 1.0;
  int steps_per_segment = 2;

  std::size_t mc_paths = 0;  // 0 = match the cubature path count
  std::size_t mc_steps = 100;
  bool mc_resample = true;   // fresh noise every epoch

  double learning_rate = 1e-2;
  std::size_t epochs = 200;
  std::uint64_t seed = 1;
  std::size_t workers = 1;
  bool run_cubature = true;
  bool run_mc = true;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::string arm;
  double loss = 0.0;
  double seconds = 0.0;
  std::size_t peak_bytes = 0;
};

struct TrainResult {
  std::vector<EpochRecord> log;
  std::vector<double> initial_parameters;
  std::vector<double> cubature_parameters;
  std::vector<double> mc_parameters;
  std::size_t cubature_paths = 0;
  std::size_t mc_paths = 0;
  VariationalLossSpec data;

  std::string log_csv() const;  // epoch,arm,loss,seconds,peak_bytes
  std::vector<double> losses(const std::string& arm) const;
  double mean_seconds(const std::string& arm) const;
};

/// Plain gradient descent for both arms from the same initial parameters.
/// Throws DivergenceDetected when a loss exceeds 1e6.
TrainResult train(const TrainConfig& config);

std::string parameters_json(const NetworkFields& net, std::span<const double> theta);

}  // namespace wscub
