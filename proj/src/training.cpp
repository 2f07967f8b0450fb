#include "wscub/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <json.hpp>
#include <memory>
#include <numbers>
#include <sstream>

#include "wscub/error.hpp"
#include "wscub/numeric.hpp"

namespace wscub {

namespace {

constexpr double kMinDiffusion = 1e-10;
constexpr double kDivergenceLoss = 1e6;

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void check_theta(const NetworkFields& net, std::span<const double> theta) {
  if (theta.size() != net.param_count()) {
    throw Error(ErrorKind::kDimensionMismatch, "parameter vector has " + std::to_string(theta.size()) +
                                                   " entries, expected " + std::to_string(net.param_count()));
  }
}

void check_spec(const NetworkFields& net, const VariationalLossSpec& spec) {
  const std::size_t d = net.dim();
  if (spec.obs_times.size() < 2) throw Error(ErrorKind::kInvalidParameter, "need at least two observation times");
  if (spec.obs.size() != spec.obs_times.size() * d) {
    throw Error(ErrorKind::kDimensionMismatch, "observations do not match the latent dimension");
  }
  if (!(spec.obs_noise > 0.0)) throw Error(ErrorKind::kInvalidParameter, "observation noise must be positive");
  if (!(spec.kl_weight >= 0.0)) throw Error(ErrorKind::kInvalidParameter, "kl weight must be non-negative");
  if (!(spec.horizon > 0.0)) throw Error(ErrorKind::kInvalidParameter, "horizon must be positive");
  for (std::size_t m = 0; m < spec.obs_times.size(); ++m) {
    const double t = spec.obs_times[m];
    if (t < -1e-12 || t > spec.horizon + 1e-12 || (m > 0 && !(t > spec.obs_times[m - 1]))) {
      throw Error(ErrorKind::kInvalidParameter, "observation times must increase inside [0, horizon]");
    }
  }
}

// Diffusion network evaluated once per distinct solver time.
struct DiffusionGrid {
  std::size_t d = 0;
  std::vector<double> times;
  std::vector<double> g;      // times x d
  std::vector<double> slope;  // dg/d(raw output)
  std::vector<double> cache;  // times x cache_size

  // g is only inverted by the drift-mismatch term, so a zero diffusion is
  // accepted when that term is switched off.
  void build(const NetworkFields& net, std::span<const double> theta, std::vector<double> ts, bool invertible) {
    d = net.dim();
    times = std::move(ts);
    const Mlp& mlp = net.diffusion_net();
    const double scale = net.spec().diffusion_scale;
    g.assign(times.size() * d, 0.0);
    slope.assign(times.size() * d, 0.0);
    cache.assign(times.size() * mlp.cache_size(), 0.0);
    std::vector<double> raw(d);
    const double* p = theta.data() + net.diffusion_offset();
    for (std::size_t i = 0; i < times.size(); ++i) {
      const double in[1] = {times[i]};
      mlp.forward(p, in, raw, cache.data() + i * mlp.cache_size());
      for (std::size_t c = 0; c < d; ++c) {
        const double v = scale * softplus(raw[c]);
        if (invertible && !(std::abs(v) >= kMinDiffusion)) {
          throw Error(ErrorKind::kSingularDiffusion, "diffusion " + format_double17(v) + " at t = " +
                                                         format_double17(times[i]));
        }
        g[i * d + c] = v;
        slope[i * d + c] = scale * sigmoid(raw[c]);
      }
    }
  }
  const double* at(std::size_t i) const { return g.data() + i * d; }

  // gbar holds dJ/dg per time; adds the parameter gradient.
  void backward(const NetworkFields& net, std::span<const double> theta, std::span<const double> gbar,
                std::span<double> grad) const {
    const Mlp& mlp = net.diffusion_net();
    const double* p = theta.data() + net.diffusion_offset();
    double* gp = grad.data() + net.diffusion_offset();
    std::vector<double> go(d);
    for (std::size_t i = 0; i < times.size(); ++i) {
      bool any = false;
      for (std::size_t c = 0; c < d; ++c) {
        go[c] = gbar[i * d + c] * slope[i * d + c];
        any = any || go[c] != 0.0;
      }
      if (any) mlp.backward(p, cache.data() + i * mlp.cache_size(), go, gp, {});
    }
  }
};

// Where each observation time falls on a solver grid.
struct ObsMap {
  std::vector<std::size_t> node;
  std::vector<double> frac;
  std::vector<double> weight;
};

ObsMap map_observations(const VariationalLossSpec& spec, const std::vector<double>& grid) {
  ObsMap m;
  m.weight = trapezoid_weights(spec.obs_times);
  for (double t : spec.obs_times) {
    auto it = std::upper_bound(grid.begin(), grid.end(), t);
    std::size_t n = it == grid.begin() ? 0 : static_cast<std::size_t>(it - grid.begin()) - 1;
    n = std::min(n, grid.size() - 2);
    const double a = std::clamp((t - grid[n]) / (grid[n + 1] - grid[n]), 0.0, 1.0);
    m.node.push_back(n);
    m.frac.push_back(a);
  }
  return m;
}

// Shared pieces of one path's objective -R + beta K on a solver grid.
// Z holds the node states; fp/fq the prior and posterior drifts at the nodes.
struct LossContext {
  const NetworkFields* net;
  std::span<const double> theta;
  const VariationalLossSpec* spec;
  const ObsMap* obs;
  std::vector<double> kl_weights;  // trapezoid weights on the solver grid
  const DiffusionGrid* diff;
  std::vector<std::size_t> node_g;  // diffusion index of each node
};

double path_objective(const LossContext& ctx, const std::vector<double>& Z, const std::vector<double>& fp,
                      const std::vector<double>& fq) {
  const std::size_t d = ctx.net->dim();
  const auto& spec = *ctx.spec;
  const double var = spec.obs_noise * spec.obs_noise;
  const double norm = 0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi * var);
  CompensatedSum recon;
  for (std::size_t m = 0; m < ctx.obs->node.size(); ++m) {
    const std::size_t n = ctx.obs->node[m];
    const double a = ctx.obs->frac[m];
    double sq = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double z = (1.0 - a) * Z[n * d + c] + a * Z[(n + 1) * d + c];
      const double r = spec.obs[m * d + c] - z;
      sq += r * r;
    }
    recon.add(ctx.obs->weight[m] * (-norm - 0.5 * sq / var));
  }
  CompensatedSum kl;
  if (spec.kl_weight == 0.0) return -recon.value();
  for (std::size_t n = 0; n < ctx.kl_weights.size(); ++n) {
    const double* g = ctx.diff->at(ctx.node_g[n]);
    double q = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double u = (fp[n * d + c] - fq[n * d + c]) / g[c];
      q += u * u;
    }
    kl.add(ctx.kl_weights[n] * 0.5 * q);
  }
  return -recon.value() + spec.kl_weight * kl.value();
}

// Seeds Zbar, gbar and the prior/posterior gradients with the loss terms,
// scaled by the path weight w.
void seed_adjoints(const LossContext& ctx, double w, const std::vector<double>& Z, const std::vector<double>& fp,
                   const std::vector<double>& fq, const std::vector<double>& prior_cache,
                   const std::vector<double>& post_node_cache, std::vector<double>& Zbar, std::vector<double>& gbar,
                   std::vector<double>& grad) {
  const NetworkFields& net = *ctx.net;
  const std::size_t d = net.dim();
  const auto& spec = *ctx.spec;
  const double var = spec.obs_noise * spec.obs_noise;
  for (std::size_t m = 0; m < ctx.obs->node.size(); ++m) {
    const std::size_t n = ctx.obs->node[m];
    const double a = ctx.obs->frac[m];
    const double wm = w * ctx.obs->weight[m] / var;
    for (std::size_t c = 0; c < d; ++c) {
      const double z = (1.0 - a) * Z[n * d + c] + a * Z[(n + 1) * d + c];
      const double dz = wm * (z - spec.obs[m * d + c]);
      Zbar[n * d + c] += (1.0 - a) * dz;
      Zbar[(n + 1) * d + c] += a * dz;
    }
  }
  if (spec.kl_weight == 0.0) return;
  const Mlp& prior = net.prior();
  const Mlp& post = net.posterior();
  const double* pp = ctx.theta.data() + net.prior_offset();
  const double* pq = ctx.theta.data() + net.posterior_offset();
  std::vector<double> up(d), uq(d), gin(d + 1);
  for (std::size_t n = 0; n < ctx.kl_weights.size(); ++n) {
    const double* g = ctx.diff->at(ctx.node_g[n]);
    const double s = w * spec.kl_weight * ctx.kl_weights[n];
    for (std::size_t c = 0; c < d; ++c) {
      const double diff = fp[n * d + c] - fq[n * d + c];
      up[c] = s * diff / (g[c] * g[c]);
      uq[c] = -up[c];
      gbar[ctx.node_g[n] * d + c] -= s * diff * diff / (g[c] * g[c] * g[c]);
    }
    prior.backward(pp, prior_cache.data() + n * prior.cache_size(), up, grad.data() + net.prior_offset(), gin);
    for (std::size_t c = 0; c < d; ++c) Zbar[n * d + c] += gin[c + 1];
    post.backward(pq, post_node_cache.data() + n * post.cache_size(), uq, grad.data() + net.posterior_offset(),
                  gin);
    for (std::size_t c = 0; c < d; ++c) Zbar[n * d + c] += gin[c + 1];
  }
}

// Per-chunk accumulators, reduced in chunk order.
struct ChunkResult {
  CompensatedSum loss;
  std::vector<double> grad;
  std::vector<double> gbar;
};

constexpr std::size_t kMaxChunks = 32;

LossAndGradient reduce_chunks(const NetworkFields& net, std::span<const double> theta,
                              std::vector<ChunkResult>& chunks, const DiffusionGrid& diff, std::size_t paths,
                              std::size_t tape_bytes) {
  LossAndGradient out;
  out.paths = paths;
  out.gradient.assign(net.param_count(), 0.0);
  std::vector<double> gbar(diff.times.size() * net.dim(), 0.0);
  CompensatedSum loss;
  for (auto& c : chunks) {
    loss.add(c.loss.value());
    for (std::size_t i = 0; i < out.gradient.size(); ++i) out.gradient[i] += c.grad[i];
    for (std::size_t i = 0; i < gbar.size(); ++i) gbar[i] += c.gbar[i];
  }
  diff.backward(net, theta, gbar, out.gradient);
  out.loss = loss.value();
  out.tape_bytes = tape_bytes + chunks.size() * (net.param_count() + gbar.size()) * sizeof(double);
  for (double g : out.gradient) {
    if (!std::isfinite(g)) throw Error(ErrorKind::kNonFiniteGradient, "gradient has a non-finite entry");
  }
  if (!std::isfinite(out.loss)) throw Error(ErrorKind::kNonFiniteState, "loss is not finite");
  return out;
}

// Fixed RK4 grid shared by every leaf: the formula paths must share breakpoints.
struct CubatureGrid {
  std::vector<double> nodes;            // N + 1 times
  std::vector<double> h;                // N step sizes
  std::vector<std::size_t> interval;    // per step
  std::vector<std::size_t> segment;     // per step
  std::vector<double> rates;            // [interval][path][segment][d]
  std::size_t q = 0, segments = 0, d = 0;

  const double* rate(std::size_t i, std::size_t j, std::size_t s) const {
    return rates.data() + ((i * q + j) * segments + s) * d;
  }
};

CubatureGrid make_cubature_grid(const CubatureFormula& formula, const TimePartition& partition,
                                int steps_per_segment) {
  if (steps_per_segment < 1) throw Error(ErrorKind::kInvalidParameter, "steps_per_segment must be >= 1");
  CubatureGrid G;
  G.q = formula.size();
  G.d = static_cast<std::size_t>(formula.driving_dim());
  const auto& bp = formula.path(0).breakpoints();
  G.segments = bp.size() - 1;
  for (std::size_t j = 1; j < G.q; ++j) {
    if (formula.path(j).breakpoints() != bp) {
      throw Error(ErrorKind::kInvalidParameter, "training needs formula paths with shared breakpoints");
    }
  }
  const std::size_t k = static_cast<std::size_t>(partition.intervals());
  G.rates.assign(k * G.q * G.segments * G.d, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    const double s = partition.step(i);
    for (std::size_t j = 0; j < G.q; ++j) {
      for (std::size_t sg = 0; sg < G.segments; ++sg) {
        const auto inc = formula.path(j).increment(sg);
        const double dtau = bp[sg + 1] - bp[sg];
        double* r = G.rates.data() + ((i * G.q + j) * G.segments + sg) * G.d;
        for (std::size_t c = 0; c < G.d; ++c) r[c] = inc[c + 1] / (std::sqrt(s) * dtau);
      }
    }
  }
  G.nodes.push_back(partition.knots()[0]);
  for (std::size_t i = 0; i < k; ++i) {
    const double t0 = partition.knots()[i];
    const double s = partition.step(i);
    for (std::size_t sg = 0; sg < G.segments; ++sg) {
      const double a = t0 + s * bp[sg];
      const double b = (sg + 1 == G.segments) ? partition.knots()[i + 1] : t0 + s * bp[sg + 1];
      const double h = (b - a) / steps_per_segment;
      for (int st = 0; st < steps_per_segment; ++st) {
        G.h.push_back(h);
        G.interval.push_back(i);
        G.segment.push_back(sg);
        G.nodes.push_back(st + 1 == steps_per_segment ? b : a + (st + 1) * h);
      }
    }
  }
  return G;
}

}  // namespace

Mlp::Mlp(std::vector<std::size_t> sizes) : sizes_(std::move(sizes)) {
  if (sizes_.size() < 2) throw Error(ErrorKind::kInvalidParameter, "network needs input and output layers");
  for (std::size_t s : sizes_) {
    if (s == 0) throw Error(ErrorKind::kInvalidParameter, "layer sizes must be positive");
  }
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) param_count_ += sizes_[l + 1] * (sizes_[l] + 1);
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) cache_size_ += sizes_[l];
}

void Mlp::initialize(std::span<double> params, std::mt19937_64& rng) const {
  if (params.size() != param_count_) throw Error(ErrorKind::kDimensionMismatch, "parameter span has wrong size");
  std::size_t off = 0;
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    const std::size_t in = sizes_[l], out = sizes_[l + 1];
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> u(-limit, limit);
    for (std::size_t i = 0; i < in * out; ++i) params[off++] = u(rng);
    for (std::size_t i = 0; i < out; ++i) params[off++] = 0.0;
  }
}

// Layer l stores W (out x in, row-major) followed by b (out).
void Mlp::forward(const double* params, std::span<const double> in, std::span<double> out, double* cache) const {
  if (in.size() != inputs() || out.size() != outputs()) {
    throw Error(ErrorKind::kDimensionMismatch, "network input or output has wrong size");
  }
  std::vector<double> local;
  if (cache == nullptr) {
    local.resize(cache_size_);
    cache = local.data();
  }
  std::copy(in.begin(), in.end(), cache);
  const double* a = cache;
  double* next = cache + sizes_[0];
  const double* p = params;
  const std::size_t layers = sizes_.size() - 1;
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t ni = sizes_[l], no = sizes_[l + 1];
    const double* W = p;
    const double* b = p + ni * no;
    double* dst = (l + 1 == layers) ? out.data() : next;
    for (std::size_t r = 0; r < no; ++r) {
      double s = b[r];
      const double* row = W + r * ni;
      for (std::size_t c = 0; c < ni; ++c) s += row[c] * a[c];
      dst[r] = (l + 1 == layers) ? s : std::tanh(s);
    }
    p += ni * no + no;
    a = dst;
    next += (l + 1 == layers) ? 0 : no;
  }
}

void Mlp::backward(const double* params, const double* cache, std::span<const double> gout, double* gparams,
                   std::span<double> gin) const {
  if (gout.size() != outputs()) throw Error(ErrorKind::kDimensionMismatch, "output gradient has wrong size");
  const std::size_t layers = sizes_.size() - 1;
  // Offsets of each layer's parameters and cached input activation.
  std::size_t poff[16], aoff[16];
  if (layers > 16) throw Error(ErrorKind::kInvalidParameter, "network too deep");
  std::size_t po = 0, ao = 0;
  for (std::size_t l = 0; l < layers; ++l) {
    poff[l] = po;
    aoff[l] = ao;
    po += sizes_[l + 1] * (sizes_[l] + 1);
    ao += sizes_[l];
  }
  std::size_t widest = 0;
  for (std::size_t s : sizes_) widest = std::max(widest, s);
  std::vector<double> delta(gout.begin(), gout.end()), prev(widest);
  for (std::size_t l = layers; l-- > 0;) {
    const std::size_t ni = sizes_[l], no = sizes_[l + 1];
    const double* W = params + poff[l];
    double* gW = gparams + poff[l];
    double* gb = gW + ni * no;
    const double* a = cache + aoff[l];
    std::fill(prev.begin(), prev.begin() + ni, 0.0);
    for (std::size_t r = 0; r < no; ++r) {
      const double dr = delta[r];
      if (dr == 0.0) continue;
      gb[r] += dr;
      const double* row = W + r * ni;
      double* grow = gW + r * ni;
      for (std::size_t c = 0; c < ni; ++c) {
        grow[c] += dr * a[c];
        prev[c] += dr * row[c];
      }
    }
    if (l > 0) {
      delta.assign(ni, 0.0);
      for (std::size_t c = 0; c < ni; ++c) delta[c] = prev[c] * (1.0 - a[c] * a[c]);
    } else if (!gin.empty()) {
      if (gin.size() != ni) throw Error(ErrorKind::kDimensionMismatch, "input gradient has wrong size");
      std::copy(prev.begin(), prev.begin() + ni, gin.begin());
    }
  }
}

NetworkFields::NetworkFields(NetworkSpec spec) : spec_(spec) {
  if (spec_.dim == 0 || spec_.width == 0 || spec_.depth == 0) {
    throw Error(ErrorKind::kInvalidParameter, "network dimension, width and depth must be positive");
  }
  if (!(spec_.diffusion_scale > 0.0)) throw Error(ErrorKind::kInvalidParameter, "diffusion scale must be positive");
  std::vector<std::size_t> drift{spec_.dim + 1};
  std::vector<std::size_t> diff{1};
  for (std::size_t l = 0; l < spec_.depth; ++l) {
    drift.push_back(spec_.width);
    diff.push_back(spec_.width);
  }
  drift.push_back(spec_.dim);
  diff.push_back(spec_.dim);
  prior_ = Mlp(drift);
  posterior_ = Mlp(drift);
  diffusion_ = Mlp(diff);
  total_ = z0_offset() + spec_.dim;
}

std::vector<double> NetworkFields::initial_parameters(std::uint64_t seed) const {
  std::vector<double> theta(total_, 0.0);
  std::mt19937_64 rng(seed);
  std::span<double> all(theta);
  prior_.initialize(all.subspan(prior_offset(), prior_.param_count()), rng);
  posterior_.initialize(all.subspan(posterior_offset(), posterior_.param_count()), rng);
  diffusion_.initialize(all.subspan(diffusion_offset(), diffusion_.param_count()), rng);
  return theta;
}

namespace {
void drift_eval(const Mlp& mlp, const double* p, double t, std::span<const double> z, std::span<double> out) {
  std::vector<double> in(z.size() + 1);
  in[0] = t;
  std::copy(z.begin(), z.end(), in.begin() + 1);
  mlp.forward(p, in, out, nullptr);
}
}  // namespace

void NetworkFields::prior_drift(std::span<const double> theta, double t, std::span<const double> z,
                                std::span<double> out) const {
  check_theta(*this, theta);
  drift_eval(prior_, theta.data() + prior_offset(), t, z, out);
}

void NetworkFields::posterior_drift(std::span<const double> theta, double t, std::span<const double> z,
                                    std::span<double> out) const {
  check_theta(*this, theta);
  drift_eval(posterior_, theta.data() + posterior_offset(), t, z, out);
}

void NetworkFields::diffusion(std::span<const double> theta, double t, std::span<double> out) const {
  check_theta(*this, theta);
  const double in[1] = {t};
  diffusion_.forward(theta.data() + diffusion_offset(), in, out, nullptr);
  for (double& v : out) v = spec_.diffusion_scale * softplus(v);
}

VectorFieldSet NetworkFields::posterior_fields(std::vector<double> theta) const {
  check_theta(*this, theta);
  const std::size_t d = spec_.dim;
  auto shared = std::make_shared<const std::vector<double>>(std::move(theta));
  const NetworkFields self = *this;
  std::vector<FieldFn> fields;
  fields.push_back([self, shared, d](std::span<const double> x, std::span<double> out) {
    out[0] = 1.0;
    self.posterior_drift(*shared, x[0], x.subspan(1), out.subspan(1, d));
  });
  for (std::size_t i = 0; i < d; ++i) {
    fields.push_back([self, shared, d, i](std::span<const double> x, std::span<double> out) {
      std::vector<double> g(d);
      self.diffusion(*shared, x[0], g);
      std::fill(out.begin(), out.end(), 0.0);
      out[1 + i] = g[i];
    });
  }
  return VectorFieldSet(d + 1, d, std::move(fields));
}

VariationalTerms variational_terms(const NetworkFields& net, std::span<const double> theta,
                                   const Trajectory& trajectory, const VariationalLossSpec& spec) {
  check_theta(net, theta);
  check_spec(net, spec);
  const std::size_t d = net.dim();
  if (trajectory.dim() != d + 1) throw Error(ErrorKind::kDimensionMismatch, "trajectory is not (t, z)");
  if (trajectory.size() < 2) throw Error(ErrorKind::kInvalidParameter, "trajectory needs two points");
  const double var = spec.obs_noise * spec.obs_noise;
  const double norm = 0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi * var);
  VariationalTerms out;
  const auto ow = trapezoid_weights(spec.obs_times);
  CompensatedSum recon;
  for (std::size_t m = 0; m < spec.obs_times.size(); ++m) {
    const auto x = trajectory.at(spec.obs_times[m]);
    double sq = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double r = spec.obs[m * d + c] - x[c + 1];
      sq += r * r;
    }
    recon.add(ow[m] * (-norm - 0.5 * sq / var));
  }
  out.reconstruction = recon.value();
  if (spec.kl_weight == 0.0) return out;
  const auto kw = trapezoid_weights(trajectory.times());
  std::vector<double> fp(d), fq(d), g(d);
  CompensatedSum kl;
  for (std::size_t n = 0; n < trajectory.size(); ++n) {
    const double t = trajectory.times()[n];
    const auto z = trajectory.state(n).subspan(1);
    net.prior_drift(theta, t, z, fp);
    net.posterior_drift(theta, t, z, fq);
    net.diffusion(theta, t, g);
    double q = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      if (!(std::abs(g[c]) >= kMinDiffusion)) {
        throw Error(ErrorKind::kSingularDiffusion, "diffusion vanishes at t = " + format_double17(t));
      }
      const double u = (fp[c] - fq[c]) / g[c];
      q += u * u;
    }
    kl.add(kw[n] * 0.5 * q);
  }
  out.kl = kl.value();
  return out;
}

double variational_loss(const NetworkFields& net, std::span<const double> theta, const Trajectory& trajectory,
                        const VariationalLossSpec& spec) {
  const auto terms = variational_terms(net, theta, trajectory, spec);
  return terms.reconstruction - spec.kl_weight * terms.kl;
}

LossAndGradient loss_and_gradient_cubature(const NetworkFields& net, std::span<const double> theta,
                                           const VariationalLossSpec& spec, const CubatureFormula& formula,
                                           const TimePartition& partition, const std::vector<WeightedLeaf>& leaves,
                                           int steps_per_segment, std::size_t workers) {
  check_theta(net, theta);
  check_spec(net, spec);
  const std::size_t d = net.dim();
  if (static_cast<std::size_t>(formula.driving_dim()) != d) {
    throw Error(ErrorKind::kDimensionMismatch, "formula driving dimension differs from the latent dimension");
  }
  if (std::abs(partition.horizon() - spec.horizon) > 1e-12) {
    throw Error(ErrorKind::kInvalidParameter, "partition horizon differs from the data horizon");
  }
  if (leaves.empty()) throw Error(ErrorKind::kInvalidParameter, "no leaves");
  const CubatureGrid G = make_cubature_grid(formula, partition, steps_per_segment);
  const std::size_t N = G.h.size();
  const std::size_t k = static_cast<std::size_t>(partition.intervals());
  for (const auto& leaf : leaves) {
    if (leaf.index.size() != k) throw Error(ErrorKind::kDimensionMismatch, "leaf length differs from k");
    for (std::size_t j : leaf.index) {
      if (j >= G.q) throw Error(ErrorKind::kIndexOutOfRange, "leaf entry exceeds the formula size");
    }
  }

  // Diffusion times: nodes 0..N, then midpoints N+1..2N.
  std::vector<double> gtimes = G.nodes;
  for (std::size_t n = 0; n < N; ++n) gtimes.push_back(G.nodes[n] + 0.5 * G.h[n]);
  DiffusionGrid diff;
  diff.build(net, theta, gtimes, spec.kl_weight > 0.0);

  const ObsMap obs = map_observations(spec, G.nodes);
  LossContext ctx{&net, theta, &spec, &obs, trapezoid_weights(G.nodes), &diff, {}};
  ctx.node_g.resize(N + 1);
  for (std::size_t n = 0; n <= N; ++n) ctx.node_g[n] = n;

  const Mlp& prior = net.prior();
  const Mlp& post = net.posterior();
  const std::size_t cp = prior.cache_size(), cq = post.cache_size();
  const double* pp = theta.data() + net.prior_offset();
  const double* pq = theta.data() + net.posterior_offset();
  const double* z0 = theta.data() + net.z0_offset();

  const std::size_t tape_doubles = 3 * (N + 1) * d + (N + 1) * cp + (N + 1) * cq + 3 * N * cq;
  const std::size_t chunks = std::min(leaves.size(), kMaxChunks);
  std::vector<ChunkResult> results(chunks);

  parallel_for(chunks, workers, [&](std::size_t ci) {
    ChunkResult& res = results[ci];
    res.grad.assign(net.param_count(), 0.0);
    res.gbar.assign(diff.times.size() * d, 0.0);
    std::vector<double> Z((N + 1) * d), fp((N + 1) * d), fq((N + 1) * d), Zbar((N + 1) * d);
    std::vector<double> pcache((N + 1) * cp), qnode((N + 1) * cq), qstage(3 * N * cq);
    std::vector<double> in(d + 1), k1(d), k2(d), k3(d), k4(d), out(d), gin(d + 1);
    std::vector<double> b1(d), b2(d), b3(d), b4(d);
    const std::size_t begin = ci * leaves.size() / chunks, end = (ci + 1) * leaves.size() / chunks;
    for (std::size_t li = begin; li < end; ++li) {
      const WeightedLeaf& leaf = leaves[li];
      if (!(leaf.weight > 0.0)) continue;
      std::copy(z0, z0 + d, Z.begin());
      auto stage = [&](double t, const double* z, const double* g, const double* r, double* cache, double* kout,
                       double* fout) {
        in[0] = t;
        std::copy(z, z + d, in.begin() + 1);
        post.forward(pq, in, out, cache);
        for (std::size_t c = 0; c < d; ++c) {
          if (fout) fout[c] = out[c];
          kout[c] = out[c] + g[c] * r[c];
        }
      };
      std::vector<double> tmp(d);
      for (std::size_t n = 0; n < N; ++n) {
        const double h = G.h[n];
        const double t = G.nodes[n];
        const double* r = G.rate(G.interval[n], leaf.index[G.interval[n]], G.segment[n]);
        const double* z = Z.data() + n * d;
        in[0] = t;
        std::copy(z, z + d, in.begin() + 1);
        prior.forward(pp, in, std::span<double>(fp.data() + n * d, d), pcache.data() + n * cp);
        stage(t, z, diff.at(n), r, qnode.data() + n * cq, k1.data(), fq.data() + n * d);
        for (std::size_t c = 0; c < d; ++c) tmp[c] = z[c] + 0.5 * h * k1[c];
        stage(t + 0.5 * h, tmp.data(), diff.at(N + 1 + n), r, qstage.data() + (3 * n) * cq, k2.data(), nullptr);
        for (std::size_t c = 0; c < d; ++c) tmp[c] = z[c] + 0.5 * h * k2[c];
        stage(t + 0.5 * h, tmp.data(), diff.at(N + 1 + n), r, qstage.data() + (3 * n + 1) * cq, k3.data(),
              nullptr);
        for (std::size_t c = 0; c < d; ++c) tmp[c] = z[c] + h * k3[c];
        stage(G.nodes[n + 1], tmp.data(), diff.at(n + 1), r, qstage.data() + (3 * n + 2) * cq, k4.data(),
              nullptr);
        double* zn = Z.data() + (n + 1) * d;
        for (std::size_t c = 0; c < d; ++c) {
          zn[c] = z[c] + h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
          if (!std::isfinite(zn[c])) {
            throw Error(ErrorKind::kNonFiniteState, "latent state blew up at t = " + format_double17(G.nodes[n + 1]));
          }
        }
      }
      {
        in[0] = G.nodes[N];
        std::copy(Z.data() + N * d, Z.data() + (N + 1) * d, in.begin() + 1);
        prior.forward(pp, in, std::span<double>(fp.data() + N * d, d), pcache.data() + N * cp);
        post.forward(pq, in, std::span<double>(fq.data() + N * d, d), qnode.data() + N * cq);
      }
      res.loss.add(leaf.weight * path_objective(ctx, Z, fp, fq));

      std::fill(Zbar.begin(), Zbar.end(), 0.0);
      seed_adjoints(ctx, leaf.weight, Z, fp, fq, pcache, qnode, Zbar, res.gbar, res.grad);
      double* gq = res.grad.data() + net.posterior_offset();
      auto back_stage = [&](const double* cache, const double* kbar, const double* r, std::size_t gi,
                            double* zbar_out) {
        for (std::size_t c = 0; c < d; ++c) res.gbar[gi * d + c] += kbar[c] * r[c];
        post.backward(pq, cache, std::span<const double>(kbar, d), gq, gin);
        for (std::size_t c = 0; c < d; ++c) zbar_out[c] = gin[c + 1];
      };
      std::vector<double> zs(d);
      for (std::size_t n = N; n-- > 0;) {
        const double h = G.h[n];
        const double* r = G.rate(G.interval[n], leaf.index[G.interval[n]], G.segment[n]);
        const double* a = Zbar.data() + (n + 1) * d;
        double* zb = Zbar.data() + n * d;
        for (std::size_t c = 0; c < d; ++c) {
          zb[c] += a[c];
          b1[c] = h / 6.0 * a[c];
          b2[c] = h / 3.0 * a[c];
          b3[c] = h / 3.0 * a[c];
          b4[c] = h / 6.0 * a[c];
        }
        back_stage(qstage.data() + (3 * n + 2) * cq, b4.data(), r, n + 1, zs.data());
        for (std::size_t c = 0; c < d; ++c) {
          zb[c] += zs[c];
          b3[c] += h * zs[c];
        }
        back_stage(qstage.data() + (3 * n + 1) * cq, b3.data(), r, N + 1 + n, zs.data());
        for (std::size_t c = 0; c < d; ++c) {
          zb[c] += zs[c];
          b2[c] += 0.5 * h * zs[c];
        }
        back_stage(qstage.data() + (3 * n) * cq, b2.data(), r, N + 1 + n, zs.data());
        for (std::size_t c = 0; c < d; ++c) {
          zb[c] += zs[c];
          b1[c] += 0.5 * h * zs[c];
        }
        back_stage(qnode.data() + n * cq, b1.data(), r, n, zs.data());
        for (std::size_t c = 0; c < d; ++c) zb[c] += zs[c];
      }
      for (std::size_t c = 0; c < d; ++c) res.grad[net.z0_offset() + c] += Zbar[c];
    }
  });

  std::size_t active = 0;
  for (const auto& leaf : leaves) active += leaf.weight > 0.0 ? 1 : 0;
  const std::size_t threads = std::min(chunks, workers == 0 ? default_workers() : workers);
  return reduce_chunks(net, theta, results, diff, active, threads * tape_doubles * sizeof(double));
}

LossAndGradient loss_and_gradient_cubature(const NetworkFields& net, std::span<const double> theta,
                                           const VariationalLossSpec& spec, const CubatureFormula& formula,
                                           const TimePartition& partition, const WeightTable& table,
                                           int steps_per_segment, std::size_t workers) {
  table.check_matches(formula, partition);
  return loss_and_gradient_cubature(net, theta, spec, formula, partition, table.leaves(), steps_per_segment,
                                    workers);
}

LossAndGradient loss_and_gradient_mc(const NetworkFields& net, std::span<const double> theta,
                                     const VariationalLossSpec& spec, std::size_t paths, std::size_t steps,
                                     std::uint64_t seed, std::size_t workers) {
  check_theta(net, theta);
  check_spec(net, spec);
  if (paths == 0 || steps == 0) throw Error(ErrorKind::kInvalidParameter, "paths and steps must be positive");
  const std::size_t d = net.dim();
  const std::size_t N = steps;
  const double h = spec.horizon / static_cast<double>(N);
  std::vector<double> nodes(N + 1);
  for (std::size_t n = 0; n <= N; ++n) nodes[n] = n == N ? spec.horizon : static_cast<double>(n) * h;
  DiffusionGrid diff;
  diff.build(net, theta, nodes, spec.kl_weight > 0.0);
  const ObsMap obs = map_observations(spec, nodes);
  LossContext ctx{&net, theta, &spec, &obs, trapezoid_weights(nodes), &diff, {}};
  ctx.node_g.resize(N + 1);
  for (std::size_t n = 0; n <= N; ++n) ctx.node_g[n] = n;

  const Mlp& prior = net.prior();
  const Mlp& post = net.posterior();
  const std::size_t cp = prior.cache_size(), cq = post.cache_size();
  const double* pp = theta.data() + net.prior_offset();
  const double* pq = theta.data() + net.posterior_offset();
  const double* z0 = theta.data() + net.z0_offset();
  const double w = 1.0 / static_cast<double>(paths);
  const double sqh = std::sqrt(h);

  const std::size_t tape_doubles = 4 * (N + 1) * d + (N + 1) * (cp + cq) + N * d;
  const std::size_t chunks = std::min(paths, kMaxChunks);
  std::vector<ChunkResult> results(chunks);

  parallel_for(chunks, workers, [&](std::size_t ci) {
    ChunkResult& res = results[ci];
    res.grad.assign(net.param_count(), 0.0);
    res.gbar.assign(diff.times.size() * d, 0.0);
    std::vector<double> Z((N + 1) * d), fp((N + 1) * d), fq((N + 1) * d), Zbar((N + 1) * d), dW(N * d);
    std::vector<double> pcache((N + 1) * cp), qcache((N + 1) * cq), in(d + 1), gin(d + 1), go(d);
    std::normal_distribution<double> normal(0.0, 1.0);
    const std::size_t begin = ci * paths / chunks, end = (ci + 1) * paths / chunks;
    for (std::size_t p = begin; p < end; ++p) {
      std::mt19937_64 rng(derive_seed(seed, p));
      for (double& v : dW) v = sqh * normal(rng);
      std::copy(z0, z0 + d, Z.begin());
      for (std::size_t n = 0; n <= N; ++n) {
        const double* z = Z.data() + n * d;
        in[0] = nodes[n];
        std::copy(z, z + d, in.begin() + 1);
        prior.forward(pp, in, std::span<double>(fp.data() + n * d, d), pcache.data() + n * cp);
        post.forward(pq, in, std::span<double>(fq.data() + n * d, d), qcache.data() + n * cq);
        if (n == N) break;
        const double* g = diff.at(n);
        double* zn = Z.data() + (n + 1) * d;
        for (std::size_t c = 0; c < d; ++c) {
          zn[c] = z[c] + h * fq[n * d + c] + g[c] * dW[n * d + c];
          if (!std::isfinite(zn[c])) {
            throw Error(ErrorKind::kNonFiniteState, "latent state blew up at t = " + format_double17(nodes[n + 1]));
          }
        }
      }
      res.loss.add(w * path_objective(ctx, Z, fp, fq));

      std::fill(Zbar.begin(), Zbar.end(), 0.0);
      seed_adjoints(ctx, w, Z, fp, fq, pcache, qcache, Zbar, res.gbar, res.grad);
      double* gq = res.grad.data() + net.posterior_offset();
      for (std::size_t n = N; n-- > 0;) {
        const double* a = Zbar.data() + (n + 1) * d;
        double* zb = Zbar.data() + n * d;
        for (std::size_t c = 0; c < d; ++c) {
          zb[c] += a[c];
          res.gbar[n * d + c] += a[c] * dW[n * d + c];
          go[c] = h * a[c];
        }
        post.backward(pq, qcache.data() + n * cq, go, gq, gin);
        for (std::size_t c = 0; c < d; ++c) zb[c] += gin[c + 1];
      }
      for (std::size_t c = 0; c < d; ++c) res.grad[net.z0_offset() + c] += Zbar[c];
    }
  });

  const std::size_t threads = std::min(chunks, workers == 0 ? default_workers() : workers);
  return reduce_chunks(net, theta, results, diff, paths, threads * tape_doubles * sizeof(double));
}

VariationalLossSpec make_ou_data(const OuDataConfig& config, double obs_noise, double kl_weight) {
  if (config.dim == 0 || config.points < 2 || config.fine_steps == 0 || !(config.horizon > 0.0)) {
    throw Error(ErrorKind::kInvalidParameter, "data needs dim >= 1, points >= 2, fine_steps >= 1, horizon > 0");
  }
  if (config.fine_steps % (config.points - 1) != 0) {
    throw Error(ErrorKind::kInvalidParameter, "fine_steps must be a multiple of points - 1");
  }
  VariationalLossSpec spec;
  spec.obs_noise = obs_noise;
  spec.kl_weight = kl_weight;
  spec.horizon = config.horizon;
  const std::size_t d = config.dim;
  const std::size_t stride = config.fine_steps / (config.points - 1);
  const double h = config.horizon / static_cast<double>(config.fine_steps);
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> y(d, config.start);
  for (std::size_t s = 0; s <= config.fine_steps; ++s) {
    if (s % stride == 0) {
      const std::size_t m = s / stride;
      spec.obs_times.push_back(m + 1 == config.points ? config.horizon
                                                      : config.horizon * static_cast<double>(m) /
                                                            static_cast<double>(config.points - 1));
      spec.obs.insert(spec.obs.end(), y.begin(), y.end());
    }
    if (s == config.fine_steps) break;
    for (std::size_t c = 0; c < d; ++c) {
      y[c] += config.rate * (config.level - y[c]) * h + config.vol * std::sqrt(h) * normal(rng);
    }
  }
  return spec;
}

std::string data_csv(const VariationalLossSpec& spec) {
  const std::size_t d = spec.obs_times.empty() ? 0 : spec.obs.size() / spec.obs_times.size();
  std::ostringstream out;
  out << "t";
  for (std::size_t c = 0; c < d; ++c) out << ",y" << c;
  out << "\n";
  for (std::size_t m = 0; m < spec.obs_times.size(); ++m) {
    out << format_double17(spec.obs_times[m]);
    for (std::size_t c = 0; c < d; ++c) out << "," << format_double17(spec.obs[m * d + c]);
    out << "\n";
  }
  return out.str();
}

std::string TrainResult::log_csv() const {
  std::ostringstream out;
  out << "epoch,arm,loss,seconds,peak_bytes\n";
  for (const auto& r : log) {
    out << r.epoch << "," << r.arm << "," << format_double17(r.loss) << "," << format_double17(r.seconds) << ","
        << r.peak_bytes << "\n";
  }
  return out.str();
}

std::vector<double> TrainResult::losses(const std::string& arm) const {
  std::vector<double> out;
  for (const auto& r : log) {
    if (r.arm == arm) out.push_back(r.loss);
  }
  return out;
}

double TrainResult::mean_seconds(const std::string& arm) const {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& r : log) {
    if (r.arm == arm) {
      total += r.seconds;
      ++n;
    }
  }
  return n == 0 ? 0.0 : total / static_cast<double>(n);
}

TrainResult train(const TrainConfig& config) {
  if (config.epochs == 0) throw Error(ErrorKind::kInvalidParameter, "epochs must be positive");
  if (!(config.learning_rate >= 0.0)) throw Error(ErrorKind::kInvalidParameter, "learning rate must be >= 0");
  NetworkSpec ns = config.network;
  ns.dim = config.data.dim;
  const NetworkFields net(ns);
  TrainResult result;
  result.data = make_ou_data(config.data, config.obs_noise, config.kl_weight);
  result.initial_parameters = net.initial_parameters(config.seed);

  const CubatureFormula formula = make_formula(config.degree, static_cast<int>(ns.dim));
  const TimePartition partition = make_partition(config.data.horizon, config.k, config.gamma);
  std::vector<WeightedLeaf> leaves;
  if (config.run_cubature || config.mc_paths == 0) {
    const WeightTable table =
        config.recombine ? preprocess(formula, partition, PreprocessOptions{config.basis_degree, config.p_star, {}},
                                      config.gamma)
                         : raw_weight_table(formula, partition);
    leaves = table.leaves();
  }
  result.cubature_paths = leaves.size();
  result.mc_paths = config.mc_paths == 0 ? leaves.size() : config.mc_paths;

  auto run = [&](const std::string& arm, auto&& step) {
    std::vector<double> theta = result.initial_parameters;
    for (std::size_t e = 0; e < config.epochs; ++e) {
      const auto t0 = std::chrono::steady_clock::now();
      LossAndGradient lg = step(theta, e);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      result.log.push_back({e, arm, lg.loss, secs, lg.tape_bytes});
      if (!(std::abs(lg.loss) <= kDivergenceLoss)) {
        throw Error(ErrorKind::kDivergenceDetected,
                    arm + " loss " + format_double17(lg.loss) + " at epoch " + std::to_string(e));
      }
      for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= config.learning_rate * lg.gradient[i];
    }
    return theta;
  };

  if (config.run_cubature) {
    result.cubature_parameters = run("cubature", [&](const std::vector<double>& theta, std::size_t) {
      return loss_and_gradient_cubature(net, theta, result.data, formula, partition, leaves,
                                        config.steps_per_segment, config.workers);
    });
  }
  if (config.run_mc) {
    result.mc_parameters = run("mc", [&](const std::vector<double>& theta, std::size_t e) {
      const std::uint64_t s = config.mc_resample ? derive_seed(config.seed ^ 0x6d63ULL, e) : config.seed ^ 0x6d63ULL;
      return loss_and_gradient_mc(net, theta, result.data, result.mc_paths, config.mc_steps, s, config.workers);
    });
  }
  return result;
}

std::string parameters_json(const NetworkFields& net, std::span<const double> theta) {
  check_theta(net, theta);
  nlohmann::json j;
  j["dim"] = net.dim();
  j["width"] = net.spec().width;
  j["depth"] = net.spec().depth;
  j["diffusion_scale"] = net.spec().diffusion_scale;
  j["layout"] = {{"prior", {net.prior_offset(), net.prior().param_count()}},
                 {"posterior", {net.posterior_offset(), net.posterior().param_count()}},
                 {"diffusion", {net.diffusion_offset(), net.diffusion_net().param_count()}},
                 {"z0", {net.z0_offset(), net.dim()}}};
  j["parameters"] = std::vector<double>(theta.begin(), theta.end());
  return j.dump(2);
}

}  // namespace wscub
