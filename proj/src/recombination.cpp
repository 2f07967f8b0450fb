#include "wscub/recombination.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <json.hpp>
#include <limits>
#include <map>
#include <numeric>

#include "wscub/error.hpp"
#include "wscub/numeric.hpp"

namespace wscub {

// ---------------------------------------------------------------- DiscreteMeasure

DiscreteMeasure::DiscreteMeasure(std::size_t dim, std::vector<double> points,
                                 std::vector<double> weights)
    : dim_(dim), points_(std::move(points)), weights_(std::move(weights)) {
  if (dim_ == 0) throw Error(ErrorKind::kInvalidParameter, "measure dimension must be positive");
  if (points_.size() != weights_.size() * dim_) {
    throw Error(ErrorKind::kDimensionMismatch, "points do not match weights x dim");
  }
  for (double w : weights_) {
    if (!(w >= 0.0) || !std::isfinite(w)) {
      throw Error(ErrorKind::kInvalidParameter, "measure weights must be finite and nonnegative");
    }
  }
}

void DiscreteMeasure::add(std::span<const double> point, double weight) {
  if (point.size() != dim_) throw Error(ErrorKind::kDimensionMismatch, "point has wrong dimension");
  if (!(weight >= 0.0)) throw Error(ErrorKind::kInvalidParameter, "negative weight");
  points_.insert(points_.end(), point.begin(), point.end());
  weights_.push_back(weight);
}

double DiscreteMeasure::total_mass() const { return compensated_sum(weights_); }

std::vector<std::size_t> DiscreteMeasure::canonicalize() {
  std::vector<std::size_t> kept;
  std::size_t out = 0;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    if (weights_[i] == 0.0) continue;
    kept.push_back(i);
    if (out != i) {
      weights_[out] = weights_[i];
      std::copy_n(points_.begin() + static_cast<std::ptrdiff_t>(i * dim_), dim_,
                  points_.begin() + static_cast<std::ptrdiff_t>(out * dim_));
    }
    ++out;
  }
  weights_.resize(out);
  points_.resize(out * dim_);
  return kept;
}

// ---------------------------------------------------------------- TestBasis

TestBasis::TestBasis(std::size_t dim, int degree) : dim_(dim), degree_(degree) {
  if (dim_ == 0 || degree_ < 1) {
    throw Error(ErrorKind::kInvalidParameter, "test basis needs D >= 1 and degree >= 1");
  }
  std::vector<int> e(dim_, 0);
  for (int total = 1; total <= degree_; ++total) {
    // Exponent vectors with the given total, first variable's power descending.
    auto fill = [&](auto&& self, std::size_t var, int remaining) -> void {
      if (var + 1 == dim_) {
        e[var] = remaining;
        exponents_.push_back(e);
        return;
      }
      for (int p = remaining; p >= 0; --p) {
        e[var] = p;
        self(self, var + 1, remaining - p);
      }
    };
    fill(fill, 0, total);
  }
}

void TestBasis::evaluate(std::span<const double> x, std::span<double> out) const {
  if (x.size() != dim_ || out.size() != exponents_.size()) {
    throw Error(ErrorKind::kDimensionMismatch, "basis evaluation shape mismatch");
  }
  // powers[v * (degree+1) + p] = x_v^p
  const std::size_t stride = static_cast<std::size_t>(degree_) + 1;
  double powers[64];
  std::vector<double> heap;
  double* pw = powers;
  if (dim_ * stride > 64) {
    heap.resize(dim_ * stride);
    pw = heap.data();
  }
  for (std::size_t v = 0; v < dim_; ++v) {
    pw[v * stride] = 1.0;
    for (std::size_t p = 1; p < stride; ++p) pw[v * stride + p] = pw[v * stride + p - 1] * x[v];
  }
  for (std::size_t b = 0; b < exponents_.size(); ++b) {
    double val = 1.0;
    for (std::size_t v = 0; v < dim_; ++v) val *= pw[v * stride + static_cast<std::size_t>(exponents_[b][v])];
    out[b] = val;
  }
}

std::vector<double> TestBasis::evaluate(std::span<const double> x) const {
  std::vector<double> out(exponents_.size());
  evaluate(x, out);
  return out;
}

std::vector<double> TestBasis::moments(const DiscreteMeasure& mu) const {
  std::vector<CompensatedSum> acc(size());
  std::vector<double> f(size());
  for (std::size_t i = 0; i < mu.size(); ++i) {
    evaluate(mu.point(i), f);
    for (std::size_t b = 0; b < size(); ++b) acc[b].add(mu.weight(i) * f[b]);
  }
  std::vector<double> out(size());
  for (std::size_t b = 0; b < size(); ++b) out[b] = acc[b].value();
  return out;
}

std::vector<double> TestBasis::absolute_moments(const DiscreteMeasure& mu) const {
  std::vector<double> out(size(), 0.0);
  std::vector<double> f(size());
  for (std::size_t i = 0; i < mu.size(); ++i) {
    evaluate(mu.point(i), f);
    for (std::size_t b = 0; b < size(); ++b) out[b] += mu.weight(i) * std::abs(f[b]);
  }
  return out;
}

// ---------------------------------------------------------------- localization

Localization localize(const DiscreteMeasure& measure, double radius) {
  if (!(radius > 0.0)) throw Error(ErrorKind::kInvalidParameter, "radius must be positive");
  const std::size_t dim = measure.dim();
  const double width = 2.0 * radius / std::sqrt(static_cast<double>(dim));
  constexpr double kMaxCell = 4.0e18;
  std::map<std::vector<std::int64_t>, std::size_t> cells;
  Localization loc;
  loc.radius = radius;
  std::vector<std::int64_t> key(dim);
  for (std::size_t i = 0; i < measure.size(); ++i) {
    const auto p = measure.point(i);
    for (std::size_t c = 0; c < dim; ++c) {
      const double cell = std::floor(p[c] / width);
      if (!(std::abs(cell) < kMaxCell)) {
        throw Error(ErrorKind::kInvalidParameter, "radius too small for the point scale");
      }
      key[c] = static_cast<std::int64_t>(cell);
    }
    auto [it, inserted] = cells.try_emplace(key, loc.balls.size());
    if (inserted) {
      Ball ball;
      ball.center.resize(dim);
      for (std::size_t c = 0; c < dim; ++c) ball.center[c] = (static_cast<double>(key[c]) + 0.5) * width;
      loc.balls.push_back(std::move(ball));
    }
    loc.balls[it->second].members.push_back(i);
  }
  // Re-order balls by cell index so the cover does not depend on point order.
  Localization sorted;
  sorted.radius = radius;
  sorted.balls.reserve(loc.balls.size());
  for (const auto& [k, idx] : cells) sorted.balls.push_back(std::move(loc.balls[idx]));
  return sorted;
}

// ---------------------------------------------------------------- reduction core

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Columns of `features` are atoms; row 0 must be all ones (mass constraint).
// On success zeroes at least one weight and returns true.
bool null_vector_step(const MatrixXd& features, std::vector<double>& weights) {
  const Eigen::Index n = features.cols();
  if (n == 0) return false;
  Eigen::ColPivHouseholderQR<MatrixXd> qr(features.transpose());
  const Eigen::Index rank = qr.rank();
  if (rank >= n) return false;
  VectorXd u = qr.householderQ() * VectorXd::Unit(n, rank);

  const double scale = u.cwiseAbs().maxCoeff();
  const double tiny = 1e-13 * scale;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (std::abs(u[i]) > tiny) {
      if (u[i] < 0) u = -u;
      break;
    }
  }
  double alpha = std::numeric_limits<double>::infinity();
  Eigen::Index pivot = -1;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (u[i] > tiny) {
      const double ratio = weights[static_cast<std::size_t>(i)] / u[i];
      if (ratio < alpha) {
        alpha = ratio;
        pivot = i;
      }
    }
  }
  if (pivot < 0) return false;
  for (Eigen::Index i = 0; i < n; ++i) {
    double& w = weights[static_cast<std::size_t>(i)];
    const double before = w;
    w = (i == pivot) ? 0.0 : w - alpha * u[i];
    // Cancellation down to roundoff of the old weight counts as an exact zero.
    if (w <= 1e-13 * before) w = 0.0;
  }
  return true;
}

// Basis features of the affinely normalized support, one column per atom with a
// leading row of ones. Polynomials of bounded degree are closed under affine
// maps, so preserving these moments preserves the original ones.
MatrixXd normalized_features(const DiscreteMeasure& mu, const TestBasis& basis) {
  const std::size_t dim = mu.dim();
  std::vector<double> center(dim, 0.0);
  const double mass = mu.total_mass();
  for (std::size_t i = 0; i < mu.size(); ++i) {
    for (std::size_t c = 0; c < dim; ++c) center[c] += mu.weight(i) * mu.point(i)[c];
  }
  for (double& c : center) c = mass > 0 ? c / mass : 0.0;
  double spread = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    for (std::size_t c = 0; c < dim; ++c) spread = std::max(spread, std::abs(mu.point(i)[c] - center[c]));
  }
  if (spread == 0.0) spread = 1.0;

  MatrixXd f(static_cast<Eigen::Index>(basis.size() + 1), static_cast<Eigen::Index>(mu.size()));
  std::vector<double> y(dim);
  std::vector<double> vals(basis.size());
  for (std::size_t i = 0; i < mu.size(); ++i) {
    for (std::size_t c = 0; c < dim; ++c) y[c] = (mu.point(i)[c] - center[c]) / spread;
    basis.evaluate(y, vals);
    const auto col = static_cast<Eigen::Index>(i);
    f(0, col) = 1.0;
    for (std::size_t b = 0; b < vals.size(); ++b) f(static_cast<Eigen::Index>(b + 1), col) = vals[b];
  }
  return f;
}

ReducedMeasure collect(const DiscreteMeasure& mu, const std::vector<std::size_t>& alive,
                       const std::vector<double>& weights, std::size_t iterations) {
  ReducedMeasure out{DiscreteMeasure(mu.dim()), {}, iterations};
  for (std::size_t a = 0; a < alive.size(); ++a) {
    if (weights[a] == 0.0) continue;
    out.measure.add(mu.point(alive[a]), weights[a]);
    out.source.push_back(alive[a]);
  }
  return out;
}

// Drops zero-weight entries from the parallel arrays.
void prune(std::vector<std::size_t>& alive, std::vector<double>& weights) {
  std::size_t out = 0;
  for (std::size_t a = 0; a < alive.size(); ++a) {
    if (weights[a] == 0.0) continue;
    alive[out] = alive[a];
    weights[out] = weights[a];
    ++out;
  }
  alive.resize(out);
  weights.resize(out);
}

MatrixXd select_columns(const MatrixXd& f, const std::vector<std::size_t>& cols) {
  MatrixXd out(f.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) out.col(static_cast<Eigen::Index>(j)) = f.col(static_cast<Eigen::Index>(cols[j]));
  return out;
}

}  // namespace

ReducedMeasure reduction_iteration(const DiscreteMeasure& measure, const TestBasis& basis) {
  if (measure.dim() != basis.dim()) throw Error(ErrorKind::kDimensionMismatch, "basis and measure dimensions differ");
  const MatrixXd f = normalized_features(measure, basis);
  std::vector<double> w = measure.weights();
  if (!null_vector_step(f, w)) {
    throw Error(ErrorKind::kNoNullVector, "constraint matrix has full column rank");
  }
  std::vector<std::size_t> alive(measure.size());
  std::iota(alive.begin(), alive.end(), 0);
  return collect(measure, alive, w, 1);
}

ReducedMeasure recombine(const DiscreteMeasure& measure, const TestBasis& basis) {
  if (measure.dim() != basis.dim()) throw Error(ErrorKind::kDimensionMismatch, "basis and measure dimensions differ");
  const std::size_t target = basis.size() + 1;
  std::vector<std::size_t> alive;
  std::vector<double> w;
  for (std::size_t i = 0; i < measure.size(); ++i) {
    if (measure.weight(i) > 0.0) {
      alive.push_back(i);
      w.push_back(measure.weight(i));
    }
  }
  if (alive.size() <= target) return collect(measure, alive, w, 0);

  const MatrixXd features = normalized_features(measure, basis);
  const std::size_t groups = 2 * target;
  std::size_t iterations = 0;

  while (alive.size() > target) {
    ++iterations;
    if (alive.size() <= groups) {
      MatrixXd f = select_columns(features, alive);
      while (alive.size() > target && null_vector_step(f, w)) {
        prune(alive, w);
        f = select_columns(features, alive);
      }
      break;
    }
    // Split the support into 2(N_p+1) contiguous, near-equal groups and reduce
    // the measure of their barycentres.
    const std::size_t n = alive.size();
    const std::size_t base = n / groups;
    const std::size_t extra = n % groups;
    std::vector<std::size_t> start(groups + 1, 0);
    for (std::size_t g = 0; g < groups; ++g) start[g + 1] = start[g] + base + (g < extra ? 1 : 0);

    MatrixXd bary = MatrixXd::Zero(features.rows(), static_cast<Eigen::Index>(groups));
    std::vector<double> mass(groups, 0.0);
    for (std::size_t g = 0; g < groups; ++g) {
      for (std::size_t a = start[g]; a < start[g + 1]; ++a) {
        bary.col(static_cast<Eigen::Index>(g)) += w[a] * features.col(static_cast<Eigen::Index>(alive[a]));
        mass[g] += w[a];
      }
      bary.col(static_cast<Eigen::Index>(g)) /= mass[g];
    }
    std::vector<std::size_t> group_alive(groups);
    std::iota(group_alive.begin(), group_alive.end(), 0);
    std::vector<double> group_w = mass;
    MatrixXd f = bary;
    while (group_alive.size() > target && null_vector_step(f, group_w)) {
      prune(group_alive, group_w);
      f = select_columns(bary, group_alive);
    }

    std::vector<std::size_t> next_alive;
    std::vector<double> next_w;
    for (std::size_t j = 0; j < group_alive.size(); ++j) {
      const std::size_t g = group_alive[j];
      const double ratio = group_w[j] / mass[g];
      for (std::size_t a = start[g]; a < start[g + 1]; ++a) {
        const double nw = w[a] * ratio;
        if (nw > 0.0) {
          next_alive.push_back(alive[a]);
          next_w.push_back(nw);
        }
      }
    }
    alive = std::move(next_alive);
    w = std::move(next_w);
  }
  return collect(measure, alive, w, iterations);
}

ReducedMeasure rmp(const DiscreteMeasure& measure, const Localization& localization,
                   const TestBasis& basis) {
  ReducedMeasure out{DiscreteMeasure(measure.dim()), {}, 0};
  for (const auto& ball : localization.balls) {
    DiscreteMeasure local(measure.dim());
    for (std::size_t idx : ball.members) {
      if (idx >= measure.size()) throw Error(ErrorKind::kIndexOutOfRange, "ball member outside the measure");
      local.add(measure.point(idx), measure.weight(idx));
    }
    ReducedMeasure r = recombine(local, basis);
    for (std::size_t i = 0; i < r.measure.size(); ++i) {
      out.measure.add(r.measure.point(i), r.measure.weight(i));
      out.source.push_back(ball.members[r.source[i]]);
    }
    out.outer_iterations = std::max(out.outer_iterations, r.outer_iterations);
  }
  return out;
}

DiscreteMeasure klv_step(const DiscreteMeasure& measure, const CubatureFormula& formula, double s) {
  const std::size_t dim = measure.dim();
  if (dim != static_cast<std::size_t>(formula.driving_dim())) {
    throw Error(ErrorKind::kDimensionMismatch, "measure must live in the driving space R^{d_b}");
  }
  if (!(s > 0.0)) throw Error(ErrorKind::kInvalidParameter, "step must be positive");
  const double root = std::sqrt(s);
  std::vector<std::vector<double>> ends;
  for (std::size_t j = 0; j < formula.size(); ++j) {
    auto e = formula.endpoint(j);
    for (double& x : e) x *= root;
    ends.push_back(std::move(e));
  }
  DiscreteMeasure out(dim);
  std::vector<double> p(dim);
  for (std::size_t i = 0; i < measure.size(); ++i) {
    for (std::size_t j = 0; j < formula.size(); ++j) {
      for (std::size_t c = 0; c < dim; ++c) p[c] = measure.point(i)[c] + ends[j][c];
      out.add(p, measure.weight(i) * formula.weights()[j]);
    }
  }
  return out;
}

// ---------------------------------------------------------------- WeightTable

WeightTable::WeightTable(WeightTableManifest manifest, std::vector<std::vector<PrefixWeight>> levels)
    : manifest_(std::move(manifest)), levels_(std::move(levels)) {
  for (auto& level : levels_) {
    for (std::size_t i = 1; i < level.size(); ++i) {
      if (!(level[i - 1].prefix < level[i].prefix)) {
        throw Error(ErrorKind::kInvalidParameter, "weight table levels must be sorted by prefix");
      }
    }
  }
}

double WeightTable::mass(std::size_t level, std::uint64_t prefix) const {
  if (level == 0) return 1.0;
  if (level > levels_.size()) throw Error(ErrorKind::kIndexOutOfRange, "level beyond the table");
  const auto& lv = levels_[level - 1];
  auto it = std::lower_bound(lv.begin(), lv.end(), prefix,
                             [](const PrefixWeight& pw, std::uint64_t id) { return pw.prefix < id; });
  return (it != lv.end() && it->prefix == prefix) ? it->weight : 0.0;
}

double WeightTable::factor(std::size_t interval, const IndexVector& iv) const {
  if (interval == 0 || interval > iv.size()) throw Error(ErrorKind::kIndexOutOfRange, "interval out of range");
  const std::size_t q = manifest_.formula_size;
  const double parent = mass(interval - 1, encode_prefix(std::span(iv).first(interval - 1), q));
  if (parent == 0.0) return 0.0;
  return mass(interval, encode_prefix(std::span(iv).first(interval), q)) / parent;
}

double WeightTable::product_weight(const IndexVector& iv) const {
  double w = 1.0;
  for (std::size_t i = 1; i <= iv.size(); ++i) w *= factor(i, iv);
  return w;
}

std::vector<WeightedLeaf> WeightTable::leaves() const {
  std::vector<WeightedLeaf> out;
  if (levels_.empty()) return out;
  const std::size_t k = levels_.size();
  for (const auto& pw : levels_.back()) {
    if (pw.weight > 0.0) out.push_back({decode_prefix(pw.prefix, k, manifest_.formula_size), pw.weight});
  }
  return out;
}

void WeightTable::check_matches(const CubatureFormula& formula, const TimePartition& partition) const {
  if (manifest_.formula_hash != formula_hash(formula)) {
    throw Error(ErrorKind::kManifestMismatch, "weight table was built for a different formula");
  }
  if (manifest_.knots != partition.knots() || levels_.size() != static_cast<std::size_t>(partition.intervals())) {
    throw Error(ErrorKind::kManifestMismatch, "weight table was built for a different partition");
  }
}

// ---------------------------------------------------------------- preprocess

namespace {

struct Atom {
  std::vector<double> point;
  std::vector<PrefixWeight> prefixes;

  double mass() const {
    double m = 0.0;
    for (const auto& p : prefixes) m += p.weight;
    return m;
  }
};

// One KLV step over provenance-carrying atoms; coincident points are merged.
std::vector<Atom> propagate(const std::vector<Atom>& atoms, const CubatureFormula& formula, double s) {
  const std::size_t q = formula.size();
  const double root = std::sqrt(s);
  std::vector<std::vector<double>> ends;
  for (std::size_t j = 0; j < q; ++j) {
    auto e = formula.endpoint(j);
    for (double& x : e) x *= root;
    ends.push_back(std::move(e));
  }
  std::vector<Atom> out;
  std::map<std::vector<double>, std::size_t> index;
  for (const auto& atom : atoms) {
    for (std::size_t j = 0; j < q; ++j) {
      std::vector<double> p = atom.point;
      for (std::size_t c = 0; c < p.size(); ++c) p[c] += ends[j][c];
      auto [it, inserted] = index.try_emplace(p, out.size());
      if (inserted) out.push_back(Atom{std::move(p), {}});
      auto& dst = out[it->second].prefixes;
      for (const auto& pw : atom.prefixes) {
        dst.push_back({pw.prefix * q + j, pw.weight * formula.weights()[j]});
      }
    }
  }
  return out;
}

std::vector<PrefixWeight> snapshot(const std::vector<Atom>& atoms) {
  std::vector<PrefixWeight> level;
  for (const auto& a : atoms) {
    for (const auto& pw : a.prefixes) {
      if (pw.weight > 0.0) level.push_back(pw);
    }
  }
  std::sort(level.begin(), level.end(),
            [](const PrefixWeight& a, const PrefixWeight& b) { return a.prefix < b.prefix; });
  return level;
}

WeightTableManifest base_manifest(const CubatureFormula& formula, const TimePartition& partition) {
  WeightTableManifest m;
  m.formula_hash = formula_hash(formula);
  m.degree = formula.degree();
  m.driving_dim = formula.driving_dim();
  m.formula_size = formula.size();
  m.horizon = partition.horizon();
  m.intervals = partition.intervals();
  m.gamma = partition.gamma();
  m.knots = partition.knots();
  return m;
}

}  // namespace

WeightTable preprocess(const CubatureFormula& formula, const TimePartition& partition,
                       const PreprocessOptions& options, double gamma) {
  const auto started = std::chrono::steady_clock::now();
  const std::size_t k = static_cast<std::size_t>(partition.intervals());
  const std::size_t d_b = static_cast<std::size_t>(formula.driving_dim());
  std::vector<double> radii = options.radii ? *options.radii : partition.radius_schedule(options.p_star, gamma);
  if (radii.size() != k) throw Error(ErrorKind::kDimensionMismatch, "need one radius per interval");
  // Constructing the partition-space tree guards against q^k overflow.
  (void)LeafStream(formula, partition);
  const TestBasis basis(d_b, options.basis_degree);

  WeightTableManifest manifest = base_manifest(formula, partition);
  manifest.basis_degree = options.basis_degree;
  manifest.p_star = options.p_star;
  manifest.radii.assign(k, 0.0);
  std::vector<std::vector<PrefixWeight>> levels;

  auto record = [&](const std::vector<Atom>& atoms, std::size_t outer) {
    levels.push_back(snapshot(atoms));
    manifest.survivors.push_back(levels.back().size());
    manifest.atoms.push_back(atoms.size());
    manifest.outer_iterations.push_back(outer);
  };

  std::vector<Atom> atoms;
  {
    // Interval 1: plain KLV step from the point mass at the origin.
    std::vector<Atom> first;
    std::map<std::vector<double>, std::size_t> index;
    const double root = std::sqrt(partition.step(0));
    for (std::size_t j = 0; j < formula.size(); ++j) {
      auto p = formula.endpoint(j);
      for (double& x : p) x *= root;
      auto [it, inserted] = index.try_emplace(p, first.size());
      if (inserted) first.push_back(Atom{std::move(p), {}});
      first[it->second].prefixes.push_back({j, formula.weights()[j]});
    }
    atoms = std::move(first);
    record(atoms, 0);
  }

  for (std::size_t i = 1; i + 1 < k; ++i) {
    atoms = propagate(atoms, formula, partition.step(i));
    DiscreteMeasure mu(d_b);
    for (const auto& a : atoms) mu.add(a.point, a.mass());
    const Localization loc = localize(mu, radii[i]);
    const ReducedMeasure reduced = rmp(mu, loc, basis);
    manifest.radii[i] = radii[i];

    std::vector<Atom> kept;
    kept.reserve(reduced.source.size());
    for (std::size_t r = 0; r < reduced.source.size(); ++r) {
      Atom a = std::move(atoms[reduced.source[r]]);
      if (a.prefixes.empty()) throw Error(ErrorKind::kMatchFailure, "surviving point carries no tree prefix");
      const double ratio = reduced.measure.weight(r) / mu.weight(reduced.source[r]);
      if (ratio != 1.0) {
        for (auto& pw : a.prefixes) pw.weight *= ratio;
      }
      kept.push_back(std::move(a));
    }
    atoms = std::move(kept);
    record(atoms, reduced.outer_iterations);
  }

  if (k >= 2) {
    atoms = propagate(atoms, formula, partition.step(k - 1));
    record(atoms, 0);
  }
  manifest.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return WeightTable(std::move(manifest), std::move(levels));
}

WeightTable raw_weight_table(const CubatureFormula& formula, const TimePartition& partition) {
  const std::size_t k = static_cast<std::size_t>(partition.intervals());
  const std::size_t q = formula.size();
  std::uint64_t total = 0;
  std::uint64_t width = 1;
  for (std::size_t i = 0; i < k; ++i) {
    width *= q;
    total += width;
    if (total > (std::uint64_t{1} << 24)) {
      throw Error(ErrorKind::kTreeTooLarge, "raw weight table limited to 2^24 entries");
    }
  }
  WeightTableManifest manifest = base_manifest(formula, partition);
  manifest.radii.assign(k, 0.0);
  std::vector<std::vector<PrefixWeight>> levels;
  std::vector<PrefixWeight> prev{{0, 1.0}};
  for (std::size_t i = 0; i < k; ++i) {
    std::vector<PrefixWeight> cur;
    cur.reserve(prev.size() * q);
    for (const auto& pw : prev) {
      for (std::size_t j = 0; j < q; ++j) {
        cur.push_back({pw.prefix * q + j, i == 0 ? formula.weights()[j] : pw.weight * formula.weights()[j]});
      }
    }
    manifest.survivors.push_back(cur.size());
    manifest.atoms.push_back(cur.size());
    manifest.outer_iterations.push_back(0);
    levels.push_back(cur);
    prev = std::move(cur);
  }
  return WeightTable(std::move(manifest), std::move(levels));
}

// ---------------------------------------------------------------- JSON

std::string to_json(const WeightTable& table) {
  const auto& m = table.manifest();
  nlohmann::json doc;
  char hash[32];
  std::snprintf(hash, sizeof(hash), "%016llx", static_cast<unsigned long long>(m.formula_hash));
  doc["manifest"] = {{"formula_hash", hash},
                     {"degree", m.degree},
                     {"dim", m.driving_dim},
                     {"formula_size", m.formula_size},
                     {"horizon", m.horizon},
                     {"k", m.intervals},
                     {"gamma", m.gamma},
                     {"knots", m.knots},
                     {"basis_degree", m.basis_degree},
                     {"p_star", m.p_star},
                     {"radii", m.radii},
                     {"survivors", m.survivors},
                     {"atoms", m.atoms},
                     {"outer_iterations", m.outer_iterations},
                     {"seconds", m.seconds}};
  auto& levels = doc["levels"] = nlohmann::json::array();
  for (const auto& level : table.levels()) {
    auto arr = nlohmann::json::array();
    for (const auto& pw : level) arr.push_back({pw.prefix, pw.weight});
    levels.push_back(std::move(arr));
  }
  return doc.dump();
}

WeightTable weight_table_from_json(std::string_view json) {
  try {
    const auto doc = nlohmann::json::parse(json);
    const auto& j = doc.at("manifest");
    WeightTableManifest m;
    m.formula_hash = std::stoull(j.at("formula_hash").get<std::string>(), nullptr, 16);
    m.degree = j.at("degree").get<int>();
    m.driving_dim = j.at("dim").get<int>();
    m.formula_size = j.at("formula_size").get<std::size_t>();
    m.horizon = j.at("horizon").get<double>();
    m.intervals = j.at("k").get<int>();
    m.gamma = j.at("gamma").get<double>();
    m.knots = j.at("knots").get<std::vector<double>>();
    m.basis_degree = j.at("basis_degree").get<int>();
    m.p_star = j.at("p_star").get<double>();
    m.radii = j.at("radii").get<std::vector<double>>();
    m.survivors = j.at("survivors").get<std::vector<std::size_t>>();
    m.atoms = j.at("atoms").get<std::vector<std::size_t>>();
    m.outer_iterations = j.at("outer_iterations").get<std::vector<std::size_t>>();
    m.seconds = j.at("seconds").get<double>();
    std::vector<std::vector<PrefixWeight>> levels;
    for (const auto& lv : doc.at("levels")) {
      std::vector<PrefixWeight> level;
      for (const auto& e : lv) level.push_back({e.at(0).get<std::uint64_t>(), e.at(1).get<double>()});
      levels.push_back(std::move(level));
    }
    return WeightTable(std::move(m), std::move(levels));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kManifestMismatch, std::string("malformed weight table: ") + e.what());
  } catch (const std::invalid_argument&) {
    throw Error(ErrorKind::kManifestMismatch, "malformed formula hash");
  }
}

}  // namespace wscub
