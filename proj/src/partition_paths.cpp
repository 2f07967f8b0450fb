#include "wscub/partition_paths.hpp"

#include <cmath>
#include <json.hpp>

#include "wscub/error.hpp"

namespace wscub {

TimePartition::TimePartition(double horizon, int k, double gamma, std::vector<double> knots)
    : horizon_(horizon), k_(k), gamma_(gamma), knots_(std::move(knots)) {
  if (knots_.size() != static_cast<std::size_t>(k_) + 1) {
    throw Error(ErrorKind::kDimensionMismatch, "partition needs k + 1 knots");
  }
  if (knots_.front() != 0.0 || knots_.back() != horizon_) {
    throw Error(ErrorKind::kInvalidParameter, "partition must start at 0 and end at T");
  }
  for (std::size_t i = 1; i < knots_.size(); ++i) {
    if (!(knots_[i] > knots_[i - 1])) {
      throw Error(ErrorKind::kInvalidParameter, "partition steps must be positive");
    }
  }
}

std::vector<double> TimePartition::steps() const {
  std::vector<double> s(static_cast<std::size_t>(k_));
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = step(i);
  return s;
}

std::vector<double> TimePartition::radius_schedule(double p_star, double gamma) const {
  if (!(p_star > 0.0) || !(gamma > 0.0)) {
    throw Error(ErrorKind::kInvalidParameter, "p* and gamma must be positive");
  }
  std::vector<double> u = steps();
  for (double& x : u) x = std::pow(x, p_star / (2.0 * gamma));
  return u;
}

TimePartition make_partition(double horizon, int k, double gamma) {
  if (!(horizon > 0.0) || k < 1 || !(gamma > 0.0)) {
    throw Error(ErrorKind::kInvalidParameter, "partition needs T > 0, k >= 1, gamma > 0");
  }
  std::vector<double> knots(static_cast<std::size_t>(k) + 1);
  knots.front() = 0.0;
  for (int i = 1; i < k; ++i) {
    knots[static_cast<std::size_t>(i)] =
        horizon * (1.0 - std::pow(1.0 - static_cast<double>(i) / k, gamma));
  }
  knots.back() = horizon;
  return TimePartition(horizon, k, gamma, std::move(knots));
}

PiecewisePath scale_path(const PiecewisePath& unit_path, double s, double offset) {
  if (!(s > 0.0)) throw Error(ErrorKind::kInvalidParameter, "scale must be positive");
  const double root = std::sqrt(s);
  const std::size_t dim = unit_path.dim();
  std::vector<double> breaks(unit_path.size());
  std::vector<double> values(unit_path.values().size());
  for (std::size_t j = 0; j < unit_path.size(); ++j) {
    breaks[j] = offset + s * unit_path.breakpoint(j);
    const auto p = unit_path.point(j);
    values[j * dim] = breaks[j];
    for (std::size_t c = 1; c < dim; ++c) values[j * dim + c] = root * p[c];
  }
  return PiecewisePath(std::move(breaks), std::move(values), dim);
}

CubaturePath concat_path(const CubatureFormula& formula, const TimePartition& partition,
                         const IndexVector& iv) {
  const std::size_t k = static_cast<std::size_t>(partition.intervals());
  if (iv.size() != k) throw Error(ErrorKind::kIndexOutOfRange, "index vector length must equal k");
  const std::size_t dim = static_cast<std::size_t>(formula.driving_dim()) + 1;
  const auto& knots = partition.knots();

  std::vector<double> breaks{0.0};
  std::vector<double> values(dim, 0.0);
  std::vector<double> origin(dim, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    if (iv[i] >= formula.size()) throw Error(ErrorKind::kIndexOutOfRange, "formula path index out of range");
    const PiecewisePath piece = scale_path(formula.path(iv[i]), partition.step(i), knots[i]);
    for (std::size_t c = 1; c < dim; ++c) origin[c] = values[values.size() - dim + c];
    for (std::size_t j = 1; j < piece.size(); ++j) {
      // Pin the segment end to the knot so every leaf shares the same grid.
      const double t = (j + 1 == piece.size()) ? knots[i + 1] : piece.breakpoint(j);
      breaks.push_back(t);
      values.push_back(t);
      const auto p = piece.point(j);
      for (std::size_t c = 1; c < dim; ++c) values.push_back(origin[c] + p[c]);
    }
  }
  return {PiecewisePath(std::move(breaks), std::move(values), dim), iv};
}

std::uint64_t encode_prefix(std::span<const std::size_t> prefix, std::size_t q) {
  std::uint64_t id = 0;
  for (std::size_t e : prefix) {
    if (e >= q) throw Error(ErrorKind::kIndexOutOfRange, "prefix entry out of range");
    id = id * q + e;
  }
  return id;
}

IndexVector decode_prefix(std::uint64_t id, std::size_t length, std::size_t q) {
  IndexVector iv(length);
  for (std::size_t i = length; i-- > 0;) {
    iv[i] = static_cast<std::size_t>(id % q);
    id /= q;
  }
  return iv;
}

LeafStream::LeafStream(const CubatureFormula& formula, const TimePartition& partition)
    : weights_(formula.weights()), k_(static_cast<std::size_t>(partition.intervals())) {
  total_ = 1;
  for (std::size_t i = 0; i < k_; ++i) {
    if (total_ > kMaxTreeLeaves / weights_.size()) {
      throw Error(ErrorKind::kTreeTooLarge, "q^k exceeds 2^40 leaves");
    }
    total_ *= weights_.size();
  }
  current_.assign(k_, 0);
}

std::optional<WeightedLeaf> LeafStream::next() {
  if (emitted_ == total_) return std::nullopt;
  WeightedLeaf leaf{current_, 1.0};
  for (std::size_t e : current_) leaf.weight *= weights_[e];
  ++emitted_;
  for (std::size_t i = k_; i-- > 0;) {
    if (++current_[i] < weights_.size()) break;
    current_[i] = 0;
  }
  return leaf;
}

LeafStream enumerate_leaves(const CubatureFormula& formula, const TimePartition& partition) {
  return LeafStream(formula, partition);
}

std::string to_json(const TimePartition& partition) {
  nlohmann::json doc;
  doc["horizon"] = partition.horizon();
  doc["k"] = partition.intervals();
  doc["gamma"] = partition.gamma();
  doc["knots"] = partition.knots();
  return doc.dump();
}

}  // namespace wscub
