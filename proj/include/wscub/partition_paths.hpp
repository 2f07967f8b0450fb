#pragma once

// Time partitions and the cubature path tree built by concatenating
// Brownian-scaled formula paths over the subintervals.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "wscub/cubature_formulas.hpp"

namespace wscub {

/// 0 = t_0 < ... < t_k = T with t_i = T (1 - (1 - i/k)^gamma).
class TimePartition {
 public:
  TimePartition(double horizon, int k, double gamma, std::vector<double> knots);

  double horizon() const noexcept { return horizon_; }
  int intervals() const noexcept { return k_; }
  double gamma() const noexcept { return gamma_; }
  const std::vector<double>& knots() const noexcept { return knots_; }
  /// s_{i+1} = t_{i+1} - t_i for the i-th subinterval (0-based).
  double step(std::size_t i) const { return knots_.at(i + 1) - knots_.at(i); }
  std::vector<double> steps() const;

  /// u_i = s_i^{p*/(2 gamma)}
  std::vector<double> radius_schedule(double p_star, double gamma) const;

 private:
  double horizon_;
  int k_;
  double gamma_;
  std::vector<double> knots_;
};

TimePartition make_partition(double horizon, int k, double gamma);

/// Maps a unit-interval path onto [offset, offset + s]: Brownian components are
/// scaled by sqrt(s), the time component advances by s.
PiecewisePath scale_path(const PiecewisePath& unit_path, double s, double offset);

/// Per-subinterval choice of formula path, 0-based entries in [0, q).
using IndexVector = std::vector<std::size_t>;

struct CubaturePath {
  PiecewisePath path;
  IndexVector provenance;
};

CubaturePath concat_path(const CubatureFormula& formula, const TimePartition& partition,
                         const IndexVector& iv);

/// Base-q encoding of an index prefix; the first entry is most significant.
std::uint64_t encode_prefix(std::span<const std::size_t> prefix, std::size_t q);
IndexVector decode_prefix(std::uint64_t id, std::size_t length, std::size_t q);

struct WeightedLeaf {
  IndexVector index;
  double weight = 0.0;
};

inline constexpr std::uint64_t kMaxTreeLeaves = std::uint64_t{1} << 40;

/// q^k leaves in lexicographic IndexVector order, generated one at a time.
class LeafStream {
 public:
  LeafStream(const CubatureFormula& formula, const TimePartition& partition);

  std::uint64_t size() const noexcept { return total_; }
  std::optional<WeightedLeaf> next();

 private:
  std::vector<double> weights_;
  std::size_t k_;
  std::uint64_t total_;
  std::uint64_t emitted_ = 0;
  IndexVector current_;
};

LeafStream enumerate_leaves(const CubatureFormula& formula, const TimePartition& partition);

std::string to_json(const TimePartition& partition);

}  // namespace wscub
