#pragma once

// Measure recombination and the pre-processing loop that turns the full cubature
// path tree into a sparse weight table. Everything here works in the driving
// increment space R^{d_b}; no vector field is ever evaluated.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "wscub/cubature_formulas.hpp"
#include "wscub/partition_paths.hpp"

namespace wscub {

/// Weighted point cloud in R^D, points stored row-major.
class DiscreteMeasure {
 public:
  explicit DiscreteMeasure(std::size_t dim) : dim_(dim) {}
  DiscreteMeasure(std::size_t dim, std::vector<double> points, std::vector<double> weights);

  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return weights_.size(); }
  bool empty() const noexcept { return weights_.empty(); }

  std::span<const double> point(std::size_t i) const { return {points_.data() + i * dim_, dim_}; }
  const std::vector<double>& points() const noexcept { return points_; }
  const std::vector<double>& weights() const noexcept { return weights_; }
  double weight(std::size_t i) const { return weights_[i]; }

  void add(std::span<const double> point, double weight);
  double total_mass() const;

  /// Drops zero-weight atoms; returns the surviving original indices.
  std::vector<std::size_t> canonicalize();

 private:
  std::size_t dim_;
  std::vector<double> points_;
  std::vector<double> weights_;
};

/// Monomials of total degree 1..degree in D variables, graded-lex order.
/// Constants are excluded; mass is enforced separately.
class TestBasis {
 public:
  TestBasis(std::size_t dim, int degree);

  std::size_t dim() const noexcept { return dim_; }
  int degree() const noexcept { return degree_; }
  /// N_p = C(D + degree, degree) - 1
  std::size_t size() const noexcept { return exponents_.size(); }
  const std::vector<std::vector<int>>& exponents() const noexcept { return exponents_; }

  void evaluate(std::span<const double> x, std::span<double> out) const;
  std::vector<double> evaluate(std::span<const double> x) const;
  /// sum_i w_i p(z_i) for every basis polynomial p
  std::vector<double> moments(const DiscreteMeasure& mu) const;
  /// sum_i w_i |p(z_i)|, the scale used for relative moment checks
  std::vector<double> absolute_moments(const DiscreteMeasure& mu) const;

 private:
  std::size_t dim_;
  int degree_;
  std::vector<std::vector<int>> exponents_;
};

struct Ball {
  std::vector<double> center;
  std::vector<std::size_t> members;  // ascending point indices
};

/// Disjoint cover of a measure's support by balls of a common radius.
struct Localization {
  double radius = 0.0;
  std::vector<Ball> balls;
};

/// Grid localization: cells of width 2 u / sqrt(D), each inscribed in a ball of
/// radius u around the cell centre. Balls are ordered by cell index.
Localization localize(const DiscreteMeasure& measure, double radius);

/// A reduced measure together with the indices of the input atoms it kept.
struct ReducedMeasure {
  DiscreteMeasure measure;
  std::vector<std::size_t> source;  // measure atom i is input atom source[i]
  std::size_t outer_iterations = 0;
};

/// One null-vector step: removes at least one atom while preserving mass and
/// every basis moment. Throws NoNullVector when the (N_p+1) x n constraint
/// matrix has full column rank.
ReducedMeasure reduction_iteration(const DiscreteMeasure& measure, const TestBasis& basis);

/// Support <= N_p + 1, support contained in the input, mass and basis moments
/// preserved. Halves the support per outer iteration by reducing cluster
/// barycentres.
ReducedMeasure recombine(const DiscreteMeasure& measure, const TestBasis& basis);

/// recombine applied independently inside every ball of the localization.
ReducedMeasure rmp(const DiscreteMeasure& measure, const Localization& localization,
                   const TestBasis& basis);

/// Propagates each atom by every s-scaled formula endpoint; atom-major order.
DiscreteMeasure klv_step(const DiscreteMeasure& measure, const CubatureFormula& formula, double s);

struct PrefixWeight {
  std::uint64_t prefix = 0;
  double weight = 0.0;
};

struct WeightTableManifest {
  std::uint64_t formula_hash = 0;
  int degree = 0;
  int driving_dim = 0;
  std::size_t formula_size = 0;
  double horizon = 0.0;
  int intervals = 0;
  double gamma = 0.0;
  std::vector<double> knots;
  int basis_degree = 0;
  double p_star = 0.0;
  std::vector<double> radii;          // radius used at each recombined interval (0 = none)
  std::vector<std::size_t> survivors; // surviving prefixes per interval
  std::vector<std::size_t> atoms;     // distinct support points per interval
  std::vector<std::size_t> outer_iterations;
  double seconds = 0.0;
};

/// Per-interval masses of the surviving tree prefixes. levels[i] lists the
/// length-(i+1) prefixes with positive mass, sorted by prefix id; each level
/// sums to 1. The last level holds the leaves.
class WeightTable {
 public:
  WeightTable(WeightTableManifest manifest, std::vector<std::vector<PrefixWeight>> levels);

  const WeightTableManifest& manifest() const noexcept { return manifest_; }
  const std::vector<std::vector<PrefixWeight>>& levels() const noexcept { return levels_; }
  std::size_t intervals() const noexcept { return levels_.size(); }

  /// Mass of a prefix of length `level`; 0 when it did not survive.
  double mass(std::size_t level, std::uint64_t prefix) const;

  /// Per-interval factor lambda~ for interval i (1-based): the prefix mass at
  /// level i divided by the parent mass at level i-1. The product over all
  /// intervals telescopes to the leaf mass.
  double factor(std::size_t interval, const IndexVector& iv) const;
  double product_weight(const IndexVector& iv) const;

  /// Leaves with positive weight, in prefix order.
  std::vector<WeightedLeaf> leaves() const;

  /// Throws ManifestMismatch unless the table was built for this formula and partition.
  void check_matches(const CubatureFormula& formula, const TimePartition& partition) const;

 private:
  WeightTableManifest manifest_;
  std::vector<std::vector<PrefixWeight>> levels_;
};

struct PreprocessOptions {
  int basis_degree = 4;
  double p_star = 1.0;
  /// Overrides the s_i^{p*/(2 gamma)} schedule; one entry per interval.
  std::optional<std::vector<double>> radii;
};

/// Alternates klv_step and rmp over the partition (recombining intervals
/// 2..k-1) and reads the surviving prefix masses off by provenance.
WeightTable preprocess(const CubatureFormula& formula, const TimePartition& partition,
                       const PreprocessOptions& options, double gamma);

/// Raw product weights of the full tree (what preprocess returns for k <= 2).
WeightTable raw_weight_table(const CubatureFormula& formula, const TimePartition& partition);

std::string to_json(const WeightTable& table);
WeightTable weight_table_from_json(std::string_view json);

}  // namespace wscub
