#pragma once

// Cubature formulas on Wiener space: paths on the unit interval whose iterated
// integrals reproduce the expected Stratonovich signature of time-augmented
// Brownian motion up to a given degree.

#include <compare>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace wscub {

/// Multi-index over {0, ..., d_b}. Letter 0 is the time component and counts
/// twice towards the degree.
class Word {
 public:
  Word() = default;
  Word(std::initializer_list<int> letters) : letters_(letters) {}
  explicit Word(std::vector<int> letters) : letters_(std::move(letters)) {}

  const std::vector<int>& letters() const noexcept { return letters_; }
  std::size_t length() const noexcept { return letters_.size(); }
  int operator[](std::size_t i) const { return letters_[i]; }

  /// length + number of zero letters
  int degree() const noexcept;
  int max_letter() const noexcept;
  std::string to_string() const;

  auto operator<=>(const Word&) const = default;

 private:
  std::vector<int> letters_;
};

/// Words of degree 1..m over {0, ..., d_b}, ordered by degree and then
/// lexicographically. Includes the single word (0) alongside A_m.
std::vector<Word> words_up_to_degree(int m, int d_b);

/// Continuous piecewise-linear path in R^{d_b+1}. Component 0 is time and equals
/// the breakpoint at every breakpoint.
class PiecewisePath {
 public:
  PiecewisePath(std::vector<double> breakpoints, std::vector<double> values, std::size_t dim);

  std::size_t dim() const noexcept { return dim_; }
  std::size_t driving_dim() const noexcept { return dim_ - 1; }
  std::size_t size() const noexcept { return breakpoints_.size(); }
  std::size_t segments() const noexcept { return breakpoints_.size() - 1; }

  const std::vector<double>& breakpoints() const noexcept { return breakpoints_; }
  const std::vector<double>& values() const noexcept { return values_; }
  double breakpoint(std::size_t j) const { return breakpoints_[j]; }
  std::span<const double> point(std::size_t j) const {
    return {values_.data() + j * dim_, dim_};
  }
  double start_time() const noexcept { return breakpoints_.front(); }
  double end_time() const noexcept { return breakpoints_.back(); }

  std::vector<double> increment(std::size_t segment) const;
  std::vector<double> value_at(double t) const;

 private:
  std::vector<double> breakpoints_;
  std::vector<double> values_;  // row-major, size() x dim()
  std::size_t dim_;
};

/// Truncated tensor series over the alphabet {0, ..., d_b}; level n is a dense
/// array of (d_b+1)^n coefficients, word letters read most-significant first.
class TensorSeries {
 public:
  TensorSeries(int level, int d_b);

  static TensorSeries unit(int level, int d_b);

  int level() const noexcept { return level_; }
  int driving_dim() const noexcept { return alphabet_ - 1; }
  std::size_t alphabet() const noexcept { return static_cast<std::size_t>(alphabet_); }

  double coefficient(const Word& w) const;
  double& coefficient(const Word& w);
  std::vector<double>& level_data(int n) { return levels_[static_cast<std::size_t>(n)]; }
  const std::vector<double>& level_data(int n) const { return levels_[static_cast<std::size_t>(n)]; }

  /// Truncated tensor product.
  TensorSeries operator*(const TensorSeries& rhs) const;
  TensorSeries& operator+=(const TensorSeries& rhs);
  TensorSeries& operator*=(double s);

 private:
  std::size_t index_of(const Word& w) const;

  int level_;
  int alphabet_;
  std::vector<std::vector<double>> levels_;
};

/// Exact iterated integral of `word` over 0 < t_1 < ... < t_k < end, computed
/// segment by segment with Chen's relation.
double iterated_integral(const PiecewisePath& path, const Word& word);

/// Truncated signature of the whole path (Chen product of segment exponentials).
TensorSeries signature(const PiecewisePath& path, int level);

/// exp(horizon * (e_0 + 1/2 sum_i e_i e_i)) truncated at `level` (<= 8).
TensorSeries expected_signature(int level, int d_b, double horizon);

class CubatureFormula {
 public:
  CubatureFormula(int degree, int d_b, std::vector<PiecewisePath> paths,
                  std::vector<double> weights);

  int degree() const noexcept { return degree_; }
  int driving_dim() const noexcept { return d_b_; }
  std::size_t size() const noexcept { return paths_.size(); }
  const std::vector<PiecewisePath>& paths() const noexcept { return paths_; }
  const PiecewisePath& path(std::size_t j) const { return paths_.at(j); }
  const std::vector<double>& weights() const noexcept { return weights_; }

  /// Brownian components of the unit-interval endpoint of path j.
  std::vector<double> endpoint(std::size_t j) const;

 private:
  int degree_;
  int d_b_;
  std::vector<PiecewisePath> paths_;
  std::vector<double> weights_;
};

/// 2*d_b straight lines to +-sqrt(d_b) e_i, weights 1/(2 d_b).
CubatureFormula degree3_formula(int d_b);

/// Three-path degree-5 formula for d_b = 1; UnsupportedDimension otherwise.
CubatureFormula degree5_formula(int d_b);

/// Dispatches on degree (3 or 5).
CubatureFormula make_formula(int degree, int d_b);

struct WordDefect {
  Word word;
  double cubature = 0.0;
  double expected = 0.0;
  double defect = 0.0;
};

struct VerificationReport {
  bool passed = true;
  int degree = 0;
  double tolerance = 0.0;
  double max_defect = 0.0;
  std::optional<Word> worst_word;      // argmax of the defect
  std::optional<Word> first_offender;  // first word above tolerance, in word order
  std::vector<WordDefect> defects;     // every tested word

  const WordDefect* find(const Word& w) const;
};

VerificationReport verify_cubature(const CubatureFormula& formula, int m, double tol);

std::string to_json(const CubatureFormula& formula);
CubatureFormula formula_from_json(std::string_view json);
std::string to_json(const VerificationReport& report);

/// FNV-1a of the canonical JSON; used to tie weight tables to formulas.
std::uint64_t formula_hash(const CubatureFormula& formula);

}  // namespace wscub
