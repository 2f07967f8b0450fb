#include "wscub/cubature_formulas.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>

#include "wscub/error.hpp"
#include "wscub/numeric.hpp"

namespace wscub {

namespace {

constexpr int kMaxSignatureLevel = 8;

std::size_t ipow(std::size_t base, int exp) {
  std::size_t r = 1;
  for (int i = 0; i < exp; ++i) r *= base;
  return r;
}

double factorial(int n) {
  double r = 1.0;
  for (int i = 2; i <= n; ++i) r *= i;
  return r;
}

bool near(double a, double b, double tol) {
  return std::abs(a - b) <= tol * std::max(1.0, std::abs(b));
}

}  // namespace

// ---------------------------------------------------------------- Word

int Word::degree() const noexcept {
  int zeros = 0;
  for (int l : letters_) zeros += (l == 0);
  return static_cast<int>(letters_.size()) + zeros;
}

int Word::max_letter() const noexcept {
  int m = -1;
  for (int l : letters_) m = std::max(m, l);
  return m;
}

std::string Word::to_string() const {
  std::string s = "(";
  for (std::size_t i = 0; i < letters_.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(letters_[i]);
  }
  return s + ")";
}

std::vector<Word> words_up_to_degree(int m, int d_b) {
  if (m < 1 || d_b < 1) throw Error(ErrorKind::kInvalidParameter, "need m >= 1 and d_b >= 1");
  std::vector<Word> out;
  std::vector<int> current;
  // Depth-first over all words whose degree stays within m.
  auto extend = [&](auto&& self, int degree) -> void {
    for (int letter = 0; letter <= d_b; ++letter) {
      const int next = degree + (letter == 0 ? 2 : 1);
      if (next > m) continue;
      current.push_back(letter);
      out.emplace_back(current);
      self(self, next);
      current.pop_back();
    }
  };
  extend(extend, 0);
  std::sort(out.begin(), out.end(), [](const Word& a, const Word& b) {
    if (a.degree() != b.degree()) return a.degree() < b.degree();
    return a.letters() < b.letters();
  });
  return out;
}

// ---------------------------------------------------------------- PiecewisePath

PiecewisePath::PiecewisePath(std::vector<double> breakpoints, std::vector<double> values,
                             std::size_t dim)
    : breakpoints_(std::move(breakpoints)), values_(std::move(values)), dim_(dim) {
  if (dim_ < 2) throw Error(ErrorKind::kInvalidParameter, "path needs a time and a driving component");
  if (breakpoints_.size() < 2) throw Error(ErrorKind::kInvalidParameter, "path needs two breakpoints");
  if (values_.size() != breakpoints_.size() * dim_) {
    throw Error(ErrorKind::kDimensionMismatch, "values do not match breakpoints x dim");
  }
  for (std::size_t j = 0; j < breakpoints_.size(); ++j) {
    if (j > 0 && !(breakpoints_[j] > breakpoints_[j - 1])) {
      throw Error(ErrorKind::kInvalidParameter, "breakpoints must be strictly increasing");
    }
    if (!near(values_[j * dim_], breakpoints_[j], 1e-12)) {
      throw Error(ErrorKind::kInvalidParameter, "time component must equal t at each breakpoint");
    }
    for (std::size_t c = 0; c < dim_; ++c) {
      if (!std::isfinite(values_[j * dim_ + c])) {
        throw Error(ErrorKind::kInvalidParameter, "non-finite path value");
      }
    }
  }
}

std::vector<double> PiecewisePath::increment(std::size_t segment) const {
  std::vector<double> z(dim_);
  for (std::size_t c = 0; c < dim_; ++c) {
    z[c] = values_[(segment + 1) * dim_ + c] - values_[segment * dim_ + c];
  }
  return z;
}

std::vector<double> PiecewisePath::value_at(double t) const {
  t = std::clamp(t, start_time(), end_time());
  auto it = std::upper_bound(breakpoints_.begin(), breakpoints_.end(), t);
  std::size_t j = static_cast<std::size_t>(std::distance(breakpoints_.begin(), it));
  j = std::clamp<std::size_t>(j, 1, breakpoints_.size() - 1) - 1;
  const double h = breakpoints_[j + 1] - breakpoints_[j];
  const double a = (t - breakpoints_[j]) / h;
  std::vector<double> out(dim_);
  for (std::size_t c = 0; c < dim_; ++c) {
    out[c] = (1.0 - a) * values_[j * dim_ + c] + a * values_[(j + 1) * dim_ + c];
  }
  return out;
}

// ---------------------------------------------------------------- TensorSeries

TensorSeries::TensorSeries(int level, int d_b) : level_(level), alphabet_(d_b + 1) {
  if (level < 0 || d_b < 1) throw Error(ErrorKind::kInvalidParameter, "bad tensor series shape");
  levels_.resize(static_cast<std::size_t>(level) + 1);
  for (int n = 0; n <= level; ++n) {
    levels_[static_cast<std::size_t>(n)].assign(ipow(alphabet(), n), 0.0);
  }
}

TensorSeries TensorSeries::unit(int level, int d_b) {
  TensorSeries t(level, d_b);
  t.levels_[0][0] = 1.0;
  return t;
}

std::size_t TensorSeries::index_of(const Word& w) const {
  if (static_cast<int>(w.length()) > level_) {
    throw Error(ErrorKind::kLevelTooLarge, "word longer than truncation level");
  }
  std::size_t idx = 0;
  for (int l : w.letters()) {
    if (l < 0 || l >= alphabet_) throw Error(ErrorKind::kIndexOutOfRange, "letter outside alphabet");
    idx = idx * alphabet() + static_cast<std::size_t>(l);
  }
  return idx;
}

double TensorSeries::coefficient(const Word& w) const {
  return levels_[w.length()][index_of(w)];
}

double& TensorSeries::coefficient(const Word& w) {
  return levels_[w.length()][index_of(w)];
}

TensorSeries TensorSeries::operator*(const TensorSeries& rhs) const {
  if (rhs.alphabet_ != alphabet_) throw Error(ErrorKind::kDimensionMismatch, "alphabet mismatch");
  const int level = std::min(level_, rhs.level_);
  TensorSeries out(level, alphabet_ - 1);
  for (int n = 0; n <= level; ++n) {
    auto& dst = out.levels_[static_cast<std::size_t>(n)];
    for (int l = 0; l <= n; ++l) {
      const auto& a = levels_[static_cast<std::size_t>(l)];
      const auto& b = rhs.levels_[static_cast<std::size_t>(n - l)];
      const std::size_t bsize = b.size();
      for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] == 0.0) continue;
        double* row = dst.data() + i * bsize;
        for (std::size_t j = 0; j < bsize; ++j) row[j] += a[i] * b[j];
      }
    }
  }
  return out;
}

TensorSeries& TensorSeries::operator+=(const TensorSeries& rhs) {
  if (rhs.alphabet_ != alphabet_ || rhs.level_ != level_) {
    throw Error(ErrorKind::kDimensionMismatch, "tensor series shape mismatch");
  }
  for (std::size_t n = 0; n < levels_.size(); ++n) {
    for (std::size_t i = 0; i < levels_[n].size(); ++i) levels_[n][i] += rhs.levels_[n][i];
  }
  return *this;
}

TensorSeries& TensorSeries::operator*=(double s) {
  for (auto& lv : levels_) {
    for (double& x : lv) x *= s;
  }
  return *this;
}

// ---------------------------------------------------------------- signatures

double iterated_integral(const PiecewisePath& path, const Word& word) {
  const std::size_t k = word.length();
  if (word.max_letter() >= static_cast<int>(path.dim())) {
    throw Error(ErrorKind::kIndexOutOfRange, "word letter exceeds path dimension");
  }
  // prefix[j] holds the iterated integral of the first j letters up to the
  // current breakpoint.
  std::vector<double> prefix(k + 1, 0.0);
  prefix[0] = 1.0;
  std::vector<double> inv_fact(k + 1);
  for (std::size_t n = 0; n <= k; ++n) inv_fact[n] = 1.0 / factorial(static_cast<int>(n));

  for (std::size_t s = 0; s < path.segments(); ++s) {
    const auto z = path.increment(s);
    for (std::size_t j = k; j >= 1; --j) {
      double acc = prefix[j];
      double prod = 1.0;
      for (std::size_t l = j; l-- > 0;) {
        prod *= z[static_cast<std::size_t>(word[l])];
        acc += prefix[l] * prod * inv_fact[j - l];
      }
      prefix[j] = acc;
    }
  }
  return prefix[k];
}

TensorSeries signature(const PiecewisePath& path, int level) {
  const int d_b = static_cast<int>(path.driving_dim());
  TensorSeries sig = TensorSeries::unit(level, d_b);
  for (std::size_t s = 0; s < path.segments(); ++s) {
    const auto z = path.increment(s);
    TensorSeries seg = TensorSeries::unit(level, d_b);
    for (int n = 1; n <= level; ++n) {
      const auto& prev = seg.level_data(n - 1);
      auto& cur = seg.level_data(n);
      for (std::size_t i = 0; i < prev.size(); ++i) {
        for (std::size_t c = 0; c < z.size(); ++c) {
          cur[i * z.size() + c] = prev[i] * z[c] / n;
        }
      }
    }
    sig = sig * seg;
  }
  return sig;
}

TensorSeries expected_signature(int level, int d_b, double horizon) {
  if (level < 1) throw Error(ErrorKind::kInvalidParameter, "level must be positive");
  if (level > kMaxSignatureLevel) {
    throw Error(ErrorKind::kLevelTooLarge, "expected signature level capped at 8");
  }
  if (d_b < 1) throw Error(ErrorKind::kInvalidParameter, "d_b must be positive");
  if (!(horizon > 0.0)) throw Error(ErrorKind::kInvalidParameter, "horizon must be positive");

  TensorSeries generator(level, d_b);
  generator.level_data(1)[0] = horizon;
  if (level >= 2) {
    const std::size_t a = static_cast<std::size_t>(d_b) + 1;
    for (std::size_t i = 1; i < a; ++i) generator.level_data(2)[i * a + i] = 0.5 * horizon;
  }
  TensorSeries result = TensorSeries::unit(level, d_b);
  TensorSeries term = TensorSeries::unit(level, d_b);
  for (int n = 1; n <= level; ++n) {
    term = term * generator;
    term *= 1.0 / n;
    result += term;
  }
  return result;
}

// ---------------------------------------------------------------- formulas

CubatureFormula::CubatureFormula(int degree, int d_b, std::vector<PiecewisePath> paths,
                                 std::vector<double> weights)
    : degree_(degree), d_b_(d_b), paths_(std::move(paths)), weights_(std::move(weights)) {
  if (degree_ < 1 || degree_ % 2 == 0) {
    throw Error(ErrorKind::kInvalidParameter, "cubature degree must be odd and positive");
  }
  if (d_b_ < 1) throw Error(ErrorKind::kInvalidParameter, "d_b must be positive");
  if (paths_.empty() || paths_.size() != weights_.size()) {
    throw Error(ErrorKind::kDimensionMismatch, "need one positive weight per path");
  }
  for (double w : weights_) {
    if (!(w > 0.0)) throw Error(ErrorKind::kInvalidParameter, "weights must be strictly positive");
  }
  if (std::abs(compensated_sum(weights_) - 1.0) > 1e-12) {
    throw Error(ErrorKind::kInvalidParameter, "weights must sum to 1");
  }
  std::size_t card_am = 0;
  for (const auto& w : words_up_to_degree(degree_, d_b_)) card_am += (w != Word{0});
  if (paths_.size() > card_am) {
    throw Error(ErrorKind::kInvalidParameter, "more paths than card(A_m)");
  }
  for (const auto& p : paths_) {
    if (p.dim() != static_cast<std::size_t>(d_b_) + 1) {
      throw Error(ErrorKind::kDimensionMismatch, "path dimension must be d_b + 1");
    }
    if (p.start_time() != 0.0 || std::abs(p.end_time() - 1.0) > 1e-15) {
      throw Error(ErrorKind::kInvalidParameter, "formula paths live on [0, 1]");
    }
    for (double x : p.point(0)) {
      if (x != 0.0) throw Error(ErrorKind::kInvalidParameter, "formula paths start at the origin");
    }
  }
}

std::vector<double> CubatureFormula::endpoint(std::size_t j) const {
  const auto& p = path(j);
  const auto last = p.point(p.size() - 1);
  return {last.begin() + 1, last.end()};
}

CubatureFormula degree3_formula(int d_b) {
  if (d_b < 1) throw Error(ErrorKind::kInvalidParameter, "d_b must be positive");
  const std::size_t dim = static_cast<std::size_t>(d_b) + 1;
  const double reach = std::sqrt(static_cast<double>(d_b));
  std::vector<PiecewisePath> paths;
  std::vector<double> weights;
  for (std::size_t i = 1; i < dim; ++i) {
    for (double sign : {1.0, -1.0}) {
      std::vector<double> values(2 * dim, 0.0);
      values[dim] = 1.0;
      values[dim + i] = sign * reach;
      paths.emplace_back(std::vector<double>{0.0, 1.0}, std::move(values), dim);
      weights.push_back(1.0 / (2.0 * d_b));
    }
  }
  return CubatureFormula(3, d_b, std::move(paths), std::move(weights));
}

CubatureFormula degree5_formula(int d_b) {
  if (d_b < 1) throw Error(ErrorKind::kInvalidParameter, "d_b must be positive");
  if (d_b != 1) {
    throw Error(ErrorKind::kUnsupportedDimension, "degree-5 formula implemented for d_b = 1 only");
  }
  // Three linear pieces on thirds of [0,1] with increments (a, b, a). These are
  // the roots of: endpoint = sqrt(3), int_0^1 w^2 dt = 3/2, and a vanishing
  // (1,0,1) iterated integral; the outer weight is then 1/6.
  const double a = 2.0 * std::sqrt(3.0) / 3.0 - std::sqrt(66.0) / 6.0;
  const double b = std::sqrt(66.0) / 3.0 - std::sqrt(3.0) / 3.0;
  const std::vector<double> breaks{0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0};
  auto make = [&](double sign) {
    const std::vector<double> w{0.0, sign * a, sign * (a + b), sign * (a + b + a)};
    std::vector<double> values;
    for (std::size_t j = 0; j < breaks.size(); ++j) {
      values.push_back(breaks[j]);
      values.push_back(w[j] == 0.0 ? 0.0 : w[j]);
    }
    return PiecewisePath(breaks, std::move(values), 2);
  };
  std::vector<PiecewisePath> paths{make(1.0), make(0.0), make(-1.0)};
  return CubatureFormula(5, 1, std::move(paths), {1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0});
}

CubatureFormula make_formula(int degree, int d_b) {
  switch (degree) {
    case 3: return degree3_formula(d_b);
    case 5: return degree5_formula(d_b);
    default:
      throw Error(ErrorKind::kInvalidParameter,
                  "no formula of degree " + std::to_string(degree) + " (available: 3, 5)");
  }
}

// ---------------------------------------------------------------- verification

const WordDefect* VerificationReport::find(const Word& w) const {
  for (const auto& d : defects) {
    if (d.word == w) return &d;
  }
  return nullptr;
}

VerificationReport verify_cubature(const CubatureFormula& formula, int m, double tol) {
  if (m < 1 || m % 2 == 0) throw Error(ErrorKind::kInvalidParameter, "m must be odd and positive");
  VerificationReport report;
  report.degree = m;
  report.tolerance = tol;
  const int d_b = formula.driving_dim();
  const TensorSeries expected = expected_signature(m, d_b, 1.0);
  for (const auto& word : words_up_to_degree(m, d_b)) {
    CompensatedSum acc;
    for (std::size_t j = 0; j < formula.size(); ++j) {
      acc.add(formula.weights()[j] * iterated_integral(formula.path(j), word));
    }
    WordDefect d{word, acc.value(), expected.coefficient(word), 0.0};
    d.defect = std::abs(d.cubature - d.expected);
    if (!report.worst_word || d.defect > report.max_defect) {
      report.max_defect = d.defect;
      report.worst_word = word;
    }
    if (!(d.defect <= tol) && !report.first_offender) report.first_offender = word;
    report.defects.push_back(std::move(d));
  }
  report.passed = !report.first_offender.has_value();
  return report;
}

// ---------------------------------------------------------------- JSON

namespace {

void append_array(std::string& out, std::span<const double> xs) {
  out += '[';
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ',';
    out += format_double17(xs[i]);
  }
  out += ']';
}

}  // namespace

std::string to_json(const CubatureFormula& formula) {
  std::string out = "{\"degree\":" + std::to_string(formula.degree()) +
                    ",\"dim\":" + std::to_string(formula.driving_dim()) + ",\"paths\":[";
  for (std::size_t j = 0; j < formula.size(); ++j) {
    const auto& p = formula.path(j);
    if (j) out += ',';
    out += "{\"breakpoints\":";
    append_array(out, p.breakpoints());
    out += ",\"values\":[";
    for (std::size_t b = 0; b < p.size(); ++b) {
      if (b) out += ',';
      append_array(out, p.point(b));
    }
    out += "]}";
  }
  out += "],\"weights\":";
  append_array(out, formula.weights());
  out += "}";
  return out;
}

CubatureFormula formula_from_json(std::string_view json) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(json);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kManifestMismatch, std::string("unreadable formula JSON: ") + e.what());
  }
  try {
    const int degree = doc.at("degree").get<int>();
    const int d_b = doc.at("dim").get<int>();
    const std::size_t dim = static_cast<std::size_t>(d_b) + 1;
    std::vector<PiecewisePath> paths;
    for (const auto& p : doc.at("paths")) {
      auto breaks = p.at("breakpoints").get<std::vector<double>>();
      std::vector<double> values;
      for (const auto& row : p.at("values")) {
        auto r = row.get<std::vector<double>>();
        if (r.size() != dim) throw Error(ErrorKind::kDimensionMismatch, "path point has wrong dimension");
        values.insert(values.end(), r.begin(), r.end());
      }
      paths.emplace_back(std::move(breaks), std::move(values), dim);
    }
    return CubatureFormula(degree, d_b, std::move(paths),
                           doc.at("weights").get<std::vector<double>>());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kManifestMismatch, std::string("malformed formula JSON: ") + e.what());
  }
}

std::string to_json(const VerificationReport& report) {
  nlohmann::json doc;
  doc["passed"] = report.passed;
  doc["degree"] = report.degree;
  doc["tolerance"] = report.tolerance;
  doc["max_defect"] = report.max_defect;
  doc["worst_word"] = report.worst_word ? nlohmann::json(report.worst_word->letters()) : nlohmann::json();
  doc["offending_word"] =
      report.first_offender ? nlohmann::json(report.first_offender->letters()) : nlohmann::json();
  auto& rows = doc["words"] = nlohmann::json::array();
  for (const auto& d : report.defects) {
    rows.push_back({{"word", d.word.letters()},
                    {"cubature", d.cubature},
                    {"expected", d.expected},
                    {"defect", d.defect}});
  }
  return doc.dump(2);
}

std::uint64_t formula_hash(const CubatureFormula& formula) {
  return fnv1a64(to_json(formula));
}

}  // namespace wscub
