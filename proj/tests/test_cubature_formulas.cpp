#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "oracles.hpp"
#include "wscub/cubature_formulas.hpp"
#include "wscub/error.hpp"

using namespace wscub;

namespace {

PiecewisePath line(std::vector<double> increment) {
  std::vector<double> values(increment.size() + 1, 0.0);
  values.push_back(1.0);
  values.insert(values.end(), increment.begin(), increment.end());
  return PiecewisePath({0.0, 1.0}, values, increment.size() + 1);
}

double weighted(const CubatureFormula& f, const Word& w) {
  double s = 0.0;
  for (std::size_t j = 0; j < f.size(); ++j) s += f.weights()[j] * iterated_integral(f.path(j), w);
  return s;
}

}  // namespace

TEST_CASE("word degree counts zeros twice") {
  CHECK(Word{1, 1}.degree() == 2);
  CHECK(Word{0}.degree() == 2);
  CHECK(Word{1, 0, 2}.degree() == 4);
  CHECK(Word{1, 2}.to_string() == "(1,2)");
}

TEST_CASE("word enumeration is graded and complete") {
  const auto words = words_up_to_degree(3, 1);
  // degree 1: (1); degree 2: (0),(1,1); degree 3: (0,1),(1,0),(1,1,1)
  CHECK(words.size() == 6);
  for (std::size_t i = 1; i < words.size(); ++i) CHECK(words[i - 1].degree() <= words[i].degree());
}

TEST_CASE("iterated integral of simple paths") {
  CHECK(iterated_integral(line({1.0}), Word{1, 1}) == doctest::Approx(0.5));
  CHECK(iterated_integral(line({0.3}), Word{0}) == doctest::Approx(1.0));
  const PiecewisePath zigzag({0.0, 0.5, 1.0}, {0.0, 0.0, 0.5, 1.0, 1.0, 0.0}, 2);
  CHECK(std::abs(iterated_integral(zigzag, Word{1})) < 1e-15);
  CHECK(iterated_integral(line({2.0}), Word{1, 1, 1}) == doctest::Approx(8.0 / 6.0));
}

TEST_CASE("Chen concatenation agrees with fine nested quadrature") {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n01;
  std::uniform_int_distribution<int> letter(0, 2);
  for (int trial = 0; trial < 10; ++trial) {
    const double t1 = 0.2 + 0.6 * std::uniform_real_distribution<double>()(rng);
    std::vector<double> values{0, 0, 0, t1, n01(rng), n01(rng), 1.0, 0, 0};
    values[7] = values[4] + n01(rng);
    values[8] = values[5] + n01(rng);
    const PiecewisePath p({0.0, t1, 1.0}, values, 3);
    for (int len = 1; len <= 4; ++len) {
      std::vector<int> w(static_cast<std::size_t>(len));
      for (int& l : w) l = letter(rng);
      const double exact = iterated_integral(p, Word(w));
      const double fine = oracle::fine_iterated_integral(p, w, 40000);
      CHECK(std::abs(exact - fine) <= 1e-8);
    }
  }
}

TEST_CASE("signature coefficients match single-word integrals") {
  const PiecewisePath p({0.0, 0.4, 1.0}, {0, 0, 0, 0.4, 0.7, -0.2, 1.0, -0.1, 0.5}, 3);
  const auto sig = signature(p, 4);
  for (const auto& w : words_up_to_degree(6, 2)) {
    if (w.length() > 4) continue;
    CHECK(sig.coefficient(w) == doctest::Approx(iterated_integral(p, w)).epsilon(1e-12));
  }
  CHECK(sig.coefficient(Word{}) == 1.0);
}

TEST_CASE("expected signature against block-counting oracle") {
  CHECK(expected_signature(2, 1, 1.0).coefficient(Word{1, 1}) == doctest::Approx(0.5));
  CHECK(expected_signature(2, 2, 1.0).coefficient(Word{1, 2}) == 0.0);
  CHECK(expected_signature(2, 1, 3.0).coefficient(Word{0, 0}) == doctest::Approx(4.5));
  for (double horizon : {1.0, 0.37}) {
    const auto es = expected_signature(6, 2, horizon);
    for (const auto& w : words_up_to_degree(12, 2)) {
      if (w.length() > 6) continue;
      const double ref = oracle::expected_word(w.letters(), horizon);
      CHECK(es.coefficient(w) == doctest::Approx(ref).epsilon(1e-14).scale(1e-14));
      int brownian = 0;
      for (int l : w.letters()) brownian += (l != 0);
      if (brownian % 2 == 1) CHECK(es.coefficient(w) == 0.0);
    }
  }
  CHECK_THROWS_AS(expected_signature(9, 1, 1.0), Error);
}

TEST_CASE("degree-3 formula") {
  const auto f1 = degree3_formula(1);
  CHECK(f1.size() == 2);
  CHECK(f1.weights()[0] == 0.5);
  CHECK(f1.endpoint(0)[0] == doctest::Approx(1.0));
  CHECK(f1.endpoint(1)[0] == doctest::Approx(-1.0));
  CHECK(weighted(f1, Word{1, 1}) == doctest::Approx(0.5));
  for (int d : {1, 2, 3, 5}) {
    const auto f = degree3_formula(d);
    CHECK(f.size() == static_cast<std::size_t>(2 * d));
    const auto rep = verify_cubature(f, 3, 1e-10);
    CHECK(rep.passed);
    CHECK(rep.max_defect <= 1e-12);
    for (int i = 1; i <= d; ++i) CHECK(std::abs(weighted(f, Word{i})) < 1e-15);
  }
}

TEST_CASE("degree-3 formula fails degree 5 on the fourth moment") {
  const auto rep = verify_cubature(degree3_formula(1), 5, 1e-10);
  CHECK_FALSE(rep.passed);
  const auto* d = rep.find(Word{1, 1, 1, 1});
  REQUIRE(d != nullptr);
  CHECK(d->defect == doctest::Approx(1.0 / 12.0));
  CHECK(rep.first_offender.has_value());
  CHECK(rep.max_defect >= 1.0 / 12.0);
}

TEST_CASE("degree-5 formula") {
  const auto f = degree5_formula(1);
  CHECK(f.size() == 3);
  const auto rep = verify_cubature(f, 5, 1e-10);
  CHECK(rep.passed);
  CHECK(weighted(f, Word{1, 1}) == doctest::Approx(0.5));
  CHECK(weighted(f, Word{1, 1, 1, 1}) == doctest::Approx(1.0 / 8.0).epsilon(1e-12));
  CHECK_THROWS_AS(degree5_formula(2), Error);
  try {
    degree5_formula(3);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kUnsupportedDimension);
  }
}

TEST_CASE("infinite tolerance always passes") {
  CHECK(verify_cubature(degree3_formula(2), 7, std::numeric_limits<double>::infinity()).passed);
}

TEST_CASE("formula validation") {
  const auto p = line({1.0});
  CHECK_THROWS_AS(CubatureFormula(3, 1, {p, p}, {0.5, 0.4}), Error);
  CHECK_THROWS_AS(CubatureFormula(3, 1, {p, p}, {1.0, 0.0}), Error);
  CHECK_THROWS_AS(CubatureFormula(4, 1, {p}, {1.0}), Error);
  CHECK_THROWS_AS(PiecewisePath({0.0, 1.0}, {0, 0, 0.5, 1}, 2), Error);
  CHECK_THROWS_AS(make_formula(7, 1), Error);
}

TEST_CASE("formula JSON round trip is exact") {
  const auto f = degree5_formula(1);
  const auto g = formula_from_json(to_json(f));
  CHECK(g.size() == f.size());
  CHECK(g.weights() == f.weights());
  for (std::size_t j = 0; j < f.size(); ++j) CHECK(g.path(j).values() == f.path(j).values());
  CHECK(formula_hash(g) == formula_hash(f));
  CHECK(formula_hash(degree3_formula(1)) != formula_hash(f));
  CHECK_THROWS_AS(formula_from_json("{\"degree\": 3}"), Error);
}
