#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "wscub/error.hpp"
#include "wscub/recombination.hpp"

using namespace wscub;

namespace {

// Direct moment sums, independent of TestBasis::moments.
std::vector<double> raw_moments(const DiscreteMeasure& mu, const TestBasis& basis) {
  std::vector<double> out(basis.size() + 1, 0.0);
  for (std::size_t i = 0; i < mu.size(); ++i) {
    out[0] += mu.weight(i);
    for (std::size_t b = 0; b < basis.size(); ++b) {
      double v = 1.0;
      for (std::size_t c = 0; c < mu.dim(); ++c) v *= std::pow(mu.point(i)[c], basis.exponents()[b][c]);
      out[b + 1] += mu.weight(i) * v;
    }
  }
  return out;
}

void check_preserved(const DiscreteMeasure& before, const DiscreteMeasure& after, const TestBasis& basis,
                     double tol) {
  const auto a = raw_moments(before, basis);
  const auto b = raw_moments(after, basis);
  const auto scale = basis.absolute_moments(before);
  CHECK(std::abs(a[0] - b[0]) <= tol * a[0]);
  for (std::size_t i = 1; i < a.size(); ++i) {
    CHECK(std::abs(a[i] - b[i]) <= tol * std::max(scale[i - 1], 1e-300));
  }
}

DiscreteMeasure random_measure(std::size_t n, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  DiscreteMeasure mu(dim);
  std::vector<double> p(dim);
  double total = 0.0;
  std::vector<double> w(n);
  for (auto& x : w) total += (x = 0.1 + u(rng));
  for (std::size_t i = 0; i < n; ++i) {
    for (auto& x : p) x = u(rng);
    mu.add(p, w[i] / total);
  }
  return mu;
}

bool subset(const ReducedMeasure& r, const DiscreteMeasure& input) {
  for (std::size_t i = 0; i < r.measure.size(); ++i) {
    const auto a = r.measure.point(i);
    const auto b = input.point(r.source[i]);
    if (!std::equal(a.begin(), a.end(), b.begin())) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("test basis size and order") {
  CHECK(TestBasis(1, 1).size() == 1);
  CHECK(TestBasis(2, 2).size() == 5);
  CHECK(TestBasis(1, 4).size() == 4);
  CHECK(TestBasis(3, 4).size() == 34);
  const TestBasis b(2, 2);
  CHECK(b.exponents()[0] == std::vector<int>{1, 0});
  CHECK(b.exponents()[2] == std::vector<int>{2, 0});
  const auto v = b.evaluate(std::vector<double>{2.0, 3.0});
  CHECK(v == std::vector<double>{2, 3, 4, 6, 9});
}

TEST_CASE("canonicalize drops zero weights") {
  DiscreteMeasure mu(1, {0, 1, 2}, {0.5, 0.0, 0.5});
  CHECK(mu.canonicalize() == std::vector<std::size_t>{0, 2});
  CHECK(mu.size() == 2);
  CHECK(mu.point(1)[0] == 2.0);
  CHECK_THROWS_AS(DiscreteMeasure(1, {0, 1}, {1.0, -0.5}), Error);
}

TEST_CASE("localization") {
  DiscreteMeasure one(2, {0.3, 0.4}, {1.0});
  CHECK(localize(one, 0.1).balls.size() == 1);
  DiscreteMeasure two(1, {0.0, 1.0}, {0.5, 0.5});
  CHECK(localize(two, 0.3).balls.size() >= 2);

  const auto mu = random_measure(100, 2, 3);
  const auto loc = localize(mu, 0.5);
  CHECK(loc.balls.size() <= 9);
  std::set<std::size_t> seen;
  for (const auto& ball : loc.balls) {
    for (std::size_t i : ball.members) {
      CHECK(seen.insert(i).second);
      const auto p = mu.point(i);
      const double d = std::hypot(p[0] - ball.center[0], p[1] - ball.center[1]);
      CHECK(d <= 0.5 + 1e-15);
    }
  }
  CHECK(seen.size() == 100);
  CHECK_THROWS_AS(localize(DiscreteMeasure(1, {1e300}, {1.0}), 1e-300), Error);
}

TEST_CASE("single reduction step") {
  const TestBasis x(1, 1);
  DiscreteMeasure mu(1, {0, 1, 2}, {1.0 / 3, 1.0 / 3, 1.0 / 3});
  const auto r = reduction_iteration(mu, x);
  REQUIRE(r.measure.size() == 1);
  CHECK(r.measure.point(0)[0] == 1.0);
  CHECK(r.measure.weight(0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(r.source == std::vector<std::size_t>{1});

  DiscreteMeasure pair(1, {-0.7, 0.7}, {0.5, 0.5});
  try {
    reduction_iteration(pair, x);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kNoNullVector);
  }

  const TestBasis b2(2, 2);
  const auto big = random_measure(12, 2, 5);
  const auto step = reduction_iteration(big, b2);
  CHECK(step.measure.size() < big.size());
  check_preserved(big, step.measure, b2, 1e-11);
}

TEST_CASE("recombine") {
  const TestBasis x(1, 1);
  DiscreteMeasure five(1, {0, 1, 2, 3, 4}, {0.2, 0.2, 0.2, 0.2, 0.2});
  const auto r = recombine(five, x);
  CHECK(r.measure.size() <= 2);
  CHECK(r.measure.total_mass() == doctest::Approx(1.0));
  CHECK(x.moments(r.measure)[0] == doctest::Approx(2.0));
  CHECK(subset(r, five));

  DiscreteMeasure small(1, {0, 5}, {0.3, 0.7});
  const auto same = recombine(small, x);
  CHECK(same.measure.weights() == small.weights());
  CHECK(same.measure.points() == small.points());

  const TestBasis b2(2, 2);
  const auto mu = random_measure(1000, 2, 9);
  const auto big = recombine(mu, b2);
  CHECK(big.measure.size() <= 6);
  CHECK(subset(big, mu));
  check_preserved(mu, big.measure, b2, 1e-10);
  const double bound = std::ceil(std::log2(1000.0 / 5.0)) + 1.0;
  CHECK(static_cast<double>(big.outer_iterations) <= bound);
}

TEST_CASE("recombine is deterministic") {
  const TestBasis b(2, 3);
  const auto mu = random_measure(300, 2, 21);
  const auto a = recombine(mu, b);
  const auto c = recombine(mu, b);
  CHECK(a.source == c.source);
  CHECK(a.measure.weights() == c.measure.weights());
}

TEST_CASE("rmp per ball") {
  const TestBasis x(1, 1);
  DiscreteMeasure mu(1);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 0.1);
  for (int i = 0; i < 20; ++i) mu.add(std::vector<double>{u(rng)}, 0.025);
  for (int i = 0; i < 20; ++i) mu.add(std::vector<double>{10.0 + u(rng)}, 0.025);
  const auto loc = localize(mu, 1.0);
  REQUIRE(loc.balls.size() == 2);
  const auto r = rmp(mu, loc, x);
  std::size_t left = 0, right = 0;
  double m_left = 0, m_right = 0, ref_left = 0, ref_right = 0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    (mu.point(i)[0] < 5 ? ref_left : ref_right) += mu.weight(i) * mu.point(i)[0];
  }
  for (std::size_t i = 0; i < r.measure.size(); ++i) {
    const double p = r.measure.point(i)[0];
    if (p < 5) {
      ++left;
      m_left += r.measure.weight(i) * p;
    } else {
      ++right;
      m_right += r.measure.weight(i) * p;
    }
  }
  CHECK(left <= 2);
  CHECK(right <= 2);
  CHECK(m_left == doctest::Approx(ref_left).epsilon(1e-12));
  CHECK(m_right == doctest::Approx(ref_right).epsilon(1e-12));

  const Localization single{100.0, {Ball{{0.0}, [] {
                                          std::vector<std::size_t> v(40);
                                          for (std::size_t i = 0; i < 40; ++i) v[i] = i;
                                          return v;
                                        }()}}};
  const auto a = rmp(mu, single, x);
  const auto b = recombine(mu, x);
  CHECK(a.measure.weights() == b.measure.weights());

  const auto empty = rmp(DiscreteMeasure(1), Localization{1.0, {}}, x);
  CHECK(empty.measure.empty());
}

TEST_CASE("klv step") {
  const auto f = degree3_formula(1);
  DiscreteMeasure delta(1, {0.0}, {1.0});
  const auto one = klv_step(delta, f, 1.0);
  CHECK(one.points() == std::vector<double>{1.0, -1.0});
  CHECK(one.weights() == std::vector<double>{0.5, 0.5});
  const auto two = klv_step(one, f, 1.0);
  std::vector<double> pts = two.points();
  std::sort(pts.begin(), pts.end());
  CHECK(pts == std::vector<double>{-2.0, 0.0, 0.0, 2.0});
  for (double w : two.weights()) CHECK(w == 0.25);
  CHECK(klv_step(two, degree5_formula(1), 0.3).total_mass() == doctest::Approx(1.0).epsilon(1e-15));
  CHECK_THROWS_AS(klv_step(DiscreteMeasure(2, {0, 0}, {1.0}), f, 1.0), Error);
}

TEST_CASE("preprocess with k = 2 returns raw weights") {
  const auto f = degree5_formula(1);
  const auto part = make_partition(1.0, 2, 0.6);
  const auto table = preprocess(f, part, {}, 0.6);
  const auto raw = raw_weight_table(f, part);
  REQUIRE(table.intervals() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    REQUIRE(table.levels()[i].size() == raw.levels()[i].size());
    for (std::size_t j = 0; j < raw.levels()[i].size(); ++j) {
      CHECK(table.levels()[i][j].prefix == raw.levels()[i][j].prefix);
      CHECK(table.levels()[i][j].weight == raw.levels()[i][j].weight);
    }
  }
}

TEST_CASE("preprocess with degree-5 formula and k = 10") {
  const auto f = degree5_formula(1);
  const auto part = make_partition(1.0, 10, 0.6);
  const auto table = preprocess(f, part, {}, 0.6);
  const auto& m = table.manifest();
  CHECK(m.survivors.back() < 59049u);
  for (const auto& level : table.levels()) {
    double s = 0.0;
    for (const auto& pw : level) s += pw.weight;
    CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
  }
  const TestBasis basis(1, 4);
  for (std::size_t i = 1; i + 1 < 10; ++i) {
    CHECK(m.outer_iterations[i] <= std::ceil(std::log2(std::max(1.0, m.atoms[i] * 3.0 / 4.0))) + 1);
  }
  // Telescoping factors reproduce the leaf masses.
  for (const auto& leaf : table.leaves()) {
    CHECK(table.product_weight(leaf.index) == doctest::Approx(leaf.weight).epsilon(1e-12));
  }
  table.check_matches(f, part);
  CHECK_THROWS_AS(table.check_matches(degree3_formula(1), part), Error);
  CHECK_THROWS_AS(table.check_matches(f, make_partition(1.0, 10, 0.5)), Error);

  const auto back = weight_table_from_json(to_json(table));
  CHECK(back.manifest().formula_hash == m.formula_hash);
  CHECK(back.levels().size() == table.levels().size());
  CHECK(back.levels().back().back().weight == table.levels().back().back().weight);
  CHECK_THROWS_AS(weight_table_from_json("{}"), Error);
}

TEST_CASE("recombined levels preserve polynomial moments of the propagated measure") {
  // Level i masses, pushed to their endpoints, match the un-recombined measure's
  // degree-4 moments.
  const auto f = degree5_formula(1);
  const auto part = make_partition(1.0, 6, 0.6);
  const auto table = preprocess(f, part, {}, 0.6);
  const auto raw = raw_weight_table(f, part);
  auto endpoint = [&](std::uint64_t prefix, std::size_t len) {
    const auto iv = decode_prefix(prefix, len, 3);
    double x = 0.0;
    for (std::size_t i = 0; i < len; ++i) x += std::sqrt(part.step(i)) * f.endpoint(iv[i])[0];
    return x;
  };
  for (std::size_t level = 1; level <= 5; ++level) {
    for (int p = 0; p <= 4; ++p) {
      double a = 0.0, b = 0.0;
      for (const auto& pw : table.levels()[level - 1]) a += pw.weight * std::pow(endpoint(pw.prefix, level), p);
      for (const auto& pw : raw.levels()[level - 1]) b += pw.weight * std::pow(endpoint(pw.prefix, level), p);
      CHECK(a == doctest::Approx(b).epsilon(1e-10).scale(1.0));
    }
  }
}
