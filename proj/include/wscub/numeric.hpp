#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace wscub {

/// Neumaier-compensated running sum. Deterministic for a fixed addition order.
class CompensatedSum {
 public:
  void add(double x) noexcept;
  double value() const noexcept { return sum_ + compensation_; }

 private:
  double sum_ = 0.0;
  double compensation_ = 0.0;
};

double compensated_sum(std::span<const double> xs) noexcept;
double compensated_dot(std::span<const double> a, std::span<const double> b);

/// Runs fn(i) for i in [0, count) on up to `workers` threads (0 = hardware
/// concurrency). Each index is visited exactly once; callers write into
/// per-index slots and reduce afterwards in index order.
void parallel_for(std::size_t count, std::size_t workers,
                  const std::function<void(std::size_t)>& fn);

std::size_t default_workers() noexcept;

std::uint64_t splitmix64(std::uint64_t x) noexcept;

/// Seed for stream `index` derived from `root`; independent of worker count.
std::uint64_t derive_seed(std::uint64_t root, std::uint64_t index) noexcept;

/// Composite trapezoid weights on a (possibly non-uniform) grid.
std::vector<double> trapezoid_weights(std::span<const double> grid);

/// %.17g formatting, enough digits to round-trip a double.
std::string format_double17(double x);

/// Least-squares slope of log(y) against log(x).
double loglog_slope(std::span<const double> x, std::span<const double> y);

std::uint64_t fnv1a64(std::string_view bytes) noexcept;

}  // namespace wscub
