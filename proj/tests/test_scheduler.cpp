#include <doctest.h>

#include <boost/math/distributions/chi_squared.hpp>

#include <cmath>
#include <map>
#include <random>

#include "lss/error.hpp"
#include "lss/scheduler.hpp"

using namespace lss;
using namespace lss::sched;

namespace {

ScheduleConfig make(std::int64_t max_start, std::int64_t delta, double w, std::int64_t total) {
  ScheduleConfig c;
  c.max_start = max_start;
  c.delta = delta;
  c.window = w;
  c.total_iterations = total;
  return c;
}

double chi_square_p(const std::map<std::int64_t, int>& counts, std::int64_t lo, std::int64_t hi, int draws) {
  const double expected = static_cast<double>(draws) / static_cast<double>(hi - lo + 1);
  double stat = 0.0;
  for (auto v = lo; v <= hi; ++v) {
    const auto it = counts.find(v);
    const double o = it == counts.end() ? 0.0 : it->second;
    stat += (o - expected) * (o - expected) / expected;
  }
  boost::math::chi_squared dist(static_cast<double>(hi - lo));
  return boost::math::cdf(boost::math::complement(dist, stat));
}

}  // namespace

TEST_CASE("ramp anchors") {
  const auto c = make(40, 2, 3.0, 1000);
  CHECK(max_start_at(0, c) == 2.0);
  CHECK(max_start_at(500, c) == 22.0);
  CHECK(max_start_at(1000, c) == 40.0);
  CHECK(max_start_at(950, c) == 40.0);
}

TEST_CASE("ramp is monotone") {
  for (auto total : {1, 7, 100, 1000}) {
    const auto c = make(25, 3, 2.0, total);
    double prev = -1.0;
    for (std::int64_t it = 0; it <= total; ++it) {
      const double v = max_start_at(it, c);
      CHECK(v >= prev);
      CHECK(v <= 25.0);
      prev = v;
    }
  }
}

TEST_CASE("degenerate window and lower clamp") {
  std::mt19937_64 rng(1);
  const auto c0 = make(40, 2, 0.0, 1000);
  for (std::int64_t it : {0, 123, 500, 999, 1000}) CHECK(sample_start(it, c0, rng) == static_cast<std::int64_t>(std::floor(max_start_at(it, c0))));

  const auto c = make(40, 2, 5.0, 1000);
  std::map<std::int64_t, int> seen;
  for (int i = 0; i < 2000; ++i) ++seen[sample_start(0, c, rng)];
  CHECK(seen.size() == 3);
  CHECK(seen.begin()->first == 0);
  CHECK(seen.rbegin()->first == 2);
}

TEST_CASE("samples stay inside the window for many (it, seed) pairs") {
  std::mt19937_64 meta(2);
  std::uniform_int_distribution<std::int64_t> pick_ms(0, 60), pick_total(1, 3000);
  std::uniform_real_distribution<double> pick_w(0.0, 10.0);
  for (int trial = 0; trial < 10000; ++trial) {
    const auto ms = pick_ms(meta);
    auto c = make(ms, std::uniform_int_distribution<std::int64_t>(0, ms)(meta), pick_w(meta), pick_total(meta));
    const auto it = std::uniform_int_distribution<std::int64_t>(0, c.total_iterations)(meta);
    std::mt19937_64 rng(static_cast<std::uint64_t>(trial));
    const auto s = sample_start(it, c, rng);
    const double top = max_start_at(it, c);
    const auto lo = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::ceil(top - c.window)));
    const auto hi = static_cast<std::int64_t>(std::floor(top));
    // A window narrower than one epoch can fall between two integers; the draw is then floor(top).
    if (lo <= hi) {
      CHECK(s >= lo);
      CHECK(s <= hi);
    } else {
      CHECK(s == hi);
    }
    CHECK(s >= 0);
    CHECK(s <= c.max_start);
    CHECK(static_cast<double>(s) >= top - c.window - 1.0);
  }
}

TEST_CASE("window draws are uniform") {
  // max_start_at(300) = 300/1000 * 40 + 2 = 14, window 4 -> {10, ..., 14}.
  const auto c = make(40, 2, 4.0, 1000);
  std::mt19937_64 rng(3);
  std::map<std::int64_t, int> counts;
  for (int i = 0; i < 10000; ++i) ++counts[sample_start(300, c, rng)];
  CHECK(counts.size() == 5);
  for (auto [v, n] : counts) {
    CHECK(v >= 10);
    CHECK(v <= 14);
    CHECK(std::abs(n - 2000) <= 200);
  }
  CHECK(chi_square_p(counts, 10, 14, 10000) > 0.01);
}

TEST_CASE("non-progressive mode ignores the iteration") {
  auto c = make(6, 2, 1.0, 100);
  c.progressive = false;
  for (std::int64_t it : {0, 50, 100}) {
    std::mt19937_64 rng(4);
    std::map<std::int64_t, int> counts;
    for (int i = 0; i < 7000; ++i) ++counts[sample_start(it, c, rng)];
    CHECK(counts.size() == 7);
    CHECK(chi_square_p(counts, 0, 6, 7000) > 0.01);
  }
}

TEST_CASE("config validation") {
  CHECK_NOTHROW(make(10, 0, 0.0, 1).validate());
  CHECK_THROWS_AS(make(10, 11, 1.0, 10).validate(), ConfigError);
  CHECK_THROWS_AS(make(10, -1, 1.0, 10).validate(), ConfigError);
  CHECK_THROWS_AS(make(10, 2, -1.0, 10).validate(), ConfigError);
  CHECK_THROWS_AS(make(10, 2, 1.0, 0).validate(), ConfigError);
}
