#include "lss/scheduler.hpp"

#include <algorithm>
#include <cmath>

#include "lss/error.hpp"

namespace lss::sched {

void ScheduleConfig::validate() const {
  if (delta < 0 || delta > max_start) throw ConfigError("schedule: require 0 <= delta <= max_start");
  if (!(window >= 0.0)) throw ConfigError("schedule: window must be non-negative");
  if (total_iterations < 1) throw ConfigError("schedule: total_iterations must be at least 1");
}

double max_start_at(std::int64_t it, const ScheduleConfig& cfg) {
  const double ramp = static_cast<double>(it) / static_cast<double>(cfg.total_iterations) *
                          static_cast<double>(cfg.max_start) +
                      static_cast<double>(cfg.delta);
  return std::min(ramp, static_cast<double>(cfg.max_start));
}

std::int64_t sample_start(std::int64_t it, const ScheduleConfig& cfg, std::mt19937_64& rng) {
  std::int64_t lo = 0, hi = cfg.max_start;
  if (cfg.progressive) {
    const double top = max_start_at(it, cfg);
    hi = static_cast<std::int64_t>(std::floor(top));
    lo = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::ceil(top - cfg.window)));
    lo = std::min(lo, hi);
  }
  std::uniform_int_distribution<std::int64_t> ud(lo, hi);
  return ud(rng);
}

}  // namespace lss::sched
