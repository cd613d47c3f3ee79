#pragma once

#include <cstdint>
#include <random>

namespace lss::sched {

/// Progressive expert start-epoch schedule.
struct ScheduleConfig {
  std::int64_t max_start = 20;
  std::int64_t delta = 2;
  double window = 3.0;
  std::int64_t total_iterations = 1000;
  /// When false, start epochs are uniform over [0, max_start] regardless of
  /// iteration.
  bool progressive = true;

  /// Throws ConfigError on violated invariants.
  void validate() const;
};

/// min(it / total * max_start + delta, max_start).
double max_start_at(std::int64_t it, const ScheduleConfig& cfg);

/// Uniform integer in [max(0, ceil(max_start_at - w)), floor(max_start_at)].
std::int64_t sample_start(std::int64_t it, const ScheduleConfig& cfg, std::mt19937_64& rng);

}  // namespace lss::sched
