#pragma once

// Flat `key = value` run configuration. Keys are namespaced (data.*, plan.*,
// model.*, buffer.*, match.*, schedule.*, eval.*, run.*); every key has a
// default and unknown keys are rejected.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lss/convnet.hpp"
#include "lss/eval.hpp"
#include "lss/expert_buffer.hpp"
#include "lss/lowrank.hpp"
#include "lss/matcher.hpp"

namespace lss::config {

struct KeyInfo {
  std::string key;
  std::string default_value;
  std::string help;
};

const std::vector<KeyInfo>& known_keys();

class RunConfig {
 public:
  /// All keys at their defaults.
  RunConfig();

  /// Parses `key = value` lines; `#` starts a comment. Throws ConfigError on
  /// unknown or repeated keys and malformed lines.
  static RunConfig parse(const std::string& text, const std::string& origin = "<string>");
  static RunConfig load(const std::filesystem::path& path);
  /// Applies the assignments of a config file on top of the current values.
  void merge_file(const std::filesystem::path& path);

  /// Throws ConfigError for unknown keys.
  void set(const std::string& key, const std::string& value);
  /// "key=value" override as given on the command line.
  void apply_override(const std::string& assignment);

  const std::string& get(const std::string& key) const;
  std::int64_t get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  /// "auto" (or empty) maps to nullopt.
  std::optional<std::int64_t> get_auto_int(const std::string& key) const;
  std::vector<std::uint64_t> get_seed_list(const std::string& key) const;

  /// Fully resolved configuration, one sorted `key = value` line per key.
  std::string dump() const;
  void save(const std::filesystem::path& path) const;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;

 private:
  void merge_text(const std::string& text, const std::string& origin);
  std::map<std::string, std::string> values_;
};

/// The bundled desk preset: procedural 2-class 28x28 data, 5 experts x 10
/// epochs, ipc-1 budget, 300 distillation iterations.
RunConfig desk_preset();

nn::ConvNetSpec model_spec(const RunConfig& cfg, const ImageShape& shape, int num_classes);
expert::ExpertConfig expert_config(const RunConfig& cfg, std::int64_t channels);
match::MatchConfig match_config(const RunConfig& cfg, std::int64_t channels);
match::DistillOptions distill_options(const RunConfig& cfg);
eval::EvalConfig eval_config(const RunConfig& cfg, std::int64_t channels);
/// plan.lowrank selects plan_budget, otherwise plan_pixels.
lowrank::StoragePlan storage_plan(const RunConfig& cfg, const ImageShape& shape, int num_classes);

}  // namespace lss::config
