#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "lss/augment.hpp"
#include "lss/convnet.hpp"
#include "lss/dataset.hpp"
#include "lss/expert_buffer.hpp"
#include "lss/lowrank.hpp"
#include "lss/matcher.hpp"

namespace lss::eval {

struct EvalConfig {
  std::int64_t epochs = 300;
  /// Non-positive selects the learned inner learning rate of the state.
  double lr = 0.01;
  double momentum = 0.9;
  std::int64_t batch_size = 256;
  bool cosine = true;
  aug::AugPolicy augmentation;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  /// Per-seed runs fan out over this many threads.
  int workers = 1;

  void validate() const;
};

struct EvalReport {
  std::string name;
  std::vector<double> accuracies;
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
  std::int64_t train_images = 0;
  double lr = 0.0;
  std::int64_t epochs = 0;
  std::string augmentation;
  std::string network;
  double wall_seconds = 0.0;
};

/// Images [n, C, H, W] with target distributions [n, K].
struct TrainSet {
  Tensor images;
  Tensor targets;
};

/// Trains a fresh network with soft cross-entropy and returns top-1 test accuracy.
double train_and_test(const nn::ConvNetSpec& spec, const TrainSet& train, const LabeledImages& test,
                      const EvalConfig& cfg, double lr, std::uint64_t seed);

EvalReport evaluate_set(const TrainSet& train, const LabeledImages& test, const nn::ConvNetSpec& spec,
                        const EvalConfig& cfg, double lr, const std::string& name);

/// Synthesizes the state's images and evaluates them under every seed.
EvalReport evaluate(const match::DistillState& state, const LabeledImages& test, const nn::ConvNetSpec& spec,
                    const EvalConfig& cfg, const std::string& name = "distilled");

/// ipc real images per class drawn with `seed`, one-hot targets.
TrainSet random_subset(const LabeledImages& real, std::int64_t ipc, std::uint64_t seed);
EvalReport baseline_random_subset(const LabeledImages& real, std::int64_t ipc, const LabeledImages& test,
                                  const nn::ConvNetSpec& spec, const EvalConfig& cfg, std::uint64_t seed);

struct AblationFlags {
  bool soft_labels = false;
  bool progressive = false;
  bool lowrank = false;
  friend bool operator==(const AblationFlags&, const AblationFlags&) = default;
};

/// The eight flag combinations, ordered (soft, progressive, lowrank) as
/// 000, 010, 100, 110, 001, 011, 101, 111.
std::vector<AblationFlags> ablation_order();

struct AblationRow {
  AblationFlags flags;
  lowrank::StoragePlan plan;
  double final_loss = 0.0;
  std::vector<match::LossRecord> history;
  EvalReport report;
};

struct AblationInputs {
  const LabeledImages* real = nullptr;
  const LabeledImages* test = nullptr;
  const expert::ExpertBuffer* buffer = nullptr;
  nn::ConvNetSpec spec;
  std::int64_t ipc = 1;
  std::int64_t rank = 4;
  std::optional<std::int64_t> mappers;
  std::optional<std::int64_t> blocks_per_mapper;
  match::MatchConfig match;
  match::DistillOptions distill;
  EvalConfig eval;
};

/// Distills and evaluates every flag combination with shared seeds.
std::vector<AblationRow> ablation_grid(const AblationInputs& in,
                                       const std::function<void(const AblationRow&)>& on_row = {});

std::string report_json(const EvalReport& report);
std::string ablation_json(const std::vector<AblationRow>& rows);
/// Aligned text table: one row per flag combination.
std::string render_ablation(const std::vector<AblationRow>& rows);

}  // namespace lss::eval
