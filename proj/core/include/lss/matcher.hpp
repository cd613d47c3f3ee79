#pragma once

// Trajectory matching over a low-rank synthetic set.
//
// One meta-step: pick a start epoch, take (theta_start, theta_target) from an
// expert, run N differentiable SGD steps of a fresh student from theta_start
// on synthesized images, and descend the normalized distance to theta_target
// with respect to U, Vt, sigma, label logits and log(alpha).

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "lss/augment.hpp"
#include "lss/convnet.hpp"
#include "lss/expert_buffer.hpp"
#include "lss/lowrank.hpp"
#include "lss/scheduler.hpp"
#include "lss/soft_labels.hpp"

namespace lss::match {

struct MatchConfig {
  std::int64_t student_steps = 20;  // N
  std::int64_t expert_epochs = 2;   // M
  /// 0 selects min(k*m, 64).
  std::int64_t batch_size = 0;
  std::int64_t iterations = 1000;

  double lr_mappers = 1e-3;
  double lr_basis = 1e-2;
  double lr_labels = 1e-2;
  double lr_alpha = 1e-5;
  /// Heavy-ball momentum for the meta-update; 0 is plain SGD.
  double meta_momentum = 0.0;

  double alpha_init = 0.01;
  bool learn_alpha = true;
  /// Labels are learned soft distributions; otherwise fixed round-robin one-hot.
  bool soft_labels = true;

  double clip_norm = 1e4;
  sched::ScheduleConfig schedule;
  aug::AugPolicy augmentation;

  /// When non-empty, every inner step uses exactly these synthetic indices.
  std::vector<std::int64_t> fixed_batch;

  /// Throws ConfigError on violated invariants.
  void validate() const;
  std::int64_t effective_batch(std::int64_t images) const;
};

struct LossRecord {
  std::int64_t iteration = 0;
  std::int64_t start_epoch = 0;
  double loss = 0.0;
  double alpha = 0.0;
  double grad_norm = 0.0;
  bool clipped = false;
};

struct DistillState {
  lowrank::SyntheticDataset dataset;
  labels::LabelBank labels;
  double log_alpha = 0.0;
  /// Mappers are trainable; false for the pixel parameterization.
  bool lowrank = true;
  bool soft_labels = true;
  std::int64_t iteration = 0;
  std::int64_t clip_warnings = 0;
  std::vector<LossRecord> history;

  double alpha() const;
  /// Images in synthesize_all order, [k*m, C, H, W].
  Tensor images() const;
  /// Training targets: softmax of the logits, or round-robin one-hot.
  Tensor targets() const;
};

/// ||student - target||^2 / ||start - target||^2. Throws NumericError when the
/// denominator is below 1e-12.
double matching_loss(const Tensor& student, const Tensor& target, const Tensor& start);
ad::Var matching_loss(const ad::Var& student, const Tensor& target, const Tensor& start);

/// Leaves of the meta-graph for one state; families that are frozen are
/// constants.
struct MetaVars {
  ad::Var u, vt, sigma, logits, log_alpha;
  ad::Var images;   // [k*m, C, H, W]
  ad::Var targets;  // [k*m, num_classes]
  ad::Var alpha;    // scalar
};
MetaVars make_meta_vars(const DistillState& state, const MatchConfig& cfg);

/// N SGD steps from theta0 on synthetic batches. With `differentiable` the
/// result carries the graph back to the meta-parameters. Throws
/// DivergenceError with the step index on a non-finite inner loss.
ad::Var unroll(const MetaVars& vars, const nn::ConvNetSpec& spec, const Tensor& theta0, const MatchConfig& cfg,
               std::mt19937_64& rng, bool differentiable = true);
Tensor inner_unroll(const DistillState& state, const nn::ConvNetSpec& spec, const Tensor& theta0,
                    const MatchConfig& cfg, std::mt19937_64& rng);

struct MetaGradient {
  double loss = 0.0;
  /// Zero-filled for frozen families.
  Tensor u, vt, sigma, logits;
  double log_alpha = 0.0;
  double norm() const;
};

/// Loss and meta-gradient for one expert pair; batch and augmentation draws
/// come from `seed`, so equal seeds give equal objectives.
MetaGradient meta_gradient(const DistillState& state, const nn::ConvNetSpec& spec, const Tensor& theta_start,
                           const Tensor& theta_target, const MatchConfig& cfg, std::uint64_t seed);
/// The same objective without recording a graph.
double matching_objective(const DistillState& state, const nn::ConvNetSpec& spec, const Tensor& theta_start,
                          const Tensor& theta_target, const MatchConfig& cfg, std::uint64_t seed);

/// Meta-optimizer state carried between steps (momentum buffers).
struct MetaOptimizer {
  Tensor u, vt, sigma, logits;
  double log_alpha = 0.0;
};

/// One meta-iteration at state.iteration; returns the recorded loss.
double meta_step(DistillState& state, MetaOptimizer& opt, const expert::ExpertBuffer& buffer,
                 const nn::ConvNetSpec& spec, const MatchConfig& cfg, std::mt19937_64& rng);

struct DistillOptions {
  lowrank::InitScheme init = lowrank::InitScheme::SvdReal;
  labels::LabelInit label_init = labels::LabelInit::RoundRobinSmoothed;
  std::uint64_t seed = 0;
  /// 0 disables periodic checkpoints.
  std::int64_t checkpoint_every = 0;
  std::filesystem::path checkpoint_dir;
  /// Empty disables the loss log.
  std::filesystem::path loss_log;
  std::function<void(const DistillState&, const LossRecord&)> on_step;
};

/// Initial state for a plan: init_dataset + init_labels + log(alpha_init).
DistillState initial_state(const LabeledImages& real, const lowrank::StoragePlan& plan, const MatchConfig& cfg,
                           const DistillOptions& options);

DistillState distill(const LabeledImages& real, const expert::ExpertBuffer& buffer, const lowrank::StoragePlan& plan,
                     const nn::ConvNetSpec& spec, const MatchConfig& cfg, const DistillOptions& options);

/// LSS1 container plus a `<path>.state.json` sidecar holding alpha, iteration
/// and the parameterization flags.
void save_state(const DistillState& state, const std::filesystem::path& path);
/// Without a sidecar, alpha defaults to `default_alpha` and both flags to true.
DistillState load_state(const std::filesystem::path& path, double default_alpha = 0.01);

}  // namespace lss::match
