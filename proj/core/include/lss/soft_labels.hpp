#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lss/autodiff.hpp"
#include "lss/lowrank.hpp"

namespace lss::labels {

/// Trainable label logits; row j belongs to image j of the synthesize_all order.
struct LabelBank {
  Tensor logits;  // [k*m, num_classes]

  std::int64_t rows() const { return logits.dim(0); }
  std::int64_t classes() const { return logits.dim(1); }
};

/// Numerically stable softmax of one logit row.
std::vector<double> distribution(const LabelBank& bank, std::int64_t index);

/// -sum_c target[c] * log_softmax(pred)[c].
double soft_cross_entropy(std::span<const double> pred_logits, std::span<const double> target);

/// Batch mean of the soft cross-entropy between rows of pred [B, K] and
/// target distributions [B, K]. Differentiable in both arguments.
ad::Var soft_cross_entropy(const ad::Var& pred_logits, const ad::Var& target);

enum class LabelInit { RoundRobinSmoothed, Random };
LabelInit parse_label_init(const std::string& name);
std::string to_string(LabelInit init);

/// round_robin_smoothed: row j is 10 * onehot(j mod K) + N(0, 0.1^2) noise.
/// random: i.i.d. N(0, 1).
LabelBank init_labels(const lowrank::StoragePlan& plan, LabelInit scheme, std::uint64_t seed);

/// Exact one-hot targets for class j mod K, used when labels are not learned.
Tensor round_robin_one_hot(std::int64_t rows, std::int64_t classes);

}  // namespace lss::labels
