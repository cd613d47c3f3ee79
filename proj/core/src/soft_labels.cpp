#include "lss/soft_labels.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "lss/error.hpp"

namespace lss::labels {

std::vector<double> distribution(const LabelBank& bank, std::int64_t index) {
  if (index < 0 || index >= bank.rows())
    throw InvalidArgument("distribution: index " + std::to_string(index) + " outside [0, " +
                          std::to_string(bank.rows()) + ")");
  const auto k = bank.classes();
  const double* row = bank.logits.ptr() + index * k;
  const double mx = *std::max_element(row, row + k);
  std::vector<double> p(static_cast<std::size_t>(k));
  double z = 0.0;
  for (std::int64_t c = 0; c < k; ++c) z += (p[static_cast<std::size_t>(c)] = std::exp(row[c] - mx));
  for (auto& v : p) v /= z;
  return p;
}

double soft_cross_entropy(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size() || pred.empty())
    throw InvalidArgument("soft_cross_entropy: prediction and target lengths differ");
  const double mx = *std::max_element(pred.begin(), pred.end());
  double z = 0.0;
  for (double v : pred) z += std::exp(v - mx);
  const double lse = mx + std::log(z);
  double loss = 0.0;
  for (std::size_t c = 0; c < pred.size(); ++c) loss -= target[c] * (pred[c] - lse);
  return loss;
}

ad::Var soft_cross_entropy(const ad::Var& pred_logits, const ad::Var& target) {
  if (pred_logits.shape() != target.shape() || pred_logits.shape().size() != 2)
    throw InvalidArgument("soft_cross_entropy: expected matching [B, K] operands");
  const double batch = static_cast<double>(pred_logits.shape()[0]);
  return ad::scale(ad::sum(ad::mul(target, ad::log_softmax_rows(pred_logits))), -1.0 / batch);
}

LabelInit parse_label_init(const std::string& name) {
  if (name == "round_robin_smoothed") return LabelInit::RoundRobinSmoothed;
  if (name == "random") return LabelInit::Random;
  throw ConfigError("unknown label init '" + name + "' (expected round_robin_smoothed or random)");
}

std::string to_string(LabelInit init) {
  return init == LabelInit::RoundRobinSmoothed ? "round_robin_smoothed" : "random";
}

LabelBank init_labels(const lowrank::StoragePlan& plan, LabelInit scheme, std::uint64_t seed) {
  const auto rows = plan.images, k = plan.num_classes;
  LabelBank bank{Tensor(Shape{rows, k})};
  std::mt19937_64 rng(seed);
  if (scheme == LabelInit::Random) {
    std::normal_distribution<double> nd(0.0, 1.0);
    for (auto& v : bank.logits.data()) v = nd(rng);
  } else {
    std::normal_distribution<double> nd(0.0, 0.1);
    for (std::int64_t j = 0; j < rows; ++j)
      for (std::int64_t c = 0; c < k; ++c) bank.logits[j * k + c] = (c == j % k ? 10.0 : 0.0) + nd(rng);
  }
  return bank;
}

Tensor round_robin_one_hot(std::int64_t rows, std::int64_t classes) {
  Tensor t(Shape{rows, classes});
  for (std::int64_t j = 0; j < rows; ++j) t[j * classes + j % classes] = 1.0;
  return t;
}

}  // namespace lss::labels
