#include <doctest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "lss/error.hpp"
#include "lss/lowrank.hpp"
#include "lss/soft_labels.hpp"
#include "test_util.hpp"

using namespace lss;
using namespace lss::labels;
using lss::testing::random_tensor;

namespace {

LabelBank bank_of(std::vector<double> row) {
  const auto n = static_cast<std::int64_t>(row.size());
  return {Tensor(Shape{1, n}, std::move(row))};
}

lowrank::StoragePlan plan_with_images(std::int64_t images, std::int64_t classes) {
  lowrank::StoragePlan p;
  p.images = images;
  p.mappers = 1;
  p.blocks_per_mapper = images;
  p.num_classes = classes;
  return p;
}

}  // namespace

TEST_CASE("distribution of zero logits is uniform") {
  const auto p = distribution(bank_of(std::vector<double>(4, 0.0)), 0);
  for (double v : p) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("distribution approaches one-hot") {
  const auto p = distribution(bank_of({20.0, 0.0, 0.0, 0.0}), 0);
  CHECK(p[0] > 1.0 - 1e-8);
}

TEST_CASE("distribution against a direct oracle") {
  const auto p = distribution(bank_of({1.0, 2.0, 3.0}), 0);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  CHECK(std::abs(p[0] - std::exp(1.0) / z) < 1e-10);
  CHECK(std::abs(p[1] - std::exp(2.0) / z) < 1e-10);
  CHECK(std::abs(p[2] - std::exp(3.0) / z) < 1e-10);
  CHECK_THROWS_AS(distribution(bank_of({1.0, 2.0}), 1), InvalidArgument);
  CHECK_THROWS_AS(distribution(bank_of({1.0, 2.0}), -1), InvalidArgument);
}

TEST_CASE("distribution rows sum to one for extreme logits") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    for (double scale : {1.0, 1e2, 1e4}) {
      const auto t = random_tensor({3, 7}, seed, scale);
      LabelBank bank{t};
      for (std::int64_t r = 0; r < 3; ++r) {
        const auto p = distribution(bank, r);
        double s = 0.0;
        for (double v : p) {
          CHECK(std::isfinite(v));
          CHECK(v >= 0.0);
          CHECK(v <= 1.0);
          s += v;
        }
        CHECK(std::abs(s - 1.0) < 1e-6);
      }
    }
  }
}

TEST_CASE("soft cross-entropy anchors") {
  const std::vector<double> logits{0.3, -1.2, 2.0};
  double lse = 0.0;
  for (double v : logits) lse += std::exp(v);
  lse = std::log(lse);
  for (int c = 0; c < 3; ++c) {
    std::vector<double> onehot(3, 0.0);
    onehot[c] = 1.0;
    CHECK(std::abs(soft_cross_entropy(logits, onehot) - (lse - logits[c])) < 1e-10);
  }

  const std::vector<double> flat(5, 0.7);
  CHECK(std::abs(soft_cross_entropy(flat, std::vector<double>{0.1, 0.2, 0.3, 0.2, 0.2}) - std::log(5.0)) < 1e-12);

  // pred (0.5, -0.5), target (0.7, 0.3).
  const double l0 = 0.5 - std::log(std::exp(0.5) + std::exp(-0.5));
  const double l1 = -0.5 - std::log(std::exp(0.5) + std::exp(-0.5));
  const double expected = -(0.7 * l0 + 0.3 * l1);
  CHECK(std::abs(soft_cross_entropy(std::vector<double>{0.5, -0.5}, std::vector<double>{0.7, 0.3}) - expected) < 1e-10);

  CHECK_THROWS_AS(soft_cross_entropy(std::vector<double>{0.5, -0.5}, std::vector<double>{1.0}), InvalidArgument);
}

TEST_CASE("soft cross-entropy is non-negative and minimized at the matching distribution") {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto p = random_tensor({1, 6}, seed, 2.0), q = random_tensor({1, 6}, seed + 5000, 2.0);
    const auto target = distribution(LabelBank{p}, 0);
    const double self = soft_cross_entropy(p.vec(), target);
    const double other = soft_cross_entropy(q.vec(), target);
    CHECK(self >= 0.0);
    CHECK(other >= 0.0);
    CHECK(self <= other + 1e-10);
  }
}

TEST_CASE("batched soft cross-entropy matches the scalar form") {
  const auto pred = random_tensor({4, 3}, 11), tl = random_tensor({4, 3}, 12);
  const auto target = ad::softmax_rows(ad::Var(tl)).value();
  const double batched = soft_cross_entropy(ad::Var(pred), ad::Var(target)).item();
  double mean = 0.0;
  for (int r = 0; r < 4; ++r) {
    std::vector<double> pr(pred.vec().begin() + r * 3, pred.vec().begin() + r * 3 + 3);
    std::vector<double> tr(target.vec().begin() + r * 3, target.vec().begin() + r * 3 + 3);
    mean += soft_cross_entropy(pr, tr) / 4.0;
  }
  CHECK(batched == doctest::Approx(mean).epsilon(1e-12));
  CHECK_THROWS_AS(soft_cross_entropy(ad::Var(pred), ad::Var(random_tensor({4, 2}, 1))), InvalidArgument);
}

TEST_CASE("label gradients match finite differences") {
  const auto pred = random_tensor({3, 4}, 21);
  const auto logits = random_tensor({3, 4}, 22);
  // Through the target distribution directly.
  auto loss_t = [&](const ad::Var& t) { return soft_cross_entropy(ad::Var(pred), t); };
  const auto target = ad::softmax_rows(ad::Var(logits)).value();
  const auto g = lss::testing::ad_grad(loss_t, target);
  auto fv = [&](const Tensor& t) { return loss_t(ad::Var(t)).item(); };
  for (std::int64_t i = 0; i < target.numel(); ++i)
    CHECK(lss::testing::rel_err(g[i], lss::testing::central_diff(fv, target, i, 1e-6)) < 1e-5);

  // Through the label logits.
  auto loss_l = [&](const ad::Var& l) { return soft_cross_entropy(ad::Var(pred), ad::softmax_rows(l)); };
  const auto gl = lss::testing::ad_grad(loss_l, logits);
  auto fl = [&](const Tensor& t) { return loss_l(ad::Var(t)).item(); };
  for (std::int64_t i = 0; i < logits.numel(); ++i)
    CHECK(lss::testing::rel_err(gl[i], lss::testing::central_diff(fl, logits, i, 1e-6), 1e-7) < 1e-5);

  // And through the predictions.
  auto loss_p = [&](const ad::Var& p) { return soft_cross_entropy(p, ad::Var(target)); };
  const auto gp = lss::testing::ad_grad(loss_p, pred);
  auto fp = [&](const Tensor& t) { return loss_p(ad::Var(t)).item(); };
  for (std::int64_t i = 0; i < pred.numel(); ++i)
    CHECK(lss::testing::rel_err(gp[i], lss::testing::central_diff(fp, pred, i, 1e-6), 1e-7) < 1e-5);
}

TEST_CASE("round-robin init is class balanced and confident") {
  const auto bank = init_labels(plan_with_images(330, 10), LabelInit::RoundRobinSmoothed, 3);
  CHECK(bank.rows() == 330);
  CHECK(bank.classes() == 10);
  std::vector<int> counts(10, 0);
  double max_prob = 0.0;
  for (std::int64_t r = 0; r < 330; ++r) {
    const auto p = distribution(bank, r);
    const auto arg = std::max_element(p.begin(), p.end()) - p.begin();
    ++counts[static_cast<std::size_t>(arg)];
    CHECK(arg == r % 10);
    max_prob += p[static_cast<std::size_t>(arg)] / 330.0;
  }
  for (int c : counts) CHECK(c >= 30);
  CHECK(max_prob > 0.99);
}

TEST_CASE("random init is reproducible and standard normal") {
  const auto a = init_labels(plan_with_images(400, 5), LabelInit::Random, 8);
  const auto b = init_labels(plan_with_images(400, 5), LabelInit::Random, 8);
  const auto c = init_labels(plan_with_images(400, 5), LabelInit::Random, 9);
  CHECK(a.logits == b.logits);
  CHECK_FALSE(a.logits == c.logits);
  const auto& v = a.logits.vec();
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean) / static_cast<double>(v.size());
  CHECK(std::abs(mean) < 0.1);
  CHECK(var == doctest::Approx(1.0).epsilon(0.1));
}

TEST_CASE("one-hot targets and init names") {
  const auto t = round_robin_one_hot(5, 3);
  CHECK(t.shape() == Shape{5, 3});
  for (std::int64_t r = 0; r < 5; ++r)
    for (std::int64_t c = 0; c < 3; ++c) CHECK(t[r * 3 + c] == (c == r % 3 ? 1.0 : 0.0));
  CHECK(parse_label_init("round_robin_smoothed") == LabelInit::RoundRobinSmoothed);
  CHECK(parse_label_init("random") == LabelInit::Random);
  CHECK(to_string(LabelInit::Random) == "random");
  CHECK_THROWS_AS(parse_label_init("uniform"), ConfigError);
}
