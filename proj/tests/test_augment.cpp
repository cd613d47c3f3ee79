#include <doctest.h>

#include <cmath>
#include <vector>

#include "lss/augment.hpp"
#include "lss/error.hpp"
#include "test_util.hpp"

using namespace lss;
using namespace lss::aug;
using lss::testing::max_abs_diff;
using lss::testing::random_tensor;

namespace {

const std::vector<AugOp> kAllOps{AugOp::Flip,       AugOp::CropShift, AugOp::Cutout, AugOp::Brightness,
                                 AugOp::Saturation, AugOp::Contrast,  AugOp::Scale,  AugOp::Rotate};

AugPolicy single(AugOp op) {
  AugPolicy p;
  p.ops = {op};
  p.strength.flip_prob = 1.0;
  return p;
}

Tensor run(const Tensor& x, const AugPolicy& p, std::uint64_t seed) { return augment(ad::Var(x), p, seed).value(); }

}  // namespace

TEST_CASE("identity policy") {
  const auto x = random_tensor({3, 3, 8, 8}, 1);
  CHECK(run(x, AugPolicy{}, 7) == x);
  CHECK(parse_policy("").ops.empty());
}

TEST_CASE("flip mirrors columns and is an involution") {
  const auto x = random_tensor({2, 3, 8, 6}, 2);
  const auto p = single(AugOp::Flip);
  const auto once = run(x, p, 3);
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t c = 0; c < 3; ++c)
      for (std::int64_t y = 0; y < 8; ++y)
        for (std::int64_t xx = 0; xx < 6; ++xx)
          CHECK(once[((n * 3 + c) * 8 + y) * 6 + xx] == doctest::Approx(x[((n * 3 + c) * 8 + y) * 6 + 5 - xx]).epsilon(1e-15));
  AugPolicy twice = p;
  twice.ops = {AugOp::Flip, AugOp::Flip};
  CHECK(max_abs_diff(run(x, twice, 3), x) < 1e-15);
}

TEST_CASE("brightness adds one offset per image") {
  const auto x = random_tensor({4, 3, 8, 8}, 4);
  auto p = single(AugOp::Brightness);
  p.strength.brightness = 0.8;
  const auto y = run(x, p, 5);
  const auto img = 3 * 8 * 8;
  std::vector<double> offsets;
  for (std::int64_t n = 0; n < 4; ++n) {
    const double b = y[n * img] - x[n * img];
    offsets.push_back(b);
    CHECK(std::abs(b) <= 0.4);
    for (std::int64_t i = 0; i < img; ++i) CHECK(std::abs(y[n * img + i] - (x[n * img + i] + b)) < 1e-12);
  }
  CHECK(offsets[0] != offsets[1]);
  p.strength.brightness = 0.0;
  CHECK(max_abs_diff(run(x, p, 5), x) == 0.0);
}

TEST_CASE("shape preservation and seed determinism for every op") {
  const auto x = random_tensor({3, 3, 8, 8}, 6);
  for (auto op : kAllOps) {
    const auto p = single(op);
    const auto a = run(x, p, 11), b = run(x, p, 11);
    CHECK(a.shape() == x.shape());
    CHECK(a == b);
    CHECK(a.all_finite());
  }
  const auto full = default_policy(3);
  CHECK(run(x, full, 12) == run(x, full, 12));
  CHECK_FALSE(run(x, full, 12) == run(x, full, 13));
}

TEST_CASE("siamese draws are shared across the batch") {
  const auto one = random_tensor({1, 3, 8, 8}, 7);
  Tensor pair(Shape{2, 3, 8, 8});
  for (std::int64_t i = 0; i < one.numel(); ++i) pair[i] = pair[one.numel() + i] = one[i];
  auto p = default_policy(3);
  p.ops.push_back(AugOp::Scale);
  p.ops.push_back(AugOp::Rotate);
  p.siamese = true;
  const auto y = run(pair, p, 21);
  for (std::int64_t i = 0; i < one.numel(); ++i) CHECK(y[i] == y[one.numel() + i]);
  p.siamese = false;
  const auto z = run(pair, p, 21);
  bool differ = false;
  for (std::int64_t i = 0; i < one.numel(); ++i) differ = differ || z[i] != z[one.numel() + i];
  CHECK(differ);
}

TEST_CASE("gradients reach the input pixels for every op") {
  const auto x = random_tensor({2, 3, 8, 8}, 8);
  const auto dir = random_tensor(x.shape(), 9);
  const auto w = random_tensor(x.shape(), 10);
  for (auto op : kAllOps) {
    auto p = single(op);
    p.strength.flip_prob = 0.5;
    INFO("op " << to_string(op));
    auto f = [&](const Tensor& t) {
      return ad::sum(ad::mul(augment(ad::Var(t), p, 31), ad::Var(w))).item();
    };
    ad::Var xv(x, true);
    const auto g = ad::grad(ad::sum(ad::mul(augment(xv, p, 31), ad::Var(w))), {xv})[0].value();
    double jvp = 0.0;
    for (std::int64_t i = 0; i < x.numel(); ++i) jvp += g[i] * dir[i];
    const double h = 1e-4;
    Tensor xp = x, xm = x;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
      xp[i] += h * dir[i];
      xm[i] -= h * dir[i];
    }
    const double fd = (f(xp) - f(xm)) / (2.0 * h);
    CHECK(std::abs(jvp) > 1e-6);
    CHECK(lss::testing::rel_err(jvp, fd) < 1e-4);
  }
}

TEST_CASE("cutout masks softly and never amplifies") {
  const auto x = Tensor::ones({1, 1, 16, 16});
  auto p = single(AugOp::Cutout);
  const auto y = run(x, p, 4);
  double lo = 1.0;
  for (double v : y.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    lo = std::min(lo, v);
  }
  CHECK(lo < 0.1);
}

TEST_CASE("policy parsing and validation") {
  CHECK(parse_policy("crop_shift, flip ,cutout").ops == std::vector<AugOp>{AugOp::CropShift, AugOp::Flip, AugOp::Cutout});
  CHECK_THROWS_AS(parse_policy("flip,mixup"), ConfigError);
  CHECK(format_ops(default_policy(1).ops) == "crop_shift,flip,cutout,brightness");
  CHECK(format_ops(default_policy(3).ops) == "crop_shift,flip,cutout,brightness,saturation,contrast");
  for (auto op : kAllOps) CHECK(parse_op(to_string(op)) == op);

  AugPolicy p;
  p.strength.shift = 2.0;
  CHECK_NOTHROW(p.validate(16, 16));
  CHECK_THROWS_AS(p.validate(8, 8), ConfigError);
  p = AugPolicy{};
  p.strength.rotate = 20.0;
  CHECK_THROWS_AS(p.validate(32, 32), ConfigError);
  CHECK_THROWS_AS(augment(ad::Var(random_tensor({1, 1, 8, 8}, 1)), p, 1), ConfigError);
  CHECK_THROWS_AS(augment(std::vector<Tensor>{}, AugPolicy{}, 1), InvalidArgument);
}

TEST_CASE("tensor-list overload matches the batched form") {
  const auto x = random_tensor({3, 1, 8, 8}, 12);
  std::vector<Tensor> list;
  for (std::int64_t n = 0; n < 3; ++n)
    list.emplace_back(Shape{1, 8, 8}, std::vector<double>(x.vec().begin() + n * 64, x.vec().begin() + (n + 1) * 64));
  const auto p = default_policy(1);
  const auto a = augment(list, p, 5);
  const auto b = run(x, p, 5);
  REQUIRE(a.size() == 3);
  for (std::int64_t n = 0; n < 3; ++n)
    for (std::int64_t i = 0; i < 64; ++i) CHECK(a[static_cast<std::size_t>(n)][i] == b[n * 64 + i]);
}
