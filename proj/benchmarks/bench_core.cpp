#include <benchmark/benchmark.h>

#include <random>

#include "lss/augment.hpp"
#include "lss/binary_io.hpp"
#include "lss/convnet.hpp"
#include "lss/lowrank.hpp"
#include "lss/matcher.hpp"
#include "toy_problem.hpp"

using namespace lss;

namespace {

Tensor noise(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = n(rng);
  return t;
}

void BM_TruncatedSvd(benchmark::State& st) {
  const auto img = noise({3, 32, 32}, 1);
  for (auto _ : st) benchmark::DoNotOptimize(lowrank::truncated_svd(img, st.range(0)));
}
BENCHMARK(BM_TruncatedSvd)->Arg(4)->Arg(16);

void BM_SynthesizeStacked(benchmark::State& st) {
  const auto plan = lowrank::plan_budget(3, 32, 32, 10, 1, 4, 15, 22);
  lowrank::DatasetMeta meta{3, 32, 32, 4, plan.mappers, plan.blocks_per_mapper, 10};
  const ad::Var u(noise({plan.mappers, 3, 32, 4}, 2)), vt(noise({plan.mappers, 3, 4, 32}, 3)),
      sigma(noise({plan.images, 3, 4, 4}, 4));
  for (auto _ : st) benchmark::DoNotOptimize(lowrank::synthesize_stacked(u, vt, sigma, meta));
}
BENCHMARK(BM_SynthesizeStacked);

void BM_ConvNetForward(benchmark::State& st) {
  nn::ConvNetSpec spec;
  spec.channels = 1;
  spec.height = spec.width = 28;
  spec.num_classes = 2;
  spec.net_width = 16;
  const auto params = nn::init_params(spec, 0);
  const auto batch = noise({st.range(0), 1, 28, 28}, 5);
  for (auto _ : st) benchmark::DoNotOptimize(nn::forward(spec, params, batch));
  st.SetItemsProcessed(st.iterations() * st.range(0));
}
BENCHMARK(BM_ConvNetForward)->Arg(16)->Arg(64);

void BM_Augment(benchmark::State& st) {
  const ad::Var batch(noise({16, 3, 32, 32}, 6));
  const auto policy = aug::default_policy(3);
  std::uint64_t seed = 0;
  for (auto _ : st) benchmark::DoNotOptimize(aug::augment(batch, policy, ++seed));
}
BENCHMARK(BM_Augment);

void BM_MetaGradientToy(benchmark::State& st) {
  const auto toy = testing::make_toy(1);
  std::uint64_t seed = 0;
  for (auto _ : st)
    benchmark::DoNotOptimize(
        match::meta_gradient(toy.state, toy.spec, toy.expert.snapshots[1], toy.expert.snapshots[2], toy.cfg, ++seed));
}
BENCHMARK(BM_MetaGradientToy)->Unit(benchmark::kMillisecond);

void BM_Crc32(benchmark::State& st) {
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(st.range(0)), 0xa5);
  for (auto _ : st) benchmark::DoNotOptimize(io::crc32(bytes));
  st.SetBytesProcessed(st.iterations() * st.range(0));
}
BENCHMARK(BM_Crc32)->Arg(1 << 20);

}  // namespace

BENCHMARK_MAIN();
