#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include "lss/binary_io.hpp"
#include "lss/config.hpp"
#include "lss/dataset_store.hpp"
#include "lss/desk_data.hpp"
#include "lss/error.hpp"
#include "lss/expert_buffer.hpp"
#include "test_util.hpp"

using namespace lss;
using namespace lss::expert;
using lss::testing::TempDir;
using lss::testing::random_tensor;

namespace {

struct DeskFixture {
  LabeledImages train;
  nn::ConvNetSpec spec;
  ExpertConfig cfg;
};

// The 500-image two-class desk training split, normalized, with the desk network.
const DeskFixture& desk_fixture() {
  static const DeskFixture f = [] {
    auto split = desk::generate(desk::DeskSpec{});
    std::vector<double> mean, sd;
    store::channel_stats(split.train, mean, sd);
    store::normalize(split.train, mean, sd);
    const auto preset = config::desk_preset();
    DeskFixture d{split.train, config::model_spec(preset, split.train.shape(), split.train.num_classes()),
                  config::expert_config(preset, 1)};
    return d;
  }();
  return f;
}

Trajectory synthetic_trajectory(std::int64_t epochs, std::int64_t len, std::uint64_t seed, const std::string& id = "toy") {
  Trajectory t;
  for (std::int64_t e = 0; e <= epochs; ++e) {
    auto s = random_tensor({len}, seed * 100 + static_cast<std::uint64_t>(e));
    for (auto& v : s.data()) v = static_cast<double>(static_cast<float>(v));
    t.snapshots.push_back(s);
  }
  t.meta = {0xDEADBEEFull, id, 0.01, 0.9, 32, seed, static_cast<std::uint32_t>(epochs)};
  return t;
}

}  // namespace

TEST_CASE("expert snapshots: count, init and float32 representability") {
  const auto& d = desk_fixture();
  auto cfg = d.cfg;
  cfg.epochs = 3;
  const auto t = train_expert(d.train, d.spec, cfg, 42, "desk");
  CHECK(t.snapshots.size() == 4);
  CHECK(t.epochs() == 3);
  CHECK(t.snapshots[0] == nn::init_params(d.spec, 42).flat);
  for (const auto& s : t.snapshots) {
    CHECK(s.numel() == t.param_length());
    for (double v : s.data()) CHECK(static_cast<double>(static_cast<float>(v)) == v);
  }
  CHECK(t.meta.epochs == 3);
  CHECK(t.meta.seed == 42);
  CHECK(t.meta.spec_hash == nn::spec_hash(d.spec));
  CHECK(t.meta.dataset_id == "desk");
  CHECK(dataset_loss(d.spec, t.snapshots[3], d.train) < dataset_loss(d.spec, t.snapshots[0], d.train));
}

TEST_CASE("expert training is reproducible per seed") {
  const auto& d = desk_fixture();
  auto cfg = d.cfg;
  cfg.epochs = 1;
  const auto a = train_expert(d.train, d.spec, cfg, 7, "desk");
  const auto b = train_expert(d.train, d.spec, cfg, 7, "desk");
  CHECK(a.snapshots[1] == b.snapshots[1]);
}

TEST_CASE("expert accuracy is non-decreasing over the first epochs for most seeds") {
  const auto& d = desk_fixture();
  auto cfg = d.cfg;
  cfg.epochs = 3;
  int monotone = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto t = train_expert(d.train, d.spec, cfg, 100 + seed, "desk");
    bool ok = true;
    double prev = -1.0;
    for (const auto& s : t.snapshots) {
      const double acc = dataset_accuracy(d.spec, s, d.train);
      ok = ok && acc >= prev;
      prev = acc;
    }
    monotone += ok ? 1 : 0;
  }
  CHECK(monotone >= 4);
}

TEST_CASE("training on an empty dataset is a data error") {
  const auto& d = desk_fixture();
  LabeledImages empty(d.train.shape(), 2);
  CHECK_THROWS_AS(train_expert(empty, d.spec, d.cfg, 1, "desk"), DataError);
}

TEST_CASE("trajectory files round-trip and have the documented size") {
  TempDir dir;
  const auto t = synthetic_trajectory(5, 37, 3, "cifar10");
  const auto path = dir / "t.lssb";
  save_trajectory(t, path);
  const auto u = load_trajectory(path);
  CHECK(u.meta == t.meta);
  REQUIRE(u.snapshots.size() == t.snapshots.size());
  for (std::size_t i = 0; i < t.snapshots.size(); ++i) CHECK(u.snapshots[i] == t.snapshots[i]);
  CHECK(encode_trajectory(u) == encode_trajectory(t));

  // magic, version, meta (hash, seed, lr, momentum, batch, id), epochs, param length
  const std::size_t header = 4 + 2 + (8 + 8 + 8 + 8 + 4 + 2 + 7) + 4 + 8;
  CHECK(trajectory_header_bytes("cifar10") == header);
  CHECK(std::filesystem::file_size(path) == header + 6 * 37 * 4 + 4);
}

TEST_CASE("trajectory corruption is detected with distinct failures") {
  const auto bytes = encode_trajectory(synthetic_trajectory(2, 9, 4));
  auto failure_of = [](const std::vector<std::uint8_t>& b) {
    try {
      decode_trajectory(b);
    } catch (const LoadError& e) {
      return static_cast<int>(e.failure());
    } catch (const DataError&) {
      return -1;
    }
    return -2;
  };
  auto flip = [&](std::size_t i) {
    auto b = bytes;
    b[i] ^= 0x01;
    return b;
  };
  CHECK(failure_of(flip(0)) == static_cast<int>(LoadFailure::BadMagic));
  CHECK(failure_of(flip(4)) == static_cast<int>(LoadFailure::VersionMismatch));
  CHECK(failure_of(flip(bytes.size() - 10)) == static_cast<int>(LoadFailure::CrcMismatch));
  CHECK(failure_of(flip(bytes.size() - 1)) == static_cast<int>(LoadFailure::CrcMismatch));
  auto cut = bytes;
  cut.resize(cut.size() - 5);
  CHECK(failure_of(cut) == static_cast<int>(LoadFailure::Truncated));
  // Every single-byte corruption is caught somehow.
  for (std::size_t i = 0; i < bytes.size(); ++i) CHECK(failure_of(flip(i)) != -2);
}

TEST_CASE("buffer sampling contract") {
  ExpertBuffer one({synthetic_trajectory(3, 5, 1)});
  std::mt19937_64 rng(1);
  auto s = one.sample(0, 1, rng);
  CHECK(s.start == one.at(0).snapshots[0]);
  CHECK(s.target == one.at(0).snapshots[1]);
  s = one.sample(2, 0, rng);
  CHECK(s.start == s.target);
  CHECK_THROWS_AS(one.sample(2, 2, rng), ConfigError);
  CHECK_THROWS_AS(ExpertBuffer().sample(0, 1, rng), ConfigError);
}

TEST_CASE("buffer sampling is uniform over trajectories") {
  ExpertBuffer buf;
  for (std::uint64_t i = 0; i < 4; ++i) buf.add(synthetic_trajectory(4, 3, i));
  std::mt19937_64 rng(2);
  std::map<std::size_t, int> counts;
  for (int i = 0; i < 1000; ++i) ++counts[buf.sample(1, 2, rng).trajectory];
  for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(counts[i] - 250) <= 60);
}

TEST_CASE("buffer sampling skips short trajectories") {
  ExpertBuffer buf;
  buf.add(synthetic_trajectory(2, 3, 1));
  buf.add(synthetic_trajectory(6, 3, 2));
  CHECK(buf.max_epochs() == 6);
  std::mt19937_64 rng(3);
  for (int i = 0; i < 200; ++i) {
    const auto s = buf.sample(3, 2, rng);
    CHECK(s.trajectory == 1);
    CHECK(s.target == buf.at(1).snapshots[5]);
  }
}

TEST_CASE("manifest round-trip and buffer loading") {
  TempDir dir;
  BufferManifest m;
  for (std::uint64_t i = 0; i < 3; ++i) {
    const auto t = synthetic_trajectory(2, 4, i);
    const auto name = "expert_" + std::to_string(i) + ".lssb";
    save_trajectory(t, dir / name);
    m.entries.push_back({name, t.meta});
  }
  save_manifest(m, dir / "buffer.json");
  const auto back = load_manifest(dir / "buffer.json");
  REQUIRE(back.entries.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back.entries[i].path == m.entries[i].path);
    CHECK(back.entries[i].meta == m.entries[i].meta);
  }
  const auto buf = load_buffer(dir / "buffer.json");
  CHECK(buf.size() == 3);

  std::filesystem::remove(dir / "expert_1.lssb");
  CHECK_THROWS_AS(load_buffer(dir / "buffer.json"), DependencyError);
  CHECK_THROWS_AS(load_buffer(dir / "missing.json"), DependencyError);

  save_trajectory(synthetic_trajectory(2, 4, 9), dir / "expert_1.lssb");
  CHECK_THROWS_AS(load_buffer(dir / "buffer.json"), DataError);
}

TEST_CASE("build_buffer writes one file per expert plus a manifest") {
  TempDir dir;
  auto split = desk::generate({20, 5, 12, 1, 0.1, 3});
  const auto spec = nn::ConvNetSpec::tiny(1, 12, 12, 2);
  ExpertConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  const auto m = build_buffer(split.train, spec, cfg, 3, 500, "mini", dir.path(), 2);
  CHECK(m.entries.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(std::filesystem::exists(dir / ("expert_" + std::to_string(i) + ".lssb")));
    CHECK(m.entries[i].meta.seed == 500 + i);
  }
  const auto buf = load_buffer(dir / "buffer.json");
  CHECK(buf.size() == 3);
  CHECK(buf.at(2).snapshots[0] == nn::init_params(spec, 502).flat);
  // Threaded and serial builds agree.
  TempDir serial;
  build_buffer(split.train, spec, cfg, 3, 500, "mini", serial.path(), 1);
  CHECK(io::read_file(dir / "expert_2.lssb") == io::read_file(serial / "expert_2.lssb"));
}
