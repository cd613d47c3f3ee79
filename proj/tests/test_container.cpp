#include <doctest.h>

#include <cmath>

#include "lss/binary_io.hpp"
#include "lss/error.hpp"
#include "lss/lowrank.hpp"
#include "test_util.hpp"

using namespace lss;
using namespace lss::lowrank;

namespace {

Checkpoint sample(std::uint64_t seed) {
  Checkpoint ck;
  auto& mt = ck.dataset.meta;
  mt = {2, 5, 4, 3, 2, 3, 4};
  for (int i = 0; i < 2; ++i)
    ck.dataset.mappers.push_back({i, testing::random_tensor({2, 5, 3}, seed + i), testing::random_tensor({2, 3, 4}, seed + 10 + i)});
  for (int j = 0; j < 6; ++j) ck.dataset.basis.push_back({j / 3, testing::random_tensor({2, 3, 3}, seed + 20 + j)});
  ck.label_logits = testing::random_tensor({6, 4}, seed + 40);
  return ck;
}

double f32(double v) { return static_cast<double>(static_cast<float>(v)); }

LoadFailure failure_of(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_container(bytes);
  } catch (const LoadError& e) {
    return e.failure();
  }
  FAIL("no LoadError");
  return LoadFailure::Io;
}

}  // namespace

TEST_CASE("LSS1 layout and round trip") {
  const auto ck = sample(3);
  const auto bytes = encode_container(ck);
  const std::size_t floats = 2 * 2 * (5 * 3 + 3 * 4) + 6 * 2 * 9 + 6 * 4;
  CHECK(bytes.size() == 4 + 2 + 7 * 4 + floats * 4 + 4);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "LSS1");

  const auto back = decode_container(bytes);
  CHECK(back.dataset.meta == ck.dataset.meta);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(back.dataset.mappers[i].id == static_cast<int>(i));
    for (std::int64_t e = 0; e < ck.dataset.mappers[i].u.numel(); ++e)
      CHECK(back.dataset.mappers[i].u[e] == f32(ck.dataset.mappers[i].u[e]));
    for (std::int64_t e = 0; e < ck.dataset.mappers[i].vt.numel(); ++e)
      CHECK(back.dataset.mappers[i].vt[e] == f32(ck.dataset.mappers[i].vt[e]));
  }
  for (std::size_t j = 0; j < 6; ++j) {
    CHECK(back.dataset.basis[j].mapper_id == static_cast<int>(j / 3));
    for (std::int64_t e = 0; e < 18; ++e) CHECK(back.dataset.basis[j].sigma[e] == f32(ck.dataset.basis[j].sigma[e]));
  }
  for (std::int64_t e = 0; e < 24; ++e) CHECK(back.label_logits[e] == f32(ck.label_logits[e]));

  // Re-encoding a decoded container is byte-identical.
  CHECK(encode_container(back) == bytes);

  testing::TempDir tmp;
  save_container(ck, tmp / "c.lss");
  CHECK(io::read_file(tmp / "c.lss") == bytes);
  CHECK(encode_container(load_container(tmp / "c.lss")) == bytes);
}

TEST_CASE("LSS1 corruption is detected") {
  const auto bytes = encode_container(sample(5));
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    auto bad = bytes;
    bad[i] ^= 0x10;
    CHECK_THROWS_AS(decode_container(bad), DataError);
  }
  auto magic = bytes;
  magic[0] = 'X';
  CHECK(failure_of(magic) == LoadFailure::BadMagic);
  auto version = bytes;
  version[4] = 9;
  CHECK(failure_of(version) == LoadFailure::VersionMismatch);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 8);
  CHECK(failure_of(truncated) == LoadFailure::Truncated);
  auto payload = bytes;
  payload[60] ^= 1;
  CHECK(failure_of(payload) == LoadFailure::CrcMismatch);
  auto zero = bytes;
  zero[6] = zero[7] = zero[8] = zero[9] = 0;
  CHECK_THROWS_AS(decode_container(zero), FormatError);
  auto trailing = bytes;
  trailing.push_back(0);
  CHECK_THROWS_AS(decode_container(trailing), FormatError);
  CHECK_THROWS_AS(load_container("/nonexistent/c.lss"), DataError);
}

TEST_CASE("LSS1 encoding rejects inconsistent checkpoints") {
  auto ck = sample(7);
  ck.label_logits = Tensor(Shape{5, 4});
  CHECK_THROWS_AS(encode_container(ck), InvalidArgument);
  ck = sample(7);
  ck.dataset.basis.pop_back();
  CHECK_THROWS_AS(encode_container(ck), InvalidArgument);
}
