#include <doctest.h>

#include <string>
#include <vector>

#include "lss/binary_io.hpp"
#include "lss/error.hpp"
#include "lss/tensor.hpp"

using namespace lss;

TEST_CASE("tensor shapes and reshape") {
  Tensor t(Shape{2, 3}, 1.5);
  CHECK(t.numel() == 6);
  CHECK(t.rank() == 2);
  CHECK(shape_string(t.shape()) == "[2,3]");
  auto r = t.reshaped({3, 2});
  CHECK(r.dim(0) == 3);
  CHECK(r.vec() == t.vec());
  CHECK_THROWS(t.reshaped({4, 2}));
  CHECK(Tensor::scalar(2.0).numel() == 1);
  CHECK(Tensor().rank() == 0);
}

TEST_CASE("tensor finiteness") {
  Tensor t(Shape{3});
  CHECK(t.all_finite());
  t[1] = 1.0 / 0.0;
  CHECK_FALSE(t.all_finite());
}

TEST_CASE("crc32 check value") {
  const std::string s = "123456789";
  std::vector<std::uint8_t> b(s.begin(), s.end());
  CHECK(io::crc32(b) == 0xCBF43926u);
}

TEST_CASE("writer and reader are little-endian and symmetric") {
  io::Writer w;
  w.u16(0x0102);
  w.u32(0xA0B0C0D0u);
  w.u64(0x1122334455667788ull);
  w.f32(1.25f);
  w.f64(-3.5);
  w.str("desk");
  const auto& buf = w.buffer();
  CHECK(buf[0] == 0x02);
  CHECK(buf[1] == 0x01);
  io::Reader r(buf);
  CHECK(r.u16() == 0x0102);
  CHECK(r.u32() == 0xA0B0C0D0u);
  CHECK(r.u64() == 0x1122334455667788ull);
  CHECK(r.f32() == 1.25f);
  CHECK(r.f64() == -3.5);
  CHECK(r.str() == "desk");
  CHECK(r.remaining() == 0);
  try {
    r.u8();
    FAIL("expected truncation");
  } catch (const LoadError& e) {
    CHECK(e.failure() == LoadFailure::Truncated);
  }
}

TEST_CASE("sealed buffers verify and corruption is caught") {
  io::Writer w;
  w.bytes(std::vector<std::uint8_t>{'A', 'B', 'C', 'D', 1, 2, 3});
  w.seal();
  auto bytes = w.buffer();
  CHECK_NOTHROW(io::check_crc(bytes, "buf"));
  CHECK_NOTHROW(io::check_magic(bytes, "ABCD", "buf"));
  CHECK_THROWS_AS(io::check_magic(bytes, "LSS1", "buf"), LoadError);
  bytes[5] ^= 0x40;
  try {
    io::check_crc(bytes, "buf");
    FAIL("expected crc mismatch");
  } catch (const LoadError& e) {
    CHECK(e.failure() == LoadFailure::CrcMismatch);
  }
}
