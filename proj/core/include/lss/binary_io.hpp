#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace lss::io {

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

/// Little-endian byte sink.
class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f64(double v);
  void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  void str(const std::string& s);  // u16 length prefix
  /// Appends CRC32 of everything written so far.
  void seal();
  const std::vector<std::uint8_t>& buffer() const noexcept { return buf_; }
  std::size_t size() const noexcept { return buf_.size(); }

 private:
  std::vector<std::uint8_t> buf_;
};

/// Little-endian byte source; throws LoadError(Truncated) on overrun.
class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  double f64();
  std::string str();
  std::span<const std::uint8_t> take(std::size_t n);
  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
/// Writes via a temporary sibling and rename so readers never observe a partial file.
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

/// Throws LoadError(BadMagic) unless the first four bytes equal `magic`.
void check_magic(std::span<const std::uint8_t> bytes, const char magic[4], const std::string& what);
/// Throws LoadError(CrcMismatch) unless the trailing u32 is the CRC32 of all
/// preceding bytes.
void check_crc(std::span<const std::uint8_t> bytes, const std::string& what);

}  // namespace lss::io
