// LSS1 container: synthetic factors plus label logits.
//
//   "LSS1" | u16 version | u32 C,H,W,r,k,m,num_classes
//   | f32 U (mapper order) | f32 Vt | f32 sigma (basis order) | f32 label logits
//   | u32 CRC32 of every preceding byte
//
// All integers and floats little-endian.

#include <limits>

#include "lss/binary_io.hpp"
#include "lss/error.hpp"
#include "lss/lowrank.hpp"

namespace lss::lowrank {

namespace {

constexpr char kMagic[4] = {'L', 'S', 'S', '1'};
constexpr std::size_t kHeaderBytes = 4 + 2 + 7 * 4;

void put_floats(io::Writer& w, const Tensor& t) {
  for (double v : t.data()) w.f32(static_cast<float>(v));
}

void get_floats(io::Reader& r, Tensor& t) {
  for (auto& v : t.data()) v = static_cast<double>(r.f32());
}

std::uint32_t to_u32(std::int64_t v, const char* what) {
  if (v < 0 || v > std::numeric_limits<std::uint32_t>::max())
    throw InvalidArgument(std::string("LSS1: ") + what + " does not fit in u32");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

std::vector<std::uint8_t> encode_container(const Checkpoint& ckpt) {
  const auto& ds = ckpt.dataset;
  ds.validate();
  const auto& mt = ds.meta;
  if (ckpt.label_logits.shape() != Shape{mt.images(), mt.num_classes})
    throw InvalidArgument("LSS1: label logits must be [k*m, num_classes]");
  io::Writer w;
  for (char c : kMagic) w.u8(static_cast<std::uint8_t>(c));
  w.u16(kContainerVersion);
  for (auto [v, name] : {std::pair{mt.channels, "C"}, {mt.height, "H"}, {mt.width, "W"}, {mt.rank, "r"},
                         {mt.mappers, "k"}, {mt.blocks_per_mapper, "m"}, {mt.num_classes, "num_classes"}})
    w.u32(to_u32(v, name));
  for (const auto& mp : ds.mappers) put_floats(w, mp.u);
  for (const auto& mp : ds.mappers) put_floats(w, mp.vt);
  for (const auto& b : ds.basis) put_floats(w, b.sigma);
  put_floats(w, ckpt.label_logits);
  w.seal();
  return w.buffer();
}

Checkpoint decode_container(std::span<const std::uint8_t> bytes) {
  io::check_magic(bytes, kMagic, "LSS1");
  io::Reader r(bytes);
  r.take(4);
  const auto version = r.u16();
  if (version != kContainerVersion)
    throw LoadError(LoadFailure::VersionMismatch,
                    "LSS1: unsupported version " + std::to_string(version) + " (expected " +
                        std::to_string(kContainerVersion) + ")");
  DatasetMeta mt;
  mt.channels = r.u32();
  mt.height = r.u32();
  mt.width = r.u32();
  mt.rank = r.u32();
  mt.mappers = r.u32();
  mt.blocks_per_mapper = r.u32();
  mt.num_classes = r.u32();
  if (mt.channels < 1 || mt.height < 1 || mt.width < 1 || mt.rank < 1 || mt.mappers < 1 || mt.blocks_per_mapper < 1 ||
      mt.num_classes < 1)
    throw FormatError("LSS1: zero dimension in header", 6);

  const auto floats = mt.mappers * mt.channels * (mt.height * mt.rank + mt.rank * mt.width) +
                      mt.images() * mt.channels * mt.rank * mt.rank + mt.images() * mt.num_classes;
  const auto expected = kHeaderBytes + static_cast<std::size_t>(floats) * 4 + 4;
  if (bytes.size() < expected)
    throw LoadError(LoadFailure::Truncated, "LSS1: file holds " + std::to_string(bytes.size()) + " bytes, header implies " +
                                                std::to_string(expected));
  if (bytes.size() > expected) throw FormatError("LSS1: trailing bytes after payload", expected);
  io::check_crc(bytes, "LSS1");

  Checkpoint ck;
  ck.dataset.meta = mt;
  for (std::int64_t i = 0; i < mt.mappers; ++i)
    ck.dataset.mappers.push_back(
        {static_cast<int>(i), Tensor(Shape{mt.channels, mt.height, mt.rank}), Tensor(Shape{mt.channels, mt.rank, mt.width})});
  for (auto& mp : ck.dataset.mappers) get_floats(r, mp.u);
  for (auto& mp : ck.dataset.mappers) get_floats(r, mp.vt);
  for (std::int64_t j = 0; j < mt.images(); ++j) {
    BasisBlock b{static_cast<int>(j / mt.blocks_per_mapper), Tensor(Shape{mt.channels, mt.rank, mt.rank})};
    get_floats(r, b.sigma);
    ck.dataset.basis.push_back(std::move(b));
  }
  ck.label_logits = Tensor(Shape{mt.images(), mt.num_classes});
  get_floats(r, ck.label_logits);
  ck.dataset.validate();
  return ck;
}

void save_container(const Checkpoint& ckpt, const std::filesystem::path& path) {
  io::write_file(path, encode_container(ckpt));
}

Checkpoint load_container(const std::filesystem::path& path) { return decode_container(io::read_file(path)); }

}  // namespace lss::lowrank
