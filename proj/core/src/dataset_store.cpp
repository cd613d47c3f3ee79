#include "lss/dataset_store.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>

#include "lss/binary_io.hpp"
#include "lss/error.hpp"

namespace lss::store {

namespace {

constexpr char kMagic[4] = {'L', 'S', 'S', 'D'};
constexpr std::uint16_t kStoreVersion = 1;
constexpr std::int64_t kCifarSide = 32;
constexpr std::int64_t kCifarPixels = 3 * kCifarSide * kCifarSide;

std::uint32_t be32(std::span<const std::uint8_t> b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

LabeledImages read_cifar_records(std::span<const std::uint8_t> bytes, std::size_t label_bytes, int classes,
                                 const std::string& what) {
  const std::size_t record = label_bytes + kCifarPixels;
  if (bytes.empty()) throw FormatError(what + ": empty file", 0);
  if (bytes.size() % record != 0)
    throw FormatError(what + ": file size " + std::to_string(bytes.size()) + " is not a multiple of the " +
                          std::to_string(record) + "-byte record",
                      bytes.size() - bytes.size() % record);
  LabeledImages out({3, kCifarSide, kCifarSide}, classes);
  const auto n = bytes.size() / record;
  out.reserve(n);
  std::vector<float> px(kCifarPixels);
  for (std::size_t i = 0; i < n; ++i) {
    const auto at = i * record;
    const int label = bytes[at + label_bytes - 1];
    if (label >= classes)
      throw FormatError(what + ": label " + std::to_string(label) + " out of range for " + std::to_string(classes) +
                            " classes",
                        at + label_bytes - 1);
    for (std::int64_t j = 0; j < kCifarPixels; ++j) px[j] = static_cast<float>(bytes[at + label_bytes + j]) / 255.0f;
    out.add(px, label);
  }
  return out;
}

std::vector<std::uint8_t> read_required(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DependencyError("source file not found: " + path.string());
  return io::read_file(path);
}

void append(LabeledImages& dst, const LabeledImages& src) {
  for (std::size_t i = 0; i < src.size(); ++i) dst.add(src.pixels(i), src.label(i));
}

nlohmann::json meta_json(const StoreMeta& m) {
  return {{"name", m.name},
          {"source_format", m.source_format},
          {"channels", m.shape.channels},
          {"height", m.shape.height},
          {"width", m.shape.width},
          {"num_classes", m.num_classes},
          {"mean", m.mean},
          {"std", m.std},
          {"train_count", m.train_count},
          {"test_count", m.test_count},
          {"train_crc32", m.train_crc},
          {"test_crc32", m.test_crc},
          {"train_class_counts", m.train_class_counts}};
}

}  // namespace

SourceFormat parse_source_format(const std::string& name) {
  if (name == "cifar10") return SourceFormat::Cifar10;
  if (name == "cifar100") return SourceFormat::Cifar100;
  if (name == "svhn") return SourceFormat::Svhn;
  if (name == "idx" || name == "desk") return SourceFormat::Idx;
  throw ConfigError("unknown dataset format '" + name + "' (expected cifar10, cifar100, svhn, idx or desk)");
}

std::string to_string(SourceFormat format) {
  switch (format) {
    case SourceFormat::Cifar10: return "cifar10";
    case SourceFormat::Cifar100: return "cifar100";
    case SourceFormat::Svhn: return "svhn";
    case SourceFormat::Idx: return "idx";
  }
  return "idx";
}

LabeledImages read_cifar(std::span<const std::uint8_t> bytes, bool cifar100) {
  return cifar100 ? read_cifar_records(bytes, 2, 100, "CIFAR-100") : read_cifar_records(bytes, 1, 10, "CIFAR-10");
}

LabeledImages read_svhn(std::span<const std::uint8_t> bytes) { return read_cifar_records(bytes, 1, 10, "SVHN"); }

LabeledImages read_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels, int num_classes) {
  if (images.size() < 16) throw FormatError("IDX images: header needs 16 bytes, file has " + std::to_string(images.size()), images.size());
  if (be32(images, 0) != 0x00000803) throw FormatError("IDX images: bad magic", 0);
  if (labels.size() < 8) throw FormatError("IDX labels: header needs 8 bytes, file has " + std::to_string(labels.size()), labels.size());
  if (be32(labels, 0) != 0x00000801) throw FormatError("IDX labels: bad magic", 0);
  const std::size_t n = be32(images, 4), h = be32(images, 8), w = be32(images, 12);
  if (n == 0 || h == 0 || w == 0) throw FormatError("IDX images: zero dimension", 4);
  if (be32(labels, 4) != n)
    throw FormatError("IDX labels: count " + std::to_string(be32(labels, 4)) + " differs from image count " +
                          std::to_string(n),
                      4);
  if (images.size() != 16 + n * h * w)
    throw FormatError("IDX images: payload length " + std::to_string(images.size() - 16) + " does not match header",
                      std::min(images.size(), 16 + n * h * w));
  if (labels.size() != 8 + n)
    throw FormatError("IDX labels: payload length does not match header", std::min(labels.size(), 8 + n));
  int classes = num_classes;
  if (classes <= 0) classes = 1 + *std::max_element(labels.begin() + 8, labels.end());
  LabeledImages out({1, static_cast<std::int64_t>(h), static_cast<std::int64_t>(w)}, classes);
  out.reserve(n);
  std::vector<float> px(h * w);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = labels[8 + i];
    if (label >= classes) throw FormatError("IDX labels: label out of range", 8 + i);
    for (std::size_t j = 0; j < h * w; ++j) px[j] = static_cast<float>(images[16 + i * h * w + j]) / 255.0f;
    out.add(px, label);
  }
  return out;
}

Split read_source(SourceFormat format, const std::filesystem::path& source) {
  Split s;
  switch (format) {
    case SourceFormat::Cifar10: {
      s.train = LabeledImages({3, kCifarSide, kCifarSide}, 10);
      for (int b = 1; b <= 5; ++b)
        append(s.train, read_cifar(read_required(source / ("data_batch_" + std::to_string(b) + ".bin")), false));
      s.test = read_cifar(read_required(source / "test_batch.bin"), false);
      break;
    }
    case SourceFormat::Cifar100:
      s.train = read_cifar(read_required(source / "train.bin"), true);
      s.test = read_cifar(read_required(source / "test.bin"), true);
      break;
    case SourceFormat::Svhn:
      s.train = read_svhn(read_required(source / "train.bin"));
      s.test = read_svhn(read_required(source / "test.bin"));
      break;
    case SourceFormat::Idx: {
      s.train = read_idx(read_required(source / "train-images-idx3-ubyte"),
                         read_required(source / "train-labels-idx1-ubyte"));
      s.test = read_idx(read_required(source / "t10k-images-idx3-ubyte"), read_required(source / "t10k-labels-idx1-ubyte"),
                        s.train.num_classes());
      break;
    }
  }
  if (!(s.train.shape() == s.test.shape())) throw DataError("train and test splits differ in image shape");
  return s;
}

void channel_stats(const LabeledImages& images, std::vector<double>& mean, std::vector<double>& std) {
  const auto c = images.shape().channels;
  const auto plane = images.shape().height * images.shape().width;
  mean.assign(static_cast<std::size_t>(c), 0.0);
  std.assign(static_cast<std::size_t>(c), 0.0);
  if (images.empty()) throw DataError("channel_stats: no images");
  std::vector<double> sq(static_cast<std::size_t>(c), 0.0);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto px = images.pixels(i);
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t j = 0; j < plane; ++j) {
        const double v = px[static_cast<std::size_t>(ch * plane + j)];
        mean[ch] += v;
        sq[ch] += v * v;
      }
  }
  const double count = static_cast<double>(images.size()) * static_cast<double>(plane);
  for (std::int64_t ch = 0; ch < c; ++ch) {
    mean[ch] /= count;
    std[ch] = std::sqrt(std::max(0.0, sq[ch] / count - mean[ch] * mean[ch]));
    if (std[ch] < 1e-8) std[ch] = 1.0;
  }
}

void normalize(LabeledImages& images, const std::vector<double>& mean, const std::vector<double>& std) {
  const auto c = images.shape().channels;
  const auto plane = images.shape().height * images.shape().width;
  LabeledImages out(images.shape(), images.num_classes());
  out.reserve(images.size());
  std::vector<float> px(static_cast<std::size_t>(images.shape().numel()));
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto src = images.pixels(i);
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t j = 0; j < plane; ++j) {
        const auto at = static_cast<std::size_t>(ch * plane + j);
        px[at] = static_cast<float>((src[at] - mean[ch]) / std[ch]);
      }
    out.add(px, images.label(i));
  }
  images = std::move(out);
}

std::vector<std::uint8_t> encode_images(const LabeledImages& images) {
  io::Writer w;
  for (char ch : kMagic) w.u8(static_cast<std::uint8_t>(ch));
  w.u16(kStoreVersion);
  w.u32(static_cast<std::uint32_t>(images.shape().channels));
  w.u32(static_cast<std::uint32_t>(images.shape().height));
  w.u32(static_cast<std::uint32_t>(images.shape().width));
  w.u32(static_cast<std::uint32_t>(images.num_classes()));
  w.u64(images.size());
  for (int l : images.labels()) w.u16(static_cast<std::uint16_t>(l));
  for (float v : images.all_pixels()) w.f32(v);
  w.seal();
  return w.buffer();
}

LabeledImages decode_images(std::span<const std::uint8_t> bytes) {
  io::check_magic(bytes, kMagic, "LSSD");
  io::Reader r(bytes);
  r.take(4);
  const auto version = r.u16();
  if (version != kStoreVersion)
    throw LoadError(LoadFailure::VersionMismatch, "LSSD: unsupported version " + std::to_string(version));
  ImageShape shape{r.u32(), r.u32(), r.u32()};
  const int classes = static_cast<int>(r.u32());
  const auto n = r.u64();
  const auto expected = r.offset() + n * 2 + n * static_cast<std::uint64_t>(shape.numel()) * 4 + 4;
  if (bytes.size() < expected) throw LoadError(LoadFailure::Truncated, "LSSD: file is truncated");
  if (bytes.size() > expected) throw FormatError("LSSD: trailing bytes after payload", expected);
  io::check_crc(bytes, "LSSD");
  std::vector<int> labels(n);
  for (auto& l : labels) l = r.u16();
  LabeledImages out(shape, classes);
  out.reserve(n);
  std::vector<float> px(static_cast<std::size_t>(shape.numel()));
  for (std::uint64_t i = 0; i < n; ++i) {
    for (auto& v : px) v = r.f32();
    out.add(px, labels[i]);
  }
  return out;
}

StoreMeta write_store(const std::string& name, const std::string& source_format, Split split,
                      const std::filesystem::path& dir) {
  StoreMeta m;
  m.name = name;
  m.source_format = source_format;
  m.shape = split.train.shape();
  m.num_classes = split.train.num_classes();
  channel_stats(split.train, m.mean, m.std);
  normalize(split.train, m.mean, m.std);
  normalize(split.test, m.mean, m.std);
  m.train_count = split.train.size();
  m.test_count = split.test.size();
  m.train_class_counts.assign(static_cast<std::size_t>(m.num_classes), 0);
  for (int l : split.train.labels()) ++m.train_class_counts[static_cast<std::size_t>(l)];

  std::filesystem::create_directories(dir);
  const auto train = encode_images(split.train);
  const auto test = encode_images(split.test);
  m.train_crc = io::crc32(train);
  m.test_crc = io::crc32(test);
  io::write_file(dir / "train.lssd", train);
  io::write_file(dir / "test.lssd", test);
  const auto text = meta_json(m).dump(2) + "\n";
  io::write_file(dir / "meta.json", std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  return m;
}

StoreMeta ingest(const std::string& name, SourceFormat format, const std::filesystem::path& source,
                 const std::filesystem::path& dir) {
  return write_store(name, to_string(format), read_source(format, source), dir);
}

StoreMeta load_store_meta(const std::filesystem::path& dir) {
  const auto path = dir / "meta.json";
  if (!std::filesystem::exists(path)) throw DependencyError("dataset store not found: " + path.string());
  try {
    std::ifstream in(path);
    nlohmann::json j;
    in >> j;
    StoreMeta m;
    m.name = j.at("name").get<std::string>();
    m.source_format = j.at("source_format").get<std::string>();
    m.shape = {j.at("channels").get<std::int64_t>(), j.at("height").get<std::int64_t>(), j.at("width").get<std::int64_t>()};
    m.num_classes = j.at("num_classes").get<int>();
    m.mean = j.at("mean").get<std::vector<double>>();
    m.std = j.at("std").get<std::vector<double>>();
    m.train_count = j.at("train_count").get<std::uint64_t>();
    m.test_count = j.at("test_count").get<std::uint64_t>();
    m.train_crc = j.at("train_crc32").get<std::uint32_t>();
    m.test_crc = j.at("test_crc32").get<std::uint32_t>();
    m.train_class_counts = j.at("train_class_counts").get<std::vector<std::uint64_t>>();
    return m;
  } catch (const nlohmann::json::exception& ex) {
    throw DataError("dataset store meta " + path.string() + ": " + ex.what());
  }
}

LabeledImages load_split(const std::filesystem::path& dir, const std::string& split) {
  if (split != "train" && split != "test") throw InvalidArgument("load_split: split must be train or test");
  const auto path = dir / (split + ".lssd");
  if (!std::filesystem::exists(path)) throw DependencyError("dataset split not found: " + path.string());
  return decode_images(io::read_file(path));
}

}  // namespace lss::store
