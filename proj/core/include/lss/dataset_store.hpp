#pragma once

// Raw dataset readers and the normalized on-disk store.
//
// A store directory holds train.lssd, test.lssd and meta.json. Pixels are
// normalized per channel with the training split's mean and std.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "lss/dataset.hpp"

namespace lss::store {

enum class SourceFormat { Cifar10, Cifar100, Svhn, Idx };

SourceFormat parse_source_format(const std::string& name);
std::string to_string(SourceFormat format);

/// CIFAR binary records: label byte(s) then 3072 pixel bytes (R plane, G, B).
/// CIFAR-100 records carry a coarse then a fine label; the fine one is used.
/// Pixels are scaled to [0, 1].
LabeledImages read_cifar(std::span<const std::uint8_t> bytes, bool cifar100);
/// Converted SVHN: CIFAR-10 record layout with labels 0..9.
LabeledImages read_svhn(std::span<const std::uint8_t> bytes);
/// IDX ubyte images (magic 0x803) plus labels (magic 0x801).
LabeledImages read_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels, int num_classes = 0);

struct Split {
  LabeledImages train;
  LabeledImages test;
};

/// Reads the published file set from `source`:
///   cifar10  data_batch_1..5.bin, test_batch.bin
///   cifar100 train.bin, test.bin
///   svhn     train.bin, test.bin (converted records)
///   idx      train-images-idx3-ubyte, train-labels-idx1-ubyte,
///            t10k-images-idx3-ubyte, t10k-labels-idx1-ubyte
Split read_source(SourceFormat format, const std::filesystem::path& source);

struct StoreMeta {
  std::string name;
  std::string source_format;
  ImageShape shape;
  int num_classes = 0;
  std::vector<double> mean;  // per channel
  std::vector<double> std;
  std::uint64_t train_count = 0;
  std::uint64_t test_count = 0;
  std::uint32_t train_crc = 0;
  std::uint32_t test_crc = 0;
  std::vector<std::uint64_t> train_class_counts;
};

/// Per-channel mean and population std over all pixels.
void channel_stats(const LabeledImages& images, std::vector<double>& mean, std::vector<double>& std);
/// (x - mean[c]) / std[c], in place.
void normalize(LabeledImages& images, const std::vector<double>& mean, const std::vector<double>& std);

/// Normalizes and writes the split; returns the metadata written to meta.json.
StoreMeta write_store(const std::string& name, const std::string& source_format, Split split,
                      const std::filesystem::path& dir);
StoreMeta ingest(const std::string& name, SourceFormat format, const std::filesystem::path& source,
                 const std::filesystem::path& dir);

StoreMeta load_store_meta(const std::filesystem::path& dir);
/// `split` is "train" or "test".
LabeledImages load_split(const std::filesystem::path& dir, const std::string& split);

// LSSD: "LSSD" | u16 version | u32 C, H, W | u32 classes | u64 count
//       | count u16 labels | count*C*H*W f32 pixels | u32 CRC32
std::vector<std::uint8_t> encode_images(const LabeledImages& images);
LabeledImages decode_images(std::span<const std::uint8_t> bytes);

}  // namespace lss::store
