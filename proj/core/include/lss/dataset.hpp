#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "lss/tensor.hpp"

namespace lss {

struct ImageShape {
  std::int64_t channels = 1;
  std::int64_t height = 1;
  std::int64_t width = 1;

  std::int64_t numel() const noexcept { return channels * height * width; }
  Shape tensor_shape() const { return {channels, height, width}; }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

/// In-memory labelled image set in normalized pixel units. Pixels are kept as
/// float32 to bound memory on full-size datasets.
class LabeledImages {
 public:
  LabeledImages() = default;
  LabeledImages(ImageShape shape, int num_classes) : shape_(shape), num_classes_(num_classes) {}

  void add(std::span<const float> pixels, int label);
  void add(const Tensor& image, int label);
  void reserve(std::size_t n);

  const ImageShape& shape() const noexcept { return shape_; }
  int num_classes() const noexcept { return num_classes_; }
  std::size_t size() const noexcept { return labels_.size(); }
  bool empty() const noexcept { return labels_.empty(); }
  int label(std::size_t i) const { return labels_.at(i); }
  const std::vector<int>& labels() const noexcept { return labels_; }
  std::span<const float> pixels(std::size_t i) const;
  std::span<const float> all_pixels() const noexcept { return pixels_; }

  /// Image i as a [C, H, W] tensor.
  Tensor image(std::size_t i) const;
  /// Selected images stacked into [n, C, H, W].
  Tensor batch(const std::vector<std::size_t>& indices) const;
  /// Indices of every image with the given label, in storage order.
  std::vector<std::size_t> indices_of(int label) const;

 private:
  ImageShape shape_;
  int num_classes_ = 0;
  std::vector<float> pixels_;
  std::vector<int> labels_;
};

/// Draws real images per class without replacement.
class ImagePool {
 public:
  ImagePool(const LabeledImages& images, std::uint64_t seed);
  /// Throws DataError when the class has no images left.
  Tensor draw(int label);
  const LabeledImages& source() const noexcept { return *images_; }

 private:
  const LabeledImages* images_;
  std::vector<std::vector<std::size_t>> remaining_;
  std::mt19937_64 rng_;
};

}  // namespace lss
