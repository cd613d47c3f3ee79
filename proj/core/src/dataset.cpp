#include "lss/dataset.hpp"

#include <algorithm>

#include "lss/error.hpp"

namespace lss {

void LabeledImages::add(std::span<const float> pixels, int label) {
  if (static_cast<std::int64_t>(pixels.size()) != shape_.numel())
    throw InvalidArgument("LabeledImages::add: pixel count does not match image shape");
  if (label < 0 || label >= num_classes_) throw InvalidArgument("LabeledImages::add: label out of range");
  pixels_.insert(pixels_.end(), pixels.begin(), pixels.end());
  labels_.push_back(label);
}

void LabeledImages::add(const Tensor& image, int label) {
  std::vector<float> px(image.data().begin(), image.data().end());
  add(px, label);
}

void LabeledImages::reserve(std::size_t n) {
  pixels_.reserve(n * static_cast<std::size_t>(shape_.numel()));
  labels_.reserve(n);
}

std::span<const float> LabeledImages::pixels(std::size_t i) const {
  if (i >= size()) throw InvalidArgument("LabeledImages: index out of range");
  const auto n = static_cast<std::size_t>(shape_.numel());
  return std::span<const float>(pixels_).subspan(i * n, n);
}

Tensor LabeledImages::image(std::size_t i) const {
  auto px = pixels(i);
  return Tensor(shape_.tensor_shape(), std::vector<double>(px.begin(), px.end()));
}

Tensor LabeledImages::batch(const std::vector<std::size_t>& indices) const {
  const auto n = shape_.numel();
  Tensor out(Shape{static_cast<std::int64_t>(indices.size()), shape_.channels, shape_.height, shape_.width});
  for (std::size_t j = 0; j < indices.size(); ++j) {
    auto px = pixels(indices[j]);
    std::copy(px.begin(), px.end(), out.ptr() + static_cast<std::int64_t>(j) * n);
  }
  return out;
}

std::vector<std::size_t> LabeledImages::indices_of(int label) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels_.size(); ++i)
    if (labels_[i] == label) out.push_back(i);
  return out;
}

ImagePool::ImagePool(const LabeledImages& images, std::uint64_t seed) : images_(&images), rng_(seed) {
  remaining_.resize(static_cast<std::size_t>(images.num_classes()));
  for (int c = 0; c < images.num_classes(); ++c) {
    auto idx = images.indices_of(c);
    std::shuffle(idx.begin(), idx.end(), rng_);
    remaining_[static_cast<std::size_t>(c)] = std::move(idx);
  }
}

Tensor ImagePool::draw(int label) {
  if (label < 0 || label >= images_->num_classes()) throw InvalidArgument("ImagePool::draw: label out of range");
  auto& rem = remaining_[static_cast<std::size_t>(label)];
  if (rem.empty()) throw DataError("image pool exhausted for class " + std::to_string(label));
  const auto i = rem.back();
  rem.pop_back();
  return images_->image(i);
}

}  // namespace lss
