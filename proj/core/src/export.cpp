#include "lss/export.hpp"

#include <algorithm>
#include <cmath>

#include "lss/binary_io.hpp"
#include "lss/error.hpp"

namespace lss::viz {

std::vector<std::uint8_t> encode_pnm(const Tensor& image) {
  if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3))
    throw InvalidArgument("encode_pnm: expected [1|3, H, W], got " + shape_string(image.shape()));
  const auto c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const std::string header = (c == 1 ? "P5\n" : "P6\n") + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + static_cast<std::size_t>(c * h * w));
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const double v = std::clamp(image[(ch * h + y) * w + x], 0.0, 1.0);
        out.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0)));
      }
  return out;
}

void write_pnm(const std::filesystem::path& path, const Tensor& image) { io::write_file(path, encode_pnm(image)); }

Tensor to_display(const Tensor& image, const std::vector<double>& mean, const std::vector<double>& std) {
  Tensor out = image;
  const auto c = image.dim(0);
  const auto plane = image.numel() / c;
  const bool denorm = !mean.empty();
  if (denorm && (static_cast<std::int64_t>(mean.size()) != c || static_cast<std::int64_t>(std.size()) != c))
    throw InvalidArgument("to_display: channel statistics do not match the image");
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t j = 0; j < plane; ++j) {
      double& v = out[ch * plane + j];
      if (denorm) v = v * std[ch] + mean[ch];
      v = std::clamp(v, 0.0, 1.0);
    }
  return out;
}

Tensor min_max(const Tensor& image) {
  Tensor out = image;
  if (image.numel() == 0) return out;
  const auto [lo, hi] = std::minmax_element(image.data().begin(), image.data().end());
  const double span = *hi - *lo;
  for (auto& v : out.data()) v = span > 0.0 ? (v - *lo) / span : 0.5;
  return out;
}

Tensor grid(const std::vector<Tensor>& images, std::int64_t cols, std::int64_t pad, double fill) {
  if (images.empty()) throw InvalidArgument("grid: no images");
  if (cols < 1 || pad < 0) throw InvalidArgument("grid: cols must be positive and pad non-negative");
  const auto& s = images.front().shape();
  for (const auto& im : images)
    if (im.shape() != s) throw InvalidArgument("grid: images differ in shape");
  const auto c = s[0], h = s[1], w = s[2];
  const auto n = static_cast<std::int64_t>(images.size());
  cols = std::min(cols, n);
  const auto rows = (n + cols - 1) / cols;
  const auto gh = rows * h + (rows + 1) * pad, gw = cols * w + (cols + 1) * pad;
  Tensor out(Shape{c, gh, gw}, std::vector<double>(static_cast<std::size_t>(c * gh * gw), fill));
  for (std::int64_t i = 0; i < n; ++i) {
    const auto oy = pad + (i / cols) * (h + pad), ox = pad + (i % cols) * (w + pad);
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) out[(ch * gh + oy + y) * gw + ox + x] = images[i][(ch * h + y) * w + x];
  }
  return out;
}

Tensor mapper_image(const lowrank::SyntheticDataset& dataset, std::int64_t mapper) {
  const auto& meta = dataset.meta;
  if (mapper < 0 || mapper >= meta.mappers) throw InvalidArgument("mapper_image: mapper index out of range");
  const auto r = meta.rank, c = meta.channels;
  double diag = 0.0;
  std::int64_t count = 0;
  for (std::int64_t b = 0; b < meta.blocks_per_mapper; ++b) {
    const auto& sigma = dataset.basis[static_cast<std::size_t>(mapper * meta.blocks_per_mapper + b)].sigma;
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t i = 0; i < r; ++i, ++count) diag += std::abs(sigma[(ch * r + i) * r + i]);
  }
  const double s = (count > 0 && diag > 0.0) ? diag / static_cast<double>(count) : 1.0;
  lowrank::BasisBlock block{static_cast<int>(mapper), Tensor(Shape{c, r, r})};
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t i = 0; i < r; ++i) block.sigma[(ch * r + i) * r + i] = s;
  return lowrank::synthesize(dataset.mappers[static_cast<std::size_t>(mapper)], block);
}

std::vector<std::filesystem::path> export_checkpoint(const lowrank::SyntheticDataset& dataset,
                                                     const std::vector<double>& mean, const std::vector<double>& std,
                                                     const std::filesystem::path& out_dir) {
  dataset.validate();
  const auto& meta = dataset.meta;
  const std::string ext = meta.channels == 1 ? ".pgm" : ".ppm";
  std::filesystem::create_directories(out_dir);
  const auto images = lowrank::synthesize_all(dataset);
  const auto cols = static_cast<std::int64_t>(std::ceil(std::sqrt(static_cast<double>(meta.blocks_per_mapper))));
  std::vector<std::filesystem::path> written;

  for (std::int64_t i = 0; i < meta.mappers; ++i) {
    const auto prefix = "mapper_" + std::to_string(i);
    std::vector<Tensor> tiles;
    std::vector<Tensor> heat;
    for (std::int64_t b = 0; b < meta.blocks_per_mapper; ++b) {
      const auto idx = static_cast<std::size_t>(i * meta.blocks_per_mapper + b);
      tiles.push_back(to_display(images[idx], mean, std));
      // Channels of one sigma block side by side, as a single-channel heatmap.
      const auto& sigma = dataset.basis[idx].sigma;
      const auto r = meta.rank;
      Tensor strip(Shape{1, r, meta.channels * r});
      for (std::int64_t ch = 0; ch < meta.channels; ++ch)
        for (std::int64_t y = 0; y < r; ++y)
          for (std::int64_t x = 0; x < r; ++x) strip[y * meta.channels * r + ch * r + x] = sigma[(ch * r + y) * r + x];
      heat.push_back(min_max(strip));
    }
    written.push_back(out_dir / (prefix + "_images" + ext));
    write_pnm(written.back(), grid(tiles, cols));
    written.push_back(out_dir / (prefix + "_view" + ext));
    write_pnm(written.back(), to_display(mapper_image(dataset, i), mean, std));
    written.push_back(out_dir / (prefix + "_basis.pgm"));
    write_pnm(written.back(), grid(heat, cols));
  }
  return written;
}

}  // namespace lss::viz
