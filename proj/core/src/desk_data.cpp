#include "lss/desk_data.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "lss/binary_io.hpp"
#include "lss/error.hpp"

namespace lss::desk {

namespace {

using Canvas = std::vector<double>;

void stamp(Canvas& img, std::int64_t side, double y, double x, double value) {
  const auto iy = static_cast<std::int64_t>(std::lround(y));
  const auto ix = static_cast<std::int64_t>(std::lround(x));
  if (iy < 0 || ix < 0 || iy >= side || ix >= side) return;
  auto& p = img[static_cast<std::size_t>(iy * side + ix)];
  p = std::max(p, value);
}

void segment(Canvas& img, std::int64_t side, double y0, double x0, double y1, double x1, double thickness,
             double value) {
  const double len = std::hypot(y1 - y0, x1 - x0);
  const int steps = std::max(2, static_cast<int>(std::ceil(len * 3)));
  const double half = thickness / 2.0;
  for (int s = 0; s <= steps; ++s) {
    const double t = static_cast<double>(s) / steps;
    const double y = y0 + t * (y1 - y0), x = x0 + t * (x1 - x0);
    for (double dy = -half; dy <= half + 1e-9; dy += 0.5)
      for (double dx = -half; dx <= half + 1e-9; dx += 0.5) stamp(img, side, y + dy, x + dx, value);
  }
}

void ring(Canvas& img, std::int64_t side, double cy, double cx, double radius, double thickness, double value) {
  for (std::int64_t y = 0; y < side; ++y)
    for (std::int64_t x = 0; x < side; ++x) {
      const double d = std::hypot(static_cast<double>(y) - cy, static_cast<double>(x) - cx);
      if (std::abs(d - radius) <= thickness / 2.0) {
        auto& p = img[static_cast<std::size_t>(y * side + x)];
        p = std::max(p, value);
      }
    }
}

Canvas draw(int label, const DeskSpec& spec, std::mt19937_64& rng) {
  const auto side = spec.side;
  const double mid = (static_cast<double>(side) - 1.0) / 2.0;
  std::uniform_real_distribution<double> shift(-0.2 * side, 0.2 * side);
  std::uniform_real_distribution<double> size(0.2 * side, 0.32 * side);
  std::uniform_real_distribution<double> thick(1.0, 2.5);
  std::uniform_real_distribution<double> bright(0.6, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, spec.noise);

  Canvas img(static_cast<std::size_t>(side * side), 0.0);
  const double cy = mid + shift(rng), cx = mid + shift(rng);
  const double s = size(rng), t = thick(rng), v = bright(rng);
  if (label == 0) {
    ring(img, side, cy, cx, s, t, v);
  } else {
    segment(img, side, cy - s, cx, cy + s, cx, t, v);
    segment(img, side, cy, cx - s, cy, cx + s, t, v);
  }
  for (std::int64_t d = 0; d < spec.distractors; ++d) {
    const double y0 = unit(rng) * side, x0 = unit(rng) * side;
    const double angle = unit(rng) * 2.0 * 3.14159265358979;
    const double len = 0.15 * side + unit(rng) * 0.2 * side;
    segment(img, side, y0, x0, y0 + len * std::sin(angle), x0 + len * std::cos(angle), 1.0, 0.3 + 0.5 * unit(rng));
  }
  const double offset = 0.3 * unit(rng);
  for (auto& p : img) p = std::clamp(p + offset + noise(rng), 0.0, 1.0);
  return img;
}

LabeledImages make_split(std::int64_t per_class, const DeskSpec& spec, std::mt19937_64& rng) {
  LabeledImages out({1, spec.side, spec.side}, 2);
  out.reserve(static_cast<std::size_t>(2 * per_class));
  std::vector<float> px(static_cast<std::size_t>(spec.side * spec.side));
  for (std::int64_t i = 0; i < 2 * per_class; ++i) {
    const int label = static_cast<int>(i % 2);
    const auto img = draw(label, spec, rng);
    std::transform(img.begin(), img.end(), px.begin(), [](double v) { return static_cast<float>(v); });
    out.add(px, label);
  }
  return out;
}

void write_idx_pair(const LabeledImages& images, const std::filesystem::path& image_path,
                    const std::filesystem::path& label_path) {
  auto be32 = [](std::vector<std::uint8_t>& b, std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
  };
  std::vector<std::uint8_t> img, lab;
  be32(img, 0x00000803);
  be32(img, static_cast<std::uint32_t>(images.size()));
  be32(img, static_cast<std::uint32_t>(images.shape().height));
  be32(img, static_cast<std::uint32_t>(images.shape().width));
  for (float v : images.all_pixels()) img.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0f)));
  be32(lab, 0x00000801);
  be32(lab, static_cast<std::uint32_t>(images.size()));
  for (int l : images.labels()) lab.push_back(static_cast<std::uint8_t>(l));
  io::write_file(image_path, img);
  io::write_file(label_path, lab);
}

}  // namespace

store::Split generate(const DeskSpec& spec) {
  if (spec.train_per_class < 1 || spec.test_per_class < 1) throw ConfigError("desk: per-class counts must be positive");
  if (spec.side < 8) throw ConfigError("desk: image side must be at least 8");
  if (!(spec.noise >= 0.0)) throw ConfigError("desk: noise must be non-negative");
  std::mt19937_64 rng(spec.seed);
  store::Split split;
  split.train = make_split(spec.train_per_class, spec, rng);
  split.test = make_split(spec.test_per_class, spec, rng);
  return split;
}

void write_idx(const DeskSpec& spec, const std::filesystem::path& dir) {
  const auto split = generate(spec);
  std::filesystem::create_directories(dir);
  write_idx_pair(split.train, dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte");
  write_idx_pair(split.test, dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte");
}

}  // namespace lss::desk
