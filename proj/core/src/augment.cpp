#include "lss/augment.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "lss/error.hpp"

namespace lss::aug {

namespace {

struct Geometry {
  std::int64_t b, c, h, w;
  std::int64_t numel() const { return b * c * h * w; }
};

/// Maps output pixel-centred coordinates (u, v) to source coordinates.
struct Affine {
  // src = M * (u, v) + t, in centred pixel units.
  double m00 = 1, m01 = 0, m10 = 0, m11 = 1, tx = 0, ty = 0;
};

void add_bilinear(std::vector<ad::SparseMap::Entry>& entries, std::int64_t row, std::int64_t plane_offset,
                  const Geometry& g, double sx, double sy) {
  const double fx = std::floor(sx), fy = std::floor(sy);
  const double ax = sx - fx, ay = sy - fy;
  const auto x0 = static_cast<std::int64_t>(fx), y0 = static_cast<std::int64_t>(fy);
  const double wts[4] = {(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
  const std::int64_t xs[4] = {x0, x0 + 1, x0, x0 + 1};
  const std::int64_t ys[4] = {y0, y0, y0 + 1, y0 + 1};
  for (int i = 0; i < 4; ++i) {
    if (wts[i] == 0.0 || xs[i] < 0 || xs[i] >= g.w || ys[i] < 0 || ys[i] >= g.h) continue;
    entries.push_back({row, plane_offset + ys[i] * g.w + xs[i], wts[i]});
  }
}

ad::Var resample(const ad::Var& x, const Geometry& g, const std::vector<Affine>& per_image) {
  std::vector<ad::SparseMap::Entry> entries;
  entries.reserve(static_cast<std::size_t>(g.numel() * 4));
  const double cx = 0.5 * static_cast<double>(g.w), cy = 0.5 * static_cast<double>(g.h);
  for (std::int64_t n = 0; n < g.b; ++n) {
    const Affine& a = per_image[static_cast<std::size_t>(n)];
    for (std::int64_t ch = 0; ch < g.c; ++ch) {
      const std::int64_t plane = (n * g.c + ch) * g.h * g.w;
      for (std::int64_t y = 0; y < g.h; ++y)
        for (std::int64_t xx = 0; xx < g.w; ++xx) {
          const double u = static_cast<double>(xx) + 0.5 - cx, v = static_cast<double>(y) + 0.5 - cy;
          const double su = a.m00 * u + a.m01 * v + a.tx, sv = a.m10 * u + a.m11 * v + a.ty;
          add_bilinear(entries, plane + y * g.w + xx, plane, g, su + cx - 0.5, sv + cy - 0.5);
        }
    }
  }
  auto map = std::make_shared<const ad::SparseMap>(g.numel(), g.numel(), entries);
  return ad::sparse_apply(x, std::move(map), false, x.shape());
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

constexpr double kCutoutEdge = 0.5;  // px

class Draws {
 public:
  Draws(std::uint64_t seed, bool siamese, std::int64_t batch) : rng_(seed), siamese_(siamese), batch_(batch) {}

  /// batch-many uniform draws in [lo, hi); one shared draw when siamese.
  std::vector<double> uniform(double lo, double hi) {
    std::uniform_real_distribution<double> ud(lo, hi);
    std::vector<double> v(static_cast<std::size_t>(batch_));
    if (siamese_) {
      const double s = ud(rng_);
      std::fill(v.begin(), v.end(), s);
    } else {
      for (auto& x : v) x = ud(rng_);
    }
    return v;
  }

 private:
  std::mt19937_64 rng_;
  bool siamese_;
  std::int64_t batch_;
};

}  // namespace

std::string to_string(AugOp op) {
  switch (op) {
    case AugOp::Flip: return "flip";
    case AugOp::CropShift: return "crop_shift";
    case AugOp::Cutout: return "cutout";
    case AugOp::Brightness: return "brightness";
    case AugOp::Saturation: return "saturation";
    case AugOp::Contrast: return "contrast";
    case AugOp::Scale: return "scale";
    case AugOp::Rotate: return "rotate";
  }
  return "?";
}

AugOp parse_op(const std::string& name) {
  for (auto op : {AugOp::Flip, AugOp::CropShift, AugOp::Cutout, AugOp::Brightness, AugOp::Saturation,
                  AugOp::Contrast, AugOp::Scale, AugOp::Rotate})
    if (to_string(op) == name) return op;
  throw ConfigError("unknown augmentation op '" + name + "'");
}

AugPolicy parse_policy(const std::string& ops_csv) {
  AugPolicy p;
  std::stringstream ss(ops_csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    const auto b = tok.find_first_not_of(" \t"), e = tok.find_last_not_of(" \t");
    if (b == std::string::npos) continue;
    p.ops.push_back(parse_op(tok.substr(b, e - b + 1)));
  }
  return p;
}

std::string format_ops(const std::vector<AugOp>& ops) {
  std::string s;
  for (std::size_t i = 0; i < ops.size(); ++i) s += (i ? "," : "") + to_string(ops[i]);
  return s;
}

AugPolicy default_policy(std::int64_t channels) {
  return channels >= 3 ? parse_policy("crop_shift,flip,cutout,brightness,saturation,contrast")
                       : parse_policy("crop_shift,flip,cutout,brightness");
}

void AugPolicy::validate(std::int64_t height, std::int64_t width) const {
  const auto& s = strength;
  auto bad = [](const std::string& what) { throw ConfigError("augmentation strength out of range: " + what); };
  if (s.flip_prob < 0 || s.flip_prob > 1) bad("flip_prob must lie in [0, 1]");
  const double max_shift = static_cast<double>(std::min(height, width) / 8);
  if (s.shift > max_shift) bad("shift exceeds floor(H/8) = " + std::to_string(max_shift));
  if (s.cutout < 0 || s.cutout > 1) bad("cutout must lie in [0, 1]");
  if (s.brightness < 0 || s.brightness > 2) bad("brightness must lie in [0, 2]");
  if (s.saturation < 0 || s.saturation > 4) bad("saturation must lie in [0, 4]");
  if (s.contrast < 0 || s.contrast > 1) bad("contrast must lie in [0, 1]");
  if (s.scale < 1 || s.scale > 2) bad("scale must lie in [1, 2]");
  if (s.rotate < 0 || s.rotate > 15) bad("rotate must lie in [0, 15] degrees");
}

ad::Var augment(const ad::Var& batch, const AugPolicy& policy, std::uint64_t seed) {
  if (batch.shape().size() != 4 || batch.shape()[0] < 1) throw InvalidArgument("augment: expected non-empty [B, C, H, W]");
  const Geometry g{batch.shape()[0], batch.shape()[1], batch.shape()[2], batch.shape()[3]};
  policy.validate(g.h, g.w);
  const auto& s = policy.strength;
  Draws draws(seed, policy.siamese, g.b);
  const auto img = g.c * g.h * g.w;
  ad::Var x = batch;

  for (AugOp op : policy.ops) {
    switch (op) {
      case AugOp::Flip: {
        auto r = draws.uniform(0.0, 1.0);
        std::vector<Affine> a(static_cast<std::size_t>(g.b));
        for (std::size_t i = 0; i < a.size(); ++i)
          if (r[i] < s.flip_prob) a[i].m00 = -1.0;
        x = resample(x, g, a);
        break;
      }
      case AugOp::CropShift: {
        const double max_shift = s.shift < 0 ? static_cast<double>(std::min(g.h, g.w) / 8) : s.shift;
        auto dx = draws.uniform(-max_shift, max_shift), dy = draws.uniform(-max_shift, max_shift);
        std::vector<Affine> a(static_cast<std::size_t>(g.b));
        for (std::size_t i = 0; i < a.size(); ++i) {
          a[i].tx = -dx[i];
          a[i].ty = -dy[i];
        }
        x = resample(x, g, a);
        break;
      }
      case AugOp::Scale: {
        const double lo = std::log(1.0 / s.scale), hi = std::log(s.scale);
        auto fx = draws.uniform(lo, hi), fy = draws.uniform(lo, hi);
        std::vector<Affine> a(static_cast<std::size_t>(g.b));
        for (std::size_t i = 0; i < a.size(); ++i) {
          a[i].m00 = std::exp(-fx[i]);
          a[i].m11 = std::exp(-fy[i]);
        }
        x = resample(x, g, a);
        break;
      }
      case AugOp::Rotate: {
        auto deg = draws.uniform(-s.rotate, s.rotate);
        std::vector<Affine> a(static_cast<std::size_t>(g.b));
        for (std::size_t i = 0; i < a.size(); ++i) {
          const double t = -deg[i] * std::numbers::pi / 180.0;
          a[i].m00 = std::cos(t);
          a[i].m01 = -std::sin(t);
          a[i].m10 = std::sin(t);
          a[i].m11 = std::cos(t);
        }
        x = resample(x, g, a);
        break;
      }
      case AugOp::Cutout: {
        const double half = 0.5 * s.cutout * static_cast<double>(std::min(g.h, g.w));
        auto cxs = draws.uniform(0.0, static_cast<double>(g.w)), cys = draws.uniform(0.0, static_cast<double>(g.h));
        Tensor mask(batch.shape());
        for (std::int64_t n = 0; n < g.b; ++n)
          for (std::int64_t y = 0; y < g.h; ++y)
            for (std::int64_t xx = 0; xx < g.w; ++xx) {
              const double px = static_cast<double>(xx) + 0.5, py = static_cast<double>(y) + 0.5;
              const double inside = sigmoid((half - std::abs(px - cxs[static_cast<std::size_t>(n)])) / kCutoutEdge) *
                                    sigmoid((half - std::abs(py - cys[static_cast<std::size_t>(n)])) / kCutoutEdge);
              for (std::int64_t ch = 0; ch < g.c; ++ch) mask[n * img + (ch * g.h + y) * g.w + xx] = 1.0 - inside;
            }
        x = ad::mul(x, ad::Var(std::move(mask)));
        break;
      }
      case AugOp::Brightness: {
        auto off = draws.uniform(-0.5 * s.brightness, 0.5 * s.brightness);
        Tensor t(batch.shape());
        for (std::int64_t n = 0; n < g.b; ++n)
          std::fill(t.ptr() + n * img, t.ptr() + (n + 1) * img, off[static_cast<std::size_t>(n)]);
        x = ad::add(x, ad::Var(std::move(t)));
        break;
      }
      case AugOp::Saturation: {
        auto f = draws.uniform(0.0, s.saturation);
        // out = mean_c + f * (x - mean_c), a per-pixel channel mix.
        std::vector<ad::SparseMap::Entry> entries;
        const double inv_c = 1.0 / static_cast<double>(g.c);
        for (std::int64_t n = 0; n < g.b; ++n) {
          const double fn = f[static_cast<std::size_t>(n)];
          for (std::int64_t co = 0; co < g.c; ++co)
            for (std::int64_t p = 0; p < g.h * g.w; ++p)
              for (std::int64_t ci = 0; ci < g.c; ++ci) {
                const double wgt = (1.0 - fn) * inv_c + (ci == co ? fn : 0.0);
                entries.push_back({n * img + co * g.h * g.w + p, n * img + ci * g.h * g.w + p, wgt});
              }
        }
        auto map = std::make_shared<const ad::SparseMap>(g.numel(), g.numel(), entries);
        x = ad::sparse_apply(x, std::move(map), false, x.shape());
        break;
      }
      case AugOp::Contrast: {
        auto f = draws.uniform(1.0 - s.contrast, 1.0 + s.contrast);
        ad::Var flat = ad::reshape(x, {g.b, img});
        ad::Var mean = ad::broadcast_rows(ad::row_mean(flat), img);
        Tensor ft(Shape{g.b, img});
        for (std::int64_t n = 0; n < g.b; ++n)
          std::fill(ft.ptr() + n * img, ft.ptr() + (n + 1) * img, f[static_cast<std::size_t>(n)]);
        x = ad::reshape(ad::add(ad::mul(ad::sub(flat, mean), ad::Var(std::move(ft))), mean), batch.shape());
        break;
      }
    }
  }
  return x;
}

std::vector<Tensor> augment(const std::vector<Tensor>& batch, const AugPolicy& policy, std::uint64_t seed) {
  if (batch.empty()) throw InvalidArgument("augment: empty batch");
  const Shape shape = batch.front().shape();
  if (shape.size() != 3) throw InvalidArgument("augment: images must be [C, H, W]");
  const auto n = shape_numel(shape);
  Tensor stacked(Shape{static_cast<std::int64_t>(batch.size()), shape[0], shape[1], shape[2]});
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch[i].shape() != shape) throw InvalidArgument("augment: batch images differ in shape");
    std::copy_n(batch[i].ptr(), n, stacked.ptr() + static_cast<std::int64_t>(i) * n);
  }
  ad::NoGradGuard guard;
  const Tensor out = augment(ad::Var(std::move(stacked)), policy, seed).value();
  std::vector<Tensor> result;
  for (std::size_t i = 0; i < batch.size(); ++i)
    result.emplace_back(shape, std::vector<double>(out.ptr() + static_cast<std::int64_t>(i) * n,
                                                   out.ptr() + static_cast<std::int64_t>(i + 1) * n));
  return result;
}

}  // namespace lss::aug
