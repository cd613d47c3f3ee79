#include "lss/convnet.hpp"

#include <cmath>
#include <random>

#include "lss/error.hpp"

namespace lss::nn {

namespace {

constexpr double kNormEps = 1e-5;
constexpr std::int64_t kKernel = 3;

/// [C] per-channel vector -> [B*C, L] broadcast.
ad::Var channel_broadcast(const ad::Var& v, std::int64_t batch, std::int64_t spatial) {
  const auto c = v.shape()[0];
  return ad::broadcast_rows(ad::reshape(ad::tile_rows(v, batch), {batch * c}), spatial);
}

}  // namespace

void ConvNetSpec::validate() const {
  if (channels < 1 || height < 1 || width < 1 || num_classes < 1 || net_width < 1 || depth < 0)
    throw InvalidArgument("ConvNetSpec: dimensions must be positive");
  if ((height >> depth) < 1 || (width >> depth) < 1)
    throw InvalidArgument("ConvNetSpec: input " + std::to_string(height) + "x" + std::to_string(width) +
                          " too small for depth " + std::to_string(depth));
}

std::int64_t ConvNetSpec::feature_count() const {
  std::int64_t h = height, w = width;
  for (std::int64_t d = 0; d < depth; ++d) {
    h /= 2;
    w /= 2;
  }
  return (depth > 0 ? net_width : channels) * h * w;
}

ConvNetSpec ConvNetSpec::tiny(std::int64_t channels, std::int64_t height, std::int64_t width,
                              std::int64_t num_classes) {
  ConvNetSpec s;
  s.channels = channels;
  s.height = height;
  s.width = width;
  s.num_classes = num_classes;
  s.depth = 2;
  s.net_width = 8;
  return s;
}

std::string to_string(Norm norm) { return norm == Norm::Instance ? "instancenorm" : "none"; }

Norm parse_norm(const std::string& name) {
  if (name == "instancenorm" || name == "instance") return Norm::Instance;
  if (name == "none") return Norm::None;
  throw ConfigError("unknown norm '" + name + "' (expected instancenorm or none)");
}

ParamLayout make_layout(const ConvNetSpec& spec) {
  spec.validate();
  ParamLayout layout;
  auto push = [&layout](std::string name, Shape shape) {
    const auto n = shape_numel(shape);
    layout.entries.push_back({std::move(name), std::move(shape), layout.total});
    layout.total += n;
  };
  std::int64_t in = spec.channels;
  for (std::int64_t d = 0; d < spec.depth; ++d) {
    const auto p = "block" + std::to_string(d) + ".";
    push(p + "conv.weight", {spec.net_width, in, kKernel, kKernel});
    push(p + "conv.bias", {spec.net_width});
    if (spec.norm == Norm::Instance) {
      push(p + "norm.scale", {spec.net_width});
      push(p + "norm.shift", {spec.net_width});
    }
    in = spec.net_width;
  }
  push("head.weight", {spec.num_classes, spec.feature_count()});
  push("head.bias", {spec.num_classes});
  return layout;
}

std::uint64_t spec_hash(const ConvNetSpec& spec) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xFF;
      h *= 1099511628211ull;
    }
  };
  for (auto v : {spec.channels, spec.height, spec.width, spec.num_classes, spec.depth, spec.net_width})
    mix(static_cast<std::uint64_t>(v));
  mix(spec.norm == Norm::Instance ? 1 : 0);
  return h;
}

ParamVector init_params(const ConvNetSpec& spec, std::uint64_t seed) {
  ParamVector pv{Tensor(), make_layout(spec)};
  pv.flat = Tensor(Shape{pv.layout.total});
  std::mt19937_64 rng(seed);
  for (const auto& e : pv.layout.entries) {
    double* dst = pv.flat.ptr() + e.offset;
    const auto n = shape_numel(e.shape);
    if (e.shape.size() >= 2) {
      const auto fan_in = n / e.shape[0];
      std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
      for (std::int64_t i = 0; i < n; ++i) dst[i] = static_cast<double>(static_cast<float>(nd(rng)));
    } else if (e.name.ends_with("norm.scale")) {
      std::fill(dst, dst + n, 1.0);
    }
  }
  return pv;
}

std::vector<Tensor> unflatten(const ParamVector& params) {
  if (params.flat.numel() != params.layout.total) throw InvalidArgument("unflatten: vector length does not match layout");
  std::vector<Tensor> out;
  for (const auto& e : params.layout.entries) {
    const auto n = shape_numel(e.shape);
    out.emplace_back(e.shape, std::vector<double>(params.flat.ptr() + e.offset, params.flat.ptr() + e.offset + n));
  }
  return out;
}

ParamVector flatten(const ConvNetSpec& spec, const std::vector<Tensor>& structured) {
  ParamVector pv{Tensor(), make_layout(spec)};
  if (structured.size() != pv.layout.entries.size()) throw InvalidArgument("flatten: wrong number of parameter tensors");
  pv.flat = Tensor(Shape{pv.layout.total});
  for (std::size_t i = 0; i < structured.size(); ++i) {
    const auto& e = pv.layout.entries[i];
    if (structured[i].shape() != e.shape)
      throw InvalidArgument("flatten: " + e.name + " has shape " + shape_string(structured[i].shape()) + ", expected " +
                            shape_string(e.shape));
    std::copy_n(structured[i].ptr(), structured[i].numel(), pv.flat.ptr() + e.offset);
  }
  return pv;
}

ad::Var forward(const ConvNetSpec& spec, const ad::Var& params, const ad::Var& batch) {
  const auto layout = make_layout(spec);
  if (params.numel() != layout.total)
    throw InvalidArgument("forward: parameter vector has " + std::to_string(params.numel()) + " entries, layout needs " +
                          std::to_string(layout.total));
  const auto& bs = batch.shape();
  if (bs.size() != 4 || bs[1] != spec.channels || bs[2] != spec.height || bs[3] != spec.width)
    throw InvalidArgument("forward: batch shape " + shape_string(bs) + " does not match network input");
  const auto b = bs[0];
  std::size_t next = 0;
  auto take = [&]() {
    const auto& e = layout.entries[next++];
    return ad::slice(params, e.offset, e.shape);
  };

  ad::Var x = batch;
  std::int64_t h = spec.height, w = spec.width;
  for (std::int64_t d = 0; d < spec.depth; ++d) {
    const auto c = spec.net_width;
    ad::Var weight = take();
    ad::Var bias = take();
    x = ad::conv2d(x, weight);
    ad::Var rows = ad::add(ad::reshape(x, {b * c, h * w}), channel_broadcast(bias, b, h * w));
    if (spec.norm == Norm::Instance) {
      ad::Var scale = take();
      ad::Var shift = take();
      ad::Var centered = ad::sub(rows, ad::broadcast_rows(ad::row_mean(rows), h * w));
      ad::Var var = ad::row_mean(ad::mul(centered, centered));
      ad::Var inv_std = ad::pow(ad::add_scalar(var, kNormEps), -0.5);
      rows = ad::mul(centered, ad::broadcast_rows(inv_std, h * w));
      rows = ad::add(ad::mul(rows, channel_broadcast(scale, b, h * w)), channel_broadcast(shift, b, h * w));
    }
    x = ad::avg_pool2(ad::relu(ad::reshape(rows, {b, c, h, w})));
    h /= 2;
    w /= 2;
  }
  ad::Var head_w = take();
  ad::Var head_b = take();
  ad::Var features = ad::reshape(x, {b, spec.feature_count()});
  return ad::add(ad::matmul(features, head_w, false, true), ad::tile_rows(head_b, b));
}

Tensor forward(const ConvNetSpec& spec, const ParamVector& params, const Tensor& batch) {
  ad::NoGradGuard guard;
  return forward(spec, ad::Var(params.flat), ad::Var(batch)).value();
}

}  // namespace lss::nn
