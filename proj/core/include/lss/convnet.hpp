#pragma once

// Functional ConvNet: every forward call takes the full parameter vector, so
// parameters can be the output of earlier differentiable updates.
//
// Architecture: depth x [conv3x3 (same padding) + bias -> instance norm with
// affine scale/shift -> ReLU -> 2x2 average pool], then a linear head.
//
// Flat parameter layout, in order: for each block from input to output
//   conv weight [width, in_channels, 3, 3], conv bias [width],
//   norm scale [width], norm shift [width]    (norm entries only when enabled)
// then head weight [num_classes, features], head bias [num_classes].

#include <cstdint>
#include <string>
#include <vector>

#include "lss/autodiff.hpp"
#include "lss/dataset.hpp"

namespace lss::nn {

enum class Norm { Instance, None };

struct ConvNetSpec {
  std::int64_t channels = 3;
  std::int64_t height = 32;
  std::int64_t width = 32;
  std::int64_t num_classes = 10;
  std::int64_t depth = 3;
  std::int64_t net_width = 128;
  Norm norm = Norm::Instance;

  /// Throws InvalidArgument unless every pooling stage keeps at least one pixel.
  void validate() const;
  std::int64_t feature_count() const;
  ImageShape input_shape() const { return {channels, height, width}; }
  /// Width-8 variant for gradient checks.
  static ConvNetSpec tiny(std::int64_t channels, std::int64_t height, std::int64_t width, std::int64_t num_classes);
};

std::string to_string(Norm norm);
Norm parse_norm(const std::string& name);

struct ParamEntry {
  std::string name;
  Shape shape;
  std::int64_t offset = 0;
  friend bool operator==(const ParamEntry&, const ParamEntry&) = default;
};

struct ParamLayout {
  std::vector<ParamEntry> entries;
  std::int64_t total = 0;
  friend bool operator==(const ParamLayout&, const ParamLayout&) = default;
};

ParamLayout make_layout(const ConvNetSpec& spec);

struct ParamVector {
  Tensor flat;  // [total]
  ParamLayout layout;
};

/// Stable 64-bit fingerprint of the architecture (FNV-1a over the layout).
std::uint64_t spec_hash(const ConvNetSpec& spec);

/// Kaiming fan-in normal weights, zero biases and shifts, unit scales. Values
/// are rounded to float32 so expert snapshot 0 matches the init bit for bit.
ParamVector init_params(const ConvNetSpec& spec, std::uint64_t seed);

/// One tensor per layout entry.
std::vector<Tensor> unflatten(const ParamVector& params);
ParamVector flatten(const ConvNetSpec& spec, const std::vector<Tensor>& structured);

/// Logits [B, num_classes] for a [B, C, H, W] batch; `params` is the flat vector.
ad::Var forward(const ConvNetSpec& spec, const ad::Var& params, const ad::Var& batch);
Tensor forward(const ConvNetSpec& spec, const ParamVector& params, const Tensor& batch);

}  // namespace lss::nn
