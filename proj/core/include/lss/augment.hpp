#pragma once

// Differentiable image augmentation. Geometric ops are bilinear resampling
// maps, color ops are affine in the pixels, and cutout multiplies by a soft
// mask, so every op passes gradients back to the input pixels.

#include <cstdint>
#include <string>
#include <vector>

#include "lss/autodiff.hpp"

namespace lss::aug {

enum class AugOp { Flip, CropShift, Cutout, Brightness, Saturation, Contrast, Scale, Rotate };

std::string to_string(AugOp op);
/// Throws ConfigError for unknown names.
AugOp parse_op(const std::string& name);

struct AugStrengths {
  double flip_prob = 0.5;
  /// Maximum translation in pixels; negative selects floor(H / 8).
  double shift = -1.0;
  /// Cutout square side as a fraction of the image side.
  double cutout = 0.5;
  /// Additive offset drawn from [-b/2, b/2].
  double brightness = 1.0;
  /// Chroma factor drawn from [0, s).
  double saturation = 2.0;
  /// Contrast factor drawn from [1 - c, 1 + c).
  double contrast = 0.5;
  /// Per-axis zoom drawn from [1/s, s].
  double scale = 1.2;
  /// Rotation angle in degrees drawn from [-a, a].
  double rotate = 15.0;
};

struct AugPolicy {
  std::vector<AugOp> ops;
  AugStrengths strength;
  /// One parameter draw shared by the whole batch.
  bool siamese = false;

  /// Throws ConfigError if a strength is outside its documented range.
  void validate(std::int64_t height, std::int64_t width) const;
};

/// Parses a comma-separated op list ("crop_shift,flip,cutout"); empty string
/// gives the identity policy.
AugPolicy parse_policy(const std::string& ops_csv);
std::string format_ops(const std::vector<AugOp>& ops);
/// {crop_shift, flip, cutout, brightness, saturation, contrast} for color input,
/// {crop_shift, flip, cutout, brightness} for grayscale.
AugPolicy default_policy(std::int64_t channels);

/// Augments a [B, C, H, W] batch. Deterministic in (batch, policy, seed).
ad::Var augment(const ad::Var& batch, const AugPolicy& policy, std::uint64_t seed);
std::vector<Tensor> augment(const std::vector<Tensor>& batch, const AugPolicy& policy, std::uint64_t seed);

}  // namespace lss::aug
