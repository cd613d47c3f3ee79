#pragma once

// Procedural two-class grayscale digits-sized dataset for desk-scale runs.
//
// Class 0 draws a hollow ring, class 1 a plus sign. Each image varies the
// centre, size, stroke width and intensity, and adds distractor strokes,
// a background offset and pixel noise.

#include <cstdint>
#include <filesystem>

#include "lss/dataset_store.hpp"

namespace lss::desk {

struct DeskSpec {
  std::int64_t train_per_class = 250;
  std::int64_t test_per_class = 250;
  std::int64_t side = 28;
  std::int64_t distractors = 3;
  double noise = 0.25;
  std::uint64_t seed = 7;
};

/// Pixels in [0, 1].
store::Split generate(const DeskSpec& spec);

/// Writes train/t10k IDX image and label files readable by the idx ingester.
void write_idx(const DeskSpec& spec, const std::filesystem::path& dir);

}  // namespace lss::desk
