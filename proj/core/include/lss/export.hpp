#pragma once

// Visualization of synthetic sets as binary PGM (grayscale) or PPM (color).

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lss/lowrank.hpp"

namespace lss::viz {

/// [C, H, W] in display units [0, 1] -> PGM (C = 1) or PPM (C = 3) bytes.
/// Values are clamped before quantization.
std::vector<std::uint8_t> encode_pnm(const Tensor& image);
void write_pnm(const std::filesystem::path& path, const Tensor& image);

/// x * std[c] + mean[c], clamped to [0, 1]. Empty stats skip de-normalization.
Tensor to_display(const Tensor& image, const std::vector<double>& mean, const std::vector<double>& std);
/// Affine rescale of the whole tensor onto [0, 1].
Tensor min_max(const Tensor& image);

/// Tiles same-shape [C, H, W] images row-major with `pad` pixels of spacing.
Tensor grid(const std::vector<Tensor>& images, std::int64_t cols, std::int64_t pad = 1, double fill = 1.0);

/// U * (s I) * Vt per channel with s the mean diagonal magnitude of the
/// mapper's basis blocks (1 when they are all zero).
Tensor mapper_image(const lowrank::SyntheticDataset& dataset, std::int64_t mapper);

/// Per mapper: mapper_<i>_images, mapper_<i>_view and mapper_<i>_basis files
/// (.pgm or .ppm). Returns the written paths in order.
std::vector<std::filesystem::path> export_checkpoint(const lowrank::SyntheticDataset& dataset,
                                                     const std::vector<double>& mean, const std::vector<double>& std,
                                                     const std::filesystem::path& out_dir);

}  // namespace lss::viz
