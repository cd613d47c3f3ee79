#pragma once

// Low-rank parameterization of a synthetic image set.
//
// k mapper sets each hold per-channel U (H x r) and Vt (r x W). Every mapper
// is shared by m basis blocks, each a dense per-channel r x r matrix sigma.
// Image (mapper i, block b) is U[c] * sigma[c] * Vt[c] for each channel c.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "lss/autodiff.hpp"
#include "lss/dataset.hpp"
#include "lss/tensor.hpp"

namespace lss::lowrank {

struct MapperSet {
  int id = 0;
  Tensor u;   // [C, H, r]
  Tensor vt;  // [C, r, W]
};

struct BasisBlock {
  int mapper_id = 0;
  Tensor sigma;  // [C, r, r]
};

struct DatasetMeta {
  std::int64_t channels = 0;
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::int64_t rank = 0;
  std::int64_t mappers = 0;          // k
  std::int64_t blocks_per_mapper = 0;  // m
  std::int64_t num_classes = 0;

  std::int64_t images() const noexcept { return mappers * blocks_per_mapper; }
  ImageShape image_shape() const { return {channels, height, width}; }
  friend bool operator==(const DatasetMeta&, const DatasetMeta&) = default;
};

/// Mappers plus basis blocks; basis is ordered mapper-major (block b of mapper
/// i sits at index i * m + b).
struct SyntheticDataset {
  DatasetMeta meta;
  std::vector<MapperSet> mappers;
  std::vector<BasisBlock> basis;

  /// Throws InvalidArgument if any structural invariant is violated.
  void validate() const;
  /// Float count of mappers and basis blocks (labels excluded).
  std::int64_t factor_param_count() const;
};

struct StoragePlan {
  std::int64_t channels = 0, height = 0, width = 0, num_classes = 0, ipc = 0;
  std::int64_t rank = 0;
  std::int64_t mappers = 0;            // k
  std::int64_t blocks_per_mapper = 0;  // m
  std::int64_t images = 0;
  std::int64_t param_count = 0;
  std::int64_t budget = 0;
  double utilization = 0.0;
  /// false: plain pixel parameterization (identity mappers, sigma = pixels).
  bool lowrank = true;

  DatasetMeta meta() const {
    return {channels, height, width, rank, mappers, blocks_per_mapper, num_classes};
  }
};

/// C*k*(H*r + r*W) + C*k*m*r^2 + k*m*num_classes.
std::int64_t plan_param_count(std::int64_t channels, std::int64_t height, std::int64_t width,
                              std::int64_t num_classes, std::int64_t rank, std::int64_t k, std::int64_t m);

inline constexpr std::int64_t kMaxMappers = 64;
inline constexpr std::int64_t kMaxBlocksPerMapper = 512;

/// Budget planner. With k and m omitted, picks the pair maximizing image count,
/// then utilization, then preferring fewer mappers. Throws InfeasibleBudget.
StoragePlan plan_budget(std::int64_t channels, std::int64_t height, std::int64_t width, std::int64_t num_classes,
                        std::int64_t ipc, std::int64_t rank, std::optional<std::int64_t> k = std::nullopt,
                        std::optional<std::int64_t> m = std::nullopt);

/// Equal-budget pixel plan: num_classes * ipc full images. Requires H == W so
/// the images fit the factorized container with identity mappers.
StoragePlan plan_pixels(std::int64_t channels, std::int64_t height, std::int64_t width, std::int64_t num_classes,
                        std::int64_t ipc);

/// Per-channel U * sigma * Vt. No clamping.
Tensor synthesize(const MapperSet& mapper, const BasisBlock& block);
/// All k*m images in mapper-major order.
std::vector<Tensor> synthesize_all(const SyntheticDataset& dataset);

/// Differentiable synthesis from stacked factors:
/// u [k, C, H, r], vt [k, C, r, W], sigma [k*m, C, r, r] -> [k*m, C, H, W].
ad::Var synthesize_stacked(const ad::Var& u, const ad::Var& vt, const ad::Var& sigma, const DatasetMeta& meta);

struct StackedFactors {
  Tensor u, vt, sigma;
};
StackedFactors stack(const SyntheticDataset& dataset);
void unstack(const StackedFactors& factors, SyntheticDataset& dataset);

struct TruncatedSvd {
  Tensor u;      // [C, H, r], orthonormal columns
  Tensor sigma;  // [C, r, r], diagonal, descending, non-negative
  Tensor vt;     // [C, r, W], orthonormal rows
};

TruncatedSvd truncated_svd(const Tensor& image, std::int64_t rank);

/// sigma[c] = U[c]^T x[c] Vt[c]^T: the coordinates of an image in the mapper's
/// subspace.
BasisBlock project(const MapperSet& mapper, const Tensor& image);

enum class InitScheme { SvdReal, Random };
InitScheme parse_init_scheme(const std::string& name);
std::string to_string(InitScheme scheme);

/// Builds the initial factors. Image j of the synthesize_all order (and, for
/// svd_real, the source of mapper i) is drawn from class j mod num_classes, so
/// round-robin labels line up with content.
SyntheticDataset init_dataset(ImagePool& pool, const StoragePlan& plan, InitScheme scheme, std::uint64_t seed);

/// Per-channel numerical rank: singular values above rel_tol * sigma_max.
std::int64_t numerical_rank(const Tensor& channel_matrix_hw, double rel_tol = 1e-6);

// ---- LSS1 container --------------------------------------------------------

struct Checkpoint {
  SyntheticDataset dataset;
  Tensor label_logits;  // [k*m, num_classes]
};

inline constexpr std::uint16_t kContainerVersion = 1;

std::vector<std::uint8_t> encode_container(const Checkpoint& ckpt);
Checkpoint decode_container(std::span<const std::uint8_t> bytes);
void save_container(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_container(const std::filesystem::path& path);

}  // namespace lss::lowrank
