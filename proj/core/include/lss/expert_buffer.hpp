#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lss/augment.hpp"
#include "lss/convnet.hpp"
#include "lss/dataset.hpp"

namespace lss::expert {

struct TrajectoryMeta {
  std::uint64_t spec_hash = 0;
  std::string dataset_id;
  double lr = 0.0;
  double momentum = 0.0;
  std::uint32_t batch_size = 0;
  std::uint64_t seed = 0;
  std::uint32_t epochs = 0;
  friend bool operator==(const TrajectoryMeta&, const TrajectoryMeta&) = default;
};

/// Per-epoch parameter snapshots; snapshots[0] is the initialization. Every
/// snapshot value is float32-representable, so serialization is lossless.
struct Trajectory {
  std::vector<Tensor> snapshots;
  TrajectoryMeta meta;

  std::int64_t epochs() const { return static_cast<std::int64_t>(snapshots.size()) - 1; }
  std::int64_t param_length() const { return snapshots.empty() ? 0 : snapshots.front().numel(); }
};

struct ExpertConfig {
  std::int64_t epochs = 50;
  double lr = 0.01;
  double momentum = 0.9;
  std::int64_t batch_size = 256;
  aug::AugPolicy augmentation;
};

/// SGD with momentum on the real data, with non-differentiable augmentation.
Trajectory train_expert(const LabeledImages& data, const nn::ConvNetSpec& spec, const ExpertConfig& cfg,
                        std::uint64_t seed, const std::string& dataset_id);

/// Mean cross-entropy of hard labels over the whole set (no augmentation).
double dataset_loss(const nn::ConvNetSpec& spec, const Tensor& params, const LabeledImages& data);
double dataset_accuracy(const nn::ConvNetSpec& spec, const Tensor& params, const LabeledImages& data);

// ---- LSSB trajectory files --------------------------------------------------

inline constexpr std::uint16_t kTrajectoryVersion = 1;

std::vector<std::uint8_t> encode_trajectory(const Trajectory& traj);
Trajectory decode_trajectory(std::span<const std::uint8_t> bytes);
void save_trajectory(const Trajectory& traj, const std::filesystem::path& path);
Trajectory load_trajectory(const std::filesystem::path& path);
/// Bytes preceding the snapshot payload for a given dataset id.
std::size_t trajectory_header_bytes(const std::string& dataset_id);

// ---- buffers -----------------------------------------------------------------

class ExpertBuffer {
 public:
  ExpertBuffer() = default;
  explicit ExpertBuffer(std::vector<Trajectory> trajectories);

  void add(Trajectory traj);
  std::size_t size() const noexcept { return trajectories_.size(); }
  bool empty() const noexcept { return trajectories_.empty(); }
  const Trajectory& at(std::size_t i) const { return trajectories_.at(i); }
  std::int64_t max_epochs() const;

  struct Sample {
    std::size_t trajectory = 0;
    Tensor start;
    Tensor target;
  };
  /// Uniformly picks a trajectory with at least start + span epochs and returns
  /// (snapshots[start], snapshots[start + span]). Throws ConfigError if none
  /// qualifies.
  Sample sample(std::int64_t start_epoch, std::int64_t span, std::mt19937_64& rng) const;

 private:
  std::vector<Trajectory> trajectories_;
};

struct ManifestEntry {
  std::string path;  // relative to the manifest directory
  TrajectoryMeta meta;
};

struct BufferManifest {
  int format_version = 1;
  std::vector<ManifestEntry> entries;
};

void save_manifest(const BufferManifest& manifest, const std::filesystem::path& path);
BufferManifest load_manifest(const std::filesystem::path& path);

/// Loads every trajectory named by the manifest; missing files raise
/// DependencyError, corrupt ones LoadError.
ExpertBuffer load_buffer(const std::filesystem::path& manifest_path);

/// Trains `count` experts with seeds base_seed + i, writing expert_<i>.lssb
/// files and buffer.json into `dir`. Experts run on up to `workers` threads.
BufferManifest build_buffer(const LabeledImages& data, const nn::ConvNetSpec& spec, const ExpertConfig& cfg,
                            std::int64_t count, std::uint64_t base_seed, const std::string& dataset_id,
                            const std::filesystem::path& dir, int workers = 1);

}  // namespace lss::expert
