#include "lss/expert_buffer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <numeric>
#include <mutex>
#include <thread>

#include "lss/binary_io.hpp"
#include "lss/error.hpp"
#include "lss/soft_labels.hpp"

namespace lss::expert {

namespace {

constexpr char kMagic[4] = {'L', 'S', 'S', 'B'};

Tensor round_to_f32(const Tensor& t) {
  Tensor out = t;
  for (auto& v : out.data()) v = static_cast<double>(static_cast<float>(v));
  return out;
}

Tensor one_hot(const LabeledImages& data, const std::vector<std::size_t>& idx) {
  const auto k = data.num_classes();
  Tensor t(Shape{static_cast<std::int64_t>(idx.size()), k});
  for (std::size_t i = 0; i < idx.size(); ++i) t[static_cast<std::int64_t>(i) * k + data.label(idx[i])] = 1.0;
  return t;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

Trajectory train_expert(const LabeledImages& data, const nn::ConvNetSpec& spec, const ExpertConfig& cfg,
                        std::uint64_t seed, const std::string& dataset_id) {
  if (cfg.epochs < 1) throw ConfigError("train_expert: epochs must be at least 1");
  if (cfg.batch_size < 1) throw ConfigError("train_expert: batch_size must be at least 1");
  if (data.empty()) throw DataError("train_expert: dataset is empty");
  if (data.shape() != spec.input_shape()) throw InvalidArgument("train_expert: dataset shape does not match network input");

  nn::ParamVector init = nn::init_params(spec, seed);
  Trajectory traj;
  traj.meta = {nn::spec_hash(spec), dataset_id, cfg.lr, cfg.momentum, static_cast<std::uint32_t>(cfg.batch_size), seed,
               static_cast<std::uint32_t>(cfg.epochs)};
  Tensor params = init.flat;
  traj.snapshots.push_back(round_to_f32(params));
  Tensor velocity(params.shape());

  std::mt19937_64 rng(seed ^ 0x9E3779B97F4A7C15ull);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t pos = 0; pos < order.size(); pos += static_cast<std::size_t>(cfg.batch_size)) {
      const auto end = std::min(order.size(), pos + static_cast<std::size_t>(cfg.batch_size));
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(pos),
                                   order.begin() + static_cast<std::ptrdiff_t>(end));
      Tensor images = data.batch(idx);
      if (!cfg.augmentation.ops.empty()) {
        ad::NoGradGuard guard;
        images = aug::augment(ad::Var(std::move(images)), cfg.augmentation, rng()).value();
      }
      ad::Var theta(params, true);
      ad::Var loss = labels::soft_cross_entropy(nn::forward(spec, theta, ad::Var(std::move(images))),
                                                ad::Var(one_hot(data, idx)));
      if (!std::isfinite(loss.item()))
        throw NumericError("expert training diverged at epoch " + std::to_string(epoch));
      const Tensor g = ad::grad(loss, {theta})[0].value();
      for (std::int64_t i = 0; i < params.numel(); ++i) {
        velocity[i] = cfg.momentum * velocity[i] + g[i];
        params[i] -= cfg.lr * velocity[i];
      }
    }
    traj.snapshots.push_back(round_to_f32(params));
  }
  return traj;
}

double dataset_loss(const nn::ConvNetSpec& spec, const Tensor& params, const LabeledImages& data) {
  if (data.empty()) throw DataError("dataset_loss: dataset is empty");
  ad::NoGradGuard guard;
  double total = 0.0;
  const std::size_t chunk = 256;
  for (std::size_t pos = 0; pos < data.size(); pos += chunk) {
    std::vector<std::size_t> idx(std::min(chunk, data.size() - pos));
    std::iota(idx.begin(), idx.end(), pos);
    ad::Var loss = labels::soft_cross_entropy(nn::forward(spec, ad::Var(params), ad::Var(data.batch(idx))),
                                              ad::Var(one_hot(data, idx)));
    total += loss.item() * static_cast<double>(idx.size());
  }
  return total / static_cast<double>(data.size());
}

double dataset_accuracy(const nn::ConvNetSpec& spec, const Tensor& params, const LabeledImages& data) {
  if (data.empty()) throw DataError("dataset_accuracy: dataset is empty");
  ad::NoGradGuard guard;
  std::size_t correct = 0;
  const std::size_t chunk = 256;
  const auto k = spec.num_classes;
  for (std::size_t pos = 0; pos < data.size(); pos += chunk) {
    std::vector<std::size_t> idx(std::min(chunk, data.size() - pos));
    std::iota(idx.begin(), idx.end(), pos);
    const Tensor logits = nn::forward(spec, ad::Var(params), ad::Var(data.batch(idx))).value();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const double* row = logits.ptr() + static_cast<std::int64_t>(i) * k;
      const auto pred = std::max_element(row, row + k) - row;
      if (pred == data.label(idx[i])) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

// ---- LSSB ----------------------------------------------------------------------
//
//   "LSSB" | u16 version
//   | meta: u64 spec_hash | u64 seed | f64 lr | f64 momentum | u32 batch_size
//           | u16 dataset-id length | dataset-id bytes
//   | u32 epoch count | u64 param length
//   | (epochs + 1) * param length f32 snapshots
//   | u32 CRC32 of every preceding byte

std::size_t trajectory_header_bytes(const std::string& dataset_id) {
  return 4 + 2 + (8 + 8 + 8 + 8 + 4 + 2 + dataset_id.size()) + 4 + 8;
}

std::vector<std::uint8_t> encode_trajectory(const Trajectory& traj) {
  if (traj.snapshots.empty()) throw InvalidArgument("encode_trajectory: no snapshots");
  const auto len = traj.param_length();
  for (const auto& s : traj.snapshots)
    if (s.numel() != len) throw InvalidArgument("encode_trajectory: snapshots differ in length");
  io::Writer w;
  for (char c : kMagic) w.u8(static_cast<std::uint8_t>(c));
  w.u16(kTrajectoryVersion);
  w.u64(traj.meta.spec_hash);
  w.u64(traj.meta.seed);
  w.f64(traj.meta.lr);
  w.f64(traj.meta.momentum);
  w.u32(traj.meta.batch_size);
  w.str(traj.meta.dataset_id);
  w.u32(static_cast<std::uint32_t>(traj.epochs()));
  w.u64(static_cast<std::uint64_t>(len));
  for (const auto& s : traj.snapshots)
    for (double v : s.data()) w.f32(static_cast<float>(v));
  w.seal();
  return w.buffer();
}

Trajectory decode_trajectory(std::span<const std::uint8_t> bytes) {
  io::check_magic(bytes, kMagic, "LSSB");
  io::Reader r(bytes);
  r.take(4);
  const auto version = r.u16();
  if (version != kTrajectoryVersion)
    throw LoadError(LoadFailure::VersionMismatch, "LSSB: unsupported version " + std::to_string(version));
  Trajectory traj;
  traj.meta.spec_hash = r.u64();
  traj.meta.seed = r.u64();
  traj.meta.lr = r.f64();
  traj.meta.momentum = r.f64();
  traj.meta.batch_size = r.u32();
  traj.meta.dataset_id = r.str();
  const auto epochs = r.u32();
  const auto len = r.u64();
  traj.meta.epochs = epochs;
  const auto expected = r.offset() + (static_cast<std::size_t>(epochs) + 1) * static_cast<std::size_t>(len) * 4 + 4;
  if (bytes.size() < expected)
    throw LoadError(LoadFailure::Truncated, "LSSB: file holds " + std::to_string(bytes.size()) +
                                                " bytes, header implies " + std::to_string(expected));
  if (bytes.size() > expected) throw FormatError("LSSB: trailing bytes after payload", expected);
  io::check_crc(bytes, "LSSB");
  for (std::uint32_t e = 0; e <= epochs; ++e) {
    Tensor s(Shape{static_cast<std::int64_t>(len)});
    for (auto& v : s.data()) v = static_cast<double>(r.f32());
    traj.snapshots.push_back(std::move(s));
  }
  return traj;
}

void save_trajectory(const Trajectory& traj, const std::filesystem::path& path) {
  io::write_file(path, encode_trajectory(traj));
}

Trajectory load_trajectory(const std::filesystem::path& path) { return decode_trajectory(io::read_file(path)); }

// ---- buffer --------------------------------------------------------------------

ExpertBuffer::ExpertBuffer(std::vector<Trajectory> trajectories) {
  for (auto& t : trajectories) add(std::move(t));
}

void ExpertBuffer::add(Trajectory traj) {
  if (traj.snapshots.empty()) throw InvalidArgument("ExpertBuffer: trajectory without snapshots");
  if (!trajectories_.empty() && traj.param_length() != trajectories_.front().param_length())
    throw InvalidArgument("ExpertBuffer: trajectories differ in parameter length");
  trajectories_.push_back(std::move(traj));
}

std::int64_t ExpertBuffer::max_epochs() const {
  std::int64_t best = 0;
  for (const auto& t : trajectories_) best = std::max(best, t.epochs());
  return best;
}

ExpertBuffer::Sample ExpertBuffer::sample(std::int64_t start_epoch, std::int64_t span, std::mt19937_64& rng) const {
  if (start_epoch < 0 || span < 0) throw ConfigError("sample_expert: start epoch and span must be non-negative");
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < trajectories_.size(); ++i)
    if (trajectories_[i].epochs() >= start_epoch + span) eligible.push_back(i);
  if (eligible.empty())
    throw ConfigError("sample_expert: no trajectory covers epochs " + std::to_string(start_epoch) + ".." +
                      std::to_string(start_epoch + span));
  std::uniform_int_distribution<std::size_t> ud(0, eligible.size() - 1);
  const auto pick = eligible[ud(rng)];
  const auto& t = trajectories_[pick];
  return {pick, t.snapshots[static_cast<std::size_t>(start_epoch)],
          t.snapshots[static_cast<std::size_t>(start_epoch + span)]};
}

void save_manifest(const BufferManifest& manifest, const std::filesystem::path& path) {
  nlohmann::json j;
  j["format_version"] = manifest.format_version;
  j["entries"] = nlohmann::json::array();
  for (const auto& e : manifest.entries)
    j["entries"].push_back({{"path", e.path},
                            {"spec_hash", hex64(e.meta.spec_hash)},
                            {"dataset", e.meta.dataset_id},
                            {"lr", e.meta.lr},
                            {"momentum", e.meta.momentum},
                            {"batch_size", e.meta.batch_size},
                            {"seed", e.meta.seed},
                            {"epochs", e.meta.epochs}});
  const auto text = j.dump(2) + "\n";
  io::write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

BufferManifest load_manifest(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DependencyError("expert buffer manifest not found: " + path.string());
  std::ifstream in(path);
  nlohmann::json j;
  try {
    in >> j;
    BufferManifest m;
    m.format_version = j.at("format_version").get<int>();
    if (m.format_version != 1) throw DataError("buffer manifest: unsupported format_version");
    for (const auto& e : j.at("entries")) {
      ManifestEntry me;
      me.path = e.at("path").get<std::string>();
      me.meta.spec_hash = std::stoull(e.at("spec_hash").get<std::string>(), nullptr, 16);
      me.meta.dataset_id = e.at("dataset").get<std::string>();
      me.meta.lr = e.at("lr").get<double>();
      me.meta.momentum = e.at("momentum").get<double>();
      me.meta.batch_size = e.at("batch_size").get<std::uint32_t>();
      me.meta.seed = e.at("seed").get<std::uint64_t>();
      me.meta.epochs = e.at("epochs").get<std::uint32_t>();
      m.entries.push_back(std::move(me));
    }
    return m;
  } catch (const nlohmann::json::exception& ex) {
    throw DataError("buffer manifest " + path.string() + ": " + ex.what());
  }
}

ExpertBuffer load_buffer(const std::filesystem::path& manifest_path) {
  const auto manifest = load_manifest(manifest_path);
  ExpertBuffer buffer;
  for (const auto& e : manifest.entries) {
    const auto file = manifest_path.parent_path() / e.path;
    if (!std::filesystem::exists(file)) throw DependencyError("expert trajectory listed in manifest is missing: " + file.string());
    auto traj = load_trajectory(file);
    if (!(traj.meta == e.meta)) throw DataError("trajectory metadata disagrees with manifest: " + file.string());
    buffer.add(std::move(traj));
  }
  if (buffer.empty()) throw DataError("expert buffer manifest lists no trajectories: " + manifest_path.string());
  return buffer;
}

BufferManifest build_buffer(const LabeledImages& data, const nn::ConvNetSpec& spec, const ExpertConfig& cfg,
                            std::int64_t count, std::uint64_t base_seed, const std::string& dataset_id,
                            const std::filesystem::path& dir, int workers) {
  if (count < 1) throw ConfigError("build_buffer: expert count must be at least 1");
  std::filesystem::create_directories(dir);
  BufferManifest manifest;
  manifest.entries.resize(static_cast<std::size_t>(count));
  std::atomic<std::int64_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&]() {
    for (std::int64_t i = next++; i < count; i = next++) {
      try {
        const auto seed = base_seed + static_cast<std::uint64_t>(i);
        auto traj = train_expert(data, spec, cfg, seed, dataset_id);
        const auto name = "expert_" + std::to_string(i) + ".lssb";
        save_trajectory(traj, dir / name);
        manifest.entries[static_cast<std::size_t>(i)] = {name, traj.meta};
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    for (int w = 1; w < std::max(1, workers); ++w) pool.emplace_back(work);
    work();
  }
  if (failure) std::rethrow_exception(failure);
  save_manifest(manifest, dir / "buffer.json");
  return manifest;
}

}  // namespace lss::expert
