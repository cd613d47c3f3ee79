#include "lss/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include "lss/binary_io.hpp"
#include "lss/error.hpp"

namespace lss::config {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

aug::AugPolicy policy_for(const std::string& value, std::int64_t channels, bool siamese) {
  aug::AugPolicy p = value == "default" ? aug::default_policy(channels) : aug::parse_policy(value == "none" ? "" : value);
  p.siamese = siamese;
  return p;
}

}  // namespace

const std::vector<KeyInfo>& known_keys() {
  static const std::vector<KeyInfo> keys = {
      {"data.name", "desk", "dataset id recorded in artifacts"},
      {"data.format", "desk", "cifar10, cifar100, svhn, idx or desk"},
      {"data.source", "", "directory holding the raw source files (ingest)"},
      {"data.store", "store", "normalized dataset store directory, relative to run.dir unless absolute"},
      {"data.desk_train_per_class", "250", "desk generator: training images per class"},
      {"data.desk_test_per_class", "250", "desk generator: test images per class"},
      {"data.desk_seed", "7", "desk generator seed"},
      {"data.desk_noise", "0.25", "desk generator pixel noise std"},

      {"run.dir", "run", "output directory for every artifact"},
      {"run.seed", "0", "master seed for distillation"},

      {"plan.ipc", "1", "pixel-equivalent images per class"},
      {"plan.rank", "4", "low-rank dimension r"},
      {"plan.mappers", "auto", "mapper sets k, or auto"},
      {"plan.blocks", "auto", "basis blocks per mapper m, or auto"},
      {"plan.lowrank", "true", "false selects the pixel parameterization"},
      {"plan.init", "svd_real", "svd_real or random"},
      {"plan.label_init", "round_robin_smoothed", "round_robin_smoothed or random"},

      {"model.depth", "3", "conv blocks"},
      {"model.width", "128", "channels per conv block"},
      {"model.norm", "instancenorm", "instancenorm or none"},

      {"buffer.experts", "20", "expert trajectories to train"},
      {"buffer.epochs", "50", "epochs per expert"},
      {"buffer.lr", "0.01", "expert SGD learning rate"},
      {"buffer.momentum", "0.9", "expert SGD momentum"},
      {"buffer.batch_size", "256", "expert mini-batch size"},
      {"buffer.seed", "1000", "seed of expert 0; expert i uses seed + i"},
      {"buffer.augment", "default", "augmentation ops, default or none"},
      {"buffer.workers", "1", "threads training experts"},
      {"buffer.dir", "buffer", "buffer directory, relative to run.dir unless absolute"},

      {"match.student_steps", "20", "student SGD steps N per meta-iteration"},
      {"match.expert_epochs", "2", "expert epochs M matched"},
      {"match.batch_size", "0", "synthetic batch size, 0 = min(images, 64)"},
      {"match.iterations", "1000", "meta-iterations"},
      {"match.lr_mappers", "0.001", "meta learning rate of U and Vt"},
      {"match.lr_basis", "0.01", "meta learning rate of sigma"},
      {"match.lr_labels", "0.01", "meta learning rate of label logits"},
      {"match.lr_alpha", "0.00001", "meta learning rate of log alpha"},
      {"match.momentum", "0", "meta-optimizer momentum"},
      {"match.alpha_init", "0.01", "initial student learning rate"},
      {"match.learn_alpha", "true", "learn the student learning rate"},
      {"match.soft_labels", "true", "learn soft labels"},
      {"match.clip_norm", "10000", "meta-gradient global norm clip"},
      {"match.augment", "default", "differentiable augmentation ops, default or none"},
      {"match.siamese", "false", "share augmentation parameters across a batch"},
      {"match.checkpoint_every", "0", "checkpoint period in iterations, 0 = off"},

      {"schedule.max_start", "20", "largest expert start epoch"},
      {"schedule.delta", "2", "start-epoch ramp offset"},
      {"schedule.w", "3", "start-epoch sampling window"},
      {"schedule.progressive", "true", "ramp the start epoch over iterations"},

      {"eval.epochs", "300", "meta-test training epochs"},
      {"eval.lr", "0.01", "meta-test learning rate, or learned"},
      {"eval.momentum", "0.9", "meta-test SGD momentum"},
      {"eval.batch_size", "256", "meta-test mini-batch size"},
      {"eval.cosine", "true", "cosine learning-rate decay"},
      {"eval.augment", "default", "meta-test augmentation ops, default or none"},
      {"eval.seeds", "0,1,2,3,4", "comma-separated network seeds"},
      {"eval.workers", "1", "threads evaluating seeds"},
      {"eval.baseline_seed", "0", "seed selecting the random real subset"},
  };
  return keys;
}

RunConfig::RunConfig() {
  for (const auto& k : known_keys()) values_[k.key] = k.default_value;
}

RunConfig RunConfig::parse(const std::string& text, const std::string& origin) {
  RunConfig cfg;
  cfg.merge_text(text, origin);
  return cfg;
}

void RunConfig::merge_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  std::map<std::string, int> seen;
  for (int lineno = 1; std::getline(in, line); ++lineno) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    const auto key = trim(line.substr(0, eq));
    if (auto [it, fresh] = seen.emplace(key, lineno); !fresh)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": key '" + key + "' already set on line " +
                        std::to_string(it->second));
    try {
      set(key, trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  RunConfig cfg;
  cfg.merge_file(path);
  return cfg;
}

void RunConfig::merge_file(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  const auto bytes = io::read_file(path);
  merge_text(std::string(bytes.begin(), bytes.end()), path.string());
}

void RunConfig::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second = value;
}

void RunConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

std::int64_t RunConfig::get_int(const std::string& key) const {
  const auto& v = get(key);
  std::int64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty())
    throw ConfigError("config key '" + key + "' expects an integer, got '" + v + "'");
  return out;
}

double RunConfig::get_double(const std::string& key) const {
  const auto& v = get(key);
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty())
    throw ConfigError("config key '" + key + "' expects a number, got '" + v + "'");
  return out;
}

bool RunConfig::get_bool(const std::string& key) const {
  const auto& v = get(key);
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError("config key '" + key + "' expects true or false, got '" + v + "'");
}

std::optional<std::int64_t> RunConfig::get_auto_int(const std::string& key) const {
  const auto& v = get(key);
  if (v.empty() || v == "auto") return std::nullopt;
  return get_int(key);
}

std::vector<std::uint64_t> RunConfig::get_seed_list(const std::string& key) const {
  std::vector<std::uint64_t> out;
  std::istringstream in(get(key));
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    std::uint64_t v = 0;
    const auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (item.empty() || ec != std::errc() || ptr != item.data() + item.size())
      throw ConfigError("config key '" + key + "' expects comma-separated non-negative integers");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("config key '" + key + "' lists no seeds");
  return out;
}

std::string RunConfig::dump() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

void RunConfig::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto text = dump();
  io::write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

RunConfig desk_preset() {
  RunConfig cfg;
  const std::pair<const char*, const char*> preset[] = {
      {"data.name", "desk"},
      {"data.format", "desk"},
      {"model.depth", "3"},
      {"model.width", "16"},
      {"buffer.experts", "5"},
      {"buffer.epochs", "10"},
      {"buffer.batch_size", "32"},
      {"plan.ipc", "1"},
      {"plan.rank", "4"},
      {"match.student_steps", "10"},
      {"match.expert_epochs", "2"},
      {"match.iterations", "300"},
      {"match.batch_size", "16"},
      {"match.alpha_init", "0.1"},
      {"match.lr_alpha", "0.01"},
      {"match.lr_basis", "100"},
      {"match.lr_mappers", "1"},
      {"match.lr_labels", "10"},
      {"schedule.max_start", "6"},
      {"eval.epochs", "100"},
  };
  for (const auto& [k, v] : preset) cfg.set(k, v);
  return cfg;
}

nn::ConvNetSpec model_spec(const RunConfig& cfg, const ImageShape& shape, int num_classes) {
  nn::ConvNetSpec s;
  s.channels = shape.channels;
  s.height = shape.height;
  s.width = shape.width;
  s.num_classes = num_classes;
  s.depth = cfg.get_int("model.depth");
  s.net_width = cfg.get_int("model.width");
  s.norm = nn::parse_norm(cfg.get("model.norm"));
  try {
    s.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
  return s;
}

expert::ExpertConfig expert_config(const RunConfig& cfg, std::int64_t channels) {
  expert::ExpertConfig e;
  e.epochs = cfg.get_int("buffer.epochs");
  e.lr = cfg.get_double("buffer.lr");
  e.momentum = cfg.get_double("buffer.momentum");
  e.batch_size = cfg.get_int("buffer.batch_size");
  e.augmentation = policy_for(cfg.get("buffer.augment"), channels, false);
  if (e.epochs < 1) throw ConfigError("buffer.epochs must be at least 1");
  if (!(e.lr > 0.0)) throw ConfigError("buffer.lr must be positive");
  if (e.batch_size < 1) throw ConfigError("buffer.batch_size must be at least 1");
  return e;
}

match::MatchConfig match_config(const RunConfig& cfg, std::int64_t channels) {
  match::MatchConfig m;
  m.student_steps = cfg.get_int("match.student_steps");
  m.expert_epochs = cfg.get_int("match.expert_epochs");
  m.batch_size = cfg.get_int("match.batch_size");
  m.iterations = cfg.get_int("match.iterations");
  m.lr_mappers = cfg.get_double("match.lr_mappers");
  m.lr_basis = cfg.get_double("match.lr_basis");
  m.lr_labels = cfg.get_double("match.lr_labels");
  m.lr_alpha = cfg.get_double("match.lr_alpha");
  m.meta_momentum = cfg.get_double("match.momentum");
  m.alpha_init = cfg.get_double("match.alpha_init");
  m.learn_alpha = cfg.get_bool("match.learn_alpha");
  m.soft_labels = cfg.get_bool("match.soft_labels");
  m.clip_norm = cfg.get_double("match.clip_norm");
  m.augmentation = policy_for(cfg.get("match.augment"), channels, cfg.get_bool("match.siamese"));
  m.schedule.max_start = cfg.get_int("schedule.max_start");
  m.schedule.delta = cfg.get_int("schedule.delta");
  m.schedule.window = cfg.get_double("schedule.w");
  m.schedule.progressive = cfg.get_bool("schedule.progressive");
  m.schedule.total_iterations = std::max<std::int64_t>(1, m.iterations);
  m.validate();
  return m;
}

match::DistillOptions distill_options(const RunConfig& cfg) {
  match::DistillOptions o;
  o.init = lowrank::parse_init_scheme(cfg.get("plan.init"));
  o.label_init = labels::parse_label_init(cfg.get("plan.label_init"));
  o.seed = static_cast<std::uint64_t>(cfg.get_int("run.seed"));
  o.checkpoint_every = cfg.get_int("match.checkpoint_every");
  if (o.checkpoint_every < 0) throw ConfigError("match.checkpoint_every must be non-negative");
  return o;
}

eval::EvalConfig eval_config(const RunConfig& cfg, std::int64_t channels) {
  eval::EvalConfig e;
  e.epochs = cfg.get_int("eval.epochs");
  e.lr = cfg.get("eval.lr") == "learned" ? 0.0 : cfg.get_double("eval.lr");
  if (cfg.get("eval.lr") != "learned" && !(e.lr > 0.0)) throw ConfigError("eval.lr must be positive or 'learned'");
  e.momentum = cfg.get_double("eval.momentum");
  e.batch_size = cfg.get_int("eval.batch_size");
  e.cosine = cfg.get_bool("eval.cosine");
  e.augmentation = policy_for(cfg.get("eval.augment"), channels, false);
  e.seeds = cfg.get_seed_list("eval.seeds");
  e.workers = static_cast<int>(cfg.get_int("eval.workers"));
  e.validate();
  return e;
}

lowrank::StoragePlan storage_plan(const RunConfig& cfg, const ImageShape& shape, int num_classes) {
  const auto ipc = cfg.get_int("plan.ipc");
  if (!cfg.get_bool("plan.lowrank")) return lowrank::plan_pixels(shape.channels, shape.height, shape.width, num_classes, ipc);
  return lowrank::plan_budget(shape.channels, shape.height, shape.width, num_classes, ipc, cfg.get_int("plan.rank"),
                              cfg.get_auto_int("plan.mappers"), cfg.get_auto_int("plan.blocks"));
}

}  // namespace lss::config
