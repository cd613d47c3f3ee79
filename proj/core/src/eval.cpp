#include "lss/eval.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <cmath>
#include <json.hpp>
#include <mutex>
#include <numbers>
#include <numeric>
#include <sstream>
#include <thread>

#include "lss/error.hpp"
#include "lss/soft_labels.hpp"

namespace lss::eval {

namespace {

std::string network_string(const nn::ConvNetSpec& spec) {
  return "convnet d" + std::to_string(spec.depth) + " w" + std::to_string(spec.net_width) + " " +
         nn::to_string(spec.norm) + " " + std::to_string(spec.channels) + "x" + std::to_string(spec.height) + "x" +
         std::to_string(spec.width) + " k" + std::to_string(spec.num_classes);
}

Tensor gather(const Tensor& t, const std::vector<std::int64_t>& idx) {
  ad::NoGradGuard guard;
  const auto rows = t.dim(0);
  Shape flat{rows, t.numel() / rows};
  Shape out = t.shape();
  out[0] = static_cast<std::int64_t>(idx.size());
  return ad::reshape(ad::gather_rows(ad::Var(t.reshaped(flat)), idx), out).value();
}

}  // namespace

void EvalConfig::validate() const {
  if (epochs < 0) throw ConfigError("eval.epochs must be non-negative");
  if (batch_size < 1) throw ConfigError("eval.batch_size must be at least 1");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("eval.momentum must lie in [0, 1)");
  if (seeds.empty()) throw ConfigError("eval.seeds must list at least one seed");
  if (workers < 1) throw ConfigError("eval.workers must be at least 1");
}

double train_and_test(const nn::ConvNetSpec& spec, const TrainSet& train, const LabeledImages& test,
                      const EvalConfig& cfg, double lr, std::uint64_t seed) {
  if (test.empty()) throw DataError("evaluate: test set is empty");
  const auto n = train.images.dim(0);
  if (n < 1) throw DataError("evaluate: training set is empty");
  if (train.targets.dim(0) != n || train.targets.dim(1) != spec.num_classes)
    throw InvalidArgument("evaluate: targets do not match images or class count");

  Tensor params = nn::init_params(spec, seed).flat;
  Tensor velocity(params.shape());
  std::mt19937_64 rng(seed ^ 0xA0761D6478BD642Full);
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  const auto bs = std::min<std::int64_t>(cfg.batch_size, n);

  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double rate =
        cfg.cosine ? lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) / cfg.epochs)) : lr;
    std::shuffle(order.begin(), order.end(), rng);
    for (std::int64_t pos = 0; pos < n; pos += bs) {
      std::vector<std::int64_t> idx(order.begin() + pos, order.begin() + std::min(n, pos + bs));
      Tensor images = gather(train.images, idx);
      if (!cfg.augmentation.ops.empty()) {
        ad::NoGradGuard guard;
        images = aug::augment(ad::Var(std::move(images)), cfg.augmentation, rng()).value();
      }
      ad::Var theta(params, true);
      ad::Var loss = labels::soft_cross_entropy(nn::forward(spec, theta, ad::Var(std::move(images))),
                                                ad::Var(gather(train.targets, idx)));
      if (!std::isfinite(loss.item())) throw NumericError("evaluation training diverged at epoch " + std::to_string(epoch));
      const Tensor g = ad::grad(loss, {theta})[0].value();
      for (std::int64_t i = 0; i < params.numel(); ++i) {
        velocity[i] = cfg.momentum * velocity[i] + g[i];
        params[i] -= rate * velocity[i];
      }
    }
  }
  return expert::dataset_accuracy(spec, params, test);
}

EvalReport evaluate_set(const TrainSet& train, const LabeledImages& test, const nn::ConvNetSpec& spec,
                        const EvalConfig& cfg, double lr, const std::string& name) {
  cfg.validate();
  if (test.empty()) throw DataError("evaluate: test set is empty");
  const auto t0 = std::chrono::steady_clock::now();
  EvalReport rep;
  rep.name = name;
  rep.accuracies.assign(cfg.seeds.size(), 0.0);
  rep.train_images = train.images.dim(0);
  rep.lr = lr;
  rep.epochs = cfg.epochs;
  rep.augmentation = aug::format_ops(cfg.augmentation.ops);
  rep.network = network_string(spec);

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&]() {
    for (std::size_t i = next++; i < cfg.seeds.size(); i = next++) {
      try {
        rep.accuracies[i] = train_and_test(spec, train, test, cfg, lr, cfg.seeds[i]);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    for (int w = 1; w < cfg.workers; ++w) pool.emplace_back(work);
    work();
  }
  if (failure) std::rethrow_exception(failure);

  const double count = static_cast<double>(rep.accuracies.size());
  rep.mean = std::accumulate(rep.accuracies.begin(), rep.accuracies.end(), 0.0) / count;
  double var = 0.0;
  for (double a : rep.accuracies) var += (a - rep.mean) * (a - rep.mean);
  rep.std = std::sqrt(var / count);
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

EvalReport evaluate(const match::DistillState& state, const LabeledImages& test, const nn::ConvNetSpec& spec,
                    const EvalConfig& cfg, const std::string& name) {
  const auto& m = state.dataset.meta;
  if (m.channels != spec.channels || m.height != spec.height || m.width != spec.width)
    throw ConfigError("evaluate: synthetic image shape does not match the network input");
  if (m.num_classes != spec.num_classes) throw ConfigError("evaluate: class count does not match the network");
  const double lr = cfg.lr > 0.0 ? cfg.lr : state.alpha();
  return evaluate_set({state.images(), state.targets()}, test, spec, cfg, lr, name);
}

TrainSet random_subset(const LabeledImages& real, std::int64_t ipc, std::uint64_t seed) {
  if (ipc < 1) throw ConfigError("random subset: ipc must be at least 1");
  ImagePool pool(real, seed);
  const auto k = real.num_classes();
  const auto n = ipc * k;
  const auto& s = real.shape();
  TrainSet set{Tensor(Shape{n, s.channels, s.height, s.width}), Tensor(Shape{n, k})};
  const auto per = s.numel();
  std::int64_t row = 0;
  for (int c = 0; c < k; ++c)
    for (std::int64_t j = 0; j < ipc; ++j, ++row) {
      const Tensor img = pool.draw(c);
      std::copy_n(img.ptr(), per, set.images.ptr() + row * per);
      set.targets[row * k + c] = 1.0;
    }
  return set;
}

EvalReport baseline_random_subset(const LabeledImages& real, std::int64_t ipc, const LabeledImages& test,
                                  const nn::ConvNetSpec& spec, const EvalConfig& cfg, std::uint64_t seed) {
  const double lr = cfg.lr > 0.0 ? cfg.lr : 0.01;
  return evaluate_set(random_subset(real, ipc, seed), test, spec, cfg, lr, "random_subset");
}

std::vector<AblationFlags> ablation_order() {
  std::vector<AblationFlags> rows;
  for (bool lowrank : {false, true})
    for (bool soft : {false, true})
      for (bool prog : {false, true}) rows.push_back({soft, prog, lowrank});
  return rows;
}

std::vector<AblationRow> ablation_grid(const AblationInputs& in, const std::function<void(const AblationRow&)>& on_row) {
  if (!in.real || !in.test || !in.buffer) throw InvalidArgument("ablation_grid: missing real data, test data or buffer");
  const auto& s = in.spec;
  std::vector<AblationRow> rows;
  for (const auto& flags : ablation_order()) {
    AblationRow row;
    row.flags = flags;
    row.plan = flags.lowrank ? lowrank::plan_budget(s.channels, s.height, s.width, s.num_classes, in.ipc, in.rank,
                                                    in.mappers, in.blocks_per_mapper)
                             : lowrank::plan_pixels(s.channels, s.height, s.width, s.num_classes, in.ipc);
    match::MatchConfig mc = in.match;
    mc.soft_labels = flags.soft_labels;
    mc.schedule.progressive = flags.progressive;
    const auto state = match::distill(*in.real, *in.buffer, row.plan, s, mc, in.distill);
    row.final_loss = state.history.empty() ? 0.0 : state.history.back().loss;
    row.history = state.history;
    std::ostringstream name;
    name << "soft=" << flags.soft_labels << " prog=" << flags.progressive << " lowrank=" << flags.lowrank;
    row.report = evaluate(state, *in.test, s, in.eval, name.str());
    if (on_row) on_row(row);
    rows.push_back(std::move(row));
  }
  return rows;
}

namespace {

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json seeds = nlohmann::json::array();
  for (double a : r.accuracies) seeds.push_back(a);
  return {{"name", r.name},         {"accuracies", seeds},  {"mean", r.mean},
          {"std", r.std},           {"train_images", r.train_images}, {"lr", r.lr},
          {"epochs", r.epochs},     {"augmentation", r.augmentation}, {"network", r.network},
          {"wall_seconds", r.wall_seconds}};
}

}  // namespace

std::string report_json(const EvalReport& report) { return to_json(report).dump(2) + "\n"; }

std::string ablation_json(const std::vector<AblationRow>& rows) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : rows)
    j.push_back({{"soft_labels", r.flags.soft_labels},
                 {"progressive", r.flags.progressive},
                 {"lowrank", r.flags.lowrank},
                 {"images", r.plan.images},
                 {"param_count", r.plan.param_count},
                 {"final_loss", r.final_loss},
                 {"report", to_json(r.report)}});
  return j.dump(2) + "\n";
}

std::string render_ablation(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof line, "%-5s %-5s %-8s %7s %9s %8s %7s\n", "soft", "prog", "lowrank", "images", "params",
                "mean%", "std%");
  out << line;
  auto mark = [](bool b) { return b ? "x" : "."; };
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-5s %-5s %-8s %7lld %9lld %8.2f %7.2f\n", mark(r.flags.soft_labels),
                  mark(r.flags.progressive), mark(r.flags.lowrank), static_cast<long long>(r.plan.images),
                  static_cast<long long>(r.plan.param_count), 100.0 * r.report.mean, 100.0 * r.report.std);
    out << line;
  }
  return out.str();
}

}  // namespace lss::eval
