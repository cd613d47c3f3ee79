#include "lss/matcher.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <numeric>

#include "lss/binary_io.hpp"
#include "lss/error.hpp"

namespace lss::match {

namespace {

constexpr double kMinDenominator = 1e-12;

double sq_dist(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) throw InvalidArgument("matching_loss: parameter vectors differ in length");
  double s = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

double denominator(const Tensor& target, const Tensor& start) {
  const double d = sq_dist(start, target);
  if (!(d >= kMinDenominator))
    throw NumericError("matching_loss: expert did not move between start and target (squared distance " +
                       std::to_string(d) + ")");
  return d;
}

double sum_sq(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v * v;
  return s;
}

Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

Tensor grad_or_zero(const ad::Var& leaf, const ad::Var& g) {
  return leaf.requires_grad() ? g.value() : zeros_like(leaf.value());
}

void sgd_update(Tensor& param, Tensor& velocity, const Tensor& grad, double lr, double momentum, double scale) {
  if (velocity.shape() != param.shape()) velocity = zeros_like(param);
  for (std::int64_t i = 0; i < param.numel(); ++i) {
    velocity[i] = momentum * velocity[i] + scale * grad[i];
    param[i] -= lr * velocity[i];
  }
}

std::filesystem::path sidecar(const std::filesystem::path& path) {
  auto p = path;
  p += ".state.json";
  return p;
}

}  // namespace

void MatchConfig::validate() const {
  if (student_steps < 1) throw ConfigError("match.student_steps must be at least 1");
  if (expert_epochs < 1) throw ConfigError("match.expert_epochs must be at least 1");
  if (batch_size < 0) throw ConfigError("match.batch_size must be non-negative");
  if (iterations < 0) throw ConfigError("match.iterations must be non-negative");
  for (double lr : {lr_mappers, lr_basis, lr_labels, lr_alpha})
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("match meta learning rates must be finite and non-negative");
  if (!(alpha_init > 0.0)) throw ConfigError("match.alpha_init must be positive");
  if (!(meta_momentum >= 0.0 && meta_momentum < 1.0)) throw ConfigError("match.meta_momentum must lie in [0, 1)");
  if (!(clip_norm > 0.0)) throw ConfigError("match.clip_norm must be positive");
  schedule.validate();
}

std::int64_t MatchConfig::effective_batch(std::int64_t images) const {
  if (batch_size > 0) return std::min(batch_size, images);
  return std::min<std::int64_t>(images, 64);
}

double DistillState::alpha() const { return std::exp(log_alpha); }

Tensor DistillState::images() const {
  ad::NoGradGuard guard;
  const auto f = lowrank::stack(dataset);
  return lowrank::synthesize_stacked(ad::Var(f.u), ad::Var(f.vt), ad::Var(f.sigma), dataset.meta).value();
}

Tensor DistillState::targets() const {
  if (!soft_labels) return labels::round_robin_one_hot(labels.rows(), labels.classes());
  ad::NoGradGuard guard;
  return ad::softmax_rows(ad::Var(labels.logits)).value();
}

double matching_loss(const Tensor& student, const Tensor& target, const Tensor& start) {
  const double den = denominator(target, start);
  return sq_dist(student, target) / den;
}

ad::Var matching_loss(const ad::Var& student, const Tensor& target, const Tensor& start) {
  const double den = denominator(target, start);
  if (student.numel() != target.numel()) throw InvalidArgument("matching_loss: parameter vectors differ in length");
  return ad::scale(ad::squared_norm(ad::sub(student, ad::Var(target))), 1.0 / den);
}

MetaVars make_meta_vars(const DistillState& state, const MatchConfig& cfg) {
  const auto f = lowrank::stack(state.dataset);
  MetaVars v;
  v.u = ad::Var(f.u, state.lowrank);
  v.vt = ad::Var(f.vt, state.lowrank);
  v.sigma = ad::Var(f.sigma, true);
  v.logits = ad::Var(state.labels.logits, state.soft_labels);
  v.log_alpha = ad::Var(Tensor::scalar(state.log_alpha), cfg.learn_alpha);
  v.images = lowrank::synthesize_stacked(v.u, v.vt, v.sigma, state.dataset.meta);
  v.targets = state.soft_labels ? ad::softmax_rows(v.logits)
                                : ad::Var(labels::round_robin_one_hot(state.labels.rows(), state.labels.classes()));
  v.alpha = ad::exp(v.log_alpha);
  return v;
}

ad::Var unroll(const MetaVars& vars, const nn::ConvNetSpec& spec, const Tensor& theta0, const MatchConfig& cfg,
               std::mt19937_64& rng, bool differentiable) {
  const auto& is = vars.images.shape();
  const auto n = is[0];
  const auto c = is[1], h = is[2], w = is[3];
  const auto b = cfg.effective_batch(n);
  for (auto i : cfg.fixed_batch)
    if (i < 0 || i >= n) throw InvalidArgument("unroll: fixed batch index out of range");
  ad::Var flat_images = ad::reshape(vars.images, {n, c * h * w});

  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t pos = 0;

  ad::Var theta(theta0, true);
  for (std::int64_t step = 0; step < cfg.student_steps; ++step) {
    std::vector<std::int64_t> idx;
    if (!cfg.fixed_batch.empty()) {
      idx = cfg.fixed_batch;
    } else {
      if (pos + static_cast<std::size_t>(b) > order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        pos = 0;
      }
      idx.assign(order.begin() + static_cast<std::ptrdiff_t>(pos), order.begin() + static_cast<std::ptrdiff_t>(pos + b));
      pos += static_cast<std::size_t>(b);
    }
    const auto bs = static_cast<std::int64_t>(idx.size());
    ad::Var batch = ad::reshape(ad::gather_rows(flat_images, idx), {bs, c, h, w});
    if (!cfg.augmentation.ops.empty()) batch = aug::augment(batch, cfg.augmentation, rng());
    ad::Var loss = labels::soft_cross_entropy(nn::forward(spec, theta, batch), ad::gather_rows(vars.targets, idx));
    if (!std::isfinite(loss.item())) throw DivergenceError("inner loss is not finite", step);
    ad::Var g = ad::grad(loss, {theta}, differentiable)[0];
    theta = ad::sub(theta, ad::mul_scalar(g, vars.alpha));
    if (!differentiable) theta = ad::Var(theta.value(), true);
  }
  return theta;
}

Tensor inner_unroll(const DistillState& state, const nn::ConvNetSpec& spec, const Tensor& theta0,
                    const MatchConfig& cfg, std::mt19937_64& rng) {
  if (theta0.numel() != nn::make_layout(spec).total)
    throw InvalidArgument("inner_unroll: theta_0 length does not match the network");
  const auto vars = make_meta_vars(state, cfg);
  return unroll(vars, spec, theta0, cfg, rng, false).value();
}

double MetaGradient::norm() const {
  return std::sqrt(sum_sq(u) + sum_sq(vt) + sum_sq(sigma) + sum_sq(logits) + log_alpha * log_alpha);
}

MetaGradient meta_gradient(const DistillState& state, const nn::ConvNetSpec& spec, const Tensor& theta_start,
                           const Tensor& theta_target, const MatchConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto vars = make_meta_vars(state, cfg);
  const ad::Var student = unroll(vars, spec, theta_start, cfg, rng);
  const ad::Var loss = matching_loss(student, theta_target, theta_start);
  const auto g = ad::grad(loss, {vars.u, vars.vt, vars.sigma, vars.logits, vars.log_alpha});
  MetaGradient out;
  out.loss = loss.item();
  out.u = grad_or_zero(vars.u, g[0]);
  out.vt = grad_or_zero(vars.vt, g[1]);
  out.sigma = grad_or_zero(vars.sigma, g[2]);
  out.logits = grad_or_zero(vars.logits, g[3]);
  out.log_alpha = vars.log_alpha.requires_grad() ? g[4].item() : 0.0;
  return out;
}

double matching_objective(const DistillState& state, const nn::ConvNetSpec& spec, const Tensor& theta_start,
                          const Tensor& theta_target, const MatchConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto vars = make_meta_vars(state, cfg);
  const Tensor student = unroll(vars, spec, theta_start, cfg, rng, false).value();
  return matching_loss(student, theta_target, theta_start);
}

double meta_step(DistillState& state, MetaOptimizer& opt, const expert::ExpertBuffer& buffer,
                 const nn::ConvNetSpec& spec, const MatchConfig& cfg, std::mt19937_64& rng) {
  if (buffer.empty()) throw DependencyError("meta_step: expert buffer is empty");
  sched::ScheduleConfig sc = cfg.schedule;
  sc.total_iterations = std::max<std::int64_t>(1, cfg.iterations);
  const auto it = std::min(state.iteration, sc.total_iterations);
  const auto start = sched::sample_start(it, sc, rng);
  const auto pair = buffer.sample(start, cfg.expert_epochs, rng);
  MetaGradient g = meta_gradient(state, spec, pair.start, pair.target, cfg, rng());

  LossRecord rec;
  rec.iteration = state.iteration;
  rec.start_epoch = start;
  rec.loss = g.loss;
  rec.grad_norm = g.norm();
  if (!std::isfinite(rec.grad_norm)) throw DivergenceError("meta-gradient is not finite", state.iteration);
  double scale = 1.0;
  if (rec.grad_norm > cfg.clip_norm) {
    scale = cfg.clip_norm / rec.grad_norm;
    rec.clipped = true;
    ++state.clip_warnings;
    std::clog << "warning: meta-gradient norm " << rec.grad_norm << " clipped to " << cfg.clip_norm << " at iteration "
              << state.iteration << "\n";
  }

  auto f = lowrank::stack(state.dataset);
  if (state.lowrank) {
    sgd_update(f.u, opt.u, g.u, cfg.lr_mappers, cfg.meta_momentum, scale);
    sgd_update(f.vt, opt.vt, g.vt, cfg.lr_mappers, cfg.meta_momentum, scale);
  }
  sgd_update(f.sigma, opt.sigma, g.sigma, cfg.lr_basis, cfg.meta_momentum, scale);
  lowrank::unstack(f, state.dataset);
  if (state.soft_labels) sgd_update(state.labels.logits, opt.logits, g.logits, cfg.lr_labels, cfg.meta_momentum, scale);
  if (cfg.learn_alpha) {
    opt.log_alpha = cfg.meta_momentum * opt.log_alpha + scale * g.log_alpha;
    state.log_alpha -= cfg.lr_alpha * opt.log_alpha;
  }
  rec.alpha = state.alpha();
  state.history.push_back(rec);
  ++state.iteration;
  return rec.loss;
}

DistillState initial_state(const LabeledImages& real, const lowrank::StoragePlan& plan, const MatchConfig& cfg,
                           const DistillOptions& options) {
  ImagePool pool(real, options.seed);
  DistillState state;
  state.dataset = lowrank::init_dataset(pool, plan, options.init, options.seed);
  state.labels = labels::init_labels(plan, options.label_init, options.seed + 1);
  state.log_alpha = std::log(cfg.alpha_init);
  state.lowrank = plan.lowrank;
  state.soft_labels = cfg.soft_labels;
  return state;
}

DistillState distill(const LabeledImages& real, const expert::ExpertBuffer& buffer, const lowrank::StoragePlan& plan,
                     const nn::ConvNetSpec& spec, const MatchConfig& cfg, const DistillOptions& options) {
  cfg.validate();
  if (real.shape() != spec.input_shape() || plan.channels != spec.channels || plan.height != spec.height ||
      plan.width != spec.width || plan.num_classes != spec.num_classes)
    throw ConfigError("distill: plan, network and real data disagree on image shape or class count");
  if (cfg.iterations > 0 && buffer.max_epochs() < cfg.schedule.max_start + cfg.expert_epochs)
    throw ConfigError("distill: expert trajectories have " + std::to_string(buffer.max_epochs()) +
                      " epochs, need schedule.max_start + match.expert_epochs = " +
                      std::to_string(cfg.schedule.max_start + cfg.expert_epochs));
  if (buffer.size() > 0 && buffer.at(0).param_length() != nn::make_layout(spec).total)
    throw ConfigError("distill: expert parameter length does not match the network");

  DistillState state = initial_state(real, plan, cfg, options);
  MetaOptimizer opt;
  std::mt19937_64 rng(options.seed ^ 0xD1B54A32D192ED03ull);

  std::ofstream log;
  if (!options.loss_log.empty()) {
    if (options.loss_log.has_parent_path()) std::filesystem::create_directories(options.loss_log.parent_path());
    log.open(options.loss_log);
    if (!log) throw DependencyError("cannot open loss log " + options.loss_log.string());
    log << "# iteration start_epoch loss alpha grad_norm clipped\n";
  }
  if (options.checkpoint_every > 0) std::filesystem::create_directories(options.checkpoint_dir);

  for (std::int64_t i = 0; i < cfg.iterations; ++i) {
    meta_step(state, opt, buffer, spec, cfg, rng);
    const auto& rec = state.history.back();
    if (log) {
      log << rec.iteration << ' ' << rec.start_epoch << ' ' << rec.loss << ' ' << rec.alpha << ' ' << rec.grad_norm
          << ' ' << (rec.clipped ? 1 : 0) << '\n';
      log.flush();
    }
    if (options.on_step) options.on_step(state, rec);
    if (options.checkpoint_every > 0 && state.iteration % options.checkpoint_every == 0)
      save_state(state, options.checkpoint_dir / ("ckpt_" + std::to_string(state.iteration) + ".lss"));
  }
  return state;
}

void save_state(const DistillState& state, const std::filesystem::path& path) {
  lowrank::save_container({state.dataset, state.labels.logits}, path);
  nlohmann::json j = {{"iteration", state.iteration},
                      {"log_alpha", state.log_alpha},
                      {"alpha", state.alpha()},
                      {"lowrank", state.lowrank},
                      {"soft_labels", state.soft_labels},
                      {"clip_warnings", state.clip_warnings}};
  const auto text = j.dump(2) + "\n";
  io::write_file(sidecar(path), std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

DistillState load_state(const std::filesystem::path& path, double default_alpha) {
  auto ckpt = lowrank::load_container(path);
  DistillState state;
  state.dataset = std::move(ckpt.dataset);
  state.labels.logits = std::move(ckpt.label_logits);
  state.log_alpha = std::log(default_alpha);
  const auto side = sidecar(path);
  if (std::filesystem::exists(side)) {
    try {
      std::ifstream in(side);
      nlohmann::json j;
      in >> j;
      state.iteration = j.at("iteration").get<std::int64_t>();
      state.log_alpha = j.at("log_alpha").get<double>();
      state.lowrank = j.at("lowrank").get<bool>();
      state.soft_labels = j.at("soft_labels").get<bool>();
      state.clip_warnings = j.value("clip_warnings", std::int64_t{0});
    } catch (const nlohmann::json::exception& ex) {
      throw DataError("state sidecar " + side.string() + ": " + ex.what());
    }
  }
  return state;
}

}  // namespace lss::match
