#pragma once

// 8x8 single-channel two-class problem with a width-8 network, r=2 factors
// and a short expert, small enough for finite-difference meta-gradients.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "lss/dataset_store.hpp"
#include "lss/desk_data.hpp"
#include "lss/expert_buffer.hpp"
#include "lss/matcher.hpp"

namespace lss::testing {

struct ToyProblem {
  LabeledImages real;
  nn::ConvNetSpec spec;
  lowrank::StoragePlan plan;
  expert::Trajectory expert;
  match::MatchConfig cfg;
  match::DistillState state;
};

inline ToyProblem make_toy(std::uint64_t seed = 1) {
  ToyProblem t;
  desk::DeskSpec ds;
  ds.train_per_class = 30;
  ds.test_per_class = 5;
  ds.side = 8;
  ds.distractors = 1;
  ds.noise = 0.1;
  ds.seed = seed;
  auto split = desk::generate(ds);
  std::vector<double> mean, sd;
  store::channel_stats(split.train, mean, sd);
  store::normalize(split.train, mean, sd);
  t.real = std::move(split.train);
  t.spec = nn::ConvNetSpec::tiny(1, 8, 8, 2);
  t.plan = lowrank::plan_budget(1, 8, 8, 2, 2, 2, 2, 3);

  expert::ExpertConfig ec;
  ec.epochs = 3;
  ec.lr = 0.05;
  ec.batch_size = 8;
  t.expert = expert::train_expert(t.real, t.spec, ec, seed + 10, "toy");

  t.cfg.student_steps = 2;
  t.cfg.expert_epochs = 1;
  t.cfg.batch_size = 3;
  t.cfg.iterations = 10;
  t.cfg.alpha_init = 0.1;
  t.cfg.schedule.max_start = 2;
  t.cfg.schedule.delta = 0;
  t.cfg.schedule.window = 1.0;
  t.cfg.augmentation = aug::default_policy(1);

  match::DistillOptions opts;
  opts.seed = seed;
  t.state = match::initial_state(t.real, t.plan, t.cfg, opts);
  // Move labels away from saturation so their gradients are not vanishingly small.
  for (auto& v : t.state.labels.logits.data()) v *= 0.2;
  return t;
}

enum class Family { U, Vt, Sigma, Logits, LogAlpha };

inline const char* family_name(Family f) {
  switch (f) {
    case Family::U: return "U";
    case Family::Vt: return "Vt";
    case Family::Sigma: return "sigma";
    case Family::Logits: return "label logits";
    case Family::LogAlpha: return "log alpha";
  }
  return "?";
}

struct GradCheck {
  int samples = 0;
  int passed = 0;
  double worst = 0.0;
};

/// Compares autodiff meta-gradients against central differences of the
/// matching objective at `samples` random (coordinate, draw seed) pairs.
inline GradCheck check_meta_gradient(const ToyProblem& t, Family family, int samples, double tol, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto& start = t.expert.snapshots[1];
  const auto& target = t.expert.snapshots[2];
  GradCheck out;
  for (int s = 0; s < samples; ++s) {
    const std::uint64_t draw = rng();
    const auto g = match::meta_gradient(t.state, t.spec, start, target, t.cfg, draw);
    auto f = lowrank::stack(t.state.dataset);
    const Tensor* analytic = nullptr;
    Tensor* param = nullptr;
    switch (family) {
      case Family::U: analytic = &g.u; param = &f.u; break;
      case Family::Vt: analytic = &g.vt; param = &f.vt; break;
      case Family::Sigma: analytic = &g.sigma; param = &f.sigma; break;
      case Family::Logits: analytic = &g.logits; break;
      case Family::LogAlpha: break;
    }
    const std::int64_t n = family == Family::LogAlpha ? 1
                           : family == Family::Logits ? t.state.labels.logits.numel()
                                                      : param->numel();
    const auto i = std::uniform_int_distribution<std::int64_t>(0, n - 1)(rng);

    auto eval_at = [&](double delta) {
      auto st = t.state;
      if (family == Family::LogAlpha) {
        st.log_alpha += delta;
      } else if (family == Family::Logits) {
        st.labels.logits[i] += delta;
      } else {
        auto ff = f;
        Tensor* pp = family == Family::U ? &ff.u : family == Family::Vt ? &ff.vt : &ff.sigma;
        (*pp)[i] += delta;
        lowrank::unstack(ff, st.dataset);
      }
      return match::matching_objective(st, t.spec, start, target, t.cfg, draw);
    };
    const double x0 = family == Family::LogAlpha ? t.state.log_alpha
                      : family == Family::Logits ? t.state.labels.logits[i]
                                                 : (*param)[i];
    const double h = 1e-5 * std::max(1.0, std::abs(x0));
    const double fd = (eval_at(h) - eval_at(-h)) / (2.0 * h);
    const double ad = family == Family::LogAlpha ? g.log_alpha : (*analytic)[i];
    const double err = std::abs(ad - fd) / std::max({std::abs(ad), std::abs(fd), 1e-10});
    out.worst = std::max(out.worst, err);
    ++out.samples;
    if (err <= tol) ++out.passed;
  }
  return out;
}

}  // namespace lss::testing
