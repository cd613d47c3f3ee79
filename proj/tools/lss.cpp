// lss: dataset ingestion, expert buffers, distillation, evaluation and export.

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "lss/binary_io.hpp"
#include "lss/config.hpp"
#include "lss/dataset_store.hpp"
#include "lss/desk_data.hpp"
#include "lss/error.hpp"
#include "lss/eval.hpp"
#include "lss/export.hpp"
#include "lss/matcher.hpp"

namespace fs = std::filesystem;
using namespace lss;

namespace {

enum ExitCode { kOk = 0, kConfig = 2, kData = 3, kNumeric = 4, kDependency = 5 };

struct Common {
  std::string config_file;
  std::string preset;
  std::vector<std::string> overrides;
  std::string run_dir;
};

config::RunConfig resolve(const Common& c) {
  config::RunConfig cfg;
  if (!c.preset.empty()) {
    if (c.preset != "desk") throw ConfigError("unknown preset '" + c.preset + "' (available: desk)");
    cfg = config::desk_preset();
  }
  if (!c.config_file.empty()) cfg.merge_file(c.config_file);
  for (const auto& o : c.overrides) cfg.apply_override(o);
  if (!c.run_dir.empty()) cfg.set("run.dir", c.run_dir);
  return cfg;
}

fs::path run_path(const config::RunConfig& cfg, const std::string& key) {
  const fs::path p = cfg.get(key);
  return p.is_absolute() ? p : fs::path(cfg.get("run.dir")) / p;
}

void echo(const config::RunConfig& cfg, const std::string& command) {
  const fs::path dir = cfg.get("run.dir");
  fs::create_directories(dir);
  cfg.save(dir / (command + ".config"));
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  io::write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

struct Data {
  store::StoreMeta meta;
  LabeledImages train;
  LabeledImages test;
};

Data load_data(const config::RunConfig& cfg, bool need_test) {
  const auto dir = run_path(cfg, "data.store");
  Data d;
  d.meta = store::load_store_meta(dir);
  d.train = store::load_split(dir, "train");
  if (need_test) d.test = store::load_split(dir, "test");
  return d;
}

std::optional<store::StoreMeta> try_store_meta(const config::RunConfig& cfg) {
  const auto dir = run_path(cfg, "data.store");
  if (!fs::exists(dir / "meta.json")) return std::nullopt;
  return store::load_store_meta(dir);
}

void print_plan(const lowrank::StoragePlan& p) {
  std::printf("r=%lld k=%lld m=%lld images=%lld params=%lld budget=%lld utilization=%.4f mode=%s\n",
              static_cast<long long>(p.rank), static_cast<long long>(p.mappers),
              static_cast<long long>(p.blocks_per_mapper), static_cast<long long>(p.images),
              static_cast<long long>(p.param_count), static_cast<long long>(p.budget), p.utilization,
              p.lowrank ? "lowrank" : "pixels");
}

// ---- subcommands -------------------------------------------------------------

int cmd_ingest(const config::RunConfig& cfg) {
  echo(cfg, "ingest");
  const auto format_name = cfg.get("data.format");
  const auto out = run_path(cfg, "data.store");
  store::StoreMeta meta;
  if (format_name == "desk") {
    desk::DeskSpec spec;
    spec.train_per_class = cfg.get_int("data.desk_train_per_class");
    spec.test_per_class = cfg.get_int("data.desk_test_per_class");
    spec.seed = static_cast<std::uint64_t>(cfg.get_int("data.desk_seed"));
    spec.noise = cfg.get_double("data.desk_noise");
    fs::path source = cfg.get("data.source");
    if (source.empty()) source = fs::path(cfg.get("run.dir")) / "desk_source";
    desk::write_idx(spec, source);
    meta = store::ingest(cfg.get("data.name"), store::SourceFormat::Idx, source, out);
  } else {
    const auto format = store::parse_source_format(format_name);
    if (cfg.get("data.source").empty()) throw ConfigError("ingest: data.source is required for " + format_name);
    meta = store::ingest(cfg.get("data.name"), format, cfg.get("data.source"), out);
  }
  std::printf("ingested %s: %llu train, %llu test, %d classes, %lldx%lldx%lld -> %s\n", meta.name.c_str(),
              static_cast<unsigned long long>(meta.train_count), static_cast<unsigned long long>(meta.test_count),
              meta.num_classes, static_cast<long long>(meta.shape.channels), static_cast<long long>(meta.shape.height),
              static_cast<long long>(meta.shape.width), out.string().c_str());
  return kOk;
}

struct BudgetArgs {
  std::string dataset;
  std::optional<std::int64_t> ipc, rank, k, m;
};

int cmd_budget(config::RunConfig cfg, const BudgetArgs& a) {
  if (a.ipc) cfg.set("plan.ipc", std::to_string(*a.ipc));
  if (a.rank) cfg.set("plan.rank", std::to_string(*a.rank));
  if (a.k) cfg.set("plan.mappers", std::to_string(*a.k));
  if (a.m) cfg.set("plan.blocks", std::to_string(*a.m));
  echo(cfg, "budget");
  ImageShape shape;
  int classes = 0;
  const auto name = a.dataset.empty() ? cfg.get("data.format") : a.dataset;
  if (name == "cifar10" || name == "svhn") {
    shape = {3, 32, 32};
    classes = 10;
  } else if (name == "cifar100") {
    shape = {3, 32, 32};
    classes = 100;
  } else if (name == "desk") {
    shape = {1, 28, 28};
    classes = 2;
  } else if (auto meta = try_store_meta(cfg)) {
    shape = meta->shape;
    classes = meta->num_classes;
  } else {
    throw ConfigError("budget: unknown dataset '" + name + "' and no dataset store to read its shape from");
  }
  print_plan(config::storage_plan(cfg, shape, classes));
  return kOk;
}

int cmd_buffer(const config::RunConfig& cfg) {
  echo(cfg, "buffer");
  const auto data = load_data(cfg, false);
  const auto spec = config::model_spec(cfg, data.meta.shape, data.meta.num_classes);
  const auto ec = config::expert_config(cfg, data.meta.shape.channels);
  const auto dir = run_path(cfg, "buffer.dir");
  const auto t0 = std::chrono::steady_clock::now();
  const auto manifest =
      expert::build_buffer(data.train, spec, ec, cfg.get_int("buffer.experts"),
                           static_cast<std::uint64_t>(cfg.get_int("buffer.seed")), cfg.get("data.name"), dir,
                           static_cast<int>(cfg.get_int("buffer.workers")));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("trained %zu experts x %lld epochs in %.1fs -> %s\n", manifest.entries.size(),
              static_cast<long long>(ec.epochs), secs, (dir / "buffer.json").string().c_str());
  return kOk;
}

int cmd_distill(const config::RunConfig& cfg) {
  echo(cfg, "distill");
  const auto data = load_data(cfg, false);
  const auto spec = config::model_spec(cfg, data.meta.shape, data.meta.num_classes);
  const auto plan = config::storage_plan(cfg, data.meta.shape, data.meta.num_classes);
  const auto mc = config::match_config(cfg, data.meta.shape.channels);
  auto opts = config::distill_options(cfg);
  const auto buffer = expert::load_buffer(run_path(cfg, "buffer.dir") / "buffer.json");
  const fs::path out = fs::path(cfg.get("run.dir")) / "distill";
  opts.checkpoint_dir = out / "checkpoints";
  opts.loss_log = out / "loss.log";
  const auto every = std::max<std::int64_t>(1, mc.iterations / 20);
  opts.on_step = [&](const match::DistillState& s, const match::LossRecord& r) {
    if (s.iteration % every == 0 || s.iteration == mc.iterations)
      std::printf("iter %5lld/%lld start=%lld loss=%.5f alpha=%.5f grad=%.3g\n", static_cast<long long>(s.iteration),
                  static_cast<long long>(mc.iterations), static_cast<long long>(r.start_epoch), r.loss, r.alpha,
                  r.grad_norm);
    std::fflush(stdout);
  };
  print_plan(plan);
  const auto state = match::distill(data.train, buffer, plan, spec, mc, opts);
  match::save_state(state, out / "final.lss");
  if (state.clip_warnings > 0) std::printf("warning: %lld meta-gradients were clipped\n", static_cast<long long>(state.clip_warnings));
  std::printf("wrote %s\n", (out / "final.lss").string().c_str());
  return kOk;
}

int cmd_eval(const config::RunConfig& cfg, std::string checkpoint, const std::string& baseline) {
  echo(cfg, "eval");
  const auto data = load_data(cfg, true);
  const auto spec = config::model_spec(cfg, data.meta.shape, data.meta.num_classes);
  const auto ec = config::eval_config(cfg, data.meta.shape.channels);
  const fs::path out = fs::path(cfg.get("run.dir")) / "eval";
  eval::EvalReport rep;
  if (baseline == "random") {
    rep = eval::baseline_random_subset(data.train, cfg.get_int("plan.ipc"), data.test, spec, ec,
                                       static_cast<std::uint64_t>(cfg.get_int("eval.baseline_seed")));
  } else if (baseline == "init") {
    const auto plan = config::storage_plan(cfg, data.meta.shape, data.meta.num_classes);
    const auto state = match::initial_state(data.train, plan, config::match_config(cfg, data.meta.shape.channels),
                                            config::distill_options(cfg));
    rep = eval::evaluate(state, data.test, spec, ec, "initialization");
  } else if (baseline.empty()) {
    if (checkpoint.empty()) checkpoint = (fs::path(cfg.get("run.dir")) / "distill" / "final.lss").string();
    if (!fs::exists(checkpoint)) throw DependencyError("eval: checkpoint not found: " + checkpoint);
    const auto state = match::load_state(checkpoint, cfg.get_double("match.alpha_init"));
    rep = eval::evaluate(state, data.test, spec, ec);
  } else {
    throw ConfigError("eval: unknown baseline '" + baseline + "' (expected random or init)");
  }
  const auto name = baseline.empty() ? std::string("report") : "baseline_" + baseline;
  write_text(out / (name + ".json"), eval::report_json(rep));
  for (std::size_t i = 0; i < rep.accuracies.size(); ++i)
    std::printf("seed %llu accuracy %.4f\n", static_cast<unsigned long long>(ec.seeds[i]), rep.accuracies[i]);
  std::printf("%s: mean %.4f std %.4f over %zu seeds (%lld training images) -> %s\n", rep.name.c_str(), rep.mean,
              rep.std, rep.accuracies.size(), static_cast<long long>(rep.train_images),
              (out / (name + ".json")).string().c_str());
  return kOk;
}

int cmd_ablate(const config::RunConfig& cfg) {
  echo(cfg, "ablate");
  const auto data = load_data(cfg, true);
  const auto buffer = expert::load_buffer(run_path(cfg, "buffer.dir") / "buffer.json");
  eval::AblationInputs in;
  in.real = &data.train;
  in.test = &data.test;
  in.buffer = &buffer;
  in.spec = config::model_spec(cfg, data.meta.shape, data.meta.num_classes);
  in.ipc = cfg.get_int("plan.ipc");
  in.rank = cfg.get_int("plan.rank");
  in.mappers = cfg.get_auto_int("plan.mappers");
  in.blocks_per_mapper = cfg.get_auto_int("plan.blocks");
  in.match = config::match_config(cfg, data.meta.shape.channels);
  in.distill = config::distill_options(cfg);
  in.distill.checkpoint_every = 0;
  in.eval = config::eval_config(cfg, data.meta.shape.channels);
  const auto rows = eval::ablation_grid(in, [](const eval::AblationRow& r) {
    std::printf("soft=%d prog=%d lowrank=%d images=%lld mean=%.4f std=%.4f\n", r.flags.soft_labels, r.flags.progressive,
                r.flags.lowrank, static_cast<long long>(r.plan.images), r.report.mean, r.report.std);
    std::fflush(stdout);
  });
  const fs::path out = fs::path(cfg.get("run.dir")) / "ablate";
  write_text(out / "grid.json", eval::ablation_json(rows));
  const auto table = eval::render_ablation(rows);
  write_text(out / "table.txt", table);
  std::fputs(table.c_str(), stdout);
  return kOk;
}

int cmd_export(const config::RunConfig& cfg, std::string checkpoint, std::string out_dir) {
  echo(cfg, "export");
  if (checkpoint.empty()) checkpoint = (fs::path(cfg.get("run.dir")) / "distill" / "final.lss").string();
  if (!fs::exists(checkpoint)) throw DependencyError("export: checkpoint not found: " + checkpoint);
  if (out_dir.empty()) out_dir = (fs::path(cfg.get("run.dir")) / "export").string();
  const auto ckpt = lowrank::load_container(checkpoint);
  std::vector<double> mean, std;
  if (auto meta = try_store_meta(cfg); meta && meta->shape == ckpt.dataset.meta.image_shape()) {
    mean = meta->mean;
    std = meta->std;
  }
  const auto files = viz::export_checkpoint(ckpt.dataset, mean, std, out_dir);
  for (const auto& f : files) std::printf("%s\n", f.string().c_str());
  return kOk;
}

int exit_code(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::InvalidArgument:
    case ErrorKind::Config: return kConfig;
    case ErrorKind::Data: return kData;
    case ErrorKind::Numeric: return kNumeric;
    case ErrorKind::Dependency: return kDependency;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Low-rank trajectory-matching dataset distillation"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&common](CLI::App* sub) {
    sub->add_option("-c,--config", common.config_file, "key = value config file");
    sub->add_option("--preset", common.preset, "start from a bundled preset (desk)");
    sub->add_option("-s,--set", common.overrides, "override a config key (key=value), repeatable");
    sub->add_option("-o,--run-dir", common.run_dir, "run directory (run.dir)");
  };

  auto* ingest = app.add_subcommand("ingest", "normalize a raw dataset into the store");
  add_common(ingest);

  BudgetArgs budget_args;
  auto* budget = app.add_subcommand("budget", "plan mappers and basis blocks for a storage budget");
  add_common(budget);
  budget->add_option("--dataset", budget_args.dataset, "cifar10, cifar100, svhn or desk");
  budget->add_option("--ipc", budget_args.ipc, "images per class");
  budget->add_option("-r,--rank", budget_args.rank, "low-rank dimension");
  budget->add_option("-k,--mappers", budget_args.k, "mapper sets");
  budget->add_option("-m,--blocks", budget_args.m, "basis blocks per mapper");

  auto* buffer = app.add_subcommand("buffer", "train expert trajectories");
  add_common(buffer);

  auto* distill = app.add_subcommand("distill", "run trajectory matching");
  add_common(distill);

  std::string eval_ckpt, eval_baseline;
  auto* evalc = app.add_subcommand("eval", "train fresh networks on a synthetic set and test them");
  add_common(evalc);
  evalc->add_option("--checkpoint", eval_ckpt, "LSS1 checkpoint (default run.dir/distill/final.lss)");
  evalc->add_option("--baseline", eval_baseline, "evaluate a baseline instead: random or init");

  auto* ablate = app.add_subcommand("ablate", "distill and evaluate all eight flag combinations");
  add_common(ablate);

  std::string export_ckpt, export_out;
  auto* exportc = app.add_subcommand("export", "write image grids of a checkpoint");
  add_common(exportc);
  exportc->add_option("--checkpoint", export_ckpt, "LSS1 checkpoint (default run.dir/distill/final.lss)");
  exportc->add_option("--out", export_out, "output directory (default run.dir/export)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    const auto cfg = resolve(common);
    if (ingest->parsed()) return cmd_ingest(cfg);
    if (budget->parsed()) return cmd_budget(cfg, budget_args);
    if (buffer->parsed()) return cmd_buffer(cfg);
    if (distill->parsed()) return cmd_distill(cfg);
    if (evalc->parsed()) return cmd_eval(cfg, eval_ckpt, eval_baseline);
    if (ablate->parsed()) return cmd_ablate(cfg);
    if (exportc->parsed()) return cmd_export(cfg, export_ckpt, export_out);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e);
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDependency;
  }
  return kConfig;
}
