#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <sstream>
#include <set>

#include "lss/config.hpp"
#include "lss/error.hpp"
#include "test_util.hpp"

using namespace lss;
using namespace lss::config;

TEST_CASE("defaults cover every known key") {
  const RunConfig cfg;
  std::set<std::string> keys;
  for (const auto& k : known_keys()) {
    CHECK(cfg.get(k.key) == k.default_value);
    CHECK_FALSE(k.help.empty());
    CHECK(keys.insert(k.key).second);
  }
  CHECK(cfg.get_int("model.width") == 128);
  CHECK(cfg.get_double("match.lr_alpha") == doctest::Approx(1e-5));
  CHECK(cfg.get_bool("plan.lowrank"));
  CHECK_FALSE(cfg.get_auto_int("plan.mappers").has_value());
  CHECK(cfg.get_seed_list("eval.seeds") == std::vector<std::uint64_t>{0, 1, 2, 3, 4});
}

TEST_CASE("parsing") {
  const auto cfg = RunConfig::parse("# comment\n  plan.rank = 6  # trailing\n\nmodel.norm=none\nplan.mappers = 3\n");
  CHECK(cfg.get_int("plan.rank") == 6);
  CHECK(cfg.get("model.norm") == "none");
  CHECK(cfg.get_auto_int("plan.mappers") == 3);
  CHECK(cfg.get("model.depth") == "3");

  CHECK_THROWS_AS(RunConfig::parse("plan.rnk = 2"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("plan.rank = 2\nplan.rank = 3"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("plan.rank 2"), ConfigError);
  try {
    RunConfig::parse("\nplan.rank = 2\nplan.rank = 3", "x.cfg");
    FAIL("repeated key accepted");
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    CHECK(what.find("x.cfg:3") != std::string::npos);
    CHECK(what.find("line 2") != std::string::npos);
  }
}

TEST_CASE("typed accessors reject malformed values") {
  RunConfig cfg;
  cfg.set("plan.rank", "4x");
  CHECK_THROWS_AS(cfg.get_int("plan.rank"), ConfigError);
  cfg.set("match.lr_basis", "fast");
  CHECK_THROWS_AS(cfg.get_double("match.lr_basis"), ConfigError);
  cfg.set("plan.lowrank", "maybe");
  CHECK_THROWS_AS(cfg.get_bool("plan.lowrank"), ConfigError);
  cfg.set("eval.seeds", "1,,2");
  CHECK_THROWS_AS(cfg.get_seed_list("eval.seeds"), ConfigError);
  cfg.set("eval.seeds", "");
  CHECK_THROWS_AS(cfg.get_seed_list("eval.seeds"), ConfigError);
  cfg.set("eval.seeds", " 7, 8 ");
  CHECK(cfg.get_seed_list("eval.seeds") == std::vector<std::uint64_t>{7, 8});
  CHECK_THROWS_AS(cfg.set("nope", "1"), ConfigError);
  CHECK_THROWS_AS(cfg.get("nope"), ConfigError);
  for (const char* t : {"true", "1", "on", "yes"}) {
    cfg.set("plan.lowrank", t);
    CHECK(cfg.get_bool("plan.lowrank"));
  }
}

TEST_CASE("dump is sorted, complete and reloads to the same config") {
  auto cfg = desk_preset();
  cfg.apply_override("plan.rank = 5");
  const auto text = cfg.dump();
  std::vector<std::string> keys;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) keys.push_back(line.substr(0, line.find(" = ")));
  CHECK(keys.size() == known_keys().size());
  CHECK(std::is_sorted(keys.begin(), keys.end()));
  CHECK(RunConfig::parse(text) == cfg);

  testing::TempDir tmp;
  cfg.save(tmp / "sub" / "config.txt");
  CHECK(RunConfig::load(tmp / "sub" / "config.txt") == cfg);
  CHECK_THROWS_AS(RunConfig::load(tmp / "missing.cfg"), ConfigError);
}

TEST_CASE("merge and overrides layer on a preset") {
  testing::TempDir tmp;
  {
    std::ofstream(tmp / "a.cfg") << "plan.rank = 2\nmatch.iterations = 7\n";
  }
  auto cfg = desk_preset();
  cfg.merge_file(tmp / "a.cfg");
  cfg.apply_override("match.iterations=9");
  CHECK(cfg.get_int("plan.rank") == 2);
  CHECK(cfg.get_int("match.iterations") == 9);
  CHECK(cfg.get_int("model.width") == 16);
  CHECK_THROWS_AS(cfg.apply_override("match.iterations"), ConfigError);
  CHECK_THROWS_AS(cfg.apply_override("match.iters=3"), ConfigError);
}

TEST_CASE("desk preset") {
  const auto cfg = desk_preset();
  CHECK(cfg.get("data.format") == "desk");
  CHECK(cfg.get_int("buffer.experts") == 5);
  CHECK(cfg.get_int("buffer.epochs") == 10);
  CHECK(cfg.get_int("plan.ipc") == 1);
  CHECK(cfg.get_int("match.iterations") == 300);
  CHECK(cfg.get_double("match.alpha_init") == 0.1);
  CHECK(cfg.get_double("match.lr_alpha") == 0.01);
  CHECK(cfg.get_double("match.lr_basis") == 100.0);
  CHECK(cfg.get_double("match.lr_mappers") == 1.0);
  CHECK(cfg.get_double("match.lr_labels") == 10.0);
  const ImageShape shape{1, 28, 28};
  const auto plan = storage_plan(cfg, shape, 2);
  CHECK(plan.param_count <= 2 * 28 * 28);
  CHECK(plan.images > 2);
  const auto spec = model_spec(cfg, shape, 2);
  CHECK(spec.depth == 3);
  CHECK(spec.net_width == 16);
  const auto m = match_config(cfg, 1);
  CHECK(m.schedule.total_iterations == 300);
  CHECK(m.student_steps == 10);
  CHECK(m.augmentation.ops.size() > 0);
}

TEST_CASE("typed views") {
  RunConfig cfg;
  cfg.set("plan.lowrank", "false");
  cfg.set("plan.ipc", "2");
  const auto pix = storage_plan(cfg, {3, 32, 32}, 10);
  CHECK(pix.images == 20);
  cfg.set("plan.lowrank", "true");
  cfg.set("plan.ipc", "1");
  cfg.set("plan.rank", "4");
  cfg.set("plan.mappers", "15");
  cfg.set("plan.blocks", "22");
  const auto lr = storage_plan(cfg, {3, 32, 32}, 10);
  CHECK(lr.mappers == 15);
  CHECK(lr.blocks_per_mapper == 22);
  CHECK(lr.param_count == 30660);

  cfg.set("eval.lr", "learned");
  CHECK(eval_config(cfg, 3).lr == 0.0);
  cfg.set("eval.lr", "0");
  CHECK_THROWS_AS(eval_config(cfg, 3), ConfigError);
  cfg.set("eval.lr", "0.01");
  cfg.set("eval.augment", "none");
  CHECK(eval_config(cfg, 3).augmentation.ops.empty());

  cfg.set("buffer.epochs", "0");
  CHECK_THROWS_AS(expert_config(cfg, 3), ConfigError);
  cfg.set("model.depth", "6");
  CHECK_THROWS_AS(model_spec(cfg, {3, 32, 32}, 10), ConfigError);
  cfg.set("match.checkpoint_every", "-1");
  CHECK_THROWS_AS(distill_options(cfg), ConfigError);
  cfg.set("match.student_steps", "0");
  CHECK_THROWS_AS(match_config(cfg, 3), ConfigError);
}
