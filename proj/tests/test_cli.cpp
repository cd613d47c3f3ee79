#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "lss/binary_io.hpp"
#include "lss/config.hpp"
#include "lss/dataset_store.hpp"
#include "lss/matcher.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace lss;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

Result run(const std::string& args, const fs::path& scratch) {
  const auto log = scratch / "cli_output.txt";
  const std::string cmd = std::string(LSS_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  r.out = ss.str();
  return r;
}

bool contains(const std::string& s, const std::string& needle) { return s.find(needle) != std::string::npos; }

// Small desk pipeline settings shared by every stage.
std::string small(const fs::path& dir) {
  return "--preset desk -o " + dir.string() +
         " -s data.desk_train_per_class=40 -s data.desk_test_per_class=10 -s model.width=4 -s model.depth=2"
         " -s buffer.experts=2 -s buffer.epochs=2 -s buffer.batch_size=8 -s match.student_steps=2"
         " -s match.expert_epochs=1 -s match.batch_size=4 -s schedule.max_start=1 -s schedule.delta=0"
         " -s eval.epochs=2 -s eval.seeds=0,1 -s eval.batch_size=8";
}

}  // namespace

TEST_CASE("budget prints the planned factorization") {
  testing::TempDir tmp;
  auto r = run("budget --dataset cifar10 --ipc 1 -r 4 -k 15 -m 22 -o " + (tmp / "run").string(), tmp.path());
  CHECK(r.code == 0);
  CHECK(contains(r.out, "k=15 m=22 images=330 params=30660 budget=30720"));
  r = run("budget --dataset cifar10 --ipc 1 -r 4 -o " + (tmp / "run").string(), tmp.path());
  CHECK(r.code == 0);
  CHECK(contains(r.out, "mode=lowrank"));
  r = run("budget --dataset desk -s plan.lowrank=false -o " + (tmp / "run").string(), tmp.path());
  CHECK(contains(r.out, "images=2 "));
  CHECK(contains(r.out, "mode=pixels"));
  // The resolved configuration is echoed into the run directory.
  const auto echoed = config::RunConfig::load(tmp / "run" / "budget.config");
  CHECK(echoed.get("plan.lowrank") == "false");
  CHECK(echoed.get("data.format") == "desk");
}

TEST_CASE("exit codes") {
  testing::TempDir tmp;
  const auto dir = (tmp / "run").string();
  CHECK(run("budget -s plan.nope=1 -o " + dir, tmp.path()).code == 2);
  CHECK(run("budget --dataset cifar10 -r 4 -k 40 -m 40 -o " + dir, tmp.path()).code == 2);
  CHECK(run("budget --preset imagenet -o " + dir, tmp.path()).code == 2);
  CHECK(run("frobnicate", tmp.path()).code == 2);
  CHECK(run("", tmp.path()).code == 2);
  const auto missing = run("buffer -o " + dir, tmp.path());
  CHECK(missing.code == 5);
  CHECK(contains(missing.out, "error:"));
  CHECK(run("export -o " + dir, tmp.path()).code == 5);
  CHECK(run("ingest -s data.format=cifar10 -o " + dir, tmp.path()).code == 2);
  CHECK(run("ingest -s data.format=cifar10 -s data.source=" + (tmp / "nothing").string() + " -o " + dir, tmp.path()).code == 5);

  // A corrupted store is a data error.
  REQUIRE(run("ingest " + small(tmp / "c"), tmp.path()).code == 0);
  auto bytes = io::read_file(tmp / "c" / "store" / "train.lssd");
  bytes[bytes.size() / 2] ^= 0xff;
  io::write_file(tmp / "c" / "store" / "train.lssd", bytes);
  CHECK(run("buffer " + small(tmp / "c"), tmp.path()).code == 3);
}

TEST_CASE("small desk pipeline") {
  testing::TempDir tmp;
  const auto dir = tmp / "run";
  const auto args = small(dir);

  auto r = run("ingest " + args, tmp.path());
  REQUIRE(r.code == 0);
  CHECK(contains(r.out, "80 train, 20 test, 2 classes, 1x28x28"));
  r = run("buffer " + args, tmp.path());
  REQUIRE(r.code == 0);
  CHECK(fs::exists(dir / "buffer" / "buffer.json"));

  SUBCASE("zero iterations leaves the initialization") {
    r = run("distill " + args + " -s match.iterations=0", tmp.path());
    REQUIRE(r.code == 0);
    const auto cfg = config::RunConfig::load(dir / "distill.config");
    CHECK(cfg.get_int("match.iterations") == 0);
    const auto train = store::load_split(dir / "store", "train");
    const auto meta = store::load_store_meta(dir / "store");
    const auto init = match::initial_state(train, config::storage_plan(cfg, meta.shape, meta.num_classes),
                                           config::match_config(cfg, 1), config::distill_options(cfg));
    const auto saved = match::load_state(dir / "distill" / "final.lss");
    const auto a = init.images(), b = saved.images();
    REQUIRE(a.shape() == b.shape());
    CHECK(testing::max_abs_diff(a, b) < 1e-5);
    CHECK(testing::max_abs_diff(init.labels.logits, saved.labels.logits) < 1e-5);
  }

  SUBCASE("distill, evaluate, export") {
    r = run("distill " + args + " -s match.iterations=3 -s match.checkpoint_every=2", tmp.path());
    REQUIRE(r.code == 0);
    CHECK(contains(r.out, "iter     3/3"));
    CHECK(fs::exists(dir / "distill" / "final.lss"));
    CHECK(fs::exists(dir / "distill" / "loss.log"));
    CHECK(fs::exists(dir / "distill" / "checkpoints"));

    r = run("eval " + args, tmp.path());
    REQUIRE(r.code == 0);
    CHECK(contains(r.out, "seed 1 accuracy"));
    CHECK(fs::exists(dir / "eval" / "report.json"));
    r = run("eval --baseline random " + args, tmp.path());
    REQUIRE(r.code == 0);
    CHECK(contains(r.out, "(2 training images)"));
    CHECK(run("eval --baseline nope " + args, tmp.path()).code == 2);

    r = run("export " + args, tmp.path());
    REQUIRE(r.code == 0);
    const auto ckpt = lowrank::load_container(dir / "distill" / "final.lss");
    for (std::int64_t i = 0; i < ckpt.dataset.meta.mappers; ++i)
      for (const char* kind : {"_images.pgm", "_view.pgm", "_basis.pgm"})
        CHECK(fs::exists(dir / "export" / ("mapper_" + std::to_string(i) + kind)));
  }

  SUBCASE("divergence is a numeric error") {
    r = run("distill " + args + " -s match.iterations=2 -s match.alpha_init=1e300", tmp.path());
    CHECK(r.code == 4);
    CHECK(contains(r.out, "error:"));
  }

  SUBCASE("ablation grid") {
    r = run("ablate " + args + " -s match.iterations=1 -s eval.epochs=1 -s eval.seeds=0", tmp.path());
    REQUIRE(r.code == 0);
    CHECK(fs::exists(dir / "ablate" / "grid.json"));
    CHECK(fs::exists(dir / "ablate" / "table.txt"));
    CHECK(contains(r.out, "soft=1 prog=1 lowrank=1"));
  }
}
