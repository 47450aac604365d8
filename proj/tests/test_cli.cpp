#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "mgc/tensorio.hpp"
#include "support.hpp"

using namespace mgc;
namespace fs = std::filesystem;

namespace {

const std::string kSmallGen = " --classes 3 --train-per-class 2 --val-per-class 2 --test-per-class 2"
                              " --t-rgb 4 --t-pose 16 --height 8 --width 8";
const std::string kSmallModel = " --stage-channels 4,6 --embed-dim 8 --hidden 5 --lateral-channels 2";

int run(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(MGC_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool same_tree(const fs::path& a, const fs::path& b, const std::string& skip) {
  std::size_t n = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file() || e.path().filename() == skip) continue;
    const auto other = b / fs::relative(e.path(), a);
    if (!fs::exists(other) || slurp(e.path()) != slurp(other)) return false;
    ++n;
  }
  return n > 0;
}

}  // namespace

TEST_CASE("cli: generation is reproducible from flags and from its manifest") {
  test::TempDir dir("cli_gen");
  const auto log = dir / "log.txt";
  REQUIRE(run("gen --seed 7 --out " + (dir / "a").string() + kSmallGen, log) == 0);
  REQUIRE(run("gen --seed 7 --out " + (dir / "b").string() + kSmallGen, log) == 0);
  CHECK(same_tree(dir / "a", dir / "b", "run_manifest.ini"));
  REQUIRE(run("--config " + (dir / "a" / "run_manifest.ini").string() + " gen --out " + (dir / "c").string(), log) == 0);
  CHECK(same_tree(dir / "a", dir / "c", "run_manifest.ini"));
}

TEST_CASE("cli: exit codes") {
  test::TempDir dir("cli_codes");
  const auto log = dir / "log.txt";
  CHECK(run("gen --out " + (dir / "x").string() + " --t-pose 30", log) == 2);
  CHECK(run("gen --out " + (dir / "x").string() + " --no-such-flag", log) == 2);
  CHECK(run("gen", log) == 2);
  CHECK(run("train --manifest " + (dir / "missing.txt").string() + " --out " + (dir / "r").string(), log) == 4);
  CHECK(run("eval --checkpoint " + (dir / "none").string() + " --manifest x --out y", log) == 4);
  CHECK(run("--help", log) == 0);
  CHECK(run("train --help", log) == 0);
  const auto help = slurp(log);
  for (const char* flag : {"--alpha", "--tau", "--attention-source", "--prm-branch", "--stage", "--seed", "--lr-drops"}) {
    CHECK_MESSAGE(help.find(flag) != std::string::npos, flag);
  }
}

TEST_CASE("cli: ensemble of identical files equals the input") {
  test::TempDir dir("cli_ens");
  const tensorio::PredictionFile p{{"c0", "c1"}, {{2, 3}, {0.2f, 0.3f, 0.5f, 0.1f, 0.1f, 0.8f}}};
  tensorio::write_predictions(dir / "a.pred", p);
  tensorio::write_predictions(dir / "b.pred", p);
  REQUIRE(run("ensemble " + (dir / "a.pred").string() + " " + (dir / "b.pred").string() + " --weights 1 1 --out " +
                  (dir / "e.pred").string(),
              dir / "log.txt") == 0);
  CHECK(slurp(dir / "e.pred") == slurp(dir / "a.pred"));
}

TEST_CASE("cli: train, config overrides, eval and report") {
  test::TempDir dir("cli_train");
  const auto log = dir / "log.txt";
  REQUIRE(run("gen --seed 3 --out " + (dir / "data").string() + kSmallGen, log) == 0);
  const auto manifest = (dir / "data" / "manifest.txt").string();

  std::ofstream(dir / "cfg.ini") << "train.epochs=3\ntrain.alpha=0.25\ntrain.batch-size=3\n";
  REQUIRE(run("--config " + (dir / "cfg.ini").string() + " train --epochs 2 --lr-drops 1 --manifest " + manifest +
                  " --out " + (dir / "r1").string() + kSmallModel,
              log) == 0);
  const auto snapshot = slurp(dir / "r1" / "run_manifest.ini");
  CHECK(snapshot.find("train.epochs=2") != std::string::npos);  // flag wins
  CHECK(snapshot.find("train.alpha=0.25") != std::string::npos);
  CHECK(snapshot.find("gen.") == std::string::npos);

  REQUIRE(run("--config " + (dir / "r1" / "run_manifest.ini").string() + " train --out " + (dir / "r2").string(), log) == 0);
  CHECK(slurp(dir / "r1" / "run_record.tsv") == slurp(dir / "r2" / "run_record.tsv"));

  REQUIRE(run("eval --checkpoint " + (dir / "r1" / "checkpoints" / "best").string() + " --manifest " + manifest +
                  " --split test --out " + (dir / "ev").string(),
              log) == 0);
  CHECK(slurp(dir / "ev" / "predictions_test.pred") == slurp(dir / "r1" / "predictions_test.pred"));

  REQUIRE(run("report --run " + (dir / "r1").string() + " --out " + (dir / "rep").string(), log) == 0);
  for (const char* f : {"report.md", "loss.svg", "accuracy.svg", "drift.svg", "confusion.svg"}) {
    CHECK_MESSAGE(fs::exists(dir / "rep" / f), f);
  }
}
