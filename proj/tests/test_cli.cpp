#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "iis/datastore.hpp"
#include "iis/head.hpp"
#include "testutil.hpp"

using namespace iis;
using testutil::TempDir;
namespace fs = std::filesystem;

namespace {

// Runs the installed binary through the shell, discarding output unless a
// log path is given, and returns the process exit code.
int run_cli(const std::string& args, const std::string& env = "") {
  std::string cmd = env.empty() ? std::string() : env + " ";
  cmd += std::string(IIS_CLI_BIN) + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  REQUIRE(rc != -1);
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string gen_corpus(const TempDir& dir, const std::string& extra = "") {
  const std::string out = (dir / "data").string();
  REQUIRE(run_cli("synth gen --dim 16 --classes 3 --m 6 --train-per-class 60 "
                  "--val-per-class 30 --test-per-class 30 --rho 1.0 "
                  "--sigma 0.1 --seed 7 --out " + out + " " + extra) == 0);
  return out;
}

std::string corpus_flags(const std::string& data) {
  return "--train " + data + "/train.iise --val " + data + "/val.iise --test " +
         data + "/test.iise --library " + data + "/library.json";
}

}  // namespace

TEST_CASE("version and missing-argument exits") {
  CHECK(run_cli("--version") == 0);
  // Required options absent, unknown subcommands, and bare invocations all
  // count as usage errors.
  CHECK(run_cli("eval iis") == 1);
  CHECK(run_cli("frobnicate") == 1);
  CHECK(run_cli("") == 1);
}

TEST_CASE("synth gen and eval iis form a working pipeline") {
  TempDir dir("cli-pipeline");
  const std::string data = gen_corpus(dir);
  CHECK(fs::exists(data + "/train.iise"));
  CHECK(fs::exists(data + "/library.json"));
  CHECK(fs::exists(data + "/manifest.json"));

  testutil::write_file(dir / "sched.json", "[0.0, 0.1, 0.25, 0.5]");
  const std::string out = (dir / "eval").string();
  REQUIRE(run_cli("eval iis " + corpus_flags(data) + " --schedule " +
                  (dir / "sched.json").string() +
                  " --epochs 20 --seed 3 --out " + out) == 0);

  IISReport rep = load_report(out + "/report.json");
  CHECK(rep.mode == "ascending");
  CHECK(rep.library_kind == "planted");
  CHECK(rep.library_m == 6);
  CHECK(rep.ratios == std::vector<double>{0.0, 0.1, 0.25, 0.5});
  CHECK_FALSE(rep.val_as_test);
  CHECK(rep.iis >= 0.95);

  // The curve CSV carries one line per ratio under a fixed header.
  std::istringstream curve(testutil::read_file(fs::path(out) / "curve.csv"));
  std::string line;
  REQUIRE(std::getline(curve, line));
  CHECK(line == "sparsity,arr");
  int rows = 0;
  while (std::getline(curve, line)) ++rows;
  CHECK(rows == 4);

  nlohmann::ordered_json manifest =
      read_json_file(fs::path(out) / "manifest.json");
  CHECK(manifest.at("command") == "eval iis");
  CHECK(manifest.at("resolved").at("iis").get<double>() == rep.iis);
}

TEST_CASE("eval curve writes the csv but no report") {
  TempDir dir("cli-curve");
  const std::string data = gen_corpus(dir);
  testutil::write_file(dir / "sched.json", "[0.0, 0.3]");
  const std::string out = (dir / "curve").string();
  REQUIRE(run_cli("eval curve " + corpus_flags(data) + " --schedule " +
                  (dir / "sched.json").string() +
                  " --epochs 10 --seed 3 --out " + out) == 0);
  CHECK(fs::exists(out + "/curve.csv"));
  CHECK_FALSE(fs::exists(out + "/report.json"));
  CHECK(read_json_file(fs::path(out) / "manifest.json").at("command") ==
        "eval curve");
}

TEST_CASE("identical invocations produce byte-identical reports") {
  TempDir dir("cli-repro");
  const std::string data = gen_corpus(dir);
  testutil::write_file(dir / "sched.json", "[0.0, 0.25, 0.5]");
  const std::string flags = "eval iis " + corpus_flags(data) + " --schedule " +
                            (dir / "sched.json").string() +
                            " --epochs 10 --seed 3 --out ";
  const std::string a = (dir / "a").string(), b = (dir / "b").string();
  REQUIRE(run_cli(flags + a) == 0);
  REQUIRE(run_cli(flags + b) == 0);
  CHECK(testutil::read_file(fs::path(a) / "report.json") ==
        testutil::read_file(fs::path(b) / "report.json"));
  CHECK(testutil::read_file(fs::path(a) / "curve.csv") ==
        testutil::read_file(fs::path(b) / "curve.csv"));

  // Replaying the emitted manifest must reproduce the same report; an
  // explicit flag afterwards still wins over the config value.
  const std::string c = (dir / "c").string();
  REQUIRE(run_cli("eval iis --config " + a + "/manifest.json --out " + c) == 0);
  CHECK(testutil::read_file(fs::path(c) / "report.json") ==
        testutil::read_file(fs::path(a) / "report.json"));
}

TEST_CASE("the seed resolves from flag over config over environment") {
  TempDir dir("cli-seed");
  const std::string base =
      "synth gen --dim 8 --classes 2 --m 3 --train-per-class 10 "
      "--val-per-class 5 --test-per-class 5 --out ";
  const std::string env_dir = (dir / "env").string();
  const std::string flag_dir = (dir / "flag").string();
  const std::string both_dir = (dir / "both").string();
  REQUIRE(run_cli(base + env_dir, "IIS_SEED=5") == 0);
  REQUIRE(run_cli(base + flag_dir + " --seed 5") == 0);
  REQUIRE(run_cli(base + both_dir + " --seed 9", "IIS_SEED=5") == 0);

  const std::string env_bytes =
      testutil::read_file(fs::path(env_dir) / "train.iise");
  CHECK(env_bytes == testutil::read_file(fs::path(flag_dir) / "train.iise"));
  CHECK(env_bytes != testutil::read_file(fs::path(both_dir) / "train.iise"));
  CHECK(read_json_file(fs::path(env_dir) / "manifest.json")
            .at("options").at("seed").get<std::uint64_t>() == 5);

  // A config file seed outranks the environment as well.
  testutil::write_file(dir / "seed.json", "{\"seed\": 5}");
  const std::string cfg_dir = (dir / "cfg").string();
  REQUIRE(run_cli(base + cfg_dir + " --config " +
                  (dir / "seed.json").string(), "IIS_SEED=9") == 0);
  CHECK(env_bytes == testutil::read_file(fs::path(cfg_dir) / "train.iise"));
}

TEST_CASE("exit codes distinguish usage, data, and numeric failures") {
  TempDir dir("cli-exits");
  const std::string data = gen_corpus(dir);

  SUBCASE("a one-point schedule is a usage error") {
    testutil::write_file(dir / "one.json", "[0.5]");
    CHECK(run_cli("eval iis " + corpus_flags(data) + " --schedule " +
                  (dir / "one.json").string() + " --out " +
                  (dir / "out").string()) == 1);
  }
  SUBCASE("a missing embeddings file is a data error") {
    CHECK(run_cli("eval iis --train " + (dir / "absent.iise").string() +
                  " --val " + data + "/val.iise --library " + data +
                  "/library.json --out " + (dir / "out").string()) == 2);
  }
  SUBCASE("a malformed library manifest is a data error") {
    testutil::write_file(dir / "bad.json", "{\"format\": \"nope\"}");
    CHECK(run_cli("eval iis --train " + data + "/train.iise --val " + data +
                  "/val.iise --library " + (dir / "bad.json").string() +
                  " --out " + (dir / "out").string()) == 2);
  }
  SUBCASE("a diverging finetune is a numeric error") {
    CHECK(run_cli("finetune --train " + data + "/train.iise --val " + data +
                  "/val.iise --s 0.1 --ml 8 --epochs 6 --batch-size 64 "
                  "--lr 1000 --head-warmup-epochs 1 --seed 1 --out " +
                  (dir / "out").string()) == 3);
  }
}

TEST_CASE("finetune writes trace, heads, and alignment artifacts") {
  TempDir dir("cli-finetune");
  const std::string data = gen_corpus(dir);
  testutil::write_file(dir / "sched.json", "[0.0, 0.5]");
  const std::string out = (dir / "ft").string();
  REQUIRE(run_cli("finetune " + corpus_flags(data) + " --schedule " +
                  (dir / "sched.json").string() +
                  " --s 0.1 --ml 16 --epochs 4 --batch-size 64 --lr 0.001 "
                  "--head-warmup-epochs 2 --snapshot-epochs 2 --seed 5 "
                  "--out " + out) == 0);

  std::istringstream trace(testutil::read_file(fs::path(out) / "trace.csv"));
  std::string line;
  REQUIRE(std::getline(trace, line));
  CHECK(line == "epoch,acc_dense,acc_sparse,ratio");
  int rows = 0;
  while (std::getline(trace, line)) ++rows;
  CHECK(rows == 5);

  LinearHead dense = load_head(out + "/dense_head.json");
  LinearHead sparse = load_head(out + "/sparse_head.json");
  CHECK(dense.input_kind == HeadInputKind::representation);
  CHECK(sparse.input_kind == HeadInputKind::interpretation);
  CHECK(load_matrix_file(out + "/concept_matrix.iise").matrix.cols() == 16);

  // Snapshots 0, 2, and 4 each get an alignment row.
  std::istringstream align(
      testutil::read_file(fs::path(out) / "alignment.csv"));
  REQUIRE(std::getline(align, line));
  CHECK(line == "epoch,accuracy,simplified_iis,original_iis");
  rows = 0;
  while (std::getline(align, line)) ++rows;
  CHECK(rows == 3);
}

TEST_CASE("train head, explain, intervene, and entropy chain together") {
  TempDir dir("cli-probe");
  const std::string data = gen_corpus(dir);
  const std::string head_dir = (dir / "head").string();
  REQUIRE(run_cli("train head --train " + data + "/train.iise --val " + data +
                  "/val.iise --library " + data +
                  "/library.json --s 0.3 --epochs 15 --seed 2 --out " +
                  head_dir) == 0);
  const std::string head = head_dir + "/head.json";
  CHECK(load_head(head).input_kind == HeadInputKind::interpretation);

  const std::string ex_dir = (dir / "explain").string();
  REQUIRE(run_cli("explain --val " + data + "/val.iise --library " + data +
                  "/library.json --head " + head +
                  " --index 0 --top-k 3 --s 0.3 --out " + ex_dir) == 0);
  nlohmann::ordered_json ex = read_json_file(fs::path(ex_dir) / "explain.json");
  CHECK(ex.at("format") == "iis-explanation");
  CHECK(ex.at("top").size() == 3);

  const std::string iv_dir = (dir / "intervene").string();
  REQUIRE(run_cli("intervene --val " + data + "/val.iise --library " + data +
                  "/library.json --head " + head +
                  " --index 0 --zero 0,1 --s 0.3 --out " + iv_dir) == 0);
  nlohmann::ordered_json iv =
      read_json_file(fs::path(iv_dir) / "intervene.json");
  CHECK(iv.at("zeroed") == nlohmann::ordered_json::array({0, 1}));
  CHECK(iv.at("logits_before").size() == 3);

  const std::string en_dir = (dir / "entropy").string();
  REQUIRE(run_cli("eval entropy --val " + data + "/val.iise --library " + data +
                  "/library.json --head " + head + " --s 0.3 --out " +
                  en_dir) == 0);
  nlohmann::ordered_json en = read_json_file(fs::path(en_dir) / "entropy.json");
  CHECK(en.at("class_entropy").size() == 3);
  CHECK(en.at("concepts").size() == 6);
}

TEST_CASE("concept libraries build from the command line") {
  TempDir dir("cli-concepts");
  const std::string data = gen_corpus(dir);

  const std::string proto_dir = (dir / "proto").string();
  REQUIRE(run_cli("concepts build --patches " + data +
                  "/train.iise --kind prototype --m 6 --seed 3 --out " +
                  proto_dir) == 0);
  ConceptLibrary proto = load_library(proto_dir + "/library.json");
  CHECK(proto.kind == "prototype");
  CHECK(proto.m() == 6);
  CHECK(proto.dim() == 16);

  const std::string clus_dir = (dir / "clus").string();
  REQUIRE(run_cli("concepts build --patches " + data +
                  "/train.iise --kind cluster --m 4 --patches-per-class 20 "
                  "--seed 3 --out " + clus_dir) == 0);
  CHECK(load_library(clus_dir + "/library.json").kind == "cluster");

  // Soft labels live next to the embeddings they score.
  SoftLabelMatrix sl;
  sl.names = {"t0", "t1"};
  EmbeddingDataset train = load_embeddings(data + "/train.iise");
  RandomSource rng(4);
  sl.scores = rng.gaussian(train.embeddings.rows(), 2);
  save_soft_labels(dir / "soft.json", sl);
  const std::string text_dir = (dir / "text").string();
  REQUIRE(run_cli("concepts fit-text --train " + data +
                  "/train.iise --soft-labels " + (dir / "soft.json").string() +
                  " --loss mse --lambda 0.001 --out " + text_dir) == 0);
  ConceptLibrary text = load_library(text_dir + "/library.json");
  CHECK(text.kind == "text");
  CHECK(text.m() == 2);
}
