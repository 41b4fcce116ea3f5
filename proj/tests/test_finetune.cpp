#include <doctest.h>

#include <cmath>
#include <cstddef>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "iis/autodiff.hpp"
#include "iis/common.hpp"
#include "iis/datastore.hpp"
#include "iis/evaluator.hpp"
#include "iis/finetune.hpp"
#include "iis/head.hpp"
#include "iis/numerics.hpp"
#include "iis/synth.hpp"
#include "testutil.hpp"

using namespace iis;
using testutil::TempDir;

namespace {

// Two classes split by the sign of coordinate 0; the other coordinates
// carry only noise.
EmbeddingDataset two_blob(int per_class, Eigen::Index d, std::uint64_t seed) {
  RandomSource rng(seed);
  EmbeddingDataset ds;
  ds.n_classes = 2;
  ds.embeddings.resize(2 * per_class, d);
  for (int i = 0; i < 2 * per_class; ++i) {
    const int y = i % 2;
    ds.embeddings.row(i) = 0.3 * rng.gaussian(1, d);
    ds.embeddings(i, 0) += y == 0 ? 4.0 : -4.0;
    ds.labels.push_back(y);
  }
  return ds;
}

ConceptLibrary identity_library(Eigen::Index d) {
  ConceptLibrary lib;
  lib.vectors = Eigen::MatrixXd::Identity(d, d);
  lib.kind = "planted";
  for (Eigen::Index j = 0; j < d; ++j) {
    lib.names.push_back("axis" + std::to_string(j));
  }
  return lib;
}

double max_abs_diff(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return (a - b).cwiseAbs().maxCoeff();
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> fields;
  std::istringstream ss(line);
  std::string tok;
  while (std::getline(ss, tok, ',')) fields.push_back(tok);
  return fields;
}

}  // namespace

TEST_CASE("joint objective gradients agree with finite differences") {
  const Eigen::Index n = 6, d = 4, m = 5;
  const int n_classes = 3;
  const double s = 0.4;
  for (std::uint64_t seed : {2, 5, 9}) {
    CAPTURE(seed);
    RandomSource rng(seed);
    Eigen::MatrixXd x = rng.gaussian(n, d);
    std::vector<int> y;
    for (Eigen::Index i = 0; i < n; ++i) y.push_back(int(rng.below(n_classes)));

    for (AdapterKind kind : {AdapterKind::linear, AdapterKind::mlp}) {
      CAPTURE(int(kind));
      Adapter adapter;
      if (kind == AdapterKind::linear) {
        adapter = Adapter::identity_linear(d);
        adapter.params[0] += 0.3 * rng.gaussian(d, d);
      } else {
        adapter = Adapter::make_mlp(d, rng);
        adapter.params[1] = 0.05 * rng.gaussian(1, d);
        adapter.params[3] = 0.05 * rng.gaussian(1, d);
      }

      std::vector<Eigen::MatrixXd> point;
      for (const auto& p : adapter.params) point.push_back(p);
      point.push_back(rng.gaussian(d, m) / std::sqrt(double(d)));
      point.push_back(0.4 * rng.gaussian(d, n_classes));
      point.push_back(0.1 * rng.gaussian(1, n_classes));
      point.push_back(0.4 * rng.gaussian(m, n_classes));
      point.push_back(0.1 * rng.gaussian(1, n_classes));

      // The live cutoff is an order statistic of the projection, so one
      // coordinate per row sits exactly on the shrinkage kink. Freeze the
      // cutoffs slightly below it so no central-difference probe straddles
      // a non-differentiable point.
      const Eigen::MatrixXd proj =
          adapter.apply(x) * point[adapter.params.size()];
      const Eigen::VectorXd frozen = 0.9 * soft_threshold_cutoffs(proj, s);

      GraphBuilder build = [&](ad::Tape& t,
                               const std::vector<ad::Value>& leaves) {
        return joint_objective_graph(t, kind, leaves, x, y, s, &frozen);
      };
      CHECK(finite_difference_check(build, point) < 1e-4);
    }
  }
}

TEST_CASE("joint objective rejects a leaf list of the wrong size") {
  RandomSource rng(1);
  Eigen::MatrixXd x = rng.gaussian(3, 2);
  std::vector<int> y = {0, 1, 0};
  ad::Tape t;
  std::vector<ad::Value> five;
  for (int i = 0; i < 5; ++i) {
    five.push_back(t.input(Eigen::MatrixXd::Ones(2, 2)));
  }
  // A linear adapter expects six leaves, an mlp adapter nine.
  CHECK_THROWS_AS(
      joint_objective_graph(t, AdapterKind::linear, five, x, y, 0.3),
      UsageError);
  std::vector<ad::Value> six = five;
  six.push_back(t.input(Eigen::MatrixXd::Ones(2, 2)));
  CHECK_THROWS_AS(joint_objective_graph(t, AdapterKind::mlp, six, x, y, 0.3),
                  UsageError);
}

TEST_CASE("zero learning rate preserves the warm state across epochs") {
  EmbeddingDataset train = two_blob(30, 5, 21);
  EmbeddingDataset val = two_blob(10, 5, 22);
  FinetuneConfig cfg;
  cfg.concept_dim = 5;
  cfg.identity_concepts = true;
  cfg.epochs = 4;
  cfg.batch_size = 32;
  cfg.learning_rate = 0.0;
  cfg.weight_decay = 0.0;
  cfg.head_warmup_epochs = 2;
  cfg.seed = 3;
  FinetuneResult res = finetune_iis(train, val, cfg);

  REQUIRE(res.trace.size() == std::size_t(cfg.epochs) + 1);
  CHECK(max_abs_diff(res.adapter.params[0],
                     Eigen::MatrixXd::Identity(5, 5)) == 0.0);
  CHECK(max_abs_diff(res.concept_matrix,
                     Eigen::MatrixXd::Identity(5, 5)) == 0.0);
  for (const TraceRow& row : res.trace) {
    CHECK(row.acc_dense == res.trace.front().acc_dense);
    CHECK(row.acc_sparse == res.trace.front().acc_sparse);
    CHECK(row.ratio == res.trace.front().ratio);
  }
  CHECK_FALSE(res.diverged);

  REQUIRE(res.snapshots.size() == 2);
  CHECK(res.snapshots.front().epoch == 0);
  CHECK(res.snapshots.back().epoch == cfg.epochs);
  CHECK(max_abs_diff(res.snapshots.back().adapter.params[0],
                     res.snapshots.front().adapter.params[0]) == 0.0);
}

TEST_CASE("the joint objective falls over training on a synthetic corpus") {
  SynthSpec spec;
  spec.dim = 12;
  spec.n_classes = 3;
  spec.m_concepts = 6;
  spec.train_per_class = 40;
  spec.val_per_class = 20;
  spec.test_per_class = 20;
  spec.rho = 0.5;
  spec.seed = 3;
  SynthCorpus corpus = generate(spec);

  FinetuneConfig cfg;
  cfg.s = 0.2;
  cfg.concept_dim = 12;
  cfg.epochs = 30;
  cfg.batch_size = 64;
  cfg.learning_rate = 3e-3;
  cfg.weight_decay = 0.05;
  cfg.head_warmup_epochs = 2;
  cfg.seed = 7;
  FinetuneResult res = finetune_iis(corpus.train, corpus.val, cfg);

  REQUIRE(res.trace.size() == 31);
  CHECK_FALSE(res.diverged);
  double early = 0.0, late = 0.0;
  for (int i = 1; i <= 5; ++i) early += res.trace[std::size_t(i)].loss;
  for (int i = 26; i <= 30; ++i) late += res.trace[std::size_t(i)].loss;
  CHECK(late < early);
  CHECK(res.trace.back().loss < res.trace.front().loss);
  CHECK(res.trace.back().ratio >= res.trace.front().ratio - 0.05);
}

TEST_CASE("the mlp adapter trains without diverging") {
  EmbeddingDataset train = two_blob(30, 6, 31);
  EmbeddingDataset val = two_blob(10, 6, 32);
  FinetuneConfig cfg;
  cfg.adapter = AdapterKind::mlp;
  cfg.s = 0.1;
  cfg.concept_dim = 8;
  cfg.epochs = 8;
  cfg.batch_size = 32;
  cfg.learning_rate = 1e-3;
  cfg.head_warmup_epochs = 2;
  cfg.seed = 5;
  FinetuneResult res = finetune_iis(train, val, cfg);
  CHECK(res.adapter.params.size() == 4);
  CHECK_FALSE(res.diverged);
  CHECK(res.trace.back().acc_dense >= 0.9);
}

TEST_CASE("zero sparsity with identity concepts keeps the heads aligned") {
  EmbeddingDataset train = two_blob(40, 5, 41);
  EmbeddingDataset val = two_blob(15, 5, 42);
  FinetuneConfig cfg;
  cfg.s = 0.0;
  cfg.concept_dim = 5;
  cfg.identity_concepts = true;
  cfg.freeze_concepts = true;
  cfg.epochs = 10;
  cfg.batch_size = 32;
  cfg.learning_rate = 1e-3;
  cfg.head_warmup_epochs = 3;
  cfg.seed = 11;
  FinetuneResult res = finetune_iis(train, val, cfg);

  // Frozen concepts never move off their identity start.
  CHECK(max_abs_diff(res.concept_matrix,
                     Eigen::MatrixXd::Identity(5, 5)) == 0.0);
  // At s = 0 the sparse head sees x|x| coordinate-wise, which preserves
  // the separating sign, so both heads should land together.
  CHECK(res.trace.back().acc_dense >= 0.95);
  CHECK(std::abs(res.trace.back().acc_dense - res.trace.back().acc_sparse) <=
        0.02);
  CHECK(res.trace.back().ratio >= 0.98);
}

TEST_CASE("three runaway epochs trip the divergence guard") {
  EmbeddingDataset train = two_blob(30, 4, 51);
  EmbeddingDataset val = two_blob(10, 4, 52);
  FinetuneConfig cfg;
  cfg.concept_dim = 4;
  cfg.epochs = 12;
  cfg.batch_size = 32;
  cfg.learning_rate = 1000.0;
  cfg.head_warmup_epochs = 1;
  cfg.seed = 13;
  FinetuneResult res = finetune_iis(train, val, cfg);
  CHECK(res.diverged);
  // The loop breaks early, so the final-epoch snapshot is never taken.
  CHECK(res.trace.size() < std::size_t(cfg.epochs) + 1);
  REQUIRE(res.snapshots.size() == 1);
  CHECK(res.snapshots.front().epoch == 0);
  CHECK(res.trace.back().loss > 10.0 * res.trace.front().loss);
}

TEST_CASE("the trace csv roundtrips through the documented layout") {
  std::vector<TraceRow> trace(2);
  trace[0].epoch = 0;
  trace[0].acc_dense = 0.5;
  trace[0].acc_sparse = 0.25;
  trace[0].ratio = 0.5;
  trace[0].loss = 1.375;
  trace[1].epoch = 7;
  trace[1].acc_dense = 1.0 / 3.0;
  trace[1].acc_sparse = 2.0 / 7.0;
  trace[1].ratio = trace[1].acc_sparse / trace[1].acc_dense;
  trace[1].loss = 0.1;

  TempDir dir("trace-csv");
  const auto path = dir / "trace.csv";
  write_trace_csv(path, trace);

  std::ifstream in(path);
  std::string line;
  REQUIRE(std::getline(in, line));
  CHECK(line == "epoch,acc_dense,acc_sparse,ratio");
  for (const TraceRow& row : trace) {
    REQUIRE(std::getline(in, line));
    std::vector<std::string> fields = split_csv(line);
    REQUIRE(fields.size() == 4);
    CHECK(std::stoi(fields[0]) == row.epoch);
    CHECK(std::stod(fields[1]) == row.acc_dense);
    CHECK(std::stod(fields[2]) == row.acc_sparse);
    CHECK(std::stod(fields[3]) == row.ratio);
  }
  CHECK_FALSE(std::getline(in, line));
}

TEST_CASE("alignment rows re-score the recorded snapshots") {
  EmbeddingDataset train = two_blob(30, 4, 61);
  EmbeddingDataset val = two_blob(10, 4, 62);
  EmbeddingDataset test = two_blob(10, 4, 63);
  FinetuneConfig fcfg;
  fcfg.s = 0.1;
  fcfg.concept_dim = 4;
  fcfg.identity_concepts = true;
  fcfg.epochs = 6;
  fcfg.batch_size = 32;
  fcfg.learning_rate = 1e-3;
  fcfg.head_warmup_epochs = 2;
  fcfg.snapshot_epochs = {3};
  fcfg.seed = 17;
  FinetuneResult res = finetune_iis(train, val, fcfg);
  REQUIRE(res.snapshots.size() == 3);

  ConceptLibrary lib = identity_library(4);
  SparsitySchedule sched{{0.0, 0.5}};
  IisConfig icfg;
  icfg.head.epochs = 15;
  icfg.seed = 23;
  std::vector<AlignmentRow> rows = track_iis_alignment(
      res, train, val, &test, lib, sched, SparsifyMode::ascending, icfg);

  REQUIRE(rows.size() == 3);
  CHECK(rows[0].epoch == 0);
  CHECK(rows[1].epoch == 3);
  CHECK(rows[2].epoch == 6);

  // The epoch-0 adapter is the exact identity, so its row must match a
  // direct pipeline run on the raw embeddings bit for bit.
  IISReport direct = compute_iis(train, val, &test, lib, sched,
                                 SparsifyMode::ascending, icfg);
  CHECK(rows[0].original_iis == direct.iis);
  CHECK(rows[0].accuracy == direct.representation_accuracy);

  // Simplified scores are looked up from the trace by epoch.
  CHECK(rows[0].simplified_iis == res.trace[0].ratio);
  CHECK(rows[1].simplified_iis == res.trace[3].ratio);
  CHECK(rows[2].simplified_iis == res.trace[6].ratio);
}

TEST_CASE("alignment requires at least one snapshot") {
  FinetuneResult empty;
  EmbeddingDataset train = two_blob(10, 3, 71);
  EmbeddingDataset val = two_blob(5, 3, 72);
  ConceptLibrary lib = identity_library(3);
  IisConfig icfg;
  icfg.head.epochs = 15;
  CHECK_THROWS_AS(track_iis_alignment(empty, train, val, nullptr, lib,
                                      SparsitySchedule{{0.0, 0.5}},
                                      SparsifyMode::ascending, icfg),
                  UsageError);
}

TEST_CASE("finetune validates its configuration") {
  EmbeddingDataset train = two_blob(10, 3, 81);
  EmbeddingDataset val = two_blob(5, 3, 82);
  FinetuneConfig cfg;
  cfg.concept_dim = 3;
  cfg.epochs = 1;
  cfg.batch_size = 8;
  cfg.head_warmup_epochs = 1;

  SUBCASE("sparsity at one") {
    cfg.s = 1.0;
    CHECK_THROWS_AS(finetune_iis(train, val, cfg), UsageError);
  }
  SUBCASE("negative sparsity") {
    cfg.s = -0.1;
    CHECK_THROWS_AS(finetune_iis(train, val, cfg), UsageError);
  }
  SUBCASE("zero concept dimension") {
    cfg.concept_dim = 0;
    CHECK_THROWS_AS(finetune_iis(train, val, cfg), UsageError);
  }
  SUBCASE("zero epochs") {
    cfg.epochs = 0;
    CHECK_THROWS_AS(finetune_iis(train, val, cfg), UsageError);
  }
  SUBCASE("zero batch size") {
    cfg.batch_size = 0;
    CHECK_THROWS_AS(finetune_iis(train, val, cfg), UsageError);
  }
  SUBCASE("train and val dimensions must match") {
    EmbeddingDataset wide = two_blob(5, 4, 83);
    CHECK_THROWS_AS(finetune_iis(train, wide, cfg), UsageError);
  }
}

TEST_CASE("finetune is bit-deterministic for a fixed seed") {
  EmbeddingDataset train = two_blob(20, 4, 91);
  EmbeddingDataset val = two_blob(8, 4, 92);
  FinetuneConfig cfg;
  cfg.s = 0.2;
  cfg.concept_dim = 6;
  cfg.epochs = 4;
  cfg.batch_size = 16;
  cfg.learning_rate = 1e-3;
  cfg.head_warmup_epochs = 2;
  cfg.seed = 29;

  FinetuneResult a = finetune_iis(train, val, cfg);
  FinetuneResult b = finetune_iis(train, val, cfg);

  REQUIRE(a.trace.size() == b.trace.size());
  for (std::size_t i = 0; i < a.trace.size(); ++i) {
    CHECK(a.trace[i].epoch == b.trace[i].epoch);
    CHECK(a.trace[i].acc_dense == b.trace[i].acc_dense);
    CHECK(a.trace[i].acc_sparse == b.trace[i].acc_sparse);
    CHECK(a.trace[i].ratio == b.trace[i].ratio);
    CHECK(a.trace[i].loss == b.trace[i].loss);
  }
  CHECK(max_abs_diff(a.adapter.params[0], b.adapter.params[0]) == 0.0);
  CHECK(max_abs_diff(a.concept_matrix, b.concept_matrix) == 0.0);
  CHECK(max_abs_diff(a.dense_head.weights, b.dense_head.weights) == 0.0);
  CHECK(max_abs_diff(a.sparse_head.weights, b.sparse_head.weights) == 0.0);
}
