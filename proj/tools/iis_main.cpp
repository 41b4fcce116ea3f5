// Command-line surface: every subcommand resolves its options (flags over
// config file over IIS_SEED over defaults), runs one unit of work, and dumps
// a manifest with the resolved configuration next to its outputs.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "iis/concept_library.hpp"
#include "iis/datastore.hpp"
#include "iis/evaluator.hpp"
#include "iis/finetune.hpp"
#include "iis/head.hpp"
#include "iis/interpret.hpp"
#include "iis/synth.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split_csv(const std::string& csv) {
  std::vector<std::string> parts;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) parts.push_back(item);
  return parts;
}

std::vector<double> parse_double_list(const std::string& csv, const char* what) {
  std::vector<double> out;
  for (const std::string& item : split_csv(csv)) {
    try {
      std::size_t pos = 0;
      out.push_back(std::stod(item, &pos));
      if (pos != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw iis::UsageError(std::string(what) + ": bad number '" + item + "'");
    }
  }
  return out;
}

std::vector<int> parse_int_list(const std::string& csv, const char* what) {
  std::vector<int> out;
  for (double v : parse_double_list(csv, what)) {
    int i = int(v);
    if (double(i) != v) {
      throw iis::UsageError(std::string(what) + ": expected integers");
    }
    out.push_back(i);
  }
  return out;
}

iis::SparsitySchedule resolve_schedule(const std::string& arg,
                                       const iis::ConceptLibrary& lib) {
  if (arg.empty()) {
    if (lib.kind == "text") return iis::text_schedule_for(lib.m());
    return iis::preset_schedule("visual");
  }
  if (iis::is_schedule_preset(arg)) return iis::preset_schedule(arg);
  return iis::load_schedule(arg);
}

void write_manifest(const fs::path& out_dir, const std::string& command,
                    ordered_json options, ordered_json resolved) {
  ordered_json m;
  m["format"] = "iis-manifest";
  m["version"] = 1;
  m["tool_version"] = iis::kToolVersion;
  m["command"] = command;
  m["options"] = std::move(options);
  if (!resolved.empty()) m["resolved"] = std::move(resolved);
  iis::write_json_file(out_dir / "manifest.json", m);
}

// Shared by eval iis / eval curve / eval entropy / train head / explain /
// intervene; not every member is wired into every subcommand.
struct EvalArgs {
  std::string train_path, val_path, test_path, library_path, head_path;
  std::string schedule = "";
  std::string mode = "ascending";
  std::string out = ".";
  double s = 0.5;
  int jobs = 1;
  int epochs = 30;
  int batch_size = 256;
  std::string optimizer = "sgd";
  double lr_decay = 1.0;
  std::string lr_grid = "0.1,0.01,0.001";
  std::uint64_t seed = 0;
};

iis::HeadTrainConfig head_config(const EvalArgs& a) {
  iis::HeadTrainConfig cfg;
  cfg.lr_grid = parse_double_list(a.lr_grid, "--lr-grid");
  cfg.epochs = a.epochs;
  cfg.batch_size = a.batch_size;
  cfg.lr_decay = a.lr_decay;
  if (a.optimizer == "sgd") {
    cfg.optimizer = iis::OptimKind::sgd;
  } else if (a.optimizer == "adam") {
    cfg.optimizer = iis::OptimKind::adam;
  } else {
    throw iis::UsageError("--optimizer: expected sgd or adam");
  }
  return cfg;
}

void add_head_options(CLI::App* cmd, EvalArgs& a) {
  cmd->add_option("--epochs", a.epochs, "Head training epochs");
  cmd->add_option("--batch-size", a.batch_size, "Head training batch size");
  cmd->add_option("--optimizer", a.optimizer, "Head optimizer: sgd or adam");
  cmd->add_option("--lr-decay", a.lr_decay, "Per-epoch learning-rate multiplier");
  cmd->add_option("--lr-grid", a.lr_grid, "Comma list of learning rates to sweep");
}

void add_common(CLI::App* cmd, EvalArgs& a) {
  cmd->add_option("--out", a.out, "Output directory");
  cmd->add_option("--seed", a.seed, "Random seed")->envname("IIS_SEED");
}

ordered_json head_option_json(const EvalArgs& a) {
  ordered_json j;
  j["epochs"] = a.epochs;
  j["batch-size"] = a.batch_size;
  j["optimizer"] = a.optimizer;
  j["lr-decay"] = a.lr_decay;
  j["lr-grid"] = a.lr_grid;
  return j;
}

void run_eval_iis(const EvalArgs& a, bool write_report_file) {
  iis::EmbeddingDataset train = iis::load_embeddings(a.train_path, iis::Split::train);
  iis::EmbeddingDataset val = iis::load_embeddings(a.val_path, iis::Split::val);
  iis::EmbeddingDataset test;
  const iis::EmbeddingDataset* test_ptr = nullptr;
  if (!a.test_path.empty()) {
    test = iis::load_embeddings(a.test_path, iis::Split::test);
    test_ptr = &test;
  }
  iis::ConceptLibrary lib = iis::load_library(a.library_path);
  iis::SparsitySchedule schedule = resolve_schedule(a.schedule, lib);
  iis::SparsifyMode mode = iis::sparsify_mode_from_name(a.mode);

  iis::IisConfig cfg;
  cfg.head = head_config(a);
  cfg.seed = a.seed;
  cfg.jobs = a.jobs;
  iis::IISReport report = iis::compute_iis(train, val, test_ptr, lib, schedule,
                                           mode, cfg);

  const fs::path out(a.out);
  if (write_report_file) iis::save_report(out / "report.json", report);
  iis::write_curve_csv(out / "curve.csv", report);

  ordered_json opts;
  opts["train"] = a.train_path;
  opts["val"] = a.val_path;
  if (!a.test_path.empty()) opts["test"] = a.test_path;
  opts["library"] = a.library_path;
  opts["schedule"] = a.schedule;
  opts["mode"] = a.mode;
  opts["jobs"] = a.jobs;
  opts.update(head_option_json(a));
  opts["seed"] = a.seed;
  opts["out"] = a.out;
  ordered_json resolved;
  resolved["schedule_ratios"] = schedule.ratios;
  resolved["iis"] = report.iis;
  write_manifest(out, write_report_file ? "eval iis" : "eval curve",
                 std::move(opts), std::move(resolved));

  std::cout << "iis " << fmt_double(report.iis) << " (" << report.mode << ", "
            << report.library_kind << " library, m=" << report.library_m
            << ")\n";
}

void run_eval_entropy(const EvalArgs& a) {
  iis::EmbeddingDataset val = iis::load_embeddings(a.val_path, iis::Split::val);
  iis::ConceptLibrary lib = iis::load_library(a.library_path);
  iis::LinearHead head = iis::load_head(a.head_path);
  iis::SparsifyMode mode = iis::sparsify_mode_from_name(a.mode);
  iis::ConceptGrouping grouping;
  const iis::ConceptGrouping* gptr = nullptr;
  if (mode == iis::SparsifyMode::clustering) {
    grouping = iis::cluster_concepts(lib, a.s, a.seed);
    gptr = &grouping;
  }
  iis::ContributionResult res =
      iis::contribution_matrix(val, lib, head, a.s, mode, gptr);

  ordered_json j;
  j["format"] = "iis-entropy";
  j["version"] = 1;
  j["concepts"] = res.concept_names;
  std::vector<double> ent(res.class_entropy.data(),
                          res.class_entropy.data() + res.class_entropy.size());
  j["class_entropy"] = ent;
  j["empty_classes"] = res.empty_classes;
  ordered_json rows = ordered_json::array();
  for (Eigen::Index r = 0; r < res.contributions.rows(); ++r) {
    ordered_json row = ordered_json::array();
    for (Eigen::Index c = 0; c < res.contributions.cols(); ++c) {
      row.push_back(res.contributions(r, c));
    }
    rows.push_back(std::move(row));
  }
  j["contributions"] = std::move(rows);

  const fs::path out(a.out);
  iis::write_json_file(out / "entropy.json", j);

  ordered_json opts;
  opts["val"] = a.val_path;
  opts["library"] = a.library_path;
  opts["head"] = a.head_path;
  opts["s"] = a.s;
  opts["mode"] = a.mode;
  opts["seed"] = a.seed;
  opts["out"] = a.out;
  write_manifest(out, "eval entropy", std::move(opts), {});

  for (Eigen::Index k = 0; k < res.class_entropy.size(); ++k) {
    std::cout << "class " << k << " entropy " << fmt_double(res.class_entropy[k])
              << "\n";
  }
}

void run_train_head(const EvalArgs& a) {
  iis::EmbeddingDataset train = iis::load_embeddings(a.train_path, iis::Split::train);
  iis::EmbeddingDataset val = iis::load_embeddings(a.val_path, iis::Split::val);

  Eigen::MatrixXd train_x = train.embeddings;
  Eigen::MatrixXd val_x = val.embeddings;
  iis::HeadInputKind kind = iis::HeadInputKind::representation;
  if (!a.library_path.empty()) {
    iis::ConceptLibrary lib = iis::load_library(a.library_path);
    iis::SparsifyMode mode = iis::sparsify_mode_from_name(a.mode);
    iis::ConceptGrouping grouping;
    const iis::ConceptGrouping* gptr = nullptr;
    if (mode == iis::SparsifyMode::clustering) {
      grouping = iis::cluster_concepts(lib, a.s, a.seed);
      gptr = &grouping;
    }
    train_x = iis::sparsify_batch(iis::project_batch(train.embeddings, lib),
                                  a.s, mode, gptr);
    val_x = iis::sparsify_batch(iis::project_batch(val.embeddings, lib), a.s,
                                mode, gptr);
    kind = iis::HeadInputKind::interpretation;
  }

  iis::LinearHead head =
      iis::train_head(train_x, train.labels, train.n_classes, val_x, val.labels,
                      head_config(a), kind, a.seed);

  const fs::path out(a.out);
  iis::save_head(out / "head.json", head);

  ordered_json opts;
  opts["train"] = a.train_path;
  opts["val"] = a.val_path;
  if (!a.library_path.empty()) {
    opts["library"] = a.library_path;
    opts["s"] = a.s;
    opts["mode"] = a.mode;
  }
  opts.update(head_option_json(a));
  opts["seed"] = a.seed;
  opts["out"] = a.out;
  ordered_json resolved;
  resolved["val_accuracy"] = head.val_accuracy;
  resolved["best_learning_rate"] = head.best_learning_rate;
  write_manifest(out, "train head", std::move(opts), std::move(resolved));

  std::cout << "val accuracy " << fmt_double(head.val_accuracy)
            << " (lr " << fmt_double(head.best_learning_rate) << ")\n";
}

struct SampleArgs {
  EvalArgs base;
  long index = 0;
  int top_k = 5;
  std::string zero;
};

Eigen::VectorXd pick_sample(const iis::EmbeddingDataset& ds, long index) {
  if (index < 0 || index >= long(ds.embeddings.rows())) {
    throw iis::UsageError("--index out of range");
  }
  return ds.embeddings.row(index).transpose();
}

void run_explain(const SampleArgs& sa) {
  const EvalArgs& a = sa.base;
  iis::EmbeddingDataset ds = iis::load_embeddings(a.val_path, iis::Split::val);
  iis::ConceptLibrary lib = iis::load_library(a.library_path);
  iis::LinearHead head = iis::load_head(a.head_path);
  iis::SparsifyMode mode = iis::sparsify_mode_from_name(a.mode);
  iis::ConceptGrouping grouping;
  const iis::ConceptGrouping* gptr = nullptr;
  if (mode == iis::SparsifyMode::clustering) {
    grouping = iis::cluster_concepts(lib, a.s, a.seed);
    gptr = &grouping;
  }
  Eigen::VectorXd x = pick_sample(ds, sa.index);
  iis::Explanation ex = iis::explain(x, lib, head, a.s, mode, sa.top_k, gptr);

  ordered_json j;
  j["format"] = "iis-explanation";
  j["version"] = 1;
  j["index"] = sa.index;
  j["predicted"] = ex.predicted;
  j["k_clamped"] = ex.k_clamped;
  ordered_json top = ordered_json::array();
  for (const iis::ConceptContribution& c : ex.top) {
    ordered_json e;
    e["name"] = c.name;
    e["index"] = c.index;
    e["contribution"] = c.contribution;
    top.push_back(std::move(e));
  }
  j["top"] = std::move(top);

  const fs::path out(a.out);
  iis::write_json_file(out / "explain.json", j);

  ordered_json opts;
  opts["val"] = a.val_path;
  opts["library"] = a.library_path;
  opts["head"] = a.head_path;
  opts["index"] = sa.index;
  opts["top-k"] = sa.top_k;
  opts["s"] = a.s;
  opts["mode"] = a.mode;
  opts["seed"] = a.seed;
  opts["out"] = a.out;
  write_manifest(out, "explain", std::move(opts), {});

  std::cout << "sample " << sa.index << " predicted class " << ex.predicted
            << "\n";
  for (const iis::ConceptContribution& c : ex.top) {
    std::cout << "  " << c.name << " (" << c.index << ") "
              << fmt_double(c.contribution) << "\n";
  }
}

void run_intervene(const SampleArgs& sa) {
  const EvalArgs& a = sa.base;
  iis::EmbeddingDataset ds = iis::load_embeddings(a.val_path, iis::Split::val);
  iis::ConceptLibrary lib = iis::load_library(a.library_path);
  iis::LinearHead head = iis::load_head(a.head_path);
  iis::SparsifyMode mode = iis::sparsify_mode_from_name(a.mode);
  iis::ConceptGrouping grouping;
  const iis::ConceptGrouping* gptr = nullptr;
  if (mode == iis::SparsifyMode::clustering) {
    grouping = iis::cluster_concepts(lib, a.s, a.seed);
    gptr = &grouping;
  }
  Eigen::VectorXd x = pick_sample(ds, sa.index);
  std::vector<int> zeros = parse_int_list(sa.zero, "--zero");
  iis::Intervention iv = iis::intervene(x, lib, head, a.s, mode, zeros, gptr);

  ordered_json j;
  j["format"] = "iis-intervention";
  j["version"] = 1;
  j["index"] = sa.index;
  j["zeroed"] = zeros;
  j["predicted_before"] = iv.predicted_before;
  j["predicted_after"] = iv.predicted_after;
  std::vector<double> lb(iv.logits_before.data(),
                         iv.logits_before.data() + iv.logits_before.size());
  std::vector<double> la(iv.logits_after.data(),
                         iv.logits_after.data() + iv.logits_after.size());
  j["logits_before"] = lb;
  j["logits_after"] = la;

  const fs::path out(a.out);
  iis::write_json_file(out / "intervene.json", j);

  ordered_json opts;
  opts["val"] = a.val_path;
  opts["library"] = a.library_path;
  opts["head"] = a.head_path;
  opts["index"] = sa.index;
  opts["zero"] = sa.zero;
  opts["s"] = a.s;
  opts["mode"] = a.mode;
  opts["seed"] = a.seed;
  opts["out"] = a.out;
  write_manifest(out, "intervene", std::move(opts), {});

  std::cout << "predicted " << iv.predicted_before << " -> "
            << iv.predicted_after << "\n";
}

struct BuildArgs {
  std::string patches_path, train_path;
  std::string kind = "prototype";
  std::string out = ".";
  long m = 16;
  int patches_per_class = 0;  // 0: largest count every class can supply
  int epochs = 60;
  int batch_size = 128;
  double learning_rate = 0.01;
  double temperature = 1.0;
  std::uint64_t seed = 0;
};

void run_concepts_build(const BuildArgs& a) {
  iis::EmbeddingDataset patches =
      iis::load_embeddings(a.patches_path, iis::Split::train);

  int per_class = a.patches_per_class;
  if (per_class <= 0) {
    std::vector<int> counts(std::size_t(patches.n_classes), 0);
    for (int c : patches.labels) counts[std::size_t(c)]++;
    per_class = *std::min_element(counts.begin(), counts.end());
    if (per_class <= 0) {
      throw iis::DataError(iis::DataCode::invariant,
                           "patch pool: a class has no patches");
    }
  }
  iis::RandomSource rng(a.seed);
  iis::RandomSource pool_rng = rng.fork(0);
  iis::PatchPool pool =
      iis::make_patch_pool(patches.embeddings, patches.labels,
                           patches.n_classes, per_class, pool_rng);

  iis::ConceptLibrary lib;
  if (a.kind == "prototype") {
    iis::RandomSource r = rng.fork(1);
    lib = iis::build_prototype(pool, a.m, r);
  } else if (a.kind == "cluster") {
    iis::RandomSource r = rng.fork(1);
    lib = iis::build_cluster(pool, a.m, r);
  } else if (a.kind == "end2end") {
    if (a.train_path.empty()) {
      throw iis::UsageError("concepts build --kind end2end requires --train");
    }
    iis::EmbeddingDataset train =
        iis::load_embeddings(a.train_path, iis::Split::train);
    iis::End2EndConfig cfg;
    cfg.epochs = a.epochs;
    cfg.batch_size = a.batch_size;
    cfg.learning_rate = a.learning_rate;
    cfg.temperature = a.temperature;
    cfg.seed = a.seed;
    lib = iis::build_end2end(pool, train, a.m, cfg).library;
  } else {
    throw iis::UsageError("--kind: expected prototype, cluster, or end2end");
  }

  const fs::path out(a.out);
  iis::save_library(out / "library.json", lib);

  ordered_json opts;
  opts["patches"] = a.patches_path;
  if (!a.train_path.empty()) opts["train"] = a.train_path;
  opts["kind"] = a.kind;
  opts["m"] = a.m;
  opts["patches-per-class"] = a.patches_per_class;
  if (a.kind == "end2end") {
    opts["epochs"] = a.epochs;
    opts["batch-size"] = a.batch_size;
    opts["lr"] = a.learning_rate;
    opts["temperature"] = a.temperature;
  }
  opts["seed"] = a.seed;
  opts["out"] = a.out;
  ordered_json resolved;
  resolved["m_built"] = long(lib.m());
  resolved["patches_per_class_used"] = per_class;
  write_manifest(out, "concepts build", std::move(opts), std::move(resolved));

  std::cout << "built " << lib.kind << " library with " << lib.m()
            << " concepts\n";
}

struct FitTextArgs {
  std::string train_path, soft_path;
  std::string loss = "mse";
  std::string out = ".";
  double lambda = 1e-4;
  bool raw = false;            // skip input/output normalization
  bool fit_intercept = false;
  int cos_epochs = 200;
  double cos_learning_rate = 0.05;
  std::uint64_t seed = 0;
};

void run_fit_text(const FitTextArgs& a) {
  iis::EmbeddingDataset train = iis::load_embeddings(a.train_path, iis::Split::train);
  iis::SoftLabelMatrix soft = iis::load_soft_labels(a.soft_path);

  iis::TextFitConfig cfg;
  if (a.loss == "mse") {
    cfg.loss = iis::TextLoss::mse;
  } else if (a.loss == "cos3") {
    cfg.loss = iis::TextLoss::cos_cubed;
  } else {
    throw iis::UsageError("--loss: expected mse or cos3");
  }
  cfg.lambda = a.lambda;
  cfg.normalize = !a.raw;
  cfg.fit_intercept = a.fit_intercept;
  cfg.cos_epochs = a.cos_epochs;
  cfg.cos_learning_rate = a.cos_learning_rate;
  cfg.seed = a.seed;
  iis::ConceptLibrary lib = iis::fit_text_concepts(train, soft, cfg);

  const fs::path out(a.out);
  iis::save_library(out / "library.json", lib);

  ordered_json opts;
  opts["train"] = a.train_path;
  opts["soft-labels"] = a.soft_path;
  opts["loss"] = a.loss;
  opts["lambda"] = a.lambda;
  opts["raw"] = a.raw;
  opts["fit-intercept"] = a.fit_intercept;
  if (a.loss == "cos3") {
    opts["cos-epochs"] = a.cos_epochs;
    opts["cos-lr"] = a.cos_learning_rate;
  }
  opts["seed"] = a.seed;
  opts["out"] = a.out;
  write_manifest(out, "concepts fit-text", std::move(opts), {});

  std::cout << "fit " << lib.m() << " text concepts\n";
}

struct FinetuneArgs {
  std::string train_path, val_path, test_path;
  std::string library_path;    // with a schedule: score snapshots afterwards
  std::string schedule = "";
  std::string mode = "ascending";
  std::string adapter = "linear";
  std::string snapshot_epochs;
  std::string out = ".";
  double s = 0.1;
  long ml = 200;
  int epochs = 100;
  int batch_size = 128;
  double learning_rate = 3e-4;
  double weight_decay = 0.3;
  double warmup_frac = 0.1;
  int head_warmup_epochs = 5;
  bool identity_concepts = false;
  bool freeze_concepts = false;
  int jobs = 1;
  std::uint64_t seed = 0;
};

void run_finetune(const FinetuneArgs& a) {
  iis::EmbeddingDataset train = iis::load_embeddings(a.train_path, iis::Split::train);
  iis::EmbeddingDataset val = iis::load_embeddings(a.val_path, iis::Split::val);

  iis::FinetuneConfig cfg;
  cfg.s = a.s;
  cfg.concept_dim = a.ml;
  if (a.adapter == "linear") {
    cfg.adapter = iis::AdapterKind::linear;
  } else if (a.adapter == "mlp") {
    cfg.adapter = iis::AdapterKind::mlp;
  } else {
    throw iis::UsageError("--adapter: expected linear or mlp");
  }
  cfg.identity_concepts = a.identity_concepts;
  cfg.freeze_concepts = a.freeze_concepts;
  cfg.epochs = a.epochs;
  cfg.batch_size = a.batch_size;
  cfg.learning_rate = a.learning_rate;
  cfg.weight_decay = a.weight_decay;
  cfg.warmup_frac = a.warmup_frac;
  cfg.head_warmup_epochs = a.head_warmup_epochs;
  if (!a.snapshot_epochs.empty()) {
    cfg.snapshot_epochs = parse_int_list(a.snapshot_epochs, "--snapshot-epochs");
  }
  cfg.seed = a.seed;

  iis::FinetuneResult result = iis::finetune_iis(train, val, cfg);
  if (result.diverged) {
    throw iis::NumericError("finetune diverged: joint loss stayed above 10x "
                            "the warm-state loss for three epochs");
  }

  const fs::path out(a.out);
  iis::write_trace_csv(out / "trace.csv", result.trace);
  iis::save_head(out / "dense_head.json", result.dense_head);
  iis::save_head(out / "sparse_head.json", result.sparse_head);
  iis::save_matrix_file(out / "concept_matrix.iise", result.concept_matrix);

  if (!a.library_path.empty()) {
    iis::EmbeddingDataset test;
    const iis::EmbeddingDataset* test_ptr = nullptr;
    if (!a.test_path.empty()) {
      test = iis::load_embeddings(a.test_path, iis::Split::test);
      test_ptr = &test;
    }
    iis::ConceptLibrary lib = iis::load_library(a.library_path);
    iis::SparsitySchedule schedule = resolve_schedule(a.schedule, lib);
    iis::SparsifyMode mode = iis::sparsify_mode_from_name(a.mode);
    iis::IisConfig icfg;
    icfg.seed = a.seed;
    icfg.jobs = a.jobs;
    std::vector<iis::AlignmentRow> rows = iis::track_iis_alignment(
        result, train, val, test_ptr, lib, schedule, mode, icfg);
    std::string csv = "epoch,accuracy,simplified_iis,original_iis\n";
    for (const iis::AlignmentRow& r : rows) {
      csv += std::to_string(r.epoch) + ',' + fmt_double(r.accuracy) + ',' +
             fmt_double(r.simplified_iis) + ',' + fmt_double(r.original_iis) +
             '\n';
    }
    std::ofstream f(out / "alignment.csv", std::ios::trunc);
    if (!f) {
      throw iis::DataError(iis::DataCode::io, "cannot write alignment.csv");
    }
    f << csv;
  }

  ordered_json opts;
  opts["train"] = a.train_path;
  opts["val"] = a.val_path;
  if (!a.test_path.empty()) opts["test"] = a.test_path;
  if (!a.library_path.empty()) {
    opts["library"] = a.library_path;
    opts["schedule"] = a.schedule;
    opts["mode"] = a.mode;
    opts["jobs"] = a.jobs;
  }
  opts["s"] = a.s;
  opts["ml"] = a.ml;
  opts["adapter"] = a.adapter;
  opts["epochs"] = a.epochs;
  opts["batch-size"] = a.batch_size;
  opts["lr"] = a.learning_rate;
  opts["weight-decay"] = a.weight_decay;
  opts["warmup-frac"] = a.warmup_frac;
  opts["head-warmup-epochs"] = a.head_warmup_epochs;
  opts["identity-concepts"] = a.identity_concepts;
  opts["freeze-concepts"] = a.freeze_concepts;
  if (!a.snapshot_epochs.empty()) opts["snapshot-epochs"] = a.snapshot_epochs;
  opts["seed"] = a.seed;
  opts["out"] = a.out;
  ordered_json resolved;
  const iis::TraceRow& first = result.trace.front();
  const iis::TraceRow& last = result.trace.back();
  resolved["initial_ratio"] = first.ratio;
  resolved["final_ratio"] = last.ratio;
  resolved["final_acc_dense"] = last.acc_dense;
  resolved["final_acc_sparse"] = last.acc_sparse;
  write_manifest(out, "finetune", std::move(opts), std::move(resolved));

  std::cout << "ratio " << fmt_double(first.ratio) << " -> "
            << fmt_double(last.ratio) << " over " << (result.trace.size() - 1)
            << " epochs\n";
}

struct SynthArgs {
  std::string out = ".";
  long dim = 32;
  int classes = 5;
  long m = 8;
  int train_per_class = 200;
  int val_per_class = 100;
  int test_per_class = 100;
  double rho = 1.0;
  double sigma = 0.35;
  std::uint64_t seed = 0;
};

void run_synth_gen(const SynthArgs& a) {
  iis::SynthSpec spec;
  spec.dim = a.dim;
  spec.n_classes = a.classes;
  spec.m_concepts = a.m;
  spec.train_per_class = a.train_per_class;
  spec.val_per_class = a.val_per_class;
  spec.test_per_class = a.test_per_class;
  spec.rho = a.rho;
  spec.sigma = a.sigma;
  spec.seed = a.seed;
  iis::SynthCorpus corpus = iis::generate(spec);

  const fs::path out(a.out);
  iis::save_embeddings(out / "train.iise", corpus.train);
  iis::save_embeddings(out / "val.iise", corpus.val);
  iis::save_embeddings(out / "test.iise", corpus.test);
  iis::save_library(out / "library.json", corpus.library);

  ordered_json opts;
  opts["dim"] = a.dim;
  opts["classes"] = a.classes;
  opts["m"] = a.m;
  opts["train-per-class"] = a.train_per_class;
  opts["val-per-class"] = a.val_per_class;
  opts["test-per-class"] = a.test_per_class;
  opts["rho"] = a.rho;
  opts["sigma"] = a.sigma;
  opts["seed"] = a.seed;
  opts["out"] = a.out;
  ordered_json resolved;
  resolved["bayes_accuracy"] = corpus.bayes_accuracy;
  write_manifest(out, "synth gen", std::move(opts), std::move(resolved));

  std::cout << "generated rho=" << fmt_double(a.rho) << " corpus, bayes accuracy "
            << fmt_double(corpus.bayes_accuracy) << "\n";
}

// Config file support: a flat JSON object (or the "options" block of a
// manifest) is turned into flags and spliced in right after the subcommand
// tokens, so explicit flags win under the take-last policy.
std::vector<std::string> config_flags(const fs::path& path) {
  ordered_json j = iis::read_json_file(path);
  if (j.contains("options") && j["options"].is_object()) j = j["options"];
  if (!j.is_object()) {
    throw iis::UsageError("config: expected a flat JSON object");
  }
  std::vector<std::string> flags;
  for (const auto& [key, value] : j.items()) {
    if (key == "config") continue;
    const std::string flag = "--" + key;
    if (value.is_boolean()) {
      flags.push_back(flag + (value.get<bool>() ? "=true" : "=false"));
    } else if (value.is_string()) {
      flags.push_back(flag);
      flags.push_back(value.get<std::string>());
    } else if (value.is_number_unsigned()) {
      flags.push_back(flag);
      flags.push_back(std::to_string(value.get<std::uint64_t>()));
    } else if (value.is_number_integer()) {
      flags.push_back(flag);
      flags.push_back(std::to_string(value.get<std::int64_t>()));
    } else if (value.is_number_float()) {
      flags.push_back(flag);
      flags.push_back(fmt_double(value.get<double>()));
    } else {
      throw iis::UsageError("config: key '" + key + "' is not a scalar");
    }
  }
  return flags;
}

std::vector<std::string> overlay_config(std::vector<std::string> args) {
  std::string config_path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      config_path = args[i + 1];
    } else if (args[i].rfind("--config=", 0) == 0) {
      config_path = args[i].substr(9);
    }
  }
  if (config_path.empty()) return args;
  std::vector<std::string> flags = config_flags(config_path);
  std::size_t at = 0;  // keep subcommand tokens (no positionals elsewhere)
  while (at < args.size() && !args[at].empty() && args[at][0] != '-') ++at;
  args.insert(args.begin() + long(at), flags.begin(), flags.end());
  return args;
}

int run(int argc, char** argv) {
  CLI::App app{"Inherent interpretability scoring for stored embeddings"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  app.fallthrough();  // --config may appear after the subcommand tokens
  app.set_version_flag("--version", iis::kToolVersion);

  std::string config_path;  // consumed in overlay_config; accepted anywhere
  app.add_option("--config", config_path,
                 "Flat JSON config file; explicit flags override it");

  BuildArgs build;
  FitTextArgs fit;
  EvalArgs eval_iis, eval_curve, eval_entropy, train_head_args;
  SampleArgs explain_args, intervene_args;
  FinetuneArgs ft;
  SynthArgs synth;

  CLI::App* concepts = app.add_subcommand("concepts", "Build concept libraries");
  concepts->require_subcommand(1);
  CLI::App* cb = concepts->add_subcommand(
      "build", "Build a library from labeled patch embeddings");
  cb->add_option("--patches", build.patches_path,
                 "Patch embeddings (labels are patch classes)")->required();
  cb->add_option("--train", build.train_path,
                 "Training embeddings (end2end only)");
  cb->add_option("--kind", build.kind, "prototype, cluster, or end2end");
  cb->add_option("--m", build.m, "Number of concepts");
  cb->add_option("--patches-per-class", build.patches_per_class,
                 "Pool size per class (0: largest feasible)");
  cb->add_option("--epochs", build.epochs, "end2end training epochs");
  cb->add_option("--batch-size", build.batch_size, "end2end batch size");
  cb->add_option("--lr", build.learning_rate, "end2end learning rate");
  cb->add_option("--temperature", build.temperature, "Gumbel temperature");
  cb->add_option("--out", build.out, "Output directory");
  cb->add_option("--seed", build.seed, "Random seed")->envname("IIS_SEED");
  cb->callback([&] { run_concepts_build(build); });

  CLI::App* cf = concepts->add_subcommand(
      "fit-text", "Regress soft labels onto embeddings");
  cf->add_option("--train", fit.train_path, "Training embeddings")->required();
  cf->add_option("--soft-labels", fit.soft_path, "Soft-label matrix")->required();
  cf->add_option("--loss", fit.loss, "mse or cos3");
  cf->add_option("--lambda", fit.lambda, "Ridge strength (mse)");
  cf->add_flag("--raw", fit.raw, "Skip input/concept normalization");
  cf->add_flag("--fit-intercept", fit.fit_intercept,
               "Absorb score offsets with a discarded bias column");
  cf->add_option("--cos-epochs", fit.cos_epochs, "cos3 ascent epochs");
  cf->add_option("--cos-lr", fit.cos_learning_rate, "cos3 learning rate");
  cf->add_option("--out", fit.out, "Output directory");
  cf->add_option("--seed", fit.seed, "Random seed")->envname("IIS_SEED");
  cf->callback([&] { run_fit_text(fit); });

  CLI::App* eval = app.add_subcommand("eval", "Score representations");
  eval->require_subcommand(1);
  CLI::App* ei = eval->add_subcommand("iis", "Full report plus curve CSV");
  ei->add_option("--train", eval_iis.train_path, "Training embeddings")->required();
  ei->add_option("--val", eval_iis.val_path, "Validation embeddings")->required();
  ei->add_option("--test", eval_iis.test_path, "Test embeddings (optional)");
  ei->add_option("--library", eval_iis.library_path, "Concept library")->required();
  ei->add_option("--schedule", eval_iis.schedule,
                 "Schedule file or preset (default by library kind)");
  ei->add_option("--mode", eval_iis.mode, "Sparsification mode");
  ei->add_option("--jobs", eval_iis.jobs, "Parallel ratio workers");
  add_head_options(ei, eval_iis);
  add_common(ei, eval_iis);
  ei->callback([&] { run_eval_iis(eval_iis, true); });

  CLI::App* ec = eval->add_subcommand("curve", "Sparsity-ARR curve CSV only");
  ec->add_option("--train", eval_curve.train_path, "Training embeddings")->required();
  ec->add_option("--val", eval_curve.val_path, "Validation embeddings")->required();
  ec->add_option("--test", eval_curve.test_path, "Test embeddings (optional)");
  ec->add_option("--library", eval_curve.library_path, "Concept library")->required();
  ec->add_option("--schedule", eval_curve.schedule,
                 "Schedule file or preset (default by library kind)");
  ec->add_option("--mode", eval_curve.mode, "Sparsification mode");
  ec->add_option("--jobs", eval_curve.jobs, "Parallel ratio workers");
  add_head_options(ec, eval_curve);
  add_common(ec, eval_curve);
  ec->callback([&] { run_eval_iis(eval_curve, false); });

  CLI::App* ee = eval->add_subcommand("entropy",
                                      "Concept-class contribution entropy");
  ee->add_option("--val", eval_entropy.val_path, "Validation embeddings")->required();
  ee->add_option("--library", eval_entropy.library_path, "Concept library")->required();
  ee->add_option("--head", eval_entropy.head_path, "Interpretation head")->required();
  ee->add_option("--s", eval_entropy.s, "Sparsity ratio");
  ee->add_option("--mode", eval_entropy.mode, "Sparsification mode");
  add_common(ee, eval_entropy);
  ee->callback([&] { run_eval_entropy(eval_entropy); });

  CLI::App* train = app.add_subcommand("train", "Train probes");
  train->require_subcommand(1);
  CLI::App* th = train->add_subcommand("head", "Linear probe over a lr grid");
  th->add_option("--train", train_head_args.train_path, "Training embeddings")
      ->required();
  th->add_option("--val", train_head_args.val_path, "Validation embeddings")
      ->required();
  th->add_option("--library", train_head_args.library_path,
                 "Train on interpretations of this library instead of raw "
                 "embeddings");
  th->add_option("--s", train_head_args.s, "Sparsity ratio (with --library)");
  th->add_option("--mode", train_head_args.mode,
                 "Sparsification mode (with --library)");
  add_head_options(th, train_head_args);
  add_common(th, train_head_args);
  th->callback([&] { run_train_head(train_head_args); });

  CLI::App* ex = app.add_subcommand("explain",
                                    "Top concept contributions for a sample");
  ex->add_option("--val", explain_args.base.val_path, "Embeddings to explain")
      ->required();
  ex->add_option("--library", explain_args.base.library_path, "Concept library")
      ->required();
  ex->add_option("--head", explain_args.base.head_path, "Interpretation head")
      ->required();
  ex->add_option("--index", explain_args.index, "Sample row");
  ex->add_option("--top-k", explain_args.top_k, "Concepts to list");
  ex->add_option("--s", explain_args.base.s, "Sparsity ratio");
  ex->add_option("--mode", explain_args.base.mode, "Sparsification mode");
  add_common(ex, explain_args.base);
  ex->callback([&] { run_explain(explain_args); });

  CLI::App* iv = app.add_subcommand(
      "intervene", "Zero interpretation coordinates and re-predict");
  iv->add_option("--val", intervene_args.base.val_path, "Embeddings")->required();
  iv->add_option("--library", intervene_args.base.library_path, "Concept library")
      ->required();
  iv->add_option("--head", intervene_args.base.head_path, "Interpretation head")
      ->required();
  iv->add_option("--index", intervene_args.index, "Sample row");
  iv->add_option("--zero", intervene_args.zero, "Comma list of coordinates")
      ->required();
  iv->add_option("--s", intervene_args.base.s, "Sparsity ratio");
  iv->add_option("--mode", intervene_args.base.mode, "Sparsification mode");
  add_common(iv, intervene_args.base);
  iv->callback([&] { run_intervene(intervene_args); });

  CLI::App* ft_cmd = app.add_subcommand(
      "finetune", "Maximize the simplified score over an adapter");
  ft_cmd->add_option("--train", ft.train_path, "Training embeddings")->required();
  ft_cmd->add_option("--val", ft.val_path, "Validation embeddings")->required();
  ft_cmd->add_option("--test", ft.test_path, "Test embeddings (alignment)");
  ft_cmd->add_option("--library", ft.library_path,
                     "Score snapshots against this library afterwards");
  ft_cmd->add_option("--schedule", ft.schedule, "Alignment schedule");
  ft_cmd->add_option("--mode", ft.mode, "Alignment sparsification mode");
  ft_cmd->add_option("--s", ft.s, "Fixed sparsity of the surrogate term");
  ft_cmd->add_option("--ml", ft.ml, "Learnable concept count M_l");
  ft_cmd->add_option("--adapter", ft.adapter, "linear or mlp");
  ft_cmd->add_option("--epochs", ft.epochs, "Joint training epochs");
  ft_cmd->add_option("--batch-size", ft.batch_size, "Batch size");
  ft_cmd->add_option("--lr", ft.learning_rate, "Peak learning rate");
  ft_cmd->add_option("--weight-decay", ft.weight_decay, "Decoupled weight decay");
  ft_cmd->add_option("--warmup-frac", ft.warmup_frac, "Warmup fraction");
  ft_cmd->add_option("--head-warmup-epochs", ft.head_warmup_epochs,
                     "Head pre-fit epochs before the joint loop");
  ft_cmd->add_flag("--identity-concepts", ft.identity_concepts,
                   "Start C_l as an identity-like map");
  ft_cmd->add_flag("--freeze-concepts", ft.freeze_concepts, "Do not train C_l");
  ft_cmd->add_option("--snapshot-epochs", ft.snapshot_epochs,
                     "Comma list of extra snapshot epochs");
  ft_cmd->add_option("--jobs", ft.jobs, "Alignment ratio workers");
  ft_cmd->add_option("--out", ft.out, "Output directory");
  ft_cmd->add_option("--seed", ft.seed, "Random seed")->envname("IIS_SEED");
  ft_cmd->callback([&] { run_finetune(ft); });

  CLI::App* sg = app.add_subcommand("synth", "Synthetic corpora");
  sg->require_subcommand(1);
  CLI::App* gen = sg->add_subcommand("gen", "Generate a planted-concept corpus");
  gen->add_option("--dim", synth.dim, "Embedding dimension");
  gen->add_option("--classes", synth.classes, "Class count");
  gen->add_option("--m", synth.m, "Planted concept count");
  gen->add_option("--train-per-class", synth.train_per_class, "Train samples");
  gen->add_option("--val-per-class", synth.val_per_class, "Validation samples");
  gen->add_option("--test-per-class", synth.test_per_class, "Test samples");
  gen->add_option("--rho", synth.rho, "Interpretable energy fraction");
  gen->add_option("--sigma", synth.sigma, "Noise scale");
  gen->add_option("--out", synth.out, "Output directory");
  gen->add_option("--seed", synth.seed, "Random seed")->envname("IIS_SEED");
  gen->callback([&] { run_synth_gen(synth); });

  std::vector<std::string> args =
      overlay_config(std::vector<std::string>(argv + 1, argv + argc));
  std::reverse(args.begin(), args.end());
  try {
    app.parse(std::move(args));
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const iis::UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const iis::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const iis::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
