#include "iis/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>

#include "iis/interpret.hpp"
#include "iis/numerics.hpp"

namespace iis {

Adapter Adapter::identity_linear(Eigen::Index d) {
  Adapter a;
  a.kind = AdapterKind::linear;
  a.params = {Eigen::MatrixXd::Identity(d, d)};
  return a;
}

Adapter Adapter::make_mlp(Eigen::Index d, RandomSource& rng) {
  Adapter a;
  a.kind = AdapterKind::mlp;
  const double scale = std::sqrt(2.0 / double(d));
  a.params = {scale * rng.gaussian(d, d), Eigen::MatrixXd::Zero(1, d),
              scale * rng.gaussian(d, d), Eigen::MatrixXd::Zero(1, d)};
  return a;
}

Eigen::MatrixXd Adapter::apply(const Eigen::Ref<const Eigen::MatrixXd>& x) const {
  if (kind == AdapterKind::linear) {
    return x * params[0];
  }
  Eigen::MatrixXd h = x * params[0];
  h.rowwise() += params[1].row(0);
  h = h.cwiseMax(0.0);
  Eigen::MatrixXd out = h * params[2];
  out.rowwise() += params[3].row(0);
  return out;
}

ad::Value Adapter::apply_graph(ad::Tape& t, const std::vector<ad::Value>& leaves,
                               ad::Value x) const {
  if (kind == AdapterKind::linear) {
    return t.matmul(x, leaves[0]);
  }
  ad::Value h = t.relu(t.add_row(t.matmul(x, leaves[0]), leaves[1]));
  return t.add_row(t.matmul(h, leaves[2]), leaves[3]);
}

namespace {

std::size_t adapter_param_count(AdapterKind kind) {
  return kind == AdapterKind::linear ? 1 : 4;
}

LinearHead wrap_head(const Eigen::MatrixXd& w, const Eigen::MatrixXd& b,
                     HeadInputKind kind, int n_classes, std::uint64_t seed) {
  LinearHead head;
  head.weights = w;
  head.bias = b.row(0).transpose();
  head.input_kind = kind;
  head.n_classes = n_classes;
  head.seed = seed;
  return head;
}

Eigen::MatrixXd sparse_features(const Eigen::Ref<const Eigen::MatrixXd>& fx,
                                const Eigen::MatrixXd& cl, double s) {
  return sparsify_batch(fx * cl, s, SparsifyMode::ascending);
}

}  // namespace

ad::Value joint_objective_graph(ad::Tape& t, AdapterKind kind,
                                const std::vector<ad::Value>& leaves,
                                const Eigen::MatrixXd& x,
                                const std::vector<int>& y, double s,
                                const Eigen::VectorXd* frozen_cutoffs) {
  const std::size_t na = adapter_param_count(kind);
  if (leaves.size() != na + 5) {
    throw UsageError("joint objective: wrong leaf count for adapter kind");
  }
  Adapter shape;
  shape.kind = kind;
  ad::Value fx = shape.apply_graph(
      t, std::vector<ad::Value>(leaves.begin(), leaves.begin() + long(na)),
      t.constant(x));
  ad::Value cl = leaves[na];
  ad::Value wh = leaves[na + 1], bh = leaves[na + 2];
  ad::Value wg = leaves[na + 3], bg = leaves[na + 4];

  ad::Value dense_logits = t.add_row(t.matmul(fx, wh), bh);
  ad::Value dense_loss = t.softmax_cross_entropy(dense_logits, y);

  ad::Value proj = t.matmul(fx, cl);
  ad::Value sparse = t.soft_threshold_rows(proj, s, frozen_cutoffs);
  ad::Value sparse_logits = t.add_row(t.matmul(sparse, wg), bg);
  ad::Value sparse_loss = t.softmax_cross_entropy(sparse_logits, y);

  return t.add(dense_loss, sparse_loss);
}

FinetuneResult finetune_iis(const EmbeddingDataset& train,
                            const EmbeddingDataset& val,
                            const FinetuneConfig& cfg) {
  validate_embeddings(train);
  validate_embeddings(val);
  if (val.embeddings.cols() != train.embeddings.cols()) {
    throw UsageError("finetune: train/val dimension mismatch");
  }
  if (!(cfg.s >= 0.0 && cfg.s < 1.0)) {
    throw UsageError("finetune: sparsity must lie in [0, 1)");
  }
  if (cfg.concept_dim < 1) throw UsageError("finetune: concept_dim must be >= 1");
  if (cfg.epochs < 1 || cfg.batch_size < 1) {
    throw UsageError("finetune: epochs and batch_size must be >= 1");
  }

  const Eigen::Index d = train.embeddings.cols();
  const Eigen::Index n = train.embeddings.rows();
  const int n_classes = train.n_classes;
  RandomSource rng(cfg.seed);

  Adapter adapter;
  if (cfg.adapter == AdapterKind::linear) {
    adapter = Adapter::identity_linear(d);
  } else {
    RandomSource r = rng.fork(10);
    adapter = Adapter::make_mlp(d, r);
  }

  Eigen::MatrixXd cl;
  if (cfg.identity_concepts) {
    cl = Eigen::MatrixXd::Identity(d, cfg.concept_dim);
  } else {
    RandomSource r = rng.fork(11);
    cl = r.gaussian(d, cfg.concept_dim) / std::sqrt(double(d));
  }

  // Warm-start both heads briefly so the epoch-0 trace row is a meaningful
  // baseline rather than a zero-initialized head.
  HeadTrainConfig warm;
  warm.epochs = std::max(1, cfg.head_warmup_epochs);
  const Eigen::MatrixXd fx_train0 = adapter.apply(train.embeddings);
  const Eigen::MatrixXd fx_val0 = adapter.apply(val.embeddings);
  LinearHead h0 = train_head(fx_train0, train.labels, n_classes, fx_val0,
                             val.labels, warm, HeadInputKind::representation,
                             rng.fork(12).seed());
  LinearHead g0 = train_head(sparse_features(fx_train0, cl, cfg.s), train.labels,
                             n_classes, sparse_features(fx_val0, cl, cfg.s),
                             val.labels, warm, HeadInputKind::interpretation,
                             rng.fork(13).seed());
  Eigen::MatrixXd wh = h0.weights, bh = h0.bias.transpose();
  Eigen::MatrixXd wg = g0.weights, bg = g0.bias.transpose();

  std::vector<Eigen::MatrixXd*> learned;
  for (auto& p : adapter.params) learned.push_back(&p);
  if (!cfg.freeze_concepts) learned.push_back(&cl);
  learned.push_back(&wh);
  learned.push_back(&bh);
  learned.push_back(&wg);
  learned.push_back(&bg);
  std::vector<OptimizerState> opt(learned.size());
  for (auto& o : opt) {
    o.kind = OptimKind::adam;
    o.beta1 = cfg.beta1;
    o.beta2 = cfg.beta2;
    o.weight_decay = cfg.weight_decay;
  }

  auto build_leaves = [&](ad::Tape& t) {
    std::vector<ad::Value> leaves;
    for (const auto& p : adapter.params) leaves.push_back(t.input(p));
    leaves.push_back(cfg.freeze_concepts ? t.constant(cl) : t.input(cl));
    leaves.push_back(t.input(wh));
    leaves.push_back(t.input(bh));
    leaves.push_back(t.input(wg));
    leaves.push_back(t.input(bg));
    return leaves;
  };

  auto mean_objective = [&]() {
    double total = 0.0;
    for (Eigen::Index start = 0; start < n; start += cfg.batch_size) {
      const Eigen::Index bsz = std::min<Eigen::Index>(cfg.batch_size, n - start);
      Eigen::MatrixXd xb = train.embeddings.middleRows(start, bsz);
      std::vector<int> yb(train.labels.begin() + start,
                          train.labels.begin() + start + bsz);
      ad::Tape t;
      auto leaves = build_leaves(t);
      ad::Value loss = joint_objective_graph(t, adapter.kind, leaves, xb, yb, cfg.s);
      total += t.value(loss)(0, 0) * double(bsz);
    }
    return total / double(n);
  };

  FinetuneResult result;
  auto record_trace = [&](int epoch, double loss) {
    const Eigen::MatrixXd fx = adapter.apply(val.embeddings);
    LinearHead dh = wrap_head(wh, bh, HeadInputKind::representation, n_classes,
                              cfg.seed);
    LinearHead gh = wrap_head(wg, bg, HeadInputKind::interpretation, n_classes,
                              cfg.seed);
    TraceRow row;
    row.epoch = epoch;
    row.acc_dense = accuracy(dh, fx, val.labels);
    row.acc_sparse = accuracy(gh, sparse_features(fx, cl, cfg.s), val.labels);
    row.ratio = row.acc_dense > 0.0 ? row.acc_sparse / row.acc_dense : 0.0;
    row.loss = loss;
    result.trace.push_back(row);
  };

  std::set<int> snapshot_at(cfg.snapshot_epochs.begin(), cfg.snapshot_epochs.end());
  snapshot_at.insert(0);
  snapshot_at.insert(cfg.epochs);
  auto record_snapshot = [&](int epoch) {
    if (!snapshot_at.count(epoch)) return;
    FinetuneSnapshot snap;
    snap.epoch = epoch;
    snap.adapter = adapter;
    snap.concept_matrix = cl;
    snap.dense_head =
        wrap_head(wh, bh, HeadInputKind::representation, n_classes, cfg.seed);
    snap.sparse_head =
        wrap_head(wg, bg, HeadInputKind::interpretation, n_classes, cfg.seed);
    result.snapshots.push_back(snap);
  };

  const double initial_loss = mean_objective();
  record_trace(0, initial_loss);
  record_snapshot(0);

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  const long total_steps =
      long(cfg.epochs) * long((n + cfg.batch_size - 1) / cfg.batch_size);
  long step = 0;
  int over_budget = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double epoch_loss = 0.0;
    for (Eigen::Index start = 0; start < n; start += cfg.batch_size) {
      const Eigen::Index bsz = std::min<Eigen::Index>(cfg.batch_size, n - start);
      Eigen::MatrixXd xb(bsz, d);
      std::vector<int> yb(static_cast<std::size_t>(bsz));
      for (Eigen::Index i = 0; i < bsz; ++i) {
        xb.row(i) = train.embeddings.row(order[std::size_t(start + i)]);
        yb[std::size_t(i)] = train.labels[std::size_t(order[std::size_t(start + i)])];
      }
      ad::Tape t;
      auto leaves = build_leaves(t);
      ad::Value loss = joint_objective_graph(t, adapter.kind, leaves, xb, yb, cfg.s);
      t.backward(loss);

      const double lr =
          cosine_warmup(cfg.learning_rate, step, total_steps, cfg.warmup_frac);
      ++step;
      std::size_t leaf = 0;
      for (std::size_t p = 0; p < learned.size(); ++p, ++leaf) {
        if (cfg.freeze_concepts && leaf == adapter_param_count(adapter.kind)) {
          ++leaf;  // skip the constant C_l leaf
        }
        opt[p].learning_rate = lr;
        optimizer_step(*learned[p], t.grad(leaves[leaf]), opt[p]);
      }
      epoch_loss += t.value(loss)(0, 0) * double(bsz);
    }
    epoch_loss /= double(n);

    record_trace(epoch, epoch_loss);
    record_snapshot(epoch);
    if (initial_loss > 0.0 && epoch_loss > 10.0 * initial_loss) {
      if (++over_budget >= 3) {
        result.diverged = true;
        break;
      }
    } else {
      over_budget = 0;
    }
  }

  result.adapter = adapter;
  result.concept_matrix = cl;
  result.dense_head =
      wrap_head(wh, bh, HeadInputKind::representation, n_classes, cfg.seed);
  result.sparse_head =
      wrap_head(wg, bg, HeadInputKind::interpretation, n_classes, cfg.seed);
  return result;
}

std::vector<AlignmentRow> track_iis_alignment(
    const FinetuneResult& result, const EmbeddingDataset& train,
    const EmbeddingDataset& val, const EmbeddingDataset* test,
    const ConceptLibrary& lib, const SparsitySchedule& schedule,
    SparsifyMode mode, const IisConfig& cfg) {
  if (result.snapshots.empty()) {
    throw UsageError("track_iis_alignment: no snapshots recorded");
  }
  std::vector<AlignmentRow> rows;
  for (const FinetuneSnapshot& snap : result.snapshots) {
    EmbeddingDataset ttrain = train, tval = val, ttest;
    ttrain.embeddings = snap.adapter.apply(train.embeddings);
    tval.embeddings = snap.adapter.apply(val.embeddings);
    const EmbeddingDataset* tptr = nullptr;
    if (test) {
      ttest = *test;
      ttest.embeddings = snap.adapter.apply(test->embeddings);
      tptr = &ttest;
    }
    IISReport rep = compute_iis(ttrain, tval, tptr, lib, schedule, mode, cfg);

    AlignmentRow row;
    row.epoch = snap.epoch;
    row.accuracy = rep.representation_accuracy;
    row.original_iis = rep.iis;
    row.simplified_iis = 0.0;
    for (const TraceRow& tr : result.trace) {
      if (tr.epoch == snap.epoch) {
        row.simplified_iis = tr.ratio;
        break;
      }
    }
    rows.push_back(row);
  }
  return rows;
}

void write_trace_csv(const std::filesystem::path& path,
                     const std::vector<TraceRow>& trace) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw DataError(DataCode::io, path.string() + ": cannot open for writing");
  }
  out << "epoch,acc_dense,acc_sparse,ratio\n";
  char buf[128];
  for (const TraceRow& row : trace) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g\n", row.epoch,
                  row.acc_dense, row.acc_sparse, row.ratio);
    out << buf;
  }
}

}  // namespace iis
