#include "iis/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <thread>

#include "iis/autodiff.hpp"

namespace iis {

namespace {

void check_features(const Eigen::Ref<const Eigen::MatrixXd>& x,
                    const std::vector<int>& y, int n_classes,
                    const char* what) {
  if (x.rows() == 0) throw UsageError(std::string(what) + ": empty feature set");
  if (y.size() != std::size_t(x.rows())) {
    throw UsageError(std::string(what) + ": one label per row required");
  }
  if (n_classes < 1) throw UsageError(std::string(what) + ": class count must be >= 1");
  for (int label : y) {
    if (label < 0 || label >= n_classes) {
      throw UsageError(std::string(what) + ": label out of range");
    }
  }
}

}  // namespace

LinearHead train_head(const Eigen::Ref<const Eigen::MatrixXd>& train_x,
                      const std::vector<int>& train_y, int n_classes,
                      const Eigen::Ref<const Eigen::MatrixXd>& val_x,
                      const std::vector<int>& val_y,
                      const HeadTrainConfig& cfg, HeadInputKind kind,
                      std::uint64_t seed) {
  check_features(train_x, train_y, n_classes, "train_head");
  check_features(val_x, val_y, n_classes, "train_head(val)");
  if (val_x.cols() != train_x.cols()) {
    throw UsageError("train_head: train/val dimension mismatch");
  }
  if (cfg.lr_grid.empty() || cfg.epochs < 1 || cfg.batch_size < 1) {
    throw UsageError("train_head: empty learning-rate grid or bad schedule");
  }
  std::vector<bool> seen(std::size_t(n_classes), false);
  for (int y : train_y) seen[std::size_t(y)] = true;
  for (int c = 0; c < n_classes; ++c) {
    if (!seen[std::size_t(c)]) {
      throw DataError(DataCode::invariant,
                      "train_head: class " + std::to_string(c) +
                          " missing from the training split");
    }
  }

  const Eigen::Index n = train_x.rows(), d = train_x.cols();
  LinearHead best;
  double best_acc = -1.0;

  for (std::size_t li = 0; li < cfg.lr_grid.size(); ++li) {
    RandomSource rng = RandomSource(seed).fork(li);
    Eigen::MatrixXd w = Eigen::MatrixXd::Zero(d, n_classes);
    Eigen::MatrixXd b = Eigen::MatrixXd::Zero(1, n_classes);
    OptimizerState opt_w, opt_b;
    opt_w.kind = opt_b.kind = cfg.optimizer;

    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      const double lr = exponential_decay(cfg.lr_grid[li], cfg.lr_decay, epoch);
      opt_w.learning_rate = opt_b.learning_rate = lr;
      rng.shuffle(order.begin(), order.end());
      for (Eigen::Index start = 0; start < n; start += cfg.batch_size) {
        const Eigen::Index bsz = std::min<Eigen::Index>(cfg.batch_size, n - start);
        Eigen::MatrixXd xb(bsz, d);
        std::vector<int> yb(static_cast<std::size_t>(bsz));
        for (Eigen::Index i = 0; i < bsz; ++i) {
          xb.row(i) = train_x.row(order[std::size_t(start + i)]);
          yb[std::size_t(i)] = train_y[std::size_t(order[std::size_t(start + i)])];
        }
        ad::Tape t;
        ad::Value wv = t.input(w);
        ad::Value bv = t.input(b);
        ad::Value z = t.add_row(t.matmul(t.constant(std::move(xb)), wv), bv);
        ad::Value loss = t.softmax_cross_entropy(z, std::move(yb));
        t.backward(loss);
        optimizer_step(w, t.grad(wv), opt_w);
        optimizer_step(b, t.grad(bv), opt_b);
      }
    }

    LinearHead head;
    head.weights = w;
    head.bias = b.row(0).transpose();
    head.input_kind = kind;
    head.n_classes = n_classes;
    head.best_learning_rate = cfg.lr_grid[li];
    head.seed = seed;
    head.val_accuracy = accuracy(head, val_x, val_y);
    if (head.val_accuracy > best_acc) {
      best_acc = head.val_accuracy;
      best = std::move(head);
    }
  }
  return best;
}

double arr(double interp_acc, double repr_acc) {
  if (!(repr_acc > 0.0)) {
    throw NumericError("arr: representation accuracy must be positive");
  }
  return interp_acc / repr_acc;
}

IISReport compute_iis(const EmbeddingDataset& train, const EmbeddingDataset& val,
                      const EmbeddingDataset* test, const ConceptLibrary& lib,
                      const SparsitySchedule& schedule, SparsifyMode mode,
                      const IisConfig& cfg) {
  validate_embeddings(train);
  validate_embeddings(val);
  if (test) validate_embeddings(test ? *test : val);
  validate_library(lib);
  if (cfg.jobs < 1) throw UsageError("compute_iis: jobs must be >= 1");
  if (train.embeddings.cols() != lib.dim()) {
    throw UsageError("compute_iis: embeddings and library disagree on dimension");
  }

  std::vector<double> ratios = schedule.ratios;
  std::sort(ratios.begin(), ratios.end());
  validate_schedule(SparsitySchedule{ratios});

  const EmbeddingDataset& eval = test ? *test : val;
  LinearHead repr_head =
      train_head(train.embeddings, train.labels, train.n_classes,
                 val.embeddings, val.labels, cfg.head,
                 HeadInputKind::representation, cfg.seed);
  const double repr_acc = accuracy(repr_head, eval.embeddings, eval.labels);

  const Eigen::MatrixXd xc_train = project_batch(train.embeddings, lib);
  const Eigen::MatrixXd xc_val = project_batch(val.embeddings, lib);
  const Eigen::MatrixXd xc_eval = project_batch(eval.embeddings, lib);

  const std::size_t k = ratios.size();
  std::vector<double> interp_acc(k, 0.0);
  std::vector<int> cluster_dims(k, 0);

  auto run_ratio = [&](std::size_t i) {
    const double s = ratios[i];
    const std::uint64_t ratio_seed = cfg.seed ^ std::uint64_t(i);
    Eigen::MatrixXd ftr, fva, fev;
    if (mode == SparsifyMode::clustering) {
      ConceptGrouping grouping = cluster_concepts(lib, s, ratio_seed);
      cluster_dims[i] = grouping.n_groups;
      ftr = sparsify_batch(xc_train, s, mode, &grouping);
      fva = sparsify_batch(xc_val, s, mode, &grouping);
      fev = sparsify_batch(xc_eval, s, mode, &grouping);
    } else {
      ftr = sparsify_batch(xc_train, s, mode);
      fva = sparsify_batch(xc_val, s, mode);
      fev = sparsify_batch(xc_eval, s, mode);
    }
    LinearHead head =
        train_head(ftr, train.labels, train.n_classes, fva, val.labels,
                   cfg.head, HeadInputKind::interpretation, ratio_seed);
    interp_acc[i] = accuracy(head, fev, eval.labels);
  };

  if (cfg.jobs == 1) {
    for (std::size_t i = 0; i < k; ++i) run_ratio(i);
  } else {
    const std::size_t workers = std::min<std::size_t>(std::size_t(cfg.jobs), k);
    std::vector<std::thread> threads;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t t = 0; t < workers; ++t) {
      threads.emplace_back([&, t]() {
        try {
          for (std::size_t i = t; i < k; i += workers) run_ratio(i);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& th : threads) th.join();
    for (const auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  IISReport rep;
  rep.mode = sparsify_mode_name(mode);
  rep.library_kind = lib.kind;
  rep.library_m = lib.m();
  rep.representation_accuracy = repr_acc;
  rep.ratios = ratios;
  rep.interpretation_accuracies = interp_acc;
  for (std::size_t i = 0; i < k; ++i) {
    rep.arr_values.push_back(arr(interp_acc[i], repr_acc));
  }
  rep.iis = curve_area_mean(rep.ratios, rep.arr_values);
  rep.val_as_test = (test == nullptr);
  if (mode == SparsifyMode::clustering) rep.cluster_dims = cluster_dims;
  validate_report(rep);
  return rep;
}

ContributionResult contribution_matrix(const EmbeddingDataset& val,
                                       const ConceptLibrary& lib,
                                       const LinearHead& head, double s,
                                       SparsifyMode mode,
                                       const ConceptGrouping* grouping) {
  validate_embeddings(val);
  validate_library(lib);
  Eigen::MatrixXd interp =
      sparsify_batch(project_batch(val.embeddings, lib), s, mode, grouping);
  if (interp.cols() != head.weights.rows()) {
    throw UsageError("contribution_matrix: head input size mismatch");
  }
  if (head.n_classes != val.n_classes) {
    throw UsageError("contribution_matrix: head/dataset class count mismatch");
  }
  const Eigen::Index m = interp.cols();
  const int n_classes = val.n_classes;

  ContributionResult out;
  out.concept_names = (mode == SparsifyMode::clustering && grouping)
                          ? grouping->names
                          : lib.names;
  out.contributions = Eigen::MatrixXd::Zero(m, n_classes);
  out.class_entropy = Eigen::VectorXd::Zero(n_classes);
  std::vector<int> counts(std::size_t(n_classes), 0);

  for (Eigen::Index i = 0; i < interp.rows(); ++i) {
    const int y = val.labels[std::size_t(i)];
    counts[std::size_t(y)] += 1;
    out.contributions.col(y) +=
        interp.row(i).transpose().cwiseProduct(head.weights.col(y));
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (int c = 0; c < n_classes; ++c) {
    if (counts[std::size_t(c)] == 0) {
      out.empty_classes.push_back(c);
      out.contributions.col(c).setConstant(nan);
      out.class_entropy(c) = nan;
      continue;
    }
    out.contributions.col(c) /= double(counts[std::size_t(c)]);
    const Eigen::VectorXd mags = out.contributions.col(c).cwiseAbs();
    const double total = mags.sum();
    double entropy = 0.0;
    if (total > 0.0) {
      for (Eigen::Index j = 0; j < m; ++j) {
        const double p = mags(j) / total;
        if (p > 0.0) entropy -= p * std::log(p);
      }
    }
    out.class_entropy(c) = entropy;
  }
  return out;
}

}  // namespace iis
