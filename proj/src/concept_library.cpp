#include "iis/concept_library.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "iis/autodiff.hpp"
#include "iis/numerics.hpp"

namespace iis {

namespace {

std::vector<std::vector<Eigen::Index>> indices_by_class(
    const std::vector<int>& labels, int n_classes) {
  std::vector<std::vector<Eigen::Index>> by_class(static_cast<std::size_t>(n_classes));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    by_class[std::size_t(labels[i])].push_back(Eigen::Index(i));
  }
  return by_class;
}

}  // namespace

PatchPool make_patch_pool(const Eigen::Ref<const Eigen::MatrixXd>& embeddings,
                          const std::vector<int>& patch_class, int n_classes,
                          int per_class, RandomSource& rng) {
  if (per_class < 1) throw UsageError("patch pool: per_class must be >= 1");
  if (n_classes < 1) throw UsageError("patch pool: need at least one class");
  if (patch_class.size() != std::size_t(embeddings.rows())) {
    throw DataError(DataCode::invariant, "patch pool: one class per patch required");
  }
  for (int y : patch_class) {
    if (y < 0 || y >= n_classes) {
      throw DataError(DataCode::invariant, "patch pool: class out of range");
    }
  }
  auto by_class = indices_by_class(patch_class, n_classes);
  std::vector<Eigen::Index> chosen;
  chosen.reserve(std::size_t(n_classes) * std::size_t(per_class));
  for (int c = 0; c < n_classes; ++c) {
    auto& idx = by_class[std::size_t(c)];
    if (Eigen::Index(idx.size()) < per_class) {
      throw DataError(DataCode::invariant,
                      "patch pool: class " + std::to_string(c) + " has fewer than " +
                          std::to_string(per_class) + " patches");
    }
    rng.shuffle(idx.begin(), idx.end());
    idx.resize(std::size_t(per_class));
    std::sort(idx.begin(), idx.end());
    chosen.insert(chosen.end(), idx.begin(), idx.end());
  }
  PatchPool pool;
  pool.embeddings.resize(Eigen::Index(chosen.size()), embeddings.cols());
  pool.patch_class.resize(chosen.size());
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    pool.embeddings.row(Eigen::Index(i)) = embeddings.row(chosen[i]);
    pool.patch_class[i] = patch_class[std::size_t(chosen[i])];
  }
  pool.n_classes = n_classes;
  pool.per_class = per_class;
  validate_pool(pool);
  return pool;
}

void validate_pool(const PatchPool& pool) {
  if (pool.n_classes < 1 || pool.per_class < 1) {
    throw DataError(DataCode::invariant, "patch pool: empty configuration");
  }
  if (pool.embeddings.rows() !=
      Eigen::Index(pool.n_classes) * Eigen::Index(pool.per_class)) {
    throw DataError(DataCode::invariant,
                    "patch pool: rows != classes * per_class");
  }
  if (pool.patch_class.size() != std::size_t(pool.embeddings.rows())) {
    throw DataError(DataCode::invariant, "patch pool: one class per patch required");
  }
  std::vector<int> counts(std::size_t(pool.n_classes), 0);
  for (int y : pool.patch_class) {
    if (y < 0 || y >= pool.n_classes) {
      throw DataError(DataCode::invariant, "patch pool: class out of range");
    }
    counts[std::size_t(y)] += 1;
  }
  for (int c : counts) {
    if (c != pool.per_class) {
      throw DataError(DataCode::invariant,
                      "patch pool: every class must contribute exactly per_class patches");
    }
  }
  if (!pool.embeddings.allFinite()) {
    throw DataError(DataCode::invariant, "patch pool: non-finite embeddings");
  }
}

namespace {

struct SingleKMeans {
  Eigen::MatrixXd centroids;
  std::vector<int> assignment;
  double sse = 0.0;
  int iterations = 0;
  std::vector<double> sse_trace;
};

void assign_points(const Eigen::Ref<const Eigen::MatrixXd>& pts,
                   const Eigen::MatrixXd& centroids, std::vector<int>& assign) {
  for (Eigen::Index i = 0; i < pts.rows(); ++i) {
    int best = 0;
    double bd = (pts.row(i) - centroids.row(0)).squaredNorm();
    for (Eigen::Index j = 1; j < centroids.rows(); ++j) {
      const double d = (pts.row(i) - centroids.row(j)).squaredNorm();
      if (d < bd) {
        bd = d;
        best = int(j);
      }
    }
    assign[std::size_t(i)] = best;
  }
}

SingleKMeans lloyd_once(const Eigen::Ref<const Eigen::MatrixXd>& pts, int k,
                        RandomSource& rng, int max_iters) {
  const Eigen::Index n = pts.rows();
  Eigen::MatrixXd centroids(k, pts.cols());

  // k-means++ seeding.
  Eigen::Index first = Eigen::Index(rng.below(std::uint64_t(n)));
  centroids.row(0) = pts.row(first);
  Eigen::VectorXd d2(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    d2(i) = (pts.row(i) - centroids.row(0)).squaredNorm();
  }
  for (int j = 1; j < k; ++j) {
    const double total = d2.sum();
    Eigen::Index pick;
    if (total <= 0.0) {
      pick = Eigen::Index(rng.below(std::uint64_t(n)));
    } else {
      double r = rng.uniform() * total;
      pick = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        r -= d2(i);
        if (r <= 0.0) {
          pick = i;
          break;
        }
      }
    }
    centroids.row(j) = pts.row(pick);
    for (Eigen::Index i = 0; i < n; ++i) {
      d2(i) = std::min(d2(i), (pts.row(i) - centroids.row(j)).squaredNorm());
    }
  }

  SingleKMeans out;
  out.assignment.assign(std::size_t(n), -1);
  std::vector<int> prev = out.assignment;
  for (int iter = 0; iter < max_iters; ++iter) {
    assign_points(pts, centroids, out.assignment);
    double step_sse = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      step_sse +=
          (pts.row(i) - centroids.row(out.assignment[std::size_t(i)])).squaredNorm();
    }
    out.sse_trace.push_back(step_sse);
    out.iterations = iter + 1;
    if (out.assignment == prev) break;
    prev = out.assignment;

    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, pts.cols());
    std::vector<int> counts(std::size_t(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(out.assignment[std::size_t(i)]) += pts.row(i);
      counts[std::size_t(out.assignment[std::size_t(i)])] += 1;
    }
    std::set<Eigen::Index> reused;
    for (int j = 0; j < k; ++j) {
      if (counts[std::size_t(j)] > 0) {
        centroids.row(j) = sums.row(j) / double(counts[std::size_t(j)]);
      } else {
        // Re-seed an emptied cluster from the point farthest from its
        // current centroid (skipping points already consumed this round).
        Eigen::Index far = -1;
        double fd = -1.0;
        for (Eigen::Index i = 0; i < n; ++i) {
          if (reused.count(i)) continue;
          const double d =
              (pts.row(i) - centroids.row(out.assignment[std::size_t(i)]))
                  .squaredNorm();
          if (d > fd) {
            fd = d;
            far = i;
          }
        }
        centroids.row(j) = pts.row(far);
        reused.insert(far);
      }
    }
  }

  out.centroids = centroids;
  out.sse = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    out.sse +=
        (pts.row(i) - centroids.row(out.assignment[std::size_t(i)])).squaredNorm();
  }
  return out;
}

}  // namespace

KMeansResult kmeans(const Eigen::Ref<const Eigen::MatrixXd>& points, int k,
                    RandomSource& rng, const KMeansOptions& opts) {
  if (points.rows() == 0) throw UsageError("kmeans: no points");
  if (k < 1 || Eigen::Index(k) > points.rows()) {
    throw UsageError("kmeans: k must lie in [1, points]");
  }
  if (opts.restarts < 1 || opts.max_iters < 1) {
    throw UsageError("kmeans: restarts and max_iters must be >= 1");
  }
  ensure_finite(points, "kmeans");

  SingleKMeans best;
  best.sse = std::numeric_limits<double>::infinity();
  for (int r = 0; r < opts.restarts; ++r) {
    SingleKMeans run = lloyd_once(points, k, rng, opts.max_iters);
    if (run.sse < best.sse) best = std::move(run);
  }
  KMeansResult out;
  out.centroids = std::move(best.centroids);
  out.assignment = std::move(best.assignment);
  out.sse = best.sse;
  out.iterations = best.iterations;
  out.sse_trace = std::move(best.sse_trace);
  return out;
}

ConceptLibrary build_prototype(const PatchPool& pool, Eigen::Index m,
                               RandomSource& rng) {
  validate_pool(pool);
  if (m < pool.n_classes) {
    throw UsageError("prototype library: need at least one concept per class");
  }
  if (m > pool.embeddings.rows()) {
    throw UsageError("prototype library: more concepts than pooled patches");
  }
  const Eigen::Index base = m / pool.n_classes;
  const Eigen::Index extra = m % pool.n_classes;

  auto by_class = indices_by_class(pool.patch_class, pool.n_classes);
  ConceptLibrary lib;
  lib.kind = "prototype";
  lib.vectors.resize(m, pool.embeddings.cols());
  Eigen::Index row = 0;
  for (int c = 0; c < pool.n_classes; ++c) {
    const Eigen::Index quota = base + (Eigen::Index(c) < extra ? 1 : 0);
    auto& idx = by_class[std::size_t(c)];
    rng.shuffle(idx.begin(), idx.end());
    for (Eigen::Index j = 0; j < quota; ++j) {
      const Eigen::Index p = idx[std::size_t(j)];
      lib.vectors.row(row) = pool.embeddings.row(p);
      lib.names.push_back("class" + std::to_string(c) + "/patch" +
                          std::to_string(p));
      ++row;
    }
  }
  lib.provenance = {{"seed", rng.seed()},
                    {"m", m},
                    {"patches_per_class", pool.per_class}};
  validate_library(lib);
  return lib;
}

ConceptLibrary build_cluster(const PatchPool& pool, Eigen::Index m,
                             RandomSource& rng, const KMeansOptions& opts) {
  validate_pool(pool);
  if (m < 1 || m > pool.embeddings.rows()) {
    throw UsageError("cluster library: m must lie in [1, pooled patches]");
  }
  KMeansResult km = kmeans(pool.embeddings, int(m), rng, opts);
  ConceptLibrary lib;
  lib.kind = "cluster";
  lib.vectors = std::move(km.centroids);
  for (Eigen::Index j = 0; j < m; ++j) {
    lib.names.push_back("cluster" + std::to_string(j));
  }
  lib.provenance = {{"seed", rng.seed()},
                    {"m", m},
                    {"sse", km.sse},
                    {"iterations", km.iterations},
                    {"restarts", opts.restarts}};
  validate_library(lib);
  return lib;
}

End2EndResult build_end2end(const PatchPool& pool, const EmbeddingDataset& train,
                            Eigen::Index m, const End2EndConfig& cfg) {
  validate_pool(pool);
  validate_embeddings(train);
  if (train.embeddings.cols() != pool.embeddings.cols()) {
    throw DataError(DataCode::invariant,
                    "end2end: pool and training embeddings disagree on dimension");
  }
  const Eigen::Index p = pool.embeddings.rows();
  if (m < 1 || m > p) {
    throw UsageError("end2end library: m must lie in [1, pooled patches]");
  }
  if (cfg.epochs < 1 || cfg.batch_size < 1) {
    throw UsageError("end2end library: epochs and batch_size must be >= 1");
  }
  if (!(cfg.temperature > 0.0)) {
    throw UsageError("end2end library: temperature must be positive");
  }

  const Eigen::Index n = train.embeddings.rows();
  // Patch projections never change during training; cache them once.
  const Eigen::MatrixXd px = train.embeddings * pool.embeddings.transpose();

  RandomSource rng(cfg.seed);
  Eigen::MatrixXd logits_q = 0.01 * rng.gaussian(p, m);
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(m, train.n_classes);
  Eigen::MatrixXd b = Eigen::MatrixXd::Zero(1, train.n_classes);

  OptimizerState opt_q, opt_w, opt_b;
  for (OptimizerState* o : {&opt_q, &opt_w, &opt_b}) {
    o->kind = OptimKind::adam;
    o->learning_rate = cfg.learning_rate;
  }

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  End2EndResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double epoch_loss = 0.0;
    for (Eigen::Index start = 0; start < n; start += cfg.batch_size) {
      const Eigen::Index bsz = std::min<Eigen::Index>(cfg.batch_size, n - start);
      Eigen::MatrixXd pxb(bsz, p);
      std::vector<int> yb(static_cast<std::size_t>(bsz));
      for (Eigen::Index i = 0; i < bsz; ++i) {
        pxb.row(i) = px.row(order[std::size_t(start + i)]);
        yb[std::size_t(i)] = train.labels[std::size_t(order[std::size_t(start + i)])];
      }

      ad::Tape t;
      ad::Value lq = t.input(logits_q);
      ad::Value wv = t.input(w);
      ad::Value bv = t.input(b);
      ad::Value q = t.gumbel_softmax_st_rows(lq, cfg.temperature, rng);
      ad::Value feat = t.matmul(t.constant(pxb), q);
      ad::Value z = t.add_row(t.matmul(feat, wv), bv);
      ad::Value loss = t.softmax_cross_entropy(z, yb);
      t.backward(loss);

      optimizer_step(logits_q, t.grad(lq), opt_q);
      optimizer_step(w, t.grad(wv), opt_w);
      optimizer_step(b, t.grad(bv), opt_b);
      epoch_loss += t.value(loss)(0, 0) * double(bsz);
    }
    result.epoch_loss.push_back(epoch_loss / double(n));
  }

  // Extraction: hard argmax assignment, concept = mean of its patches.
  result.assignment = Eigen::MatrixXd::Zero(p, m);
  std::vector<std::vector<Eigen::Index>> members(static_cast<std::size_t>(m));
  for (Eigen::Index i = 0; i < p; ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < m; ++j) {
      if (logits_q(i, j) > logits_q(i, best)) best = j;
    }
    result.assignment(i, best) = 1.0;
    members[std::size_t(best)].push_back(i);
  }

  ConceptLibrary lib;
  lib.kind = "end2end";
  std::vector<Eigen::MatrixXd> rows;
  for (Eigen::Index j = 0; j < m; ++j) {
    if (members[std::size_t(j)].empty()) {
      result.dropped.push_back(int(j));
      continue;
    }
    Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(pool.embeddings.cols());
    for (Eigen::Index i : members[std::size_t(j)]) mean += pool.embeddings.row(i);
    mean /= double(members[std::size_t(j)].size());
    rows.push_back(mean);
    lib.names.push_back("e2e" + std::to_string(j));
  }
  lib.vectors.resize(Eigen::Index(rows.size()), pool.embeddings.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    lib.vectors.row(Eigen::Index(i)) = rows[i];
  }
  lib.provenance = {{"seed", cfg.seed},
                    {"m_requested", m},
                    {"m_kept", Eigen::Index(rows.size())},
                    {"dropped", result.dropped},
                    {"epochs", cfg.epochs},
                    {"temperature", cfg.temperature},
                    {"final_loss", result.epoch_loss.back()}};
  validate_library(lib);
  result.library = std::move(lib);
  return result;
}

ConceptLibrary fit_text_concepts(const EmbeddingDataset& train,
                                 const SoftLabelMatrix& soft,
                                 const TextFitConfig& cfg) {
  validate_embeddings(train);
  if (soft.scores.rows() != train.embeddings.rows()) {
    throw DataError(DataCode::invariant,
                    "text fit: soft labels and embeddings disagree on sample count");
  }
  if (soft.names.size() != std::size_t(soft.scores.cols()) || soft.names.empty()) {
    throw DataError(DataCode::invariant, "text fit: one name per concept required");
  }
  if (cfg.lambda < 0.0) throw UsageError("text fit: lambda must be >= 0");

  Eigen::MatrixXd x = train.embeddings;
  if (cfg.normalize) {
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const double nrm = x.row(r).norm();
      if (!(nrm > 1e-300)) {
        throw NumericError("text fit: zero-norm sample cannot be normalized");
      }
      x.row(r) /= nrm;
    }
  }
  const Eigen::Index d = train.embeddings.cols();
  if (cfg.fit_intercept) {
    x.conservativeResize(Eigen::NoChange, d + 1);
    x.col(d).setOnes();
  }
  const Eigen::Index dd = x.cols();
  const Eigen::Index m = soft.scores.cols();

  ConceptLibrary lib;
  lib.kind = "text";
  lib.names = soft.names;
  lib.vectors.resize(m, d);

  if (cfg.loss == TextLoss::mse) {
    Eigen::MatrixXd a = x.transpose() * x;
    for (Eigen::Index i = 0; i < dd; ++i) {
      if (cfg.fit_intercept && i == dd - 1) continue;  // intercept unpenalized
      a(i, i) += cfg.lambda;
    }
    if (cfg.lambda == 0.0) {
      Eigen::FullPivLU<Eigen::MatrixXd> lu(a);
      if (!lu.isInvertible()) {
        throw NumericError(
            "text fit: normal matrix is singular; pass lambda > 0");
      }
    }
    Eigen::LDLT<Eigen::MatrixXd> solver(a);
    for (Eigen::Index j = 0; j < m; ++j) {
      Eigen::VectorXd c = solver.solve(x.transpose() * soft.scores.col(j));
      lib.vectors.row(j) = c.head(d).transpose();
    }
  } else {
    RandomSource rng(cfg.seed);
    for (Eigen::Index j = 0; j < m; ++j) {
      const double ny = soft.scores.col(j).norm();
      if (!(ny > 1e-300)) {
        lib.vectors.row(j).setZero();
        continue;
      }
      Eigen::MatrixXd target =
          (soft.scores.col(j) / ny).array().cube().matrix();
      Eigen::MatrixXd c = x.transpose() * (soft.scores.col(j) / ny);
      if (!(c.norm() > 1e-300)) c = rng.gaussian(dd, 1);

      OptimizerState opt;
      opt.kind = OptimKind::adam;
      opt.learning_rate = cfg.cos_learning_rate;
      for (int epoch = 0; epoch < cfg.cos_epochs; ++epoch) {
        ad::Tape t;
        ad::Value cv = t.input(c);
        ad::Value q = t.matmul(t.constant(x), cv);
        ad::Value sim = t.dot(t.cube(t.l2_normalize(q)), t.constant(target));
        ad::Value loss = t.scale(sim, -1.0);
        t.backward(loss);
        optimizer_step(c, t.grad(cv), opt);
      }
      lib.vectors.row(j) = c.col(0).head(d).transpose();
    }
  }

  if (cfg.normalize) {
    for (Eigen::Index j = 0; j < m; ++j) {
      const double nrm = lib.vectors.row(j).norm();
      if (nrm > 1e-300) lib.vectors.row(j) /= nrm;
    }
  }
  lib.provenance = {{"loss", cfg.loss == TextLoss::mse ? "mse" : "cos3"},
                    {"lambda", cfg.lambda},
                    {"normalize", cfg.normalize},
                    {"intercept", cfg.fit_intercept},
                    {"seed", cfg.seed}};
  validate_library(lib);
  return lib;
}

}  // namespace iis
