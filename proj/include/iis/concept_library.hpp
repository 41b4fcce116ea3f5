#pragma once

#include <Eigen/Core>

#include <string>
#include <vector>

#include "iis/common.hpp"
#include "iis/datastore.hpp"

namespace iis {

//! Patch embeddings grouped by class; exactly `per_class` patches survive
//! selection for every class.
struct PatchPool {
  Eigen::MatrixXd embeddings;  // p x d
  std::vector<int> patch_class;
  int n_classes = 0;
  int per_class = 0;
};

//! Uniformly subsamples `per_class` patches per class (error when a class
//! has fewer candidates than that).
PatchPool make_patch_pool(const Eigen::Ref<const Eigen::MatrixXd>& embeddings,
                          const std::vector<int>& patch_class, int n_classes,
                          int per_class, RandomSource& rng);
void validate_pool(const PatchPool& pool);

struct KMeansOptions {
  int max_iters = 100;
  int restarts = 10;
};

struct KMeansResult {
  Eigen::MatrixXd centroids;  // k x d
  std::vector<int> assignment;
  double sse = 0.0;
  int iterations = 0;
  std::vector<double> sse_trace;  // after each assignment step of the winning run
};

//! Lloyd's algorithm with k-means++ seeding. Ties assign to the lowest
//! centroid index; a cluster that empties is re-seeded from the point
//! farthest from its centroid. Converged when the assignment stops
//! changing (or after max_iters). Best of `restarts` runs by SSE.
KMeansResult kmeans(const Eigen::Ref<const Eigen::MatrixXd>& points, int k,
                    RandomSource& rng, const KMeansOptions& opts = {});

//! Concepts sampled directly from the pool, spread across classes so
//! per-class counts differ by at most one.
ConceptLibrary build_prototype(const PatchPool& pool, Eigen::Index m,
                               RandomSource& rng);

//! Concepts are centroids of a k-means run over the pool.
ConceptLibrary build_cluster(const PatchPool& pool, Eigen::Index m,
                             RandomSource& rng, const KMeansOptions& opts = {});

struct End2EndConfig {
  int epochs = 60;
  int batch_size = 128;
  double learning_rate = 0.01;
  double temperature = 1.0;
  uint64_t seed = 0;
};

struct End2EndResult {
  ConceptLibrary library;
  std::vector<double> epoch_loss;
  Eigen::MatrixXd assignment;  // p x m, exact one-hot rows
  std::vector<int> dropped;    // concept slots that attracted no patches
};

//! Learns a patch-to-concept assignment end to end: projections through
//! candidate patches are pooled by a straight-through one-hot matrix and
//! scored by a jointly trained linear head. Final concepts are means of
//! the patches each slot attracted; empty slots are dropped.
End2EndResult build_end2end(const PatchPool& pool, const EmbeddingDataset& train,
                            Eigen::Index m, const End2EndConfig& cfg);

enum class TextLoss { mse, cos_cubed };

struct TextFitConfig {
  TextLoss loss = TextLoss::mse;
  double lambda = 1e-4;
  bool normalize = true;     // row-normalize inputs / unit concept vectors
  bool fit_intercept = false;  // fit (then discard) a bias column
  int cos_epochs = 200;
  double cos_learning_rate = 0.05;
  uint64_t seed = 0;
};

//! Per-concept regression of soft labels onto embeddings. mse solves the
//! ridge normal equations; cos_cubed ascends the cubed-cosine similarity
//! between predicted and target score vectors.
ConceptLibrary fit_text_concepts(const EmbeddingDataset& train,
                                 const SoftLabelMatrix& soft,
                                 const TextFitConfig& cfg);

}  // namespace iis
