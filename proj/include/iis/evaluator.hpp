#pragma once

#include <Eigen/Core>

#include <vector>

#include "iis/common.hpp"
#include "iis/datastore.hpp"
#include "iis/head.hpp"
#include "iis/interpret.hpp"
#include "iis/numerics.hpp"

namespace iis {

//! Linear-probe training recipe. The grid is swept in order and the head
//! with the best validation accuracy wins (first winner on ties).
struct HeadTrainConfig {
  std::vector<double> lr_grid = {0.1, 0.01, 0.001};
  int epochs = 30;
  int batch_size = 256;
  OptimKind optimizer = OptimKind::sgd;
  double lr_decay = 1.0;  // per-epoch multiplier; 0.99 for visual-style runs
};

LinearHead train_head(const Eigen::Ref<const Eigen::MatrixXd>& train_x,
                      const std::vector<int>& train_y, int n_classes,
                      const Eigen::Ref<const Eigen::MatrixXd>& val_x,
                      const std::vector<int>& val_y,
                      const HeadTrainConfig& cfg, HeadInputKind kind,
                      std::uint64_t seed);

//! Accuracy retention rate. repr_acc must be positive.
double arr(double interp_acc, double repr_acc);

struct IisConfig {
  HeadTrainConfig head;
  std::uint64_t seed = 0;
  int jobs = 1;
};

//! Full pipeline behind the score: one representation head on raw
//! embeddings, one interpretation head per schedule ratio, ARR per ratio,
//! and the span-normalized trapezoid area as the score. Pass test = null
//! to evaluate on the validation split (flagged in the report). Ratios may
//! arrive in any order; they are sorted internally. Per-ratio head seeds
//! are derived as seed XOR ratio index.
IISReport compute_iis(const EmbeddingDataset& train, const EmbeddingDataset& val,
                      const EmbeddingDataset* test, const ConceptLibrary& lib,
                      const SparsitySchedule& schedule, SparsifyMode mode,
                      const IisConfig& cfg);

struct ContributionResult {
  Eigen::MatrixXd contributions;   // m x n_classes; NaN column for empty class
  Eigen::VectorXd class_entropy;   // NaN for empty classes
  std::vector<int> empty_classes;
  std::vector<std::string> concept_names;
};

//! Mean concept contribution per class over a validation split, plus the
//! entropy of each class's normalized absolute contributions.
ContributionResult contribution_matrix(const EmbeddingDataset& val,
                                       const ConceptLibrary& lib,
                                       const LinearHead& head, double s,
                                       SparsifyMode mode,
                                       const ConceptGrouping* grouping = nullptr);

}  // namespace iis
