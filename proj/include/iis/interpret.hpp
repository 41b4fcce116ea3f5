#pragma once

#include <Eigen/Core>

#include <string>
#include <vector>

#include "iis/common.hpp"
#include "iis/datastore.hpp"
#include "iis/head.hpp"

namespace iis {

enum class SparsifyMode { ascending, descending, hard_threshold, clustering };

std::string sparsify_mode_name(SparsifyMode m);
SparsifyMode sparsify_mode_from_name(const std::string& name);

//! Concept-space coordinates of a sample: x^C = C x.
Eigen::VectorXd project(const Eigen::Ref<const Eigen::VectorXd>& x,
                        const ConceptLibrary& lib);
Eigen::MatrixXd project_batch(const Eigen::Ref<const Eigen::MatrixXd>& X,
                              const ConceptLibrary& lib);

struct Interpretation {
  Eigen::VectorXd values;
  std::vector<int> active;  // indices of surviving (nonzero) coordinates
  double sparsity = 0.0;
  SparsifyMode mode = SparsifyMode::ascending;
};

//! Groups concepts by k-means over their vectors; the clustering sparsify
//! mode replaces each group with the mean of its members' coordinates.
struct ConceptGrouping {
  std::vector<int> group_of;  // original concept -> group
  int n_groups = 0;
  std::vector<std::string> names;
};

ConceptGrouping cluster_concepts(const ConceptLibrary& lib, double s,
                                 std::uint64_t seed);

//! Row-independent sparsification at ratio `s`:
//!   ascending      zero the smallest magnitudes, shrink the rest toward 0
//!   descending     zero the largest magnitudes, shrink the rest
//!   hard_threshold zero the smallest magnitudes without shrinking
//!   clustering     average coordinates within concept groups (needs `lib`)
Interpretation sparsify(const Eigen::Ref<const Eigen::VectorXd>& coords,
                        double s, SparsifyMode mode,
                        const ConceptLibrary* lib = nullptr,
                        std::uint64_t seed = 0);

Eigen::MatrixXd sparsify_batch(const Eigen::Ref<const Eigen::MatrixXd>& coords,
                               double s, SparsifyMode mode,
                               const ConceptGrouping* grouping = nullptr);

Eigen::VectorXd apply_grouping(const Eigen::Ref<const Eigen::VectorXd>& coords,
                               const ConceptGrouping& grouping);

struct ConceptContribution {
  std::string name;
  int index = 0;
  double contribution = 0.0;
};

struct Explanation {
  int predicted = 0;
  std::vector<ConceptContribution> top;  // sorted by |contribution|, desc
  bool k_clamped = false;  // requested more concepts than available
};

//! Ranks concept contributions w_{j,pred} * interp_j to the predicted
//! class of the interpretation head.
Explanation explain(const Eigen::Ref<const Eigen::VectorXd>& x,
                    const ConceptLibrary& lib, const LinearHead& head,
                    double s, SparsifyMode mode, int top_k,
                    const ConceptGrouping* grouping = nullptr);

struct Intervention {
  int predicted_before = 0;
  int predicted_after = 0;
  Eigen::VectorXd logits_before;
  Eigen::VectorXd logits_after;
};

//! Zeroes the listed interpretation coordinates and reports the effect on
//! the head's prediction.
Intervention intervene(const Eigen::Ref<const Eigen::VectorXd>& x,
                       const ConceptLibrary& lib, const LinearHead& head,
                       double s, SparsifyMode mode,
                       const std::vector<int>& zero_indices,
                       const ConceptGrouping* grouping = nullptr);

}  // namespace iis
