#include "iis/interpret.hpp"

#include <algorithm>
#include <cmath>

#include "iis/concept_library.hpp"
#include "iis/numerics.hpp"

namespace iis {

std::string sparsify_mode_name(SparsifyMode m) {
  switch (m) {
    case SparsifyMode::ascending: return "ascending";
    case SparsifyMode::descending: return "descending";
    case SparsifyMode::hard_threshold: return "hard_threshold";
    case SparsifyMode::clustering: return "clustering";
  }
  return "ascending";
}

SparsifyMode sparsify_mode_from_name(const std::string& name) {
  if (name == "ascending") return SparsifyMode::ascending;
  if (name == "descending") return SparsifyMode::descending;
  if (name == "hard_threshold" || name == "hard") return SparsifyMode::hard_threshold;
  if (name == "clustering") return SparsifyMode::clustering;
  throw UsageError("unknown sparsify mode: " + name);
}

Eigen::VectorXd project(const Eigen::Ref<const Eigen::VectorXd>& x,
                        const ConceptLibrary& lib) {
  if (x.size() != lib.dim()) {
    throw UsageError("project: representation dimension != library dimension");
  }
  return lib.vectors * x;
}

Eigen::MatrixXd project_batch(const Eigen::Ref<const Eigen::MatrixXd>& X,
                              const ConceptLibrary& lib) {
  if (X.cols() != lib.dim()) {
    throw UsageError("project: representation dimension != library dimension");
  }
  return X * lib.vectors.transpose();
}

namespace {

void check_sparsity(double s) {
  if (!(s >= 0.0 && s < 1.0)) {
    throw UsageError("sparsify: sparsity ratio must lie in [0, 1)");
  }
}

//! Cutoff magnitudes for one vector. Ascending uses the k-th smallest with
//! k = ceil(s*M) (0 when k = 0); descending mirrors it with the k-th
//! largest, clamping k to at least 1 so the rule stays scale-covariant.
double ascending_cutoff(const Eigen::Ref<const Eigen::VectorXd>& v, double s) {
  const Eigen::Index k = ceil_count(s, v.size());
  if (k == 0) return 0.0;
  std::vector<double> mags(static_cast<std::size_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) mags[std::size_t(i)] = std::abs(v(i));
  std::nth_element(mags.begin(), mags.begin() + (k - 1), mags.end());
  return mags[std::size_t(k - 1)];
}

double descending_cutoff(const Eigen::Ref<const Eigen::VectorXd>& v, double s) {
  Eigen::Index k = ceil_count(s, v.size());
  if (k < 1) k = 1;
  std::vector<double> mags(static_cast<std::size_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) mags[std::size_t(i)] = std::abs(v(i));
  std::nth_element(mags.begin(), mags.begin() + (k - 1), mags.end(),
                   std::greater<double>());
  return mags[std::size_t(k - 1)];
}

Eigen::VectorXd sparsify_values(const Eigen::Ref<const Eigen::VectorXd>& v,
                                double s, SparsifyMode mode) {
  Eigen::VectorXd out(v.size());
  switch (mode) {
    case SparsifyMode::ascending: {
      const double t = ascending_cutoff(v, s);
      for (Eigen::Index i = 0; i < v.size(); ++i) {
        out(i) = v(i) * std::max(std::abs(v(i)) - t, 0.0);
      }
      break;
    }
    case SparsifyMode::hard_threshold: {
      const double t = ascending_cutoff(v, s);
      for (Eigen::Index i = 0; i < v.size(); ++i) {
        out(i) = std::abs(v(i)) > t ? v(i) : 0.0;
      }
      break;
    }
    case SparsifyMode::descending: {
      const double t = descending_cutoff(v, s);
      for (Eigen::Index i = 0; i < v.size(); ++i) {
        out(i) = v(i) * std::max(t - std::abs(v(i)), 0.0);
      }
      break;
    }
    case SparsifyMode::clustering:
      throw UsageError("sparsify: clustering mode needs a concept grouping");
  }
  return out;
}

}  // namespace

ConceptGrouping cluster_concepts(const ConceptLibrary& lib, double s,
                                 std::uint64_t seed) {
  check_sparsity(s);
  validate_library(lib);
  const Eigen::Index m = lib.m();
  Eigen::Index k = Eigen::Index(std::ceil((1.0 - s) * double(m) - 1e-9));
  if (k < 1) k = 1;
  if (k > m) k = m;
  RandomSource rng(seed);
  KMeansResult km = kmeans(lib.vectors, int(k), rng);
  ConceptGrouping g;
  g.group_of = km.assignment;
  g.n_groups = int(k);
  for (Eigen::Index j = 0; j < k; ++j) {
    g.names.push_back("group" + std::to_string(j));
  }
  return g;
}

Eigen::VectorXd apply_grouping(const Eigen::Ref<const Eigen::VectorXd>& coords,
                               const ConceptGrouping& grouping) {
  if (coords.size() != Eigen::Index(grouping.group_of.size())) {
    throw UsageError("grouping: coordinate count != grouped concept count");
  }
  Eigen::VectorXd out = Eigen::VectorXd::Zero(grouping.n_groups);
  Eigen::VectorXd counts = Eigen::VectorXd::Zero(grouping.n_groups);
  for (Eigen::Index i = 0; i < coords.size(); ++i) {
    out(grouping.group_of[std::size_t(i)]) += coords(i);
    counts(grouping.group_of[std::size_t(i)]) += 1.0;
  }
  for (Eigen::Index g = 0; g < out.size(); ++g) {
    if (counts(g) > 0.0) out(g) /= counts(g);
  }
  return out;
}

Interpretation sparsify(const Eigen::Ref<const Eigen::VectorXd>& coords,
                        double s, SparsifyMode mode, const ConceptLibrary* lib,
                        std::uint64_t seed) {
  check_sparsity(s);
  ensure_finite(coords, "sparsify");
  Interpretation out;
  out.sparsity = s;
  out.mode = mode;
  if (mode == SparsifyMode::clustering) {
    if (lib == nullptr) {
      throw UsageError("sparsify: clustering mode requires a library handle");
    }
    if (coords.size() != lib->m()) {
      throw UsageError("sparsify: coordinate count != library size");
    }
    ConceptGrouping g = cluster_concepts(*lib, s, seed);
    out.values = apply_grouping(coords, g);
  } else {
    out.values = sparsify_values(coords, s, mode);
  }
  for (Eigen::Index i = 0; i < out.values.size(); ++i) {
    if (out.values(i) != 0.0) out.active.push_back(int(i));
  }
  return out;
}

Eigen::MatrixXd sparsify_batch(const Eigen::Ref<const Eigen::MatrixXd>& coords,
                               double s, SparsifyMode mode,
                               const ConceptGrouping* grouping) {
  check_sparsity(s);
  ensure_finite(coords, "sparsify");
  if (mode == SparsifyMode::clustering) {
    if (grouping == nullptr) {
      throw UsageError("sparsify: clustering mode requires a concept grouping");
    }
    Eigen::MatrixXd out(coords.rows(), grouping->n_groups);
    for (Eigen::Index r = 0; r < coords.rows(); ++r) {
      out.row(r) = apply_grouping(coords.row(r).transpose(), *grouping).transpose();
    }
    return out;
  }
  Eigen::MatrixXd out(coords.rows(), coords.cols());
  for (Eigen::Index r = 0; r < coords.rows(); ++r) {
    out.row(r) = sparsify_values(coords.row(r).transpose(), s, mode).transpose();
  }
  return out;
}

namespace {

Eigen::VectorXd interpretation_vector(const Eigen::Ref<const Eigen::VectorXd>& x,
                                      const ConceptLibrary& lib, double s,
                                      SparsifyMode mode,
                                      const ConceptGrouping* grouping) {
  Eigen::VectorXd coords = project(x, lib);
  if (mode == SparsifyMode::clustering) {
    if (grouping == nullptr) {
      throw UsageError("clustering mode requires a concept grouping");
    }
    return apply_grouping(coords, *grouping);
  }
  return sparsify_values(coords, s, mode);
}

}  // namespace

Explanation explain(const Eigen::Ref<const Eigen::VectorXd>& x,
                    const ConceptLibrary& lib, const LinearHead& head,
                    double s, SparsifyMode mode, int top_k,
                    const ConceptGrouping* grouping) {
  check_sparsity(s);
  if (top_k < 1) throw UsageError("explain: top_k must be >= 1");
  Eigen::VectorXd interp = interpretation_vector(x, lib, s, mode, grouping);
  if (interp.size() != head.weights.rows()) {
    throw UsageError("explain: head was trained for a different input size");
  }
  Explanation out;
  out.predicted = head_predict(head, interp);

  const std::vector<std::string>& names =
      mode == SparsifyMode::clustering ? grouping->names : lib.names;
  std::vector<ConceptContribution> all(static_cast<std::size_t>(interp.size()));
  for (Eigen::Index j = 0; j < interp.size(); ++j) {
    all[std::size_t(j)] = {names[std::size_t(j)], int(j),
                           interp(j) * head.weights(j, out.predicted)};
  }
  // Stable sort keeps index order among equal magnitudes.
  std::stable_sort(all.begin(), all.end(),
                   [](const ConceptContribution& a, const ConceptContribution& b) {
                     return std::abs(a.contribution) > std::abs(b.contribution);
                   });
  std::size_t k = std::size_t(top_k);
  if (k > all.size()) {
    k = all.size();
    out.k_clamped = true;
  }
  out.top.assign(all.begin(), all.begin() + long(k));
  return out;
}

Intervention intervene(const Eigen::Ref<const Eigen::VectorXd>& x,
                       const ConceptLibrary& lib, const LinearHead& head,
                       double s, SparsifyMode mode,
                       const std::vector<int>& zero_indices,
                       const ConceptGrouping* grouping) {
  check_sparsity(s);
  Eigen::VectorXd interp = interpretation_vector(x, lib, s, mode, grouping);
  if (interp.size() != head.weights.rows()) {
    throw UsageError("intervene: head was trained for a different input size");
  }
  for (int j : zero_indices) {
    if (j < 0 || Eigen::Index(j) >= interp.size()) {
      throw UsageError("intervene: concept index out of range");
    }
  }
  Intervention out;
  out.logits_before = head_logits(head, interp);
  out.predicted_before = head_predict(head, interp);
  Eigen::VectorXd edited = interp;
  for (int j : zero_indices) edited(j) = 0.0;
  out.logits_after = head_logits(head, edited);
  out.predicted_after = head_predict(head, edited);
  return out;
}

}  // namespace iis
