#pragma once

#include <Eigen/Core>

#include <vector>

#include "iis/common.hpp"

// Deliberately naive reference implementations. Each takes a different route
// than the production code (exhaustive search, long-double elimination,
// element loops) so tests can compare the two independently.
namespace iis::oracle {

struct ExhaustiveKMeans {
  double sse = 0.0;
  std::vector<int> assignment;
  Eigen::MatrixXd centroids;
};

//! Globally optimal k-means by enumerating every labeling. Guarded to
//! tiny instances (at most 10 points).
ExhaustiveKMeans exhaustive_kmeans(const Eigen::Ref<const Eigen::MatrixXd>& points,
                                   int k);

//! Ridge regression (X^T X + lambda I) c = X^T y solved by Gaussian
//! elimination with partial pivoting in long double. When `penalize_last`
//! is false the final coefficient (an intercept column) is left unpenalized.
Eigen::VectorXd ridge_longdouble(const Eigen::Ref<const Eigen::MatrixXd>& X,
                                 const Eigen::Ref<const Eigen::VectorXd>& y,
                                 double lambda, bool penalize_last = true);

//! Plain element-loop matrix-vector product with long double accumulation.
Eigen::VectorXd naive_matvec(const Eigen::Ref<const Eigen::MatrixXd>& A,
                             const Eigen::Ref<const Eigen::VectorXd>& x);

//! Trapezoid mean via a bare loop (area / span).
double trapezoid_mean(const std::vector<double>& xs,
                      const std::vector<double>& ys);

//! Accuracy recomputed sample by sample with explicit argmax loops.
double recount_accuracy(const Eigen::Ref<const Eigen::MatrixXd>& weights,
                        const Eigen::Ref<const Eigen::VectorXd>& bias,
                        const Eigen::Ref<const Eigen::MatrixXd>& X,
                        const std::vector<int>& labels);

//! Softmax cross-entropy evaluated term by term in long double.
double naive_cross_entropy(const Eigen::Ref<const Eigen::MatrixXd>& logits,
                           const std::vector<int>& labels);

}  // namespace iis::oracle
