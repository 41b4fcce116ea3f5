#include "iis/oracles.hpp"

#include <cmath>
#include <limits>
#include <vector>

namespace iis::oracle {

ExhaustiveKMeans exhaustive_kmeans(const Eigen::Ref<const Eigen::MatrixXd>& points,
                                   int k) {
  const Eigen::Index n = points.rows();
  if (n == 0 || n > 10) {
    throw UsageError("exhaustive_kmeans: instance must have 1..10 points");
  }
  if (k < 1 || Eigen::Index(k) > n) {
    throw UsageError("exhaustive_kmeans: k must lie in [1, points]");
  }

  ExhaustiveKMeans best;
  best.sse = std::numeric_limits<double>::infinity();

  std::vector<int> assign(std::size_t(n), 0);
  std::uint64_t total = 1;
  for (Eigen::Index i = 0; i < n; ++i) total *= std::uint64_t(k);

  for (std::uint64_t code = 0; code < total; ++code) {
    std::uint64_t c = code;
    for (Eigen::Index i = 0; i < n; ++i) {
      assign[std::size_t(i)] = int(c % std::uint64_t(k));
      c /= std::uint64_t(k);
    }
    Eigen::MatrixXd centroids = Eigen::MatrixXd::Zero(k, points.cols());
    std::vector<int> counts(std::size_t(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      centroids.row(assign[std::size_t(i)]) += points.row(i);
      counts[std::size_t(assign[std::size_t(i)])] += 1;
    }
    for (int j = 0; j < k; ++j) {
      if (counts[std::size_t(j)] > 0) centroids.row(j) /= double(counts[std::size_t(j)]);
    }
    double sse = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      sse += (points.row(i) - centroids.row(assign[std::size_t(i)])).squaredNorm();
    }
    if (sse < best.sse) {
      best.sse = sse;
      best.assignment = assign;
      best.centroids = centroids;
    }
  }
  return best;
}

Eigen::VectorXd ridge_longdouble(const Eigen::Ref<const Eigen::MatrixXd>& X,
                                 const Eigen::Ref<const Eigen::VectorXd>& y,
                                 double lambda, bool penalize_last) {
  const Eigen::Index n = X.rows(), d = X.cols();
  if (y.size() != n) throw UsageError("ridge_longdouble: row/label mismatch");
  if (lambda < 0.0) throw UsageError("ridge_longdouble: negative lambda");

  // A = X^T X + lambda I (optionally sparing the last diagonal), b = X^T y.
  std::vector<std::vector<long double>> A(
      std::size_t(d), std::vector<long double>(std::size_t(d) + 1, 0.0L));
  for (Eigen::Index i = 0; i < d; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) {
      long double s = 0.0L;
      for (Eigen::Index r = 0; r < n; ++r) {
        s += (long double)(X(r, i)) * (long double)(X(r, j));
      }
      A[std::size_t(i)][std::size_t(j)] = s;
    }
    if (penalize_last || i + 1 < d) {
      A[std::size_t(i)][std::size_t(i)] += (long double)lambda;
    }
    long double b = 0.0L;
    for (Eigen::Index r = 0; r < n; ++r) {
      b += (long double)(X(r, i)) * (long double)(y(r));
    }
    A[std::size_t(i)][std::size_t(d)] = b;
  }

  for (Eigen::Index col = 0; col < d; ++col) {
    Eigen::Index pivot = col;
    for (Eigen::Index r = col + 1; r < d; ++r) {
      if (std::abs((double)A[std::size_t(r)][std::size_t(col)]) >
          std::abs((double)A[std::size_t(pivot)][std::size_t(col)])) {
        pivot = r;
      }
    }
    if (std::abs((double)A[std::size_t(pivot)][std::size_t(col)]) < 1e-200) {
      throw NumericError("ridge_longdouble: singular system");
    }
    std::swap(A[std::size_t(pivot)], A[std::size_t(col)]);
    for (Eigen::Index r = 0; r < d; ++r) {
      if (r == col) continue;
      const long double f =
          A[std::size_t(r)][std::size_t(col)] / A[std::size_t(col)][std::size_t(col)];
      for (Eigen::Index c2 = col; c2 <= d; ++c2) {
        A[std::size_t(r)][std::size_t(c2)] -= f * A[std::size_t(col)][std::size_t(c2)];
      }
    }
  }

  Eigen::VectorXd out(d);
  for (Eigen::Index i = 0; i < d; ++i) {
    out(i) = double(A[std::size_t(i)][std::size_t(d)] /
                    A[std::size_t(i)][std::size_t(i)]);
  }
  return out;
}

Eigen::VectorXd naive_matvec(const Eigen::Ref<const Eigen::MatrixXd>& A,
                             const Eigen::Ref<const Eigen::VectorXd>& x) {
  if (A.cols() != x.size()) throw UsageError("naive_matvec: shape mismatch");
  Eigen::VectorXd out(A.rows());
  for (Eigen::Index r = 0; r < A.rows(); ++r) {
    long double s = 0.0L;
    for (Eigen::Index c = 0; c < A.cols(); ++c) {
      s += (long double)A(r, c) * (long double)x(c);
    }
    out(r) = double(s);
  }
  return out;
}

double trapezoid_mean(const std::vector<double>& xs,
                      const std::vector<double>& ys) {
  if (xs.size() != ys.size() || xs.size() < 2) {
    throw UsageError("trapezoid_mean: need matched arrays with >= 2 points");
  }
  long double area = 0.0L;
  for (std::size_t i = 0; i + 1 < xs.size(); ++i) {
    area += (long double)(xs[i + 1] - xs[i]) * 0.5L *
            ((long double)ys[i] + (long double)ys[i + 1]);
  }
  return double(area / (long double)(xs.back() - xs.front()));
}

double recount_accuracy(const Eigen::Ref<const Eigen::MatrixXd>& weights,
                        const Eigen::Ref<const Eigen::VectorXd>& bias,
                        const Eigen::Ref<const Eigen::MatrixXd>& X,
                        const std::vector<int>& labels) {
  if (labels.size() != std::size_t(X.rows()) || X.rows() == 0) {
    throw UsageError("recount_accuracy: bad instance");
  }
  int hits = 0;
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    int arg = 0;
    double best = -std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < weights.cols(); ++c) {
      long double z = (long double)bias(c);
      for (Eigen::Index d = 0; d < X.cols(); ++d) {
        z += (long double)X(i, d) * (long double)weights(d, c);
      }
      if (double(z) > best) {
        best = double(z);
        arg = int(c);
      }
    }
    if (arg == labels[std::size_t(i)]) ++hits;
  }
  return double(hits) / double(X.rows());
}

double naive_cross_entropy(const Eigen::Ref<const Eigen::MatrixXd>& logits,
                           const std::vector<int>& labels) {
  if (labels.size() != std::size_t(logits.rows()) || logits.rows() == 0) {
    throw UsageError("naive_cross_entropy: bad instance");
  }
  long double total = 0.0L;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    long double mx = logits(r, 0);
    for (Eigen::Index c = 1; c < logits.cols(); ++c) {
      if ((long double)logits(r, c) > mx) mx = logits(r, c);
    }
    long double denom = 0.0L;
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
      denom += expl((long double)logits(r, c) - mx);
    }
    total += logl(denom) + mx - (long double)logits(r, labels[std::size_t(r)]);
  }
  return double(total / (long double)logits.rows());
}

}  // namespace iis::oracle
