#include "iis/synth.hpp"

#include <Eigen/QR>

#include <cmath>
#include <string>

namespace iis {

namespace {

void check_spec(const SynthSpec& s) {
  if (s.dim < 1 || s.m_concepts < 1 || s.m_concepts > s.dim) {
    throw UsageError("synth: need 1 <= m <= dim");
  }
  if (s.n_classes < 2) throw UsageError("synth: need at least two classes");
  if (!(s.rho >= 0.0 && s.rho <= 1.0)) throw UsageError("synth: rho must lie in [0, 1]");
  if (!(s.sigma > 0.0)) throw UsageError("synth: sigma must be positive");
  if (s.train_per_class < 1 || s.val_per_class < 1 || s.test_per_class < 1) {
    throw UsageError("synth: every split needs at least one sample per class");
  }
  if (s.rho < 1.0 && s.m_concepts >= s.dim) {
    throw UsageError("synth: rho < 1 needs m < dim for a complement direction");
  }
}

//! First `want` thin-Q columns of a seeded Gaussian draw: an orthonormal set.
Eigen::MatrixXd orthonormal_columns(Eigen::Index rows, Eigen::Index want,
                                    RandomSource& rng) {
  Eigen::MatrixXd g = rng.gaussian(rows, want);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(rows, want);
  return q;
}

EmbeddingDataset sample_split(const Eigen::MatrixXd& means, int per_class,
                              double sigma, Split split, RandomSource& rng) {
  const int n_classes = int(means.rows());
  const Eigen::Index d = means.cols();
  EmbeddingDataset ds;
  ds.embeddings.resize(Eigen::Index(n_classes) * per_class, d);
  ds.labels.resize(std::size_t(n_classes) * std::size_t(per_class));
  ds.n_classes = n_classes;
  ds.split = split;
  Eigen::Index row = 0;
  for (int c = 0; c < n_classes; ++c) {
    for (int i = 0; i < per_class; ++i) {
      for (Eigen::Index j = 0; j < d; ++j) {
        ds.embeddings(row, j) = means(c, j) + sigma * rng.normal();
      }
      ds.labels[std::size_t(row)] = c;
      ++row;
    }
  }
  return ds;
}

}  // namespace

SynthCorpus generate(const SynthSpec& spec) {
  check_spec(spec);
  RandomSource rng(spec.seed);

  // Planted concepts: m orthonormal directions in R^d.
  RandomSource rng_concepts = rng.fork(1);
  Eigen::MatrixXd c = orthonormal_columns(spec.dim, spec.m_concepts, rng_concepts);

  // Class means: unit vectors splitting energy rho inside span(c) and
  // 1 - rho in the complement. In-span parts come from an orthonormal set
  // of combinations when n_classes <= m (random unit combinations
  // otherwise); complement parts likewise against d - m.
  RandomSource rng_means = rng.fork(2);
  const int n = spec.n_classes;
  Eigen::MatrixXd in_span(spec.dim, n);
  if (Eigen::Index(n) <= spec.m_concepts) {
    in_span = c * orthonormal_columns(spec.m_concepts, n, rng_means);
  } else {
    for (int k = 0; k < n; ++k) {
      Eigen::MatrixXd u = rng_means.gaussian(spec.m_concepts, 1);
      u /= u.norm();
      in_span.col(k) = c * u;
    }
  }
  Eigen::MatrixXd complement = Eigen::MatrixXd::Zero(spec.dim, n);
  if (spec.rho < 1.0) {
    const Eigen::Index free_dims = spec.dim - spec.m_concepts;
    // Extend the concept basis: QR of [c | fresh gaussians] yields columns
    // orthogonal to span(c) after the first m.
    Eigen::MatrixXd ext(spec.dim, spec.m_concepts + std::min<Eigen::Index>(n, free_dims));
    ext.leftCols(spec.m_concepts) = c;
    ext.rightCols(ext.cols() - spec.m_concepts) =
        rng_means.gaussian(spec.dim, ext.cols() - spec.m_concepts);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(ext);
    Eigen::MatrixXd q =
        qr.householderQ() * Eigen::MatrixXd::Identity(spec.dim, ext.cols());
    Eigen::MatrixXd basis = q.rightCols(ext.cols() - spec.m_concepts);
    if (Eigen::Index(n) <= free_dims) {
      complement = basis;  // one orthonormal complement direction per class
    } else {
      for (int k = 0; k < n; ++k) {
        Eigen::MatrixXd u = rng_means.gaussian(basis.cols(), 1);
        u /= u.norm();
        complement.col(k) = basis * u;
      }
    }
  }

  SynthCorpus corpus;
  corpus.class_means.resize(n, spec.dim);
  const double a = std::sqrt(spec.rho), b = std::sqrt(1.0 - spec.rho);
  for (int k = 0; k < n; ++k) {
    corpus.class_means.row(k) =
        (a * in_span.col(k) + b * complement.col(k)).transpose();
  }

  corpus.library.kind = "planted";
  corpus.library.vectors = c.transpose();
  for (Eigen::Index j = 0; j < spec.m_concepts; ++j) {
    corpus.library.names.push_back("axis" + std::to_string(j));
  }
  corpus.library.provenance = {{"seed", spec.seed},
                               {"rho", spec.rho},
                               {"sigma", spec.sigma},
                               {"dim", spec.dim},
                               {"n_classes", n}};
  validate_library(corpus.library);

  RandomSource rng_train = rng.fork(3);
  RandomSource rng_val = rng.fork(4);
  RandomSource rng_test = rng.fork(5);
  corpus.train = sample_split(corpus.class_means, spec.train_per_class,
                              spec.sigma, Split::train, rng_train);
  corpus.val = sample_split(corpus.class_means, spec.val_per_class, spec.sigma,
                            Split::val, rng_val);
  corpus.test = sample_split(corpus.class_means, spec.test_per_class,
                             spec.sigma, Split::test, rng_test);
  validate_embeddings(corpus.train);
  validate_embeddings(corpus.val);
  validate_embeddings(corpus.test);

  // Bayes accuracy by Monte Carlo: equal priors and isotropic equal-norm
  // Gaussians make nearest-mean the optimal rule.
  RandomSource rng_mc = rng.fork(6);
  const int mc_per_class = 4000;
  long hits = 0;
  Eigen::VectorXd x(spec.dim);
  for (int k = 0; k < n; ++k) {
    for (int i = 0; i < mc_per_class; ++i) {
      for (Eigen::Index j = 0; j < spec.dim; ++j) {
        x(j) = corpus.class_means(k, j) + spec.sigma * rng_mc.normal();
      }
      int best = 0;
      double bd = (x.transpose() - corpus.class_means.row(0)).squaredNorm();
      for (int k2 = 1; k2 < n; ++k2) {
        const double d2 = (x.transpose() - corpus.class_means.row(k2)).squaredNorm();
        if (d2 < bd) {
          bd = d2;
          best = k2;
        }
      }
      if (best == k) ++hits;
    }
  }
  corpus.bayes_accuracy = double(hits) / double(n * mc_per_class);
  return corpus;
}

}  // namespace iis
