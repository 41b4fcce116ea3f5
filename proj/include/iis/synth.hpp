#pragma once

#include <Eigen/Core>

#include "iis/common.hpp"
#include "iis/datastore.hpp"

namespace iis {

//! Gaussian class-conditional corpus whose class means split their energy
//! between the span of m orthonormal planted concepts (fraction rho) and
//! its orthogonal complement (fraction 1 - rho).
struct SynthSpec {
  Eigen::Index dim = 32;
  int n_classes = 5;
  Eigen::Index m_concepts = 8;
  int train_per_class = 200;
  int val_per_class = 100;
  int test_per_class = 100;
  double rho = 1.0;
  double sigma = 0.35;
  std::uint64_t seed = 0;
};

struct SynthCorpus {
  EmbeddingDataset train;
  EmbeddingDataset val;
  EmbeddingDataset test;
  ConceptLibrary library;        // the planted orthonormal concepts
  Eigen::MatrixXd class_means;   // n_classes x dim, unit rows
  double bayes_accuracy = 0.0;   // Monte-Carlo estimate
};

SynthCorpus generate(const SynthSpec& spec);

}  // namespace iis
