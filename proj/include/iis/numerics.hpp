#pragma once

#include <Eigen/Core>

#include <functional>
#include <vector>

#include "iis/autodiff.hpp"
#include "iis/common.hpp"

namespace iis {

//! Numerically stable softmax (max-shifted).
Eigen::VectorXd softmax(const Eigen::Ref<const Eigen::VectorXd>& logits);
Eigen::MatrixXd softmax_rows(const Eigen::Ref<const Eigen::MatrixXd>& logits);

//! Cross-entropy of a probability vector against an integer label.
//! `probs` must be a valid distribution (entries >= 0, summing to 1).
double cross_entropy(const Eigen::Ref<const Eigen::VectorXd>& probs, int label);

//! Per-row soft-threshold cutoffs at sparsity `s`: the ceil(s*M)-th smallest
//! magnitude of each row (0 when that count is zero).
Eigen::VectorXd soft_threshold_cutoffs(
    const Eigen::Ref<const Eigen::MatrixXd>& rows, double s);

struct GumbelSample {
  Eigen::VectorXd hard;  // exact one-hot
  Eigen::VectorXd soft;  // softmax((logits + g) / temperature)
  int index = 0;
};

GumbelSample gumbel_softmax_st(const Eigen::Ref<const Eigen::VectorXd>& logits,
                               double temperature, RandomSource& rng);

enum class OptimKind { sgd, adam };

//! One optimizer slot per parameter matrix. Moment buffers are sized lazily
//! on first use. `weight_decay` is decoupled (applied directly to params),
//! so adam + weight_decay is AdamW.
struct OptimizerState {
  OptimKind kind = OptimKind::sgd;
  double learning_rate = 0.01;
  double momentum = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
  long step_count = 0;
  Eigen::MatrixXd m;
  Eigen::MatrixXd v;
};

void optimizer_step(Eigen::MatrixXd& params,
                    const Eigen::Ref<const Eigen::MatrixXd>& grads,
                    OptimizerState& state);

double exponential_decay(double base_lr, double rate, long epoch);
//! Linear warmup over the first `warmup_frac` of steps, cosine decay after.
double cosine_warmup(double base_lr, long step, long total_steps,
                     double warmup_frac);

//! Trapezoid mean of a curve: integral of y over x, normalized by the x
//! span. xs must be strictly increasing with at least two points. A
//! constant curve returns that constant exactly.
double curve_area_mean(const std::vector<double>& xs,
                       const std::vector<double>& ys);

//! Builds a scalar graph from leaf values; used by finite_difference_check
//! so both the analytic and the perturbed evaluations share one recipe.
using GraphBuilder =
    std::function<ad::Value(ad::Tape&, const std::vector<ad::Value>&)>;

//! Central-difference gradient check. Returns the max relative error over
//! all leaf coordinates, comparing tape gradients against
//! (f(x+eps) - f(x-eps)) / (2 eps). `epsilon` must lie in [1e-7, 1e-3].
double finite_difference_check(const GraphBuilder& build,
                               const std::vector<Eigen::MatrixXd>& point,
                               double epsilon = 1e-5);

}  // namespace iis
