#pragma once

#include <Eigen/Core>

#include <functional>
#include <vector>

#include "iis/common.hpp"

namespace iis::ad {

//! Handle into a Tape. Cheap to copy; valid for the lifetime of its tape.
struct Value {
  int idx = -1;
};

//! Reverse-mode tape over dense matrices. Nodes are appended in evaluation
//! order, so a single right-to-left sweep propagates gradients. Scalars are
//! 1x1 matrices; backward() requires a 1x1 root.
//!
//! Straight-through pieces (soft-threshold cutoffs, hard Gumbel assignments)
//! treat the discrete part as constant, which is exactly how the training
//! objectives are differentiated.
class Tape {
 public:
  Value input(Eigen::MatrixXd v, bool requires_grad = true);
  Value constant(Eigen::MatrixXd v) { return input(std::move(v), false); }

  const Eigen::MatrixXd& value(Value v) const { return node(v).val; }
  //! Populated by backward(); zero until then.
  const Eigen::MatrixXd& grad(Value v) const { return node(v).grad; }

  void backward(Value root);

  Value matmul(Value a, Value b);
  Value add(Value a, Value b);
  Value sub(Value a, Value b);
  //! m (n x k) plus a broadcast 1 x k row; the bias-add in linear layers.
  Value add_row(Value m, Value row);
  Value scale(Value a, double k);
  Value mul(Value a, Value b);
  Value relu(Value a);
  Value cube(Value a);
  //! Whole operand normalized as one flat vector: v / ||v||_F.
  Value l2_normalize(Value a);
  //! Frobenius inner product; yields a 1x1 scalar.
  Value dot(Value a, Value b);
  Value sum(Value a);

  //! Row-wise softmax with the full Jacobian in backward.
  Value softmax_rows(Value logits);

  //! Mean softmax cross-entropy over rows of `logits` against integer
  //! labels. Fused for stability; backward is (P - Y) / n.
  Value softmax_cross_entropy(Value logits, std::vector<int> labels);

  //! Row-wise soft threshold at sparsity `s`: each entry becomes
  //! x * max(|x| - t, 0) with t the ceil(s*M)-th smallest |x| of its row.
  //! The cutoff t is a stop-gradient. Pass `frozen` to pin per-row cutoffs
  //! (finite-difference checks need the threshold held at the base point).
  Value soft_threshold_rows(Value a, double s,
                            const Eigen::VectorXd* frozen = nullptr);

  //! Per-row cutoffs computed by the last soft_threshold_rows that produced
  //! node `v`.
  const Eigen::VectorXd& cutoffs(Value v) const;

  //! Gumbel-softmax with straight-through estimator, applied per row.
  //! Forward emits exact one-hot rows (argmax of perturbed logits);
  //! backward flows through softmax((logits + g) / temperature).
  Value gumbel_softmax_st_rows(Value logits, double temperature,
                               RandomSource& rng);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Eigen::MatrixXd val;
    Eigen::MatrixXd grad;
    bool requires_grad = false;
    std::function<void(Tape&)> back;
    Eigen::VectorXd aux;  // op-specific extras (soft-threshold cutoffs)
  };

  Node& node(Value v);
  const Node& node(Value v) const;
  Value push(Eigen::MatrixXd val, bool requires_grad,
             std::function<void(Tape&)> back);
  void accumulate(Value v, const Eigen::MatrixXd& g);

  std::vector<Node> nodes_;
};

}  // namespace iis::ad
