#include "iis/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace iis {

Eigen::VectorXd softmax(const Eigen::Ref<const Eigen::VectorXd>& logits) {
  if (logits.size() == 0) throw UsageError("softmax: empty input");
  ensure_finite(logits, "softmax");
  Eigen::ArrayXd e = (logits.array() - logits.maxCoeff()).exp();
  return (e / e.sum()).matrix();
}

Eigen::MatrixXd softmax_rows(const Eigen::Ref<const Eigen::MatrixXd>& logits) {
  Eigen::MatrixXd out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    out.row(r) = softmax(logits.row(r).transpose()).transpose();
  }
  return out;
}

double cross_entropy(const Eigen::Ref<const Eigen::VectorXd>& probs,
                     int label) {
  if (label < 0 || label >= probs.size()) {
    throw UsageError("cross_entropy: label out of range");
  }
  if (probs.minCoeff() < -1e-12 || std::abs(probs.sum() - 1.0) > 1e-9) {
    throw UsageError("cross_entropy: input is not a probability vector");
  }
  return -std::log(std::max(probs(label), 1e-300));
}

Eigen::VectorXd soft_threshold_cutoffs(
    const Eigen::Ref<const Eigen::MatrixXd>& rows, double s) {
  if (!(s >= 0.0 && s < 1.0)) {
    throw UsageError("soft_threshold_cutoffs: sparsity must lie in [0, 1)");
  }
  const Eigen::Index k = ceil_count(s, rows.cols());
  Eigen::VectorXd cut = Eigen::VectorXd::Zero(rows.rows());
  if (k == 0) return cut;
  std::vector<double> mags(static_cast<std::size_t>(rows.cols()));
  for (Eigen::Index r = 0; r < rows.rows(); ++r) {
    for (Eigen::Index c = 0; c < rows.cols(); ++c) {
      mags[std::size_t(c)] = std::abs(rows(r, c));
    }
    std::nth_element(mags.begin(), mags.begin() + (k - 1), mags.end());
    cut(r) = mags[std::size_t(k - 1)];
  }
  return cut;
}

GumbelSample gumbel_softmax_st(const Eigen::Ref<const Eigen::VectorXd>& logits,
                               double temperature, RandomSource& rng) {
  if (!(temperature > 0.0)) {
    throw UsageError("gumbel_softmax_st: temperature must be positive");
  }
  if (logits.size() == 0) throw UsageError("gumbel_softmax_st: empty logits");
  Eigen::ArrayXd pert(logits.size());
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    pert(i) = logits(i) + rng.gumbel();
  }
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < pert.size(); ++i) {
    if (pert(i) > pert(best)) best = i;
  }
  GumbelSample out;
  out.index = int(best);
  out.hard = Eigen::VectorXd::Zero(logits.size());
  out.hard(best) = 1.0;
  Eigen::ArrayXd u = pert / temperature;
  u -= u.maxCoeff();
  Eigen::ArrayXd e = u.exp();
  out.soft = (e / e.sum()).matrix();
  return out;
}

void optimizer_step(Eigen::MatrixXd& params,
                    const Eigen::Ref<const Eigen::MatrixXd>& grads,
                    OptimizerState& st) {
  if (params.rows() != grads.rows() || params.cols() != grads.cols()) {
    throw UsageError("optimizer_step: params/grads shape mismatch");
  }
  ensure_finite(grads, "optimizer_step: gradients");
  st.step_count += 1;
  switch (st.kind) {
    case OptimKind::sgd: {
      if (st.momentum > 0.0) {
        if (st.m.size() == 0) st.m = Eigen::MatrixXd::Zero(params.rows(), params.cols());
        st.m = st.momentum * st.m + grads;
        params -= st.learning_rate * st.m;
      } else {
        params -= st.learning_rate * grads;
      }
      break;
    }
    case OptimKind::adam: {
      if (st.m.size() == 0) {
        st.m = Eigen::MatrixXd::Zero(params.rows(), params.cols());
        st.v = Eigen::MatrixXd::Zero(params.rows(), params.cols());
      }
      st.m = st.beta1 * st.m + (1.0 - st.beta1) * grads;
      st.v = st.beta2 * st.v.array().matrix() +
             (1.0 - st.beta2) * grads.array().square().matrix();
      const double bc1 = 1.0 - std::pow(st.beta1, double(st.step_count));
      const double bc2 = 1.0 - std::pow(st.beta2, double(st.step_count));
      Eigen::ArrayXXd mhat = st.m.array() / bc1;
      Eigen::ArrayXXd vhat = st.v.array() / bc2;
      params.array() -= st.learning_rate * mhat / (vhat.sqrt() + st.epsilon);
      break;
    }
  }
  if (st.weight_decay > 0.0) {
    params -= st.learning_rate * st.weight_decay * params;
  }
}

double exponential_decay(double base_lr, double rate, long epoch) {
  return base_lr * std::pow(rate, double(epoch));
}

double cosine_warmup(double base_lr, long step, long total_steps,
                     double warmup_frac) {
  if (total_steps <= 0) throw UsageError("cosine_warmup: total_steps must be positive");
  const long warm = long(double(total_steps) * warmup_frac);
  if (step < warm) {
    return base_lr * double(step + 1) / double(warm);
  }
  const double progress =
      warm >= total_steps
          ? 1.0
          : double(step - warm) / double(total_steps - warm);
  return 0.5 * base_lr * (1.0 + std::cos(3.14159265358979323846 * progress));
}

double curve_area_mean(const std::vector<double>& xs,
                       const std::vector<double>& ys) {
  if (xs.size() != ys.size()) {
    throw UsageError("curve_area_mean: xs/ys length mismatch");
  }
  if (xs.size() < 2) {
    throw UsageError("curve_area_mean: at least two points required");
  }
  double area = 0.0, span = 0.0;
  for (std::size_t i = 0; i + 1 < xs.size(); ++i) {
    const double dx = xs[i + 1] - xs[i];
    if (!(dx > 0.0)) {
      throw UsageError("curve_area_mean: xs must be strictly increasing");
    }
    area += 0.5 * (ys[i] + ys[i + 1]) * dx;
    span += dx;
  }
  return area / span;
}

double finite_difference_check(const GraphBuilder& build,
                               const std::vector<Eigen::MatrixXd>& point,
                               double epsilon) {
  if (!(epsilon >= 1e-7 && epsilon <= 1e-3)) {
    throw UsageError("finite_difference_check: epsilon outside [1e-7, 1e-3]");
  }
  if (point.empty()) throw UsageError("finite_difference_check: no leaves");

  auto eval = [&](const std::vector<Eigen::MatrixXd>& p) {
    ad::Tape t;
    std::vector<ad::Value> leaves;
    leaves.reserve(p.size());
    for (const auto& m : p) leaves.push_back(t.input(m));
    ad::Value root = build(t, leaves);
    const Eigen::MatrixXd& v = t.value(root);
    if (v.rows() != 1 || v.cols() != 1) {
      throw UsageError("finite_difference_check: graph must yield a scalar");
    }
    if (!std::isfinite(v(0, 0))) {
      throw NumericError("finite_difference_check: non-finite objective");
    }
    return v(0, 0);
  };

  // Analytic pass.
  ad::Tape tape;
  std::vector<ad::Value> leaves;
  for (const auto& m : point) leaves.push_back(tape.input(m));
  ad::Value root = build(tape, leaves);
  if (tape.value(root).rows() != 1 || tape.value(root).cols() != 1) {
    throw UsageError("finite_difference_check: graph must yield a scalar");
  }
  if (!std::isfinite(tape.value(root)(0, 0))) {
    throw NumericError("finite_difference_check: non-finite objective");
  }
  tape.backward(root);

  double worst = 0.0;
  std::vector<Eigen::MatrixXd> probe = point;
  for (std::size_t p = 0; p < point.size(); ++p) {
    const Eigen::MatrixXd& g = tape.grad(leaves[p]);
    for (Eigen::Index r = 0; r < point[p].rows(); ++r) {
      for (Eigen::Index c = 0; c < point[p].cols(); ++c) {
        const double keep = probe[p](r, c);
        probe[p](r, c) = keep + epsilon;
        const double hi = eval(probe);
        probe[p](r, c) = keep - epsilon;
        const double lo = eval(probe);
        probe[p](r, c) = keep;
        const double fd = (hi - lo) / (2.0 * epsilon);
        const double an = g(r, c);
        const double err = std::abs(fd - an) / std::max(1.0, std::abs(an));
        worst = std::max(worst, err);
      }
    }
  }
  return worst;
}

}  // namespace iis
