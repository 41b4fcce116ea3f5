#include "iis/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

namespace iis::ad {

namespace {

void check_same_shape(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                      const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw UsageError(std::string(op) + ": shape mismatch");
  }
}

}  // namespace

Tape::Node& Tape::node(Value v) {
  if (v.idx < 0 || std::size_t(v.idx) >= nodes_.size()) {
    throw UsageError("tape: dangling value handle");
  }
  return nodes_[std::size_t(v.idx)];
}

const Tape::Node& Tape::node(Value v) const {
  if (v.idx < 0 || std::size_t(v.idx) >= nodes_.size()) {
    throw UsageError("tape: dangling value handle");
  }
  return nodes_[std::size_t(v.idx)];
}

Value Tape::push(Eigen::MatrixXd val, bool requires_grad,
                 std::function<void(Tape&)> back) {
  Node n;
  n.val = std::move(val);
  n.requires_grad = requires_grad;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Value{int(nodes_.size()) - 1};
}

void Tape::accumulate(Value v, const Eigen::MatrixXd& g) {
  Node& n = node(v);
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

Value Tape::input(Eigen::MatrixXd v, bool requires_grad) {
  return push(std::move(v), requires_grad, nullptr);
}

void Tape::backward(Value root) {
  Node& r = node(root);
  if (r.val.rows() != 1 || r.val.cols() != 1) {
    throw UsageError("backward: root must be a 1x1 scalar");
  }
  for (Node& n : nodes_) n.grad.resize(0, 0);
  r.grad = Eigen::MatrixXd::Ones(1, 1);
  for (int i = root.idx; i >= 0; --i) {
    Node& n = nodes_[std::size_t(i)];
    if (n.grad.size() != 0 && n.back) n.back(*this);
  }
  // Leaves that never received a contribution still expose a defined grad.
  for (Node& n : nodes_) {
    if (n.requires_grad && n.grad.size() == 0) {
      n.grad = Eigen::MatrixXd::Zero(n.val.rows(), n.val.cols());
    }
  }
}

Value Tape::matmul(Value a, Value b) {
  const Eigen::MatrixXd& av = node(a).val;
  const Eigen::MatrixXd& bv = node(b).val;
  if (av.cols() != bv.rows()) throw UsageError("matmul: inner dims differ");
  bool rg = node(a).requires_grad || node(b).requires_grad;
  Value out{int(nodes_.size())};
  return push(av * bv, rg, [a, b, out](Tape& t) {
    const Eigen::MatrixXd& g = t.node(out).grad;
    t.accumulate(a, g * t.node(b).val.transpose());
    t.accumulate(b, t.node(a).val.transpose() * g);
  });
}

Value Tape::add(Value a, Value b) {
  check_same_shape(node(a).val, node(b).val, "add");
  bool rg = node(a).requires_grad || node(b).requires_grad;
  Value out{int(nodes_.size())};
  return push(node(a).val + node(b).val, rg, [a, b, out](Tape& t) {
    const Eigen::MatrixXd& g = t.node(out).grad;
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Value Tape::sub(Value a, Value b) {
  check_same_shape(node(a).val, node(b).val, "sub");
  bool rg = node(a).requires_grad || node(b).requires_grad;
  Value out{int(nodes_.size())};
  return push(node(a).val - node(b).val, rg, [a, b, out](Tape& t) {
    const Eigen::MatrixXd& g = t.node(out).grad;
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

Value Tape::add_row(Value m, Value row) {
  const Eigen::MatrixXd& mv = node(m).val;
  const Eigen::MatrixXd& rv = node(row).val;
  if (rv.rows() != 1 || rv.cols() != mv.cols()) {
    throw UsageError("add_row: row must be 1 x cols(m)");
  }
  bool rg = node(m).requires_grad || node(row).requires_grad;
  Eigen::MatrixXd val = mv;
  val.rowwise() += rv.row(0);
  Value out{int(nodes_.size())};
  return push(std::move(val), rg, [m, row, out](Tape& t) {
    const Eigen::MatrixXd& g = t.node(out).grad;
    t.accumulate(m, g);
    t.accumulate(row, g.colwise().sum());
  });
}

Value Tape::scale(Value a, double k) {
  Value out{int(nodes_.size())};
  return push(node(a).val * k, node(a).requires_grad, [a, k, out](Tape& t) {
    t.accumulate(a, t.node(out).grad * k);
  });
}

Value Tape::mul(Value a, Value b) {
  check_same_shape(node(a).val, node(b).val, "mul");
  bool rg = node(a).requires_grad || node(b).requires_grad;
  Value out{int(nodes_.size())};
  return push(node(a).val.cwiseProduct(node(b).val), rg, [a, b, out](Tape& t) {
    const Eigen::MatrixXd& g = t.node(out).grad;
    t.accumulate(a, g.cwiseProduct(t.node(b).val));
    t.accumulate(b, g.cwiseProduct(t.node(a).val));
  });
}

Value Tape::relu(Value a) {
  Value out{int(nodes_.size())};
  return push(node(a).val.cwiseMax(0.0), node(a).requires_grad,
              [a, out](Tape& t) {
                const Eigen::MatrixXd& g = t.node(out).grad;
                Eigen::MatrixXd mask =
                    (t.node(a).val.array() > 0.0).cast<double>();
                t.accumulate(a, g.cwiseProduct(mask));
              });
}

Value Tape::cube(Value a) {
  Value out{int(nodes_.size())};
  return push(node(a).val.array().cube().matrix(), node(a).requires_grad,
              [a, out](Tape& t) {
                const Eigen::MatrixXd& g = t.node(out).grad;
                Eigen::MatrixXd d = 3.0 * t.node(a).val.array().square().matrix();
                t.accumulate(a, g.cwiseProduct(d));
              });
}

Value Tape::l2_normalize(Value a) {
  const Eigen::MatrixXd& av = node(a).val;
  const double nrm = av.norm();
  if (!(nrm > 1e-300)) throw NumericError("l2_normalize: zero norm");
  Value out{int(nodes_.size())};
  return push(av / nrm, node(a).requires_grad, [a, nrm, out](Tape& t) {
    const Eigen::MatrixXd& g = t.node(out).grad;
    const Eigen::MatrixXd& n = t.node(out).val;
    const double proj = (n.array() * g.array()).sum();
    t.accumulate(a, (g - proj * n) / nrm);
  });
}

Value Tape::dot(Value a, Value b) {
  check_same_shape(node(a).val, node(b).val, "dot");
  bool rg = node(a).requires_grad || node(b).requires_grad;
  Eigen::MatrixXd val(1, 1);
  val(0, 0) = (node(a).val.array() * node(b).val.array()).sum();
  Value out{int(nodes_.size())};
  return push(std::move(val), rg, [a, b, out](Tape& t) {
    const double g = t.node(out).grad(0, 0);
    t.accumulate(a, g * t.node(b).val);
    t.accumulate(b, g * t.node(a).val);
  });
}

Value Tape::sum(Value a) {
  Eigen::MatrixXd val(1, 1);
  val(0, 0) = node(a).val.sum();
  Value out{int(nodes_.size())};
  return push(std::move(val), node(a).requires_grad, [a, out](Tape& t) {
    const double g = t.node(out).grad(0, 0);
    const Eigen::MatrixXd& av = t.node(a).val;
    t.accumulate(a, Eigen::MatrixXd::Constant(av.rows(), av.cols(), g));
  });
}

Value Tape::softmax_rows(Value logits) {
  const Eigen::MatrixXd& z = node(logits).val;
  Eigen::MatrixXd soft(z.rows(), z.cols());
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    Eigen::ArrayXd e = (z.row(r).array() - z.row(r).maxCoeff()).exp();
    soft.row(r) = (e / e.sum()).matrix();
  }
  Value out{int(nodes_.size())};
  return push(std::move(soft), node(logits).requires_grad,
              [logits, out](Tape& t) {
                const Eigen::MatrixXd& g = t.node(out).grad;
                const Eigen::MatrixXd& s = t.node(out).val;
                Eigen::MatrixXd d(s.rows(), s.cols());
                for (Eigen::Index r = 0; r < s.rows(); ++r) {
                  const double inner = g.row(r).dot(s.row(r));
                  d.row(r) =
                      (s.row(r).array() * (g.row(r).array() - inner)).matrix();
                }
                t.accumulate(logits, d);
              });
}

Value Tape::softmax_cross_entropy(Value logits, std::vector<int> labels) {
  const Eigen::MatrixXd& z = node(logits).val;
  const Eigen::Index n = z.rows(), c = z.cols();
  if (Eigen::Index(labels.size()) != n) {
    throw UsageError("softmax_cross_entropy: one label per row required");
  }
  for (int y : labels) {
    if (y < 0 || y >= c) throw UsageError("softmax_cross_entropy: label out of range");
  }
  Eigen::MatrixXd probs(n, c);
  double loss = 0.0;
  for (Eigen::Index r = 0; r < n; ++r) {
    const double m = z.row(r).maxCoeff();
    Eigen::ArrayXd e = (z.row(r).array() - m).exp();
    const double s = e.sum();
    probs.row(r) = (e / s).matrix();
    loss += std::log(s) + m - z(r, labels[std::size_t(r)]);
  }
  Eigen::MatrixXd val(1, 1);
  val(0, 0) = loss / double(n);
  Value out{int(nodes_.size())};
  return push(std::move(val), node(logits).requires_grad,
              [logits, out, probs = std::move(probs),
               labels = std::move(labels)](Tape& t) {
                const double g = t.node(out).grad(0, 0);
                Eigen::MatrixXd d = probs;
                for (Eigen::Index r = 0; r < d.rows(); ++r) {
                  d(r, labels[std::size_t(r)]) -= 1.0;
                }
                t.accumulate(logits, d * (g / double(d.rows())));
              });
}

Value Tape::soft_threshold_rows(Value a, double s,
                                const Eigen::VectorXd* frozen) {
  if (!(s >= 0.0 && s < 1.0)) {
    throw UsageError("soft_threshold_rows: sparsity must lie in [0, 1)");
  }
  const Eigen::MatrixXd& x = node(a).val;
  const Eigen::Index n = x.rows(), m = x.cols();
  if (frozen && frozen->size() != n) {
    throw UsageError("soft_threshold_rows: frozen cutoff count != rows");
  }
  Eigen::VectorXd cut(n);
  if (frozen) {
    cut = *frozen;
  } else {
    const Eigen::Index k = ceil_count(s, m);
    std::vector<double> mags(static_cast<std::size_t>(m));
    for (Eigen::Index r = 0; r < n; ++r) {
      if (k == 0) {
        cut(r) = 0.0;
        continue;
      }
      for (Eigen::Index c = 0; c < m; ++c) mags[std::size_t(c)] = std::abs(x(r, c));
      std::nth_element(mags.begin(), mags.begin() + (k - 1), mags.end());
      cut(r) = mags[std::size_t(k - 1)];
    }
  }
  Eigen::MatrixXd val(n, m);
  for (Eigen::Index r = 0; r < n; ++r) {
    for (Eigen::Index c = 0; c < m; ++c) {
      val(r, c) = x(r, c) * std::max(std::abs(x(r, c)) - cut(r), 0.0);
    }
  }
  Value out{int(nodes_.size())};
  Value res = push(std::move(val), node(a).requires_grad,
                   [a, out, cut](Tape& t) {
                     const Eigen::MatrixXd& g = t.node(out).grad;
                     const Eigen::MatrixXd& x = t.node(a).val;
                     Eigen::MatrixXd d(x.rows(), x.cols());
                     for (Eigen::Index r = 0; r < x.rows(); ++r) {
                       for (Eigen::Index c = 0; c < x.cols(); ++c) {
                         const double ax = std::abs(x(r, c));
                         d(r, c) = ax > cut(r) ? 2.0 * ax - cut(r) : 0.0;
                       }
                     }
                     t.accumulate(a, g.cwiseProduct(d));
                   });
  node(res).aux = cut;
  return res;
}

const Eigen::VectorXd& Tape::cutoffs(Value v) const {
  const Node& n = node(v);
  if (n.aux.size() == 0) {
    throw UsageError("cutoffs: node has no recorded cutoffs");
  }
  return n.aux;
}

Value Tape::gumbel_softmax_st_rows(Value logits, double temperature,
                                   RandomSource& rng) {
  if (!(temperature > 0.0)) {
    throw UsageError("gumbel_softmax_st_rows: temperature must be positive");
  }
  const Eigen::MatrixXd& z = node(logits).val;
  const Eigen::Index n = z.rows(), m = z.cols();
  Eigen::MatrixXd soft(n, m);
  Eigen::MatrixXd hard = Eigen::MatrixXd::Zero(n, m);
  for (Eigen::Index r = 0; r < n; ++r) {
    Eigen::ArrayXd pert(m);
    for (Eigen::Index c = 0; c < m; ++c) pert(c) = z(r, c) + rng.gumbel();
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < m; ++c) {
      if (pert(c) > pert(best)) best = c;
    }
    hard(r, best) = 1.0;
    Eigen::ArrayXd u = pert / temperature;
    u -= u.maxCoeff();
    Eigen::ArrayXd e = u.exp();
    soft.row(r) = (e / e.sum()).matrix();
  }
  Value out{int(nodes_.size())};
  return push(std::move(hard), node(logits).requires_grad,
              [logits, out, temperature, soft = std::move(soft)](Tape& t) {
                const Eigen::MatrixXd& g = t.node(out).grad;
                Eigen::MatrixXd d(soft.rows(), soft.cols());
                for (Eigen::Index r = 0; r < soft.rows(); ++r) {
                  const double inner = g.row(r).dot(soft.row(r));
                  d.row(r) = (soft.row(r).array() *
                              (g.row(r).array() - inner) / temperature)
                                 .matrix();
                }
                t.accumulate(logits, d);
              });
}

}  // namespace iis::ad
