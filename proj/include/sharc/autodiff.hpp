// sharc/autodiff.hpp
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

#ifndef SHARC_AUTODIFF_HPP
#define SHARC_AUTODIFF_HPP

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace sharc::ad {

using Mat = Eigen::MatrixXd;

// Probability clamp used by binary cross entropy so saturated predictions do
// not produce log(0).
inline constexpr double kProbEps = 1e-7;

// A trainable matrix with a persistent gradient accumulator. The group
// selects the learning rate during sgd_step.
struct Parameter {
  enum class Group { frontend, gnn };

  std::string name;
  Group group = Group::gnn;
  Mat value;
  Mat grad;

  Parameter() = default;
  Parameter(std::string n, Group g, Mat v)
      : name(std::move(n)), group(g), value(std::move(v)) {
    grad = Mat::Zero(value.rows(), value.cols());
  }

  void zero_grad() { grad.setZero(); }
};

namespace detail {
inline void check(bool ok, const std::string& op, const std::string& what) {
  if (!ok) throw std::invalid_argument("ad::" + op + ": " + what);
}

inline std::string shape(const Mat& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}
}  // namespace detail

// Reverse-mode tape over dense double matrices. Nodes are recorded in
// creation order, which is a topological order of the graph, so backward()
// is a single reverse sweep touching each node once. Constants and parameter
// references are leaves. All shapes are explicit; the only broadcast is the
// row-wise bias in add_row.
class Tape {
 public:
  struct Node {
    Mat value;
    Mat grad;
    std::function<void(Node&)> back;  // scatter node.grad into parents
  };
  using Ref = Node*;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return nodes_.size(); }

  // ---- leaves ----

  Ref constant(Mat v) {
    return make(std::move(v), nullptr);
  }

  // Leaf aliasing a Parameter: backward accumulates into p.grad.
  Ref param(Parameter& p) {
    Ref n = make(p.value, nullptr);
    Parameter* pp = &p;
    n->back = [pp](Node& self) { pp->grad += self.grad; };
    return n;
  }

  // ---- primitives ----

  Ref matmul(Ref a, Ref b) {
    detail::check(a->value.cols() == b->value.rows(), "matmul",
                  detail::shape(a->value) + " * " + detail::shape(b->value));
    Ref n = make(a->value * b->value, nullptr);
    n->back = [a, b](Node& self) {
      a->grad.noalias() += self.grad * b->value.transpose();
      b->grad.noalias() += a->value.transpose() * self.grad;
    };
    return n;
  }

  Ref add(Ref a, Ref b) {
    detail::check(a->value.rows() == b->value.rows() &&
                      a->value.cols() == b->value.cols(),
                  "add",
                  detail::shape(a->value) + " + " + detail::shape(b->value));
    Ref n = make(a->value + b->value, nullptr);
    n->back = [a, b](Node& self) {
      a->grad += self.grad;
      b->grad += self.grad;
    };
    return n;
  }

  // Row-wise bias: bias is 1xC, added to every row of a.
  Ref add_row(Ref a, Ref bias) {
    detail::check(bias->value.rows() == 1 &&
                      bias->value.cols() == a->value.cols(),
                  "add_row",
                  detail::shape(a->value) + " + " + detail::shape(bias->value));
    Mat v = a->value.rowwise() + bias->value.row(0);
    Ref n = make(std::move(v), nullptr);
    n->back = [a, bias](Node& self) {
      a->grad += self.grad;
      bias->grad.row(0) += self.grad.colwise().sum();
    };
    return n;
  }

  Ref scale(Ref a, double c) {
    Ref n = make(a->value * c, nullptr);
    n->back = [a, c](Node& self) { a->grad += c * self.grad; };
    return n;
  }

  // Concatenate the rows of a and b side by side: [a b].
  Ref hcat(Ref a, Ref b) {
    detail::check(a->value.rows() == b->value.rows(), "hcat",
                  detail::shape(a->value) + " | " + detail::shape(b->value));
    Mat v(a->value.rows(), a->value.cols() + b->value.cols());
    v << a->value, b->value;
    Ref n = make(std::move(v), nullptr);
    const Eigen::Index ca = a->value.cols(), cb = b->value.cols();
    n->back = [a, b, ca, cb](Node& self) {
      a->grad += self.grad.leftCols(ca);
      b->grad += self.grad.rightCols(cb);
    };
    return n;
  }

  Ref gather_rows(Ref a, std::vector<int> idx) {
    for (int i : idx)
      detail::check(i >= 0 && i < a->value.rows(), "gather_rows",
                    "row index out of range");
    Mat v(static_cast<Eigen::Index>(idx.size()), a->value.cols());
    for (std::size_t r = 0; r < idx.size(); ++r)
      v.row(static_cast<Eigen::Index>(r)) = a->value.row(idx[r]);
    Ref n = make(std::move(v), nullptr);
    n->back = [a, idx = std::move(idx)](Node& self) {
      for (std::size_t r = 0; r < idx.size(); ++r)
        a->grad.row(idx[r]) += self.grad.row(static_cast<Eigen::Index>(r));
    };
    return n;
  }

  // Row i of the result is the mean of a's rows listed in sets[i]. Every set
  // must be non-empty (callers substitute {i} for isolated nodes).
  Ref mean_rows_over(Ref a, std::vector<std::vector<int>> sets) {
    Mat v(static_cast<Eigen::Index>(sets.size()), a->value.cols());
    for (std::size_t i = 0; i < sets.size(); ++i) {
      detail::check(!sets[i].empty(), "mean_rows_over", "empty index set");
      Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(a->value.cols());
      for (int j : sets[i]) {
        detail::check(j >= 0 && j < a->value.rows(), "mean_rows_over",
                      "row index out of range");
        acc += a->value.row(j);
      }
      v.row(static_cast<Eigen::Index>(i)) = acc / double(sets[i].size());
    }
    Ref n = make(std::move(v), nullptr);
    n->back = [a, sets = std::move(sets)](Node& self) {
      for (std::size_t i = 0; i < sets.size(); ++i) {
        const double w = 1.0 / double(sets[i].size());
        for (int j : sets[i])
          a->grad.row(j) += w * self.grad.row(static_cast<Eigen::Index>(i));
      }
    };
    return n;
  }

  Ref relu(Ref a) {
    Ref n = make(a->value.cwiseMax(0.0), nullptr);
    n->back = [a](Node& self) {
      a->grad.array() +=
          self.grad.array() * (a->value.array() > 0.0).cast<double>();
    };
    return n;
  }

  Ref sigmoid(Ref a) {
    Mat v = (1.0 + (-a->value.array()).exp()).inverse().matrix();
    Ref n = make(std::move(v), nullptr);
    n->back = [a](Node& self) {
      a->grad.array() += self.grad.array() * self.value.array() *
                         (1.0 - self.value.array());
    };
    return n;
  }

  Ref softmax_rows(Ref a) {
    Mat v = a->value;
    for (Eigen::Index r = 0; r < v.rows(); ++r) {
      Eigen::RowVectorXd row = v.row(r);
      row.array() -= row.maxCoeff();
      Eigen::RowVectorXd e = row.array().exp();
      v.row(r) = e / e.sum();
    }
    Ref n = make(std::move(v), nullptr);
    n->back = [a](Node& self) {
      for (Eigen::Index r = 0; r < self.value.rows(); ++r) {
        const auto p = self.value.row(r).array();
        const auto g = self.grad.row(r).array();
        const double dot = (p * g).sum();
        a->grad.row(r).array() += p * (g - dot);
      }
    };
    return n;
  }

  Ref slice_cols(Ref a, int c0, int n_cols) {
    detail::check(c0 >= 0 && n_cols >= 1 && c0 + n_cols <= a->value.cols(),
                  "slice_cols", "column window out of range");
    Ref n = make(a->value.middleCols(c0, n_cols), nullptr);
    n->back = [a, c0, n_cols](Node& self) {
      a->grad.middleCols(c0, n_cols) += self.grad;
    };
    return n;
  }

  // Sum of all entries -> 1x1.
  Ref sum(Ref a) {
    Mat v(1, 1);
    v(0, 0) = a->value.sum();
    Ref n = make(std::move(v), nullptr);
    n->back = [a](Node& self) {
      a->grad.array() += self.grad(0, 0);
    };
    return n;
  }

  // Pseudo density per node from directed edge probabilities:
  //   d_i = (1 / k_i) * sum over edges e with src[e] == i of
  //         (2 p[e] - 1) * s_edge[e]
  // p is Ex1; the result is Nx1. k_i is the per-node neighbor count (clamped
  // k). Nodes with zero edges get density 0.
  Ref edge_density(Ref p, std::vector<int> src, std::vector<double> s_edge,
                   int num_nodes) {
    detail::check(p->value.cols() == 1, "edge_density", "p must be Ex1");
    detail::check(src.size() == s_edge.size() &&
                      src.size() == static_cast<std::size_t>(p->value.rows()),
                  "edge_density", "edge array length mismatch");
    std::vector<double> count(num_nodes, 0.0);
    for (int i : src) {
      detail::check(i >= 0 && i < num_nodes, "edge_density",
                    "source index out of range");
      count[i] += 1.0;
    }
    Mat v = Mat::Zero(num_nodes, 1);
    for (std::size_t e = 0; e < src.size(); ++e)
      v(src[e], 0) += (2.0 * p->value(static_cast<Eigen::Index>(e), 0) - 1.0) *
                      s_edge[e];
    for (int i = 0; i < num_nodes; ++i)
      if (count[i] > 0.0) v(i, 0) /= count[i];
    Ref n = make(std::move(v), nullptr);
    n->back = [p, src = std::move(src), s_edge = std::move(s_edge),
               count = std::move(count)](Node& self) {
      for (std::size_t e = 0; e < src.size(); ++e) {
        const double k = count[src[e]];
        p->grad(static_cast<Eigen::Index>(e), 0) +=
            self.grad(src[e], 0) * 2.0 * s_edge[e] / k;
      }
    };
    return n;
  }

  // Masked binary cross entropy, summed (not averaged):
  //   sum over entries of -mask * (t log p~ + (1-t) log(1-p~))
  // with p~ clamped to [kProbEps, 1-kProbEps]. Gradient is zero where the
  // clamp is active or the mask is zero.
  Ref bce_sum(Ref p, Mat target, Mat mask) {
    detail::check(p->value.rows() == target.rows() &&
                      p->value.cols() == target.cols() &&
                      mask.rows() == target.rows() &&
                      mask.cols() == target.cols(),
                  "bce_sum", "shape mismatch");
    Mat clamped = p->value.cwiseMax(kProbEps).cwiseMin(1.0 - kProbEps);
    double total = 0.0;
    for (Eigen::Index i = 0; i < clamped.size(); ++i) {
      const double t = target(i), q = clamped(i), m = mask(i);
      if (m != 0.0)
        total -= m * (t * std::log(q) + (1.0 - t) * std::log(1.0 - q));
    }
    Mat v(1, 1);
    v(0, 0) = total;
    Ref n = make(std::move(v), nullptr);
    n->back = [p, target = std::move(target), mask = std::move(mask),
               clamped = std::move(clamped)](Node& self) {
      const double g = self.grad(0, 0);
      for (Eigen::Index i = 0; i < clamped.size(); ++i) {
        const double raw = p->value(i);
        if (mask(i) == 0.0 || raw < kProbEps || raw > 1.0 - kProbEps) continue;
        const double t = target(i), q = clamped(i);
        p->grad(i) += g * mask(i) * (-t / q + (1.0 - t) / (1.0 - q));
      }
    };
    return n;
  }

  // Summed squared error against a constant target -> 1x1.
  Ref sq_err_sum(Ref a, Mat target) {
    detail::check(a->value.rows() == target.rows() &&
                      a->value.cols() == target.cols(),
                  "sq_err_sum", "shape mismatch");
    Mat diff = a->value - target;
    Mat v(1, 1);
    v(0, 0) = diff.squaredNorm();
    Ref n = make(std::move(v), nullptr);
    n->back = [a, diff = std::move(diff)](Node& self) {
      a->grad += 2.0 * self.grad(0, 0) * diff;
    };
    return n;
  }

  // Mean binary cross entropy over all entries (unmasked convenience).
  Ref bce(Ref p, Mat target) {
    const double inv = 1.0 / double(target.size());
    Mat mask = Mat::Ones(target.rows(), target.cols());
    return scale(bce_sum(p, std::move(target), std::move(mask)), inv);
  }

  // Mean squared error convenience.
  Ref mse(Ref a, Mat target) {
    const double inv = 1.0 / double(target.size());
    return scale(sq_err_sum(a, std::move(target)), inv);
  }

  // Reverse sweep from a scalar loss. Returns the number of nodes visited
  // (always the tape length; each node is touched exactly once).
  std::size_t backward(Ref loss) {
    detail::check(loss->value.rows() == 1 && loss->value.cols() == 1,
                  "backward", "loss must be a 1x1 scalar, got " +
                                  detail::shape(loss->value));
    loss->grad(0, 0) = 1.0;
    std::size_t visited = 0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      ++visited;
      Node& n = **it;
      if (n.back) n.back(n);
    }
    return visited;
  }

 private:
  Ref make(Mat v, std::nullptr_t) {
    auto n = std::make_unique<Node>();
    n->value = std::move(v);
    n->grad = Mat::Zero(n->value.rows(), n->value.cols());
    Ref r = n.get();
    nodes_.push_back(std::move(n));
    return r;
  }

  std::vector<std::unique_ptr<Node>> nodes_;
};

// One SGD update: value -= rate(group) * grad, then gradients reset.
// Non-finite gradients abort with a diagnostic naming the parameter.
inline void sgd_step(const std::vector<Parameter*>& params,
                     double lr_frontend, double lr_gnn) {
  for (Parameter* p : params) {
    if (!p->grad.allFinite())
      throw std::runtime_error("sgd_step: non-finite gradient in parameter " +
                               p->name);
  }
  for (Parameter* p : params) {
    const double lr =
        p->group == Parameter::Group::frontend ? lr_frontend : lr_gnn;
    p->value -= lr * p->grad;
    p->zero_grad();
  }
}

}  // namespace sharc::ad

#endif  // SHARC_AUTODIFF_HPP
