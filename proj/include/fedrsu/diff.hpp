#pragma once

// Minimal reverse-mode differentiation over dense matrices.
//
// A Tape records nodes in creation order, so record order is a topological
// order and backward() is a single reverse sweep. Selection-type operations
// (gather with indices computed in the forward pass) pass gradient only to the
// selected entries; this is how nearest-neighbour minima are differentiated.

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <vector>

namespace fedrsu::diff {

using Matrix = Eigen::MatrixXd;

class Tape;

/// Handle to a recorded node.
class Var {
 public:
  Var() = default;
  int id() const { return id_; }
  bool valid() const { return id_ >= 0; }

 private:
  friend class Tape;
  explicit Var(int id) : id_(id) {}
  int id_ = -1;
};

class Gradients {
 public:
  /// Gradient of the differentiated output w.r.t. `v`; zeros when unreached.
  Matrix of(Var v) const;

 private:
  friend class Tape;
  std::vector<Matrix> grads_;
  std::vector<std::pair<Eigen::Index, Eigen::Index>> shapes_;
};

class Tape {
 public:
  /// Leaf that receives gradients.
  Var parameter(Matrix value);
  /// Leaf without gradient.
  Var constant(Matrix value);

  const Matrix& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id())].value; }
  double scalar(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  /// Elementwise product.
  Var mul(Var a, Var b);
  Var scale(Var a, double s);
  Var matmul(Var a, Var b);
  Var transpose(Var a);
  /// m + 1 * row, for a 1 x cols row vector.
  Var add_row(Var m, Var row);
  Var exp(Var a);
  Var relu(Var a);
  Var tanh(Var a);
  /// 1 x 1 sum of all entries.
  Var sum(Var a);
  /// rows x 1 per-row sums.
  Var row_sum(Var a);
  /// Rows of `a` picked by `indices` (repeats allowed); gradient scatters back.
  Var gather_rows(Var a, std::vector<int> indices);
  /// Column concatenation of equally tall blocks.
  Var concat_cols(const std::vector<Var>& parts);
  /// Row-wise softmax.
  Var row_softmax(Var a);
  /// Each row divided by max(||row||, floor).
  Var row_normalize(Var a, double floor);
  /// rows x 1 squared row norms.
  Var row_squared_norm(Var a);
  /// m scaled row-wise: out(i, j) = m(i, j) * w(i); `w` is a rows x 1 column.
  Var scale_rows(Var m, Var w);

  /// Reverse sweep from a 1 x 1 node. Throws std::invalid_argument otherwise.
  Gradients backward(Var output) const;

 private:
  using Backprop = std::function<void(const Tape&, const Matrix& upstream, std::vector<Matrix>& grads)>;

  struct Node {
    Matrix value;
    bool requires_grad = false;
    Backprop backprop;
  };

  Var push(Matrix value, bool requires_grad, Backprop backprop);
  bool needs(Var v) const { return nodes_[static_cast<std::size_t>(v.id())].requires_grad; }
  void check(Var v) const;

  std::vector<Node> nodes_;
};

/// Objective with analytic gradient: returns the value and, when `grad` is
/// non-null, writes the gradient (same size as the argument).
using Objective = std::function<double(const Eigen::VectorXd& x, Eigen::VectorXd* grad)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::vector<Eigen::Index> coordinates;
  Eigen::VectorXd analytic;
  Eigen::VectorXd numeric;
};

/// Central finite differences on `samples` randomly chosen coordinates.
/// Relative error per coordinate: |analytic - numeric| / max(1e-8, |numeric|).
GradCheckResult grad_check(const Objective& objective, const Eigen::VectorXd& x, double eps, int samples,
                           std::uint64_t seed);

}  // namespace fedrsu::diff
