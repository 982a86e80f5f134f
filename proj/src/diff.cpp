#include "fedrsu/diff.hpp"

#include "fedrsu/rng.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fedrsu::diff {

namespace {

void accumulate(std::vector<Matrix>& grads, int id, const Matrix& g) {
  Matrix& slot = grads[static_cast<std::size_t>(id)];
  if (slot.size() == 0) {
    slot = g;
  } else {
    slot += g;
  }
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

}  // namespace

Matrix Gradients::of(Var v) const {
  const auto i = static_cast<std::size_t>(v.id());
  if (i < grads_.size() && grads_[i].size() != 0) return grads_[i];
  return Matrix::Zero(shapes_.at(i).first, shapes_.at(i).second);
}

void Tape::check(Var v) const {
  if (!v.valid() || static_cast<std::size_t>(v.id()) >= nodes_.size()) {
    throw std::invalid_argument("diff: variable does not belong to this tape");
  }
}

Var Tape::push(Matrix value, bool requires_grad, Backprop backprop) {
  nodes_.push_back(Node{std::move(value), requires_grad, std::move(backprop)});
  return Var(static_cast<int>(nodes_.size()) - 1);
}

Var Tape::parameter(Matrix value) { return push(std::move(value), true, nullptr); }

Var Tape::constant(Matrix value) { return push(std::move(value), false, nullptr); }

double Tape::scalar(Var v) const {
  check(v);
  const Matrix& m = value(v);
  if (m.rows() != 1 || m.cols() != 1) throw std::invalid_argument("diff: value is not a scalar");
  return m(0, 0);
}

Var Tape::add(Var a, Var b) {
  check(a);
  check(b);
  require_same_shape(value(a), value(b), "add");
  const int ia = a.id(), ib = b.id();
  return push(value(a) + value(b), needs(a) || needs(b), [ia, ib](const Tape& t, const Matrix& g, auto& grads) {
    if (t.nodes_[ia].requires_grad) accumulate(grads, ia, g);
    if (t.nodes_[ib].requires_grad) accumulate(grads, ib, g);
  });
}

Var Tape::sub(Var a, Var b) {
  check(a);
  check(b);
  require_same_shape(value(a), value(b), "sub");
  const int ia = a.id(), ib = b.id();
  return push(value(a) - value(b), needs(a) || needs(b), [ia, ib](const Tape& t, const Matrix& g, auto& grads) {
    if (t.nodes_[ia].requires_grad) accumulate(grads, ia, g);
    if (t.nodes_[ib].requires_grad) accumulate(grads, ib, -g);
  });
}

Var Tape::mul(Var a, Var b) {
  check(a);
  check(b);
  require_same_shape(value(a), value(b), "mul");
  const int ia = a.id(), ib = b.id();
  return push(value(a).cwiseProduct(value(b)), needs(a) || needs(b),
              [ia, ib](const Tape& t, const Matrix& g, auto& grads) {
                if (t.nodes_[ia].requires_grad) accumulate(grads, ia, g.cwiseProduct(t.nodes_[ib].value));
                if (t.nodes_[ib].requires_grad) accumulate(grads, ib, g.cwiseProduct(t.nodes_[ia].value));
              });
}

Var Tape::scale(Var a, double s) {
  check(a);
  const int ia = a.id();
  return push(value(a) * s, needs(a), [ia, s](const Tape&, const Matrix& g, auto& grads) {
    accumulate(grads, ia, g * s);
  });
}

Var Tape::matmul(Var a, Var b) {
  check(a);
  check(b);
  if (value(a).cols() != value(b).rows()) throw std::invalid_argument("matmul: inner dimensions differ");
  const int ia = a.id(), ib = b.id();
  return push(value(a) * value(b), needs(a) || needs(b), [ia, ib](const Tape& t, const Matrix& g, auto& grads) {
    if (t.nodes_[ia].requires_grad) accumulate(grads, ia, g * t.nodes_[ib].value.transpose());
    if (t.nodes_[ib].requires_grad) accumulate(grads, ib, t.nodes_[ia].value.transpose() * g);
  });
}

Var Tape::transpose(Var a) {
  check(a);
  const int ia = a.id();
  return push(value(a).transpose(), needs(a), [ia](const Tape&, const Matrix& g, auto& grads) {
    accumulate(grads, ia, g.transpose());
  });
}

Var Tape::add_row(Var m, Var row) {
  check(m);
  check(row);
  if (value(row).rows() != 1 || value(row).cols() != value(m).cols()) {
    throw std::invalid_argument("add_row: expected a 1 x cols row");
  }
  const int im = m.id(), ir = row.id();
  Matrix out = value(m).rowwise() + value(row).row(0);
  return push(std::move(out), needs(m) || needs(row), [im, ir](const Tape& t, const Matrix& g, auto& grads) {
    if (t.nodes_[im].requires_grad) accumulate(grads, im, g);
    if (t.nodes_[ir].requires_grad) accumulate(grads, ir, g.colwise().sum());
  });
}

Var Tape::exp(Var a) {
  check(a);
  const int ia = a.id();
  Matrix out = value(a).array().exp().matrix();
  const int self = static_cast<int>(nodes_.size());
  return push(std::move(out), needs(a), [ia, self](const Tape& t, const Matrix& g, auto& grads) {
    accumulate(grads, ia, g.cwiseProduct(t.nodes_[self].value));
  });
}

Var Tape::relu(Var a) {
  check(a);
  const int ia = a.id();
  return push(value(a).cwiseMax(0.0), needs(a), [ia](const Tape& t, const Matrix& g, auto& grads) {
    const Matrix& x = t.nodes_[ia].value;
    accumulate(grads, ia, (x.array() > 0.0).select(g, 0.0));
  });
}

Var Tape::tanh(Var a) {
  check(a);
  const int ia = a.id();
  Matrix out = value(a).array().tanh().matrix();
  const int self = static_cast<int>(nodes_.size());
  return push(std::move(out), needs(a), [ia, self](const Tape& t, const Matrix& g, auto& grads) {
    const Matrix& y = t.nodes_[self].value;
    accumulate(grads, ia, g.cwiseProduct((1.0 - y.array().square()).matrix()));
  });
}

Var Tape::sum(Var a) {
  check(a);
  const int ia = a.id();
  Matrix out(1, 1);
  out(0, 0) = value(a).sum();
  return push(std::move(out), needs(a), [ia](const Tape& t, const Matrix& g, auto& grads) {
    const Matrix& x = t.nodes_[ia].value;
    accumulate(grads, ia, Matrix::Constant(x.rows(), x.cols(), g(0, 0)));
  });
}

Var Tape::row_sum(Var a) {
  check(a);
  const int ia = a.id();
  return push(value(a).rowwise().sum(), needs(a), [ia](const Tape& t, const Matrix& g, auto& grads) {
    const Matrix& x = t.nodes_[ia].value;
    accumulate(grads, ia, g.replicate(1, x.cols()));
  });
}

Var Tape::gather_rows(Var a, std::vector<int> indices) {
  check(a);
  const Matrix& x = value(a);
  Matrix out(static_cast<Eigen::Index>(indices.size()), x.cols());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const int i = indices[r];
    if (i < 0 || i >= x.rows()) throw std::out_of_range("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(r)) = x.row(i);
  }
  const int ia = a.id();
  return push(std::move(out), needs(a),
              [ia, idx = std::move(indices)](const Tape& t, const Matrix& g, auto& grads) {
                const Matrix& x = t.nodes_[ia].value;
                Matrix scattered = Matrix::Zero(x.rows(), x.cols());
                for (std::size_t r = 0; r < idx.size(); ++r) scattered.row(idx[r]) += g.row(static_cast<Eigen::Index>(r));
                accumulate(grads, ia, scattered);
              });
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  Eigen::Index rows = -1, cols = 0;
  bool grad = false;
  for (Var p : parts) {
    check(p);
    if (rows >= 0 && value(p).rows() != rows) throw std::invalid_argument("concat_cols: row counts differ");
    rows = value(p).rows();
    cols += value(p).cols();
    grad = grad || needs(p);
  }
  Matrix out(rows, cols);
  std::vector<int> ids;
  Eigen::Index c = 0;
  for (Var p : parts) {
    out.middleCols(c, value(p).cols()) = value(p);
    c += value(p).cols();
    ids.push_back(p.id());
  }
  return push(std::move(out), grad, [ids](const Tape& t, const Matrix& g, auto& grads) {
    Eigen::Index col = 0;
    for (int id : ids) {
      const Eigen::Index w = t.nodes_[id].value.cols();
      if (t.nodes_[id].requires_grad) accumulate(grads, id, g.middleCols(col, w));
      col += w;
    }
  });
}

Var Tape::row_softmax(Var a) {
  check(a);
  const Matrix& x = value(a);
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  const int ia = a.id();
  const int self = static_cast<int>(nodes_.size());
  return push(std::move(out), needs(a), [ia, self](const Tape& t, const Matrix& g, auto& grads) {
    const Matrix& y = t.nodes_[self].value;
    const Eigen::VectorXd inner = g.cwiseProduct(y).rowwise().sum();
    Matrix d = y.cwiseProduct(g - inner.replicate(1, g.cols()));
    accumulate(grads, ia, d);
  });
}

Var Tape::row_normalize(Var a, double floor) {
  check(a);
  const Matrix& x = value(a);
  Eigen::VectorXd denom = x.rowwise().norm().cwiseMax(floor);
  Matrix out = x.array().colwise() / denom.array();
  const int ia = a.id();
  const int self = static_cast<int>(nodes_.size());
  return push(std::move(out), needs(a), [ia, self, floor, denom](const Tape& t, const Matrix& g, auto& grads) {
    const Matrix& y = t.nodes_[self].value;
    const Matrix& x = t.nodes_[ia].value;
    Matrix d(g.rows(), g.cols());
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      if (x.row(r).norm() > floor) {
        d.row(r) = (g.row(r) - y.row(r) * y.row(r).dot(g.row(r))) / denom[r];
      } else {
        d.row(r) = g.row(r) / floor;
      }
    }
    accumulate(grads, ia, d);
  });
}

Var Tape::row_squared_norm(Var a) {
  check(a);
  const int ia = a.id();
  return push(value(a).rowwise().squaredNorm(), needs(a), [ia](const Tape& t, const Matrix& g, auto& grads) {
    const Matrix& x = t.nodes_[ia].value;
    accumulate(grads, ia, 2.0 * (x.array().colwise() * g.col(0).array()).matrix());
  });
}

Var Tape::scale_rows(Var m, Var w) {
  check(m);
  check(w);
  if (value(w).cols() != 1 || value(w).rows() != value(m).rows()) {
    throw std::invalid_argument("scale_rows: expected a rows x 1 weight column");
  }
  const int im = m.id(), iw = w.id();
  Matrix out = value(m).array().colwise() * value(w).col(0).array();
  return push(std::move(out), needs(m) || needs(w), [im, iw](const Tape& t, const Matrix& g, auto& grads) {
    const Matrix& mv = t.nodes_[im].value;
    const Matrix& wv = t.nodes_[iw].value;
    if (t.nodes_[im].requires_grad) accumulate(grads, im, (g.array().colwise() * wv.col(0).array()).matrix());
    if (t.nodes_[iw].requires_grad) accumulate(grads, iw, g.cwiseProduct(mv).rowwise().sum());
  });
}

Gradients Tape::backward(Var output) const {
  check(output);
  const Matrix& out = value(output);
  if (out.rows() != 1 || out.cols() != 1) throw std::invalid_argument("backward: output is not a scalar");

  Gradients result;
  result.shapes_.reserve(nodes_.size());
  for (const Node& n : nodes_) result.shapes_.emplace_back(n.value.rows(), n.value.cols());
  result.grads_.assign(nodes_.size(), Matrix());
  if (!nodes_[static_cast<std::size_t>(output.id())].requires_grad) return result;

  result.grads_[static_cast<std::size_t>(output.id())] = Matrix::Ones(1, 1);
  for (int i = output.id(); i >= 0; --i) {
    const Node& node = nodes_[static_cast<std::size_t>(i)];
    const Matrix& g = result.grads_[static_cast<std::size_t>(i)];
    if (!node.requires_grad || !node.backprop || g.size() == 0) continue;
    node.backprop(*this, g, result.grads_);
  }
  return result;
}

GradCheckResult grad_check(const Objective& objective, const Eigen::VectorXd& x, double eps, int samples,
                           std::uint64_t seed) {
  if (!(eps > 0.0)) throw std::invalid_argument("grad_check: eps must be positive");
  GradCheckResult result;
  Eigen::VectorXd analytic(x.size());
  objective(x, &analytic);

  Rng rng(seed);
  const auto n = static_cast<std::uint64_t>(x.size());
  for (int s = 0; s < samples && n > 0; ++s) result.coordinates.push_back(static_cast<Eigen::Index>(rng.index(n)));

  result.analytic.resize(static_cast<Eigen::Index>(result.coordinates.size()));
  result.numeric.resize(result.analytic.size());
  Eigen::VectorXd probe = x;
  for (std::size_t s = 0; s < result.coordinates.size(); ++s) {
    const Eigen::Index i = result.coordinates[s];
    probe[i] = x[i] + eps;
    const double up = objective(probe, nullptr);
    probe[i] = x[i] - eps;
    const double down = objective(probe, nullptr);
    probe[i] = x[i];
    const double numeric = (up - down) / (2.0 * eps);
    const auto si = static_cast<Eigen::Index>(s);
    result.analytic[si] = analytic[i];
    result.numeric[si] = numeric;
    const double rel = std::abs(analytic[i] - numeric) / std::max(1e-8, std::abs(numeric));
    result.max_relative_error = std::max(result.max_relative_error, rel);
  }
  return result;
}

}  // namespace fedrsu::diff
