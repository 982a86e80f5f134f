#include "fedrsu/diff.hpp"
#include "fedrsu/rng.hpp"

#include <doctest.h>

#include <cmath>

using namespace fedrsu;
using namespace fedrsu::diff;

namespace {

Matrix scalar(double v) { return Matrix::Constant(1, 1, v); }

Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-1.0, 1.0);
  return m;
}

}  // namespace

TEST_CASE("backward on scalar functions") {
  {
    Tape t;
    const Var x = t.parameter(scalar(3.0));
    CHECK(t.backward(x).of(x)(0, 0) == 1.0);
  }
  {
    Tape t;
    const Var x = t.parameter(scalar(3.0));
    CHECK(t.backward(t.mul(x, x)).of(x)(0, 0) == 6.0);
  }
  {
    Tape t;
    const Var x = t.parameter(scalar(2.0));
    const Var y = t.parameter(scalar(0.0));
    const auto g = t.backward(t.add(t.mul(x, y), t.exp(y)));
    CHECK(g.of(x)(0, 0) == 0.0);
    CHECK(g.of(y)(0, 0) == 3.0);
  }
}

TEST_CASE("backward rejects non-scalar outputs") {
  Tape t;
  const Var x = t.parameter(Matrix::Ones(2, 1));
  CHECK_THROWS_AS(t.backward(x), std::invalid_argument);
}

TEST_CASE("unreached leaves get zero gradient") {
  Tape t;
  const Var x = t.parameter(Matrix::Ones(2, 2));
  const Var y = t.parameter(Matrix::Ones(3, 1));
  const auto g = t.backward(t.sum(x));
  CHECK(g.of(y).isZero(0.0));
  CHECK(g.of(y).rows() == 3);
}

TEST_CASE("grad_check on simple objectives") {
  const Objective quad = [](const Eigen::VectorXd& x, Eigen::VectorXd* g) {
    if (g) *g = 2.0 * x;
    return x.squaredNorm();
  };
  Eigen::VectorXd x0(5);
  x0 << 0.3, -1.2, 2.0, 0.7, -0.1;
  CHECK(grad_check(quad, x0, 1e-5, 5, 1).max_relative_error < 1e-8);

  const Objective constant = [](const Eigen::VectorXd& x, Eigen::VectorXd* g) {
    if (g) *g = Eigen::VectorXd::Zero(x.size());
    return 4.0;
  };
  const auto r = grad_check(constant, x0, 1e-5, 5, 1);
  CHECK(r.analytic.isZero(0.0));
  CHECK(r.numeric.cwiseAbs().maxCoeff() <= 1e-8);
}

TEST_CASE("every tape op passes a finite-difference check") {
  Rng rng(5);
  const Matrix a0 = random_matrix(rng, 4, 3);
  const Matrix b0 = random_matrix(rng, 3, 5);
  const Matrix row0 = random_matrix(rng, 1, 5);
  const Matrix w0 = random_matrix(rng, 4, 1);

  // One composite expression touching every op.
  const Objective f = [&](const Eigen::VectorXd& x, Eigen::VectorXd* g) {
    Tape t;
    const Var a = t.parameter(Eigen::Map<const Matrix>(x.data(), 4, 3));
    const Var b = t.parameter(Eigen::Map<const Matrix>(x.data() + 12, 3, 5));
    const Var row = t.constant(row0);
    const Var w = t.constant(w0);
    Var m = t.add_row(t.matmul(a, b), row);  // 4 x 5
    m = t.tanh(m);
    const Var sm = t.row_softmax(t.scale(m, 3.0));
    const Var nrm = t.row_normalize(t.relu(t.sub(m, t.scale(m, 0.3))), 1e-12);
    const Var g1 = t.gather_rows(sm, {0, 2, 2, 3});
    const Var cat = t.concat_cols({g1, nrm});
    const Var prod = t.mul(cat, t.exp(t.scale(cat, -0.5)));
    const Var sq = t.row_squared_norm(t.transpose(t.transpose(prod)));
    const Var rs = t.row_sum(t.scale_rows(prod, w));
    const Var out = t.add(t.sum(sq), t.sum(t.mul(rs, rs)));
    if (g) {
      const auto grads = t.backward(out);
      g->resize(x.size());
      const Matrix ga = grads.of(a);
      const Matrix gb = grads.of(b);
      g->head(12) = Eigen::Map<const Eigen::VectorXd>(ga.data(), 12);
      g->tail(15) = Eigen::Map<const Eigen::VectorXd>(gb.data(), 15);
    }
    return t.scalar(out);
  };
  Eigen::VectorXd x(27);
  x.head(12) = Eigen::Map<const Eigen::VectorXd>(a0.data(), 12);
  x.tail(15) = Eigen::Map<const Eigen::VectorXd>(b0.data(), 15);
  CHECK(grad_check(f, x, 1e-6, 27, 2).max_relative_error < 1e-6);
}
