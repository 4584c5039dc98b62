#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "speechanim/numerics.hpp"
#include "speechanim/rng.hpp"

using namespace speechanim;

namespace {

Matrix random_matrix(Rng& rng, Index rows, Index cols, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) m(i, j) = rng.normal(0.0, scale);
  }
  return m;
}

}  // namespace

TEST_CASE("matmul agrees with a hand-rolled triple loop") {
  Rng rng(1);
  const Matrix a = random_matrix(rng, 4, 6);
  const Matrix b = random_matrix(rng, 6, 3);
  const Matrix c = matmul(a, b);
  REQUIRE(c.rows() == 4);
  REQUIRE(c.cols() == 3);
  for (Index i = 0; i < 4; ++i) {
    for (Index j = 0; j < 3; ++j) {
      double s = 0.0;
      for (Index k = 0; k < 6; ++k) s += a(i, k) * b(k, j);
      CHECK(c(i, j) == doctest::Approx(s).epsilon(1e-12));
    }
  }
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
  const Matrix a = Matrix::Zero(2, 3);
  const Matrix b = Matrix::Zero(4, 2);
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
}

TEST_CASE("matmul_backward passes finite differences") {
  Rng rng(2);
  const Matrix a = random_matrix(rng, 5, 4);
  const Matrix b = random_matrix(rng, 4, 3);
  const Matrix w = random_matrix(rng, 5, 3);  // fixed weighting => scalar loss

  Matrix da = Matrix::Zero(5, 4), db = Matrix::Zero(4, 3);
  matmul_backward(a, b, w, da, db);

  const auto loss_a = [&](const Matrix& x) { return (matmul(x, b).array() * w.array()).sum(); };
  const auto loss_b = [&](const Matrix& x) { return (matmul(a, x).array() * w.array()).sum(); };
  CHECK(grad_check(loss_a, a, da) < 1e-7);
  CHECK(grad_check(loss_b, b, db) < 1e-7);
}

TEST_CASE("matmul_backward accumulates instead of overwriting") {
  Rng rng(3);
  const Matrix a = random_matrix(rng, 2, 2);
  const Matrix b = random_matrix(rng, 2, 2);
  const Matrix dc = random_matrix(rng, 2, 2);
  Matrix da = Matrix::Ones(2, 2), db = Matrix::Ones(2, 2);
  matmul_backward(a, b, dc, da, db);
  const Matrix expect_da = Matrix::Ones(2, 2) + dc * b.transpose();
  CHECK((da - expect_da).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("softmax rows sum to one and are shift-invariant") {
  Rng rng(4);
  const Matrix x = random_matrix(rng, 6, 5, 3.0);
  const Matrix y = softmax_rows(x);
  for (Index i = 0; i < y.rows(); ++i) {
    CHECK(y.row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
    for (Index j = 0; j < y.cols(); ++j) CHECK(y(i, j) > 0.0);
  }
  // shifting a row by a constant must not change the output
  Matrix xs = x;
  xs.row(2).array() += 1234.5;
  const Matrix ys = softmax_rows(xs);
  CHECK((ys.row(2) - y.row(2)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("softmax survives large magnitudes") {
  Matrix x(1, 3);
  x << 1e5, 1e5 + 1, 1e5 - 2;
  const Matrix y = softmax_rows(x);
  CHECK(std::isfinite(y.sum()));
  CHECK(y.sum() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(y(0, 1) > y(0, 0));
  CHECK(y(0, 0) > y(0, 2));
}

TEST_CASE("causal softmax: exact zeros above the diagonal, prefix softmax below") {
  Rng rng(5);
  const Matrix x = random_matrix(rng, 7, 7);
  const Matrix y = softmax_rows(x, true);
  for (Index t = 0; t < 7; ++t) {
    for (Index j = t + 1; j < 7; ++j) CHECK(y(t, j) == 0.0);  // exact
    // row t equals the softmax of the truncated prefix, computed independently
    double denom = 0.0;
    double m = -1e300;
    for (Index j = 0; j <= t; ++j) m = std::max(m, x(t, j));
    for (Index j = 0; j <= t; ++j) denom += std::exp(x(t, j) - m);
    for (Index j = 0; j <= t; ++j) {
      CHECK(y(t, j) == doctest::Approx(std::exp(x(t, j) - m) / denom).epsilon(1e-12));
    }
  }
}

TEST_CASE("causal softmax requires a square matrix") {
  CHECK_THROWS_AS(softmax_rows(Matrix::Zero(3, 4), true), ShapeError);
}

TEST_CASE("softmax_rows_backward passes finite differences (full and causal)") {
  Rng rng(6);
  for (const bool causal : {false, true}) {
    const Matrix x = random_matrix(rng, 5, 5);
    const Matrix w = random_matrix(rng, 5, 5);
    const Matrix y = softmax_rows(x, causal);
    Matrix dx = Matrix::Zero(5, 5);
    softmax_rows_backward(y, w, causal, dx);
    const auto loss = [&](const Matrix& v) {
      return (softmax_rows(v, causal).array() * w.array()).sum();
    };
    CHECK(grad_check(loss, x, dx) < 1e-7);
    if (causal) {
      for (Index t = 0; t < 5; ++t) {
        for (Index j = t + 1; j < 5; ++j) CHECK(dx(t, j) == 0.0);
      }
    }
  }
}

TEST_CASE("layer_norm normalises each row") {
  Rng rng(7);
  const Matrix x = random_matrix(rng, 8, 16, 2.5);
  const RowVector g = RowVector::Ones(16);
  const RowVector b = RowVector::Zero(16);
  const double eps = 1e-5;
  const Matrix y = layer_norm(x, g, b, eps);
  for (Index i = 0; i < 8; ++i) {
    CHECK(std::fabs(y.row(i).mean()) < 1e-12);
    // biased row variance of the output is sigma^2 / (sigma^2 + eps), exactly
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().sum() / 16.0;
    const double out_var = (y.row(i).array() - y.row(i).mean()).square().sum() / 16.0;
    CHECK(out_var == doctest::Approx(var / (var + eps)).epsilon(1e-10));
  }
}

TEST_CASE("layer_norm applies gain and bias per column") {
  Matrix x(2, 4);
  x << 1, 2, 3, 4, -1, 0, 1, 2;
  RowVector g(4), b(4);
  g << 2, 2, 2, 2;
  b << 10, 20, 30, 40;
  const RowVector ones = RowVector::Ones(4);
  const RowVector zeros = RowVector::Zero(4);
  const Matrix base = layer_norm(x, ones, zeros);
  const Matrix y = layer_norm(x, g, b);
  for (Index i = 0; i < 2; ++i) {
    for (Index j = 0; j < 4; ++j) {
      CHECK(y(i, j) == doctest::Approx(2.0 * base(i, j) + 10.0 * (j + 1)).epsilon(1e-12));
    }
  }
}

TEST_CASE("layer_norm_backward passes finite differences for x, gain, bias") {
  Rng rng(8);
  const Matrix x = random_matrix(rng, 6, 10);
  const RowVector g = random_matrix(rng, 1, 10).row(0);
  const RowVector b = random_matrix(rng, 1, 10).row(0);
  const Matrix w = random_matrix(rng, 6, 10);
  const double eps = 1e-5;

  Matrix dx = Matrix::Zero(6, 10);
  RowVector dg = RowVector::Zero(10), db = RowVector::Zero(10);
  layer_norm_backward(x, g, eps, w, dx, dg, db);

  const auto loss_x = [&](const Matrix& v) {
    return (layer_norm(v, g, b, eps).array() * w.array()).sum();
  };
  CHECK(grad_check(loss_x, x, dx) < 1e-7);

  const auto loss_g = [&](const Matrix& v) {
    return (layer_norm(x, v.row(0), b, eps).array() * w.array()).sum();
  };
  Matrix dg_m(1, 10);
  dg_m.row(0) = dg;
  Matrix g_m(1, 10);
  g_m.row(0) = g;
  CHECK(grad_check(loss_g, g_m, dg_m) < 1e-7);

  const auto loss_b = [&](const Matrix& v) {
    return (layer_norm(x, g, v.row(0), eps).array() * w.array()).sum();
  };
  Matrix db_m(1, 10);
  db_m.row(0) = db;
  Matrix b_m(1, 10);
  b_m.row(0) = b;
  CHECK(grad_check(loss_b, b_m, db_m) < 1e-7);
}

TEST_CASE("grad_check flags a corrupted gradient") {
  Rng rng(9);
  const Matrix x = random_matrix(rng, 3, 3);
  const auto loss = [](const Matrix& v) { return v.array().square().sum(); };
  const Matrix good = 2.0 * x;
  CHECK(grad_check(loss, x, good) < 1e-8);
  Matrix bad = good;
  bad(1, 1) += 0.5;
  CHECK(grad_check(loss, x, bad) > 1e-2);
}
