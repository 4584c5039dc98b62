#include "speechanim/numerics.hpp"

#include <cmath>

namespace speechanim {

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a) + " vs " + shape_str(b));
  }
  return a * b;
}

void matmul_backward(const Matrix& a, const Matrix& b, const Matrix& dc, Matrix& da, Matrix& db) {
  if (dc.rows() != a.rows() || dc.cols() != b.cols()) {
    throw ShapeError("matmul_backward: dc has shape " + shape_str(dc) + ", expected " +
                     shape_str(a.rows(), b.cols()));
  }
  require_same_shape(da, a, "matmul_backward(da)");
  require_same_shape(db, b, "matmul_backward(db)");
  da.noalias() += dc * b.transpose();
  db.noalias() += a.transpose() * dc;
}

Matrix softmax_rows(const Matrix& x, bool causal) {
  if (causal && x.rows() != x.cols()) {
    throw ShapeError("softmax_rows: causal mask needs a square matrix, got " + shape_str(x));
  }
  if (x.rows() > 0 && x.cols() == 0) {
    throw ShapeError("softmax_rows: rows are empty: " + shape_str(x));
  }
  Matrix y = Matrix::Zero(x.rows(), x.cols());
  for (Index t = 0; t < x.rows(); ++t) {
    const Index n = causal ? t + 1 : x.cols();
    const auto row = x.row(t).head(n);
    const double m = row.maxCoeff();
    auto out = y.row(t).head(n);
    out.array() = (row.array() - m).exp();
    out /= out.sum();
  }
  return y;
}

void softmax_rows_backward(const Matrix& y, const Matrix& dy, bool causal, Matrix& dx) {
  require_same_shape(y, dy, "softmax_rows_backward");
  require_same_shape(y, dx, "softmax_rows_backward(dx)");
  for (Index t = 0; t < y.rows(); ++t) {
    const Index n = causal ? t + 1 : y.cols();
    const auto yr = y.row(t).head(n).array();
    const auto dyr = dy.row(t).head(n).array();
    const double dot = (yr * dyr).sum();
    dx.row(t).head(n).array() += yr * (dyr - dot);
  }
}

Matrix layer_norm(const Matrix& x, const RowVector& gain, const RowVector& bias, double eps) {
  if (gain.cols() != x.cols() || bias.cols() != x.cols()) {
    throw ShapeError("layer_norm: gain/bias width " + shape_str(gain) + "/" + shape_str(bias) +
                     " does not match input " + shape_str(x));
  }
  Matrix y(x.rows(), x.cols());
  const double n = static_cast<double>(x.cols());
  for (Index t = 0; t < x.rows(); ++t) {
    const double mean = x.row(t).mean();
    const auto centered = x.row(t).array() - mean;
    const double var = centered.square().sum() / n;
    const double inv_sigma = 1.0 / std::sqrt(var + eps);
    y.row(t).array() = centered * inv_sigma * gain.array() + bias.array();
  }
  return y;
}

void layer_norm_backward(const Matrix& x, const RowVector& gain, double eps, const Matrix& dy,
                         Matrix& dx, RowVector& dgain, RowVector& dbias) {
  require_same_shape(x, dy, "layer_norm_backward");
  require_same_shape(x, dx, "layer_norm_backward(dx)");
  const double n = static_cast<double>(x.cols());
  for (Index t = 0; t < x.rows(); ++t) {
    const double mean = x.row(t).mean();
    const Eigen::ArrayXd centered = (x.row(t).array() - mean).transpose();
    const double var = centered.square().sum() / n;
    const double inv_sigma = 1.0 / std::sqrt(var + eps);
    const Eigen::ArrayXd xhat = centered * inv_sigma;
    const Eigen::ArrayXd dyr = dy.row(t).array().transpose();
    const Eigen::ArrayXd dyg = dyr * gain.array().transpose();

    dgain.array() += (dyr * xhat).transpose();
    dbias.array() += dyr.transpose();

    const double mean_dyg = dyg.sum() / n;
    const double mean_dyg_xhat = (dyg * xhat).sum() / n;
    dx.row(t).array() += ((dyg - mean_dyg - xhat * mean_dyg_xhat) * inv_sigma).transpose();
  }
}

double grad_check(const ScalarFn& f, const Matrix& x, const Matrix& analytic, double h) {
  require_same_shape(x, analytic, "grad_check");
  const double f0 = f(x);
  if (!std::isfinite(f0)) {
    throw std::invalid_argument("grad_check: f(x) is not finite");
  }
  double worst = 0.0;
  Matrix xp = x;
  for (Index i = 0; i < x.rows(); ++i) {
    for (Index j = 0; j < x.cols(); ++j) {
      const double orig = xp(i, j);
      xp(i, j) = orig + h;
      const double fp = f(xp);
      xp(i, j) = orig - h;
      const double fm = f(xp);
      xp(i, j) = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double err = std::abs(analytic(i, j) - fd) / std::max(1.0, std::abs(fd));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace speechanim
