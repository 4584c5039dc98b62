#pragma once

// Differentiable dense primitives.  Each forward has a hand-written analytic
// backward that *accumulates* into caller-provided gradient buffers; there is
// no tape.  grad_check validates any scalar function against central finite
// differences and is the oracle every backward in this project is tested with.
//
// All functions are pure (no shared mutable state) and safe to call
// concurrently on distinct outputs.

#include <functional>

#include "speechanim/types.hpp"

namespace speechanim {

// c = a * b.  Throws ShapeError when inner dimensions disagree.
Matrix matmul(const Matrix& a, const Matrix& b);

// Given dL/dc, accumulates dL/da += dc * b^T and dL/db += a^T * dc.
// da must be shaped like a, db like b.
void matmul_backward(const Matrix& a, const Matrix& b, const Matrix& dc, Matrix& da, Matrix& db);

// Row-wise softmax, numerically stabilised by row-max subtraction.
// With causal=true (square input only), row t is a softmax over columns
// 0..t and columns above the diagonal are exact zeros.
Matrix softmax_rows(const Matrix& x, bool causal = false);

// y must be the forward output; accumulates into dx.
void softmax_rows_backward(const Matrix& y, const Matrix& dy, bool causal, Matrix& dx);

// Per-row layer normalisation with learned gain/bias (both 1 x cols).
Matrix layer_norm(const Matrix& x, const RowVector& gain, const RowVector& bias,
                  double eps = 1e-5);

// Accumulates into dx, dgain, dbias.
void layer_norm_backward(const Matrix& x, const RowVector& gain, double eps, const Matrix& dy,
                         Matrix& dx, RowVector& dgain, RowVector& dbias);

using ScalarFn = std::function<double(const Matrix&)>;

// Compares an analytic gradient of f at x against central finite differences
// with step h.  Returns max_i |analytic_i - fd_i| / max(1, |fd_i|).
// Throws on non-finite f(x).
double grad_check(const ScalarFn& f, const Matrix& x, const Matrix& analytic, double h = 1e-6);

}  // namespace speechanim
