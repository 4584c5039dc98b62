#pragma once

// Shared dense types and error taxonomy. Eigen is the only math dependency;
// everything numeric in this project is a row-major matrix of doubles.

#include <Eigen/Dense>

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace speechanim {

template <typename Scalar>
using MatrixT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVectorT = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Matrix = MatrixT<double>;
using RowVector = RowVectorT<double>;
using Index = Eigen::Index;

// Dimension disagreements between operands; message names both shapes.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Invalid or inconsistent configuration values.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// File format / persistence problems (bad magic, hash mismatch, truncation...).
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Runtime numerical failure (divergent training, non-finite loss).
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::string shape_str(Index rows, Index cols) {
  std::ostringstream os;
  os << rows << "x" << cols;
  return os.str();
}

inline std::string shape_str(const Matrix& m) { return shape_str(m.rows(), m.cols()); }

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

}  // namespace speechanim
