#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>

namespace relsim {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using Index = std::int64_t;

// Per-instance attribute shape. Flattening is always row-major.
struct Shape {
  int rows = 1;
  int cols = 1;

  Shape() = default;
  Shape(int r, int c) : rows(r), cols(c) {}

  int size() const { return rows * cols; }
  bool is_scalar() const { return rows == 1 && cols == 1; }
  bool is_vector() const { return cols == 1; }
  bool operator==(const Shape&) const = default;

  std::string str() const { return std::to_string(rows) + "x" + std::to_string(cols); }
};

// Error families. UserError maps to CLI exit code 2, NumericalError to 3.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UserError : public Error {
 public:
  using Error::Error;
};

class DeclError : public UserError {
 public:
  using UserError::UserError;
};

class ShapeError : public UserError {
 public:
  using UserError::UserError;
};

class LineageError : public UserError {
 public:
  using UserError::UserError;
};

class ValidationError : public UserError {
 public:
  using UserError::UserError;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

class InternalError : public Error {
 public:
  using Error::Error;
};

// Row-major flattening of a per-instance matrix.
VectorXd vec_rm(const MatrixXd& m);
MatrixXd unvec_rm(const Eigen::Ref<const VectorXd>& v, int rows, int cols);

// Global worker count for instance-parallel loops. Default 1 (deterministic mode).
int thread_count();
void set_thread_count(int n);

// Splits [0, n) into contiguous chunks and runs them, possibly on worker threads.
// Chunks must write to disjoint state; outputs are then identical to a serial run.
void parallel_for(Index n, const std::function<void(Index, Index)>& chunk);

}  // namespace relsim
