#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mglue {

/// Raised when a caller breaks an operation's documented preconditions
/// (shape mismatch, empty input, out-of-range argument).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Raised by log/sqrt/pow on inputs outside their real domain.
class DomainError : public std::domain_error {
 public:
  DomainError(const std::string& what, std::size_t index)
      : std::domain_error(what + " (offending index " + std::to_string(index) + ")"),
        index_(index) {}
  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

/// Raised when an iterative routine fails to converge or a loss goes non-finite.
class NumericalError : public std::runtime_error {
 public:
  NumericalError(const std::string& what, double residual)
      : std::runtime_error(what), residual_(residual) {}
  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

// Dense row-major matrix of doubles. Vectors are 1×n or n×1 matrices.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
      : rows_(rows), cols_(cols), data_(std::move(values)) {
    require(data_.size() == rows_ * cols_, "Matrix: value count does not match shape");
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix row_vector(std::span<const double> v) {
    return Matrix(1, v.size(), std::vector<double>(v.begin(), v.end()));
  }
  static Matrix col_vector(std::span<const double> v) {
    return Matrix(v.size(), 1, std::vector<double>(v.begin(), v.end()));
  }
  static Matrix diagonal(std::span<const double> d) {
    Matrix m(d.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
    return m;
  }
  static Matrix scalar(double v) { return Matrix(1, 1, v); }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  /// Scalar value of a 1×1 matrix.
  double item() const {
    require(rows_ == 1 && cols_ == 1, "Matrix::item on non-scalar");
    return data_[0];
  }

  Matrix transposed() const;
  std::vector<double> diag() const;
  Matrix row(std::size_t r) const;
  Matrix col(std::size_t c) const;

  bool operator==(const Matrix& o) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

std::string shape_str(const Matrix& m);

// Plain value-level linear algebra (no tape).
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix operator+(const Matrix& a, const Matrix& b);
Matrix operator-(const Matrix& a, const Matrix& b);
Matrix operator*(double s, const Matrix& a);
double frobenius_norm(const Matrix& a);
double trace(const Matrix& a);
/// max |a_ij - a_ji| / max(1e-300, ||a||_F); 0 for symmetric input.
double asymmetry(const Matrix& a);
/// Off-diagonal Frobenius mass.
double off_diagonal_norm(const Matrix& a);
/// True when the off-diagonal mass is below rel_tol * |trace|.
bool is_certified_diagonal(const Matrix& a, double rel_tol = 1e-10);

/// Symmetric eigendecomposition by cyclic Jacobi rotations. Columns of
/// `vectors` are eigenvectors; eigenvalues ascending.
struct SymmetricEigen {
  std::vector<double> values;
  Matrix vectors;
};
SymmetricEigen symmetric_eigen(const Matrix& a);

/// exp of a symmetric matrix through its eigendecomposition.
Matrix symmetric_exp(const Matrix& a);

}  // namespace mglue
