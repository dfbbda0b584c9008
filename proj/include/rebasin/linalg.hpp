#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "rebasin/permutation.hpp"

namespace rebasin {

// Dense row-major float64 matrix. Vectors are stored as n x 1 matrices when a
// Matrix is required.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool all_finite() const;

  Matrix& operator+=(const Matrix& other);
  Matrix& operator-=(const Matrix& other);
  Matrix& operator*=(double s);

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(double s, Matrix a);

Matrix transpose(const Matrix& m);
// a * b
Matrix matmul(const Matrix& a, const Matrix& b);
// a * b^T
Matrix matmul_nt(const Matrix& a, const Matrix& b);
// a^T * b
Matrix matmul_tn(const Matrix& a, const Matrix& b);

// Singular values in descending order, length min(rows, cols). One-sided
// Jacobi on the smaller Gram dimension; throws NumericalError if the sweep cap
// is reached before the columns are mutually orthogonal.
std::vector<double> singular_values(const Matrix& m);

double frobenius_inner(const Matrix& a, const Matrix& b);
double frobenius_norm_squared(const Matrix& m);

// permute_rows(m, p)[i, :] == m[p[i], :]   (P m)
// permute_cols(m, p)[:, j] == m[:, p[j]]   (m P^T)
Matrix permute_rows(const Matrix& m, const Permutation& p);
Matrix permute_cols(const Matrix& m, const Permutation& p);

double vector_pnorm(std::span<const double> a, std::span<const double> b,
                    double p);

}  // namespace rebasin
