// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <iosfwd>
#include <string>
#include <vector>

#include "stitchlab/errors.hpp"

namespace stitchlab {

/// Dense row-major matrix of 64-bit floats. All reductions run in a fixed
/// sequential order so results are reproducible bit-for-bit.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    static Matrix identity(std::size_t n);
    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    bool all_finite() const;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix operator+(const Matrix& a, const Matrix& b);
Matrix operator-(const Matrix& a, const Matrix& b);
Matrix operator*(double s, const Matrix& a);

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);

/// Sum of squared entries, accumulated left to right.
double frobenius_norm(const Matrix& a);
double frobenius_inner(const Matrix& a, const Matrix& b);

/// Subtracts the column mean from every column.
Matrix center_columns(const Matrix& x);

/// Linear-kernel Gram matrix X X^T.
Matrix gram(const Matrix& x);

struct SvdResult {
    Matrix u;                 // m x r
    std::vector<double> s;    // descending, length r = min(m, n)
    Matrix v;                 // n x r
};

/// Thin SVD by one-sided Jacobi. Deterministic: fixed sweep order, no
/// randomized pivoting.
SvdResult svd(const Matrix& m);

/// Moore-Penrose pseudoinverse. Singular values below rank_tol * s_max are
/// treated as zero.
Matrix pseudoinverse(const Matrix& m, double rank_tol = 1e-12);

/// Count of singular values above rank_tol * s_max.
std::size_t numerical_rank(const std::vector<double>& s, double rank_tol = 1e-12);
std::size_t numerical_rank(const Matrix& m, double rank_tol = 1e-12);

struct SymEigResult {
    std::vector<double> values;  // descending
    Matrix vectors;              // columns are eigenvectors
};

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
SymEigResult sym_eig(const Matrix& s);

/// S^{-1/2} for symmetric PSD S; eigenvalues below rank_tol * lambda_max are
/// dropped rather than regularized.
Matrix invsqrt_psd(const Matrix& s, double rank_tol = 1e-12);

// CSV interchange: plain decimal, '.' radix, ',' separator, one row per
// line, no header. Values are written with enough digits to round-trip.
void write_csv(const Matrix& m, std::ostream& out);
void write_csv(const Matrix& m, const std::string& path);
Matrix read_csv(std::istream& in);
Matrix read_csv_file(const std::string& path);

}  // namespace stitchlab
