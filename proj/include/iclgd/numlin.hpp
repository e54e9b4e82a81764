#pragma once
//
// Dense real linear algebra for desk-scale experiments: a row-major Matrix,
// one-sided Jacobi SVD, cyclic Jacobi symmetric eigensolver, truncation and
// spectral diagnostics.
//

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace iclgd {

using Vector = std::vector<double>;

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols);
  // Takes ownership of row-major entries; rejects wrong length or non-finite values.
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> entries);

  static Matrix identity(std::size_t n);
  static Matrix diagonal(std::span<const double> diag);
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix from_rows(const std::vector<Vector>& rows);
  // a bᵀ
  static Matrix outer(std::span<const double> a, std::span<const double> b);
  // Columns as given, e.g. a token matrix assembled from token vectors.
  static Matrix from_columns(const std::vector<Vector>& cols, std::size_t rows);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::span<const double> entries() const noexcept { return data_; }
  std::span<double> entries() noexcept { return data_; }

  Vector col(std::size_t j) const;
  void set_col(std::size_t j, std::span<const double> v);
  // Columns [first, first + count).
  Matrix col_block(std::size_t first, std::size_t count) const;

  Matrix transpose() const;
  bool all_finite() const noexcept;

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
Matrix operator*(Matrix a, double s);
Matrix operator*(double s, Matrix a);
Matrix operator*(const Matrix& a, const Matrix& b);
Vector operator*(const Matrix& a, std::span<const double> x);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);
Vector axpy(double alpha, std::span<const double> x, std::span<const double> y);  // alpha x + y

double max_abs(const Matrix& a);
double max_abs_diff(const Matrix& a, const Matrix& b);
double max_abs_diff(std::span<const double> a, std::span<const double> b);
double trace(const Matrix& a);

// a = u diag(sigma) vᵀ with p = min(m, n) columns in u and v.
struct SvdFactors {
  Matrix u;
  Vector sigma;
  Matrix v;

  std::size_t rank_capacity() const noexcept { return sigma.size(); }
};

/// One-sided Jacobi SVD.
///
/// Rotates column pairs until every pair is orthogonal to 1e-15 relative to
/// the pair's norms (which also implies the absolute criterion
/// max |gram_pq| < 1e-13 ||a||_F^2). Throws ConvergenceError after 100 sweeps.
/// Singular values come back nonincreasing; ties keep the original column order.
SvdFactors svd(const Matrix& a);

/// U_{:r} diag(sigma_{:r}) V_{:r}ᵀ, the optimal rank-r approximation.
Matrix truncate(const SvdFactors& f, std::size_t r);

/// Maps a clipping rate xi = 1 - r / min(m, n) back to a rank:
/// max(1, floor((1 - xi) min(m, n))).
std::size_t clip_rate_to_rank(double xi, std::size_t m, std::size_t n);

double frobenius_norm(const Matrix& a);

// Relative floor under which a singular value counts as zero.
inline constexpr double kSingularFloor = 1e-12;

/// sigma_max / sigma_min, or +infinity when sigma_min < 1e-12 sigma_max.
double condition_number_2(const Matrix& a);

struct SymEig {
  Vector values;   // nonincreasing
  Matrix vectors;  // column i pairs with values[i]
};

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (asymmetry above
/// 1e-10 max(1, max|a|) is rejected).
SymEig sym_eig(const Matrix& a);

/// sum log(lambda_i) = log det(c) for positive-definite c.
double trace_log_pd(const Matrix& c);

/// Count of singular values >= rel_tol * sigma_1; 0 for a zero matrix.
std::size_t numerical_rank(const Matrix& a, double rel_tol);

}  // namespace iclgd
