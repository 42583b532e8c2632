#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "lowrank/tensor.hpp"

namespace lowrank::linalg {

/// Dense row-major matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), values_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }

  double& operator()(std::size_t i, std::size_t j) noexcept { return values_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const noexcept { return values_[i * cols_ + j]; }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }

  Matrix transposed() const;
  double frobenius() const noexcept;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

Matrix matmul(const Matrix& a, const Matrix& b);

/// Thin SVD: a = u * diag(sigma) * vt with k = min(rows, cols).
struct SvdResult {
  Matrix u;                    // rows x k, orthonormal columns
  std::vector<double> sigma;   // k values, nonincreasing, >= 0
  Matrix vt;                   // k x cols, orthonormal rows
};

enum class SvdMethod {
  kAuto,            // one-sided Jacobi up to 32 columns, Golub-Kahan beyond
  kJacobi,
  kGolubKahan,
};

inline constexpr std::size_t kJacobiMaxColumns = 32;
inline constexpr int kMaxSweeps = 60;

SvdResult svd(const Matrix& a, SvdMethod method = SvdMethod::kAuto);

/// Channel c of a rank-3 (C x N x M) tensor, or of image b of a rank-4 batch.
Matrix channel(const Tensor& x, std::size_t c);
Matrix channel(const Tensor& x, std::size_t b, std::size_t c);
void set_channel(Tensor& x, std::size_t b, std::size_t c, const Matrix& m);

/// (1/C) * sum over channels of the sum of singular values. x is C x N x M.
double nuclear_norm(const Tensor& x);
/// Same quantity for image b of a rank-4 batch.
double nuclear_norm(const Tensor& batch, std::size_t b);

/// Best rank-r approximation of every channel. Accepts C x N x M or a batch.
Tensor truncate_rank(const Tensor& x, std::size_t r);

/// Balanced split u = U_r sqrt(S_r), v = sqrt(S_r) V_r^T per channel.
/// C x N x M input gives (C x N x r, C x r x M); batches gain a leading B axis.
std::pair<Tensor, Tensor> factor_split(const Tensor& x, std::size_t r);

/// Row c holds the singular values of channel c. x is C x N x M.
Matrix singular_spectrum(const Tensor& x);

}  // namespace lowrank::linalg
