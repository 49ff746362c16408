#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "finegates/error.h"

namespace finegates {

using Vector = std::vector<double>;

/// Dense row-major matrix. The scalar type is double for training and
/// gradient oracles; float is used for the timed inference path.
template <typename T>
class BasicMatrix {
 public:
  BasicMatrix() = default;
  BasicMatrix(std::size_t rows, std::size_t cols, T fill = T{0})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  BasicMatrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw Error(ErrorKind::ShapeMismatch, "matrix data length does not match shape");
    }
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<T>& values() { return data_; }
  const std::vector<T>& values() const { return data_; }
  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  BasicMatrix transposed() const {
    BasicMatrix out(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r) {
      for (std::size_t c = 0; c < cols_; ++c) out(c, r) = (*this)(r, c);
    }
    return out;
  }

  template <typename U>
  BasicMatrix<U> cast() const {
    BasicMatrix<U> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i) out.values()[i] = static_cast<U>(data_[i]);
    return out;
  }

  bool operator==(const BasicMatrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Matrix = BasicMatrix<double>;
using MatrixF = BasicMatrix<float>;

// Products. All kernels accumulate in a fixed order so results are
// bit-stable across runs.

/// out(B x k) = X(B x d) * Wt(d x k). Wt is the transposed weight; the inner
/// loop is a contiguous axpy, which is the one kernel shared by the dense and
/// compacted inference paths.
template <typename T>
void matmul_into(const BasicMatrix<T>& x, const BasicMatrix<T>& wt, BasicMatrix<T>& out) {
  if (x.cols() != wt.rows()) {
    throw Error(ErrorKind::ShapeMismatch, "matmul: inner dimensions differ");
  }
  const std::size_t n = x.rows(), d = x.cols(), k = wt.cols();
  if (out.rows() != n || out.cols() != k) out = BasicMatrix<T>(n, k);
  constexpr std::size_t kBlock = 64;
  for (std::size_t r = 0; r < n; ++r) {
    T* o = out.data() + r * k;
    std::fill(o, o + k, T{0});
    const T* xr = x.data() + r * d;
    for (std::size_t j0 = 0; j0 < k; j0 += 256) {
      const std::size_t j1 = std::min(k, j0 + 256);
      for (std::size_t p0 = 0; p0 < d; p0 += kBlock) {
        const std::size_t p1 = std::min(d, p0 + kBlock);
        for (std::size_t p = p0; p < p1; ++p) {
          const T a = xr[p];
          const T* w = wt.data() + p * k;
          for (std::size_t j = j0; j < j1; ++j) o[j] += a * w[j];
        }
      }
    }
  }
}

/// A(n x m) * B(m x p)
Matrix matmul(const Matrix& a, const Matrix& b);
/// A(n x m) * B(p x m)^T -> n x p
Matrix matmul_nt(const Matrix& a, const Matrix& b);
/// A(m x n)^T * B(m x p) -> n x p
Matrix matmul_tn(const Matrix& a, const Matrix& b);

Matrix add(const Matrix& a, const Matrix& b);
Matrix subtract(const Matrix& a, const Matrix& b);
double frobenius_sq(const Matrix& a);
double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);
bool all_finite(std::span<const double> v);

/// Error function. Accurate to a few ulp over the whole real line.
double erf(double x);

/// Standard normal CDF.
inline double normal_cdf(double z) { return 0.5 + 0.5 * finegates::erf(z / std::sqrt(2.0)); }

/// Standard normal density.
inline double normal_pdf(double z) {
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return kInvSqrt2Pi * std::exp(-0.5 * z * z);
}

/// Exact-form GELU x * Phi(x) and its derivative.
inline double gelu(double x) { return x * normal_cdf(x); }
inline double gelu_grad(double x) { return normal_cdf(x) + x * normal_pdf(x); }

/// Variance at or below this is treated as degenerate by pearson_kurtosis.
inline constexpr double kDegenerateVariance = 1e-12;

/// Pearson kurtosis E[(v-mean)^4] / var^2 with population (1/n) moments.
/// Throws Error(DegenerateVariance) when the variance is <= kDegenerateVariance.
double pearson_kurtosis(std::span<const double> v);

/// Counter-based Gaussian/uniform stream. The next value depends only on
/// (seed, counter), so draws are reproducible on any host and ordering
/// across independent streams cannot interfere.
class RngStream {
 public:
  RngStream() = default;
  explicit RngStream(std::uint64_t seed, std::uint64_t counter = 0) : seed_(seed), counter_(counter) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  /// Raw 64 bits for the current counter; advances by one.
  std::uint64_t next_u64();
  /// Uniform in the open interval (0, 1).
  double next_uniform();
  /// Standard normal via Box-Muller on two counter slots.
  double next_normal();
  /// Uniform integer in [0, n).
  std::uint64_t next_below(std::uint64_t n);

  /// A statistically independent stream derived from this seed and a tag.
  RngStream fork(std::uint64_t tag) const;

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t counter_ = 0;
};

/// n i.i.d. draws from N(0, sigma^2).
Vector gauss_sample(RngStream& rng, std::size_t n, double sigma);

/// Fisher-Yates shuffle driven by the stream.
void shuffle_indices(std::vector<std::size_t>& idx, RngStream& rng);

/// Smallest eigenvalue of a small symmetric matrix (dimension <= 64).
double min_eig_sym(const Matrix& m);
/// All eigenvalues, ascending.
Vector eig_sym(const Matrix& m);
/// Singular values, descending.
Vector singular_values(const Matrix& m);

/// Best rank-r approximation in Frobenius norm (truncated SVD).
Matrix truncated_svd(const Matrix& m, std::size_t rank);

/// Central differences: g_i = (f(x + h e_i) - f(x - h e_i)) / 2h.
Vector central_diff_grad(const std::function<double(const Vector&)>& f, const Vector& x, double h);

}  // namespace finegates
