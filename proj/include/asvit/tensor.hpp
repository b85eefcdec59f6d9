#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace asvit {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Raised when operand extents do not line up.
struct DimensionError : Error {
  using Error::Error;
};

/// Raised when a documented precondition is violated.
struct ContractError : Error {
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major tensor. Rank 0 is a scalar holding one element.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_))
      throw DimensionError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                           shape_str(shape_));
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }
  static Tensor vector(std::initializer_list<T> v) { return Tensor(Shape{v.size()}, std::vector<T>(v)); }
  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<T> d;
    d.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged matrix literal");
      d.insert(d.end(), row.begin(), row.end());
    }
    return Tensor(Shape{r, c}, std::move(d));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  /// Extent of axis `axis`; negative values count from the end.
  std::size_t dim(int axis) const {
    const int r = static_cast<int>(shape_.size());
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
    return shape_[static_cast<std::size_t>(a)];
  }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t i, std::size_t j) { return data_[i * shape_.back() + j]; }
  const T& at(std::size_t i, std::size_t j) const { return data_[i * shape_.back() + j]; }

  T item() const {
    if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size())
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Tensor(std::move(shape), data_);
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> d(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(d));
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  Shape shape_;
  std::vector<T> data_;
};

/// Leading extent when the tensor is viewed as a matrix of rows over its last axis.
template <class T>
std::size_t row_count(const Tensor<T>& t) {
  return t.rank() == 0 ? 1 : t.size() / t.shape().back();
}

namespace kernels {

// Row-major GEMM with explicit leading dimensions; `accumulate` adds into C instead of overwriting.
// gemm_nn keeps 4 x 64-byte tiles of C in registers while streaming rows of B. The other
// layouts transpose the small operand into scratch and reuse it.

namespace detail {

#if defined(__GNUC__)
#define ASVIT_NOINLINE __attribute__((noinline))
#else
#define ASVIT_NOINLINE
#endif

// The accumulator tile must stay small (256 bytes) or GCC stops promoting it to registers. Kept
// out of line so constant propagation from call sites cannot reshape it.
template <class T, std::size_t MR, std::size_t W>
ASVIT_NOINLINE void gemm_tile(std::size_t k, const T* __restrict a, std::size_t lda, const T* __restrict b, std::size_t ldb,
                      T* __restrict c, std::size_t ldc, bool accumulate) {
  T acc[MR][W] = {};
  if (accumulate)
    for (std::size_t r = 0; r < MR; ++r)
      for (std::size_t j = 0; j < W; ++j) acc[r][j] = c[r * ldc + j];
  for (std::size_t p = 0; p < k; ++p) {
    T bv[W];
    for (std::size_t j = 0; j < W; ++j) bv[j] = b[p * ldb + j];
    for (std::size_t r = 0; r < MR; ++r) {
      const T av = a[r * lda + p];
      for (std::size_t j = 0; j < W; ++j) acc[r][j] += av * bv[j];
    }
  }
  for (std::size_t r = 0; r < MR; ++r)
    for (std::size_t j = 0; j < W; ++j) c[r * ldc + j] = acc[r][j];
}

template <class T>
inline void gemm_row(std::size_t j0, std::size_t n, std::size_t k, const T* a, const T* b, std::size_t ldb, T* c,
                     bool accumulate) {
  if (!accumulate) std::fill(c + j0, c + n, T(0));
  for (std::size_t p = 0; p < k; ++p) {
    const T av = a[p];
    const T* bp = b + p * ldb;
    for (std::size_t j = j0; j < n; ++j) c[j] += av * bp[j];
  }
}

}  // namespace detail

/// C[m,n] (+)= A[m,k] * B[k,n]
template <class T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b, std::size_t ldb,
             T* c, std::size_t ldc, bool accumulate) {
  constexpr std::size_t MR = 4, W = 64 / sizeof(T);
  const std::size_t m_full = m - m % MR, n_full = n - n % W;
  for (std::size_t i = 0; i < m_full; i += MR) {
    for (std::size_t j = 0; j < n_full; j += W)
      detail::gemm_tile<T, MR, W>(k, a + i * lda, lda, b + j, ldb, c + i * ldc + j, ldc, accumulate);
    if (n_full < n)
      for (std::size_t r = 0; r < MR; ++r)
        detail::gemm_row(n_full, n, k, a + (i + r) * lda, b, ldb, c + (i + r) * ldc, accumulate);
  }
  for (std::size_t i = m_full; i < m; ++i) detail::gemm_row(0, n, k, a + i * lda, b, ldb, c + i * ldc, accumulate);
}

/// C[m,n] (+)= A[k,m]^T * B[k,n]
template <class T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b, std::size_t ldb,
             T* c, std::size_t ldc, bool accumulate) {
  std::vector<T> at(m * k);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t i = 0; i < m; ++i) at[i * k + p] = a[p * lda + i];
  gemm_nn(m, n, k, at.data(), k, b, ldb, c, ldc, accumulate);
}

/// C[m,n] (+)= A[m,k] * B[n,k]^T
template <class T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b, std::size_t ldb,
             T* c, std::size_t ldc, bool accumulate) {
  std::vector<T> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * ldb + p];
  gemm_nn(m, n, k, a, lda, bt.data(), n, c, ldc, accumulate);
}

}  // namespace kernels

}  // namespace asvit
