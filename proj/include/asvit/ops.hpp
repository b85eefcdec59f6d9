#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "asvit/autograd.hpp"
#include "asvit/math.hpp"

namespace asvit {

namespace detail {

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

// Strides for viewing a tensor as [outer, axis, inner] around `axis`.
struct AxisView {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisView axis_view(const Shape& s, int axis) {
  const int r = static_cast<int>(s.size());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisView v;
  for (int i = 0; i < a; ++i) v.outer *= s[static_cast<std::size_t>(i)];
  v.extent = s[static_cast<std::size_t>(a)];
  for (int i = a + 1; i < r; ++i) v.inner *= s[static_cast<std::size_t>(i)];
  return v;
}

inline Shape drop_axis(const Shape& s, int axis) {
  const int r = static_cast<int>(s.size());
  const int a = axis < 0 ? axis + r : axis;
  Shape out;
  for (int i = 0; i < r; ++i)
    if (i != a) out.push_back(s[static_cast<std::size_t>(i)]);
  return out;
}

}  // namespace detail

/// Logistic function, exactly 0 or 1 once |x| exceeds 80.
template <class T>
T stable_sigmoid(T x) {
  constexpr T kClamp = T(80);
  if (x >= kClamp) return T(1);
  if (x <= -kClamp) return T(0);
  if (x >= T(0)) return T(1) / (T(1) + math::exp(-x));
  const T e = math::exp(x);
  return e / (T(1) + e);
}

/// Derivative of stable_sigmoid; zero inside the saturation region.
template <class T>
T stable_sigmoid_grad(T x) {
  if (std::abs(x) >= T(80)) return T(0);
  const T s = stable_sigmoid(x);
  return s * (T(1) - s);
}

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0))
    throw DimensionError("matmul: cannot multiply " + shape_str(A.shape()) + " by " + shape_str(B.shape()));
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  Tensor<T> C({m, n});
  kernels::gemm_nn(m, n, k, A.data(), k, B.data(), n, C.data(), n, false);
  return make_result<T>(std::move(C), {a, b}, [m, k, n](Node<T>& out) {
    const auto& A = out.inputs[0]->value;
    const auto& B = out.inputs[1]->value;
    if (auto* ga = input_grad(out, 0)) kernels::gemm_nt(m, k, n, out.grad.data(), n, B.data(), n, ga->data(), k, true);
    if (auto* gb = input_grad(out, 1)) kernels::gemm_tn(k, n, m, A.data(), k, out.grad.data(), n, gb->data(), n, true);
  });
}

/// Affine map over the last axis: x[..., in] * W[in, out] + b[out]. `b` may be undefined.
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const auto& X = x.value();
  const auto& W = w.value();
  if (X.rank() < 1 || W.rank() != 2 || X.shape().back() != W.dim(0))
    throw DimensionError("linear: input " + shape_str(X.shape()) + " incompatible with weight " + shape_str(W.shape()));
  const std::size_t in = W.dim(0), outd = W.dim(1), rows = row_count(X);
  const bool has_bias = b.defined();
  if (has_bias && (b.value().rank() != 1 || b.value().dim(0) != outd))
    throw DimensionError("linear: bias " + shape_str(b.value().shape()) + " does not match output width " +
                         std::to_string(outd));
  Shape os = X.shape();
  os.back() = outd;
  Tensor<T> Y(os);
  if (has_bias) {
    const T* bp = b.value().data();
    for (std::size_t r = 0; r < rows; ++r) std::copy(bp, bp + outd, Y.data() + r * outd);
  }
  kernels::gemm_nn(rows, outd, in, X.data(), in, W.data(), outd, Y.data(), outd, has_bias);
  std::vector<Var<T>> inputs{x, w};
  if (has_bias) inputs.push_back(b);
  return make_result<T>(std::move(Y), std::move(inputs), [rows, in, outd, has_bias](Node<T>& out) {
    const auto& X = out.inputs[0]->value;
    const auto& W = out.inputs[1]->value;
    const T* g = out.grad.data();
    if (auto* gx = input_grad(out, 0)) kernels::gemm_nt(rows, in, outd, g, outd, W.data(), outd, gx->data(), in, true);
    if (auto* gw = input_grad(out, 1)) kernels::gemm_tn(in, outd, rows, X.data(), in, g, outd, gw->data(), outd, true);
    if (has_bias)
      if (auto* gb = input_grad(out, 2))
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < outd; ++j) (*gb)[j] += g[r * outd + j];
  });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b.value()[i];
  return make_result<T>(std::move(y), {a, b}, [](Node<T>& out) {
    for (std::size_t k = 0; k < 2; ++k)
      if (auto* g = input_grad(out, k))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += out.grad[i];
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= b.value()[i];
  return make_result<T>(std::move(y), {a, b}, [](Node<T>& out) {
    if (auto* g = input_grad(out, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += out.grad[i];
    if (auto* g = input_grad(out, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= out.grad[i];
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  return make_result<T>(std::move(y), {a, b}, [](Node<T>& out) {
    const auto& A = out.inputs[0]->value;
    const auto& B = out.inputs[1]->value;
    if (auto* g = input_grad(out, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += out.grad[i] * B[i];
    if (auto* g = input_grad(out, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += out.grad[i] * A[i];
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T c) {
  Tensor<T> y = a.value();
  for (auto& v : y.values()) v *= c;
  return make_result<T>(std::move(y), {a}, [c](Node<T>& out) {
    if (auto* g = input_grad(out, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += c * out.grad[i];
  });
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T c) {
  Tensor<T> y = a.value();
  for (auto& v : y.values()) v += c;
  return make_result<T>(std::move(y), {a}, [](Node<T>& out) {
    if (auto* g = input_grad(out, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += out.grad[i];
  });
}

template <class T>
Var<T> sum(const Var<T>& a) {
  T s = 0;
  for (T v : a.value().values()) s += v;
  return make_result<T>(Tensor<T>::scalar(s), {a}, [](Node<T>& out) {
    if (auto* g = input_grad(out, 0))
      for (auto& v : g->values()) v += out.grad[0];
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

/// Reduces one axis by summation.
template <class T>
Var<T> sum_axis(const Var<T>& x, int axis) {
  const auto v = detail::axis_view(x.shape(), axis);
  Tensor<T> y(detail::drop_axis(x.shape(), axis));
  const T* xp = x.value().data();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t e = 0; e < v.extent; ++e)
      for (std::size_t i = 0; i < v.inner; ++i) y[o * v.inner + i] += xp[(o * v.extent + e) * v.inner + i];
  return make_result<T>(std::move(y), {x}, [v](Node<T>& out) {
    if (auto* g = input_grad(out, 0))
      for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t e = 0; e < v.extent; ++e)
          for (std::size_t i = 0; i < v.inner; ++i) (*g)[(o * v.extent + e) * v.inner + i] += out.grad[o * v.inner + i];
  });
}

template <class T>
Var<T> mean_axis(const Var<T>& x, int axis) {
  return scale(sum_axis(x, axis), T(1) / static_cast<T>(x.value().dim(axis)));
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> y = x.value().reshaped(std::move(shape));
  return make_result<T>(std::move(y), {x}, [](Node<T>& out) {
    if (auto* g = input_grad(out, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += out.grad[i];
  });
}

/// Numerically stable softmax over the last axis (max subtraction).
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  const std::size_t n = x.shape().back(), rows = row_count(x);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * n;
    T* yr = y.data() + r * n;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xr[j]);
    T s = 0;
    for (std::size_t j = 0; j < n; ++j) s += (yr[j] = math::exp(xr[j] - mx));
    const T inv = T(1) / s;
    for (std::size_t j = 0; j < n; ++j) yr[j] *= inv;
  }
  return y;
}

template <class T>
Var<T> softmax_lastdim(const Var<T>& x) {
  const std::size_t n = x.value().shape().back();
  return make_result<T>(softmax_rows(x.value()), {x}, [n](Node<T>& out) {
    auto* g = input_grad(out, 0);
    if (!g) return;
    const std::size_t rows = out.value.size() / n;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = out.value.data() + r * n;
      const T* gy = out.grad.data() + r * n;
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += y[j] * gy[j];
      T* gx = g->data() + r * n;
      for (std::size_t j = 0; j < n; ++j) gx[j] += y[j] * (gy[j] - dot);
    }
  });
}

template <class T>
Var<T> layernorm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  const std::size_t d = x.value().shape().back();
  if (gamma.value().size() != d || beta.value().size() != d)
    throw DimensionError("layernorm: affine params must have width " + std::to_string(d));
  if (!(eps > T(0))) throw ContractError("layernorm: eps must be positive");
  const std::size_t rows = row_count(x.value());
  Tensor<T> y(x.shape());
  Tensor<T> xhat(x.shape());
  std::vector<T> inv_std(rows);
  const T* gp = gamma.value().data();
  const T* bp = beta.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.value().data() + r * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (xr[j] - mu) * is;
      xhat.data()[r * d + j] = h;
      y.data()[r * d + j] = gp[j] * h + bp[j];
    }
  }
  return make_result<T>(std::move(y), {x, gamma, beta},
                        [d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& out) {
                          const T* gp = out.inputs[1]->value.data();
                          auto* gx = input_grad(out, 0);
                          auto* gg = input_grad(out, 1);
                          auto* gb = input_grad(out, 2);
                          std::vector<T> dh(d);
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T* gy = out.grad.data() + r * d;
                            const T* h = xhat.data() + r * d;
                            if (gg)
                              for (std::size_t j = 0; j < d; ++j) (*gg)[j] += gy[j] * h[j];
                            if (gb)
                              for (std::size_t j = 0; j < d; ++j) (*gb)[j] += gy[j];
                            if (!gx) continue;
                            T m1 = 0, m2 = 0;
                            for (std::size_t j = 0; j < d; ++j) {
                              dh[j] = gy[j] * gp[j];
                              m1 += dh[j];
                              m2 += dh[j] * h[j];
                            }
                            m1 /= static_cast<T>(d);
                            m2 /= static_cast<T>(d);
                            T* g = gx->data() + r * d;
                            for (std::size_t j = 0; j < d; ++j) g[j] += inv_std[r] * (dh[j] - m1 - h[j] * m2);
                          }
                        });
}

/// Exact (erf) GELU.
template <class T>
Var<T> gelu(const Var<T>& x) {
  Tensor<T> y(x.shape());
  const T k = T(0.70710678118654752440);
  for (std::size_t i = 0; i < y.size(); ++i) {
    const T v = x.value()[i];
    y[i] = T(0.5) * v * (T(1) + math::erf(v * k));
  }
  return make_result<T>(std::move(y), {x}, [k](Node<T>& out) {
    auto* g = input_grad(out, 0);
    if (!g) return;
    const T c = T(0.39894228040143267794);  // 1/sqrt(2*pi)
    const auto& X = out.inputs[0]->value;
    for (std::size_t i = 0; i < g->size(); ++i) {
      const T v = X[i];
      const T cdf = T(0.5) * (T(1) + math::erf(v * k));
      (*g)[i] += out.grad[i] * (cdf + v * c * math::exp(T(-0.5) * v * v));
    }
  });
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = stable_sigmoid(x.value()[i]);
  return make_result<T>(std::move(y), {x}, [](Node<T>& out) {
    if (auto* g = input_grad(out, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += out.grad[i] * stable_sigmoid_grad(out.inputs[0]->value[i]);
  });
}

/// |x| with derivative 0 at the kink.
template <class T>
Var<T> abs(const Var<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::abs(x.value()[i]);
  return make_result<T>(std::move(y), {x}, [](Node<T>& out) {
    if (auto* g = input_grad(out, 0))
      for (std::size_t i = 0; i < g->size(); ++i) {
        const T v = out.inputs[0]->value[i];
        (*g)[i] += out.grad[i] * (v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)));
      }
  });
}

/// Euclidean norm over the last axis; gradient is 0 for an all-zero slice.
template <class T>
Var<T> l2norm_lastdim(const Var<T>& x) {
  const std::size_t d = x.value().shape().back();
  const std::size_t rows = row_count(x.value());
  Shape os(x.shape().begin(), x.shape().end() - 1);
  Tensor<T> y(os);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.value().data() + r * d;
    T s = 0;
    for (std::size_t j = 0; j < d; ++j) s += xr[j] * xr[j];
    y[r] = std::sqrt(s);
  }
  return make_result<T>(std::move(y), {x}, [d, rows](Node<T>& out) {
    auto* g = input_grad(out, 0);
    if (!g) return;
    const auto& X = out.inputs[0]->value;
    for (std::size_t r = 0; r < rows; ++r) {
      const T nrm = out.value[r];
      if (nrm == T(0)) continue;
      const T c = out.grad[r] / nrm;
      for (std::size_t j = 0; j < d; ++j) (*g)[r * d + j] += c * X[r * d + j];
    }
  });
}

/// Contiguous sub-range [begin, end) of the last axis.
template <class T>
Var<T> slice_lastdim(const Var<T>& x, std::size_t begin, std::size_t end) {
  const std::size_t d = x.value().shape().back();
  if (begin > end || end > d) throw DimensionError("slice_lastdim: range out of bounds");
  const std::size_t rows = row_count(x.value()), w = end - begin;
  Shape os = x.shape();
  os.back() = w;
  Tensor<T> y(os);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy(x.value().data() + r * d + begin, x.value().data() + r * d + end, y.data() + r * w);
  return make_result<T>(std::move(y), {x}, [d, rows, w, begin](Node<T>& out) {
    if (auto* g = input_grad(out, 0))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < w; ++j) (*g)[r * d + begin + j] += out.grad[r * w + j];
  });
}

/// Row `index` of the second-to-last axis: x[..., n, d] -> x[..., d].
template <class T>
Var<T> token_row(const Var<T>& x, std::size_t index) {
  const auto& X = x.value();
  if (X.rank() < 2 || index >= X.dim(-2)) throw DimensionError("token_row: index out of range");
  const std::size_t n = X.dim(-2), d = X.dim(-1), outer = X.size() / (n * d);
  Shape os(X.shape().begin(), X.shape().end() - 2);
  os.push_back(d);
  Tensor<T> y(os);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy(X.data() + (o * n + index) * d, X.data() + (o * n + index + 1) * d, y.data() + o * d);
  return make_result<T>(std::move(y), {x}, [n, d, outer, index](Node<T>& out) {
    if (auto* g = input_grad(out, 0))
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < d; ++j) (*g)[(o * n + index) * d + j] += out.grad[o * d + j];
  });
}

/// Stacks equally shaped tensors along a new trailing axis.
template <class T>
Var<T> stack_lastdim(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw DimensionError("stack_lastdim: no inputs");
  const Shape base = parts[0].shape();
  for (const auto& p : parts) detail::require_same_shape(base, p.shape(), "stack_lastdim");
  const std::size_t m = parts.size(), cnt = shape_numel(base);
  Shape os = base;
  os.push_back(m);
  Tensor<T> y(os);
  for (std::size_t k = 0; k < m; ++k)
    for (std::size_t i = 0; i < cnt; ++i) y[i * m + k] = parts[k].value()[i];
  return make_result<T>(std::move(y), parts, [m, cnt](Node<T>& out) {
    for (std::size_t k = 0; k < m; ++k)
      if (auto* g = input_grad(out, k))
        for (std::size_t i = 0; i < cnt; ++i) (*g)[i] += out.grad[i * m + k];
  });
}

/// Multiplies each row x[b, i, :] by m[b, i].
template <class T>
Var<T> scale_rows(const Var<T>& x, const Var<T>& m) {
  const auto& X = x.value();
  const std::size_t d = X.shape().back(), rows = row_count(X);
  if (m.value().size() != rows) throw DimensionError("scale_rows: mask has wrong length");
  Tensor<T> y(X.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) y[r * d + j] = X[r * d + j] * m.value()[r];
  return make_result<T>(std::move(y), {x, m}, [d, rows](Node<T>& out) {
    const auto& X = out.inputs[0]->value;
    const auto& M = out.inputs[1]->value;
    auto* gx = input_grad(out, 0);
    auto* gm = input_grad(out, 1);
    for (std::size_t r = 0; r < rows; ++r) {
      T acc = 0;
      for (std::size_t j = 0; j < d; ++j) {
        const T g = out.grad[r * d + j];
        if (gx) (*gx)[r * d + j] += g * M[r];
        acc += g * X[r * d + j];
      }
      if (gm) (*gm)[r] += acc;
    }
  });
}

/// Selects rows of x[B, n, d] per batch item: out[b, j] = x[b, index[b][j]].
template <class T>
Var<T> gather_tokens(const Var<T>& x, const std::vector<std::vector<std::size_t>>& index) {
  const auto& X = x.value();
  if (X.rank() != 3 || index.size() != X.dim(0)) throw DimensionError("gather_tokens: expects [B,n,d] and B index lists");
  const std::size_t B = X.dim(0), n = X.dim(1), d = X.dim(2);
  const std::size_t k = index.empty() ? 0 : index[0].size();
  for (const auto& row : index) {
    if (row.size() != k) throw DimensionError("gather_tokens: ragged index lists");
    for (auto i : row)
      if (i >= n) throw DimensionError("gather_tokens: index out of range");
  }
  Tensor<T> y({B, k, d});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < k; ++j)
      std::copy(X.data() + (b * n + index[b][j]) * d, X.data() + (b * n + index[b][j] + 1) * d,
                y.data() + (b * k + j) * d);
  return make_result<T>(std::move(y), {x}, [index, n, d, k](Node<T>& out) {
    if (auto* g = input_grad(out, 0))
      for (std::size_t b = 0; b < index.size(); ++b)
        for (std::size_t j = 0; j < k; ++j)
          for (std::size_t c = 0; c < d; ++c) (*g)[(b * n + index[b][j]) * d + c] += out.grad[(b * k + j) * d + c];
  });
}

/// Mean cross-entropy of logits[B, C] against integer labels.
template <class T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
  const auto& Z = logits.value();
  if (Z.rank() != 2 || Z.dim(0) != labels.size()) throw DimensionError("cross_entropy: expects [B,C] logits and B labels");
  const std::size_t B = Z.dim(0), C = Z.dim(1);
  Tensor<T> p = softmax_rows(Z);
  T loss = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const auto y = static_cast<std::size_t>(labels[b]);
    if (labels[b] < 0 || y >= C) throw ContractError("cross_entropy: label out of range");
    const T* zr = Z.data() + b * C;
    T mx = zr[0];
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, zr[c]);
    T s = 0;
    for (std::size_t c = 0; c < C; ++c) s += math::exp(zr[c] - mx);
    loss += std::log(s) + mx - zr[y];
  }
  loss /= static_cast<T>(B);
  return make_result<T>(Tensor<T>::scalar(loss), {logits}, [p = std::move(p), labels, B, C](Node<T>& out) {
    auto* g = input_grad(out, 0);
    if (!g) return;
    const T s = out.grad[0] / static_cast<T>(B);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        (*g)[b * C + c] += s * (p[b * C + c] - (static_cast<int>(c) == labels[b] ? T(1) : T(0)));
  });
}

enum class KlDirection {
  TeacherStudent,  // KL(softmax(teacher) || softmax(student))
  StudentTeacher,  // KL(softmax(student) || softmax(teacher))
};

/// Batch-mean KL divergence between class distributions. Only the student receives a gradient.
template <class T>
Var<T> kl_div(const Var<T>& student_logits, const Var<T>& teacher_logits, KlDirection dir = KlDirection::TeacherStudent) {
  detail::require_same_shape(student_logits.shape(), teacher_logits.shape(), "kl_div");
  const auto& S = student_logits.value();
  if (S.rank() != 2) throw DimensionError("kl_div: expects [B,C] logits");
  const std::size_t B = S.dim(0), C = S.dim(1);
  Tensor<T> ps = softmax_rows(S);
  Tensor<T> pt = softmax_rows(teacher_logits.value());
  auto log_softmax_row = [C](const T* z, std::vector<T>& out) {
    T mx = z[0];
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, z[c]);
    T s = 0;
    for (std::size_t c = 0; c < C; ++c) s += math::exp(z[c] - mx);
    const T lse = std::log(s) + mx;
    for (std::size_t c = 0; c < C; ++c) out[c] = z[c] - lse;
  };
  std::vector<T> ls(C), lt(C);
  Tensor<T> u({B, C});  // log ps - log pt
  std::vector<T> row_kl(B);
  T total = 0;
  for (std::size_t b = 0; b < B; ++b) {
    log_softmax_row(S.data() + b * C, ls);
    log_softmax_row(teacher_logits.value().data() + b * C, lt);
    T kl = 0;
    for (std::size_t c = 0; c < C; ++c) {
      u[b * C + c] = ls[c] - lt[c];
      kl += dir == KlDirection::TeacherStudent ? pt[b * C + c] * (lt[c] - ls[c]) : ps[b * C + c] * (ls[c] - lt[c]);
    }
    row_kl[b] = kl;
    total += kl;
  }
  total /= static_cast<T>(B);
  return make_result<T>(Tensor<T>::scalar(total), {student_logits},
                        [ps = std::move(ps), pt = std::move(pt), u = std::move(u), row_kl = std::move(row_kl), B, C,
                         dir](Node<T>& out) {
                          auto* g = input_grad(out, 0);
                          if (!g) return;
                          const T s = out.grad[0] / static_cast<T>(B);
                          for (std::size_t b = 0; b < B; ++b)
                            for (std::size_t c = 0; c < C; ++c) {
                              const std::size_t i = b * C + c;
                              const T d = dir == KlDirection::TeacherStudent ? ps[i] - pt[i]
                                                                             : ps[i] * (u[i] - row_kl[b]);
                              (*g)[i] += s * d;
                            }
                        });
}

}  // namespace asvit
