#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "asvit/autograd.hpp"

namespace asvit {

/// Reverse-mode gradient of a scalar function at x.
template <class T>
Tensor<T> analytic_gradient(const std::function<Var<T>(const Var<T>&)>& f, const Tensor<T>& x) {
  GradTape<T> tape;
  auto xv = Var<T>::param(x);
  auto y = f(xv);
  tape.backward(y);
  return xv.grad();
}

/// Central-difference gradient of a scalar function at x with step h.
template <class T>
Tensor<T> numeric_gradient(const std::function<Var<T>(const Var<T>&)>& f, const Tensor<T>& x, T h) {
  Tensor<T> g(x.shape());
  Tensor<T> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T orig = probe[i];
    probe[i] = orig + h;
    const T fp = f(Var<T>::constant(probe)).value().item();
    probe[i] = orig - h;
    const T fm = f(Var<T>::constant(probe)).value().item();
    probe[i] = orig;
    g[i] = (fp - fm) / (T(2) * h);
  }
  return g;
}

/// Max over coordinates of |analytic - central difference| / (|central difference| + 1e-8).
/// Intended for double precision with h in [1e-5, 1e-3].
template <class T>
T finite_diff_check(const std::function<Var<T>(const Var<T>&)>& f, const Tensor<T>& x, T h) {
  const Tensor<T> a = analytic_gradient(f, x);
  const Tensor<T> n = numeric_gradient(f, x, h);
  T worst = 0;
  for (std::size_t i = 0; i < x.size(); ++i) worst = std::max(worst, std::abs(a[i] - n[i]) / (std::abs(n[i]) + T(1e-8)));
  return worst;
}

}  // namespace asvit
