#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "asvit/autograd.hpp"

namespace asvit {

/// Cosine decay from `lr` at step 0 to `min_lr` at `total_steps`.
inline double cosine_lr(std::size_t step, std::size_t total_steps, double lr, double min_lr) {
  if (total_steps == 0) return lr;
  const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
  return min_lr + 0.5 * (lr - min_lr) * (1.0 + std::cos(std::numbers::pi * t));
}

/// Linear warmup from 0 over `warmup` steps, then cosine decay over the remainder.
inline double warmup_cosine_lr(std::size_t step, std::size_t warmup, std::size_t total_steps, double lr, double min_lr) {
  if (step < warmup) return lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  return cosine_lr(step - warmup, total_steps > warmup ? total_steps - warmup : 0, lr, min_lr);
}

/// Adam with decoupled weight decay. Moments are kept in double so long runs do not drift.
template <class T>
class AdamW {
 public:
  struct Group {
    std::vector<Var<T>> params;
    double weight_decay = 0.0;
  };

  explicit AdamW(std::vector<Group> groups, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : groups_(std::move(groups)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& g : groups_)
      for (const auto& p : g.params) {
        m_.emplace_back(p.value().size(), 0.0);
        v_.emplace_back(p.value().size(), 0.0);
      }
  }

  /// One update with learning rate `lr`. Parameters that received no gradient still decay.
  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    std::size_t slot = 0;
    for (auto& g : groups_)
      for (auto& p : g.params) {
        auto& m = m_[slot];
        auto& v = v_[slot];
        ++slot;
        Node<T>& node = *p.node();
        auto& w = node.value;
        const bool has = node.has_grad();
        for (std::size_t i = 0; i < w.size(); ++i) {
          const double gi = has ? static_cast<double>(node.grad[i]) : 0.0;
          m[i] = beta1_ * m[i] + (1 - beta1_) * gi;
          v[i] = beta2_ * v[i] + (1 - beta2_) * gi * gi;
          double x = static_cast<double>(w[i]);
          x -= lr * g.weight_decay * x;
          x -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
          w[i] = static_cast<T>(x);
        }
      }
  }

  void zero_grad() {
    for (auto& g : groups_)
      for (auto& p : g.params) p.zero_grad();
  }

  std::size_t steps() const { return t_; }

 private:
  std::vector<Group> groups_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace asvit
