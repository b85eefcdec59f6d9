#pragma once

#include <ostream>
#include <vector>

#include "asvit/ops.hpp"

namespace asvit {

/// Per-head importance of each token: the l2 norm of that head's context vector.
/// ctx_per_head is [..., H, n, D_h]; the result is [..., H, n].
template <class T>
Var<T> head_importance(const Var<T>& ctx_per_head) {
  if (ctx_per_head.value().rank() < 3) throw DimensionError("head_importance: expects [..., H, n, D_h]");
  return l2norm_lastdim(ctx_per_head);
}

/// Normalizes importances across heads (axis -2) so each token's weights sum to 1.
/// A token whose importances are all zero gets uniform 1/H weights and no gradient.
template <class T>
Var<T> head_weights(const Var<T>& importance) {
  const auto& I = importance.value();
  if (I.rank() < 2) throw DimensionError("head_weights: expects [..., H, n]");
  const std::size_t H = I.dim(-2), n = I.dim(-1), outer = I.size() / (H * n);
  Tensor<T> R(I.shape());
  std::vector<T> totals(outer * n);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < n; ++i) {
      T s = 0;
      for (std::size_t h = 0; h < H; ++h) {
        const T v = I[(o * H + h) * n + i];
        if (v < T(0)) throw ContractError("head_weights: importances must be nonnegative");
        s += v;
      }
      totals[o * n + i] = s;
      for (std::size_t h = 0; h < H; ++h)
        R[(o * H + h) * n + i] = s > T(0) ? I[(o * H + h) * n + i] / s : T(1) / static_cast<T>(H);
    }
  return make_result<T>(std::move(R), {importance}, [H, n, outer, totals = std::move(totals)](Node<T>& out) {
    auto* g = input_grad(out, 0);
    if (!g) return;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < n; ++i) {
        const T s = totals[o * n + i];
        if (s == T(0)) continue;
        // d r_h / d imp_k = (delta_hk - r_h) / s
        T dot = 0;
        for (std::size_t h = 0; h < H; ++h) dot += out.grad[(o * H + h) * n + i] * out.value[(o * H + h) * n + i];
        for (std::size_t k = 0; k < H; ++k) (*g)[(o * H + k) * n + i] += (out.grad[(o * H + k) * n + i] - dot) / s;
      }
  });
}

/// Head-weighted class attention: sum over heads of weight * class-attention probability.
template <class T>
Var<T> weighted_score(const Var<T>& weights, const Var<T>& cls_attn) {
  return sum_axis(mul(weights, cls_attn), -2);
}

/// Plain class attention averaged over heads.
template <class T>
Var<T> vanilla_score(const Var<T>& cls_attn) {
  return mean_axis(cls_attn, -2);
}

/// Scoring breakdown of one image at one pruning stage; rows are heads, columns image tokens.
template <class T>
struct StageScores {
  std::size_t stage = 0;
  Tensor<T> head_importance;  // [H, N]
  Tensor<T> head_weights;     // [H, N]
  Tensor<T> token_scores;     // [N]
  std::vector<std::size_t> token_index;  // original patch index of each column
  std::vector<bool> kept;
};

template <class T>
struct ScoreReport {
  std::vector<StageScores<T>> stages;

  /// CSV with columns stage,token_index,score,kept_flag.
  void write_csv(std::ostream& os) const {
    os << "stage,token_index,score,kept_flag\n";
    for (const auto& s : stages)
      for (std::size_t i = 0; i < s.token_scores.size(); ++i)
        os << s.stage << ',' << s.token_index[i] << ',' << static_cast<double>(s.token_scores[i]) << ','
           << (s.kept[i] ? 1 : 0) << '\n';
  }
};

}  // namespace asvit
