#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <ostream>
#include <random>
#include <vector>

#include "asvit/ops.hpp"

namespace asvit {

/// Additive bias for pruned keys. Finite so max-subtraction in softmax never sees inf - inf.
inline constexpr double kMaskBias = -1e9;

/// Keep/prune decision of one image at one stage. Masks cover image tokens only.
template <class T>
struct TokenMask {
  std::size_t stage = 0;
  std::vector<std::uint8_t> hard;
  std::vector<T> soft;                   // training only
  std::vector<std::size_t> kept_indices;  // inference only, ascending image-token indices
};

/// 1 where score > theta, else 0.
template <class T>
Tensor<T> hard_mask(const Tensor<T>& scores, T theta) {
  Tensor<T> m(scores.shape());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = scores[i] > theta ? T(1) : T(0);
  return m;
}

namespace detail {

// Backward of sigmoid(T * (score - theta)) with respect to (score, theta).
template <class T>
std::function<void(Node<T>&)> sigmoid_gate_backward(T temperature) {
  return [temperature](Node<T>& out) {
    const auto& S = out.inputs[0]->value;
    const T th = out.inputs[1]->value.item();
    auto* gs = input_grad(out, 0);
    auto* gt = input_grad(out, 1);
    T acc = 0;
    for (std::size_t i = 0; i < S.size(); ++i) {
      const T d = temperature * stable_sigmoid_grad(temperature * (S[i] - th)) * out.grad[i];
      if (gs) (*gs)[i] += d;
      acc -= d;
    }
    if (gt) (*gt)[0] += acc;
  };
}

}  // namespace detail

/// sigmoid(T * (score - theta)); differentiable in both scores and the scalar theta.
template <class T>
Var<T> soft_mask(const Var<T>& scores, const Var<T>& theta, T temperature) {
  if (!(temperature > T(0))) throw ContractError("soft_mask: temperature must be positive");
  const T th = theta.value().item();
  Tensor<T> y(scores.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = stable_sigmoid(temperature * (scores.value()[i] - th));
  return make_result<T>(std::move(y), {scores, theta}, detail::sigmoid_gate_backward<T>(temperature));
}

/// Straight-through mask: the forward value is the hard mask (score > theta), the backward
/// pass uses the soft mask's derivative.
template <class T>
Var<T> ste_mask(const Var<T>& scores, const Var<T>& theta, T temperature) {
  if (!(temperature > T(0))) throw ContractError("ste_mask: temperature must be positive");
  const T th = theta.value().item();
  Tensor<T> y = hard_mask(scores.value(), th);
  return make_result<T>(std::move(y), {scores, theta}, detail::sigmoid_gate_backward<T>(temperature));
}

/// Adds kMaskBias to every key column whose image-token mask entry is below 0.5.
/// logits is [..., n] with n = N + 1; column 0 is the class token and is never masked.
template <class T>
void apply_attention_mask_inplace(const T* keep, std::size_t num_image_tokens, T* logits, std::size_t rows) {
  const std::size_t n = num_image_tokens + 1;
  for (std::size_t j = 0; j < num_image_tokens; ++j) {
    if (keep[j] >= T(0.5)) continue;
    for (std::size_t r = 0; r < rows; ++r) logits[r * n + j + 1] += static_cast<T>(kMaskBias);
  }
}

template <class T>
Tensor<T> apply_attention_mask(const Tensor<T>& keep, Tensor<T> logits) {
  if (logits.rank() < 1 || logits.shape().back() != keep.size() + 1)
    throw DimensionError("apply_attention_mask: logits " + shape_str(logits.shape()) + " vs mask of " +
                         std::to_string(keep.size()) + " image tokens");
  apply_attention_mask_inplace(keep.data(), keep.size(), logits.data(), row_count(logits));
  return logits;
}

/// Prepends a constant 1 (the class-token slot) to the last axis: [..., N] -> [..., N+1].
template <class T>
Var<T> with_class_slot(const Var<T>& mask) {
  const std::size_t N = mask.value().shape().back(), rows = row_count(mask.value());
  Shape os = mask.shape();
  os.back() = N + 1;
  Tensor<T> y(os);
  for (std::size_t r = 0; r < rows; ++r) {
    y[r * (N + 1)] = T(1);
    std::copy(mask.value().data() + r * N, mask.value().data() + (r + 1) * N, y.data() + r * (N + 1) + 1);
  }
  return make_result<T>(std::move(y), {mask}, [N, rows](Node<T>& out) {
    if (auto* g = input_grad(out, 0))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < N; ++j) (*g)[r * N + j] += out.grad[r * (N + 1) + j + 1];
  });
}

/// Scales each token's FFN-sublayer output row by its mask value; mask is [B, N], output [B, N+1, D].
template <class T>
Var<T> apply_activation_mask(const Var<T>& mask, const Var<T>& ffn_output) {
  return scale_rows(ffn_output, with_class_slot(mask));
}

/// Sets the forward value at the given flat positions to 1; the gradient passes through unchanged.
template <class T>
Var<T> force_keep(const Var<T>& mask, const std::vector<std::size_t>& positions) {
  if (positions.empty()) return mask;
  Tensor<T> y = mask.value();
  for (auto p : positions) y[p] = T(1);
  return make_result<T>(std::move(y), {mask}, [](Node<T>& out) {
    if (auto* g = input_grad(out, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += out.grad[i];
  });
}

/// Indices of the k largest scores (ties broken by lower index), returned in ascending index order.
template <class T>
std::vector<std::size_t> topk_indices(std::span<const T> scores, std::size_t k) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  k = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
  });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Indices of the k smallest scores, ascending index order.
template <class T>
std::vector<std::size_t> mink_indices(std::span<const T> scores, std::size_t k) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  k = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] < scores[b] || (scores[a] == scores[b] && a < b);
  });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// k distinct indices drawn uniformly from [0, n), ascending.
inline std::vector<std::size_t> random_indices(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  k = std::min(k, n);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Number of tokens the fixed-ratio baseline keeps out of n.
inline std::size_t ratio_keep_count(std::size_t n, double rho) {
  if (!(rho > 0 && rho <= 1)) throw ContractError("keep ratio must lie in (0, 1]");
  const auto k = static_cast<std::size_t>(std::ceil(rho * static_cast<double>(n) - 1e-9));
  return std::clamp<std::size_t>(k, 1, n);
}

/// Fixed-ratio baseline: keeps the ceil(rho * n) top-scoring tokens.
template <class T>
Tensor<T> fixed_ratio_topk(const Tensor<T>& scores, double rho) {
  Tensor<T> m(scores.shape());
  for (auto i : topk_indices(scores.values(), ratio_keep_count(scores.size(), rho))) m[i] = T(1);
  return m;
}

template <class T>
struct PruneResult {
  Var<T> tokens;                     // [k+1, D], class token first
  std::vector<std::size_t> kept;     // image-token indices, ascending
  bool all_pruned = false;           // safeguard kept the single best token
};

/// Single-image inference pruning: keeps the class token and every image token with score > theta,
/// in original order. If nothing survives, the top-scoring image token is kept and the event flagged.
template <class T>
std::vector<std::size_t> threshold_keep(std::span<const T> scores, T theta, bool* all_pruned = nullptr) {
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (scores[i] > theta) kept.push_back(i);
  if (all_pruned) *all_pruned = kept.empty() && !scores.empty();
  if (kept.empty() && !scores.empty()) kept = topk_indices(scores, 1);
  return kept;
}

template <class T>
PruneResult<T> prune_inference(const Var<T>& tokens, const Tensor<T>& scores, T theta) {
  const auto& X = tokens.value();
  if (X.rank() != 2 || X.dim(0) != scores.size() + 1)
    throw DimensionError("prune_inference: expects [n+1, D] tokens and n scores");
  PruneResult<T> r;
  r.kept = threshold_keep(scores.values(), theta, &r.all_pruned);
  std::vector<std::size_t> rows{0};
  for (auto i : r.kept) rows.push_back(i + 1);
  const std::size_t D = X.dim(1);
  r.tokens = reshape(gather_tokens(reshape(tokens, {1, X.dim(0), D}), {rows}), {rows.size(), D});
  return r;
}

/// Shared keep count for a batch: floor(total tokens above theta / B), clamped to [1, n].
template <class T>
std::size_t batch_k(const Tensor<T>& scores, T theta) {
  if (scores.rank() != 2 || scores.dim(0) == 0) throw DimensionError("batch_k: expects [B, n] scores with B >= 1");
  const std::size_t B = scores.dim(0), n = scores.dim(1);
  std::size_t total = 0;
  for (T s : scores.values()) total += s > theta ? 1 : 0;
  return std::clamp<std::size_t>(total / B, 1, std::max<std::size_t>(n, 1));
}

/// Writes the keep grid of one image and stage: header line then one row of 0/1 per patch row.
inline void write_mask_grid(std::ostream& os, std::size_t image, std::size_t stage, const std::vector<std::uint8_t>& keep,
                            std::size_t grid) {
  os << "# image " << image << " stage " << stage << '\n';
  for (std::size_t r = 0; r < grid; ++r) {
    for (std::size_t c = 0; c < grid; ++c) os << (keep[r * grid + c] ? '1' : '0');
    os << '\n';
  }
}


/// Chooses the stage mask [B, N] during full-length (masked) execution. `alive` holds the
/// hard effective mask from earlier stages; the caller ANDs the result with it.
template <class T>
using MaskedSelector = std::function<Var<T>(std::size_t stage, const Var<T>& scores, const Tensor<T>& alive)>;

/// Chooses which current image tokens survive during gather execution: positions into the
/// score columns, ascending, with one equally long list per batch item.
template <class T>
using GatherSelector = std::function<std::vector<std::vector<std::size_t>>(std::size_t stage, const Tensor<T>& scores)>;

/// Training selector: straight-through threshold masks with learnable per-stage thresholds.
template <class T>
MaskedSelector<T> ste_threshold_selector(std::vector<Var<T>> thetas, T temperature) {
  return [thetas = std::move(thetas), temperature](std::size_t stage, const Var<T>& scores, const Tensor<T>&) {
    return ste_mask(scores, thetas.at(stage), temperature);
  };
}

/// Evaluation selector: fixed thresholds, hard comparison.
template <class T>
MaskedSelector<T> hard_threshold_selector(std::vector<T> thetas) {
  return [thetas = std::move(thetas)](std::size_t stage, const Var<T>& scores, const Tensor<T>&) {
    return Var<T>::constant(hard_mask(scores.value(), thetas.at(stage)));
  };
}

/// Inference selector: per-image threshold comparison for a batch of one, otherwise the shared
/// batch-mean keep count applied as a per-image top-k.
template <class T>
GatherSelector<T> threshold_gather_selector(std::vector<T> thetas) {
  return [thetas = std::move(thetas)](std::size_t stage, const Tensor<T>& scores) {
    const std::size_t B = scores.dim(0), n = scores.dim(1);
    const T theta = thetas.at(stage);
    std::vector<std::vector<std::size_t>> keep(B);
    if (B == 1) {
      keep[0] = threshold_keep(std::span<const T>(scores.data(), n), theta);
      return keep;
    }
    const std::size_t k = batch_k(scores, theta);
    for (std::size_t b = 0; b < B; ++b) keep[b] = topk_indices(std::span<const T>(scores.data() + b * n, n), k);
    return keep;
  };
}

/// Fixed keep-ratio baseline over the tokens still alive.
template <class T>
MaskedSelector<T> ratio_masked_selector(double rho) {
  return [rho](std::size_t, const Var<T>& scores, const Tensor<T>& alive) {
    const std::size_t B = scores.value().dim(0), n = scores.value().dim(1);
    Tensor<T> m({B, n});
    std::vector<T> masked(n);
    for (std::size_t b = 0; b < B; ++b) {
      std::size_t count = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const bool on = alive[b * n + j] >= T(0.5);
        count += on;
        masked[j] = on ? scores.value()[b * n + j] : -std::numeric_limits<T>::infinity();
      }
      if (count == 0) continue;
      for (auto j : topk_indices(std::span<const T>(masked), ratio_keep_count(count, rho))) m[b * n + j] = T(1);
    }
    return Var<T>::constant(std::move(m));
  };
}

template <class T>
GatherSelector<T> ratio_gather_selector(double rho) {
  return [rho](std::size_t, const Tensor<T>& scores) {
    const std::size_t B = scores.dim(0), n = scores.dim(1);
    std::vector<std::vector<std::size_t>> keep(B);
    for (std::size_t b = 0; b < B; ++b)
      keep[b] = topk_indices(std::span<const T>(scores.data() + b * n, n), ratio_keep_count(n, rho));
    return keep;
  };
}

enum class MatchedArm { TopK, Random, MinK };

/// Keeps a prescribed number of alive tokens per image and stage (counts[b][stage]), chosen by
/// highest score, uniformly at random, or lowest score. Used to compare selection rules at
/// identical token budgets.
template <class T>
MaskedSelector<T> count_matched_selector(std::vector<std::vector<std::size_t>> counts, MatchedArm arm,
                                         std::shared_ptr<std::mt19937_64> rng) {
  return [counts = std::move(counts), arm, rng](std::size_t stage, const Var<T>& scores, const Tensor<T>& alive) {
    const std::size_t B = scores.value().dim(0), n = scores.value().dim(1);
    Tensor<T> m({B, n});
    for (std::size_t b = 0; b < B; ++b) {
      std::vector<std::size_t> pos;
      std::vector<T> sub;
      for (std::size_t j = 0; j < n; ++j)
        if (alive[b * n + j] >= T(0.5)) {
          pos.push_back(j);
          sub.push_back(scores.value()[b * n + j]);
        }
      const std::size_t k = std::min(counts.at(b).at(stage), pos.size());
      std::vector<std::size_t> pick;
      switch (arm) {
        case MatchedArm::TopK: pick = topk_indices(std::span<const T>(sub), k); break;
        case MatchedArm::MinK: pick = mink_indices(std::span<const T>(sub), k); break;
        case MatchedArm::Random: pick = random_indices(pos.size(), k, *rng); break;
      }
      for (auto i : pick) m[b * n + pos[i]] = T(1);
    }
    return Var<T>::constant(std::move(m));
  };
}

}  // namespace asvit
