#pragma once

#include <vector>

#include "asvit/config.hpp"
#include "asvit/ops.hpp"

namespace asvit {

// Cost accounting counts one multiply-accumulate as one operation, the convention behind the
// usual "GFLOPs" figures for vision transformers. Per block with n tokens, width D and MLP ratio r:
//
//   qkv + output projections   4 n D^2
//   QK^T and attention * V      2 n^2 D
//   two FFN matmuls             2 r n D^2
//
// Biases, softmax, layer norm and GELU are not counted. The patch projection (N * C p^2 * D) and
// the classifier (D * classes) are added once as fixed cost.

/// Cost of one transformer block processing n tokens.
inline double layer_flops(double n, const ModelConfig& cfg) {
  const double D = cfg.embed_dim;
  return 4.0 * n * D * D + 2.0 * n * n * D + 2.0 * cfg.mlp_ratio * n * D * D;
}

/// d layer_flops / d n.
inline double layer_flops_slope(double n, const ModelConfig& cfg) {
  const double D = cfg.embed_dim;
  return 4.0 * D * D + 4.0 * n * D + 2.0 * cfg.mlp_ratio * D * D;
}

/// Patch projection plus classifier; independent of pruning.
inline double fixed_flops(const ModelConfig& cfg) {
  return static_cast<double>(cfg.num_patches()) * cfg.patch_dim() * cfg.embed_dim +
         static_cast<double>(cfg.embed_dim) * cfg.num_classes;
}

class FlopsModel {
 public:
  FlopsModel(ModelConfig cfg, std::vector<std::size_t> locations) : cfg_(cfg), locations_(std::move(locations)) {
    stage_of_layer_.resize(cfg_.num_layers);
    std::size_t s = 0;
    for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
      while (s < locations_.size() && l >= locations_[s]) ++s;
      stage_of_layer_[l] = s;
    }
  }

  explicit FlopsModel(ModelConfig cfg) : FlopsModel(cfg, {}) {}

  const ModelConfig& config() const { return cfg_; }
  std::size_t num_stages() const { return locations_.size(); }

  /// Index into the stage-count vector (0 = dense) used by layer l (0-based).
  std::size_t stage_of_layer(std::size_t l) const { return stage_of_layer_.at(l); }

  double dense() const {
    return fixed_flops(cfg_) + cfg_.num_layers * layer_flops(static_cast<double>(cfg_.num_tokens()), cfg_);
  }

  /// Total cost given the token count active in each stage, counts[0] being the dense count.
  double total(const std::vector<double>& counts) const {
    check(counts);
    double f = fixed_flops(cfg_);
    for (std::size_t l = 0; l < cfg_.num_layers; ++l) f += layer_flops(counts[stage_of_layer_[l]], cfg_);
    return f;
  }

  /// d total / d counts[s].
  std::vector<double> gradient(const std::vector<double>& counts) const {
    check(counts);
    std::vector<double> g(counts.size(), 0.0);
    for (std::size_t l = 0; l < cfg_.num_layers; ++l)
      g[stage_of_layer_[l]] += layer_flops_slope(counts[stage_of_layer_[l]], cfg_);
    return g;
  }

  double fraction(const std::vector<double>& counts) const { return total(counts) / dense(); }

 private:
  void check(const std::vector<double>& counts) const {
    if (counts.size() != locations_.size() + 1)
      throw DimensionError("FlopsModel: expected " + std::to_string(locations_.size() + 1) + " stage counts");
    for (std::size_t s = 1; s < counts.size(); ++s)
      if (counts[s] > counts[s - 1] + 1e-6)
        throw ContractError("FlopsModel: token counts must be nonincreasing across stages");
  }

  ModelConfig cfg_;
  std::vector<std::size_t> locations_;
  std::vector<std::size_t> stage_of_layer_;
};

/// Per-image cost [B] from token counts [B, stages+1]; differentiable in the counts.
template <class T>
Var<T> flops_of_batch(const Var<T>& stage_kept, const FlopsModel& model) {
  const auto& K = stage_kept.value();
  const std::size_t S = model.num_stages() + 1;
  if (K.rank() != 2 || K.dim(1) != S) throw DimensionError("flops_of_batch: expects [B, " + std::to_string(S) + "]");
  const std::size_t B = K.dim(0);
  Tensor<T> y({B});
  std::vector<double> slopes(B * S);
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<double> c(S);
    for (std::size_t s = 0; s < S; ++s) c[s] = static_cast<double>(K[b * S + s]);
    y[b] = static_cast<T>(model.total(c));
    auto g = model.gradient(c);
    std::copy(g.begin(), g.end(), slopes.begin() + static_cast<std::ptrdiff_t>(b * S));
  }
  return make_result<T>(std::move(y), {stage_kept}, [B, S, slopes = std::move(slopes)](Node<T>& out) {
    if (auto* g = input_grad(out, 0))
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t s = 0; s < S; ++s) (*g)[b * S + s] += out.grad[b] * static_cast<T>(slopes[b * S + s]);
  });
}

}  // namespace asvit
