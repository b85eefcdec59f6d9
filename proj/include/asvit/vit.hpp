#pragma once

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "asvit/config.hpp"
#include "asvit/ops.hpp"
#include "asvit/scoring.hpp"
#include "asvit/sparsity.hpp"

namespace asvit {

template <class T>
struct BlockWeights {
  Var<T> norm1_w, norm1_b;
  Var<T> qkv_w, qkv_b;    // [D, 3D], [3D]; columns are Q | K | V, each split into heads
  Var<T> proj_w, proj_b;  // [D, D], [D]
  Var<T> norm2_w, norm2_b;
  Var<T> fc1_w, fc1_b;  // [D, hidden]
  Var<T> fc2_w, fc2_b;  // [hidden, D]
};

template <class T>
struct ViTWeights {
  ModelConfig cfg;
  Var<T> patch_w, patch_b;  // [C*p*p, D], [D]
  Var<T> cls_token;         // [D]
  Var<T> pos_embed;         // [N+1, D]
  std::vector<BlockWeights<T>> blocks;
  Var<T> norm_w, norm_b;
  Var<T> head_w, head_b;  // [D, classes]

  /// Every parameter with its checkpoint name, in a fixed order.
  std::vector<std::pair<std::string, Var<T>*>> named() {
    std::vector<std::pair<std::string, Var<T>*>> out{
        {"patch_embed.weight", &patch_w}, {"patch_embed.bias", &patch_b}, {"cls_token", &cls_token},
        {"pos_embed", &pos_embed}};
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      auto& b = blocks[l];
      const std::string p = "blocks." + std::to_string(l) + ".";
      out.insert(out.end(), {{p + "norm1.weight", &b.norm1_w},
                             {p + "norm1.bias", &b.norm1_b},
                             {p + "attn.qkv.weight", &b.qkv_w},
                             {p + "attn.qkv.bias", &b.qkv_b},
                             {p + "attn.proj.weight", &b.proj_w},
                             {p + "attn.proj.bias", &b.proj_b},
                             {p + "norm2.weight", &b.norm2_w},
                             {p + "norm2.bias", &b.norm2_b},
                             {p + "mlp.fc1.weight", &b.fc1_w},
                             {p + "mlp.fc1.bias", &b.fc1_b},
                             {p + "mlp.fc2.weight", &b.fc2_w},
                             {p + "mlp.fc2.bias", &b.fc2_b}});
    }
    out.insert(out.end(), {{"norm.weight", &norm_w}, {"norm.bias", &norm_b}, {"head.weight", &head_w},
                           {"head.bias", &head_b}});
    return out;
  }

  std::vector<std::pair<std::string, const Var<T>*>> named() const {
    std::vector<std::pair<std::string, const Var<T>*>> out;
    for (auto& [n, v] : const_cast<ViTWeights*>(this)->named()) out.emplace_back(n, v);
    return out;
  }

  /// Expected shape of every parameter for `cfg`, in named() order.
  static std::vector<Shape> shapes(const ModelConfig& cfg) {
    const std::size_t D = cfg.embed_dim, Hd = cfg.hidden_dim();
    std::vector<Shape> s{{cfg.patch_dim(), D}, {D}, {D}, {cfg.num_tokens(), D}};
    for (std::uint32_t l = 0; l < cfg.num_layers; ++l)
      s.insert(s.end(), {{D}, {D}, {D, 3 * D}, {3 * D}, {D, D}, {D}, {D}, {D}, {D, Hd}, {Hd}, {Hd, D}, {D}});
    s.insert(s.end(), {{D}, {D}, {D, cfg.num_classes}, {cfg.num_classes}});
    return s;
  }

  /// All parameters zero (including layer-norm scales).
  static ViTWeights zeros(const ModelConfig& cfg) {
    cfg.validate();
    ViTWeights w;
    w.cfg = cfg;
    w.blocks.resize(cfg.num_layers);
    auto shp = shapes(cfg);
    auto named = w.named();
    for (std::size_t i = 0; i < named.size(); ++i) *named[i].second = Var<T>::param(Tensor<T>(shp[i]));
    return w;
  }

  /// Truncated-normal (std 0.02, cut at 2 std) matrices and embeddings; zero biases; unit LN scales.
  static ViTWeights init(const ModelConfig& cfg, std::mt19937_64& rng) {
    ViTWeights w = zeros(cfg);
    std::normal_distribution<double> nd(0.0, 0.02);
    auto fill = [&](Var<T>& v) {
      for (auto& x : v.mutable_value().values()) {
        double r;
        do r = nd(rng);
        while (std::abs(r) > 0.04);
        x = static_cast<T>(r);
      }
    };
    auto ones = [](Var<T>& v) { v.mutable_value().fill(T(1)); };
    fill(w.patch_w);
    fill(w.cls_token);
    fill(w.pos_embed);
    for (auto& b : w.blocks) {
      ones(b.norm1_w);
      ones(b.norm2_w);
      fill(b.qkv_w);
      fill(b.proj_w);
      fill(b.fc1_w);
      fill(b.fc2_w);
    }
    ones(w.norm_w);
    fill(w.head_w);
    return w;
  }

  /// Deep copy with fresh parameter nodes.
  ViTWeights clone() const {
    ViTWeights w;
    w.cfg = cfg;
    w.blocks.resize(blocks.size());
    auto dst = w.named();
    auto src = named();
    for (std::size_t i = 0; i < dst.size(); ++i) *dst[i].second = Var<T>::param(src[i].second->value());
    return w;
  }

  std::vector<Var<T>> parameters() const {
    std::vector<Var<T>> out;
    for (auto& [n, v] : named()) out.push_back(*v);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Patch embedding

/// Splits images [B, C, H, W] into flattened patches [B, N, C*p*p]; patches in row-major grid
/// order, features ordered (channel, row, column) within a patch.
template <class T>
Tensor<T> extract_patches(const Tensor<T>& images, const ModelConfig& cfg) {
  if (images.rank() != 4 || images.dim(1) != cfg.in_channels || images.dim(2) != cfg.image_size ||
      images.dim(3) != cfg.image_size)
    throw DimensionError("extract_patches: images " + shape_str(images.shape()) + " do not match config [B," +
                         std::to_string(cfg.in_channels) + "," + std::to_string(cfg.image_size) + "," +
                         std::to_string(cfg.image_size) + "]");
  const std::size_t B = images.dim(0), C = cfg.in_channels, S = cfg.image_size, P = cfg.patch_size, G = cfg.grid();
  const std::size_t pd = cfg.patch_dim(), N = cfg.num_patches();
  Tensor<T> out({B, N, pd});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t gy = 0; gy < G; ++gy)
      for (std::size_t gx = 0; gx < G; ++gx) {
        T* dst = out.data() + (b * N + gy * G + gx) * pd;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t py = 0; py < P; ++py)
            for (std::size_t px = 0; px < P; ++px)
              *dst++ = images.data()[((b * C + c) * S + gy * P + py) * S + gx * P + px];
      }
  return out;
}

/// [B, N, D] patch projections -> [B, N+1, D] tokens: class token prepended, positions added.
template <class T>
Var<T> embed_tokens(const Var<T>& patches, const Var<T>& cls, const Var<T>& pos) {
  const auto& P = patches.value();
  const std::size_t B = P.dim(0), N = P.dim(1), D = P.dim(2), n = N + 1;
  if (cls.value().size() != D || pos.value().size() != n * D) throw DimensionError("embed_tokens: parameter shapes");
  Tensor<T> y({B, n, D});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t d = 0; d < D; ++d) {
        const T base = i == 0 ? cls.value()[d] : P[(b * N + i - 1) * D + d];
        y[(b * n + i) * D + d] = base + pos.value()[i * D + d];
      }
  return make_result<T>(std::move(y), {patches, cls, pos}, [B, N, D, n](Node<T>& out) {
    auto* gp = input_grad(out, 0);
    auto* gc = input_grad(out, 1);
    auto* gq = input_grad(out, 2);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t d = 0; d < D; ++d) {
          const T g = out.grad[(b * n + i) * D + d];
          if (gq) (*gq)[i * D + d] += g;
          if (i == 0) {
            if (gc) (*gc)[d] += g;
          } else if (gp) {
            (*gp)[(b * N + i - 1) * D + d] += g;
          }
        }
  });
}

template <class T>
Var<T> patch_embed_batch(const Tensor<T>& images, const ViTWeights<T>& w) {
  auto patches = Var<T>::constant(extract_patches(images, w.cfg));
  return embed_tokens(linear(patches, w.patch_w, w.patch_b), w.cls_token, w.pos_embed);
}

/// Single image [C, H, W] -> tokens [N+1, D].
template <class T>
Var<T> patch_embed(const Tensor<T>& image, const ViTWeights<T>& w) {
  if (image.rank() != 3) throw DimensionError("patch_embed: expects [C, H, W], got " + shape_str(image.shape()));
  Shape s{1};
  s.insert(s.end(), image.shape().begin(), image.shape().end());
  auto x = patch_embed_batch(image.reshaped(s), w);
  return reshape(x, {w.cfg.num_tokens(), w.cfg.embed_dim});
}

// ---------------------------------------------------------------------------
// Attention

/// Attention probabilities [B, H, n, n] from fused projections qkv [B, n, 3D].
/// With a key mask [B, n-1] (image tokens), keys whose mask is below 0.5 get kMaskBias before the
/// softmax. The mask also receives a gradient: the derivative of the policy-weighted softmax
/// exp(a_ij) m_j / sum_k exp(a_ik) m_k, which agrees with the bias form in the forward pass.
template <class T>
Var<T> attention_probs(const Var<T>& qkv, std::size_t heads, const Var<T>& key_mask = {}) {
  const auto& QKV = qkv.value();
  if (QKV.rank() != 3 || QKV.dim(2) % (3 * heads) != 0) throw DimensionError("attention_probs: expects [B, n, 3D]");
  const std::size_t B = QKV.dim(0), n = QKV.dim(1), D = QKV.dim(2) / 3, dh = D / heads, ld = 3 * D;
  const bool masked = key_mask.defined();
  if (masked && (key_mask.value().rank() != 2 || key_mask.value().dim(0) != B || key_mask.value().dim(1) + 1 != n))
    throw DimensionError("attention_probs: key mask must be [B, n-1]");
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  Tensor<T> probs({B, heads, n, n});
  Tensor<T> logits;          // pre-bias logits, kept for the mask gradient
  std::vector<T> lse;        // log-normaliser per row over kept keys
  const bool mask_grad = masked && key_mask.requires_grad() && GradTape<T>::active();
  if (mask_grad) {
    logits = Tensor<T>({B, heads, n, n});
    lse.resize(B * heads * n);
  }
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      const T* q = QKV.data() + b * n * ld + h * dh;
      const T* k = q + D;
      T* p = probs.data() + (b * heads + h) * n * n;
      kernels::gemm_nt(n, n, dh, q, ld, k, ld, p, n, false);
      for (std::size_t i = 0; i < n * n; ++i) p[i] *= scale;
      if (mask_grad) std::copy(p, p + n * n, logits.data() + (b * heads + h) * n * n);
      if (masked) apply_attention_mask_inplace(key_mask.value().data() + b * (n - 1), n - 1, p, n);
      for (std::size_t i = 0; i < n; ++i) {
        T* row = p + i * n;
        T mx = row[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        T s = 0;
        for (std::size_t j = 0; j < n; ++j) s += (row[j] = math::exp(row[j] - mx));
        const T inv = T(1) / s;
        for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
        if (mask_grad) lse[(b * heads + h) * n + i] = mx + std::log(s);
      }
    }
  std::vector<Var<T>> inputs{qkv};
  if (masked) inputs.push_back(key_mask);
  return make_result<T>(
      std::move(probs), std::move(inputs),
      [B, n, D, dh, ld, heads, scale, masked, logits = std::move(logits), lse = std::move(lse)](Node<T>& out) {
        const auto& QKV = out.inputs[0]->value;
        auto* gqkv = input_grad(out, 0);
        Tensor<T>* gmask = masked ? input_grad(out, 1) : nullptr;
        std::vector<T> da(n * n);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t base = (b * heads + h) * n * n;
            const T* p = out.value.data() + base;
            const T* g = out.grad.data() + base;
            for (std::size_t i = 0; i < n; ++i) {
              T dot = 0;
              for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * p[i * n + j];
              for (std::size_t j = 0; j < n; ++j) da[i * n + j] = p[i * n + j] * (g[i * n + j] - dot);
              if (gmask && !logits.empty()) {
                const T* a = logits.data() + base + i * n;
                const T ls = lse[(b * heads + h) * n + i];
                for (std::size_t j = 1; j < n; ++j) {
                  const T w = math::exp(std::min(a[j] - ls, T(30)));
                  (*gmask)[b * (n - 1) + j - 1] += w * (g[i * n + j] - dot);
                }
              }
            }
            if (!gqkv) continue;
            for (auto& v : da) v *= scale;
            const T* q = QKV.data() + b * n * ld + h * dh;
            const T* k = q + D;
            T* gq = gqkv->data() + b * n * ld + h * dh;
            T* gk = gq + D;
            kernels::gemm_nn(n, dh, n, da.data(), n, k, ld, gq, ld, true);
            kernels::gemm_tn(n, dh, n, da.data(), n, q, ld, gk, ld, true);
          }
      });
}

/// Per-head context, heads concatenated: ctx[b, i, h*dh:(h+1)*dh] = sum_j probs[b,h,i,j] v_h[b,j].
template <class T>
Var<T> attention_context(const Var<T>& probs, const Var<T>& qkv) {
  const auto& P = probs.value();
  const auto& QKV = qkv.value();
  const std::size_t B = P.dim(0), heads = P.dim(1), n = P.dim(2), D = QKV.dim(2) / 3, dh = D / heads, ld = 3 * D;
  if (QKV.dim(0) != B || QKV.dim(1) != n) throw DimensionError("attention_context: probs/qkv mismatch");
  Tensor<T> ctx({B, n, D});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      kernels::gemm_nn(n, dh, n, P.data() + (b * heads + h) * n * n, n, QKV.data() + b * n * ld + 2 * D + h * dh, ld,
                       ctx.data() + b * n * D + h * dh, D, false);
  return make_result<T>(std::move(ctx), {probs, qkv}, [B, heads, n, D, dh, ld](Node<T>& out) {
    const auto& P = out.inputs[0]->value;
    const auto& QKV = out.inputs[1]->value;
    auto* gp = input_grad(out, 0);
    auto* gv = input_grad(out, 1);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < heads; ++h) {
        const T* g = out.grad.data() + b * n * D + h * dh;
        const T* v = QKV.data() + b * n * ld + 2 * D + h * dh;
        if (gp) kernels::gemm_nt(n, n, dh, g, D, v, ld, gp->data() + (b * heads + h) * n * n, n, true);
        if (gv)
          kernels::gemm_tn(n, dh, n, P.data() + (b * heads + h) * n * n, n, g, D, gv->data() + b * n * ld + 2 * D + h * dh,
                           ld, true);
      }
  });
}

/// [B, n, D] -> [B, H, n, D/H].
template <class T>
Var<T> split_heads(const Var<T>& x, std::size_t heads) {
  const auto& X = x.value();
  const std::size_t B = X.dim(0), n = X.dim(1), D = X.dim(2), dh = D / heads;
  Tensor<T> y({B, heads, n, dh});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t h = 0; h < heads; ++h)
        std::copy(X.data() + (b * n + i) * D + h * dh, X.data() + (b * n + i) * D + (h + 1) * dh,
                  y.data() + ((b * heads + h) * n + i) * dh);
  return make_result<T>(std::move(y), {x}, [B, n, D, dh, heads](Node<T>& out) {
    if (auto* g = input_grad(out, 0))
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t d = 0; d < dh; ++d)
              (*g)[(b * n + i) * D + h * dh + d] += out.grad[((b * heads + h) * n + i) * dh + d];
  });
}

/// Class-token row of the attention matrix over image tokens: [B, H, n, n] -> [B, H, n-1].
template <class T>
Var<T> class_attention(const Var<T>& probs) {
  const auto& P = probs.value();
  const std::size_t B = P.dim(0), H = P.dim(1), n = P.dim(2);
  Tensor<T> y({B, H, n - 1});
  for (std::size_t bh = 0; bh < B * H; ++bh) std::copy(P.data() + bh * n * n + 1, P.data() + bh * n * n + n, y.data() + bh * (n - 1));
  return make_result<T>(std::move(y), {probs}, [B, H, n](Node<T>& out) {
    if (auto* g = input_grad(out, 0))
      for (std::size_t bh = 0; bh < B * H; ++bh)
        for (std::size_t j = 1; j < n; ++j) (*g)[bh * n * n + j] += out.grad[bh * (n - 1) + j - 1];
  });
}

/// Attention outputs of one layer, batched.
template <class T>
struct LayerCapture {
  Var<T> ctx;    // [B, n, D], heads concatenated, before the output projection
  Var<T> probs;  // [B, H, n, n]
};

/// Per-image view of a layer's attention intermediates.
template <class T>
struct AttnIntermediates {
  Tensor<T> ctx_per_head;  // [H, n, D_h]
  Tensor<T> cls_attn;      // [H, n-1], class-token row without its self entry
};

template <class T>
AttnIntermediates<T> intermediates_of(const LayerCapture<T>& cap, std::size_t heads, std::size_t b) {
  const auto& C = cap.ctx.value();
  const auto& P = cap.probs.value();
  const std::size_t n = C.dim(1), D = C.dim(2), dh = D / heads;
  AttnIntermediates<T> r{Tensor<T>({heads, n, dh}), Tensor<T>({heads, n - 1})};
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t d = 0; d < dh; ++d) r.ctx_per_head[(h * n + i) * dh + d] = C[(b * n + i) * D + h * dh + d];
    for (std::size_t j = 1; j < n; ++j) r.cls_attn[h * (n - 1) + j - 1] = P[((b * heads + h) * n) * n + j];
  }
  return r;
}

template <class T>
struct MhsaOutput {
  Var<T> out;
  LayerCapture<T> capture;
};

/// Multi-head self-attention on (already normalised) tokens x [B, n, D].
template <class T>
MhsaOutput<T> mhsa_forward(const Var<T>& x, const BlockWeights<T>& w, std::size_t heads, const Var<T>& key_mask = {}) {
  auto qkv = linear(x, w.qkv_w, w.qkv_b);
  auto probs = attention_probs(qkv, heads, key_mask);
  auto ctx = attention_context(probs, qkv);
  return {linear(ctx, w.proj_w, w.proj_b), {ctx, probs}};
}

template <class T>
Var<T> ffn_forward(const Var<T>& x, const BlockWeights<T>& w) {
  return linear(gelu(linear(x, w.fc1_w, w.fc1_b)), w.fc2_w, w.fc2_b);
}

inline constexpr double kLayerNormEps = 1e-6;

/// x + MHSA(LN(x)), then + FFN(LN(.)). `key_mask` applies attention masking; `row_mask`
/// scales the FFN-sublayer output per token (activation masking). Both are [B, n-1] or undefined.
template <class T>
MhsaOutput<T> block_forward(const Var<T>& x, const BlockWeights<T>& w, std::size_t heads, const Var<T>& key_mask = {},
                            const Var<T>& row_mask = {}) {
  const T eps = static_cast<T>(kLayerNormEps);
  auto attn = mhsa_forward(layernorm(x, w.norm1_w, w.norm1_b, eps), w, heads, key_mask);
  auto x1 = add(x, attn.out);
  auto f = ffn_forward(layernorm(x1, w.norm2_w, w.norm2_b, eps), w);
  if (row_mask.defined()) f = apply_activation_mask(row_mask, f);
  return {add(x1, f), attn.capture};
}

/// Token scores [B, n-1] of the image tokens from one layer's capture.
template <class T>
Var<T> token_scores(const LayerCapture<T>& cap, std::size_t heads, ScoreKind kind) {
  auto cls = class_attention(cap.probs);
  if (kind == ScoreKind::Vanilla) return vanilla_score(cls);
  const std::size_t n = cap.ctx.value().dim(1);
  auto imp = slice_lastdim(head_importance(split_heads(cap.ctx, heads)), 1, n);
  return weighted_score(head_weights(imp), cls);
}

// ---------------------------------------------------------------------------
// Full forward

enum class ExecMode {
  Masked,  // full length, pruned tokens hidden by masks (training, ablations)
  Gather,  // pruned tokens physically removed (inference)
};

template <class T>
struct PrunePolicy {
  PruneConfig config;
  ExecMode exec = ExecMode::Masked;
  MaskedSelector<T> masked;
  GatherSelector<T> gather;
};

template <class T>
struct StageTrace {
  Var<T> scores;  // [B, candidates]; candidates are the image tokens alive before this stage
  Var<T> mask;    // masked mode: effective keep mask [B, N] after this stage
  std::vector<std::vector<std::size_t>> candidates;  // original patch index of each score column
  std::vector<std::vector<std::size_t>> kept;        // original patch indices alive after this stage
  Var<T> kept_tokens;  // [B]: 1 + alive image tokens (a soft count in masked training)
  std::size_t safeguard_events = 0;  // images where every token fell below threshold
};

template <class T>
struct ScoreTrace {
  std::vector<StageTrace<T>> stages;
};

template <class T>
struct ForwardOutput {
  Var<T> logits;  // [B, classes]
  ScoreTrace<T> trace;
  std::vector<LayerCapture<T>> layers;  // filled when requested
};

namespace detail {

template <class T>
std::vector<std::size_t> alive_list(const Tensor<T>& alive, std::size_t b, std::size_t N) {
  std::vector<std::size_t> r;
  for (std::size_t j = 0; j < N; ++j)
    if (alive[b * N + j] >= T(0.5)) r.push_back(j);
  return r;
}

}  // namespace detail

/// Runs the transformer on images [B, C, H, W]. Without a policy the dense model is evaluated.
/// With a policy, pruning happens after each layer listed in policy.config.locations using the
/// scores of that layer's attention.
template <class T>
ForwardOutput<T> forward(const Tensor<T>& images, const ViTWeights<T>& w, const PrunePolicy<T>* policy = nullptr,
                         bool capture_layers = false) {
  const auto& cfg = w.cfg;
  const std::size_t heads = cfg.num_heads, N = cfg.num_patches(), B = images.dim(0);
  ForwardOutput<T> result;
  if (policy) policy->config.validate(cfg.num_layers);

  Var<T> x = patch_embed_batch(images, w);
  Var<T> effective;  // masked mode
  Tensor<T> alive({B, N}, T(1));
  std::vector<std::vector<std::size_t>> current(B);  // gather mode: patch index per image-token row
  for (auto& c : current) {
    c.resize(N);
    std::iota(c.begin(), c.end(), 0);
  }

  std::size_t stage = 0;
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    Var<T> key_mask, row_mask;
    if (policy && policy->exec == ExecMode::Masked && effective.defined()) {
      if (policy->config.mask_strategy == MaskStrategy::Attention)
        key_mask = effective;
      else
        row_mask = effective;
    }
    auto blk = block_forward(x, w.blocks[l], heads, key_mask, row_mask);
    x = blk.out;
    if (capture_layers) result.layers.push_back(blk.capture);

    if (!policy || stage >= policy->config.num_stages() || l + 1 != policy->config.locations[stage]) continue;

    StageTrace<T> st;
    st.scores = token_scores(blk.capture, heads, policy->config.score);
    if (policy->config.detach_scores) st.scores = detach(st.scores);

    if (policy->exec == ExecMode::Masked) {
      for (std::size_t b = 0; b < B; ++b) st.candidates.push_back(detail::alive_list(alive, b, N));
      Var<T> stage_mask = policy->masked(stage, st.scores, alive);
      Var<T> eff = effective.defined() ? mul(effective, stage_mask) : stage_mask;
      std::vector<std::size_t> rescue;
      for (std::size_t b = 0; b < B; ++b) {
        bool any = false;
        for (std::size_t j = 0; j < N; ++j) any = any || eff.value()[b * N + j] >= T(0.5);
        if (any || st.candidates[b].empty()) continue;
        std::size_t best = st.candidates[b][0];
        for (auto j : st.candidates[b])
          if (st.scores.value()[b * N + j] > st.scores.value()[b * N + best]) best = j;
        rescue.push_back(b * N + best);
      }
      st.safeguard_events = rescue.size();
      eff = force_keep(eff, rescue);
      effective = eff;
      for (std::size_t i = 0; i < alive.size(); ++i) alive[i] = eff.value()[i] >= T(0.5) ? T(1) : T(0);
      st.mask = eff;
      st.kept_tokens = add_scalar(sum_axis(eff, -1), T(1));
      for (std::size_t b = 0; b < B; ++b) st.kept.push_back(detail::alive_list(alive, b, N));
    } else {
      st.candidates = current;
      auto keep = policy->gather(stage, st.scores.value());
      std::vector<std::vector<std::size_t>> rows(B);
      for (std::size_t b = 0; b < B; ++b) {
        rows[b].push_back(0);
        std::vector<std::size_t> next;
        for (auto p : keep[b]) {
          rows[b].push_back(p + 1);
          next.push_back(current[b][p]);
        }
        current[b] = std::move(next);
      }
      x = gather_tokens(x, rows);
      st.kept = current;
      Tensor<T> cnt({B});
      for (std::size_t b = 0; b < B; ++b) cnt[b] = static_cast<T>(current[b].size() + 1);
      st.kept_tokens = Var<T>::constant(std::move(cnt));
    }
    result.trace.stages.push_back(std::move(st));
    ++stage;
  }

  const T eps = static_cast<T>(kLayerNormEps);
  auto cls = layernorm(token_row(x, 0), w.norm_w, w.norm_b, eps);
  result.logits = linear(cls, w.head_w, w.head_b);
  return result;
}

/// Single image [C, H, W] -> logits [classes].
template <class T>
ForwardOutput<T> forward_one(const Tensor<T>& image, const ViTWeights<T>& w, const PrunePolicy<T>* policy = nullptr,
                             bool capture_layers = false) {
  Shape s{1};
  s.insert(s.end(), image.shape().begin(), image.shape().end());
  auto out = forward(image.reshaped(s), w, policy, capture_layers);
  out.logits = reshape(out.logits, {w.cfg.num_classes});
  return out;
}

}  // namespace asvit
