// Copyright 2026 The ucad Authors
// SPDX-License-Identifier: Apache-2.0
//
// Frozen pre-norm Vision Transformer with per-row low-rank updates on the
// query and value projections.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <thread>
#include <vector>

#include "ucad/lora.hpp"
#include "ucad/numerics/ops.hpp"
#include "ucad/random.hpp"
#include "ucad/uel.hpp"

namespace ucad {

struct BackboneConfig {
  std::size_t dim = 768;
  std::size_t num_blocks = 12;
  std::size_t num_heads = 12;
  std::size_t mlp_dim = 3072;
  float eps = 1e-6f;
  std::uint64_t seed = 0;
  EmbeddingConfig embedding;

  void validate() const {
    require(dim > 0 && num_blocks > 0 && num_heads > 0 && mlp_dim > 0, ErrorKind::kInput,
            "backbone dims must be positive");
    require(dim % num_heads == 0, ErrorKind::kInput,
            "dim " + std::to_string(dim) + " not divisible by " + std::to_string(num_heads) +
                " heads");
    require(eps > 0.0f, ErrorKind::kInput, "layer-norm eps must be positive");
    embedding.validate();
  }
  std::size_t head_dim() const { return dim / num_heads; }

  friend bool operator==(const BackboneConfig& a, const BackboneConfig& b) {
    return a.dim == b.dim && a.num_blocks == b.num_blocks && a.num_heads == b.num_heads &&
           a.mlp_dim == b.mlp_dim && a.eps == b.eps && a.seed == b.seed &&
           a.embedding.spec2d.patch_h == b.embedding.spec2d.patch_h &&
           a.embedding.spec2d.patch_w == b.embedding.spec2d.patch_w &&
           a.embedding.spec2d.channels == b.embedding.spec2d.channels &&
           a.embedding.spec2d.max_h == b.embedding.spec2d.max_h &&
           a.embedding.spec2d.max_w == b.embedding.spec2d.max_w &&
           a.embedding.spec3d.patch_d == b.embedding.spec3d.patch_d &&
           a.embedding.spec3d.patch_h == b.embedding.spec3d.patch_h &&
           a.embedding.spec3d.patch_w == b.embedding.spec3d.patch_w &&
           a.embedding.spec3d.channels == b.embedding.spec3d.channels &&
           a.embedding.spec3d.max_d == b.embedding.spec3d.max_d &&
           a.embedding.spec3d.max_h == b.embedding.spec3d.max_h &&
           a.embedding.spec3d.max_w == b.embedding.spec3d.max_w;
  }
};

template <Scalar T>
struct BlockWeights {
  Tensor<T> w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
  Tensor<T> mlp_in, mlp_in_b, mlp_out, mlp_out_b;
  Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b;

  static BlockWeights zeros(std::size_t d, std::size_t mlp) {
    return {Tensor<T>({d, d}),   Tensor<T>({d}), Tensor<T>({d, d}),   Tensor<T>({d}),
            Tensor<T>({d, d}),   Tensor<T>({d}), Tensor<T>({d, d}),   Tensor<T>({d}),
            Tensor<T>({d, mlp}), Tensor<T>({mlp}), Tensor<T>({mlp, d}), Tensor<T>({d}),
            Tensor<T>({d}),      Tensor<T>({d}), Tensor<T>({d}),      Tensor<T>({d})};
  }

  // Visits tensors in serialization order.
  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    for (auto* t : {&self.w_q, &self.b_q, &self.w_k, &self.b_k, &self.w_v, &self.b_v,
                    &self.w_o, &self.b_o, &self.mlp_in, &self.mlp_in_b, &self.mlp_out,
                    &self.mlp_out_b, &self.ln1_g, &self.ln1_b, &self.ln2_g, &self.ln2_b})
      f(*t);
  }

  template <Scalar U>
  BlockWeights<U> cast() const {
    return {w_q.template cast<U>(),      b_q.template cast<U>(),
            w_k.template cast<U>(),      b_k.template cast<U>(),
            w_v.template cast<U>(),      b_v.template cast<U>(),
            w_o.template cast<U>(),      b_o.template cast<U>(),
            mlp_in.template cast<U>(),   mlp_in_b.template cast<U>(),
            mlp_out.template cast<U>(),  mlp_out_b.template cast<U>(),
            ln1_g.template cast<U>(),    ln1_b.template cast<U>(),
            ln2_g.template cast<U>(),    ln2_b.template cast<U>()};
  }

  friend bool operator==(const BlockWeights&, const BlockWeights&) = default;
};

/// The shared frozen backbone. Weights are fixed at construction; nothing in
/// the library hands out mutable access afterwards.
template <Scalar T>
class Backbone {
 public:
  Backbone(BackboneConfig config, EmbeddingWeights<T> embedding,
           std::vector<BlockWeights<T>> blocks, Tensor<T> final_g, Tensor<T> final_b)
      : config_(config),
        embedding_(std::move(embedding)),
        blocks_(std::move(blocks)),
        final_g_(std::move(final_g)),
        final_b_(std::move(final_b)) {
    config_.validate();
    check_shapes();
  }

  const BackboneConfig& config() const { return config_; }
  const EmbeddingWeights<T>& embedding() const { return embedding_; }
  const std::vector<BlockWeights<T>>& blocks() const { return blocks_; }
  const Tensor<T>& final_gamma() const { return final_g_; }
  const Tensor<T>& final_beta() const { return final_b_; }

  std::size_t param_count() const {
    std::size_t n = embedding_.param_count() + final_g_.size() + final_b_.size();
    for (const auto& b : blocks_) BlockWeights<T>::visit(b, [&](const Tensor<T>& t) { n += t.size(); });
    return n;
  }

  template <Scalar U>
  Backbone<U> cast() const {
    std::vector<BlockWeights<U>> blocks;
    for (const auto& b : blocks_) blocks.push_back(b.template cast<U>());
    return Backbone<U>(config_, embedding_.template cast<U>(), std::move(blocks),
                       final_g_.template cast<U>(), final_b_.template cast<U>());
  }

  friend bool operator==(const Backbone&, const Backbone&) = default;

 private:
  void check_shapes() const {
    const std::size_t d = config_.dim;
    const auto ref = EmbeddingWeights<T>::zeros(config_.embedding, d);
    require_shape(embedding_.proj2d.shape() == ref.proj2d.shape() &&
                      embedding_.proj3d.shape() == ref.proj3d.shape() &&
                      embedding_.pos2d.shape() == ref.pos2d.shape() &&
                      embedding_.pos3d.shape() == ref.pos3d.shape() &&
                      embedding_.cls.shape() == ref.cls.shape(),
                  "embedding weights do not match config");
    require_shape(blocks_.size() == config_.num_blocks, "block count does not match config");
    const auto zero = BlockWeights<T>::zeros(d, config_.mlp_dim);
    for (const auto& b : blocks_) {
      std::vector<Shape> want, got;
      BlockWeights<T>::visit(zero, [&](const Tensor<T>& t) { want.push_back(t.shape()); });
      BlockWeights<T>::visit(b, [&](const Tensor<T>& t) { got.push_back(t.shape()); });
      require_shape(want == got, "block weights do not match config");
    }
    require_shape(final_g_.shape() == Shape{d} && final_b_.shape() == Shape{d},
                  "final norm shape");
  }

  BackboneConfig config_;
  EmbeddingWeights<T> embedding_;
  std::vector<BlockWeights<T>> blocks_;
  Tensor<T> final_g_;
  Tensor<T> final_b_;
};

// Sum of declared tensor sizes, from the config alone.
inline std::size_t backbone_param_count(const BackboneConfig& c) {
  const std::size_t d = c.dim, m = c.mlp_dim;
  const std::size_t embed = c.embedding.spec2d.patch_dim() * d + c.embedding.spec3d.patch_dim() * d +
                            (c.embedding.spec2d.max_patches() + 1) * d +
                            (c.embedding.spec3d.max_patches() + 1) * d + d;
  const std::size_t block = 4 * (d * d + d) + (d * m + m) + (m * d + d) + 4 * d;
  return embed + c.num_blocks * block + 2 * d;
}

inline constexpr double kInitStddev = 0.02;

/// Deterministic stand-in for pretrained weights: every matrix and bias is
/// drawn from N(0, stddev^2) by a Xoshiro256 stream seeded with `seed`, in
/// serialization order; layer-norm gains are 1 and shifts 0.
template <Scalar T = float>
Backbone<T> init_random_backbone(BackboneConfig config, std::uint64_t seed,
                                 double stddev = kInitStddev) {
  config.seed = seed;
  config.validate();
  Xoshiro256 rng(seed);
  const std::size_t d = config.dim;
  auto emb = EmbeddingWeights<T>::zeros(config.embedding, d);
  for (auto* t : {&emb.proj2d, &emb.proj3d, &emb.pos2d, &emb.pos3d, &emb.cls})
    *t = Tensor<T>::randn(t->shape(), rng, stddev);
  std::vector<BlockWeights<T>> blocks;
  for (std::size_t b = 0; b < config.num_blocks; ++b) {
    auto w = BlockWeights<T>::zeros(d, config.mlp_dim);
    BlockWeights<T>::visit(w, [&](Tensor<T>& t) { t = Tensor<T>::randn(t.shape(), rng, stddev); });
    for (auto* g : {&w.ln1_g, &w.ln2_g}) *g = Tensor<T>::filled({d}, T(1));
    for (auto* z : {&w.ln1_b, &w.ln2_b}) *z = Tensor<T>({d});
    blocks.push_back(std::move(w));
  }
  return Backbone<T>(config, std::move(emb), std::move(blocks), Tensor<T>::filled({d}, T(1)),
                     Tensor<T>({d}));
}

// Intermediate values of one attention call, kept for the backward pass.
template <Scalar T>
struct AttentionCache {
  Tensor<T> input;            // L x d
  Tensor<T> u_q, u_v;         // L x r (x A^T), empty without adapters
  Tensor<T> q, k, v;          // L x d
  std::vector<Tensor<T>> probs;  // per head, L x L
  Tensor<T> context;          // L x d, heads concatenated before W_O
};

template <Scalar T>
struct BlockCache {
  Tensor<T> x;
  LayerNormStats<T> ln1;
  Tensor<T> h1;
  AttentionCache<T> attn;
  Tensor<T> x2;
  LayerNormStats<T> ln2;
  Tensor<T> h2;
  Tensor<T> m1;  // pre-activation of the MLP
  Tensor<T> g;   // gelu(m1)
};

namespace detail {

template <Scalar T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  Tensor<T> y = matmul(x, w);
  add_row_vector(y, b);
  return y;
}

template <Scalar T>
void zero_padding_rows(Tensor<T>& x, std::span<const std::uint8_t> mask) {
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (!mask[i]) std::fill(x.row(i).begin(), x.row(i).end(), T(0));
}

}  // namespace detail

/// Masked multi-head self-attention for one sequence (L x d). When `lora` is
/// set, Q and V get their low-rank terms; K, W_O and biases are untouched.
template <Scalar T>
Tensor<T> attention_row(const Tensor<T>& x, std::span<const std::uint8_t> mask,
                        const BlockWeights<T>& w, std::size_t num_heads,
                        const BlockLora<T>* lora, AttentionCache<T>* cache = nullptr) {
  const std::size_t len = x.dim(0), d = x.dim(1);
  require_shape(mask.size() == len, "attention mask length");
  const std::size_t hd = d / num_heads;
  Tensor<T> q = detail::linear(x, w.w_q, w.b_q);
  Tensor<T> k = detail::linear(x, w.w_k, w.b_k);
  Tensor<T> v = detail::linear(x, w.w_v, w.b_v);
  Tensor<T> u_q, u_v;
  if (lora) {
    u_q = matmul_nt(x, lora->q.a);
    add_inplace(q, matmul_nt(u_q, lora->q.b));
    u_v = matmul_nt(x, lora->v.a);
    add_inplace(v, matmul_nt(u_v, lora->v.b));
  }
  const T scale_factor = T(1) / std::sqrt(static_cast<T>(hd));
  Tensor<T> context({len, d});
  std::vector<Tensor<T>> probs;
  if (cache) probs.reserve(num_heads);
  for (std::size_t h = 0; h < num_heads; ++h) {
    const std::size_t off = h * hd;
    Tensor<T> p({len, len});
    for (std::size_t i = 0; i < len; ++i) {
      for (std::size_t j = 0; j < len; ++j) {
        T s{0};
        for (std::size_t t = 0; t < hd; ++t) s += q(i, off + t) * k(j, off + t);
        p(i, j) = s * scale_factor;
      }
      softmax_masked_inplace(p.row(i), mask);
    }
    for (std::size_t i = 0; i < len; ++i) {
      for (std::size_t j = 0; j < len; ++j) {
        const T pij = p(i, j);
        for (std::size_t t = 0; t < hd; ++t) context(i, off + t) += pij * v(j, off + t);
      }
    }
    if (cache) probs.push_back(std::move(p));
  }
  Tensor<T> out = detail::linear(context, w.w_o, w.b_o);
  if (cache) {
    *cache = {x, std::move(u_q), std::move(u_v), std::move(q), std::move(k), std::move(v),
              std::move(probs), std::move(context)};
  }
  return out;
}

/// Pre-norm block: x + attn(ln1(x)), then + mlp(ln2(.)). Padded positions of
/// the output are reset to zero.
template <Scalar T>
Tensor<T> block_forward_row(const Tensor<T>& x, std::span<const std::uint8_t> mask,
                            const BlockWeights<T>& w, const BackboneConfig& cfg,
                            const BlockLora<T>* lora, BlockCache<T>* cache = nullptr) {
  const T eps = static_cast<T>(cfg.eps);
  LayerNormStats<T> ln1, ln2;
  Tensor<T> h1 = layer_norm(x, w.ln1_g, w.ln1_b, eps, cache ? &ln1 : nullptr);
  AttentionCache<T> attn_cache;
  Tensor<T> x2 = attention_row(h1, mask, w, cfg.num_heads, lora, cache ? &attn_cache : nullptr);
  add_inplace(x2, x);
  Tensor<T> h2 = layer_norm(x2, w.ln2_g, w.ln2_b, eps, cache ? &ln2 : nullptr);
  Tensor<T> m1 = detail::linear(h2, w.mlp_in, w.mlp_in_b);
  Tensor<T> g = gelu(m1);
  Tensor<T> y = detail::linear(g, w.mlp_out, w.mlp_out_b);
  add_inplace(y, x2);
  detail::zero_padding_rows(y, mask);
  if (cache) {
    *cache = {x,  std::move(ln1), std::move(h1), std::move(attn_cache), std::move(x2),
              std::move(ln2), std::move(h2), std::move(m1), std::move(g)};
  }
  return y;
}

// Per-block adapters for one row, or nullptr entries for the plain backbone.
template <Scalar T>
using RowAdapters = std::vector<const BlockLora<T>*>;

// Runs every block and the final norm over one padded sequence; returns the
// normalized CLS vector (length d).
template <Scalar T>
Tensor<T> backbone_forward_row(const Backbone<T>& bb, const Tensor<T>& x,
                               std::span<const std::uint8_t> mask, const RowAdapters<T>& adapters,
                               std::vector<BlockCache<T>>* caches = nullptr,
                               Tensor<T>* final_input = nullptr,
                               LayerNormStats<T>* final_stats = nullptr) {
  const auto& cfg = bb.config();
  require(adapters.empty() || adapters.size() == cfg.num_blocks, ErrorKind::kContract,
          "need one adapter entry per block");
  if (caches) caches->assign(cfg.num_blocks, {});
  Tensor<T> h = x;
  for (std::size_t b = 0; b < cfg.num_blocks; ++b) {
    const BlockLora<T>* lora = adapters.empty() ? nullptr : adapters[b];
    h = block_forward_row(h, mask, bb.blocks()[b], cfg, lora, caches ? &(*caches)[b] : nullptr);
  }
  const Tensor<T> cls_in = h.rows(0, 1);
  Tensor<T> cls = layer_norm(cls_in, bb.final_gamma(), bb.final_beta(), static_cast<T>(cfg.eps),
                             final_stats);
  if (final_input) *final_input = cls_in;
  return cls.reshaped({cfg.dim});
}

namespace detail {

// Runs fn(i) for i in [0, n) across up to `threads` workers. Each row is
// computed independently so results do not depend on the thread count.
template <typename F>
void parallel_rows(std::size_t n, std::size_t threads, F&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::jthread> workers;
  for (std::size_t t = 0; t < threads; ++t) {
    workers.emplace_back([&, t] {
      for (std::size_t i = t; i < n; i += threads) fn(i);
    });
  }
}

template <Scalar T>
RowAdapters<T> row_adapters(const std::vector<LoraDeltaSet<T>>* deltas, std::size_t row) {
  RowAdapters<T> out;
  if (!deltas) return out;
  for (const auto& set : *deltas) out.push_back(&set.rows[row]);
  return out;
}

}  // namespace detail

/// Masked attention over a whole batch (n x L_max x d).
template <Scalar T>
Tensor<T> attention_masked(const Tensor<T>& x, const std::vector<Mask>& mask,
                           const BlockWeights<T>& block, std::size_t num_heads,
                           const LoraDeltaSet<T>* deltas) {
  require_shape(x.ndim() == 3 && mask.size() == x.dim(0), "attention batch shape");
  const std::size_t n = x.dim(0), len = x.dim(1), d = x.dim(2);
  if (deltas) deltas->validate(n, d);
  Tensor<T> out({n, len, d});
  for (std::size_t i = 0; i < n; ++i) {
    const auto first = x.data().begin() + static_cast<std::ptrdiff_t>(i * len * d);
    const Tensor<T> xi({len, d}, std::vector<T>(first, first + static_cast<std::ptrdiff_t>(len * d)));
    const Tensor<T> yi = attention_row(xi, mask[i], block, num_heads, deltas ? &deltas->rows[i] : nullptr);
    std::copy(yi.data().begin(), yi.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * len * d));
  }
  return out;
}

/// One block over a whole batch.
template <Scalar T>
Tensor<T> block_forward(const Tensor<T>& x, const std::vector<Mask>& mask,
                        const BlockWeights<T>& block, const BackboneConfig& cfg,
                        const LoraDeltaSet<T>* deltas) {
  require_shape(x.ndim() == 3 && mask.size() == x.dim(0), "block batch shape");
  const std::size_t n = x.dim(0), len = x.dim(1), d = x.dim(2);
  if (deltas) deltas->validate(n, d);
  Tensor<T> out({n, len, d});
  for (std::size_t i = 0; i < n; ++i) {
    const auto first = x.data().begin() + static_cast<std::ptrdiff_t>(i * len * d);
    const Tensor<T> xi({len, d}, std::vector<T>(first, first + static_cast<std::ptrdiff_t>(len * d)));
    const Tensor<T> yi = block_forward_row(xi, mask[i], block, cfg, deltas ? &deltas->rows[i] : nullptr);
    std::copy(yi.data().begin(), yi.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * len * d));
  }
  return out;
}

/// Full forward over a standardized batch. `deltas`, when given, holds one
/// LoraDeltaSet per block. Returns n x d normalized CLS vectors.
template <Scalar T>
Tensor<T> backbone_forward(const Backbone<T>& bb, const StandardizedBatch<T>& batch,
                           const std::vector<LoraDeltaSet<T>>* deltas = nullptr,
                           std::size_t threads = 1) {
  const auto& cfg = bb.config();
  const std::size_t n = batch.size();
  require_shape(batch.dim() == cfg.dim, "batch token width " + std::to_string(batch.dim()) +
                                            " != backbone dim " + std::to_string(cfg.dim));
  if (deltas) {
    require(deltas->size() == cfg.num_blocks, ErrorKind::kContract,
            "expected " + std::to_string(cfg.num_blocks) + " delta sets, got " +
                std::to_string(deltas->size()));
    for (const auto& set : *deltas) set.validate(n, cfg.dim);
  }
  Tensor<T> out({n, cfg.dim});
  detail::parallel_rows(n, threads, [&](std::size_t i) {
    const Tensor<T> cls = backbone_forward_row(bb, batch.row(i), batch.mask[i],
                                               detail::row_adapters(deltas, i));
    std::copy(cls.data().begin(), cls.data().end(), out.row(i).begin());
  });
  return out;
}

}  // namespace ucad
