// Copyright 2026 The ucad Authors
// SPDX-License-Identifier: Apache-2.0
//
// Expert training against a frozen backbone. Gradients come from hand-written
// backward passes over the fixed block structure; the backbone itself never
// receives gradient storage.

#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "ucad/backbone.hpp"
#include "ucad/backbone_io.hpp"
#include "ucad/dataset.hpp"
#include "ucad/engine.hpp"
#include "ucad/evaluation.hpp"
#include "ucad/experts.hpp"

namespace ucad {

enum class LossMode { kCrossEntropy, kBinaryCrossEntropy };

struct TrainConfig {
  double learning_rate = 3e-4;
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  std::size_t rank = 4;
  LossMode loss_mode = LossMode::kCrossEntropy;
  bool train_3d_embedding = false;

  void validate() const {
    require(learning_rate > 0.0, ErrorKind::kInput, "learning rate must be positive");
    require(epochs >= 1, ErrorKind::kInput, "need at least one epoch");
    require(batch_size >= 1, ErrorKind::kInput, "batch size must be at least 1");
    require(rank >= 1, ErrorKind::kInput, "rank must be at least 1");
  }
};

// Sub-seed tags mixed into the root seed with derive_seed().
inline constexpr std::uint64_t kSeedTagExpertInit = 1;
inline constexpr std::uint64_t kSeedTagGradCheck = 2;

inline constexpr double kProbabilityFloor = 1e-12;

template <Scalar T>
T cross_entropy(std::span<const T> probs, std::size_t label) {
  require(label < probs.size(), ErrorKind::kInput, "label out of range");
  return -std::log(std::max(probs[label], static_cast<T>(kProbabilityFloor)));
}

// Mean over the K labels.
template <Scalar T>
T bce(std::span<const T> scores, std::span<const int> labels) {
  require(scores.size() == labels.size() && !scores.empty(), ErrorKind::kInput,
          "bce: score/label length mismatch");
  const T floor = static_cast<T>(kProbabilityFloor);
  T sum{0};
  for (std::size_t k = 0; k < scores.size(); ++k) {
    sum += labels[k] ? std::log(std::max(scores[k], floor))
                     : std::log(std::max(T(1) - scores[k], floor));
  }
  return -sum / static_cast<T>(scores.size());
}

/// Gradients for every trainable tensor of an expert. Frozen backbone tensors
/// have no slot here.
template <Scalar T>
struct GradientSet {
  std::vector<BlockLora<T>> lora;
  Tensor<T> head_w;
  Tensor<T> head_b;
  std::optional<Embedding3DOverride<T>> embedding3d;

  static GradientSet zeros_like(const Expert<T>& e) {
    GradientSet g;
    for (const auto& b : e.lora)
      g.lora.push_back({{Tensor<T>(b.q.a.shape()), Tensor<T>(b.q.b.shape())},
                        {Tensor<T>(b.v.a.shape()), Tensor<T>(b.v.b.shape())}});
    g.head_w = Tensor<T>(e.head_w.shape());
    g.head_b = Tensor<T>(e.head_b.shape());
    if (e.embedding3d)
      g.embedding3d = Embedding3DOverride<T>{Tensor<T>(e.embedding3d->proj3d.shape()),
                                             Tensor<T>(e.embedding3d->pos3d.shape())};
    return g;
  }
};

// Visits (name, tensor) for every trainable tensor in a fixed order. Works on
// Expert and GradientSet alike.
template <typename Params, typename F>
void for_each_trainable(Params& p, F&& f) {
  for (std::size_t b = 0; b < p.lora.size(); ++b) {
    const std::string pre = "block" + std::to_string(b) + ".";
    f(pre + "A_q", p.lora[b].q.a);
    f(pre + "B_q", p.lora[b].q.b);
    f(pre + "A_v", p.lora[b].v.a);
    f(pre + "B_v", p.lora[b].v.b);
  }
  f(std::string("head_w"), p.head_w);
  f(std::string("head_b"), p.head_b);
  if (p.embedding3d) {
    f(std::string("embedding3d.proj3d"), p.embedding3d->proj3d);
    f(std::string("embedding3d.pos3d"), p.embedding3d->pos3d);
  }
}

// Deliberate defects for mutation-testing the gradient checker.
enum class BackwardMutation { kNone, kDropSoftmaxCorrection, kDropAttentionScale };

namespace detail {

template <Scalar T>
Tensor<T> layer_norm_backward(const Tensor<T>& dy, const Tensor<T>& x, const LayerNormStats<T>& st,
                              const Tensor<T>& gamma) {
  const std::size_t n = x.dim(0), d = x.dim(1);
  Tensor<T> dx({n, d});
  std::vector<T> xhat(d), dxhat(d);
  for (std::size_t i = 0; i < n; ++i) {
    T mean_dxhat{0}, mean_dxhat_xhat{0};
    for (std::size_t j = 0; j < d; ++j) {
      xhat[j] = (x(i, j) - st.mean[i]) * st.rstd[i];
      dxhat[j] = dy(i, j) * gamma[j];
      mean_dxhat += dxhat[j];
      mean_dxhat_xhat += dxhat[j] * xhat[j];
    }
    mean_dxhat /= static_cast<T>(d);
    mean_dxhat_xhat /= static_cast<T>(d);
    for (std::size_t j = 0; j < d; ++j)
      dx(i, j) = st.rstd[i] * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
  }
  return dx;
}

// Backward through the adapted projection y = x W + b + (x A^T) B^T with
// respect to x, A and B. `u` is the cached x A^T.
template <Scalar T>
void lora_backward(const Tensor<T>& dy, const Tensor<T>& x, const Tensor<T>& u,
                   const LoraAdapter<T>& ad, LoraAdapter<T>& grad, Tensor<T>& dx) {
  add_inplace(grad.b, matmul_tn(dy, u));          // d x r
  const Tensor<T> du = matmul(dy, ad.b);          // L x r
  add_inplace(grad.a, matmul_tn(du, x));          // r x d
  add_inplace(dx, matmul(du, ad.a));              // L x d
}

/// Backward of block_forward_row for an unpadded sequence. Returns dL/dx and
/// accumulates adapter gradients into `grad`.
template <Scalar T>
Tensor<T> block_backward(const Tensor<T>& dy, const BlockCache<T>& c, const BlockWeights<T>& w,
                         const BackboneConfig& cfg, const BlockLora<T>& lora, BlockLora<T>& grad,
                         BackwardMutation mutation) {
  const std::size_t len = c.x.dim(0), d = c.x.dim(1);
  const std::size_t heads = cfg.num_heads, hd = d / heads;

  // MLP branch.
  Tensor<T> dx2 = dy;
  Tensor<T> dm1 = matmul_nt(dy, w.mlp_out);
  for (std::size_t i = 0; i < dm1.size(); ++i) dm1[i] *= gelu_grad(c.m1[i]);
  add_inplace(dx2, layer_norm_backward(matmul_nt(dm1, w.mlp_in), c.x2, c.ln2, w.ln2_g));

  // Attention branch.
  const auto& a = c.attn;
  const Tensor<T> dctx = matmul_nt(dx2, w.w_o);
  Tensor<T> dq({len, d}), dk({len, d}), dv({len, d});
  const T scale_factor = mutation == BackwardMutation::kDropAttentionScale
                             ? T(1)
                             : T(1) / std::sqrt(static_cast<T>(hd));
  std::vector<T> dp(len);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * hd;
    const Tensor<T>& p = a.probs[h];
    for (std::size_t i = 0; i < len; ++i) {
      T dot{0};
      for (std::size_t j = 0; j < len; ++j) {
        T s{0};
        for (std::size_t t = 0; t < hd; ++t) s += dctx(i, off + t) * a.v(j, off + t);
        dp[j] = s;
        dot += s * p(i, j);
        const T pij = p(i, j);
        for (std::size_t t = 0; t < hd; ++t) dv(j, off + t) += pij * dctx(i, off + t);
      }
      if (mutation == BackwardMutation::kDropSoftmaxCorrection) dot = T(0);
      for (std::size_t j = 0; j < len; ++j) {
        const T ds = p(i, j) * (dp[j] - dot) * scale_factor;
        if (ds == T(0)) continue;
        for (std::size_t t = 0; t < hd; ++t) {
          dq(i, off + t) += ds * a.k(j, off + t);
          dk(j, off + t) += ds * a.q(i, off + t);
        }
      }
    }
  }
  Tensor<T> dh1 = matmul_nt(dq, w.w_q);
  add_inplace(dh1, matmul_nt(dk, w.w_k));
  add_inplace(dh1, matmul_nt(dv, w.w_v));
  lora_backward(dq, c.h1, a.u_q, lora.q, grad.q, dh1);
  lora_backward(dv, c.h1, a.u_v, lora.v, grad.v, dh1);

  Tensor<T> dx = dx2;
  add_inplace(dx, layer_norm_backward(dh1, c.x, c.ln1, w.ln1_g));
  return dx;
}

template <Scalar T>
RowAdapters<T> expert_adapters(const Expert<T>& e) {
  RowAdapters<T> out;
  for (const auto& b : e.lora) out.push_back(&b);
  return out;
}

// Tokens for one training input, through the expert's own 3D embedding when
// it has one. `patches` receives the flattened patches in that case.
template <Scalar T>
TokenSequence<T> training_tokens(const Tensor<T>& input, const Backbone<T>& bb, const Expert<T>& e,
                                 Tensor<T>* patches) {
  const auto& cfg = bb.config().embedding;
  if (e.embedding3d && modality_of(input.shape()) == Modality::kThreeD) {
    validate_3d_input(input, cfg.spec3d);
    *patches = extract_patches(input, {cfg.spec3d.patch_d, cfg.spec3d.patch_h, cfg.spec3d.patch_w});
    return detail::assemble_tokens(*patches, e.embedding3d->proj3d, e.embedding3d->pos3d, bb.embedding().cls,
                           Modality::kThreeD);
  }
  return embed_for_expert(input, bb, e);
}

template <Scalar T>
struct SampleOutcome {
  T loss{0};
  std::vector<T> scores;
};

// Forward for one sample; with `grad` set, also backpropagates `weight` times
// the sample loss into it.
template <Scalar T>
SampleOutcome<T> sample_pass(const Backbone<T>& bb, const Expert<T>& e, const Sample<T>& s,
                             GradientSet<T>* grad, T weight, BackwardMutation mutation) {
  const auto& cfg = bb.config();
  Tensor<T> patches;
  const TokenSequence<T> seq = training_tokens(s.input, bb, e, &patches);
  const Mask mask(seq.valid_len, 1);
  std::vector<BlockCache<T>> caches;
  Tensor<T> final_in;
  LayerNormStats<T> final_stats;
  const Tensor<T> cls = backbone_forward_row(bb, seq.tokens, mask, expert_adapters(e),
                                             grad ? &caches : nullptr, &final_in, &final_stats);
  SampleOutcome<T> out;
  out.scores = classify(std::span<const T>(cls.data()), e);
  std::vector<T> dlogits(e.num_classes);
  if (e.head_mode == HeadMode::kSoftmaxSingleLabel) {
    out.loss = cross_entropy(std::span<const T>(out.scores), s.label);
    for (std::size_t k = 0; k < e.num_classes; ++k)
      dlogits[k] = out.scores[k] - (k == s.label ? T(1) : T(0));
  } else {
    out.loss = bce(std::span<const T>(out.scores), std::span<const int>(s.label_vector));
    for (std::size_t k = 0; k < e.num_classes; ++k)
      dlogits[k] = (out.scores[k] - static_cast<T>(s.label_vector[k])) / static_cast<T>(e.num_classes);
  }
  if (!grad) return out;

  const std::size_t d = cfg.dim;
  Tensor<T> dz({1, d});
  for (std::size_t k = 0; k < e.num_classes; ++k) {
    const T g = dlogits[k] * weight;
    grad->head_b[k] += g;
    for (std::size_t j = 0; j < d; ++j) {
      grad->head_w(k, j) += g * cls[j];
      dz(0, j) += g * e.head_w(k, j);
    }
  }
  const Tensor<T> dcls = layer_norm_backward(dz, final_in, final_stats, bb.final_gamma());
  Tensor<T> dh({seq.valid_len, d});
  std::copy(dcls.data().begin(), dcls.data().end(), dh.row(0).begin());
  for (std::size_t b = cfg.num_blocks; b-- > 0;)
    dh = block_backward(dh, caches[b], bb.blocks()[b], cfg, e.lora[b], grad->lora[b], mutation);

  if (grad->embedding3d && !patches.empty()) {
    add_inplace(grad->embedding3d->proj3d, matmul_tn(patches, dh.rows(1, seq.valid_len)));
    for (std::size_t j = 0; j < seq.valid_len; ++j)
      for (std::size_t t = 0; t < d; ++t) grad->embedding3d->pos3d(j, t) += dh(j, t);
  }
  return out;
}

}  // namespace detail

/// Mean loss over `batch` for the expert as given. Forward only.
template <Scalar T>
T batch_loss(const std::vector<Sample<T>>& batch, const Expert<T>& e, const Backbone<T>& bb) {
  T sum{0};
  for (const auto& s : batch)
    sum += detail::sample_pass<T>(bb, e, s, nullptr, T(0), BackwardMutation::kNone).loss;
  return sum / static_cast<T>(batch.size());
}

struct BackwardResult {
  double loss = 0.0;                        // mean over the batch
  std::vector<std::vector<double>> scores;  // per sample, before the update
};

/// Exact gradients of the mean batch loss with respect to every trainable
/// tensor of `e`.
template <Scalar T>
GradientSet<T> backward(const std::vector<Sample<T>>& batch, const Expert<T>& e, const Backbone<T>& bb,
                        BackwardResult* result = nullptr,
                        BackwardMutation mutation = BackwardMutation::kNone) {
  require(!batch.empty(), ErrorKind::kInput, "backward: empty batch");
  GradientSet<T> g = GradientSet<T>::zeros_like(e);
  const T weight = T(1) / static_cast<T>(batch.size());
  double loss = 0.0;
  for (const auto& s : batch) {
    const auto r = detail::sample_pass(bb, e, s, &g, weight, mutation);
    loss += static_cast<double>(r.loss);
    if (result) result->scores.emplace_back(r.scores.begin(), r.scores.end());
  }
  if (result) result->loss = loss / static_cast<double>(batch.size());
  return g;
}

template <Scalar T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::size_t step = 0;
};

/// One bias-corrected Adam update. Increments state.step before use, so the
/// first call runs with t = 1.
template <Scalar T>
void adam_step(const std::vector<Tensor<T>*>& params, const std::vector<const Tensor<T>*>& grads,
               AdamState<T>& state, const TrainConfig& cfg) {
  require(params.size() == grads.size(), ErrorKind::kContract, "adam: param/grad count mismatch");
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
  }
  require(state.m.size() == params.size(), ErrorKind::kContract, "adam: state does not match params");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const T b1 = static_cast<T>(cfg.adam_beta1), b2 = static_cast<T>(cfg.adam_beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(cfg.adam_beta1, t));
  const T c2 = static_cast<T>(1.0 - std::pow(cfg.adam_beta2, t));
  const T lr = static_cast<T>(cfg.learning_rate), eps = static_cast<T>(cfg.adam_eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    require_shape(params[i]->shape() == grads[i]->shape(), "adam: grad shape");
    auto p = params[i]->data();
    auto g = grads[i]->data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = b1 * m[j] + (T(1) - b1) * g[j];
      v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
      const T mhat = m[j] / c1;
      const T vhat = v[j] / c2;
      p[j] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

struct EpochMetrics {
  std::size_t epoch = 0;  // 0 = before any update
  double train_loss = 0.0;
  double train_metric = 0.0;
  double val_loss = 0.0;
  double val_metric = 0.0;  // accuracy, or mean per-label AUC
};

template <Scalar T>
struct TrainResult {
  Expert<T> expert;
  std::vector<EpochMetrics> history;
  std::size_t best_epoch = 0;
  double best_val_metric = 0.0;
};

struct EvalSummary {
  double loss = 0.0;
  double metric = 0.0;
};

namespace detail {

// Accuracy for single-label heads, mean per-label AUC for multi-label heads.
template <Scalar T>
double checkpoint_metric(const std::vector<std::vector<double>>& scores,
                         const std::vector<const Sample<T>*>& samples, HeadMode mode) {
  if (samples.empty()) return 0.0;
  if (mode == HeadMode::kSoftmaxSingleLabel) {
    std::vector<std::size_t> preds, labels;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      preds.push_back(argmax(std::span<const double>(scores[i])));
      labels.push_back(samples[i]->label);
    }
    return accuracy(preds, labels);
  }
  std::vector<std::vector<int>> label_rows;
  for (const auto* s : samples) label_rows.push_back(s->label_vector);
  return per_label_auc(scores, label_rows).mean.value_or(0.0);
}

}  // namespace detail

/// Loss and the checkpoint metric over a split.
template <Scalar T>
EvalSummary evaluate_split(const std::vector<Sample<T>>& samples, const Expert<T>& e,
                           const Backbone<T>& bb) {
  EvalSummary out;
  if (samples.empty()) return out;
  std::vector<std::vector<double>> scores;
  std::vector<const Sample<T>*> refs;
  for (const auto& s : samples) {
    const auto r = detail::sample_pass<T>(bb, e, s, nullptr, T(0), BackwardMutation::kNone);
    out.loss += static_cast<double>(r.loss);
    scores.emplace_back(r.scores.begin(), r.scores.end());
    refs.push_back(&s);
  }
  out.loss /= static_cast<double>(samples.size());
  out.metric = detail::checkpoint_metric(scores, refs, e.head_mode);
  return out;
}

template <Scalar T>
Dataset<T> cast_dataset(const Dataset<float>& ds) {
  Dataset<T> out;
  out.modality = ds.modality;
  out.num_classes = ds.num_classes;
  out.multi_label = ds.multi_label;
  for (Split sp : {Split::kTrain, Split::kVal, Split::kTest})
    for (const auto& s : ds.split(sp))
      out.split(sp).push_back({s.input.template cast<T>(), s.label, s.label_vector});
  return out;
}

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Trains a fresh expert for `task_id` and returns the checkpoint with the
/// best validation metric (epoch 0, the untrained expert, included; later
/// epochs replace it only when strictly better).
template <Scalar T>
TrainResult<T> train_expert(const Dataset<T>& ds, const Backbone<T>& bb, const TrainConfig& cfg,
                            const std::string& task_id, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  require(!ds.train.empty(), ErrorKind::kInput, "training split is empty");
  require(!ds.val.empty(), ErrorKind::kInput, "validation split is empty");
  require(cfg.rank <= bb.config().dim, ErrorKind::kInput, "rank exceeds backbone dim");
  const HeadMode mode = ds.multi_label ? HeadMode::kSigmoidMultiLabel : HeadMode::kSoftmaxSingleLabel;
  require((cfg.loss_mode == LossMode::kBinaryCrossEntropy) == ds.multi_label, ErrorKind::kInput,
          "loss mode does not match the dataset's label type");

  Expert<T> e = make_fresh_expert<T>(task_id, ds.modality, cfg.rank, ds.num_classes, mode, bb.config(),
                                     derive_seed(cfg.seed, kSeedTagExpertInit));
  e.backbone_fingerprint = backbone_fingerprint(bb);
  if (cfg.train_3d_embedding && ds.modality == Modality::kThreeD)
    e.embedding3d = Embedding3DOverride<T>{bb.embedding().proj3d, bb.embedding().pos3d};

  TrainResult<T> result;
  auto record = [&](EpochMetrics m) {
    result.history.push_back(m);
    if (on_epoch) on_epoch(m);
  };
  {
    const EvalSummary tr = evaluate_split(ds.train, e, bb);
    const EvalSummary va = evaluate_split(ds.val, e, bb);
    record({0, tr.loss, tr.metric, va.loss, va.metric});
    result.expert = e;
    result.best_epoch = 0;
    result.best_val_metric = va.metric;
  }

  AdamState<T> adam;
  std::vector<std::size_t> order(ds.train.size());
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Xoshiro256 rng(cfg.seed ^ static_cast<std::uint64_t>(epoch));
    shuffle(std::span<std::size_t>(order), rng);

    double loss_sum = 0.0;
    std::vector<std::vector<double>> train_scores;
    std::vector<const Sample<T>*> train_refs;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<Sample<T>> batch;
      for (std::size_t i = start; i < end; ++i) batch.push_back(ds.train[order[i]]);
      BackwardResult br;
      GradientSet<T> g = backward(batch, e, bb, &br);
      if (!std::isfinite(br.loss))
        fail(ErrorKind::kNumeric, "non-finite loss in epoch " + std::to_string(epoch) + ", batch " +
                                      std::to_string(batch_index));
      loss_sum += br.loss * static_cast<double>(batch.size());
      for (std::size_t i = start; i < end; ++i) train_refs.push_back(&ds.train[order[i]]);
      for (auto& row : br.scores) train_scores.push_back(std::move(row));
      std::vector<Tensor<T>*> params;
      std::vector<const Tensor<T>*> grads;
      for_each_trainable(e, [&](const std::string&, Tensor<T>& t) { params.push_back(&t); });
      for_each_trainable(g, [&](const std::string&, Tensor<T>& t) { grads.push_back(&t); });
      adam_step(params, grads, adam, cfg);
    }
    const EvalSummary va = evaluate_split(ds.val, e, bb);
    // Train loss and metric are taken during the epoch, before each update.
    record({epoch, loss_sum / static_cast<double>(order.size()),
            detail::checkpoint_metric(train_scores, train_refs, e.head_mode), va.loss, va.metric});
    if (va.metric > result.best_val_metric) {
      result.best_val_metric = va.metric;
      result.best_epoch = epoch;
      result.expert = e;
    }
  }
  return result;
}

struct GradCheckOptions {
  double step = 1e-4;
  double tolerance = 1e-4;       // max relative error
  double abs_tolerance = 1e-8;   // coordinates with |analytic - numeric| below this pass
  double rel_floor = 1e-6;       // smaller gradients are left out of max_rel_error
  std::size_t coords_per_tensor = 64;
  std::uint64_t seed = 0;
  BackwardMutation mutation = BackwardMutation::kNone;
};

struct TensorCheck {
  std::string name;
  std::size_t coords = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t failures = 0;
};

struct GradCheckReport {
  std::vector<TensorCheck> tensors;
  double max_rel_error = 0.0;  // over coordinates with gradient magnitude >= rel_floor
  double max_abs_error = 0.0;
  std::size_t coords_checked = 0;
  std::size_t failures = 0;  // coordinates outside both the relative and absolute tolerance
  bool passed = false;
};

/// Compares analytic gradients with central differences in double
/// precision on up to `coords_per_tensor` coordinates of every trainable
/// tensor (all of them for smaller tensors).
template <Scalar T, Scalar U>
GradCheckReport grad_check(const Expert<T>& expert, const Backbone<U>& backbone,
                           const std::vector<Sample<float>>& samples, const GradCheckOptions& opts = {}) {
  const Backbone<double> bb = backbone.template cast<double>();
  Expert<double> e = expert.template cast<double>();
  std::vector<Sample<double>> batch;
  for (const auto& s : samples) batch.push_back({s.input.template cast<double>(), s.label, s.label_vector});
  const GradientSet<double> g = backward(batch, e, bb, nullptr, opts.mutation);

  std::vector<const Tensor<double>*> grads;
  for_each_trainable(g, [&](const std::string&, const Tensor<double>& t) { grads.push_back(&t); });

  GradCheckReport report;
  Xoshiro256 rng(derive_seed(opts.seed, kSeedTagGradCheck));
  std::size_t index = 0;
  for_each_trainable(e, [&](const std::string& name, Tensor<double>& param) {
    const Tensor<double>& grad = *grads[index++];
    std::vector<std::size_t> coords(param.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (coords.size() > opts.coords_per_tensor) {
      shuffle(std::span<std::size_t>(coords), rng);
      coords.resize(opts.coords_per_tensor);
    }
    TensorCheck tc{name, coords.size(), 0.0, 0.0, 0};
    for (std::size_t c : coords) {
      const double saved = param[c];
      param[c] = saved + opts.step;
      const double up = batch_loss(batch, e, bb);
      param[c] = saved - opts.step;
      const double down = batch_loss(batch, e, bb);
      param[c] = saved;
      const double numeric = (up - down) / (2.0 * opts.step);
      const double analytic = grad[c];
      const double abs_err = std::abs(analytic - numeric);
      tc.max_abs_error = std::max(tc.max_abs_error, abs_err);
      const double denom = std::max(std::abs(analytic), std::abs(numeric));
      const double rel = denom > 0.0 ? abs_err / denom : 0.0;
      if (denom >= opts.rel_floor) tc.max_rel_error = std::max(tc.max_rel_error, rel);
      if (abs_err > opts.abs_tolerance && rel >= opts.tolerance) ++tc.failures;
    }
    report.coords_checked += tc.coords;
    report.failures += tc.failures;
    report.max_rel_error = std::max(report.max_rel_error, tc.max_rel_error);
    report.max_abs_error = std::max(report.max_abs_error, tc.max_abs_error);
    report.tensors.push_back(std::move(tc));
  });
  report.passed = report.failures == 0;
  return report;
}

}  // namespace ucad
