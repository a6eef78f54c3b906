// Copyright 2026 The ucad Authors
// SPDX-License-Identifier: Apache-2.0
//
// Multi-task batch processing: requests for different tasks are collated into
// micro-batches that share one sequence length and one adapter rank, run
// through the shared backbone in a single pass, and classified per task.

#pragma once

#include <chrono>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "ucad/backbone.hpp"
#include "ucad/experts.hpp"
#include "ucad/uel.hpp"

namespace ucad {

template <Scalar T>
struct TaskRequest {
  std::string request_id;
  std::string task_id;
  Tensor<T> input;  // [H, W, C] or [D, H, W, C]
};

template <Scalar T>
struct MicroBatch {
  StandardizedBatch<T> batch;
  std::vector<LoraDeltaSet<T>> deltas;  // one per block, one entry per row
  std::vector<const Expert<T>*> experts;
  std::vector<std::string> request_ids;
  std::size_t r_max = 0;

  std::size_t size() const { return experts.size(); }
};

struct Prediction {
  std::string request_id;
  std::string task_id;
  std::vector<double> scores;
  // Argmax for single-label heads; indices at or above the threshold for
  // multi-label heads.
  std::vector<std::size_t> labels;
};

struct RequestError {
  std::string request_id;
  std::string task_id;
  ErrorKind kind;
  std::string message;
};

struct FlowStats {
  std::size_t total_requests = 0;
  std::size_t micro_batch_count = 0;
  std::size_t error_count = 0;
  std::vector<std::size_t> batch_sizes;
  std::vector<std::size_t> batch_r_max;
  std::vector<std::size_t> batch_l_max;
  std::size_t resident_param_bytes = 0;
  std::size_t per_task_model_bytes = 0;
  double wall_time_ms = 0.0;
};

enum class FlowMode { kRandomFlow, kTaskOrdered };

struct EngineOptions {
  std::size_t threads = 1;
  double multi_label_threshold = 0.5;
};

template <Scalar T>
struct CollateResult {
  std::vector<MicroBatch<T>> batches;
  std::vector<RequestError> errors;
};

struct FlowResult {
  std::vector<Prediction> predictions;
  std::vector<RequestError> errors;
  FlowStats stats;
};

/// Embeds one input, using the expert's 3D embedding override when present.
template <Scalar T>
TokenSequence<T> embed_for_expert(const Tensor<T>& input, const Backbone<T>& bb,
                                  const Expert<T>& e) {
  const Modality m = modality_of(input.shape());
  require(m == e.modality, ErrorKind::kInput,
          std::string("task '") + e.task_id + "' expects " + to_string(e.modality) + " input, got " +
              shape_string(input.shape()));
  const auto& cfg = bb.config().embedding;
  if (m == Modality::kThreeD && e.embedding3d) {
    validate_3d_input(input, cfg.spec3d);
    const Tensor<T> patches =
        extract_patches(input, {cfg.spec3d.patch_d, cfg.spec3d.patch_h, cfg.spec3d.patch_w});
    return detail::assemble_tokens(patches, e.embedding3d->proj3d, e.embedding3d->pos3d,
                                   bb.embedding().cls, Modality::kThreeD);
  }
  return embed(input, cfg, bb.embedding());
}

namespace detail {

template <Scalar T>
MicroBatch<T> build_micro_batch(std::vector<TokenSequence<T>> seqs,
                                std::vector<const Expert<T>*> experts,
                                std::vector<std::string> request_ids, std::size_t num_blocks) {
  MicroBatch<T> mb;
  std::size_t l_max = 0;
  for (const auto& s : seqs) l_max = std::max(l_max, s.valid_len);
  mb.batch = standardize_batch(seqs, l_max);
  mb.r_max = max_rank(experts);
  mb.deltas.assign(num_blocks, LoraDeltaSet<T>{mb.r_max, {}});
  for (const auto* e : experts) {
    auto padded = pad_to_rank(*e, mb.r_max);
    for (std::size_t b = 0; b < num_blocks; ++b) mb.deltas[b].rows.push_back(std::move(padded[b]));
  }
  mb.experts = std::move(experts);
  mb.request_ids = std::move(request_ids);
  return mb;
}

}  // namespace detail

/// Chunks requests in arrival order into micro-batches of at most
/// batch_size. Requests that cannot be resolved or embedded are reported and
/// dropped from their chunk; the rest of the chunk proceeds.
template <Scalar T>
CollateResult<T> collate(const std::vector<TaskRequest<T>>& requests, const Registry<T>& registry,
                         const Backbone<T>& bb, std::size_t batch_size) {
  require(batch_size >= 1, ErrorKind::kInput, "batch size must be at least 1");
  CollateResult<T> out;
  for (std::size_t start = 0; start < requests.size(); start += batch_size) {
    const std::size_t end = std::min(requests.size(), start + batch_size);
    std::vector<TokenSequence<T>> seqs;
    std::vector<const Expert<T>*> experts;
    std::vector<std::string> ids;
    for (std::size_t i = start; i < end; ++i) {
      const auto& req = requests[i];
      try {
        const Expert<T>& e = registry.lookup(req.task_id);
        seqs.push_back(embed_for_expert(req.input, bb, e));
        experts.push_back(&e);
        ids.push_back(req.request_id);
      } catch (const Error& err) {
        out.errors.push_back({req.request_id, req.task_id, err.kind(), err.what()});
      }
    }
    if (seqs.empty()) continue;
    out.batches.push_back(detail::build_micro_batch(std::move(seqs), std::move(experts),
                                                    std::move(ids), bb.config().num_blocks));
  }
  return out;
}

template <Scalar T>
Tensor<T> forward_batch(const MicroBatch<T>& mb, const Backbone<T>& bb, std::size_t threads = 1) {
  return backbone_forward(bb, mb.batch, &mb.deltas, threads);
}

/// Task head: z = head_w * cls + head_b, then softmax or element-wise
/// sigmoid depending on the head mode.
template <Scalar T>
std::vector<T> classify(std::span<const T> cls, const Expert<T>& e) {
  require_shape(cls.size() == e.dim(), "classify: CLS width");
  std::vector<T> z(e.num_classes);
  for (std::size_t k = 0; k < e.num_classes; ++k) {
    T acc{0};
    for (std::size_t j = 0; j < cls.size(); ++j) acc += e.head_w(k, j) * cls[j];
    z[k] = acc + e.head_b[k];
  }
  if (e.head_mode == HeadMode::kSigmoidMultiLabel) {
    for (auto& v : z) v = T(1) / (T(1) + std::exp(-v));
    return z;
  }
  T max_z = z[0];
  for (T v : z) max_z = std::max(max_z, v);
  T sum{0};
  for (auto& v : z) {
    v = std::exp(v - max_z);
    sum += v;
  }
  for (auto& v : z) v /= sum;
  return z;
}

// Lowest index wins ties.
template <typename T>
std::size_t argmax(std::span<const T> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

template <Scalar T>
Prediction make_prediction(std::string request_id, const Expert<T>& e, const std::vector<T>& scores,
                           double threshold) {
  Prediction p{std::move(request_id), e.task_id, std::vector<double>(scores.begin(), scores.end()), {}};
  if (e.head_mode == HeadMode::kSoftmaxSingleLabel) {
    p.labels.push_back(argmax(std::span<const double>(p.scores)));
  } else {
    for (std::size_t k = 0; k < p.scores.size(); ++k)
      if (p.scores[k] >= threshold) p.labels.push_back(k);
  }
  return p;
}

template <Scalar T>
std::vector<Prediction> predict_batch(const MicroBatch<T>& mb, const Backbone<T>& bb,
                                      const EngineOptions& opts = {}) {
  const Tensor<T> cls = forward_batch(mb, bb, opts.threads);
  std::vector<Prediction> out;
  for (std::size_t i = 0; i < mb.size(); ++i) {
    const std::vector<T> scores = classify(cls.row(i), *mb.experts[i]);
    out.push_back(make_prediction(mb.request_ids[i], *mb.experts[i], scores, opts.multi_label_threshold));
  }
  return out;
}

/// Weight bytes held in memory: 4 bytes per backbone and expert parameter.
/// Activations are not counted.
template <Scalar T, Scalar U>
std::size_t resident_param_bytes(const Backbone<T>& bb, const std::vector<const Expert<U>*>& experts) {
  std::size_t params = bb.param_count();
  for (const auto* e : experts) params += expert_param_count(*e);
  return 4 * params;
}

// The same accounting for a deployment that keeps one full model per task.
template <Scalar T>
std::size_t per_task_model_bytes(const Backbone<T>& bb, std::size_t task_count) {
  return task_count * 4 * bb.param_count();
}

template <Scalar T>
std::vector<const Expert<T>*> registry_experts(const Registry<T>& reg) {
  std::vector<const Expert<T>*> out;
  for (const auto& [id, e] : reg.experts()) out.push_back(&e);
  return out;
}

/// Serves a request stream. random_flow batches in arrival order regardless
/// of task; task_ordered first groups requests by task (first-appearance
/// order) and batches within each task only.
template <Scalar T>
FlowResult run_flow(const std::vector<TaskRequest<T>>& requests, FlowMode mode,
                    std::size_t batch_size, const Registry<T>& registry, const Backbone<T>& bb,
                    const EngineOptions& opts = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::vector<const TaskRequest<T>*>> streams;
  if (mode == FlowMode::kRandomFlow) {
    streams.emplace_back();
    for (const auto& r : requests) streams.back().push_back(&r);
  } else {
    std::map<std::string, std::size_t> slot;
    for (const auto& r : requests) {
      auto [it, inserted] = slot.try_emplace(r.task_id, streams.size());
      if (inserted) streams.emplace_back();
      streams[it->second].push_back(&r);
    }
  }

  FlowResult result;
  std::map<std::string, bool> tasks;
  for (const auto& stream : streams) {
    std::vector<TaskRequest<T>> copy;
    copy.reserve(stream.size());
    for (const auto* r : stream) copy.push_back(*r);
    CollateResult<T> col = collate(copy, registry, bb, batch_size);
    for (auto& e : col.errors) result.errors.push_back(std::move(e));
    for (const auto& mb : col.batches) {
      auto preds = predict_batch(mb, bb, opts);
      result.stats.batch_sizes.push_back(mb.size());
      result.stats.batch_r_max.push_back(mb.r_max);
      result.stats.batch_l_max.push_back(mb.batch.l_max());
      for (auto& p : preds) {
        tasks[p.task_id] = true;
        result.predictions.push_back(std::move(p));
      }
    }
  }
  auto& s = result.stats;
  s.total_requests = requests.size();
  s.micro_batch_count = s.batch_sizes.size();
  s.error_count = result.errors.size();
  s.resident_param_bytes = resident_param_bytes(bb, registry_experts(registry));
  s.per_task_model_bytes = per_task_model_bytes(bb, tasks.size());
  s.wall_time_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

}  // namespace ucad
