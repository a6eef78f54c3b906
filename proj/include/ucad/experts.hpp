// Copyright 2026 The ucad Authors
// SPDX-License-Identifier: Apache-2.0
//
// Task experts: per-task adapters plus a linear head, rank padding, parameter
// accounting, the ".ucex" codec and a registry keyed by task id.

#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ucad/backbone.hpp"
#include "ucad/backbone_io.hpp"
#include "ucad/io/binary.hpp"
#include "ucad/lora.hpp"
#include "ucad/random.hpp"

namespace ucad {

enum class HeadMode : std::uint8_t { kSoftmaxSingleLabel = 0, kSigmoidMultiLabel = 1 };

inline const char* to_string(HeadMode m) {
  return m == HeadMode::kSoftmaxSingleLabel ? "softmax_single_label" : "sigmoid_multi_label";
}

// Task-specific replacement for the 3D patch projection and positions.
template <Scalar T>
struct Embedding3DOverride {
  Tensor<T> proj3d;
  Tensor<T> pos3d;

  template <Scalar U>
  Embedding3DOverride<U> cast() const {
    return {proj3d.template cast<U>(), pos3d.template cast<U>()};
  }
  friend bool operator==(const Embedding3DOverride&, const Embedding3DOverride&) = default;
};

template <Scalar T>
struct Expert {
  std::string task_id;
  Modality modality = Modality::kTwoD;
  std::size_t rank = 0;
  std::size_t num_classes = 0;
  HeadMode head_mode = HeadMode::kSoftmaxSingleLabel;
  std::vector<BlockLora<T>> lora;  // one per backbone block
  Tensor<T> head_w;                // K x d
  Tensor<T> head_b;                // K
  std::vector<std::string> class_names;
  std::optional<Embedding3DOverride<T>> embedding3d;
  // Fingerprint of the backbone this expert was trained against; 0 = unbound.
  std::uint32_t backbone_fingerprint = 0;

  std::size_t dim() const { return head_w.dim(1); }
  std::size_t num_blocks() const { return lora.size(); }

  void validate() const {
    require(!lora.empty() && head_w.ndim() == 2, ErrorKind::kShape, "expert has no blocks");
    const std::size_t d = dim();
    require(rank >= 1 && rank <= d, ErrorKind::kContract,
            "expert rank " + std::to_string(rank) + " outside [1, " + std::to_string(d) + "]");
    require(head_mode == HeadMode::kSigmoidMultiLabel ? num_classes >= 1 : num_classes >= 2,
            ErrorKind::kContract, "too few classes for head mode");
    for (const auto& b : lora)
      for (const auto* ad : {&b.q, &b.v})
        require_shape(ad->a.shape() == Shape{rank, d} && ad->b.shape() == Shape{d, rank},
                      "expert adapter shape");
    require_shape(head_w.shape() == Shape{num_classes, d} && head_b.shape() == Shape{num_classes},
                  "expert head shape");
    require_shape(class_names.size() == num_classes, "class name count");
  }

  template <Scalar U>
  Expert<U> cast() const {
    Expert<U> e;
    e.task_id = task_id;
    e.modality = modality;
    e.rank = rank;
    e.num_classes = num_classes;
    e.head_mode = head_mode;
    for (const auto& b : lora) e.lora.push_back(b.template cast<U>());
    e.head_w = head_w.template cast<U>();
    e.head_b = head_b.template cast<U>();
    e.class_names = class_names;
    if (embedding3d) e.embedding3d = embedding3d->template cast<U>();
    e.backbone_fingerprint = backbone_fingerprint;
    return e;
  }

  friend bool operator==(const Expert&, const Expert&) = default;
};

inline std::vector<std::string> default_class_names(std::size_t k) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < k; ++i) names.push_back("class_" + std::to_string(i));
  return names;
}

/// Fresh expert for training: A ~ N(0, 0.02^2), B = 0, zero head. With B = 0
/// the expert reproduces the frozen backbone exactly.
template <Scalar T>
Expert<T> make_fresh_expert(std::string task_id, Modality modality, std::size_t rank,
                            std::size_t num_classes, HeadMode mode, const BackboneConfig& cfg,
                            std::uint64_t seed) {
  Xoshiro256 rng(seed);
  const std::size_t d = cfg.dim;
  Expert<T> e;
  e.task_id = std::move(task_id);
  e.modality = modality;
  e.rank = rank;
  e.num_classes = num_classes;
  e.head_mode = mode;
  for (std::size_t b = 0; b < cfg.num_blocks; ++b) {
    BlockLora<T> bl;
    bl.q = {Tensor<T>::randn({rank, d}, rng, kInitStddev), Tensor<T>({d, rank})};
    bl.v = {Tensor<T>::randn({rank, d}, rng, kInitStddev), Tensor<T>({d, rank})};
    e.lora.push_back(std::move(bl));
  }
  e.head_w = Tensor<T>({num_classes, d});
  e.head_b = Tensor<T>({num_classes});
  e.class_names = default_class_names(num_classes);
  e.validate();
  return e;
}

template <Scalar T>
std::size_t max_rank(const std::vector<const Expert<T>*>& experts) {
  require(!experts.empty(), ErrorKind::kContract, "max_rank of an empty expert list");
  std::size_t r = 0;
  for (const auto* e : experts) r = std::max(r, e->rank);
  return r;
}

/// Adapters of `e` zero-padded to rank r_max, one entry per block.
template <Scalar T>
std::vector<BlockLora<T>> pad_to_rank(const Expert<T>& e, std::size_t r_max) {
  require(r_max >= e.rank, ErrorKind::kContract,
          "r_max " + std::to_string(r_max) + " below expert rank " + std::to_string(e.rank));
  std::vector<BlockLora<T>> out;
  out.reserve(e.lora.size());
  for (const auto& b : e.lora) out.push_back({pad_adapter(b.q, r_max), pad_adapter(b.v, r_max)});
  return out;
}

struct ParamCounts {
  std::size_t lora_params = 0;
  std::size_t head_params = 0;
  std::size_t embedding3d_params = 0;
  std::size_t backbone_params = 0;
  double ratio = 0.0;            // lora / backbone
  double ratio_with_head = 0.0;  // (lora + head) / backbone
};

inline std::size_t lora_param_count(std::size_t blocks, std::size_t d, std::size_t r) {
  return blocks * 4 * d * r;
}

template <Scalar T>
std::size_t expert_param_count(const Expert<T>& e) {
  std::size_t n = lora_param_count(e.num_blocks(), e.dim(), e.rank) + e.head_w.size() + e.head_b.size();
  if (e.embedding3d) n += e.embedding3d->proj3d.size() + e.embedding3d->pos3d.size();
  return n;
}

template <Scalar T, Scalar U>
ParamCounts count_trainable_ratio(const Expert<T>& e, const Backbone<U>& bb) {
  ParamCounts c;
  c.lora_params = lora_param_count(e.num_blocks(), e.dim(), e.rank);
  c.head_params = e.num_classes * e.dim() + e.num_classes;
  if (e.embedding3d) c.embedding3d_params = e.embedding3d->proj3d.size() + e.embedding3d->pos3d.size();
  c.backbone_params = bb.param_count();
  c.ratio = static_cast<double>(c.lora_params) / static_cast<double>(c.backbone_params);
  c.ratio_with_head =
      static_cast<double>(c.lora_params + c.head_params) / static_cast<double>(c.backbone_params);
  return c;
}

// ".ucex" expert files:
//   "UCEX" | u32 version=1 | u32 flags (bit 0: 3D embedding section present)
//   | u32 len + UTF-8 task_id | u8 modality | u32 r | u32 K | u8 head_mode
//   | u32 d | u32 L | u32 backbone fingerprint
//   | per block A_q B_q A_v B_v | head_w | head_b
//   | K x (u32 len + UTF-8 class name)
//   | [u32 patch_dim, u32 pos_rows, proj3d, pos3d]  when flag bit 0
//   | u32 CRC32 of all preceding bytes
inline constexpr std::uint32_t kExpertVersion = 1;
inline constexpr std::uint32_t kExpertFlagEmbedding3D = 1u << 0;

template <Scalar T>
io::Bytes encode_expert(const Expert<T>& e) {
  e.validate();
  io::Writer w;
  w.bytes("UCEX");
  w.u32(kExpertVersion);
  w.u32(e.embedding3d ? kExpertFlagEmbedding3D : 0u);
  w.str(e.task_id);
  w.u8(static_cast<std::uint8_t>(e.modality));
  w.u32(static_cast<std::uint32_t>(e.rank));
  w.u32(static_cast<std::uint32_t>(e.num_classes));
  w.u8(static_cast<std::uint8_t>(e.head_mode));
  w.u32(static_cast<std::uint32_t>(e.dim()));
  w.u32(static_cast<std::uint32_t>(e.num_blocks()));
  w.u32(e.backbone_fingerprint);
  for (const auto& b : e.lora)
    for (const auto* t : {&b.q.a, &b.q.b, &b.v.a, &b.v.b}) w.f32_array(*t);
  w.f32_array(e.head_w);
  w.f32_array(e.head_b);
  for (const auto& name : e.class_names) w.str(name);
  if (e.embedding3d) {
    w.u32(static_cast<std::uint32_t>(e.embedding3d->proj3d.dim(0)));
    w.u32(static_cast<std::uint32_t>(e.embedding3d->pos3d.dim(0)));
    w.f32_array(e.embedding3d->proj3d);
    w.f32_array(e.embedding3d->pos3d);
  }
  w.crc_trailer();
  return w.take();
}

inline Expert<float> decode_expert(std::span<const std::uint8_t> bytes) {
  io::Reader magic(bytes);
  magic.expect_magic("UCEX", "ucex");
  io::Reader r(io::checked_payload(bytes, "ucex"));
  r.expect_magic("UCEX", "ucex");
  const std::uint32_t version = r.u32("version");
  if (version != kExpertVersion)
    fail(ErrorKind::kCodec, "ucex: unsupported version " + std::to_string(version));
  const std::uint32_t flags = r.u32("flags");
  if (flags & ~kExpertFlagEmbedding3D)
    fail(ErrorKind::kCodec, "ucex: unknown bits in field 'flags'");
  Expert<float> e;
  e.task_id = r.str("task_id");
  const std::uint8_t modality = r.u8("modality");
  if (modality > 1) fail(ErrorKind::kCodec, "ucex: invalid field 'modality'");
  e.modality = static_cast<Modality>(modality);
  e.rank = r.u32("r");
  e.num_classes = r.u32("K");
  const std::uint8_t mode = r.u8("head_mode");
  if (mode > 1) fail(ErrorKind::kCodec, "ucex: invalid field 'head_mode'");
  e.head_mode = static_cast<HeadMode>(mode);
  const std::size_t d = r.u32("d");
  const std::size_t blocks = r.u32("L");
  e.backbone_fingerprint = r.u32("backbone_fingerprint");
  if (d == 0 || e.rank == 0 || e.rank > d)
    fail(ErrorKind::kCodec, "ucex: field 'r' outside [1, d]");
  if (blocks == 0) fail(ErrorKind::kCodec, "ucex: field 'L' must be positive");
  if (e.head_mode == HeadMode::kSoftmaxSingleLabel ? e.num_classes < 2 : e.num_classes < 1)
    fail(ErrorKind::kCodec, "ucex: field 'K' too small for head mode");
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::string where = "block " + std::to_string(b);
    BlockLora<float> bl;
    bl.q.a = r.f32_array({e.rank, d}, where + " A_q");
    bl.q.b = r.f32_array({d, e.rank}, where + " B_q");
    bl.v.a = r.f32_array({e.rank, d}, where + " A_v");
    bl.v.b = r.f32_array({d, e.rank}, where + " B_v");
    e.lora.push_back(std::move(bl));
  }
  e.head_w = r.f32_array({e.num_classes, d}, "head_w");
  e.head_b = r.f32_array({e.num_classes}, "head_b");
  for (std::size_t k = 0; k < e.num_classes; ++k) e.class_names.push_back(r.str("class_names"));
  if (flags & kExpertFlagEmbedding3D) {
    const std::size_t patch_dim = r.u32("embedding3d patch_dim");
    const std::size_t pos_rows = r.u32("embedding3d pos_rows");
    Embedding3DOverride<float> ov;
    ov.proj3d = r.f32_array({patch_dim, d}, "embedding3d proj3d");
    ov.pos3d = r.f32_array({pos_rows, d}, "embedding3d pos3d");
    e.embedding3d = std::move(ov);
  }
  if (r.remaining() != 0) fail(ErrorKind::kCodec, "ucex: trailing bytes before field 'crc32'");
  return e;
}

template <Scalar T>
void save_expert(const Expert<T>& e, const std::filesystem::path& path) {
  io::write_file(path, encode_expert(e));
}

inline Expert<float> load_expert(const std::filesystem::path& path) {
  return decode_expert(io::read_file(path));
}

/// Experts keyed by task id, validated against one backbone.
///
/// Lookups may run concurrently with each other; add() needs exclusive
/// access.
template <Scalar T>
class Registry {
 public:
  Registry(std::uint32_t fingerprint, const BackboneConfig& cfg)
      : fingerprint_(fingerprint), dim_(cfg.dim), blocks_(cfg.num_blocks), embedding_(cfg.embedding) {}

  template <Scalar U>
  explicit Registry(const Backbone<U>& bb) : Registry(backbone_fingerprint(bb), bb.config()) {}

  void add(Expert<T> e) {
    e.validate();
    if (experts_.contains(e.task_id))
      fail(ErrorKind::kConflict, "task id '" + e.task_id + "' already registered");
    if (e.dim() != dim_ || e.num_blocks() != blocks_)
      fail(ErrorKind::kCompatibility, "expert '" + e.task_id + "' targets d=" +
                                          std::to_string(e.dim()) + ", L=" +
                                          std::to_string(e.num_blocks()) + "; backbone has d=" +
                                          std::to_string(dim_) + ", L=" + std::to_string(blocks_));
    if (e.backbone_fingerprint != 0 && e.backbone_fingerprint != fingerprint_)
      fail(ErrorKind::kCompatibility, "expert '" + e.task_id + "' was trained against backbone " +
                                          hex(e.backbone_fingerprint) + ", registry holds " +
                                          hex(fingerprint_));
    if (e.embedding3d) {
      const bool ok = e.embedding3d->proj3d.shape() == Shape{embedding_.spec3d.patch_dim(), dim_} &&
                      e.embedding3d->pos3d.shape() == Shape{embedding_.spec3d.max_patches() + 1, dim_};
      if (!ok) fail(ErrorKind::kCompatibility, "expert '" + e.task_id + "' 3D embedding shape");
    }
    const std::string id = e.task_id;
    experts_.emplace(id, std::move(e));
  }

  const Expert<T>& lookup(const std::string& task_id) const {
    auto it = experts_.find(task_id);
    if (it == experts_.end()) fail(ErrorKind::kNotFound, "unknown task id '" + task_id + "'");
    return it->second;
  }

  const Expert<T>* find(const std::string& task_id) const {
    auto it = experts_.find(task_id);
    return it == experts_.end() ? nullptr : &it->second;
  }

  bool contains(const std::string& task_id) const { return experts_.contains(task_id); }
  std::size_t size() const { return experts_.size(); }
  std::uint32_t fingerprint() const { return fingerprint_; }
  const std::map<std::string, Expert<T>>& experts() const { return experts_; }

  static std::string hex(std::uint32_t v) {
    char buf[11];
    std::snprintf(buf, sizeof buf, "0x%08x", v);
    return buf;
  }

 private:
  std::uint32_t fingerprint_;
  std::size_t dim_;
  std::size_t blocks_;
  EmbeddingConfig embedding_;
  std::map<std::string, Expert<T>> experts_;
};

// Loads every *.ucex file of a directory (sorted by file name).
template <Scalar U>
Registry<float> load_registry_dir(const std::filesystem::path& dir, const Backbone<U>& bb) {
  Registry<float> reg(bb);
  if (!std::filesystem::exists(dir)) return reg;
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".ucex") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) reg.add(load_expert(f));
  return reg;
}

}  // namespace ucad
