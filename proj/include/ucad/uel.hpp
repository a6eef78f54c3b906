// Copyright 2026 The ucad Authors
// SPDX-License-Identifier: Apache-2.0
//
// Unified embedding layer: turns 2D images ([H, W, C]) and 3D volumes
// ([D, H, W, C]) into CLS-prefixed token sequences, and collates sequences of
// different lengths into zero-padded batches with a validity mask.

#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "ucad/numerics/ops.hpp"
#include "ucad/numerics/tensor.hpp"

namespace ucad {

enum class Modality : std::uint8_t { kTwoD = 0, kThreeD = 1 };

inline const char* to_string(Modality m) { return m == Modality::kTwoD ? "2d" : "3d"; }

struct PatchSpec2D {
  std::size_t patch_h = 16;
  std::size_t patch_w = 16;
  std::size_t channels = 3;
  std::size_t max_h = 224;
  std::size_t max_w = 224;

  void validate() const {
    require(patch_h > 0 && patch_w > 0 && channels > 0 && max_h > 0 && max_w > 0,
            ErrorKind::kInput, "2D patch spec fields must be positive");
    require(max_h % patch_h == 0 && max_w % patch_w == 0, ErrorKind::kInput,
            "2D maxima must be divisible by the patch size");
  }
  std::size_t patch_dim() const { return patch_h * patch_w * channels; }
  std::size_t max_patches() const { return (max_h * max_w) / (patch_h * patch_w); }
};

struct PatchSpec3D {
  std::size_t patch_d = 16;
  std::size_t patch_h = 16;
  std::size_t patch_w = 16;
  std::size_t channels = 1;
  std::size_t max_d = 64;
  std::size_t max_h = 64;
  std::size_t max_w = 64;

  void validate() const {
    require(patch_d > 0 && patch_h > 0 && patch_w > 0 && channels > 0 && max_d > 0 &&
                max_h > 0 && max_w > 0,
            ErrorKind::kInput, "3D patch spec fields must be positive");
    require(max_d % patch_d == 0 && max_h % patch_h == 0 && max_w % patch_w == 0,
            ErrorKind::kInput, "3D maxima must be divisible by the patch size");
  }
  std::size_t patch_dim() const { return patch_d * patch_h * patch_w * channels; }
  std::size_t max_patches() const {
    return (max_d * max_h * max_w) / (patch_d * patch_h * patch_w);
  }
};

struct EmbeddingConfig {
  PatchSpec2D spec2d;
  PatchSpec3D spec3d;

  void validate() const {
    spec2d.validate();
    spec3d.validate();
  }
  // Longest sequence any accepted input can produce, CLS included.
  std::size_t default_l_max() const {
    return std::max(spec2d.max_patches(), spec3d.max_patches()) + 1;
  }
};

template <Scalar T>
struct EmbeddingWeights {
  Tensor<T> proj2d;  // (P_H * P_W * C) x d
  Tensor<T> proj3d;  // (P_D * P_H * P_W * C) x d
  Tensor<T> pos2d;   // (N2_max + 1) x d
  Tensor<T> pos3d;   // (N3_max + 1) x d
  Tensor<T> cls;     // d

  static EmbeddingWeights zeros(const EmbeddingConfig& cfg, std::size_t d) {
    return {Tensor<T>({cfg.spec2d.patch_dim(), d}), Tensor<T>({cfg.spec3d.patch_dim(), d}),
            Tensor<T>({cfg.spec2d.max_patches() + 1, d}),
            Tensor<T>({cfg.spec3d.max_patches() + 1, d}), Tensor<T>({d})};
  }

  std::size_t param_count() const {
    return proj2d.size() + proj3d.size() + pos2d.size() + pos3d.size() + cls.size();
  }

  template <Scalar U>
  EmbeddingWeights<U> cast() const {
    return {proj2d.template cast<U>(), proj3d.template cast<U>(), pos2d.template cast<U>(),
            pos3d.template cast<U>(), cls.template cast<U>()};
  }

  friend bool operator==(const EmbeddingWeights&, const EmbeddingWeights&) = default;
};

template <Scalar T>
struct TokenSequence {
  Tensor<T> tokens;  // (N + 1) x d, row 0 is the CLS position
  std::size_t valid_len = 0;
  Modality modality = Modality::kTwoD;
};

template <Scalar T>
struct StandardizedBatch {
  Tensor<T> tokens;  // n x L_max x d
  std::vector<Mask> mask;  // n rows of L_max entries
  std::vector<std::size_t> valid_lens;
  std::vector<Modality> modalities;

  std::size_t size() const { return valid_lens.size(); }
  std::size_t l_max() const { return tokens.dim(1); }
  std::size_t dim() const { return tokens.dim(2); }

  // Row i as an L_max x d matrix, padding included.
  Tensor<T> row(std::size_t i) const {
    const std::size_t stride = l_max() * dim();
    const auto first = tokens.data().begin() + static_cast<std::ptrdiff_t>(i * stride);
    return Tensor<T>({l_max(), dim()}, std::vector<T>(first, first + static_cast<std::ptrdiff_t>(stride)));
  }

  // Strips padding from row i.
  TokenSequence<T> unpad(std::size_t i) const {
    return {row(i).rows(0, valid_lens[i]), valid_lens[i], modalities[i]};
  }
};

// Patch grid positions in lexicographic order; for 3D the tuple is
// (depth, row, col).
inline std::vector<std::vector<std::size_t>> patchify_order(const Shape& dims,
                                                            const Shape& patch_dims) {
  require(dims.size() == patch_dims.size() && !dims.empty(), ErrorKind::kInput,
          "patchify_order: dims and patch dims must have equal nonzero rank");
  Shape grid(dims.size());
  for (std::size_t a = 0; a < dims.size(); ++a) {
    require(patch_dims[a] > 0 && dims[a] % patch_dims[a] == 0, ErrorKind::kInput,
            "patchify_order: axis " + std::to_string(a) + " not divisible by patch size");
    grid[a] = dims[a] / patch_dims[a];
  }
  std::vector<std::vector<std::size_t>> out;
  out.reserve(shape_size(grid));
  if (shape_size(grid) == 0) return out;
  std::vector<std::size_t> idx(grid.size(), 0);
  while (true) {
    out.push_back(idx);
    std::size_t a = grid.size();
    while (a > 0) {
      --a;
      if (++idx[a] < grid[a]) break;
      idx[a] = 0;
      if (a == 0) return out;
    }
  }
}

// Flattens an input of shape [spatial..., C] into a (num_patches x patch_dim)
// matrix. Patches follow patchify_order; within a patch the flattening is
// (spatial..., channel) lexicographic.
template <Scalar T>
Tensor<T> extract_patches(const Tensor<T>& input, const Shape& patch_dims) {
  const std::size_t k = patch_dims.size();
  require(input.ndim() == k + 1, ErrorKind::kInput,
          "input " + shape_string(input.shape()) + " has wrong rank for " +
              std::to_string(k) + "D patches");
  const Shape spatial(input.shape().begin(), input.shape().begin() + static_cast<std::ptrdiff_t>(k));
  const std::size_t channels = input.shape().back();
  const auto order = patchify_order(spatial, patch_dims);
  const std::size_t patch_dim = shape_size(patch_dims) * channels;
  const auto inner = patchify_order(patch_dims, Shape(k, 1));

  // Row-major strides over the spatial axes (channel is innermost).
  Shape stride(k);
  std::size_t s = channels;
  for (std::size_t a = k; a-- > 0;) {
    stride[a] = s;
    s *= spatial[a];
  }

  Tensor<T> patches({order.size(), patch_dim});
  for (std::size_t p = 0; p < order.size(); ++p) {
    auto dst = patches.row(p);
    std::size_t col = 0;
    for (const auto& off : inner) {
      std::size_t base = 0;
      for (std::size_t a = 0; a < k; ++a) base += (order[p][a] * patch_dims[a] + off[a]) * stride[a];
      for (std::size_t c = 0; c < channels; ++c) dst[col++] = input[base + c];
    }
  }
  return patches;
}

namespace detail {

template <Scalar T>
TokenSequence<T> assemble_tokens(const Tensor<T>& patches, const Tensor<T>& proj,
                                 const Tensor<T>& pos, const Tensor<T>& cls, Modality modality) {
  const std::size_t n = patches.dim(0);
  const std::size_t d = proj.dim(1);
  require(pos.dim(0) >= n + 1 && pos.dim(1) == d && cls.size() == d, ErrorKind::kShape,
          "positional table too small for " + std::to_string(n) + " patches");
  const Tensor<T> projected = matmul(patches, proj);
  Tensor<T> tokens({n + 1, d});
  for (std::size_t j = 0; j < d; ++j) tokens(0, j) = cls[j] + pos(0, j);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) tokens(i + 1, j) = projected(i, j) + pos(i + 1, j);
  return {std::move(tokens), n + 1, modality};
}

}  // namespace detail

template <Scalar T>
void validate_2d_input(const Tensor<T>& image, const PatchSpec2D& spec) {
  require(image.ndim() == 3, ErrorKind::kInput,
          "2D input must be [H, W, C], got " + shape_string(image.shape()));
  const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  require(c == spec.channels, ErrorKind::kInput,
          "expected " + std::to_string(spec.channels) + " channels, got " + std::to_string(c));
  require(h > 0 && w > 0 && h <= spec.max_h && w <= spec.max_w, ErrorKind::kInput,
          "2D input " + shape_string(image.shape()) + " exceeds configured maximum");
  require(h % spec.patch_h == 0 && w % spec.patch_w == 0, ErrorKind::kInput,
          "2D input " + shape_string(image.shape()) + " not divisible by patch size");
}

template <Scalar T>
void validate_3d_input(const Tensor<T>& volume, const PatchSpec3D& spec) {
  require(volume.ndim() == 4, ErrorKind::kInput,
          "3D input must be [D, H, W, C], got " + shape_string(volume.shape()));
  const std::size_t d = volume.dim(0), h = volume.dim(1), w = volume.dim(2), c = volume.dim(3);
  require(c == spec.channels, ErrorKind::kInput,
          "expected " + std::to_string(spec.channels) + " channels, got " + std::to_string(c));
  require(d > 0 && h > 0 && w > 0 && d <= spec.max_d && h <= spec.max_h && w <= spec.max_w,
          ErrorKind::kInput, "3D input " + shape_string(volume.shape()) + " exceeds configured maximum");
  require(d % spec.patch_d == 0 && h % spec.patch_h == 0 && w % spec.patch_w == 0,
          ErrorKind::kInput, "3D input " + shape_string(volume.shape()) + " not divisible by patch size");
}

template <Scalar T>
TokenSequence<T> embed_2d(const Tensor<T>& image, const PatchSpec2D& spec,
                          const EmbeddingWeights<T>& w) {
  validate_2d_input(image, spec);
  const Tensor<T> patches = extract_patches(image, {spec.patch_h, spec.patch_w});
  return detail::assemble_tokens(patches, w.proj2d, w.pos2d, w.cls, Modality::kTwoD);
}

template <Scalar T>
TokenSequence<T> embed_3d(const Tensor<T>& volume, const PatchSpec3D& spec,
                          const EmbeddingWeights<T>& w) {
  validate_3d_input(volume, spec);
  const Tensor<T> patches = extract_patches(volume, {spec.patch_d, spec.patch_h, spec.patch_w});
  return detail::assemble_tokens(patches, w.proj3d, w.pos3d, w.cls, Modality::kThreeD);
}

// Dispatches on input rank: 3 -> 2D image, 4 -> 3D volume.
template <Scalar T>
TokenSequence<T> embed(const Tensor<T>& input, const EmbeddingConfig& cfg,
                       const EmbeddingWeights<T>& w) {
  if (input.ndim() == 3) return embed_2d(input, cfg.spec2d, w);
  if (input.ndim() == 4) return embed_3d(input, cfg.spec3d, w);
  fail(ErrorKind::kInput, "input must be [H, W, C] or [D, H, W, C], got " +
                              shape_string(input.shape()));
}

inline Modality modality_of(const Shape& input_shape) {
  return input_shape.size() == 4 ? Modality::kThreeD : Modality::kTwoD;
}

// Zero-pads every sequence to l_max and records the validity mask.
template <Scalar T>
StandardizedBatch<T> standardize_batch(const std::vector<TokenSequence<T>>& seqs,
                                       std::size_t l_max) {
  require(!seqs.empty(), ErrorKind::kInput, "standardize_batch: empty sequence list");
  const std::size_t d = seqs.front().tokens.dim(1);
  StandardizedBatch<T> batch;
  batch.tokens = Tensor<T>({seqs.size(), l_max, d});
  batch.mask.assign(seqs.size(), Mask(l_max, 0));
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto& s = seqs[i];
    require(s.valid_len >= 1 && s.tokens.dim(0) == s.valid_len && s.tokens.dim(1) == d,
            ErrorKind::kShape, "standardize_batch: malformed sequence " + std::to_string(i));
    require(s.valid_len <= l_max, ErrorKind::kCapacity,
            "sequence " + std::to_string(i) + " has " + std::to_string(s.valid_len) +
                " tokens, exceeds L_max " + std::to_string(l_max));
    std::copy(s.tokens.data().begin(), s.tokens.data().end(),
              batch.tokens.data().begin() + static_cast<std::ptrdiff_t>(i * l_max * d));
    std::fill_n(batch.mask[i].begin(), s.valid_len, std::uint8_t{1});
    batch.valid_lens.push_back(s.valid_len);
    batch.modalities.push_back(s.modality);
  }
  return batch;
}

}  // namespace ucad
