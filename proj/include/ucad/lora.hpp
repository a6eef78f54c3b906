// Copyright 2026 The ucad Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "ucad/numerics/ops.hpp"

namespace ucad {

/// Low-rank update for one projection: delta_W = B * A with A: r x d and
/// B: d x r. Tokens are rows, so the update applied to x is (x A^T) B^T.
template <Scalar T>
struct LoraAdapter {
  Tensor<T> a;  // r x d
  Tensor<T> b;  // d x r

  std::size_t rank() const { return a.dim(0); }

  template <Scalar U>
  LoraAdapter<U> cast() const {
    return {a.template cast<U>(), b.template cast<U>()};
  }
  friend bool operator==(const LoraAdapter&, const LoraAdapter&) = default;
};

// Adapters for the two adapted projections of one block.
template <Scalar T>
struct BlockLora {
  LoraAdapter<T> q;
  LoraAdapter<T> v;

  template <Scalar U>
  BlockLora<U> cast() const {
    return {q.template cast<U>(), v.template cast<U>()};
  }
  friend bool operator==(const BlockLora&, const BlockLora&) = default;
};

/// Per-row adapters for one block of a batched forward. All rows share the
/// same rank so the batch has uniform shapes.
template <Scalar T>
struct LoraDeltaSet {
  std::size_t rank = 0;
  std::vector<BlockLora<T>> rows;

  void validate(std::size_t n, std::size_t d) const {
    require(rows.size() == n, ErrorKind::kContract,
            "delta set has " + std::to_string(rows.size()) + " rows for a batch of " +
                std::to_string(n));
    for (const auto& r : rows) {
      for (const auto* ad : {&r.q, &r.v}) {
        require(ad->a.shape() == Shape{rank, d} && ad->b.shape() == Shape{d, rank},
                ErrorKind::kContract,
                "delta rank mismatch within batch: expected r_max " + std::to_string(rank) +
                    ", got A " + shape_string(ad->a.shape()));
      }
    }
  }
};

/// (x A^T) B^T: the low-rank term of h = W0 x + B A x, computed A-first.
template <Scalar T>
Tensor<T> lora_delta(const Tensor<T>& x, const Tensor<T>& a, const Tensor<T>& b) {
  require_shape(a.ndim() == 2 && b.ndim() == 2 && x.ndim() == 2 && a.dim(1) == x.dim(1) &&
                    b.dim(1) == a.dim(0) && b.dim(0) == x.dim(1),
                "lora_delta x " + shape_string(x.shape()) + " A " + shape_string(a.shape()) +
                    " B " + shape_string(b.shape()));
  return matmul_nt(matmul_nt(x, a), b);
}

/// Zero-extends an adapter along its rank axis: rows of A and columns of B
/// beyond the native rank are exact zeros.
template <Scalar T>
LoraAdapter<T> pad_adapter(const LoraAdapter<T>& ad, std::size_t r_max) {
  const std::size_t r = ad.rank();
  const std::size_t d = ad.a.dim(1);
  require(r_max >= r, ErrorKind::kContract,
          "cannot pad rank " + std::to_string(r) + " down to " + std::to_string(r_max));
  if (r_max == r) return ad;
  LoraAdapter<T> out{Tensor<T>({r_max, d}), Tensor<T>({d, r_max})};
  std::copy(ad.a.data().begin(), ad.a.data().end(), out.a.data().begin());
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < r; ++j) out.b(i, j) = ad.b(i, j);
  return out;
}

}  // namespace ucad
