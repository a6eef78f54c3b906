// Copyright 2026 The ucad Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense kernels over Tensor. Every reduction runs in ascending index order so
// identical inputs give bit-identical outputs; build with -ffp-contract=off to
// keep that true when the target has FMA.

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

#include "ucad/numerics/tensor.hpp"

namespace ucad {

using Mask = std::vector<std::uint8_t>;

// Added to masked logits before the max-subtraction softmax.
inline constexpr double kMaskedLogit = -1e30;

// c = a * b, c[i][j] = sum_t a[i][t] * b[t][j] accumulated with t ascending.
template <Scalar T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_shape(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0),
                "matmul " + shape_string(a.shape()) + " x " +
                    shape_string(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> c({m, n});
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* pc = c.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = pc + i * n;
    for (std::size_t t = 0; t < k; ++t) {
      const T av = pa[i * k + t];
      const T* brow = pb + t * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

// c = a * b^T without materializing the transpose.
template <Scalar T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require_shape(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(1),
                "matmul_nt " + shape_string(a.shape()) + " x " +
                    shape_string(b.shape()) + "^T");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  Tensor<T> c({m, n});
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc{0};
      for (std::size_t t = 0; t < k; ++t) acc += pa[i * k + t] * pb[j * k + t];
      c(i, j) = acc;
    }
  }
  return c;
}

// c = a^T * b without materializing the transpose.
template <Scalar T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
  require_shape(a.ndim() == 2 && b.ndim() == 2 && a.dim(0) == b.dim(0),
                "matmul_tn " + shape_string(a.shape()) + "^T x " +
                    shape_string(b.shape()));
  const std::size_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
  Tensor<T> c({m, n});
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* pc = c.data().data();
  for (std::size_t t = 0; t < k; ++t) {
    for (std::size_t i = 0; i < m; ++i) {
      const T av = pa[t * m + i];
      T* crow = pc + i * n;
      const T* brow = pb + t * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

template <Scalar T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_shape(a.ndim() == 2, "transpose needs a matrix");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor<T> t({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t(j, i) = a(i, j);
  return t;
}

template <Scalar T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
  require_shape(a.shape() == b.shape(), "add " + shape_string(a.shape()) +
                                            " + " + shape_string(b.shape()));
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < da.size(); ++i) da[i] += db[i];
}

template <Scalar T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> c = a;
  add_inplace(c, b);
  return c;
}

// Adds a length-n vector to every row of an m x n matrix.
template <Scalar T>
void add_row_vector(Tensor<T>& a, const Tensor<T>& v) {
  require_shape(a.ndim() == 2 && v.size() == a.dim(1), "row bias width");
  for (std::size_t i = 0; i < a.dim(0); ++i) {
    auto r = a.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += v[j];
  }
}

template <Scalar T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> c = a;
  for (auto& v : c.data()) v *= s;
  return c;
}

template <Scalar T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
}

// d/dx gelu(x) = Phi(x) + x * phi(x).
template <Scalar T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(0.5 * std::numbers::inv_sqrtpi *
                                               std::numbers::sqrt2);
  return cdf + x * pdf;
}

template <Scalar T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (auto& v : y.data()) v = gelu(v);
  return y;
}

template <Scalar T>
struct LayerNormStats {
  std::vector<T> mean;
  std::vector<T> rstd;
};

// Per-row normalization with a two-pass mean/variance.
template <Scalar T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps,
                     LayerNormStats<T>* stats = nullptr) {
  require_shape(x.ndim() == 2 && gamma.size() == x.dim(1) &&
                    beta.size() == x.dim(1),
                "layer_norm " + shape_string(x.shape()));
  require(eps > T(0), ErrorKind::kContract, "layer_norm eps must be > 0");
  const std::size_t n = x.dim(0), d = x.dim(1);
  Tensor<T> y({n, d});
  if (stats) {
    stats->mean.assign(n, T(0));
    stats->rstd.assign(n, T(0));
  }
  for (std::size_t i = 0; i < n; ++i) {
    auto xr = x.row(i);
    T mean{0};
    for (T v : xr) mean += v;
    mean /= static_cast<T>(d);
    T var{0};
    for (T v : xr) var += (v - mean) * (v - mean);
    var /= static_cast<T>(d);
    const T rstd = T(1) / std::sqrt(var + eps);
    auto yr = y.row(i);
    for (std::size_t j = 0; j < d; ++j)
      yr[j] = (xr[j] - mean) * rstd * gamma[j] + beta[j];
    if (stats) {
      stats->mean[i] = mean;
      stats->rstd[i] = rstd;
    }
  }
  return y;
}

// Row-wise softmax restricted to positions where mask[j] == 1. Masked
// outputs are exactly zero.
template <Scalar T>
void softmax_masked_inplace(std::span<T> logits, std::span<const std::uint8_t> mask) {
  require_shape(logits.size() == mask.size(), "softmax mask length");
  T max_valid{0};
  bool any = false;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    if (!mask[j]) logits[j] += static_cast<T>(kMaskedLogit);
    if (mask[j] && (!any || logits[j] > max_valid)) {
      max_valid = logits[j];
      any = true;
    }
  }
  require(any, ErrorKind::kContract, "softmax row has no valid position");
  T sum{0};
  for (std::size_t j = 0; j < logits.size(); ++j) {
    logits[j] = std::exp(logits[j] - max_valid);
    sum += logits[j];
  }
  for (std::size_t j = 0; j < logits.size(); ++j)
    logits[j] = mask[j] ? logits[j] / sum : T(0);
}

template <Scalar T>
Tensor<T> softmax_masked(const Tensor<T>& logits, std::span<const std::uint8_t> mask) {
  require_shape(logits.ndim() == 2 && logits.dim(1) == mask.size(),
                "softmax_masked " + shape_string(logits.shape()));
  Tensor<T> out = logits;
  for (std::size_t i = 0; i < out.dim(0); ++i) softmax_masked_inplace(out.row(i), mask);
  return out;
}

template <Scalar T>
bool all_finite(const Tensor<T>& t) {
  for (T v : t.data())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace ucad
