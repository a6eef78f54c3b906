// Copyright 2026 The ucad Authors
// SPDX-License-Identifier: Apache-2.0
//
// Shared fixtures for the test binaries.

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>

#include "ucad/ucad.hpp"

namespace ucad::testing {

// d=64, L=2 toy backbone; 2D inputs up to 16x16x1, 3D up to 8^3x1, patch 4.
inline BackboneConfig toy_config(std::size_t dim = 64, std::size_t blocks = 2, std::size_t heads = 4,
                                 std::size_t mlp = 128) {
  BackboneConfig c;
  c.dim = dim;
  c.num_blocks = blocks;
  c.num_heads = heads;
  c.mlp_dim = mlp;
  c.embedding.spec2d = {4, 4, 1, 16, 16};
  c.embedding.spec3d = {4, 4, 4, 1, 8, 8, 8};
  return c;
}

inline BackboneConfig vit_base_config() {
  BackboneConfig c;
  c.dim = 768;
  c.num_blocks = 12;
  c.num_heads = 12;
  c.mlp_dim = 3072;
  return c;
}

// Expert with every trainable tensor drawn from N(0, sd^2).
template <Scalar T = float>
Expert<T> random_expert(const BackboneConfig& cfg, std::string task, Modality m, std::size_t rank,
                        std::size_t k, HeadMode mode, Xoshiro256& rng, double sd = 0.3) {
  Expert<T> e = make_fresh_expert<T>(std::move(task), m, rank, k, mode, cfg, rng());
  for (auto& b : e.lora)
    for (auto* ad : {&b.q, &b.v}) {
      ad->a = Tensor<T>::randn(ad->a.shape(), rng, sd);
      ad->b = Tensor<T>::randn(ad->b.shape(), rng, sd);
    }
  e.head_w = Tensor<T>::randn(e.head_w.shape(), rng, sd);
  e.head_b = Tensor<T>::randn(e.head_b.shape(), rng, sd);
  return e;
}

// Random input whose spatial dims are multiples of `patch` and at most `max`.
template <Scalar T = float>
Tensor<T> random_input(Modality m, std::size_t patch, std::size_t max, Xoshiro256& rng) {
  Shape s;
  const std::size_t axes = m == Modality::kTwoD ? 2 : 3;
  for (std::size_t a = 0; a < axes; ++a) s.push_back(patch * (1 + rng.below(max / patch)));
  s.push_back(1);
  return Tensor<T>::randn(s, rng, 1.0);
}

inline double rel_diff(double a, double b) {
  const double denom = std::max({std::abs(a), std::abs(b), 1e-30});
  return std::abs(a - b) / denom;
}

// Largest |a - b| / max(|a|, |b|, floor) over two equally sized ranges.
template <typename A, typename B>
double max_rel_diff(const A& a, const B& b, double floor = 1e-6) {
  double m = 0.0;
  auto ib = b.begin();
  for (auto ia = a.begin(); ia != a.end(); ++ia, ++ib) {
    const double x = static_cast<double>(*ia), y = static_cast<double>(*ib);
    m = std::max(m, std::abs(x - y) / std::max({std::abs(x), std::abs(y), floor}));
  }
  return m;
}

// max |a - b| over max |b|: relative error measured against the scale of
// the reference, so entries that cancel to near zero do not dominate.
template <typename A, typename B>
double norm_rel_diff(const A& a, const B& b) {
  double num = 0.0, den = 0.0;
  auto ib = b.begin();
  for (auto ia = a.begin(); ia != a.end(); ++ia, ++ib) {
    num = std::max(num, std::abs(static_cast<double>(*ia) - static_cast<double>(*ib)));
    den = std::max(den, std::abs(static_cast<double>(*ib)));
  }
  return den > 0.0 ? num / den : num;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("ucad_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace ucad::testing
