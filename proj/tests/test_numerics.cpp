// Copyright 2026 The ucad Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "support.hpp"

namespace ucad {
namespace {

template <typename T>
Tensor<T> naive_matmul(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> c({a.dim(0), b.dim(1)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < b.dim(1); ++j) {
      double acc = 0.0;
      for (std::size_t t = 0; t < a.dim(1); ++t) acc += double(a(i, t)) * double(b(t, j));
      c(i, j) = static_cast<T>(acc);
    }
  return c;
}

TEST(Tensor, ConstructionValidatesSize) {
  EXPECT_THROW(Tensor<float>({2, 3}, std::vector<float>(5)), Error);
  Tensor<float> t({2, 3});
  EXPECT_EQ(t.size(), 6u);
  for (float v : t.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Tensor, RowsAndReshape) {
  Tensor<float> t({3, 2}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t(2, 1), 6.0f);
  Tensor<float> mid = t.rows(1, 2);
  EXPECT_EQ(mid.shape(), (Shape{1, 2}));
  EXPECT_EQ(mid(0, 0), 3.0f);
  EXPECT_EQ(t.reshaped({2, 3})(1, 0), 4.0f);
  EXPECT_THROW(t.reshaped({4, 2}), Error);
}

TEST(Matmul, MatchesTripleLoopOracle) {
  Xoshiro256 rng(1);
  for (auto [m, k, n] : {std::tuple{1, 1, 1}, {3, 5, 2}, {7, 16, 9}, {4, 33, 1}}) {
    auto a = Tensor<double>::randn({std::size_t(m), std::size_t(k)}, rng, 1.0);
    auto b = Tensor<double>::randn({std::size_t(k), std::size_t(n)}, rng, 1.0);
    const auto c = matmul(a, b);
    const auto ref = naive_matmul(a, b);
    EXPECT_LT(testing::max_rel_diff(c.data(), ref.data()), 1e-12);
    EXPECT_LT(testing::max_rel_diff(matmul_nt(a, transpose(b)).data(), ref.data()), 1e-12);
    EXPECT_LT(testing::max_rel_diff(matmul_tn(transpose(a), b).data(), ref.data()), 1e-12);
  }
}

TEST(Matmul, IdentityAndShapeErrors) {
  Xoshiro256 rng(2);
  auto a = Tensor<float>::randn({4, 4}, rng, 1.0);
  EXPECT_EQ(matmul(a, Tensor<float>::identity(4)), a);
  EXPECT_THROW(matmul(a, Tensor<float>({3, 2})), Error);
  try {
    matmul(a, Tensor<float>({3, 2}));
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kShape);
  }
}

TEST(Gelu, KnownValuesAndDerivative) {
  EXPECT_EQ(gelu(0.0), 0.0);
  EXPECT_NEAR(gelu(1.0), 0.8413447460685429, 1e-12);
  EXPECT_NEAR(gelu(-1.0), -0.15865525393145707, 1e-12);
  for (double x : {-3.0, -0.7, 0.0, 0.4, 2.5}) {
    const double h = 1e-6;
    EXPECT_NEAR(gelu_grad(x), (gelu(x + h) - gelu(x - h)) / (2 * h), 1e-8);
  }
}

TEST(LayerNorm, MatchesTwoPassOracle) {
  Xoshiro256 rng(3);
  const auto x = Tensor<double>::randn({5, 12}, rng, 2.0);
  const auto g = Tensor<double>::randn({12}, rng, 1.0);
  const auto b = Tensor<double>::randn({12}, rng, 1.0);
  const double eps = 1e-6;
  const auto y = layer_norm(x, g, b, eps);
  for (std::size_t i = 0; i < 5; ++i) {
    double mean = 0.0, var = 0.0;
    for (std::size_t j = 0; j < 12; ++j) mean += x(i, j) / 12.0;
    for (std::size_t j = 0; j < 12; ++j) var += (x(i, j) - mean) * (x(i, j) - mean) / 12.0;
    for (std::size_t j = 0; j < 12; ++j)
      EXPECT_NEAR(y(i, j), (x(i, j) - mean) / std::sqrt(var + eps) * g[j] + b[j], 1e-12);
  }
}

TEST(LayerNorm, ConstantRowGivesBeta) {
  const auto x = Tensor<float>::filled({1, 8}, 3.5f);
  const auto g = Tensor<float>::filled({8}, 2.0f);
  const auto b = Tensor<float>::filled({8}, 0.25f);
  const auto y = layer_norm(x, g, b, 1e-6f);
  for (float v : y.data()) EXPECT_EQ(v, 0.25f);
  EXPECT_THROW(layer_norm(x, g, b, 0.0f), Error);
}

TEST(Softmax, MaskedPositionsAreExactZeros) {
  Tensor<double> logits({1, 5}, {0.3, -1.0, 2.0, 7.0, 0.5});
  const Mask mask{1, 1, 1, 0, 0};
  const auto p = softmax_masked(logits, mask);
  EXPECT_EQ(p(0, 3), 0.0);
  EXPECT_EQ(p(0, 4), 0.0);
  const double z = std::exp(0.3) + std::exp(-1.0) + std::exp(2.0);
  EXPECT_NEAR(p(0, 0), std::exp(0.3) / z, 1e-15);
  EXPECT_NEAR(p(0, 2), std::exp(2.0) / z, 1e-15);
  EXPECT_NEAR(p(0, 0) + p(0, 1) + p(0, 2), 1.0, 1e-15);
}

TEST(Softmax, LargeLogitsStayFinite) {
  Tensor<float> logits({1, 3}, {1000.0f, 999.0f, -1000.0f});
  const auto p = softmax_masked(logits, Mask{1, 1, 1});
  EXPECT_TRUE(all_finite(p));
  EXPECT_NEAR(p(0, 0), 1.0 / (1.0 + std::exp(-1.0)), 1e-6);
}

TEST(Softmax, AllMaskedRowIsContractError) {
  Tensor<float> logits({1, 3});
  try {
    softmax_masked(logits, Mask{0, 0, 0});
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kContract);
  }
}

TEST(Random, DeterministicStreamsAndShuffle) {
  Xoshiro256 a(42), b(42), c(43);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a(), b());
  EXPECT_NE(Xoshiro256(42)(), c());
  std::vector<int> v(20);
  std::iota(v.begin(), v.end(), 0);
  auto w = v;
  Xoshiro256 r1(7), r2(7);
  shuffle(std::span<int>(v), r1);
  shuffle(std::span<int>(w), r2);
  EXPECT_EQ(v, w);
  auto sorted = v;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 20; ++i) EXPECT_EQ(sorted[i], i);
  EXPECT_NE(derive_seed(1, 1), derive_seed(1, 2));
}

TEST(Random, NormalMoments) {
  Xoshiro256 rng(5);
  const int n = 200000;
  double sum = 0, sq = 0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    sum += x;
    sq += x * x;
  }
  EXPECT_NEAR(sum / n, 0.0, 0.01);
  EXPECT_NEAR(sq / n, 1.0, 0.02);
}

TEST(Uten, RoundTripAndCorruption) {
  Xoshiro256 rng(6);
  const auto t = Tensor<float>::randn({3, 4, 2}, rng, 1.0);
  const auto bytes = encode_uten(t);
  EXPECT_EQ(decode_uten(bytes), t);

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_uten(bad_magic), Error);

  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  try {
    decode_uten(truncated);
    FAIL() << "expected a codec error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kCodec);
    EXPECT_NE(std::string(e.what()).find("data"), std::string::npos);
  }
}

TEST(Crc32, KnownVector) {
  const std::string s = "123456789";
  const std::span<const std::uint8_t> bytes(reinterpret_cast<const std::uint8_t*>(s.data()), s.size());
  EXPECT_EQ(io::crc32(bytes), 0xCBF43926u);
}

}  // namespace
}  // namespace ucad
