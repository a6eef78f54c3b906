// Copyright 2026 The ucad Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "support.hpp"

namespace ucad {
namespace {

using testing::toy_config;

EmbeddingWeights<float> random_weights(const EmbeddingConfig& cfg, std::size_t d, std::uint64_t seed) {
  Xoshiro256 rng(seed);
  auto w = EmbeddingWeights<float>::zeros(cfg, d);
  for (auto* t : {&w.proj2d, &w.proj3d, &w.pos2d, &w.pos3d, &w.cls})
    *t = Tensor<float>::randn(t->shape(), rng, 1.0);
  return w;
}

TEST(PatchifyOrder, Lexicographic) {
  using V = std::vector<std::vector<std::size_t>>;
  EXPECT_EQ(patchify_order({4, 4}, {2, 2}), (V{{0, 0}, {0, 1}, {1, 0}, {1, 1}}));
  EXPECT_EQ(patchify_order({3, 3}, {3, 3}), (V{{0, 0}}));
  const auto o3 = patchify_order({2, 2, 2}, {1, 1, 1});
  ASSERT_EQ(o3.size(), 8u);
  EXPECT_EQ(o3[1], (std::vector<std::size_t>{0, 0, 1}));
  EXPECT_EQ(o3[4], (std::vector<std::size_t>{1, 0, 0}));
  EXPECT_THROW(patchify_order({5, 4}, {2, 2}), Error);
}

TEST(Embed2D, ViTBaseTokenCount) {
  EmbeddingConfig cfg;  // 16x16x3 patches, 224x224 maximum
  auto w = EmbeddingWeights<float>::zeros(cfg, 8);
  const auto seq = embed_2d(Tensor<float>({224, 224, 3}), cfg.spec2d, w);
  EXPECT_EQ(seq.valid_len, 197u);
  EXPECT_EQ(seq.tokens.shape(), (Shape{197, 8}));
}

TEST(Embed3D, VolumetricTokenCount) {
  EmbeddingConfig cfg;
  cfg.spec3d = {7, 7, 7, 1, 28, 28, 28};
  auto w = EmbeddingWeights<float>::zeros(cfg, 4);
  EXPECT_EQ(embed_3d(Tensor<float>({28, 28, 28, 1}), cfg.spec3d, w).valid_len, 65u);
}

TEST(Embed2D, ZeroImageGivesPositionalRows) {
  const auto cfg = toy_config().embedding;
  const auto w = random_weights(cfg, 16, 1);
  const auto seq = embed_2d(Tensor<float>({8, 12, 1}), cfg.spec2d, w);
  ASSERT_EQ(seq.valid_len, 7u);
  for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(seq.tokens(0, j), w.cls[j] + w.pos2d(0, j));
  for (std::size_t i = 1; i < 7; ++i)
    for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(seq.tokens(i, j), w.pos2d(i, j));
}

TEST(Embed2D, PatchTokenMatchesHandMatmul) {
  const auto cfg = toy_config().embedding;
  const auto w = random_weights(cfg, 16, 2);
  Xoshiro256 rng(3);
  const auto img = Tensor<float>::randn({4, 8, 1}, rng, 1.0);
  const auto seq = embed_2d(img, cfg.spec2d, w);
  ASSERT_EQ(seq.valid_len, 3u);
  // Second patch covers columns 4..7.
  for (std::size_t j = 0; j < 16; ++j) {
    double acc = 0.0;
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c = 0; c < 4; ++c) acc += double(img(r, 4 + c)) * w.proj2d(r * 4 + c, j);
    EXPECT_NEAR(seq.tokens(2, j), acc + w.pos2d(2, j), 1e-5);
  }
}

TEST(Embed3D, TwoPatchVolumeMatchesOracle) {
  const auto cfg = toy_config().embedding;
  const auto w = random_weights(cfg, 16, 4);
  Xoshiro256 rng(5);
  const auto vol = Tensor<float>::randn({8, 4, 4, 1}, rng, 1.0);
  const auto seq = embed_3d(vol, cfg.spec3d, w);
  ASSERT_EQ(seq.valid_len, 3u);
  for (std::size_t p = 0; p < 2; ++p)
    for (std::size_t j = 0; j < 16; ++j) {
      double acc = 0.0;
      for (std::size_t z = 0; z < 4; ++z)
        for (std::size_t y = 0; y < 4; ++y)
          for (std::size_t x = 0; x < 4; ++x)
            acc += double(vol[((p * 4 + z) * 4 + y) * 4 + x]) * w.proj3d((z * 4 + y) * 4 + x, j);
      EXPECT_NEAR(seq.tokens(p + 1, j), acc + w.pos3d(p + 1, j), 1e-5);
    }
}

TEST(Embed, LinearInInput) {
  const auto cfg = toy_config().embedding;
  const auto w = random_weights(cfg, 16, 6);
  Xoshiro256 rng(7);
  const auto img = Tensor<float>::randn({8, 8, 1}, rng, 1.0);
  const auto zero = embed_2d(Tensor<float>({8, 8, 1}), cfg.spec2d, w);
  const auto base = embed_2d(img, cfg.spec2d, w);
  const auto scaled = embed_2d(scale(img, 2.5f), cfg.spec2d, w);
  for (std::size_t i = 0; i < base.tokens.size(); ++i) {
    const double lhs = scaled.tokens[i] - zero.tokens[i];
    const double rhs = 2.5 * (base.tokens[i] - zero.tokens[i]);
    EXPECT_NEAR(lhs, rhs, 1e-5 * std::max(1.0, std::abs(rhs)));
  }
}

TEST(Embed, RejectsBadInputs) {
  const auto cfg = toy_config().embedding;
  const auto w = random_weights(cfg, 16, 8);
  auto kind_of = [&](const Tensor<float>& t) {
    try {
      embed(t, cfg, w);
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::kIo;  // sentinel: no error
  };
  EXPECT_EQ(kind_of(Tensor<float>({6, 8, 1})), ErrorKind::kInput);    // not divisible
  EXPECT_EQ(kind_of(Tensor<float>({20, 8, 1})), ErrorKind::kInput);   // oversize
  EXPECT_EQ(kind_of(Tensor<float>({8, 8, 3})), ErrorKind::kInput);    // channels
  EXPECT_EQ(kind_of(Tensor<float>({12, 4, 4, 1})), ErrorKind::kInput);  // 3D oversize
  EXPECT_EQ(kind_of(Tensor<float>({8, 8})), ErrorKind::kInput);       // rank
}

TEST(StandardizeBatch, MasksAndRoundTrip) {
  const auto cfg = toy_config().embedding;
  const auto w = random_weights(cfg, 16, 9);
  Xoshiro256 rng(10);
  std::vector<TokenSequence<float>> seqs{
      embed(Tensor<float>::randn({16, 16, 1}, rng, 1.0), cfg, w),
      embed(Tensor<float>::randn({4, 4, 4, 1}, rng, 1.0), cfg, w),
      embed(Tensor<float>::randn({4, 8, 1}, rng, 1.0), cfg, w)};
  const auto batch = standardize_batch(seqs, 17);
  EXPECT_EQ(batch.valid_lens, (std::vector<std::size_t>{17, 2, 3}));
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 17; ++j) EXPECT_EQ(batch.mask[i][j], j < batch.valid_lens[i] ? 1 : 0);
    const auto row = batch.row(i);
    for (std::size_t j = batch.valid_lens[i]; j < 17; ++j)
      for (float v : row.row(j)) EXPECT_EQ(v, 0.0f);
    const auto back = batch.unpad(i);
    EXPECT_EQ(back.tokens, seqs[i].tokens);
    EXPECT_EQ(back.modality, seqs[i].modality);
  }
}

TEST(StandardizeBatch, ExactFitAndCapacity) {
  const auto cfg = toy_config().embedding;
  const auto w = random_weights(cfg, 16, 11);
  std::vector<TokenSequence<float>> one{embed(Tensor<float>({8, 8, 1}), cfg, w)};
  const auto b = standardize_batch(one, 5);
  for (auto m : b.mask[0]) EXPECT_EQ(m, 1);
  try {
    standardize_batch(one, 4);
    FAIL() << "expected capacity error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kCapacity);
  }
  EXPECT_THROW(standardize_batch(std::vector<TokenSequence<float>>{}, 4), Error);
}

TEST(EmbeddingConfig, DefaultLMaxCoversBothModalities) {
  EmbeddingConfig cfg;
  EXPECT_EQ(cfg.default_l_max(), 197u);
  EXPECT_EQ(toy_config().embedding.default_l_max(), 17u);
}

}  // namespace
}  // namespace ucad
