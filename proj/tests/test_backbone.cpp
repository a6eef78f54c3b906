// Copyright 2026 The ucad Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

namespace ucad {
namespace {

using testing::max_rel_diff;
using testing::random_expert;
using testing::toy_config;

const BlockLora<float>* const kNoLora = nullptr;
const std::vector<LoraDeltaSet<float>>* const kNoDeltas = nullptr;
const LoraDeltaSet<float>* const kNoSet = nullptr;

// Straight-line attention for one unpadded sequence, in double, with no
// shared helpers beyond plain loops.
std::vector<double> scalar_attention(const Tensor<float>& x, const BlockWeights<float>& w, std::size_t heads,
                                     const BlockLora<float>* lora) {
  const std::size_t len = x.dim(0), d = x.dim(1), hd = d / heads;
  auto proj = [&](const Tensor<float>& wm, const Tensor<float>& b, const LoraAdapter<float>* ad) {
    std::vector<double> y(len * d);
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        double acc = b[j];
        for (std::size_t t = 0; t < d; ++t) acc += double(x(i, t)) * wm(t, j);
        if (ad) {
          for (std::size_t r = 0; r < ad->rank(); ++r) {
            double u = 0.0;
            for (std::size_t t = 0; t < d; ++t) u += double(x(i, t)) * ad->a(r, t);
            acc += u * ad->b(j, r);
          }
        }
        y[i * d + j] = acc;
      }
    return y;
  };
  const auto q = proj(w.w_q, w.b_q, lora ? &lora->q : nullptr);
  const auto k = proj(w.w_k, w.b_k, nullptr);
  const auto v = proj(w.w_v, w.b_v, lora ? &lora->v : nullptr);
  std::vector<double> ctx(len * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < len; ++i) {
      std::vector<double> s(len);
      double mx = -1e300;
      for (std::size_t j = 0; j < len; ++j) {
        double dot = 0.0;
        for (std::size_t t = 0; t < hd; ++t) dot += q[i * d + h * hd + t] * k[j * d + h * hd + t];
        s[j] = dot / std::sqrt(double(hd));
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (auto& e : s) z += (e = std::exp(e - mx));
      for (std::size_t j = 0; j < len; ++j)
        for (std::size_t t = 0; t < hd; ++t) ctx[i * d + h * hd + t] += s[j] / z * v[j * d + h * hd + t];
    }
  std::vector<double> out(len * d);
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      double acc = w.b_o[j];
      for (std::size_t t = 0; t < d; ++t) acc += ctx[i * d + t] * w.w_o(t, j);
      out[i * d + j] = acc;
    }
  return out;
}

class BackboneTest : public ::testing::Test {
 protected:
  BackboneConfig cfg = toy_config(32, 2, 4, 64);
  Backbone<float> bb = init_random_backbone<float>(cfg, 3, 0.2);
};

TEST_F(BackboneTest, AttentionMatchesScalarReference) {
  Xoshiro256 rng(1);
  const auto x = Tensor<float>::randn({2, cfg.dim}, rng, 1.0);
  const auto e = random_expert(cfg, "t", Modality::kTwoD, 3, 2, HeadMode::kSoftmaxSingleLabel, rng);
  for (const BlockLora<float>* lora : {kNoLora, &e.lora[0]}) {
    const auto got = attention_row(x, Mask{1, 1}, bb.blocks()[0], cfg.num_heads, lora);
    const auto want = scalar_attention(x, bb.blocks()[0], cfg.num_heads, lora);
    EXPECT_LT(testing::norm_rel_diff(got.data(), want), 1e-5);
  }
}

TEST_F(BackboneTest, SingleTokenAttendsToItself) {
  Xoshiro256 rng(2);
  const auto x = Tensor<float>::randn({1, cfg.dim}, rng, 1.0);
  AttentionCache<float> cache;
  attention_row(x, Mask{1}, bb.blocks()[0], cfg.num_heads, kNoLora, &cache);
  for (const auto& p : cache.probs) EXPECT_EQ(p(0, 0), 1.0f);
}

TEST_F(BackboneTest, ZeroDeltasEqualPlainAttentionExactly) {
  Xoshiro256 rng(3);
  auto e = random_expert(cfg, "t", Modality::kTwoD, 4, 2, HeadMode::kSoftmaxSingleLabel, rng);
  for (auto& b : e.lora) {
    b.q.b = Tensor<float>(b.q.b.shape());
    b.v.b = Tensor<float>(b.v.b.shape());
  }
  const auto x = Tensor<float>::randn({1, 5, cfg.dim}, rng, 1.0);
  const std::vector<Mask> mask{Mask{1, 1, 1, 0, 0}};
  LoraDeltaSet<float> deltas{4, {e.lora[0]}};
  EXPECT_EQ(attention_masked(x, mask, bb.blocks()[0], cfg.num_heads, &deltas),
            attention_masked(x, mask, bb.blocks()[0], cfg.num_heads, kNoSet));
}

TEST_F(BackboneTest, LoraEqualsMaterializedWeights) {
  Xoshiro256 rng(4);
  const auto e = random_expert(cfg, "t", Modality::kTwoD, 2, 2, HeadMode::kSoftmaxSingleLabel, rng);
  BlockWeights<float> merged = bb.blocks()[0];
  add_inplace(merged.w_q, matmul(transpose(e.lora[0].q.a), transpose(e.lora[0].q.b)));
  add_inplace(merged.w_v, matmul(transpose(e.lora[0].v.a), transpose(e.lora[0].v.b)));
  const auto x = Tensor<float>::randn({6, cfg.dim}, rng, 1.0);
  const Mask mask(6, 1);
  const auto a = attention_row(x, mask, bb.blocks()[0], cfg.num_heads, &e.lora[0]);
  const auto b = attention_row(x, mask, merged, cfg.num_heads, kNoLora);
  EXPECT_LT(testing::norm_rel_diff(a.data(), b.data()), 1e-5);
}

TEST_F(BackboneTest, DeltaRankMismatchIsContractError) {
  Xoshiro256 rng(5);
  const auto e2 = random_expert(cfg, "a", Modality::kTwoD, 2, 2, HeadMode::kSoftmaxSingleLabel, rng);
  const auto e4 = random_expert(cfg, "b", Modality::kTwoD, 4, 2, HeadMode::kSoftmaxSingleLabel, rng);
  LoraDeltaSet<float> deltas{4, {e2.lora[0], e4.lora[0]}};
  const auto x = Tensor<float>::randn({2, 3, cfg.dim}, rng, 1.0);
  try {
    attention_masked(x, {Mask(3, 1), Mask(3, 1)}, bb.blocks()[0], cfg.num_heads, &deltas);
    FAIL() << "expected a contract error";
  } catch (const Error& err) {
    EXPECT_EQ(err.kind(), ErrorKind::kContract);
  }
}

TEST_F(BackboneTest, BlockMatchesCompositionOracle) {
  Xoshiro256 rng(6);
  const auto x = Tensor<float>::randn({4, cfg.dim}, rng, 1.0);
  const auto& w = bb.blocks()[1];
  const Mask mask(4, 1);
  const auto y = block_forward_row(x, mask, w, cfg, kNoLora);
  auto x2 = attention_row(layer_norm(x, w.ln1_g, w.ln1_b, 1e-6f), mask, w, cfg.num_heads, kNoLora);
  add_inplace(x2, x);
  auto m = matmul(layer_norm(x2, w.ln2_g, w.ln2_b, 1e-6f), w.mlp_in);
  add_row_vector(m, w.mlp_in_b);
  auto want = matmul(gelu(m), w.mlp_out);
  add_row_vector(want, w.mlp_out_b);
  add_inplace(want, x2);
  EXPECT_LT(testing::norm_rel_diff(y.data(), want.data()), 1e-5);
}

TEST_F(BackboneTest, ZeroMlpLeavesSecondResidualAsIdentity) {
  Xoshiro256 rng(7);
  BlockWeights<float> w = bb.blocks()[0];
  w.mlp_out = Tensor<float>(w.mlp_out.shape());
  w.mlp_out_b = Tensor<float>(w.mlp_out_b.shape());
  const auto x = Tensor<float>::randn({3, cfg.dim}, rng, 1.0);
  const Mask mask(3, 1);
  auto want = attention_row(layer_norm(x, w.ln1_g, w.ln1_b, 1e-6f), mask, w, cfg.num_heads, kNoLora);
  add_inplace(want, x);
  EXPECT_EQ(block_forward_row(x, mask, w, cfg, kNoLora), want);
}

TEST_F(BackboneTest, PaddingDoesNotChangeCls) {
  Xoshiro256 rng(8);
  const auto seq = embed(Tensor<float>::randn({8, 12, 1}, rng, 1.0), cfg.embedding, bb.embedding());
  const auto tight = backbone_forward(bb, standardize_batch(std::vector{seq}, seq.valid_len));
  const auto loose = backbone_forward(bb, standardize_batch(std::vector{seq}, seq.valid_len + 40));
  EXPECT_LT(max_rel_diff(tight.data(), loose.data()), 1e-5);
}

TEST_F(BackboneTest, IdenticalRowsGiveIdenticalCls) {
  Xoshiro256 rng(9);
  const auto seq = embed(Tensor<float>::randn({8, 8, 1}, rng, 1.0), cfg.embedding, bb.embedding());
  const auto out = backbone_forward(bb, standardize_batch(std::vector{seq, seq}, seq.valid_len));
  for (std::size_t j = 0; j < cfg.dim; ++j) EXPECT_EQ(out(0, j), out(1, j));
}

TEST_F(BackboneTest, HeterogeneousBatchMatchesSequential) {
  Xoshiro256 rng(10);
  std::vector<TokenSequence<float>> seqs;
  for (int i = 0; i < 5; ++i) {
    const Modality m = i % 2 ? Modality::kThreeD : Modality::kTwoD;
    seqs.push_back(embed(testing::random_input(m, 4, m == Modality::kTwoD ? 16 : 8, rng), cfg.embedding,
                         bb.embedding()));
  }
  const auto batch = standardize_batch(seqs, 17);
  const auto out = backbone_forward(bb, batch);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto alone = backbone_forward(bb, standardize_batch(std::vector{seqs[i]}, seqs[i].valid_len));
    EXPECT_LT(max_rel_diff(out.row(i), alone.data()), 1e-5) << "row " << i;
  }
}

TEST_F(BackboneTest, ThreadCountDoesNotChangeResults) {
  Xoshiro256 rng(11);
  std::vector<TokenSequence<float>> seqs;
  for (int i = 0; i < 6; ++i)
    seqs.push_back(embed(testing::random_input(Modality::kTwoD, 4, 16, rng), cfg.embedding, bb.embedding()));
  const auto batch = standardize_batch(seqs, 17);
  EXPECT_EQ(backbone_forward(bb, batch, kNoDeltas, 1), backbone_forward(bb, batch, kNoDeltas, 3));
}

TEST(BackboneHand, OneBlockIdentityLikeWeights) {
  // All projections and MLP zero, so each block is the identity; the CLS
  // output is layer_norm(cls + pos[0]) with unit gain.
  BackboneConfig cfg = toy_config(4, 1, 1, 4);
  auto emb = EmbeddingWeights<float>::zeros(cfg.embedding, 4);
  emb.cls = Tensor<float>({4}, {1.0f, 2.0f, 3.0f, 6.0f});
  auto w = BlockWeights<float>::zeros(4, 4);
  w.ln1_g = w.ln2_g = Tensor<float>::filled({4}, 1.0f);
  Backbone<float> bb(cfg, emb, {w}, Tensor<float>::filled({4}, 1.0f), Tensor<float>({4}));
  const auto seq = embed(Tensor<float>({4, 4, 1}), cfg.embedding, bb.embedding());
  const auto out = backbone_forward(bb, standardize_batch(std::vector{seq}, 2));
  // mean 3, variance (4 + 1 + 0 + 9) / 4 = 3.5
  const double rstd = 1.0 / std::sqrt(3.5 + 1e-6);
  const double want[4] = {-2 * rstd, -1 * rstd, 0.0, 3 * rstd};
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(out(0, j), want[j], 1e-6);
}

TEST(BackboneInit, DeterministicAndSeedSensitive) {
  const auto cfg = toy_config();
  const auto a = init_random_backbone<float>(cfg, 1);
  const auto b = init_random_backbone<float>(cfg, 1);
  const auto c = init_random_backbone<float>(cfg, 2);
  EXPECT_EQ(a, b);
  EXPECT_EQ(backbone_fingerprint(a), backbone_fingerprint(b));
  EXPECT_NE(backbone_fingerprint(a), backbone_fingerprint(c));
  EXPECT_EQ(a.param_count(), backbone_param_count(cfg));
  EXPECT_EQ(a.blocks()[0].ln1_g[0], 1.0f);
  EXPECT_EQ(a.blocks()[0].ln1_b[0], 0.0f);
}

TEST(BackboneInit, InvalidConfigRejected) {
  auto cfg = toy_config();
  cfg.num_heads = 5;
  EXPECT_THROW(init_random_backbone<float>(cfg, 1), Error);
}

TEST(BackboneCodec, RoundTripForwardIsExact) {
  const auto cfg = toy_config();
  const auto bb = init_random_backbone<float>(cfg, 4);
  const auto back = decode_backbone(encode_backbone(bb));
  EXPECT_EQ(back, bb);
  Xoshiro256 rng(12);
  const auto seq = embed(Tensor<float>::randn({8, 8, 1}, rng, 1.0), cfg.embedding, bb.embedding());
  const auto batch = standardize_batch(std::vector{seq}, seq.valid_len);
  EXPECT_EQ(backbone_forward(back, batch), backbone_forward(bb, batch));
}

TEST(BackboneCodec, CorruptionDetected) {
  const auto bytes = encode_backbone(init_random_backbone<float>(toy_config(16, 1, 2, 16), 5));
  for (std::size_t pos : {std::size_t{0}, std::size_t{40}, bytes.size() / 2, bytes.size() - 1}) {
    auto bad = bytes;
    bad[pos] ^= 0x5a;
    try {
      decode_backbone(bad);
      FAIL() << "corruption at " << pos << " not detected";
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::kCodec);
    }
  }
  auto truncated = bytes;
  truncated.resize(bytes.size() - 10);
  EXPECT_THROW(decode_backbone(truncated), Error);
}

}  // namespace
}  // namespace ucad
