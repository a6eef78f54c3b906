// Copyright 2026 The ucad Authors
// SPDX-License-Identifier: Apache-2.0
//
// ".ucbb" backbone files:
//   "UCBB" | u32 version=1 | u32 d, L, heads, mlp_dim | f32 eps | u64 seed
//   | u32 x5 2D patch spec (patch_h, patch_w, channels, max_h, max_w)
//   | u32 x7 3D patch spec (patch_d, patch_h, patch_w, channels, max_d, max_h, max_w)
//   | embedding: proj2d, proj3d, pos2d, pos3d, cls
//   | per block: w_q b_q w_k b_k w_v b_v w_o b_o mlp_in mlp_in_b mlp_out mlp_out_b
//                ln1_g ln1_b ln2_g ln2_b
//   | final_g, final_b | u32 CRC32 of all preceding bytes
// Arrays are f32 little-endian, row-major, shapes implied by the header.

#pragma once

#include <filesystem>

#include "ucad/backbone.hpp"
#include "ucad/io/binary.hpp"

namespace ucad {

inline constexpr std::uint32_t kBackboneVersion = 1;

template <Scalar T>
io::Bytes encode_backbone(const Backbone<T>& bb) {
  const auto& c = bb.config();
  io::Writer w;
  w.bytes("UCBB");
  w.u32(kBackboneVersion);
  for (std::size_t v : {c.dim, c.num_blocks, c.num_heads, c.mlp_dim}) w.u32(static_cast<std::uint32_t>(v));
  w.f32(c.eps);
  w.u64(c.seed);
  const auto& s2 = c.embedding.spec2d;
  const auto& s3 = c.embedding.spec3d;
  for (std::size_t v : {s2.patch_h, s2.patch_w, s2.channels, s2.max_h, s2.max_w})
    w.u32(static_cast<std::uint32_t>(v));
  for (std::size_t v : {s3.patch_d, s3.patch_h, s3.patch_w, s3.channels, s3.max_d, s3.max_h, s3.max_w})
    w.u32(static_cast<std::uint32_t>(v));
  const auto& e = bb.embedding();
  for (const auto* t : {&e.proj2d, &e.proj3d, &e.pos2d, &e.pos3d, &e.cls}) w.f32_array(*t);
  for (const auto& b : bb.blocks())
    BlockWeights<T>::visit(b, [&](const Tensor<T>& t) { w.f32_array(t); });
  w.f32_array(bb.final_gamma());
  w.f32_array(bb.final_beta());
  w.crc_trailer();
  return w.take();
}

inline Backbone<float> decode_backbone(std::span<const std::uint8_t> bytes) {
  io::Reader magic(bytes);
  magic.expect_magic("UCBB", "ucbb");
  io::Reader r(io::checked_payload(bytes, "ucbb"));
  r.expect_magic("UCBB", "ucbb");
  const std::uint32_t version = r.u32("version");
  if (version != kBackboneVersion)
    fail(ErrorKind::kCodec, "ucbb: unsupported version " + std::to_string(version));
  BackboneConfig c;
  c.dim = r.u32("d");
  c.num_blocks = r.u32("L");
  c.num_heads = r.u32("heads");
  c.mlp_dim = r.u32("mlp_dim");
  c.eps = r.f32("eps");
  c.seed = r.u64("seed");
  auto& s2 = c.embedding.spec2d;
  for (auto* v : {&s2.patch_h, &s2.patch_w, &s2.channels, &s2.max_h, &s2.max_w}) *v = r.u32("patch2d");
  auto& s3 = c.embedding.spec3d;
  for (auto* v : {&s3.patch_d, &s3.patch_h, &s3.patch_w, &s3.channels, &s3.max_d, &s3.max_h, &s3.max_w})
    *v = r.u32("patch3d");
  try {
    c.validate();
  } catch (const Error& err) {
    fail(ErrorKind::kCodec, std::string("ucbb: invalid config field: ") + err.what());
  }
  const std::size_t d = c.dim;
  auto e = EmbeddingWeights<float>::zeros(c.embedding, d);
  e.proj2d = r.f32_array(e.proj2d.shape(), "proj2d");
  e.proj3d = r.f32_array(e.proj3d.shape(), "proj3d");
  e.pos2d = r.f32_array(e.pos2d.shape(), "pos2d");
  e.pos3d = r.f32_array(e.pos3d.shape(), "pos3d");
  e.cls = r.f32_array(e.cls.shape(), "cls");
  std::vector<BlockWeights<float>> blocks;
  for (std::size_t b = 0; b < c.num_blocks; ++b) {
    auto bw = BlockWeights<float>::zeros(d, c.mlp_dim);
    BlockWeights<float>::visit(bw, [&](Tensor<float>& t) {
      t = r.f32_array(t.shape(), "block " + std::to_string(b));
    });
    blocks.push_back(std::move(bw));
  }
  Tensor<float> fg = r.f32_array({d}, "final_g");
  Tensor<float> fb = r.f32_array({d}, "final_b");
  if (r.remaining() != 0) fail(ErrorKind::kCodec, "ucbb: trailing bytes before field 'crc32'");
  return Backbone<float>(c, std::move(e), std::move(blocks), std::move(fg), std::move(fb));
}

template <Scalar T>
void save_backbone(const Backbone<T>& bb, const std::filesystem::path& path) {
  io::write_file(path, encode_backbone(bb));
}

inline Backbone<float> load_backbone(const std::filesystem::path& path) {
  return decode_backbone(io::read_file(path));
}

/// Content hash of a backbone: the CRC32 of its ".ucbb" encoding, i.e. the
/// value stored in the file's trailer. Experts record it to bind themselves
/// to the backbone they were trained against.
template <Scalar T>
std::uint32_t backbone_fingerprint(const Backbone<T>& bb) {
  const io::Bytes bytes = encode_backbone(bb);
  return io::crc32(std::span<const std::uint8_t>(bytes).first(bytes.size() - 4));
}

}  // namespace ucad
