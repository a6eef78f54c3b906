// Copyright 2026 The ucad Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>

#include "ucad/io/binary.hpp"
#include "ucad/numerics/tensor.hpp"

namespace ucad {

// ".uten": "UTEN", u32 version = 1, u8 ndim, ndim x u32 dims, f32 LE data.
inline constexpr std::uint32_t kUtenVersion = 1;

template <Scalar T>
io::Bytes encode_uten(const Tensor<T>& t) {
  require(t.ndim() <= 255, ErrorKind::kCodec, "uten: too many dimensions");
  io::Writer w;
  w.bytes("UTEN");
  w.u32(kUtenVersion);
  w.u8(static_cast<std::uint8_t>(t.ndim()));
  for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
  w.f32_array(t);
  return w.take();
}

inline Tensor<float> decode_uten(std::span<const std::uint8_t> bytes) {
  io::Reader r(bytes);
  r.expect_magic("UTEN", "uten");
  const std::uint32_t version = r.u32("version");
  if (version != kUtenVersion)
    fail(ErrorKind::kCodec, "uten: unsupported version " + std::to_string(version));
  const std::uint8_t ndim = r.u8("ndim");
  Shape shape(ndim);
  for (auto& d : shape) d = r.u32("dims");
  Tensor<float> t = r.f32_array(shape, "data");
  if (r.remaining() != 0) fail(ErrorKind::kCodec, "uten: trailing bytes after field 'data'");
  return t;
}

template <Scalar T>
void save_uten(const Tensor<T>& t, const std::filesystem::path& path) {
  io::write_file(path, encode_uten(t));
}

inline Tensor<float> load_uten(const std::filesystem::path& path) {
  return decode_uten(io::read_file(path));
}

}  // namespace ucad
