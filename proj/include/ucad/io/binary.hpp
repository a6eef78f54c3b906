// Copyright 2026 The ucad Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ucad/error.hpp"
#include "ucad/numerics/tensor.hpp"

namespace ucad::io {

using Bytes = std::vector<std::uint8_t>;

inline std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  std::size_t offset = 0;
  while (offset < bytes.size()) {
    const auto chunk = static_cast<uInt>(
        std::min<std::size_t>(bytes.size() - offset, 1u << 30));
    crc = ::crc32(crc, bytes.data() + offset, chunk);
    offset += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

// Little-endian append-only encoder.
class Writer {
 public:
  void bytes(std::string_view raw) {
    buf_.insert(buf_.end(), raw.begin(), raw.end());
  }
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }
  template <Scalar T>
  void f32_array(const Tensor<T>& t) {
    buf_.reserve(buf_.size() + 4 * t.size());
    for (T v : t.data()) f32(static_cast<float>(v));
  }
  // Appends the CRC32 of everything written so far.
  void crc_trailer() { u32(crc32(buf_)); }

  const Bytes& buffer() const { return buf_; }
  Bytes take() { return std::move(buf_); }

 private:
  Bytes buf_;
};

// Bounds-checked decoder; every read names the field it is decoding so that
// codec errors point at the offending field.
class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void expect_magic(std::string_view magic, std::string_view format) {
    need(magic.size(), "magic");
    if (std::memcmp(bytes_.data() + pos_, magic.data(), magic.size()) != 0)
      fail(ErrorKind::kCodec, "bad magic: not a " + std::string(format) + " file");
    pos_ += magic.size();
  }
  std::uint8_t u8(std::string_view field) {
    need(1, field);
    return bytes_[pos_++];
  }
  std::uint32_t u32(std::string_view field) {
    need(4, field);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{bytes_[pos_ + i]} << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(std::string_view field) {
    need(8, field);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{bytes_[pos_ + i]} << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32(std::string_view field) { return std::bit_cast<float>(u32(field)); }
  std::string str(std::string_view field, std::size_t max_len = 1 << 20) {
    const std::uint32_t len = u32(field);
    if (len > max_len) fail(ErrorKind::kCodec, "field '" + std::string(field) + "' length too large");
    need(len, field);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), len);
    pos_ += len;
    return s;
  }
  Tensor<float> f32_array(Shape shape, std::string_view field) {
    const std::size_t n = shape_size(shape);
    need(4 * n, field);
    std::vector<float> data(n);
    for (auto& v : data) v = f32(field);
    return Tensor<float>(std::move(shape), std::move(data));
  }

 private:
  void need(std::size_t n, std::string_view field) const {
    if (remaining() < n)
      fail(ErrorKind::kCodec, "truncated while reading field '" + std::string(field) + "'");
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

// Verifies and strips a trailing CRC32. Truncation shows up here first
// because the trailer no longer matches the shortened payload.
inline std::span<const std::uint8_t> checked_payload(std::span<const std::uint8_t> bytes,
                                                     std::string_view format) {
  if (bytes.size() < 4)
    fail(ErrorKind::kCodec, std::string(format) + ": CRC mismatch (file too short)");
  const auto payload = bytes.first(bytes.size() - 4);
  Reader trailer(bytes.last(4));
  const std::uint32_t stored = trailer.u32("crc32");
  if (stored != crc32(payload))
    fail(ErrorKind::kCodec, std::string(format) + ": CRC mismatch in field 'crc32'");
  return payload;
}

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::kIo, "short write to " + path.string());
}

}  // namespace ucad::io
