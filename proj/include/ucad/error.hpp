// Copyright 2026 The ucad Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace ucad {

enum class ErrorKind {
  kShape,
  kInput,
  kContract,
  kCapacity,
  kCodec,
  kConflict,
  kNotFound,
  kCompatibility,
  kNumeric,
  kDomain,
  kIo,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kShape: return "shape";
    case ErrorKind::kInput: return "input";
    case ErrorKind::kContract: return "contract";
    case ErrorKind::kCapacity: return "capacity";
    case ErrorKind::kCodec: return "codec";
    case ErrorKind::kConflict: return "conflict";
    case ErrorKind::kNotFound: return "not-found";
    case ErrorKind::kCompatibility: return "compatibility";
    case ErrorKind::kNumeric: return "numeric";
    case ErrorKind::kDomain: return "domain";
    case ErrorKind::kIo: return "io";
  }
  return "unknown";
}

// Single exception type for the library; callers branch on kind().
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + what),
        kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace ucad
