// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "clinlm/common/hash.hpp"

#include <cstdio>

namespace clinlm {

std::uint64_t fnv1a_bytes(std::span<const std::byte> bytes, std::uint64_t h) {
  for (std::byte b : bytes) {
    h ^= static_cast<std::uint8_t>(b);
    h *= kFnvPrime;
  }
  return h;
}

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

}  // namespace clinlm
