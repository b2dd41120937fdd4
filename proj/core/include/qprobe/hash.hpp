// Copyright 2026 The qprobe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace qprobe {

// 64-bit FNV-1a, used for manifests and weight checksums.
class Fnv1a {
 public:
  void update(std::span<const unsigned char> bytes) noexcept;
  void update(std::string_view text) noexcept;
  void update(std::span<const double> values) noexcept;
  std::uint64_t digest() const noexcept { return state_; }
  std::string hex() const;

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::string to_hex(std::uint64_t v);

}  // namespace qprobe
