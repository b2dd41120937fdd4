// Copyright 2026 The qprobe Authors
// SPDX-License-Identifier: Apache-2.0

#include "qprobe/hash.hpp"

#include <bit>
#include <cstring>

#include <fmt/format.h>

namespace qprobe {

void Fnv1a::update(std::span<const unsigned char> bytes) noexcept {
  for (unsigned char b : bytes) {
    state_ ^= b;
    state_ *= 0x100000001b3ULL;
  }
}

void Fnv1a::update(std::string_view text) noexcept {
  update(std::span(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

void Fnv1a::update(std::span<const double> values) noexcept {
  // Hash the little-endian byte image so digests agree across hosts.
  for (double v : values) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
    unsigned char le[8];
    for (int i = 0; i < 8; ++i) le[i] = static_cast<unsigned char>(bits >> (8 * i));
    update(std::span<const unsigned char>(le, 8));
  }
}

std::string Fnv1a::hex() const { return to_hex(state_); }

std::string to_hex(std::uint64_t v) { return fmt::format("{:016x}", v); }

}  // namespace qprobe
