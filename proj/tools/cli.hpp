// Copyright 2026 The qprobe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace qprobe::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;  // selftest check failed
inline constexpr int kExitInput = 2;
inline constexpr int kExitNumerical = 3;

/// Runs one command line (args excludes the program name) and returns the
/// process exit code. Never throws.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

struct SelftestOptions {
  bool corrupt_memory_formula = false;  // negative control
};

/// The embedded invariant suite; prints one row per check. Returns true when
/// every check passes.
bool selftest(const SelftestOptions& options, std::ostream& out);

}  // namespace qprobe::cli
