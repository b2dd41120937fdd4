// Copyright 2026 The qprobe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>

namespace qprobe {

/// Worker count from QPROBE_THREADS, defaulting to the hardware concurrency.
std::size_t thread_count();
// Overrides QPROBE_THREADS for the current process; 0 restores the default.
void set_thread_count(std::size_t n);

/// Runs fn(i) for i in [0, n). Each index must write only its own outputs;
/// work is split in contiguous static chunks so results do not depend on the
/// number of threads.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace qprobe
