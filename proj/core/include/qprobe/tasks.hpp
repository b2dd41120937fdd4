// Copyright 2026 The qprobe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "qprobe/matrix.hpp"

namespace qprobe {

enum class TaskKind { linear_teacher, synthetic_char_lm };

std::string to_string(TaskKind kind);
TaskKind parse_task_kind(std::string_view name);

/// Derives an independent stream seed (splitmix64 of seed ^ stream tag).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

/// Regression target y = x A^T + noise with a seeded teacher A whose entries
/// are N(0, 1/width).
class LinearTeacher {
 public:
  LinearTeacher(std::size_t width, std::uint64_t seed, double noise_std = 0.01);

  const Matrix& teacher() const noexcept { return a_; }
  std::size_t width() const noexcept { return a_.rows(); }
  /// Draws a (rows x width) input with N(0,1) entries and its target.
  void sample(Rng& rng, std::size_t rows, Matrix& x, Matrix& y) const;

 private:
  Matrix a_;
  double noise_std_;
};

/// Sentences from a small probabilistic grammar
///   S -> NP VP ".",  NP -> Det [Adj] N,  VP -> Vt NP | Vi
/// whose production weights are drawn from the seed.
class CharGrammar {
 public:
  explicit CharGrammar(std::uint64_t seed);

  std::string sentence(Rng& rng) const;
  /// Space-joined sentences, at least `min_chars` long.
  std::string corpus(Rng& rng, std::size_t min_chars) const;

  static constexpr std::string_view kAlphabet = "abcdefghijklmnopqrstuvwxyz .";
  static std::size_t vocab_size() noexcept { return kAlphabet.size(); }
  static int encode(char c);
  static std::vector<int> encode(std::string_view text);

 private:
  struct Choice {
    std::vector<std::string> words;
    std::vector<double> cumulative;
    const std::string& pick(Rng& rng) const;
  };
  Choice det_, adj_, noun_, vt_, vi_;
  double p_adj_ = 0.5;
  double p_transitive_ = 0.5;
};

/// Fixed sinusoidal positions: P(t, 2i) = sin(t / 10000^(2i/d)),
/// P(t, 2i+1) = cos(same).
Matrix sinusoidal_positions(std::size_t seq_len, std::size_t width);

}  // namespace qprobe
