// Copyright 2026 The qprobe Authors
// SPDX-License-Identifier: Apache-2.0

#include "qprobe/tasks.hpp"

#include <cmath>

#include <fmt/format.h>

#include "qprobe/errors.hpp"

namespace qprobe {
namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace

std::string to_string(TaskKind kind) {
  return kind == TaskKind::linear_teacher ? "linear_teacher" : "synthetic_char_lm";
}

TaskKind parse_task_kind(std::string_view name) {
  if (name == "linear_teacher") return TaskKind::linear_teacher;
  if (name == "synthetic_char_lm") return TaskKind::synthetic_char_lm;
  throw InputError(fmt::format("unknown task '{}'", name));
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(seed ^ splitmix64(stream));
}

LinearTeacher::LinearTeacher(std::size_t width, std::uint64_t seed, double noise_std)
    : a_(0, 0), noise_std_(noise_std) {
  if (width == 0) throw InputError("linear teacher needs width >= 1");
  Rng rng(seed);
  a_ = rng.normal_matrix(width, width, 1.0 / std::sqrt(static_cast<double>(width)));
}

void LinearTeacher::sample(Rng& rng, std::size_t rows, Matrix& x, Matrix& y) const {
  const std::size_t w = width();
  x = rng.normal_matrix(rows, w);
  y = Matrix(rows, w);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t o = 0; o < w; ++o) {
      double s = 0.0;
      for (std::size_t i = 0; i < w; ++i) s += a_(o, i) * x(r, i);
      y(r, o) = s;
    }
  }
  if (noise_std_ > 0.0) {
    for (double& v : y.data()) v += noise_std_ * rng.normal();
  }
}

const std::string& CharGrammar::Choice::pick(Rng& rng) const {
  const double u = rng.uniform() * cumulative.back();
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (u < cumulative[i]) return words[i];
  }
  return words.back();
}

CharGrammar::CharGrammar(std::uint64_t seed) {
  Rng rng(seed);
  auto make = [&](std::vector<std::string> words) {
    Choice c;
    double acc = 0.0;
    for (std::size_t i = 0; i < words.size(); ++i) {
      acc += rng.uniform(0.2, 1.0);
      c.cumulative.push_back(acc);
    }
    c.words = std::move(words);
    return c;
  };
  det_ = make({"the", "a", "every", "some", "one"});
  adj_ = make({"red", "small", "quiet", "quick", "old", "green"});
  noun_ = make({"cat", "dog", "bird", "fox", "owl", "child", "robot", "river"});
  vt_ = make({"sees", "likes", "chases", "finds", "hears", "follows"});
  vi_ = make({"sleeps", "runs", "sings", "waits"});
  p_adj_ = rng.uniform(0.2, 0.8);
  p_transitive_ = rng.uniform(0.4, 0.9);
}

std::string CharGrammar::sentence(Rng& rng) const {
  auto noun_phrase = [&](std::string& out) {
    out += det_.pick(rng);
    if (rng.uniform() < p_adj_) {
      out += ' ';
      out += adj_.pick(rng);
    }
    out += ' ';
    out += noun_.pick(rng);
  };
  std::string s;
  noun_phrase(s);
  s += ' ';
  if (rng.uniform() < p_transitive_) {
    s += vt_.pick(rng);
    s += ' ';
    noun_phrase(s);
  } else {
    s += vi_.pick(rng);
  }
  s += '.';
  return s;
}

std::string CharGrammar::corpus(Rng& rng, std::size_t min_chars) const {
  std::string out;
  while (out.size() < min_chars) {
    if (!out.empty()) out += ' ';
    out += sentence(rng);
  }
  return out;
}

int CharGrammar::encode(char c) {
  const auto pos = kAlphabet.find(c);
  if (pos == std::string_view::npos) throw InputError(fmt::format("character '{}' is outside the alphabet", c));
  return static_cast<int>(pos);
}

std::vector<int> CharGrammar::encode(std::string_view text) {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (char c : text) ids.push_back(encode(c));
  return ids;
}

Matrix sinusoidal_positions(std::size_t seq_len, std::size_t width) {
  Matrix p(seq_len, width);
  for (std::size_t t = 0; t < seq_len; ++t) {
    for (std::size_t i = 0; i < width; ++i) {
      const double expo = static_cast<double>(i - i % 2) / static_cast<double>(width);
      const double angle = static_cast<double>(t) / std::pow(10000.0, expo);
      p(t, i) = i % 2 == 0 ? std::sin(angle) : std::cos(angle);
    }
  }
  return p;
}

}  // namespace qprobe
