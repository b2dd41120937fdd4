// Copyright 2026 The qprobe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "qprobe/matrix.hpp"

namespace qprobe {

struct NamedTensor {
  std::string name;
  Matrix value;
  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

/// Ordered collection of named f64 tensors.
///
/// On disk: a JSON index
///   {"format": "qprobe-tensor-archive", "version": 1, "data_file": "<name>.bin",
///    "tensors": [{"name", "rows", "cols", "dtype": "f64", "offset", "byte_length"}, ...]}
/// and one sidecar of little-endian IEEE-754 doubles, row-major, concatenated in
/// index order. `offset` and `byte_length` are in bytes.
class TensorArchive {
 public:
  void add(std::string name, Matrix value);
  const Matrix& get(const std::string& name) const;
  const Matrix* find(const std::string& name) const;
  const std::vector<NamedTensor>& tensors() const noexcept { return tensors_; }

  // The sidecar is written next to the index with the index stem and a .bin
  // extension.
  void save(const std::filesystem::path& index_path) const;
  static TensorArchive load(const std::filesystem::path& index_path);

  friend bool operator==(const TensorArchive&, const TensorArchive&) = default;

 private:
  std::vector<NamedTensor> tensors_;
};

}  // namespace qprobe
