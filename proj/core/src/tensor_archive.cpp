// Copyright 2026 The qprobe Authors
// SPDX-License-Identifier: Apache-2.0

#include "qprobe/tensor_archive.hpp"

#include <bit>
#include <cstdint>
#include <fstream>

#include <fmt/format.h>

#include "json.hpp"
#include "qprobe/errors.hpp"

namespace qprobe {
namespace {

using nlohmann::json;

constexpr const char* kFormat = "qprobe-tensor-archive";

void append_le(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

double read_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

void TensorArchive::add(std::string name, Matrix value) {
  if (find(name) != nullptr) throw InputError(fmt::format("duplicate tensor name '{}'", name));
  tensors_.push_back({std::move(name), std::move(value)});
}

const Matrix* TensorArchive::find(const std::string& name) const {
  for (const auto& t : tensors_) {
    if (t.name == name) return &t.value;
  }
  return nullptr;
}

const Matrix& TensorArchive::get(const std::string& name) const {
  if (const Matrix* m = find(name)) return *m;
  throw InputError(fmt::format("tensor '{}' not found in archive", name));
}

void TensorArchive::save(const std::filesystem::path& index_path) const {
  auto data_path = index_path;
  data_path.replace_extension(".bin");

  std::string blob;
  json entries = json::array();
  for (const auto& t : tensors_) {
    const std::size_t offset = blob.size();
    for (double v : t.value.data()) append_le(blob, v);
    entries.push_back({{"name", t.name},
                       {"rows", t.value.rows()},
                       {"cols", t.value.cols()},
                       {"dtype", "f64"},
                       {"offset", offset},
                       {"byte_length", blob.size() - offset}});
  }
  json index = {{"format", kFormat},
                {"version", 1},
                {"data_file", data_path.filename().string()},
                {"tensors", entries}};

  std::ofstream data(data_path, std::ios::binary);
  if (!data) throw InputError(fmt::format("cannot write {}", data_path.string()));
  data.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  std::ofstream idx(index_path);
  if (!idx) throw InputError(fmt::format("cannot write {}", index_path.string()));
  idx << index.dump(2) << '\n';
}

TensorArchive TensorArchive::load(const std::filesystem::path& index_path) {
  std::ifstream idx(index_path);
  if (!idx) throw InputError(fmt::format("cannot open tensor index {}", index_path.string()));
  json index;
  try {
    index = json::parse(idx);
  } catch (const json::exception& e) {
    throw InputError(fmt::format("malformed tensor index {}: {}", index_path.string(), e.what()));
  }
  try {
    if (index.at("format").get<std::string>() != kFormat) {
      throw InputError(fmt::format("{} is not a tensor archive index", index_path.string()));
    }
    const auto data_path = index_path.parent_path() / index.at("data_file").get<std::string>();
    std::ifstream data(data_path, std::ios::binary);
    if (!data) throw InputError(fmt::format("cannot open tensor data {}", data_path.string()));
    const std::string blob((std::istreambuf_iterator<char>(data)), std::istreambuf_iterator<char>());
    const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());

    TensorArchive archive;
    for (const auto& e : index.at("tensors")) {
      const auto rows = e.at("rows").get<std::size_t>();
      const auto cols = e.at("cols").get<std::size_t>();
      const auto offset = e.at("offset").get<std::size_t>();
      const auto length = e.at("byte_length").get<std::size_t>();
      const auto name = e.at("name").get<std::string>();
      if (e.at("dtype").get<std::string>() != "f64") {
        throw InputError(fmt::format("tensor '{}': only f64 is supported", name));
      }
      if (length != rows * cols * 8 || offset + length > blob.size()) {
        throw InputError(fmt::format("tensor '{}': byte range out of bounds", name));
      }
      std::vector<double> values(rows * cols);
      for (std::size_t i = 0; i < values.size(); ++i) values[i] = read_le(bytes + offset + 8 * i);
      Matrix m(rows, cols, std::move(values));
      if (!m.all_finite()) throw InputError(fmt::format("tensor '{}' has non-finite values", name));
      archive.add(name, std::move(m));
    }
    return archive;
  } catch (const json::exception& e) {
    throw InputError(fmt::format("malformed tensor index {}: {}", index_path.string(), e.what()));
  }
}

}  // namespace qprobe
