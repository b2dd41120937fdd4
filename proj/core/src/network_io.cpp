// Copyright 2026 The qprobe Authors
// SPDX-License-Identifier: Apache-2.0

#include <fstream>

#include <fmt/format.h>

#include "json.hpp"
#include "qprobe/errors.hpp"
#include "qprobe/network.hpp"
#include "qprobe/tensor_archive.hpp"

namespace qprobe {
namespace {

using nlohmann::json;

constexpr const char* kFormat = "qprobe-network";

std::vector<double> row_of(const Matrix& m) { return m.values(); }

}  // namespace

void save_network(const NetworkSpec& net, const std::filesystem::path& manifest_path,
                  const std::filesystem::path& weights_index_path) {
  net.validate();
  TensorArchive archive;
  json modules = json::array();
  for (std::size_t i = 0; i < net.modules.size(); ++i) {
    const auto& m = net.modules[i];
    const std::string prefix = fmt::format("m{}", i + 1);
    json entry = {{"kind", to_string(m.kind())}};
    if (const auto* l = std::get_if<Linear>(&m.op)) {
      entry["weight"] = prefix + ".weight";
      entry["quantize"] = m.quantize;
      archive.add(prefix + ".weight", l->weight);
    } else if (const auto* n = std::get_if<RmsNorm>(&m.op)) {
      entry["gamma"] = prefix + ".gamma";
      archive.add(prefix + ".gamma", Matrix::row_vector(n->gamma));
    } else if (const auto* b = std::get_if<ResidualBegin>(&m.op)) {
      entry["tag"] = b->tag;
    } else if (const auto* e = std::get_if<ResidualEnd>(&m.op)) {
      entry["tag"] = e->tag;
    } else if (const auto* a = std::get_if<AttentionUnit>(&m.op)) {
      entry["heads"] = a->heads;
      entry["causal"] = a->causal;
      entry["quantize"] = m.quantize;
      for (const auto& [key, w] :
           {std::pair{"wq", &a->wq}, {"wk", &a->wk}, {"wv", &a->wv}, {"wo", &a->wo}}) {
        entry[key] = prefix + "." + key;
        archive.add(prefix + "." + key, *w);
      }
    }
    modules.push_back(std::move(entry));
  }

  std::error_code ec;
  auto rel = std::filesystem::relative(weights_index_path, manifest_path.parent_path(), ec);
  if (ec || rel.empty()) rel = weights_index_path;
  json manifest = {{"format", kFormat},
                   {"version", 1},
                   {"width", net.width},
                   {"seq_len", net.seq_len},
                   {"weights", rel.generic_string()},
                   {"modules", modules}};
  archive.save(weights_index_path);
  std::ofstream out(manifest_path);
  if (!out) throw InputError(fmt::format("cannot write {}", manifest_path.string()));
  out << manifest.dump(2) << '\n';
}

NetworkSpec load_network(const std::filesystem::path& manifest_path,
                         const std::filesystem::path& weights_index_path) {
  std::ifstream in(manifest_path);
  if (!in) throw InputError(fmt::format("cannot open model spec {}", manifest_path.string()));
  try {
    const json manifest = json::parse(in);
    if (manifest.at("format").get<std::string>() != kFormat) {
      throw InputError(fmt::format("{} is not a qprobe network manifest", manifest_path.string()));
    }
    std::filesystem::path weights = weights_index_path;
    if (weights.empty()) {
      weights = manifest_path.parent_path() / manifest.at("weights").get<std::string>();
    }
    const TensorArchive archive = TensorArchive::load(weights);

    NetworkSpec net;
    net.width = manifest.at("width").get<std::size_t>();
    net.seq_len = manifest.value("seq_len", std::size_t{0});
    for (const auto& e : manifest.at("modules")) {
      const auto kind = e.at("kind").get<std::string>();
      ModuleSpec m;
      if (kind == "linear") {
        m.op = Linear{archive.get(e.at("weight").get<std::string>())};
        m.quantize = e.value("quantize", true);
      } else if (kind == "rmsnorm") {
        m.op = RmsNorm{row_of(archive.get(e.at("gamma").get<std::string>()))};
      } else if (kind == "relu2") {
        m.op = Relu2{};
      } else if (kind == "residual_begin") {
        m.op = ResidualBegin{e.at("tag").get<std::string>()};
      } else if (kind == "residual_end") {
        m.op = ResidualEnd{e.at("tag").get<std::string>()};
      } else if (kind == "attention_unit") {
        AttentionUnit a;
        a.wq = archive.get(e.at("wq").get<std::string>());
        a.wk = archive.get(e.at("wk").get<std::string>());
        a.wv = archive.get(e.at("wv").get<std::string>());
        a.wo = archive.get(e.at("wo").get<std::string>());
        a.heads = e.at("heads").get<std::size_t>();
        a.causal = e.value("causal", true);
        m.op = std::move(a);
        m.quantize = e.value("quantize", true);
      } else {
        throw InputError(fmt::format("unknown module kind '{}'", kind));
      }
      net.modules.push_back(std::move(m));
    }
    net.validate();
    return net;
  } catch (const json::exception& e) {
    throw InputError(fmt::format("malformed model spec {}: {}", manifest_path.string(), e.what()));
  }
}

}  // namespace qprobe
