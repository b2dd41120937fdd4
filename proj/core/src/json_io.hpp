// Copyright 2026 The qprobe Authors
// SPDX-License-Identifier: Apache-2.0

// nlohmann::json bindings shared by the core translation units. Not installed.

#pragma once

#include <string>
#include <string_view>

#include <fmt/format.h>

#include "json.hpp"
#include "qprobe/errors.hpp"
#include "qprobe/optimizers.hpp"
#include "qprobe/quant.hpp"

namespace qprobe {

template <typename T>
T parse_json_as(std::string_view text, std::string_view what) {
  try {
    return nlohmann::json::parse(text).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw InputError(fmt::format("malformed {}: {}", what, e.what()));
  }
}

inline void to_json(nlohmann::json& j, const ClipGrid& g) {
  j = {{"lo", g.lo}, {"hi", g.hi}, {"step", g.step}};
}

inline void from_json(const nlohmann::json& j, ClipGrid& g) {
  g.lo = j.value("lo", g.lo);
  g.hi = j.value("hi", g.hi);
  g.step = j.value("step", g.step);
}

inline void to_json(nlohmann::json& j, const QuantConfig& c) {
  j = {{"bits", c.bits},
       {"scheme", to_string(c.scheme)},
       {"granularity", "row_wise"},
       {"clip_grid", c.clip_grid},
       {"rounding", "half_to_even"}};
}

inline void from_json(const nlohmann::json& j, QuantConfig& c) {
  c.bits = j.value("bits", c.bits);
  if (j.contains("scheme")) c.scheme = parse_quant_scheme(j.at("scheme").get<std::string>());
  if (j.contains("granularity") && j.at("granularity").get<std::string>() != "row_wise") {
    throw InputError("only row_wise granularity is supported");
  }
  if (j.contains("rounding") && j.at("rounding").get<std::string>() != "half_to_even") {
    throw InputError("only half_to_even rounding is supported");
  }
  if (j.contains("clip_grid")) c.clip_grid = j.at("clip_grid").get<ClipGrid>();
  c.validate();
}

void to_json(nlohmann::json& j, const OptimizerConfig& c);
void from_json(const nlohmann::json& j, OptimizerConfig& c);

}  // namespace qprobe
