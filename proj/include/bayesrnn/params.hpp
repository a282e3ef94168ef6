// Copyright 2026 The bayesrnn Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <bayesrnn/numerics.hpp>

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

namespace bayesrnn {

struct ParamEntry {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t length() const { return rows * cols; }
  bool operator==(const ParamEntry&) const = default;
};

/// Every trainable tensor of a model laid end to end, with a name index.
/// The order is the model's visit order and never changes for a given
/// architecture.
struct FlatParams {
  std::vector<double> values;
  std::vector<ParamEntry> index;

  std::size_t size() const { return values.size(); }

  const ParamEntry* find(const std::string& name) const {
    for (const auto& e : index)
      if (e.name == name) return &e;
    return nullptr;
  }

  bool same_layout(const FlatParams& o) const { return index == o.index; }

  /// Zero-filled copy with the same index.
  FlatParams zeros_like() const { return {std::vector<double>(values.size(), 0.0), index}; }

  bool operator==(const FlatParams&) const = default;
};

/// Flattens anything exposing visit_params(model, f(name, tensor)).
template <class Model>
FlatParams flatten(const Model& model) {
  FlatParams flat;
  visit_params(model, [&](const std::string& name, const Tensor2D& t) {
    flat.index.push_back({name, flat.values.size(), t.rows(), t.cols()});
    flat.values.insert(flat.values.end(), t.values().begin(), t.values().end());
  });
  return flat;
}

/// Copies flat values back into the model's tensors; layouts must match.
template <class Model>
void unflatten(const FlatParams& flat, Model& model) {
  std::size_t k = 0;
  visit_params(model, [&](const std::string& name, Tensor2D& t) {
    if (k >= flat.index.size()) throw ShapeError("unflatten: too few entries for " + name);
    const ParamEntry& e = flat.index[k++];
    if (e.name != name || e.rows != t.rows() || e.cols != t.cols()) {
      throw ShapeError("unflatten: entry " + e.name + " (" + std::to_string(e.rows) + "x" +
                       std::to_string(e.cols) + ") does not match " + name + " " +
                       t.shape_string());
    }
    std::copy(flat.values.begin() + static_cast<std::ptrdiff_t>(e.offset),
              flat.values.begin() + static_cast<std::ptrdiff_t>(e.offset + e.length()),
              t.values().begin());
  });
  if (k != flat.index.size()) throw ShapeError("unflatten: extra entries in flat params");
}

/// Name of the first tensor holding a non-finite value, or empty.
inline std::string first_nonfinite(const FlatParams& flat) {
  for (const auto& e : flat.index) {
    for (std::size_t i = e.offset; i < e.offset + e.length(); ++i) {
      if (!std::isfinite(flat.values[i])) return e.name;
    }
  }
  return {};
}

}  // namespace bayesrnn
